//! Terminal review of distilled templates.
//!
//! One template at a time: `a` approves, `r` rejects, `e` edits (new
//! overview, challenge and steps), `s` skips, `q` stops. Skipped and
//! unseen templates stay pending.

use std::io::{BufRead, Write};

use anyhow::Result;
use thoughtlog_core::model::ThoughtTemplate;
use thoughtlog_core::thought::{ReviewDecision, TemplateEdit, Verdict};

fn read_line(input: &mut dyn BufRead) -> Result<Option<String>> {
    let mut line = String::new();
    if input.read_line(&mut line)? == 0 {
        return Ok(None);
    }
    Ok(Some(line.trim_end_matches(['\n', '\r']).to_string()))
}

fn show(t: &ThoughtTemplate, pos: usize, total: usize, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "\n[{}/{}] {}", pos + 1, total, t.id)?;
    writeln!(out, "problem:\n  {}", t.problem.replace('\n', "\n  "))?;
    writeln!(out, "overview:  {}", t.overview)?;
    writeln!(out, "challenge: {}", t.challenge)?;
    for (i, s) in t.steps.iter().enumerate() {
        writeln!(out, "  {}. {}", i + 1, s)?;
    }
    Ok(())
}

/// Collects an edit; `None` when input ends or the edit is abandoned.
fn read_edit(t: &ThoughtTemplate, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<Option<TemplateEdit>> {
    write!(out, "overview (blank keeps current): ")?;
    out.flush()?;
    let Some(overview) = read_line(input)? else { return Ok(None) };
    write!(out, "challenge (blank keeps current): ")?;
    out.flush()?;
    let Some(challenge) = read_line(input)? else { return Ok(None) };
    writeln!(out, "steps, one per line, blank line to finish (none keeps current):")?;
    let mut steps = Vec::new();
    loop {
        let Some(line) = read_line(input)? else { return Ok(None) };
        if line.trim().is_empty() {
            break;
        }
        steps.push(line.trim().to_string());
    }
    Ok(Some(TemplateEdit {
        overview: (!overview.trim().is_empty()).then(|| overview.trim().to_string()),
        challenge: if challenge.trim().is_empty() { t.challenge.clone() } else { challenge.trim().to_string() },
        steps: if steps.is_empty() { t.steps.clone() } else { steps },
    }))
}

pub fn prompt_decisions(
    templates: &[&ThoughtTemplate],
    input: &mut dyn BufRead,
    out: &mut dyn Write,
) -> Result<Vec<ReviewDecision>> {
    let mut decisions = Vec::new();
    if templates.is_empty() {
        writeln!(out, "nothing to review")?;
        return Ok(decisions);
    }
    'templates: for (pos, t) in templates.iter().enumerate() {
        show(t, pos, templates.len(), out)?;
        loop {
            write!(out, "[a]pprove [e]dit [r]eject [s]kip [q]uit > ")?;
            out.flush()?;
            let Some(answer) = read_line(input)? else { break 'templates };
            let decision = match answer.trim() {
                "a" => ReviewDecision { template_id: t.id.clone(), verdict: Verdict::Approve, edited: None },
                "r" => ReviewDecision { template_id: t.id.clone(), verdict: Verdict::Reject, edited: None },
                "e" => match read_edit(t, input, out)? {
                    Some(edit) => ReviewDecision { template_id: t.id.clone(), verdict: Verdict::Edit, edited: Some(edit) },
                    None => break 'templates,
                },
                "s" => continue 'templates,
                "q" => break 'templates,
                other => {
                    writeln!(out, "unrecognised answer `{other}`")?;
                    continue;
                }
            };
            decisions.push(decision);
            continue 'templates;
        }
    }
    writeln!(out, "{} decision(s) recorded", decisions.len())?;
    Ok(decisions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use thoughtlog_core::model::ReviewStatus;

    fn tpl(id: &str) -> ThoughtTemplate {
        ThoughtTemplate {
            id: id.into(),
            problem: "p".into(),
            overview: "o".into(),
            challenge: "c".into(),
            steps: vec!["s1".into()],
            review: ReviewStatus::Pending,
        }
    }

    fn run(script: &str, ts: &[ThoughtTemplate]) -> Vec<ReviewDecision> {
        let refs: Vec<&ThoughtTemplate> = ts.iter().collect();
        let mut out = Vec::new();
        prompt_decisions(&refs, &mut script.as_bytes(), &mut out).unwrap()
    }

    #[test]
    fn approve_reject_skip() {
        let ts = [tpl("a"), tpl("b"), tpl("c")];
        let d = run("a\nx\ns\nr\n", &ts);
        assert_eq!(d.len(), 2);
        assert_eq!((d[0].template_id.as_str(), d[0].verdict), ("a", Verdict::Approve));
        assert_eq!((d[1].template_id.as_str(), d[1].verdict), ("c", Verdict::Reject));
    }

    #[test]
    fn edit_collects_replacement() {
        let ts = [tpl("a")];
        let d = run("e\n\nnew challenge\nfirst\nsecond\n\n", &ts);
        let e = d[0].edited.as_ref().unwrap();
        assert_eq!(d[0].verdict, Verdict::Edit);
        assert_eq!(e.overview, None);
        assert_eq!(e.challenge, "new challenge");
        assert_eq!(e.steps, vec!["first", "second"]);
    }

    #[test]
    fn quit_and_eof_stop_early() {
        let ts = [tpl("a"), tpl("b")];
        assert_eq!(run("a\nq\n", &ts).len(), 1);
        assert_eq!(run("a\n", &ts).len(), 1);
        assert!(run("e\n\n", &ts).is_empty());
    }
}
