//! Parsing of model generations: think-then-answer tags, step segmentation
//! and JSON objects embedded in prose.

use std::sync::LazyLock;

use regex::Regex;
use serde_json::Value;

use crate::model::{TaskKind, Trajectory, Vocabulary};

static STEP_MARKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\bstep\s*(\d+)\s*[:.)\-]").expect("valid regex"));
static BULLET: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*(?:\d+\s*[.):]|[-*\u{2022}])\s*").expect("valid regex"));
static FENCE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?s)```(?:json)?\s*(.*?)```").expect("valid regex"));

/// Content between the first `<tag>` and the next `</tag>`.
pub fn extract_tag<'a>(text: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = text.find(&open)? + open.len();
    let end = text[start..].find(&close)? + start;
    Some(&text[start..end])
}

/// Splits a reasoning block into steps on `Step N:` markers, falling back to
/// one step per non-empty line (with list bullets removed).
pub fn split_steps(text: &str) -> Vec<String> {
    let markers: Vec<_> = STEP_MARKER.find_iter(text).collect();
    if !markers.is_empty() {
        let mut steps = Vec::with_capacity(markers.len());
        for (i, m) in markers.iter().enumerate() {
            let end = markers.get(i + 1).map_or(text.len(), |next| next.start());
            let step = text[m.end()..end].trim();
            if !step.is_empty() {
                steps.push(step.to_string());
            }
        }
        return steps;
    }
    text.lines()
        .map(|line| BULLET.replace(line, "").trim().to_string())
        .filter(|line| !line.is_empty())
        .collect()
}

/// Parses a think-then-answer generation.
///
/// `parse_ok` requires both tag pairs, at least one step, and an answer that
/// folds onto a canonical label.
pub fn parse_trajectory(raw: &str, task: TaskKind, vocab: &Vocabulary) -> Trajectory {
    let steps = extract_tag(raw, "solutions").map(split_steps).unwrap_or_default();
    let answer_text = extract_tag(raw, "answer").map(|a| a.trim().to_string());
    let answer = answer_text.as_deref().and_then(|a| vocab.canonicalize(task, a).ok());
    let note = match (&answer_text, &answer, steps.is_empty()) {
        (None, _, _) => Some("missing <answer> block".to_string()),
        (Some(_), None, _) => Some("answer does not fold onto a label".to_string()),
        (_, _, true) => Some("no steps inside <solutions>".to_string()),
        _ => None,
    };
    Trajectory {
        parse_ok: note.is_none(),
        steps,
        answer,
        answer_text,
        raw: raw.to_string(),
        note,
    }
}

/// First JSON object in a reply: the whole text, a fenced block, or the
/// span from the first `{` to the last `}`.
pub fn extract_json_object(text: &str) -> Option<Value> {
    let try_parse = |s: &str| serde_json::from_str::<Value>(s.trim()).ok().filter(Value::is_object);
    if let Some(v) = try_parse(text) {
        return Some(v);
    }
    for cap in FENCE.captures_iter(text) {
        if let Some(v) = try_parse(&cap[1]) {
            return Some(v);
        }
    }
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    (start < end).then(|| try_parse(&text[start..=end])).flatten()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::testing::vocab;

    #[test]
    fn well_formed_generation() {
        let raw = "<solutions>Step 1: inspect. Step 2: conclude.</solutions><answer>abnormal</answer>";
        let t = parse_trajectory(raw, TaskKind::AnomalyDetection, &vocab());
        assert!(t.parse_ok);
        assert_eq!(t.steps, vec!["inspect.", "conclude."]);
        assert_eq!(t.answer.unwrap().value(), "abnormal");
    }

    #[test]
    fn missing_close_answer_tag() {
        let raw = "<solutions>Step 1: inspect.</solutions><answer>abnormal";
        let t = parse_trajectory(raw, TaskKind::AnomalyDetection, &vocab());
        assert!(!t.parse_ok);
        assert!(t.answer.is_none());
        assert_eq!(t.steps, vec!["inspect."]);
    }

    #[test]
    fn synonym_answer_folds() {
        let raw = "<solutions>Step 1: the fan stopped.</solutions><answer>Failure detected</answer>";
        let t = parse_trajectory(raw, TaskKind::PotentialFailurePrediction, &vocab());
        assert!(t.parse_ok);
        assert_eq!(t.answer.unwrap().value(), "failure");
    }

    #[test]
    fn unfoldable_answer_is_not_ok() {
        let raw = "<solutions>Step 1: x</solutions><answer>maybe</answer>";
        let t = parse_trajectory(raw, TaskKind::AnomalyDetection, &vocab());
        assert!(!t.parse_ok);
        assert_eq!(t.answer_text.as_deref(), Some("maybe"));
    }

    #[test]
    fn empty_solutions_is_not_ok() {
        let t = parse_trajectory("<solutions> </solutions><answer>normal</answer>", TaskKind::AnomalyDetection, &vocab());
        assert!(!t.parse_ok);
        assert!(t.answer.is_some());
    }

    #[test]
    fn line_fallback_strips_bullets() {
        let steps = split_steps("\n1. check the link\n- verify the peer\n\n* restart\nplain line\n");
        assert_eq!(steps, vec!["check the link", "verify the peer", "restart", "plain line"]);
    }

    #[test]
    fn step_markers_handle_multiline_and_case() {
        let steps = split_steps("preamble\nSTEP 1) first\ncontinued\nstep 2 - second");
        assert_eq!(steps, vec!["first\ncontinued", "second"]);
    }

    #[test]
    fn json_extraction_variants() {
        assert!(extract_json_object(r#"{"a":1}"#).is_some());
        assert!(extract_json_object("Sure!\n```json\n{\"a\": 1}\n```\nDone").is_some());
        assert!(extract_json_object("Here: {\"a\": {\"b\": 2}} thanks").is_some());
        assert!(extract_json_object("no json here").is_none());
        assert!(extract_json_object("[1, 2]").is_none());
    }
}
