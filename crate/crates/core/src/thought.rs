//! High-level thought construction.
//!
//! Raw cases come from troubleshooting handbooks and from teacher rationales
//! on task samples (kept only when they reach the gold answer). The pooled
//! cases are thinned with DPP selection over their analysis embeddings, then
//! the teacher distills each into an overview, a core challenge and abstract
//! steps. Templates only reach the training set after human review.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, SftRecord};
use crate::diversity::{build_kernel, dpp_select, DiversityError, DEFAULT_JITTER};
use crate::gateway::{Gateway, GatewayError, Message, PromptRequest, DEFAULT_TEMPLATE_MAX_TOKENS, DEFAULT_TRAJECTORY_MAX_TOKENS};
use crate::model::{AnalysisCase, CaseError, CaseOrigin, ModelRole, ReviewStatus, TaskInstance, ThoughtTemplate, Vocabulary};
use crate::parse::{extract_json_object, parse_trajectory, split_steps};
use crate::prompt::{answer_options, task_description, PromptError, RATIONALE, THOUGHT_CONSTRUCTION, THOUGHT_RETRY};

pub const DEFAULT_RATIONALE_TEMPERATURE: f64 = 0.8;
pub const DEFAULT_DISTILL_TEMPERATURE: f64 = 0.0;

pub const THOUGHT_INSTRUCTION: &str = "Analyze the following log analysis problem. State its core challenge and \
outline the high-level steps an expert would follow to solve it.";

#[derive(Debug, Error)]
pub enum ThoughtError {
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("invalid filter: {0}")]
    InvalidFilter(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Diversity(#[from] DiversityError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestFilter {
    pub min_symptom_chars: usize,
    pub min_flowchart_steps: usize,
}

impl Default for IngestFilter {
    fn default() -> Self {
        IngestFilter { min_symptom_chars: 80, min_flowchart_steps: 3 }
    }
}

impl IngestFilter {
    pub fn new(min_symptom_chars: usize, min_flowchart_steps: usize) -> Result<Self, ThoughtError> {
        let f = IngestFilter { min_symptom_chars, min_flowchart_steps };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<(), ThoughtError> {
        if self.min_symptom_chars == 0 {
            return Err(ThoughtError::InvalidFilter("min_symptom_chars must be positive".into()));
        }
        if self.min_flowchart_steps < 3 {
            return Err(ThoughtError::InvalidFilter(format!(
                "min_flowchart_steps must be at least 3, got {}",
                self.min_flowchart_steps
            )));
        }
        Ok(())
    }
}

/// One line of a case file. `id` defaults to `<source>-<line>`, `origin` to
/// handbook; `flowchart_steps`, when present, is the authoritative step list.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseLine {
    #[serde(default)]
    id: Option<String>,
    problem: String,
    raw_analysis: String,
    #[serde(default = "handbook")]
    origin: CaseOrigin,
    source: String,
    #[serde(default)]
    gold: Option<crate::model::Label>,
    #[serde(default)]
    flowchart_steps: Option<Vec<String>>,
}

fn handbook() -> CaseOrigin {
    CaseOrigin::Handbook
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub cases: Vec<AnalysisCase>,
    pub dropped_short_symptom: usize,
    pub dropped_few_steps: usize,
}

/// Number of flowchart steps in a case's analysis.
pub fn flowchart_step_count(raw_analysis: &str) -> usize {
    split_steps(raw_analysis).len()
}

/// Reads a case file and drops cases with a too-short symptom description
/// or too few flowchart steps. Survivors keep file order.
pub fn ingest_handbook_cases(path: &Path, filter: &IngestFilter) -> Result<IngestReport, ThoughtError> {
    filter.validate()?;
    let io_err = |source| ThoughtError::Io { path: path.to_path_buf(), source };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut report = IngestReport::default();
    let mut seen = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let perr = |message: String| ThoughtError::Parse { path: path.to_path_buf(), line: lineno, message };
        let rec: CaseLine = serde_json::from_str(&line).map_err(|e| perr(e.to_string()))?;
        let case = AnalysisCase {
            id: rec.id.unwrap_or_else(|| format!("{}-{lineno}", rec.source)),
            problem: rec.problem,
            raw_analysis: rec.raw_analysis,
            origin: rec.origin,
            source: rec.source,
            gold: rec.gold,
        };
        case.validate().map_err(|e: CaseError| perr(e.to_string()))?;
        if !seen.insert(case.id.clone()) {
            return Err(perr(format!("duplicate case id `{}`", case.id)));
        }

        let steps = match &rec.flowchart_steps {
            Some(s) => s.iter().filter(|s| !s.trim().is_empty()).count(),
            None => flowchart_step_count(&case.raw_analysis),
        };
        if case.problem.trim().chars().count() < filter.min_symptom_chars {
            log::debug!("dropping {}: symptom description too short", case.id);
            report.dropped_short_symptom += 1;
        } else if steps < filter.min_flowchart_steps {
            log::debug!("dropping {}: {steps} flowchart step(s)", case.id);
            report.dropped_few_steps += 1;
        } else {
            report.cases.push(case);
        }
    }
    log::info!(
        "ingested {} case(s) from {}; dropped {} short, {} shallow",
        report.cases.len(),
        path.display(),
        report.dropped_short_symptom,
        report.dropped_few_steps
    );
    Ok(report)
}

fn rationale_prompt(vocab: &Vocabulary, instance: &TaskInstance) -> Result<Vec<Message>, PromptError> {
    let options = answer_options(vocab, instance.task);
    let input = instance.input.render();
    RATIONALE.render(&[
        ("task_description", task_description(instance.task)),
        ("answer_options", &options),
        ("input", &input),
    ])
}

/// Teacher rationales for task samples; only chains that reach the gold
/// answer become cases.
pub fn generate_rationales(
    gateway: &Gateway,
    vocab: &Vocabulary,
    instances: &[TaskInstance],
    teacher: &ModelRole,
    temperature: f64,
) -> Result<Vec<AnalysisCase>, PromptError> {
    let requests = instances
        .iter()
        .map(|inst| {
            Ok(PromptRequest::new(
                &teacher.endpoint_id,
                format!("rationale:{}", inst.id),
                rationale_prompt(vocab, inst)?,
                temperature,
                DEFAULT_TRAJECTORY_MAX_TOKENS,
            ))
        })
        .collect::<Result<Vec<_>, PromptError>>()?;
    let completions = gateway.complete_batch(&requests);

    let mut cases = Vec::new();
    for (inst, c) in instances.iter().zip(completions) {
        if c.is_error() {
            log::warn!("rationale for {} skipped: {}", inst.id, c.error.unwrap_or_default());
            continue;
        }
        let t = parse_trajectory(&c.text, inst.task, vocab);
        if !t.is_correct_for(&inst.gold) {
            log::debug!("rationale for {} discarded: does not reach the gold answer", inst.id);
            continue;
        }
        let raw_analysis = t
            .steps
            .iter()
            .enumerate()
            .map(|(i, s)| format!("Step {}: {}", i + 1, s))
            .collect::<Vec<_>>()
            .join("\n");
        cases.push(AnalysisCase {
            id: inst.id.clone(),
            problem: format!("{}\n{}", task_description(inst.task), inst.input.render()),
            raw_analysis,
            origin: CaseOrigin::TaskRationale,
            source: inst.source.clone(),
            gold: Some(inst.gold.clone()),
        });
    }
    Ok(cases)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// One selection over all cases.
    #[default]
    Pooled,
    /// Budget split across sources in proportion to their size, one
    /// selection per source.
    PerSource,
}

/// DPP-selects `budget` cases by analysis diversity, in selection order.
pub fn semantic_filter(
    gateway: &Gateway,
    cases: &[AnalysisCase],
    budget: usize,
    embedder: &ModelRole,
    mode: FilterMode,
) -> Result<Vec<AnalysisCase>, ThoughtError> {
    if budget > cases.len() {
        return Err(DiversityError::BudgetExceeded { k: budget, n: cases.len() }.into());
    }
    if budget == 0 {
        return Ok(Vec::new());
    }
    match mode {
        FilterMode::Pooled => select_group(gateway, cases, budget, embedder),
        FilterMode::PerSource => {
            let mut groups: BTreeMap<&str, Vec<AnalysisCase>> = BTreeMap::new();
            for c in cases {
                groups.entry(c.source.as_str()).or_default().push(c.clone());
            }
            let sizes: Vec<usize> = groups.values().map(Vec::len).collect();
            let quotas = proportional_split(budget, &sizes);
            let mut out = Vec::with_capacity(budget);
            for (group, quota) in groups.values().zip(quotas) {
                if quota > 0 {
                    out.extend(select_group(gateway, group, quota, embedder)?);
                }
            }
            Ok(out)
        }
    }
}

fn select_group(
    gateway: &Gateway,
    cases: &[AnalysisCase],
    budget: usize,
    embedder: &ModelRole,
) -> Result<Vec<AnalysisCase>, ThoughtError> {
    let texts: Vec<String> = cases.iter().map(|c| c.raw_analysis.clone()).collect();
    let vectors = gateway.embed(&embedder.endpoint_id, &texts)?;
    let kernel = build_kernel(&vectors, DEFAULT_JITTER)?;
    let selection = dpp_select(&kernel, budget)?;
    Ok(selection.indices.into_iter().map(|i| cases[i].clone()).collect())
}

/// Largest-remainder apportionment of `total` over groups of `sizes`
/// (ties to the earlier group). Never assigns a group more than its size.
pub fn proportional_split(total: usize, sizes: &[usize]) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let mut quotas: Vec<usize> = sizes.iter().map(|&s| total * s / n).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    // remainder of total*s/n, compared exactly as integers
    order.sort_by_key(|&i| std::cmp::Reverse((total * sizes[i]) % n));
    let mut left = total - quotas.iter().sum::<usize>();
    for &i in order.iter().cycle().take(sizes.len() * 2) {
        if left == 0 {
            break;
        }
        if quotas[i] < sizes[i] {
            quotas[i] += 1;
            left -= 1;
        }
    }
    quotas
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum DistillError {
    #[error("case {case_id} unparsed after retry: {reason}")]
    Unparsed { case_id: String, reason: String },
}

#[derive(Deserialize)]
struct TemplateReply {
    #[serde(default)]
    overview: String,
    challenge: String,
    steps: Vec<String>,
}

/// Reads the teacher's JSON thought, or says why it is unusable.
fn parse_template_reply(case: &AnalysisCase, reply: &str) -> Result<ThoughtTemplate, String> {
    let value = extract_json_object(reply).ok_or("reply holds no JSON object")?;
    let parsed: TemplateReply = serde_json::from_value(value).map_err(|e| format!("unexpected shape: {e}"))?;
    let steps: Vec<String> = parsed.steps.iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    if steps.is_empty() {
        return Err("\"steps\" must be a non-empty list".into());
    }
    if parsed.challenge.trim().is_empty() {
        return Err("\"challenge\" is empty".into());
    }
    Ok(ThoughtTemplate {
        id: template_id(case),
        problem: case.problem.clone(),
        overview: parsed.overview.trim().to_string(),
        challenge: parsed.challenge.trim().to_string(),
        steps,
        review: ReviewStatus::Pending,
    })
}

pub fn template_id(case: &AnalysisCase) -> String {
    format!("tpl-{}", case.id)
}

/// Distills each case into a pending template, index-aligned. A reply that
/// cannot be parsed gets one reprompt quoting the problem; a second failure
/// marks the case unparsed.
pub fn distill_templates(
    gateway: &Gateway,
    cases: &[AnalysisCase],
    teacher: &ModelRole,
) -> Result<Vec<Result<ThoughtTemplate, DistillError>>, PromptError> {
    let prompts = cases
        .iter()
        .map(|c| THOUGHT_CONSTRUCTION.render(&[("problem", &c.problem), ("raw_analysis", &c.raw_analysis)]))
        .collect::<Result<Vec<_>, _>>()?;
    let request = |i: usize, messages: Vec<Message>| {
        PromptRequest::new(
            &teacher.endpoint_id,
            format!("distill:{}", cases[i].id),
            messages,
            DEFAULT_DISTILL_TEMPERATURE,
            DEFAULT_TEMPLATE_MAX_TOKENS,
        )
    };

    let first: Vec<PromptRequest> = prompts.iter().enumerate().map(|(i, p)| request(i, p.clone())).collect();
    let replies = gateway.complete_batch(&first);
    let mut results: Vec<Option<Result<ThoughtTemplate, DistillError>>> = vec![None; cases.len()];
    let mut retry: Vec<(usize, Vec<Message>)> = Vec::new();
    for (i, c) in replies.into_iter().enumerate() {
        let outcome = if c.is_error() {
            Err(format!("gateway error: {}", c.error.clone().unwrap_or_default()))
        } else {
            parse_template_reply(&cases[i], &c.text)
        };
        match outcome {
            Ok(t) => results[i] = Some(Ok(t)),
            Err(reason) if c.is_error() => {
                results[i] = Some(Err(DistillError::Unparsed { case_id: cases[i].id.clone(), reason }))
            }
            Err(reason) => {
                let mut convo = prompts[i].clone();
                convo.push(Message::assistant(c.text));
                convo.extend(THOUGHT_RETRY.render(&[("reason", &reason)])?);
                retry.push((i, convo));
            }
        }
    }

    let second: Vec<PromptRequest> = retry.iter().map(|(i, m)| request(*i, m.clone())).collect();
    for ((i, _), c) in retry.iter().zip(gateway.complete_batch(&second)) {
        let outcome = if c.is_error() {
            Err(format!("gateway error: {}", c.error.unwrap_or_default()))
        } else {
            parse_template_reply(&cases[*i], &c.text)
        };
        results[*i] = Some(outcome.map_err(|reason| {
            log::warn!("case {} unparsed: {reason}", cases[*i].id);
            DistillError::Unparsed { case_id: cases[*i].id.clone(), reason }
        }));
    }
    Ok(results.into_iter().map(|r| r.expect("every case resolved")).collect())
}

pub fn distill_template(
    gateway: &Gateway,
    case: &AnalysisCase,
    teacher: &ModelRole,
) -> Result<Result<ThoughtTemplate, DistillError>, PromptError> {
    Ok(distill_templates(gateway, std::slice::from_ref(case), teacher)?.remove(0))
}

/// Line of the review queue handed to reviewers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewQueueItem {
    pub template_id: String,
    pub problem: String,
    pub overview: String,
    pub challenge: String,
    pub steps: Vec<String>,
}

impl From<&ThoughtTemplate> for ReviewQueueItem {
    fn from(t: &ThoughtTemplate) -> Self {
        ReviewQueueItem {
            template_id: t.id.clone(),
            problem: t.problem.clone(),
            overview: t.overview.clone(),
            challenge: t.challenge.clone(),
            steps: t.steps.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Approve,
    Edit,
    Reject,
}

/// Replacement content for an edited template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateEdit {
    #[serde(default)]
    pub overview: Option<String>,
    pub challenge: String,
    pub steps: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewDecision {
    pub template_id: String,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edited: Option<TemplateEdit>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReviewError {
    #[error("decision for unknown template `{0}`")]
    UnknownTemplateId(String),
    #[error("template `{0}` is not pending review")]
    NotPending(String),
    #[error("more than one decision for template `{0}`")]
    DuplicateDecision(String),
    #[error("edit of `{0}` carries no usable replacement (needs a challenge and at least one step)")]
    MissingEdit(String),
}

/// Applies reviewer decisions. Rejected templates are removed; undecided
/// ones stay pending (and are never emitted).
pub fn review_apply(
    templates: Vec<ThoughtTemplate>,
    decisions: &[ReviewDecision],
) -> Result<Vec<ThoughtTemplate>, ReviewError> {
    let index: BTreeMap<&str, usize> = templates.iter().enumerate().map(|(i, t)| (t.id.as_str(), i)).collect();
    let mut by_position: BTreeMap<usize, &ReviewDecision> = BTreeMap::new();
    for d in decisions {
        let &pos = index
            .get(d.template_id.as_str())
            .ok_or_else(|| ReviewError::UnknownTemplateId(d.template_id.clone()))?;
        if templates[pos].review != ReviewStatus::Pending {
            return Err(ReviewError::NotPending(d.template_id.clone()));
        }
        if by_position.insert(pos, d).is_some() {
            return Err(ReviewError::DuplicateDecision(d.template_id.clone()));
        }
        if d.verdict == Verdict::Edit {
            let ok = d
                .edited
                .as_ref()
                .is_some_and(|e| !e.challenge.trim().is_empty() && e.steps.iter().any(|s| !s.trim().is_empty()));
            if !ok {
                return Err(ReviewError::MissingEdit(d.template_id.clone()));
            }
        }
    }

    let mut out = Vec::with_capacity(templates.len());
    for (pos, mut t) in templates.into_iter().enumerate() {
        match by_position.get(&pos) {
            None => out.push(t),
            Some(d) => match d.verdict {
                Verdict::Reject => {}
                Verdict::Approve => {
                    t.review = ReviewStatus::Approved;
                    out.push(t);
                }
                Verdict::Edit => {
                    let e = d.edited.as_ref().expect("checked above");
                    if let Some(o) = &e.overview {
                        t.overview = o.clone();
                    }
                    t.challenge = e.challenge.clone();
                    t.steps = e.steps.iter().filter(|s| !s.trim().is_empty()).cloned().collect();
                    t.review = ReviewStatus::Edited;
                    out.push(t);
                }
            },
        }
    }
    Ok(out)
}

/// Supervision target for a thought: the core challenge, then numbered steps.
pub fn thought_target(t: &ThoughtTemplate) -> String {
    let mut s = format!("Core challenge: {}\nHigh-level steps:", t.challenge);
    for (i, step) in t.steps.iter().enumerate() {
        s.push_str(&format!("\n{}. {}", i + 1, step));
    }
    s
}

/// One SFT record per approved or edited template; anything else is skipped.
pub fn build_thought_sft(templates: &[ThoughtTemplate]) -> Result<Vec<SftRecord>, DatasetError> {
    templates
        .iter()
        .filter(|t| {
            let keep = t.is_emittable();
            if !keep {
                log::debug!("template {} not emitted ({:?})", t.id, t.review);
            }
            keep
        })
        .map(|t| SftRecord::new(THOUGHT_INSTRUCTION, t.problem.clone(), thought_target(t)))
        .collect()
}
