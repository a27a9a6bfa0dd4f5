//! Domain types shared by every pipeline stage.
//!
//! Labels are canonical tokens drawn from a per-task [`Vocabulary`]. Model
//! answers are folded onto those tokens by [`Vocabulary::canonicalize`];
//! anything that cannot be folded is a [`NoMatch`] and is always scored as
//! wrong.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const RCA_CATEGORY_COUNT: usize = 5;

const DEFAULT_LABELS: &str = include_str!("../fixtures/labels.default.json");

/// Tokens that invert the phrase that follows them.
const NEGATORS: &[&str] = &[
    "not", "no", "non", "never", "without", "isnt", "doesnt", "dont", "wasnt", "cannot",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    AnomalyDetection,
    LogSemanticMatching,
    PotentialFailurePrediction,
    RootCauseAnalysis,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::AnomalyDetection,
        TaskKind::LogSemanticMatching,
        TaskKind::PotentialFailurePrediction,
        TaskKind::RootCauseAnalysis,
    ];

    /// Short identifier used in file names and on the command line.
    pub fn code(self) -> &'static str {
        match self {
            TaskKind::AnomalyDetection => "ad",
            TaskKind::LogSemanticMatching => "lsm",
            TaskKind::PotentialFailurePrediction => "pfp",
            TaskKind::RootCauseAnalysis => "rca",
        }
    }

    pub fn from_code(code: &str) -> Option<TaskKind> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.code().eq_ignore_ascii_case(code) || format!("{t:?}") == code)
    }

    pub fn display_name(self) -> &'static str {
        match self {
            TaskKind::AnomalyDetection => "Anomaly Detection",
            TaskKind::LogSemanticMatching => "Log Semantic Matching",
            TaskKind::PotentialFailurePrediction => "Potential Failure Prediction",
            TaskKind::RootCauseAnalysis => "Root Cause Analysis",
        }
    }

    /// Positive class for precision/recall/F1, when the task has one.
    pub fn positive_label(self) -> Option<&'static str> {
        match self {
            TaskKind::AnomalyDetection => Some("abnormal"),
            TaskKind::PotentialFailurePrediction => Some("failure"),
            TaskKind::LogSemanticMatching => Some("match"),
            TaskKind::RootCauseAnalysis => None,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

/// A canonical answer token for one task.
///
/// Only a [`Vocabulary`] hands out validated labels; deserialized labels are
/// re-checked with [`Vocabulary::validate`] at load boundaries.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Label {
    task: TaskKind,
    value: String,
}

impl Label {
    pub(crate) fn new_unchecked(task: TaskKind, value: impl Into<String>) -> Label {
        Label { task, value: value.into() }
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn value(&self) -> &str {
        &self.value
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.value)
    }
}

/// An answer that could not be folded onto any canonical label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("answer does not fold onto any canonical label")]
pub struct NoMatch;

#[derive(Debug, Error)]
pub enum VocabularyError {
    #[error("root cause analysis needs exactly {RCA_CATEGORY_COUNT} categories, got {0}")]
    RcaCategoryCount(usize),
    #[error("{task:?}: phrase `{phrase}` folds onto both `{first}` and `{second}`")]
    Overlap { task: TaskKind, phrase: String, first: String, second: String },
    #[error("{task:?}: synonym target `{target}` is not a canonical label")]
    UnknownTarget { task: TaskKind, target: String },
    #[error("{task:?}: empty label or synonym")]
    Empty { task: TaskKind },
    #[error("{task:?}: `{value}` is not a canonical label")]
    InvalidLabel { task: TaskKind, value: String },
    #[error("malformed synonym table: {0}")]
    Table(#[from] serde_json::Error),
}

/// Synonym table on disk: task → canonical label → synonyms.
pub type SynonymTable = BTreeMap<TaskKind, BTreeMap<String, Vec<String>>>;

#[derive(Debug, Clone)]
struct TaskVocab {
    labels: Vec<String>,
    /// normalized phrase tokens → index into `labels`, longest phrases first
    phrases: Vec<(Vec<String>, usize)>,
}

/// Canonical label sets and synonym folding for all four tasks.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tasks: BTreeMap<TaskKind, TaskVocab>,
}

impl Vocabulary {
    /// Shipped synonym table plus the configured root-cause categories.
    pub fn with_rca_categories<S: AsRef<str>>(categories: &[S]) -> Result<Vocabulary, VocabularyError> {
        Self::from_table(default_synonym_table(), categories, &BTreeMap::new())
    }

    pub fn from_table<S: AsRef<str>>(
        mut table: SynonymTable,
        rca_categories: &[S],
        rca_synonyms: &BTreeMap<String, Vec<String>>,
    ) -> Result<Vocabulary, VocabularyError> {
        if rca_categories.len() != RCA_CATEGORY_COUNT {
            return Err(VocabularyError::RcaCategoryCount(rca_categories.len()));
        }
        let mut rca: BTreeMap<String, Vec<String>> = rca_categories
            .iter()
            .map(|c| (c.as_ref().to_string(), Vec::new()))
            .collect();
        for (target, syns) in rca_synonyms {
            match rca.get_mut(target) {
                Some(list) => list.extend(syns.iter().cloned()),
                None => {
                    return Err(VocabularyError::UnknownTarget {
                        task: TaskKind::RootCauseAnalysis,
                        target: target.clone(),
                    })
                }
            }
        }
        table.insert(TaskKind::RootCauseAnalysis, rca);

        let mut tasks = BTreeMap::new();
        for task in TaskKind::ALL {
            let entries = table.get(&task).cloned().unwrap_or_default();
            tasks.insert(task, build_task_vocab(task, &entries, rca_categories)?);
        }
        Ok(Vocabulary { tasks })
    }

    pub fn labels(&self, task: TaskKind) -> &[String] {
        &self.tasks[&task].labels
    }

    /// Checked constructor for a canonical label.
    pub fn label(&self, task: TaskKind, value: &str) -> Result<Label, VocabularyError> {
        let norm = normalize(value).join(" ");
        if self.labels(task).iter().any(|l| *l == norm) {
            Ok(Label::new_unchecked(task, norm))
        } else {
            Err(VocabularyError::InvalidLabel { task, value: value.to_string() })
        }
    }

    pub fn validate(&self, label: &Label) -> Result<(), VocabularyError> {
        if self.labels(label.task).iter().any(|l| *l == label.value) {
            Ok(())
        } else {
            Err(VocabularyError::InvalidLabel { task: label.task, value: label.value.clone() })
        }
    }

    /// Folds a free-form model answer onto a canonical label.
    ///
    /// The text is lowercased, stripped of punctuation and split into word
    /// tokens. An exact phrase hit wins; otherwise every canonical label or
    /// synonym phrase found in the text (longest first, skipping occurrences
    /// right after a negation word) votes, and exactly one distinct label must
    /// remain.
    pub fn canonicalize(&self, task: TaskKind, raw: &str) -> Result<Label, NoMatch> {
        let vocab = &self.tasks[&task];
        let tokens = normalize(raw);
        if tokens.is_empty() {
            return Err(NoMatch);
        }
        if let Some((_, idx)) = vocab.phrases.iter().find(|(p, _)| *p == tokens) {
            return Ok(Label::new_unchecked(task, vocab.labels[*idx].clone()));
        }

        let mut consumed = vec![false; tokens.len()];
        let mut hits = BTreeSet::new();
        for (phrase, idx) in &vocab.phrases {
            let len = phrase.len();
            if len > tokens.len() {
                continue;
            }
            let mut start = 0;
            while start + len <= tokens.len() {
                let window = start..start + len;
                if tokens[window.clone()] == phrase[..] && !consumed[window.clone()].iter().any(|c| *c) {
                    let negated = start > 0
                        && is_negator(&tokens[start - 1])
                        && !is_negator(&phrase[0]);
                    if !negated {
                        hits.insert(*idx);
                        consumed[window].iter_mut().for_each(|c| *c = true);
                    }
                    start += len;
                } else {
                    start += 1;
                }
            }
        }
        match hits.len() {
            1 => {
                let idx = *hits.iter().next().unwrap();
                Ok(Label::new_unchecked(task, vocab.labels[idx].clone()))
            }
            _ => Err(NoMatch),
        }
    }
}

pub fn default_synonym_table() -> SynonymTable {
    serde_json::from_str(DEFAULT_LABELS).expect("shipped synonym table is valid JSON")
}

pub fn parse_synonym_table(json: &str) -> Result<SynonymTable, VocabularyError> {
    Ok(serde_json::from_str(json)?)
}

fn build_task_vocab<S: AsRef<str>>(
    task: TaskKind,
    entries: &BTreeMap<String, Vec<String>>,
    rca_categories: &[S],
) -> Result<TaskVocab, VocabularyError> {
    // Canonical order: fixed for binary tasks, configured order for RCA.
    let canonical: Vec<String> = match task {
        TaskKind::AnomalyDetection => vec!["normal".into(), "abnormal".into()],
        TaskKind::LogSemanticMatching => vec!["match".into(), "mismatch".into()],
        TaskKind::PotentialFailurePrediction => vec!["failure".into(), "notification".into()],
        TaskKind::RootCauseAnalysis => rca_categories.iter().map(|c| c.as_ref().to_string()).collect(),
    };
    let labels: Vec<String> = canonical.iter().map(|c| normalize(c).join(" ")).collect();
    if labels.iter().any(|l| l.is_empty()) {
        return Err(VocabularyError::Empty { task });
    }

    let mut owner: BTreeMap<Vec<String>, usize> = BTreeMap::new();
    let mut claim = |phrase: Vec<String>, idx: usize, labels: &[String]| {
        if phrase.is_empty() {
            return Err(VocabularyError::Empty { task });
        }
        match owner.get(&phrase) {
            Some(&prev) if prev != idx => Err(VocabularyError::Overlap {
                task,
                phrase: phrase.join(" "),
                first: labels[prev].clone(),
                second: labels[idx].clone(),
            }),
            _ => {
                owner.insert(phrase, idx);
                Ok(())
            }
        }
    };
    for (idx, label) in labels.iter().enumerate() {
        claim(normalize(label), idx, &labels)?;
    }
    for (target, synonyms) in entries {
        let norm_target = normalize(target).join(" ");
        let idx = labels
            .iter()
            .position(|l| *l == norm_target)
            .ok_or_else(|| VocabularyError::UnknownTarget { task, target: target.clone() })?;
        for syn in synonyms {
            claim(normalize(syn), idx, &labels)?;
        }
    }

    let mut phrases: Vec<(Vec<String>, usize)> = owner.into_iter().collect();
    phrases.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
    Ok(TaskVocab { labels, phrases })
}

/// Lowercase word tokens; apostrophes vanish, other punctuation separates.
pub(crate) fn normalize(raw: &str) -> Vec<String> {
    let cleaned: String = raw
        .chars()
        .filter(|c| *c != '\'' && *c != '\u{2019}')
        .map(|c| if c.is_alphanumeric() { c.to_ascii_lowercase() } else { ' ' })
        .collect();
    cleaned
        .split_whitespace()
        .map(|t| t.to_lowercase())
        .collect()
}

fn is_negator(token: &str) -> bool {
    NEGATORS.contains(&token)
}

/// True iff the prediction folded onto a label equal to the gold label.
pub fn match_answer(predicted: Result<&Label, NoMatch>, gold: &Label) -> bool {
    matches!(predicted, Ok(p) if p == gold)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub raw_line: String,
    pub source: String,
    pub seq_index: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_label: Option<Label>,
}

/// What a task instance asks about.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InputPayload {
    Log { log: String },
    Session { logs: Vec<String> },
    Pair { log: String, description: String },
}

impl InputPayload {
    /// Text block shown to a model.
    pub fn render(&self) -> String {
        match self {
            InputPayload::Log { log } => format!("Log: {log}"),
            InputPayload::Session { logs } => {
                let mut out = String::from("Log session:");
                for (i, l) in logs.iter().enumerate() {
                    out.push_str(&format!("\n[{}] {}", i + 1, l));
                }
                out
            }
            InputPayload::Pair { log, description } => {
                format!("Log: {log}\nDescription: {description}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub task: TaskKind,
    pub input: InputPayload,
    pub gold: Label,
    pub source: String,
}

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("instance {id}: gold label is for {label_task:?}, instance is {task:?}")]
    TaskMismatch { id: String, task: TaskKind, label_task: TaskKind },
    #[error("instance {id}: {source}")]
    Label { id: String, source: VocabularyError },
    #[error("instance {id}: payload does not fit {task:?}: {reason}")]
    Payload { id: String, task: TaskKind, reason: String },
}

impl TaskInstance {
    /// Checks the gold label and payload shape against the task.
    pub fn validate(&self, vocab: &Vocabulary, max_window: usize) -> Result<(), InstanceError> {
        if self.gold.task() != self.task {
            return Err(InstanceError::TaskMismatch {
                id: self.id.clone(),
                task: self.task,
                label_task: self.gold.task(),
            });
        }
        vocab
            .validate(&self.gold)
            .map_err(|source| InstanceError::Label { id: self.id.clone(), source })?;
        let bad = |reason: &str| InstanceError::Payload {
            id: self.id.clone(),
            task: self.task,
            reason: reason.to_string(),
        };
        match (self.task, &self.input) {
            (TaskKind::AnomalyDetection, InputPayload::Session { logs }) => {
                if logs.is_empty() || logs.len() > max_window {
                    return Err(bad("session must hold between 1 and window-size logs"));
                }
            }
            (TaskKind::AnomalyDetection, InputPayload::Log { .. }) => {}
            (TaskKind::LogSemanticMatching, InputPayload::Pair { .. }) => {}
            (TaskKind::PotentialFailurePrediction | TaskKind::RootCauseAnalysis, InputPayload::Log { .. }) => {}
            _ => return Err(bad("wrong payload kind")),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseOrigin {
    Handbook,
    TaskRationale,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisCase {
    pub id: String,
    pub problem: String,
    pub raw_analysis: String,
    pub origin: CaseOrigin,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Label>,
}

#[derive(Debug, Error, PartialEq)]
pub enum CaseError {
    #[error("case {0}: problem and analysis must be non-empty")]
    EmptyText(String),
    #[error("case {0}: handbook cases carry no gold label")]
    HandbookWithGold(String),
    #[error("case {0}: rationale cases must carry a gold label")]
    RationaleWithoutGold(String),
}

impl AnalysisCase {
    pub fn validate(&self) -> Result<(), CaseError> {
        if self.problem.trim().is_empty() || self.raw_analysis.trim().is_empty() {
            return Err(CaseError::EmptyText(self.id.clone()));
        }
        match (self.origin, &self.gold) {
            (CaseOrigin::Handbook, Some(_)) => Err(CaseError::HandbookWithGold(self.id.clone())),
            (CaseOrigin::TaskRationale, None) => Err(CaseError::RationaleWithoutGold(self.id.clone())),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    Pending,
    Approved,
    Edited,
    Rejected,
}

/// Distilled high-level thought for one problem.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThoughtTemplate {
    pub id: String,
    pub problem: String,
    pub overview: String,
    pub challenge: String,
    pub steps: Vec<String>,
    pub review: ReviewStatus,
}

impl ThoughtTemplate {
    pub fn is_emittable(&self) -> bool {
        matches!(self.review, ReviewStatus::Approved | ReviewStatus::Edited)
            && !self.challenge.trim().is_empty()
            && !self.steps.is_empty()
    }
}

/// A parsed think-then-answer generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<String>,
    pub answer: Option<Label>,
    /// Text found inside the answer tag, before folding.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_text: Option<String>,
    pub raw: String,
    pub parse_ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Trajectory {
    /// A trajectory standing in for a generation that never arrived.
    pub fn failed(note: impl Into<String>) -> Trajectory {
        Trajectory {
            steps: Vec::new(),
            answer: None,
            answer_text: None,
            raw: String::new(),
            parse_ok: false,
            note: Some(note.into()),
        }
    }

    pub fn is_correct_for(&self, gold: &Label) -> bool {
        self.parse_ok && match_answer(self.answer.as_ref().ok_or(NoMatch), gold)
    }

    /// Canonical think-then-answer text. Falls back to the raw generation
    /// when no steps were recovered.
    pub fn render(&self) -> String {
        if self.steps.is_empty() {
            return self.raw.clone();
        }
        let mut out = String::from("<solutions>\n");
        for (i, step) in self.steps.iter().enumerate() {
            out.push_str(&format!("Step {}: {}\n", i + 1, step));
        }
        out.push_str("</solutions>\n<answer>");
        match (&self.answer, &self.answer_text) {
            (Some(label), _) => out.push_str(label.value()),
            (None, Some(text)) => out.push_str(text.trim()),
            (None, None) => {}
        }
        out.push_str("</answer>");
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionResult {
    /// 1-based index of the first flawed step.
    pub first_error_index: usize,
    pub reflection: String,
    pub corrected: Trajectory,
}

#[derive(Debug, Error, PartialEq)]
pub enum CorrectionInvariant {
    #[error("first error index {index} outside 1..={len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("corrected trajectory did not parse")]
    NotParsed,
    #[error("corrected trajectory does not preserve the steps before the first error")]
    PrefixChanged,
}

impl CorrectionResult {
    pub fn new(
        rejected: &Trajectory,
        first_error_index: usize,
        reflection: String,
        corrected: Trajectory,
    ) -> Result<CorrectionResult, CorrectionInvariant> {
        let len = rejected.steps.len();
        if first_error_index < 1 || first_error_index > len {
            return Err(CorrectionInvariant::IndexOutOfRange { index: first_error_index, len });
        }
        if !corrected.parse_ok {
            return Err(CorrectionInvariant::NotParsed);
        }
        let keep = first_error_index - 1;
        if corrected.steps.len() < keep || corrected.steps[..keep] != rejected.steps[..keep] {
            return Err(CorrectionInvariant::PrefixChanged);
        }
        Ok(CorrectionResult { first_error_index, reflection, corrected })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    instance: TaskInstance,
    chosen: Trajectory,
    rejected: Trajectory,
}

#[derive(Debug, Error, PartialEq)]
pub enum PairInvariant {
    #[error("instance {0}: chosen answer does not equal gold")]
    ChosenWrong(String),
    #[error("instance {0}: rejected answer equals gold")]
    RejectedRight(String),
}

impl PreferencePair {
    pub fn new(instance: TaskInstance, chosen: Trajectory, rejected: Trajectory) -> Result<Self, PairInvariant> {
        if !chosen.is_correct_for(&instance.gold) {
            return Err(PairInvariant::ChosenWrong(instance.id));
        }
        if rejected.is_correct_for(&instance.gold) {
            return Err(PairInvariant::RejectedRight(instance.id));
        }
        Ok(PreferencePair { instance, chosen, rejected })
    }

    pub fn instance(&self) -> &TaskInstance {
        &self.instance
    }

    pub fn chosen(&self) -> &Trajectory {
        &self.chosen
    }

    pub fn rejected(&self) -> &Trajectory {
        &self.rejected
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleKind {
    Teacher,
    Student,
    Embedder,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelRole {
    pub role: RoleKind,
    pub endpoint_id: String,
}

impl ModelRole {
    pub fn teacher(endpoint_id: impl Into<String>) -> Self {
        ModelRole { role: RoleKind::Teacher, endpoint_id: endpoint_id.into() }
    }

    pub fn student(endpoint_id: impl Into<String>) -> Self {
        ModelRole { role: RoleKind::Student, endpoint_id: endpoint_id.into() }
    }

    pub fn embedder(endpoint_id: impl Into<String>) -> Self {
        ModelRole { role: RoleKind::Embedder, endpoint_id: endpoint_id.into() }
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;

    pub const RCA: [&str; 5] = [
        "communication failure",
        "device failure",
        "configuration error",
        "resource exhaustion",
        "protocol error",
    ];

    pub fn vocab() -> Vocabulary {
        Vocabulary::with_rca_categories(&RCA).unwrap()
    }

    pub fn label(task: TaskKind, value: &str) -> Label {
        vocab().label(task, value).unwrap()
    }
}
