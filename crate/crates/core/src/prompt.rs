//! Versioned prompt templates.
//!
//! Template files live in `templates/` and are compiled in. A file holds an
//! optional `[system]` section and a `[user]` section; `{{name}}`
//! placeholders are substituted in a single pass, so substituted values are
//! never re-expanded.

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::Message;
use crate::model::{TaskKind, Vocabulary};

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("template {template}: no value for placeholder `{name}`")]
    MissingValue { template: &'static str, name: String },
    #[error("template {template}: unterminated placeholder")]
    Unterminated { template: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: &'static str,
    pub version: &'static str,
    source: &'static str,
}

macro_rules! template {
    ($name:literal, $version:literal, $file:literal) => {
        PromptTemplate { name: $name, version: $version, source: include_str!(concat!("../templates/", $file)) }
    };
}

pub const THOUGHT_CONSTRUCTION: PromptTemplate =
    template!("thought_construction", "v1", "thought_construction.v1.txt");
pub const THOUGHT_RETRY: PromptTemplate =
    template!("thought_construction.retry", "v1", "thought_construction.retry.v1.txt");
pub const RATIONALE: PromptTemplate = template!("rationale", "v1", "rationale.v1.txt");
pub const SOLUTION_GENERATION: PromptTemplate =
    template!("solution_generation", "v1", "solution_generation.v1.txt");
pub const ERROR_CORRECTION: PromptTemplate = template!("error_correction", "v1", "error_correction.v1.txt");

const EVAL_AD: PromptTemplate = template!("eval_ad", "v1", "eval_ad.v1.txt");
const EVAL_LSM: PromptTemplate = template!("eval_lsm", "v1", "eval_lsm.v1.txt");
const EVAL_PFP: PromptTemplate = template!("eval_pfp", "v1", "eval_pfp.v1.txt");
const EVAL_RCA: PromptTemplate = template!("eval_rca", "v1", "eval_rca.v1.txt");

pub fn eval_template(task: TaskKind) -> PromptTemplate {
    match task {
        TaskKind::AnomalyDetection => EVAL_AD,
        TaskKind::LogSemanticMatching => EVAL_LSM,
        TaskKind::PotentialFailurePrediction => EVAL_PFP,
        TaskKind::RootCauseAnalysis => EVAL_RCA,
    }
}

pub fn all_templates() -> Vec<PromptTemplate> {
    let mut all = vec![THOUGHT_CONSTRUCTION, THOUGHT_RETRY, RATIONALE, SOLUTION_GENERATION, ERROR_CORRECTION];
    all.extend(TaskKind::ALL.map(eval_template));
    all
}

impl PromptTemplate {
    /// `name@version`, recorded in stage receipts.
    pub fn id(&self) -> String {
        format!("{}@{}", self.name, self.version)
    }

    /// SHA-256 of the template text.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.source.as_bytes()))
    }

    fn sections(&self) -> (Option<&'static str>, &'static str) {
        let src = self.source;
        match (src.find("[system]\n"), src.find("[user]\n")) {
            (Some(s), Some(u)) if s < u => (Some(src[s + 9..u].trim_end()), src[u + 7..].trim_end()),
            (_, Some(u)) => (None, src[u + 7..].trim_end()),
            _ => (None, src.trim_end()),
        }
    }

    /// Renders into chat messages (optional system message, then the user turn).
    pub fn render(&self, vars: &[(&str, &str)]) -> Result<Vec<Message>, PromptError> {
        let (system, user) = self.sections();
        let mut messages = Vec::with_capacity(2);
        if let Some(system) = system {
            messages.push(Message::system(self.substitute(system, vars)?));
        }
        messages.push(Message::user(self.substitute(user, vars)?));
        Ok(messages)
    }

    fn substitute(&self, text: &str, vars: &[(&str, &str)]) -> Result<String, PromptError> {
        let mut out = String::with_capacity(text.len());
        let mut rest = text;
        while let Some(start) = rest.find("{{") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            let end = after.find("}}").ok_or(PromptError::Unterminated { template: self.name })?;
            let name = after[..end].trim();
            let value = vars
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| PromptError::MissingValue { template: self.name, name: name.to_string() })?;
            out.push_str(value);
            rest = &after[end + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

pub fn task_description(task: TaskKind) -> &'static str {
    match task {
        TaskKind::AnomalyDetection => {
            "Decide whether the given logs contain an anomaly (a failure, fault or abnormal system behaviour)."
        }
        TaskKind::LogSemanticMatching => {
            "Decide whether the natural-language description is semantically consistent with the log."
        }
        TaskKind::PotentialFailurePrediction => {
            "Decide whether the device log indicates a potential system or device failure, or is only a notification."
        }
        TaskKind::RootCauseAnalysis => "Identify the root cause category of the problem reported by the log.",
    }
}

pub fn answer_options(vocab: &Vocabulary, task: TaskKind) -> String {
    vocab.labels(task).join(", ")
}
