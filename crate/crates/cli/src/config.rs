//! The run configuration: one TOML file naming endpoints, role bindings,
//! task vocabularies, stage parameters and the output directory.
//!
//! Relative paths are resolved against the directory holding the config
//! file. Credentials never appear here, only the names of the environment
//! variables that hold them.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thoughtlog_core::eval::DEFAULT_SESSION_WINDOW;
use thoughtlog_core::gateway::{EndpointConfig, GatewayConfig, DEFAULT_TRAJECTORY_MAX_TOKENS};
use thoughtlog_core::model::{parse_synonym_table, default_synonym_table, TaskKind, Vocabulary};
use thoughtlog_core::solution::{DEFAULT_CORRECTION_TEMPERATURE, DEFAULT_MAX_ATTEMPTS, DEFAULT_STUDENT_TEMPERATURE};
use thoughtlog_core::thought::{FilterMode, IngestFilter, DEFAULT_RATIONALE_TEMPERATURE};

/// The configuration is unusable; maps to exit status 2.
#[derive(Debug)]
pub struct ConfigInvalid(pub String);

impl fmt::Display for ConfigInvalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration: {}", self.0)
    }
}

impl std::error::Error for ConfigInvalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    ConfigInvalid(msg.into()).into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub gateway: GatewaySection,
    #[serde(default)]
    pub endpoints: BTreeMap<String, EndpointConfig>,
    pub roles: Roles,
    pub tasks: TasksSection,
    #[serde(default)]
    pub ingest: IngestSection,
    #[serde(default)]
    pub rationales: RationalesSection,
    #[serde(default)]
    pub select: SelectSection,
    #[serde(default)]
    pub generate: GenerateSection,
    #[serde(default)]
    pub calibrate: CalibrateSection,
    #[serde(default)]
    pub emit: EmitSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySection {
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub max_in_flight: usize,
    pub timeout_ms: u64,
    pub embed_batch_size: usize,
}

impl Default for GatewaySection {
    fn default() -> Self {
        let d = GatewayConfig::default();
        GatewaySection {
            max_retries: d.max_retries,
            backoff_base_ms: d.backoff_base_ms,
            max_in_flight: d.max_in_flight,
            timeout_ms: d.timeout_ms,
            embed_batch_size: d.embed_batch_size,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roles {
    pub teacher: String,
    pub student: String,
    pub embedder: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TasksSection {
    pub rca_categories: Vec<String>,
    #[serde(default)]
    pub rca_synonyms: BTreeMap<String, Vec<String>>,
    /// Replacement synonym table for the fixed-label tasks.
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default = "default_window")]
    pub session_window: usize,
    /// Exemplar file per task code; the shipped set is used otherwise.
    #[serde(default)]
    pub exemplars: BTreeMap<String, PathBuf>,
}

fn default_window() -> usize {
    DEFAULT_SESSION_WINDOW
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSection {
    pub cases: Vec<PathBuf>,
    pub min_symptom_chars: Option<usize>,
    pub min_flowchart_steps: Option<usize>,
}

impl IngestSection {
    pub fn filter(&self) -> IngestFilter {
        let d = IngestFilter::default();
        IngestFilter {
            min_symptom_chars: self.min_symptom_chars.unwrap_or(d.min_symptom_chars),
            min_flowchart_steps: self.min_flowchart_steps.unwrap_or(d.min_flowchart_steps),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RationalesSection {
    pub instances: Vec<PathBuf>,
    pub temperature: f64,
}

impl Default for RationalesSection {
    fn default() -> Self {
        RationalesSection { instances: Vec::new(), temperature: DEFAULT_RATIONALE_TEMPERATURE }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectSection {
    /// Number of cases to keep; all cases when absent.
    pub budget: Option<usize>,
    pub mode: FilterMode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub instances: Vec<PathBuf>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for GenerateSection {
    fn default() -> Self {
        GenerateSection {
            instances: Vec::new(),
            temperature: DEFAULT_STUDENT_TEMPERATURE,
            max_tokens: DEFAULT_TRAJECTORY_MAX_TOKENS,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateSection {
    pub temperature: f64,
    pub max_attempts: u32,
    pub max_tokens: u32,
}

impl Default for CalibrateSection {
    fn default() -> Self {
        CalibrateSection {
            temperature: DEFAULT_CORRECTION_TEMPERATURE,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            max_tokens: DEFAULT_TRAJECTORY_MAX_TOKENS,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmitSection {
    /// Also write shuffled all-task files; needs `seed`.
    pub mix: bool,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub temperature: f64,
    /// Endpoint to evaluate; the student role by default.
    pub endpoint: Option<String>,
    pub sets: Vec<EvalSet>,
}

/// One evaluation input. Exactly one of `instances`, `raw_logs` or
/// `lsm_corpus` is given.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSet {
    pub task: String,
    pub source: String,
    #[serde(default)]
    pub instances: Option<PathBuf>,
    #[serde(default)]
    pub raw_logs: Option<PathBuf>,
    /// Sidecar label file for plain-text `raw_logs`.
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default)]
    pub lsm_corpus: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl EvalSet {
    pub fn task_kind(&self) -> TaskKind {
        TaskKind::from_code(&self.task).expect("validated")
    }
}

impl RunConfig {
    /// Reads, resolves relative paths and validates.
    pub fn load(path: &Path) -> anyhow::Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        self.tasks.labels.iter_mut().for_each(fix);
        self.tasks.exemplars.values_mut().for_each(fix);
        self.ingest.cases.iter_mut().for_each(fix);
        self.rationales.instances.iter_mut().for_each(fix);
        self.generate.instances.iter_mut().for_each(fix);
        for set in &mut self.eval.sets {
            for p in [&mut set.instances, &mut set.raw_logs, &mut set.labels, &mut set.lsm_corpus] {
                p.iter_mut().for_each(fix);
            }
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        for (role, id) in [("teacher", &self.roles.teacher), ("student", &self.roles.student), ("embedder", &self.roles.embedder)] {
            if !self.endpoints.contains_key(id) {
                return Err(invalid(format!("role {role} is bound to unknown endpoint `{id}`")));
            }
        }
        if let Some(id) = &self.eval.endpoint {
            if !self.endpoints.contains_key(id) {
                return Err(invalid(format!("eval endpoint `{id}` is not configured")));
            }
        }
        self.vocabulary()?;
        self.ingest.filter().validate().map_err(|e| invalid(e.to_string()))?;
        if self.tasks.session_window == 0 {
            return Err(invalid("tasks.session_window must be positive"));
        }
        for code in self.tasks.exemplars.keys() {
            if TaskKind::from_code(code).is_none() {
                return Err(invalid(format!("tasks.exemplars: unknown task `{code}`")));
            }
        }
        if self.gateway.max_in_flight == 0 {
            return Err(invalid("gateway.max_in_flight must be positive"));
        }
        if self.calibrate.max_attempts == 0 {
            return Err(invalid("calibrate.max_attempts must be positive"));
        }
        if self.select.budget == Some(0) {
            return Err(invalid("select.budget must be positive"));
        }
        for t in [self.rationales.temperature, self.generate.temperature, self.calibrate.temperature] {
            if !(0.0..=2.0).contains(&t) {
                return Err(invalid(format!("temperature {t} outside [0, 2]")));
            }
        }
        check_eval_temperature(self.eval.temperature)?;
        if self.emit.mix && self.emit.seed.is_none() {
            return Err(invalid("emit.mix needs emit.seed"));
        }
        for set in &self.eval.sets {
            let Some(task) = TaskKind::from_code(&set.task) else {
                return Err(invalid(format!("eval set: unknown task `{}`", set.task)));
            };
            let given = [&set.instances, &set.raw_logs, &set.lsm_corpus].iter().filter(|p| p.is_some()).count();
            if given != 1 {
                return Err(invalid(format!(
                    "eval set {}/{}: give exactly one of instances, raw_logs, lsm_corpus",
                    set.task, set.source
                )));
            }
            if set.raw_logs.is_some() && task != TaskKind::AnomalyDetection {
                return Err(invalid("raw_logs eval sets are anomaly-detection only"));
            }
            if set.lsm_corpus.is_some() {
                if task != TaskKind::LogSemanticMatching {
                    return Err(invalid("lsm_corpus eval sets are log-semantic-matching only"));
                }
                if set.seed.is_none() {
                    return Err(invalid(format!("eval set {}/{}: negative sampling needs a seed", set.task, set.source)));
                }
            }
        }
        for p in self.input_paths() {
            if !p.exists() {
                return Err(invalid(format!("referenced path {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    fn input_paths(&self) -> Vec<&Path> {
        let mut v: Vec<&Path> = Vec::new();
        v.extend(self.tasks.labels.as_deref());
        v.extend(self.tasks.exemplars.values().map(PathBuf::as_path));
        v.extend(self.ingest.cases.iter().map(PathBuf::as_path));
        v.extend(self.rationales.instances.iter().map(PathBuf::as_path));
        v.extend(self.generate.instances.iter().map(PathBuf::as_path));
        for s in &self.eval.sets {
            for p in [&s.instances, &s.raw_logs, &s.labels, &s.lsm_corpus].into_iter().flatten() {
                v.push(p);
            }
        }
        v
    }

    pub fn vocabulary(&self) -> anyhow::Result<Vocabulary> {
        let table = match &self.tasks.labels {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
                parse_synonym_table(&text).map_err(|e| invalid(format!("{}: {e}", p.display())))?
            }
            None => default_synonym_table(),
        };
        Vocabulary::from_table(table, &self.tasks.rca_categories, &self.tasks.rca_synonyms)
            .map_err(|e| invalid(e.to_string()))
    }

    pub fn gateway_config(&self) -> GatewayConfig {
        let g = &self.gateway;
        GatewayConfig {
            endpoints: self.endpoints.clone(),
            max_retries: g.max_retries,
            backoff_base_ms: g.backoff_base_ms,
            max_in_flight: g.max_in_flight,
            timeout_ms: g.timeout_ms,
            embed_batch_size: g.embed_batch_size,
        }
    }
}

/// Evaluation always decodes greedily.
pub fn check_eval_temperature(t: f64) -> anyhow::Result<()> {
    if t != 0.0 {
        return Err(invalid(format!("evaluation temperature must be 0, got {t}")));
    }
    Ok(())
}
