//! Evaluation of a student endpoint: data preparation, 3-shot prompting at
//! temperature 0, answer extraction and scoring.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{write_atomic, DatasetError};
use crate::gateway::{Completion, Gateway, PromptRequest, DEFAULT_TRAJECTORY_MAX_TOKENS};
use crate::model::{InputPayload, Label, LogRecord, NoMatch, TaskInstance, TaskKind, Vocabulary};
use crate::parse::extract_tag;
use crate::prompt::{answer_options, eval_template, PromptError};

pub const EXEMPLAR_COUNT: usize = 3;
pub const DEFAULT_SESSION_WINDOW: usize = 20;
pub const EVAL_TEMPERATURE: f64 = 0.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to score")]
    EmptyInput,
    #[error("expected exactly {EXEMPLAR_COUNT} exemplars, got {0}")]
    ExemplarCountMismatch(usize),
    #[error("exemplar `{id}` is for {got:?}, evaluating {expected:?}")]
    ExemplarTask { id: String, expected: TaskKind, got: TaskKind },
    #[error("exemplar `{0}` is also an evaluated instance")]
    ExemplarOverlap(String),
    #[error("instance `{id}` is for {got:?}, evaluating {expected:?}")]
    InstanceTask { id: String, expected: TaskKind, got: TaskKind },
    #[error("negative sampling needs at least two distinct descriptions")]
    InsufficientCorpus,
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Consecutive logs judged together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub logs: Vec<LogRecord>,
    pub label: Label,
}

impl Session {
    pub fn to_instance(&self, id: impl Into<String>, source: impl Into<String>) -> TaskInstance {
        TaskInstance {
            id: id.into(),
            task: TaskKind::AnomalyDetection,
            input: InputPayload::Session { logs: self.logs.iter().map(|r| r.raw_line.clone()).collect() },
            gold: self.label.clone(),
            source: source.into(),
        }
    }
}

/// Non-overlapping windows of `window` records, keeping a trailing partial
/// window. A session is abnormal iff any member is; unlabeled members count
/// as normal.
pub fn sessionize(records: &[LogRecord], window: usize) -> Vec<Session> {
    assert!(window > 0, "window must be positive");
    records
        .chunks(window)
        .map(|chunk| {
            let abnormal = chunk.iter().any(|r| r.gold_label.as_ref().is_some_and(|l| l.value() == "abnormal"));
            let value = if abnormal { "abnormal" } else { "normal" };
            Session { logs: chunk.to_vec(), label: Label::new_unchecked(TaskKind::AnomalyDetection, value) }
        })
        .collect()
}

/// Matching pairs plus one seeded negative per log. Negatives are drawn
/// uniformly from the distinct descriptions whose text differs from the gold.
pub fn build_lsm_instances(
    vocab: &Vocabulary,
    pairs: &[(String, String)],
    seed: u64,
    source: &str,
) -> Result<Vec<TaskInstance>, EvalError> {
    let distinct: Vec<&str> = pairs.iter().map(|(_, d)| d.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    if distinct.len() < 2 {
        return Err(EvalError::InsufficientCorpus);
    }
    let task = TaskKind::LogSemanticMatching;
    let matched = vocab.label(task, "match").expect("match is canonical");
    let mismatched = vocab.label(task, "mismatch").expect("mismatch is canonical");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(pairs.len() * 2);
    for (i, (log, gold)) in pairs.iter().enumerate() {
        let gold_pos = distinct.binary_search(&gold.as_str()).expect("gold is in corpus");
        let mut pick = rng.random_range(0..distinct.len() - 1);
        if pick >= gold_pos {
            pick += 1;
        }
        let negative = distinct[pick];
        out.push(TaskInstance {
            id: format!("{source}-{i:05}-m"),
            task,
            input: InputPayload::Pair { log: log.clone(), description: gold.clone() },
            gold: matched.clone(),
            source: source.to_string(),
        });
        out.push(TaskInstance {
            id: format!("{source}-{i:05}-x"),
            task,
            input: InputPayload::Pair { log: log.clone(), description: negative.to_string() },
            gold: mismatched.clone(),
            source: source.to_string(),
        });
    }
    Ok(out)
}

/// A worked in-context example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub id: String,
    pub task: TaskKind,
    pub input: InputPayload,
    pub reasoning: Vec<String>,
    pub answer: Label,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExemplarLine {
    id: String,
    input: InputPayload,
    reasoning: Vec<String>,
    answer: String,
}

/// Shipped exemplar set for a task.
pub fn default_exemplar_source(task: TaskKind) -> &'static str {
    match task {
        TaskKind::AnomalyDetection => include_str!("../fixtures/exemplars/ad.jsonl"),
        TaskKind::LogSemanticMatching => include_str!("../fixtures/exemplars/lsm.jsonl"),
        TaskKind::PotentialFailurePrediction => include_str!("../fixtures/exemplars/pfp.jsonl"),
        TaskKind::RootCauseAnalysis => include_str!("../fixtures/exemplars/rca.jsonl"),
    }
}

/// Parses an exemplar JSONL document; answers must be canonical labels.
pub fn parse_exemplars(
    vocab: &Vocabulary,
    task: TaskKind,
    text: &str,
    origin: &Path,
) -> Result<Vec<Exemplar>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let perr = |message: String| EvalError::Parse { path: origin.to_path_buf(), line: i + 1, message };
        let l: ExemplarLine = serde_json::from_str(line).map_err(|e| perr(e.to_string()))?;
        let answer = vocab.label(task, &l.answer).map_err(|e| perr(e.to_string()))?;
        if l.reasoning.is_empty() {
            return Err(perr("exemplar reasoning is empty".into()));
        }
        out.push(Exemplar { id: l.id, task, input: l.input, reasoning: l.reasoning, answer });
    }
    if out.len() != EXEMPLAR_COUNT {
        return Err(EvalError::ExemplarCountMismatch(out.len()));
    }
    Ok(out)
}

pub fn default_exemplars(vocab: &Vocabulary, task: TaskKind) -> Result<Vec<Exemplar>, EvalError> {
    parse_exemplars(vocab, task, default_exemplar_source(task), Path::new(&format!("<builtin:{}>", task.code())))
}

pub fn load_exemplars(vocab: &Vocabulary, task: TaskKind, path: &Path) -> Result<Vec<Exemplar>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io { path: path.to_path_buf(), source })?;
    parse_exemplars(vocab, task, &text, path)
}

fn render_examples(exemplars: &[Exemplar]) -> String {
    exemplars
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let steps: String =
                e.reasoning.iter().enumerate().map(|(j, s)| format!("Step {}: {}\n", j + 1, s)).collect();
            format!(
                "Example {}:\n{}\n<solutions>\n{}</solutions>\n<answer>{}</answer>",
                i + 1,
                e.input.render(),
                steps,
                e.answer.value()
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// 3-shot prompt for one instance, at temperature 0.
pub fn build_icl_prompt(
    vocab: &Vocabulary,
    instance: &TaskInstance,
    exemplars: &[Exemplar],
    endpoint_id: &str,
) -> Result<PromptRequest, EvalError> {
    if exemplars.len() != EXEMPLAR_COUNT {
        return Err(EvalError::ExemplarCountMismatch(exemplars.len()));
    }
    if let Some(e) = exemplars.iter().find(|e| e.task != instance.task) {
        return Err(EvalError::ExemplarTask { id: e.id.clone(), expected: instance.task, got: e.task });
    }
    let options = answer_options(vocab, instance.task);
    let examples = render_examples(exemplars);
    let input = instance.input.render();
    let messages = eval_template(instance.task).render(&[
        ("answer_options", &options),
        ("examples", &examples),
        ("input", &input),
    ])?;
    Ok(PromptRequest::new(
        endpoint_id,
        format!("eval:{}:{}", instance.task.code(), instance.id),
        messages,
        EVAL_TEMPERATURE,
        DEFAULT_TRAJECTORY_MAX_TOKENS,
    ))
}

/// The `<answer>` tag if it folds onto a label, else the last non-empty
/// line of the completion.
pub fn extract_answer(vocab: &Vocabulary, completion: &Completion, task: TaskKind) -> Result<Label, NoMatch> {
    let text = &completion.text;
    if let Some(label) = extract_tag(text, "answer").and_then(|a| vocab.canonicalize(task, a).ok()) {
        return Ok(label);
    }
    let last = text
        .lines()
        .map(|l| l.replace("<answer>", " ").replace("</answer>", " "))
        .filter(|l| !l.trim().is_empty())
        .last()
        .ok_or(NoMatch)?;
    vocab.canonicalize(task, &last)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub task: TaskKind,
    pub n: usize,
    /// Positive-class label for precision/recall/F1, if the task has one.
    pub positive: Option<String>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub no_match: usize,
    pub per_class: BTreeMap<String, ClassMetrics>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f1)
}

/// Scores predictions against gold. NoMatch is wrong everywhere and counts
/// as a negative prediction for the positive class.
pub fn score(task: TaskKind, items: &[(Result<Label, NoMatch>, Label)]) -> Result<MetricSet, EvalError> {
    if items.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let n = items.len();
    let pred = |p: &Result<Label, NoMatch>| p.as_ref().ok().map(|l| l.value().to_string());

    let mut classes: BTreeSet<String> = items.iter().map(|(_, g)| g.value().to_string()).collect();
    classes.extend(items.iter().filter_map(|(p, _)| pred(p)));

    let mut per_class = BTreeMap::new();
    for c in &classes {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (p, g) in items {
            let p_is = pred(p).as_deref() == Some(c.as_str());
            let g_is = g.value() == c;
            match (p_is, g_is) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        let (precision, recall, f1) = prf(tp, fp, fn_);
        per_class.insert(c.clone(), ClassMetrics { support: tp + fn_, precision, recall, f1 });
    }

    let correct = items.iter().filter(|(p, g)| p.as_ref().ok() == Some(g)).count();
    let weighted_f1 = per_class.values().map(|m| m.support as f64 / n as f64 * m.f1).sum();
    let positive = task.positive_label();
    let (precision, recall, f1) = match positive {
        Some(pos) => {
            let m = per_class.get(pos).copied().unwrap_or(ClassMetrics { support: 0, precision: 0.0, recall: 0.0, f1: 0.0 });
            (Some(m.precision), Some(m.recall), Some(m.f1))
        }
        None => (None, None, None),
    };
    Ok(MetricSet {
        task,
        n,
        positive: positive.map(str::to_string),
        precision,
        recall,
        f1,
        accuracy: ratio(correct, n),
        weighted_f1,
        no_match: items.iter().filter(|(p, _)| p.is_err()).count(),
        per_class,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub instance_id: String,
    pub gold: String,
    /// `None` when the completion could not be folded onto a label.
    pub predicted: Option<String>,
    pub completion: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub task: TaskKind,
    pub endpoint_id: String,
    pub temperature: f64,
    pub template: String,
    pub exemplar_ids: Vec<String>,
    pub predictions: Vec<PredictionRecord>,
    pub metrics: MetricSet,
}

/// Evaluates `instances` on one endpoint with a fixed exemplar set.
pub fn run_eval(
    gateway: &Gateway,
    vocab: &Vocabulary,
    task: TaskKind,
    instances: &[TaskInstance],
    exemplars: &[Exemplar],
    endpoint_id: &str,
) -> Result<EvalRun, EvalError> {
    if instances.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if let Some(i) = instances.iter().find(|i| i.task != task) {
        return Err(EvalError::InstanceTask { id: i.id.clone(), expected: task, got: i.task });
    }
    let ids: BTreeSet<&str> = instances.iter().map(|i| i.id.as_str()).collect();
    if let Some(e) = exemplars.iter().find(|e| ids.contains(e.id.as_str())) {
        return Err(EvalError::ExemplarOverlap(e.id.clone()));
    }
    let requests = instances
        .iter()
        .map(|inst| build_icl_prompt(vocab, inst, exemplars, endpoint_id))
        .collect::<Result<Vec<_>, _>>()?;
    let completions = gateway.complete_batch(&requests);

    let mut scored = Vec::with_capacity(instances.len());
    let mut predictions = Vec::with_capacity(instances.len());
    for (inst, c) in instances.iter().zip(&completions) {
        let predicted = if c.is_error() { Err(NoMatch) } else { extract_answer(vocab, c, task) };
        predictions.push(PredictionRecord {
            instance_id: inst.id.clone(),
            gold: inst.gold.value().to_string(),
            predicted: predicted.as_ref().ok().map(|l| l.value().to_string()),
            completion: c.text.clone(),
            error: c.error.clone(),
        });
        scored.push((predicted, inst.gold.clone()));
    }
    Ok(EvalRun {
        task,
        endpoint_id: endpoint_id.to_string(),
        temperature: EVAL_TEMPERATURE,
        template: eval_template(task).id(),
        exemplar_ids: exemplars.iter().map(|e| e.id.clone()).collect(),
        predictions,
        metrics: score(task, &scored)?,
    })
}

fn pct(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

/// Aligned text summary of a run.
pub fn render_table(run: &EvalRun) -> String {
    let m = &run.metrics;
    let mut rows: Vec<(String, String)> = vec![
        ("Task".into(), run.task.display_name().into()),
        ("Endpoint".into(), run.endpoint_id.clone()),
        ("Instances".into(), m.n.to_string()),
        ("Unparsed answers".into(), m.no_match.to_string()),
    ];
    if let (Some(p), Some(r), Some(f)) = (m.precision, m.recall, m.f1) {
        rows.push(("Precision / Recall / F1".into(), format!("{} / {} / {}", pct(p), pct(r), pct(f))));
    }
    rows.push(("Accuracy / Weighted-F1".into(), format!("{} / {}", pct(m.accuracy), pct(m.weighted_f1))));
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (k, v) in &rows {
        out.push_str(&format!("{k:<width$}  {v}\n"));
    }
    out.push('\n');
    let cw = m.per_class.keys().map(String::len).max().unwrap_or(5).max(5);
    out.push_str(&format!("{:<cw$}  {:>7}  {:>9}  {:>6}  {:>6}\n", "class", "support", "precision", "recall", "f1"));
    for (c, cm) in &m.per_class {
        out.push_str(&format!(
            "{c:<cw$}  {:>7}  {:>9}  {:>6}  {:>6}\n",
            cm.support,
            pct(cm.precision),
            pct(cm.recall),
            pct(cm.f1)
        ));
    }
    out
}

/// Writes `<path>` (JSON with every prediction) and `<path>.txt` (the table).
/// Returns the table.
pub fn write_report(run: &EvalRun, path: &Path) -> Result<String, EvalError> {
    let mut json = serde_json::to_vec_pretty(run).expect("run serializes");
    json.push(b'\n');
    write_atomic(path, &json)?;
    let table = render_table(run);
    write_atomic(&table_path(path), table.as_bytes())?;
    Ok(table)
}

pub fn table_path(report: &Path) -> PathBuf {
    let mut s = report.as_os_str().to_owned();
    s.push(".txt");
    PathBuf::from(s)
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, Result<String, EvalError>)> + '_, EvalError> {
    let f = File::open(path).map_err(|source| EvalError::Io { path: path.to_path_buf(), source })?;
    Ok(BufReader::new(f)
        .lines()
        .enumerate()
        .map(move |(i, l)| (i + 1, l.map_err(|source| EvalError::Io { path: path.to_path_buf(), source }))))
}

#[derive(Deserialize)]
struct RawLogLine {
    raw_line: String,
    #[serde(default)]
    gold_label: Option<String>,
}

/// Raw anomaly-detection logs: either JSON lines `{raw_line, gold_label}`
/// or plain text with a sidecar file holding one label per line.
pub fn load_raw_logs(
    vocab: &Vocabulary,
    path: &Path,
    labels: Option<&Path>,
    source: &str,
) -> Result<Vec<LogRecord>, EvalError> {
    let task = TaskKind::AnomalyDetection;
    let fold = |p: &Path, line: usize, raw: &str| {
        vocab.canonicalize(task, raw).map_err(|_| EvalError::Parse {
            path: p.to_path_buf(),
            line,
            message: format!("label `{raw}` is not an anomaly-detection label"),
        })
    };
    let mut out = Vec::new();
    match labels {
        None => {
            for (line, l) in open_lines(path)? {
                let l = l?;
                if l.trim().is_empty() {
                    continue;
                }
                let rec: RawLogLine = serde_json::from_str(&l)
                    .map_err(|e| EvalError::Parse { path: path.to_path_buf(), line, message: e.to_string() })?;
                let gold_label = rec.gold_label.as_deref().map(|g| fold(path, line, g)).transpose()?;
                out.push(LogRecord { raw_line: rec.raw_line, source: source.into(), seq_index: out.len() as u64, gold_label });
            }
        }
        Some(label_path) => {
            let logs: Vec<String> = open_lines(path)?.map(|(_, l)| l).collect::<Result<_, _>>()?;
            let tags: Vec<String> = open_lines(label_path)?.map(|(_, l)| l).collect::<Result<_, _>>()?;
            if logs.len() != tags.len() {
                return Err(EvalError::Parse {
                    path: label_path.to_path_buf(),
                    line: tags.len().min(logs.len()) + 1,
                    message: format!("{} labels for {} log lines", tags.len(), logs.len()),
                });
            }
            for (i, (raw_line, tag)) in logs.into_iter().zip(tags).enumerate() {
                let gold_label = Some(fold(label_path, i + 1, tag.trim())?);
                out.push(LogRecord { raw_line, source: source.into(), seq_index: i as u64, gold_label });
            }
        }
    }
    Ok(out)
}

#[derive(Deserialize)]
struct LsmLine {
    log: String,
    description: String,
}

/// LSM corpus: JSON lines `{log, description}`.
pub fn load_lsm_corpus(path: &Path) -> Result<Vec<(String, String)>, EvalError> {
    let mut out = Vec::new();
    for (line, l) in open_lines(path)? {
        let l = l?;
        if l.trim().is_empty() {
            continue;
        }
        let rec: LsmLine = serde_json::from_str(&l)
            .map_err(|e| EvalError::Parse { path: path.to_path_buf(), line, message: e.to_string() })?;
        out.push((rec.log, rec.description));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::Finish;
    use crate::model::testing::{label, vocab};

    fn records(n: usize, abnormal_at: &[usize]) -> Vec<LogRecord> {
        (0..n)
            .map(|i| LogRecord {
                raw_line: format!("line {i}"),
                source: "BGL".into(),
                seq_index: i as u64,
                gold_label: Some(label(
                    TaskKind::AnomalyDetection,
                    if abnormal_at.contains(&i) { "abnormal" } else { "normal" },
                )),
            })
            .collect()
    }

    #[test]
    fn sessions_keep_remainder() {
        let s = sessionize(&records(45, &[]), 20);
        assert_eq!(s.iter().map(|s| s.logs.len()).collect::<Vec<_>>(), vec![20, 20, 5]);
    }

    #[test]
    fn session_label_is_any_member() {
        let s = sessionize(&records(40, &[]), 20);
        assert!(s.iter().all(|s| s.label.value() == "normal"));
        let s = sessionize(&records(40, &[25]), 20);
        assert_eq!(s[0].label.value(), "normal");
        assert_eq!(s[1].label.value(), "abnormal");
    }

    fn pairs(descs: &[&str]) -> Vec<(String, String)> {
        descs.iter().enumerate().map(|(i, d)| (format!("log {i}"), d.to_string())).collect()
    }

    #[test]
    fn lsm_counts_and_balance() {
        let out = build_lsm_instances(&vocab(), &pairs(&["a", "b", "c"]), 7, "hw").unwrap();
        assert_eq!(out.len(), 6);
        assert_eq!(out.iter().filter(|i| i.gold.value() == "match").count(), 3);
        assert_eq!(out, build_lsm_instances(&vocab(), &pairs(&["a", "b", "c"]), 7, "hw").unwrap());
    }

    #[test]
    fn lsm_negative_never_gold_text() {
        let p = pairs(&["dup", "dup", "other", "dup", "third"]);
        for seed in 0..50 {
            let out = build_lsm_instances(&vocab(), &p, seed, "hw").unwrap();
            for (pair, neg) in p.iter().zip(out.iter().skip(1).step_by(2)) {
                let InputPayload::Pair { description, .. } = &neg.input else { panic!() };
                assert_ne!(description, &pair.1);
            }
        }
        assert!(matches!(
            build_lsm_instances(&vocab(), &pairs(&["same", "same"]), 0, "hw"),
            Err(EvalError::InsufficientCorpus)
        ));
    }

    fn ad_instance(id: &str) -> TaskInstance {
        sessionize(&records(3, &[1]), 20)[0].to_instance(id, "BGL")
    }

    #[test]
    fn icl_prompt_shape() {
        let ex = default_exemplars(&vocab(), TaskKind::AnomalyDetection).unwrap();
        let req = build_icl_prompt(&vocab(), &ad_instance("q"), &ex, "student").unwrap();
        let user = &req.messages.last().unwrap().content;
        assert_eq!(user.matches("</solutions>\n<answer>").count(), 3);
        let last_example = user.rfind("Example 3:").unwrap();
        assert!(user.rfind("[1] line 0").unwrap() > last_example);
        assert_eq!(req.temperature, 0.0);
        let again = build_icl_prompt(&vocab(), &ad_instance("q"), &ex, "student").unwrap();
        assert_eq!(serde_json::to_string(&req).unwrap(), serde_json::to_string(&again).unwrap());
        assert!(matches!(
            build_icl_prompt(&vocab(), &ad_instance("q"), &ex[..2], "student"),
            Err(EvalError::ExemplarCountMismatch(2))
        ));
    }

    #[test]
    fn all_default_exemplar_sets_load() {
        for task in TaskKind::ALL {
            assert_eq!(default_exemplars(&vocab(), task).unwrap().len(), 3, "{task:?}");
        }
    }

    fn completion(text: &str) -> Completion {
        Completion { text: text.into(), finish: Finish::Stop, attempt_count: 1, error: None }
    }

    #[test]
    fn answer_extraction() {
        let v = vocab();
        let lsm = TaskKind::LogSemanticMatching;
        assert_eq!(extract_answer(&v, &completion("…<answer>mismatch</answer>"), lsm).unwrap().value(), "mismatch");
        let ad = TaskKind::AnomalyDetection;
        assert_eq!(
            extract_answer(&v, &completion("Some reasoning.\nConclusion: the log is normal."), ad).unwrap().value(),
            "normal"
        );
        assert_eq!(extract_answer(&v, &completion(""), ad), Err(NoMatch));
    }

    fn items(pairs: &[(&str, &str)]) -> Vec<(Result<Label, NoMatch>, Label)> {
        pairs
            .iter()
            .map(|(p, g)| {
                let pred = if p.is_empty() { Err(NoMatch) } else { Ok(label(TaskKind::AnomalyDetection, p)) };
                (pred, label(TaskKind::AnomalyDetection, g))
            })
            .collect()
    }

    #[test]
    fn perfect_scores() {
        let m = score(TaskKind::AnomalyDetection, &items(&[("abnormal", "abnormal"), ("normal", "normal")])).unwrap();
        for v in [m.precision.unwrap(), m.recall.unwrap(), m.f1.unwrap(), m.accuracy, m.weighted_f1] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn confusion_counts() {
        let mut v = vec![("abnormal", "abnormal"); 3];
        v.extend(vec![("abnormal", "normal"); 1]);
        v.extend(vec![("normal", "abnormal"); 2]);
        v.extend(vec![("normal", "normal"); 4]);
        let m = score(TaskKind::AnomalyDetection, &items(&v)).unwrap();
        assert!((m.precision.unwrap() - 0.75).abs() < 1e-4);
        assert!((m.recall.unwrap() - 0.6).abs() < 1e-4);
        assert!((m.f1.unwrap() - 0.6667).abs() < 1e-4);
    }

    #[test]
    fn no_match_is_negative_and_wrong() {
        let m = score(TaskKind::AnomalyDetection, &items(&[("", "abnormal"), ("", "normal")])).unwrap();
        assert_eq!(m.accuracy, 0.0);
        assert_eq!(m.no_match, 2);
        assert_eq!(m.recall, Some(0.0));
        assert!(score(TaskKind::AnomalyDetection, &[]).is_err());
    }

    #[test]
    fn rca_has_no_positive_class() {
        let l = label(TaskKind::RootCauseAnalysis, "device failure");
        let m = score(TaskKind::RootCauseAnalysis, &[(Ok(l.clone()), l)]).unwrap();
        assert!(m.precision.is_none());
        assert_eq!(m.accuracy, 1.0);
    }

    #[test]
    fn table_has_metric_rows() {
        let m = score(TaskKind::AnomalyDetection, &items(&[("abnormal", "abnormal")])).unwrap();
        let run = EvalRun {
            task: TaskKind::AnomalyDetection,
            endpoint_id: "student".into(),
            temperature: 0.0,
            template: "eval_ad@v1".into(),
            exemplar_ids: vec![],
            predictions: vec![],
            metrics: m,
        };
        let t = render_table(&run);
        assert!(t.contains("Precision / Recall / F1"));
        assert!(t.contains("Accuracy / Weighted-F1"));
    }
}
