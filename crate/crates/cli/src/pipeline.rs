//! The stage commands. Each reads the artifacts of earlier stages from the
//! output directory, writes its own through a staging area and leaves a
//! receipt behind.
//!
//! Output layout (relative to `output_dir`):
//!
//! ```text
//! stage1/cases.jsonl            ingest
//! stage1/rationale_cases.jsonl  rationales
//! stage1/selected.jsonl         select
//! stage1/templates.jsonl        distill (+ review_queue.jsonl, unparsed.jsonl)
//! stage1/reviewed.jsonl         review  (+ decisions.jsonl)
//! stage2/generations.jsonl      generate
//! stage2/corrections.jsonl      calibrate (+ dropped.jsonl, trajectories.jsonl)
//! datasets/*.jsonl              emit, each with a .manifest.json
//! eval/<task>.<source>.json     eval (+ .txt table)
//! stats/stats.{json,txt}        stats
//! receipts/<stage>.json
//! ```

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thoughtlog_core::dataset::{
    emit_dpo, emit_sft, read_instances, read_jsonl, sha256_hex, stats, to_jsonl, verify_manifest, DatasetMeta,
    DpoRecord, SftRecord, Stage,
};
use thoughtlog_core::eval::{
    build_lsm_instances, default_exemplars, load_exemplars, load_lsm_corpus, load_raw_logs, run_eval, sessionize,
    write_report,
};
use thoughtlog_core::gateway::{Gateway, MockBackend};
use thoughtlog_core::model::{
    AnalysisCase, CorrectionResult, ModelRole, PreferencePair, TaskInstance, TaskKind, ThoughtTemplate, Trajectory,
    Vocabulary,
};
use thoughtlog_core::prompt::{
    eval_template, ERROR_CORRECTION, RATIONALE, SOLUTION_GENERATION, THOUGHT_CONSTRUCTION, THOUGHT_RETRY,
};
use thoughtlog_core::solution::{
    correct_trajectories, generate_trajectories, partition_trajectories, solution_sft_record, CorrectionSettings,
    Disposition, GenerationSettings, TrajectoryDump,
};
use thoughtlog_core::thought::{
    build_thought_sft, distill_templates, generate_rationales, ingest_handbook_cases, review_apply, semantic_filter,
    DistillError, ReviewDecision, ReviewQueueItem, Verdict,
};

use crate::config::{check_eval_temperature, ConfigInvalid, RunConfig};
use crate::review;
use crate::workspace::{Receipt, Staging, Workspace};

pub const CASES: &str = "stage1/cases.jsonl";
pub const RATIONALE_CASES: &str = "stage1/rationale_cases.jsonl";
pub const SELECTED: &str = "stage1/selected.jsonl";
pub const TEMPLATES: &str = "stage1/templates.jsonl";
pub const REVIEW_QUEUE: &str = "stage1/review_queue.jsonl";
pub const UNPARSED: &str = "stage1/unparsed.jsonl";
pub const REVIEWED: &str = "stage1/reviewed.jsonl";
pub const DECISIONS: &str = "stage1/decisions.jsonl";
pub const GENERATIONS: &str = "stage2/generations.jsonl";
pub const CORRECTIONS: &str = "stage2/corrections.jsonl";
pub const DROPPED: &str = "stage2/dropped.jsonl";
pub const TRAJECTORIES: &str = "stage2/trajectories.jsonl";
pub const THOUGHT_SFT: &str = "datasets/thought_sft.jsonl";
pub const STATS_JSON: &str = "stats/stats.json";
pub const STATS_TEXT: &str = "stats/stats.txt";

/// Every upstream stage, in pipeline order. `eval` stands alone.
pub fn upstream(stage: &str) -> &'static [&'static str] {
    const ORDER: [&str; 8] = ["ingest", "rationales", "select", "distill", "review", "generate", "calibrate", "emit"];
    match stage {
        "select" => &ORDER[..2],
        "distill" => &ORDER[..3],
        "review" => &ORDER[..4],
        "generate" => &ORDER[..5],
        "calibrate" => &ORDER[..6],
        "emit" => &ORDER[..7],
        "stats" => &ORDER[..8],
        _ => &[],
    }
}

pub fn solution_sft_path(task: TaskKind) -> String {
    format!("datasets/solution_sft.{}.jsonl", task.code())
}

pub fn dpo_path(task: TaskKind) -> String {
    format!("datasets/dpo.{}.jsonl", task.code())
}

pub fn eval_report_path(task: TaskKind, source: &str) -> String {
    let safe: String = source.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect();
    format!("eval/{}.{safe}.json", task.code())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Ran(Receipt),
    /// Inputs unchanged since the last successful run; nothing was written.
    UpToDate(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationLine {
    pub instance: TaskInstance,
    pub trajectory: Trajectory,
    pub disposition: Disposition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionLine {
    pub instance_id: String,
    pub first_error_index: usize,
    pub reflection: String,
    pub corrected: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedLine {
    pub instance_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub task: Option<String>,
    pub temperature: Option<f64>,
    pub endpoint: Option<String>,
}

pub struct Pipeline {
    cfg: RunConfig,
    vocab: Vocabulary,
    gateway: Gateway,
    mock_hash: Option<String>,
    ws: Workspace,
    force: bool,
    messages: RefCell<String>,
}

fn file_key(p: &Path) -> String {
    format!("file:{}", p.display())
}

fn ensure_unique_ids<'a>(what: &str, ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            bail!("duplicate {what} id `{id}`");
        }
    }
    Ok(())
}

fn domain_of<'a>(sources: impl IntoIterator<Item = &'a str>) -> Option<String> {
    let set: BTreeSet<&str> = sources.into_iter().collect();
    (!set.is_empty()).then(|| set.into_iter().collect::<Vec<_>>().join(" & "))
}

impl Pipeline {
    pub fn open(cfg: RunConfig, mock_script: Option<&Path>, force: bool) -> Result<Pipeline> {
        let vocab = cfg.vocabulary()?;
        let (gateway, mock_hash) = match mock_script {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| ConfigInvalid(format!("cannot read mock script {}: {e}", p.display())))?;
                let backend = MockBackend::from_json(&text)
                    .map_err(|e| ConfigInvalid(format!("mock script {}: {e}", p.display())))?;
                (Gateway::new(cfg.gateway_config(), Arc::new(backend)), Some(sha256_hex(text.as_bytes())))
            }
            None => (Gateway::http(cfg.gateway_config()), None),
        };
        let ws = Workspace::open(&cfg.output_dir)?;
        Ok(Pipeline { cfg, vocab, gateway, mock_hash, ws, force, messages: RefCell::default() })
    }

    pub fn workspace(&self) -> &Workspace {
        &self.ws
    }

    fn teacher(&self) -> ModelRole {
        ModelRole::teacher(&self.cfg.roles.teacher)
    }

    fn student(&self) -> ModelRole {
        ModelRole::student(&self.cfg.roles.student)
    }

    fn embedder(&self) -> ModelRole {
        ModelRole::embedder(&self.cfg.roles.embedder)
    }

    fn endpoint_json(&self, id: &str) -> serde_json::Value {
        json!({"id": id, "config": self.cfg.endpoints.get(id)})
    }

    /// Receipt skeleton: the vocabulary definition always counts as an input,
    /// the responder script whenever the stage talks to a model.
    fn receipt(&self, stage: &str, uses_models: bool) -> Result<Receipt> {
        let mut r = Receipt::new(stage);
        if let Some(p) = &self.cfg.tasks.labels {
            r.input_file(file_key(p), p)?;
        }
        if uses_models {
            r.inputs.insert("mock-script".into(), self.mock_hash.clone().unwrap_or_else(|| "none".into()));
        }
        Ok(r)
    }

    fn params(&self, section: serde_json::Value) -> serde_json::Value {
        json!({
            "rca_categories": self.cfg.tasks.rca_categories,
            "rca_synonyms": self.cfg.tasks.rca_synonyms,
            "session_window": self.cfg.tasks.session_window,
            "stage": section,
        })
    }

    fn input(&self, r: &mut Receipt, rel: &str) -> Result<()> {
        r.input_file(rel, &self.ws.path(rel))
    }

    fn say(&self, text: impl AsRef<str>) {
        self.messages.borrow_mut().push_str(text.as_ref());
    }

    /// Progress and report text produced so far; drained by the caller.
    pub fn take_messages(&self) -> String {
        self.messages.take()
    }

    fn fresh(&self, r: &Receipt) -> bool {
        !self.force && self.ws.up_to_date(r)
    }

    fn commit(&self, staging: Staging, r: Receipt) -> Result<Outcome> {
        let r = staging.commit(r)?;
        let counts: Vec<String> = r.counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
        self.say(format!("{}: wrote {} file(s); {}\n", r.stage, r.outputs.len(), counts.join(" ")));
        Ok(Outcome::Ran(r))
    }

    fn up_to_date(&self, stage: &str) -> Outcome {
        self.say(format!("{stage}: up to date (inputs unchanged)\n"));
        Outcome::UpToDate(stage.to_string())
    }

    fn read_instance_files(&self, paths: &[PathBuf]) -> Result<Vec<TaskInstance>> {
        let mut all = Vec::new();
        for p in paths {
            all.extend(read_instances(p, &self.vocab, self.cfg.tasks.session_window)?);
        }
        ensure_unique_ids("instance", all.iter().map(|i| i.id.as_str()))?;
        Ok(all)
    }

    fn read_cases(&self, rel: &str) -> Result<Vec<AnalysisCase>> {
        let cases: Vec<AnalysisCase> = read_jsonl(&self.ws.path(rel))?;
        for c in &cases {
            c.validate().with_context(|| format!("{rel}: case {}", c.id))?;
            if let Some(g) = &c.gold {
                self.vocab.validate(g).with_context(|| format!("{rel}: case {}", c.id))?;
            }
        }
        Ok(cases)
    }

    fn read_generations(&self) -> Result<Vec<GenerationLine>> {
        let lines: Vec<GenerationLine> = read_jsonl(&self.ws.path(GENERATIONS))?;
        for l in &lines {
            l.instance.validate(&self.vocab, self.cfg.tasks.session_window)?;
            if let Some(a) = &l.trajectory.answer {
                self.vocab.validate(a)?;
            }
        }
        Ok(lines)
    }

    pub fn ingest(&self) -> Result<Outcome> {
        let stage = "ingest";
        self.ws.require(stage, upstream(stage))?;
        let filter = self.cfg.ingest.filter();
        let mut r = self.receipt(stage, false)?;
        for p in &self.cfg.ingest.cases {
            r.input_file(file_key(p), p)?;
        }
        r.params = self.params(json!(filter));
        if self.fresh(&r) {
            return Ok(self.up_to_date(stage));
        }

        let (mut cases, mut short, mut few) = (Vec::new(), 0, 0);
        for p in &self.cfg.ingest.cases {
            let report = ingest_handbook_cases(p, &filter)?;
            short += report.dropped_short_symptom;
            few += report.dropped_few_steps;
            cases.extend(report.cases);
        }
        ensure_unique_ids("case", cases.iter().map(|c| c.id.as_str()))?;
        let staging = self.ws.begin(stage)?;
        staging.write(CASES, &to_jsonl(&cases))?;
        r.counts.insert("kept".into(), cases.len());
        r.counts.insert("dropped_short_symptom".into(), short);
        r.counts.insert("dropped_few_steps".into(), few);
        self.commit(staging, r)
    }

    pub fn rationales(&self) -> Result<Outcome> {
        let stage = "rationales";
        self.ws.require(stage, upstream(stage))?;
        let sec = &self.cfg.rationales;
        let teacher = self.teacher();
        let mut r = self.receipt(stage, true)?;
        for p in &sec.instances {
            r.input_file(file_key(p), p)?;
        }
        r.params = self.params(json!({"temperature": sec.temperature, "teacher": self.endpoint_json(&teacher.endpoint_id)}));
        r.template(RATIONALE);
        if self.fresh(&r) {
            return Ok(self.up_to_date(stage));
        }

        let instances = self.read_instance_files(&sec.instances)?;
        let cases = generate_rationales(&self.gateway, &self.vocab, &instances, &teacher, sec.temperature)?;
        let staging = self.ws.begin(stage)?;
        staging.write(RATIONALE_CASES, &to_jsonl(&cases))?;
        r.counts.insert("instances".into(), instances.len());
        r.counts.insert("retained".into(), cases.len());
        self.commit(staging, r)
    }

    pub fn select(&self) -> Result<Outcome> {
        let stage = "select";
        self.ws.require(stage, upstream(stage))?;
        let embedder = self.embedder();
        let mut r = self.receipt(stage, true)?;
        self.input(&mut r, CASES)?;
        self.input(&mut r, RATIONALE_CASES)?;
        r.params = self.params(json!({"select": self.cfg.select, "embedder": self.endpoint_json(&embedder.endpoint_id)}));
        if self.fresh(&r) {
            return Ok(self.up_to_date(stage));
        }

        let mut pool = self.read_cases(CASES)?;
        pool.extend(self.read_cases(RATIONALE_CASES)?);
        ensure_unique_ids("case", pool.iter().map(|c| c.id.as_str()))?;
        let budget = self.cfg.select.budget.unwrap_or(pool.len());
        let selected = semantic_filter(&self.gateway, &pool, budget, &embedder, self.cfg.select.mode)?;
        let staging = self.ws.begin(stage)?;
        staging.write(SELECTED, &to_jsonl(&selected))?;
        r.counts.insert("pool".into(), pool.len());
        r.counts.insert("selected".into(), selected.len());
        self.commit(staging, r)
    }

    pub fn distill(&self) -> Result<Outcome> {
        let stage = "distill";
        self.ws.require(stage, upstream(stage))?;
        let teacher = self.teacher();
        let mut r = self.receipt(stage, true)?;
        self.input(&mut r, SELECTED)?;
        r.params = self.params(json!({"teacher": self.endpoint_json(&teacher.endpoint_id)}));
        r.template(THOUGHT_CONSTRUCTION);
        r.template(THOUGHT_RETRY);
        if self.fresh(&r) {
            return Ok(self.up_to_date(stage));
        }

        let cases = self.read_cases(SELECTED)?;
        let mut templates = Vec::new();
        let mut unparsed: Vec<DistillError> = Vec::new();
        for outcome in distill_templates(&self.gateway, &cases, &teacher)? {
            match outcome {
                Ok(t) => templates.push(t),
                Err(e) => unparsed.push(e),
            }
        }
        let queue: Vec<ReviewQueueItem> = templates.iter().map(ReviewQueueItem::from).collect();
        let staging = self.ws.begin(stage)?;
        staging.write(TEMPLATES, &to_jsonl(&templates))?;
        staging.write(REVIEW_QUEUE, &to_jsonl(&queue))?;
        staging.write(UNPARSED, &to_jsonl(&unparsed))?;
        r.counts.insert("templates".into(), templates.len());
        r.counts.insert("unparsed".into(), unparsed.len());
        self.commit(staging, r)
    }

    /// Applies a decisions file, or asks about every undecided template on
    /// `input`/`output` when no file is given.
    pub fn review(&self, decisions: Option<&Path>, input: &mut dyn BufRead, output: &mut dyn Write) -> Result<Outcome> {
        let stage = "review";
        self.ws.require(stage, upstream(stage))?;
        let mut r = self.receipt(stage, false)?;
        self.input(&mut r, TEMPLATES)?;
        let templates: Vec<ThoughtTemplate> = read_jsonl(&self.ws.path(TEMPLATES))?;

        let decided: Vec<ReviewDecision> = match decisions {
            Some(p) => {
                r.input_file(file_key(p), p)?;
                r.params = json!({"mode": "file"});
                if self.fresh(&r) {
                    return Ok(self.up_to_date(stage));
                }
                read_jsonl(p)?
            }
            None => {
                // earlier interactive answers carry over while the templates are unchanged
                let carried: Vec<ReviewDecision> = match self.ws.receipt(stage) {
                    Some(prev) if prev.inputs.get(TEMPLATES) == r.inputs.get(TEMPLATES) => {
                        read_jsonl(&self.ws.path(DECISIONS)).unwrap_or_default()
                    }
                    _ => Vec::new(),
                };
                let known: BTreeSet<&str> = carried.iter().map(|d| d.template_id.as_str()).collect();
                let open: Vec<&ThoughtTemplate> = templates.iter().filter(|t| !known.contains(t.id.as_str())).collect();
                let fresh = review::prompt_decisions(&open, input, output)?;
                r.params = json!({"mode": "interactive"});
                carried.into_iter().chain(fresh).collect()
            }
        };

        let reviewed = review_apply(templates, &decided)?;
        let staging = self.ws.begin(stage)?;
        staging.write(REVIEWED, &to_jsonl(&reviewed))?;
        staging.write(DECISIONS, &to_jsonl(&decided))?;
        for t in &reviewed {
            let status = serde_json::to_value(t.review)?.as_str().unwrap_or("unknown").to_string();
            *r.counts.entry(status).or_default() += 1;
        }
        r.counts.insert("rejected".into(), decided.iter().filter(|d| d.verdict == Verdict::Reject).count());
        self.commit(staging, r)
    }

    pub fn generate(&self) -> Result<Outcome> {
        let stage = "generate";
        self.ws.require(stage, upstream(stage))?;
        let sec = &self.cfg.generate;
        let student = self.student();
        let mut r = self.receipt(stage, true)?;
        for p in &sec.instances {
            r.input_file(file_key(p), p)?;
        }
        r.params = self.params(json!({
            "temperature": sec.temperature,
            "max_tokens": sec.max_tokens,
            "student": self.endpoint_json(&student.endpoint_id),
        }));
        r.template(SOLUTION_GENERATION);
        if self.fresh(&r) {
            return Ok(self.up_to_date(stage));
        }

        let instances = self.read_instance_files(&sec.instances)?;
        let settings = GenerationSettings { temperature: sec.temperature, max_tokens: sec.max_tokens };
        let trajectories = generate_trajectories(&self.gateway, &self.vocab, &instances, &student, &settings)?;
        let lines: Vec<GenerationLine> = instances
            .iter()
            .zip(&trajectories)
            .map(|(inst, t)| GenerationLine {
                instance: inst.clone(),
                trajectory: t.clone(),
                disposition: if t.is_correct_for(&inst.gold) { Disposition::Correct } else { Disposition::Erroneous },
            })
            .collect();
        let partition = partition_trajectories(instances.into_iter().zip(trajectories).collect());

        let staging = self.ws.begin(stage)?;
        staging.write(GENERATIONS, &to_jsonl(&lines))?;
        r.counts.insert("correct".into(), partition.correct.len());
        r.counts.insert("erroneous".into(), partition.erroneous.len());
        for ((task, source), c) in &partition.counts {
            r.counts.insert(format!("{}/{source}/correct", task.code()), c.correct);
            r.counts.insert(format!("{}/{source}/erroneous", task.code()), c.erroneous);
        }
        self.commit(staging, r)
    }

    pub fn calibrate(&self) -> Result<Outcome> {
        let stage = "calibrate";
        self.ws.require(stage, upstream(stage))?;
        let sec = &self.cfg.calibrate;
        let teacher = self.teacher();
        let mut r = self.receipt(stage, true)?;
        self.input(&mut r, GENERATIONS)?;
        r.params = self.params(json!({"calibrate": sec, "teacher": self.endpoint_json(&teacher.endpoint_id)}));
        r.template(ERROR_CORRECTION);
        if self.fresh(&r) {
            return Ok(self.up_to_date(stage));
        }

        let lines = self.read_generations()?;
        let erroneous: Vec<(TaskInstance, Trajectory)> = lines
            .iter()
            .filter(|l| l.disposition == Disposition::Erroneous)
            .map(|l| (l.instance.clone(), l.trajectory.clone()))
            .collect();
        let settings =
            CorrectionSettings { temperature: sec.temperature, max_tokens: sec.max_tokens, max_attempts: sec.max_attempts };
        let outcomes = correct_trajectories(&self.gateway, &self.vocab, &erroneous, &teacher, &settings)?;

        let mut fixed = BTreeMap::new();
        let mut corrections = Vec::new();
        let mut dropped = Vec::new();
        for ((inst, _), outcome) in erroneous.iter().zip(outcomes) {
            match outcome {
                Ok(c) => {
                    corrections.push(CorrectionLine {
                        instance_id: inst.id.clone(),
                        first_error_index: c.first_error_index,
                        reflection: c.reflection,
                        corrected: c.corrected.clone(),
                    });
                    fixed.insert(inst.id.clone(), c.corrected);
                }
                Err(e) => dropped.push(DroppedLine { instance_id: inst.id.clone(), reason: e.to_string() }),
            }
        }
        let mut dumps = Vec::new();
        for l in &lines {
            match (l.disposition, fixed.get(&l.instance.id)) {
                (Disposition::Correct, _) => dumps.push(TrajectoryDump::new(&l.instance, &l.trajectory, Disposition::Correct)),
                (_, Some(corrected)) => {
                    dumps.push(TrajectoryDump::new(&l.instance, &l.trajectory, Disposition::Erroneous));
                    dumps.push(TrajectoryDump::new(&l.instance, corrected, Disposition::Corrected));
                }
                (_, None) => dumps.push(TrajectoryDump::new(&l.instance, &l.trajectory, Disposition::Dropped)),
            }
        }

        let staging = self.ws.begin(stage)?;
        staging.write(CORRECTIONS, &to_jsonl(&corrections))?;
        staging.write(DROPPED, &to_jsonl(&dropped))?;
        staging.write(TRAJECTORIES, &to_jsonl(&dumps))?;
        r.counts.insert("erroneous".into(), erroneous.len());
        r.counts.insert("corrected".into(), corrections.len());
        r.counts.insert("dropped".into(), dropped.len());
        self.commit(staging, r)
    }

    pub fn emit(&self) -> Result<Outcome> {
        let stage = "emit";
        self.ws.require(stage, upstream(stage))?;
        let mut r = self.receipt(stage, false)?;
        for rel in [SELECTED, REVIEWED, GENERATIONS, CORRECTIONS] {
            self.input(&mut r, rel)?;
        }
        r.params = self.params(json!(self.cfg.emit));
        r.template(SOLUTION_GENERATION);
        if self.fresh(&r) {
            return Ok(self.up_to_date(stage));
        }
        let staging = self.ws.begin(stage)?;

        // stage 1: reviewed thought templates
        let reviewed: Vec<ThoughtTemplate> = read_jsonl(&self.ws.path(REVIEWED))?;
        let selected = self.read_cases(SELECTED)?;
        let source_of: BTreeMap<String, &str> =
            selected.iter().map(|c| (thoughtlog_core::thought::template_id(c), c.source.as_str())).collect();
        let thought = build_thought_sft(&reviewed)?;
        let thought_meta = DatasetMeta {
            task: None,
            source_domain: domain_of(
                reviewed.iter().filter(|t| t.is_emittable()).filter_map(|t| source_of.get(&t.id).copied()),
            ),
        };
        emit_sft(Stage::ThoughtSft, &thought, &staging.path(THOUGHT_SFT), &thought_meta)?;
        r.counts.insert("thought_sft".into(), thought.len());

        // stage 2: per task, ordered by instance id
        let lines = self.read_generations()?;
        let by_id: BTreeMap<&str, &GenerationLine> = lines.iter().map(|l| (l.instance.id.as_str(), l)).collect();
        let corrections: Vec<CorrectionLine> = read_jsonl(&self.ws.path(CORRECTIONS))?;
        let mut tasks: BTreeMap<TaskKind, (Vec<&GenerationLine>, Vec<PreferencePair>)> = BTreeMap::new();
        for l in &lines {
            let entry = tasks.entry(l.instance.task).or_default();
            if l.disposition == Disposition::Correct {
                entry.0.push(l);
            }
        }
        for c in &corrections {
            let l = by_id
                .get(c.instance_id.as_str())
                .ok_or_else(|| anyhow!("correction for unknown instance `{}`", c.instance_id))?;
            if l.disposition != Disposition::Erroneous {
                bail!("correction for `{}`, which was not erroneous", c.instance_id);
            }
            let checked = CorrectionResult::new(&l.trajectory, c.first_error_index, c.reflection.clone(), c.corrected.clone())
                .with_context(|| format!("correction for `{}`", c.instance_id))?;
            let pair = PreferencePair::new(l.instance.clone(), checked.corrected, l.trajectory.clone())
                .with_context(|| format!("preference pair for `{}`", c.instance_id))?;
            tasks.entry(l.instance.task).or_default().1.push(pair);
        }

        let mut sft_sets: Vec<Vec<SftRecord>> = Vec::new();
        let mut dpo_sets: Vec<Vec<DpoRecord>> = Vec::new();
        for (task, (mut correct, mut pairs)) in tasks {
            correct.sort_by(|a, b| a.instance.id.cmp(&b.instance.id));
            pairs.sort_by(|a, b| a.instance().id.cmp(&b.instance().id));
            let sources = lines.iter().filter(|l| l.instance.task == task).map(|l| l.instance.source.as_str());
            let meta = DatasetMeta { task: Some(task.display_name().to_string()), source_domain: domain_of(sources) };
            let sft = correct
                .iter()
                .map(|l| solution_sft_record(&self.vocab, &l.instance, &l.trajectory))
                .collect::<Result<Vec<_>, _>>()?;
            emit_sft(Stage::SolutionSft, &sft, &staging.path(&solution_sft_path(task)), &meta)?;
            emit_dpo(&pairs, &self.vocab, &staging.path(&dpo_path(task)), &meta)?;
            r.counts.insert(format!("solution_sft.{}", task.code()), sft.len());
            r.counts.insert(format!("dpo.{}", task.code()), pairs.len());
            dpo_sets.push(pairs.iter().map(|p| DpoRecord::from_pair(p, &self.vocab)).collect::<Result<Vec<_>, _>>()?);
            sft_sets.push(sft);
        }

        if self.cfg.emit.mix {
            let seed = self.cfg.emit.seed.expect("validated: mix needs a seed");
            let meta = DatasetMeta::default();
            let sft = thoughtlog_core::dataset::mix(&sft_sets, seed);
            let dpo = thoughtlog_core::dataset::mix(&dpo_sets, seed);
            emit_sft(Stage::SolutionSft, &sft, &staging.path("datasets/mixed/solution_sft.jsonl"), &meta)?;
            thoughtlog_core::dataset::emit_dpo_records(&dpo, &staging.path("datasets/mixed/dpo.jsonl"), &meta)?;
        }
        self.commit(staging, r)
    }

    pub fn eval(&self, opts: &EvalOptions) -> Result<Outcome> {
        let temperature = opts.temperature.unwrap_or(self.cfg.eval.temperature);
        check_eval_temperature(temperature)?;
        let endpoint = opts
            .endpoint
            .clone()
            .or_else(|| self.cfg.eval.endpoint.clone())
            .unwrap_or_else(|| self.cfg.roles.student.clone());
        if !self.cfg.endpoints.contains_key(&endpoint) {
            return Err(ConfigInvalid(format!("eval endpoint `{endpoint}` is not configured")).into());
        }
        let filter = match &opts.task {
            Some(code) => Some(
                TaskKind::from_code(code).ok_or_else(|| ConfigInvalid(format!("unknown task `{code}`")))?,
            ),
            None => None,
        };
        let sets: Vec<_> =
            self.cfg.eval.sets.iter().filter(|s| filter.is_none_or(|t| s.task_kind() == t)).collect();
        if sets.is_empty() {
            bail!("no eval sets configured{}", filter.map(|t| format!(" for task {}", t.code())).unwrap_or_default());
        }
        let stage = match filter {
            Some(t) => format!("eval.{}", t.code()),
            None => "eval".to_string(),
        };

        let mut r = self.receipt(&stage, true)?;
        let mut tasks = BTreeSet::new();
        for s in &sets {
            for p in [&s.instances, &s.raw_logs, &s.labels, &s.lsm_corpus].into_iter().flatten() {
                r.input_file(file_key(p), p)?;
            }
            tasks.insert(s.task_kind());
        }
        for t in &tasks {
            if let Some(p) = self.cfg.tasks.exemplars.get(t.code()) {
                r.input_file(file_key(p), p)?;
            }
            r.template(eval_template(*t));
        }
        r.params = self.params(json!({"sets": sets, "endpoint": self.endpoint_json(&endpoint), "temperature": temperature}));
        if self.fresh(&r) {
            return Ok(self.up_to_date(&stage));
        }

        let staging = self.ws.begin(&stage)?;
        let mut written = BTreeSet::new();
        for s in &sets {
            let task = s.task_kind();
            let instances = self.eval_instances(s)?;
            let exemplars = match self.cfg.tasks.exemplars.get(task.code()) {
                Some(p) => load_exemplars(&self.vocab, task, p)?,
                None => default_exemplars(&self.vocab, task)?,
            };
            let run = run_eval(&self.gateway, &self.vocab, task, &instances, &exemplars, &endpoint)?;
            let rel = eval_report_path(task, &s.source);
            if !written.insert(rel.clone()) {
                bail!("two eval sets map to {rel}; give them distinct sources");
            }
            let table = write_report(&run, &staging.path(&rel))?;
            self.say(format!("== {} / {} ==\n{table}\n", task.display_name(), s.source));
            r.counts.insert(format!("{}/{}", task.code(), s.source), instances.len());
        }
        self.commit(staging, r)
    }

    fn eval_instances(&self, s: &crate::config::EvalSet) -> Result<Vec<TaskInstance>> {
        if let Some(p) = &s.instances {
            return Ok(read_instances(p, &self.vocab, self.cfg.tasks.session_window)?);
        }
        if let Some(p) = &s.raw_logs {
            let records = load_raw_logs(&self.vocab, p, s.labels.as_deref(), &s.source)?;
            return Ok(sessionize(&records, self.cfg.tasks.session_window)
                .iter()
                .enumerate()
                .map(|(i, session)| session.to_instance(format!("{}-s{i:06}", s.source), &s.source))
                .collect());
        }
        let p = s.lsm_corpus.as_ref().expect("validated: one source per set");
        let pairs = load_lsm_corpus(p)?;
        Ok(build_lsm_instances(&self.vocab, &pairs, s.seed.expect("validated"), &s.source)?)
    }

    pub fn stats(&self) -> Result<Outcome> {
        let stage = "stats";
        self.ws.require(stage, upstream(stage))?;
        let mut manifests_files: Vec<PathBuf> = fs::read_dir(self.ws.path("datasets"))
            .context("listing datasets")?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.to_string_lossy().ends_with(".manifest.json"))
            .collect();
        manifests_files.sort();
        let mut r = self.receipt(stage, false)?;
        for p in &manifests_files {
            let rel = p.strip_prefix(self.ws.root()).unwrap_or(p).to_string_lossy().into_owned();
            r.input_file(rel, p)?;
        }
        r.params = json!(null);
        let manifests = manifests_files.iter().map(|p| verify_manifest(p)).collect::<Result<Vec<_>, _>>()?;
        let table = stats(&manifests);
        let text = table.render_text();
        if self.fresh(&r) {
            self.say(&text);
            return Ok(self.up_to_date(stage));
        }
        let staging = self.ws.begin(stage)?;
        let mut json = serde_json::to_vec_pretty(&table)?;
        json.push(b'\n');
        staging.write(STATS_JSON, &json)?;
        staging.write(STATS_TEXT, text.as_bytes())?;
        self.say(&text);
        r.counts.insert("rows".into(), table.rows.len());
        self.commit(staging, r)
    }
}
