//! Training-ready dataset emission.
//!
//! SFT files use the instruction/input/output JSONL layout and DPO files the
//! prompt/chosen/rejected layout. Every dataset gets a manifest carrying the
//! training hyperparameters, the physical row count and the SHA-256 of the
//! file bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{InputPayload, PreferencePair, TaskInstance, TaskKind, Vocabulary};
use crate::prompt::PromptError;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("manifest for {path} claims {claimed} rows / {claimed_hash}, file has {actual} / {actual_hash}")]
    ManifestMismatch { path: PathBuf, claimed: usize, actual: usize, claimed_hash: String, actual_hash: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub instruction: String,
    pub input: String,
    pub output: String,
}

impl SftRecord {
    pub fn new(
        instruction: impl Into<String>,
        input: impl Into<String>,
        output: impl Into<String>,
    ) -> Result<Self, DatasetError> {
        let r = SftRecord { instruction: instruction.into(), input: input.into(), output: output.into() };
        r.validate()?;
        Ok(r)
    }

    fn validate(&self) -> Result<(), DatasetError> {
        if self.instruction.trim().is_empty() || self.output.trim().is_empty() {
            return Err(DatasetError::InvalidRecord("SFT instruction and output must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpoRecord {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
}

impl DpoRecord {
    pub fn new(
        prompt: impl Into<String>,
        chosen: impl Into<String>,
        rejected: impl Into<String>,
    ) -> Result<Self, DatasetError> {
        let r = DpoRecord { prompt: prompt.into(), chosen: chosen.into(), rejected: rejected.into() };
        r.validate()?;
        Ok(r)
    }

    fn validate(&self) -> Result<(), DatasetError> {
        if [&self.prompt, &self.chosen, &self.rejected].iter().any(|s| s.trim().is_empty()) {
            return Err(DatasetError::InvalidRecord("DPO fields must be non-empty".into()));
        }
        if self.chosen == self.rejected {
            return Err(DatasetError::InvalidRecord("chosen and rejected are identical".into()));
        }
        Ok(())
    }

    /// Prompt is the rendered solution-generation prompt of the instance.
    pub fn from_pair(pair: &PreferencePair, vocab: &Vocabulary) -> Result<Self, DatasetError> {
        let prompt = crate::solution::solution_prompt_text(vocab, pair.instance())?;
        DpoRecord::new(prompt, pair.chosen().render(), pair.rejected().render())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "ThoughtSFT")]
    ThoughtSft,
    #[serde(rename = "SolutionSFT")]
    SolutionSft,
    #[serde(rename = "DPO")]
    Dpo,
}

impl Stage {
    /// Row group in the statistics table.
    pub fn phase(self) -> &'static str {
        match self {
            Stage::ThoughtSft => "Stage1",
            Stage::SolutionSft | Stage::Dpo => "Stage2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub learning_rate: f64,
    pub batch_size: u32,
    pub epochs: u32,
    pub context_window: u32,
    pub beta: Option<f64>,
    pub scheduler: String,
}

impl Hyperparameters {
    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::ThoughtSft | Stage::SolutionSft => Hyperparameters {
                learning_rate: 3.0e-5,
                batch_size: 16,
                epochs: 5,
                // recorded as published; 2048 was probably intended
                context_window: 2096,
                beta: None,
                scheduler: "cosine".into(),
            },
            Stage::Dpo => Hyperparameters {
                learning_rate: 5.0e-6,
                batch_size: 4,
                epochs: 5,
                context_window: 2096,
                beta: Some(0.1),
                scheduler: "cosine".into(),
            },
        }
    }
}

/// Labels attached to a dataset for the statistics table.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub task: Option<String>,
    pub source_domain: Option<String>,
}

impl DatasetMeta {
    pub fn new(task: impl Into<String>, source_domain: impl Into<String>) -> Self {
        DatasetMeta { task: Some(task.into()), source_domain: Some(source_domain.into()) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub stage: Stage,
    #[serde(default)]
    pub task: Option<String>,
    #[serde(default)]
    pub source_domain: Option<String>,
    pub learning_rate: f64,
    pub batch_size: u32,
    pub epochs: u32,
    pub context_window: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    pub scheduler: String,
    /// File name of the dataset, relative to the manifest.
    pub dataset_path: String,
    pub record_count: usize,
    pub content_hash: String,
}

impl TrainingManifest {
    fn build(stage: Stage, meta: &DatasetMeta, dataset: &Path, record_count: usize, content_hash: String) -> Self {
        let hp = Hyperparameters::for_stage(stage);
        TrainingManifest {
            stage,
            task: meta.task.clone(),
            source_domain: meta.source_domain.clone(),
            learning_rate: hp.learning_rate,
            batch_size: hp.batch_size,
            epochs: hp.epochs,
            context_window: hp.context_window,
            beta: hp.beta,
            scheduler: hp.scheduler,
            dataset_path: dataset.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            record_count,
            content_hash,
        }
    }
}

/// `data.jsonl` → `data.manifest.json`.
pub fn manifest_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("manifest.json")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    let mut file = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    file.write_all(bytes).map_err(io_err(&tmp))?;
    file.sync_all().map_err(io_err(&tmp))?;
    drop(file);
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// One compact JSON object per line, LF-terminated.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("records serialize");
        out.push(b'\n');
    }
    out
}

/// Task instance as stored on disk: the task by its short code and the gold
/// answer as plain text, folded through the vocabulary on load.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceLine {
    pub id: String,
    pub task: String,
    pub input: InputPayload,
    pub gold: String,
    pub source: String,
}

impl From<&TaskInstance> for InstanceLine {
    fn from(i: &TaskInstance) -> Self {
        InstanceLine {
            id: i.id.clone(),
            task: i.task.code().to_string(),
            input: i.input.clone(),
            gold: i.gold.value().to_string(),
            source: i.source.clone(),
        }
    }
}

/// Reads and validates a task-instance file. Ids must be unique.
pub fn read_instances(path: &Path, vocab: &Vocabulary, max_window: usize) -> Result<Vec<TaskInstance>, DatasetError> {
    let lines: Vec<(usize, InstanceLine)> = read_jsonl_numbered(path)?;
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(lines.len());
    for (line, l) in lines {
        let perr = |message: String| DatasetError::Parse { path: path.to_path_buf(), line, message };
        let task = TaskKind::from_code(&l.task).ok_or_else(|| perr(format!("unknown task `{}`", l.task)))?;
        let gold = vocab
            .canonicalize(task, &l.gold)
            .map_err(|_| perr(format!("gold `{}` is not a {} label", l.gold, task.code())))?;
        let inst = TaskInstance { id: l.id, task, input: l.input, gold, source: l.source };
        inst.validate(vocab, max_window).map_err(|e| perr(e.to_string()))?;
        if !seen.insert(inst.id.clone()) {
            return Err(perr(format!("duplicate instance id `{}`", inst.id)));
        }
        out.push(inst);
    }
    Ok(out)
}

pub fn write_instances(path: &Path, instances: &[TaskInstance]) -> Result<(), DatasetError> {
    let lines: Vec<InstanceLine> = instances.iter().map(InstanceLine::from).collect();
    write_atomic(path, &to_jsonl(&lines))
}

fn read_jsonl_numbered<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>, DatasetError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DatasetError> {
    Ok(read_jsonl_numbered(path)?.into_iter().map(|(_, r)| r).collect())
}

fn emit<T: Serialize>(
    stage: Stage,
    records: &[T],
    path: &Path,
    meta: &DatasetMeta,
) -> Result<TrainingManifest, DatasetError> {
    let bytes = to_jsonl(records);
    write_atomic(path, &bytes)?;
    let manifest = TrainingManifest::build(stage, meta, path, records.len(), sha256_hex(&bytes));
    let mut json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    json.push(b'\n');
    write_atomic(&manifest_path(path), &json)?;
    Ok(manifest)
}

/// Writes an SFT dataset and its manifest.
pub fn emit_sft(
    stage: Stage,
    records: &[SftRecord],
    path: &Path,
    meta: &DatasetMeta,
) -> Result<TrainingManifest, DatasetError> {
    if stage == Stage::Dpo {
        return Err(DatasetError::InvalidRecord("SFT records cannot be emitted as a DPO dataset".into()));
    }
    records.iter().try_for_each(SftRecord::validate)?;
    emit(stage, records, path, meta)
}

/// Writes a DPO dataset built from validated preference pairs.
pub fn emit_dpo(
    pairs: &[PreferencePair],
    vocab: &Vocabulary,
    path: &Path,
    meta: &DatasetMeta,
) -> Result<TrainingManifest, DatasetError> {
    let records = pairs.iter().map(|p| DpoRecord::from_pair(p, vocab)).collect::<Result<Vec<_>, _>>()?;
    emit_dpo_records(&records, path, meta)
}

pub fn emit_dpo_records(
    records: &[DpoRecord],
    path: &Path,
    meta: &DatasetMeta,
) -> Result<TrainingManifest, DatasetError> {
    records.iter().try_for_each(DpoRecord::validate)?;
    emit(Stage::Dpo, records, path, meta)
}

pub fn read_sft(path: &Path) -> Result<Vec<SftRecord>, DatasetError> {
    read_jsonl(path)
}

pub fn read_dpo(path: &Path) -> Result<Vec<DpoRecord>, DatasetError> {
    read_jsonl(path)
}

pub fn read_manifest(path: &Path) -> Result<TrainingManifest, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Parse { path: path.to_path_buf(), line: 0, message: e.to_string() })
}

/// Recounts rows and rehashes the dataset a manifest points at.
pub fn verify_manifest(manifest_file: &Path) -> Result<TrainingManifest, DatasetError> {
    let manifest = read_manifest(manifest_file)?;
    let dataset = manifest_file.with_file_name(&manifest.dataset_path);
    let bytes = fs::read(&dataset).map_err(io_err(&dataset))?;
    let actual = bytes.split(|b| *b == b'\n').filter(|l| !l.is_empty()).count();
    let actual_hash = sha256_hex(&bytes);
    if actual != manifest.record_count || actual_hash != manifest.content_hash {
        return Err(DatasetError::ManifestMismatch {
            path: dataset,
            claimed: manifest.record_count,
            actual,
            claimed_hash: manifest.content_hash.clone(),
            actual_hash,
        });
    }
    Ok(manifest)
}

/// Concatenates per-task datasets and shuffles them with a seeded ChaCha8 stream.
pub fn mix<T: Clone>(sets: &[Vec<T>], seed: u64) -> Vec<T> {
    let mut all: Vec<T> = sets.iter().flatten().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    all
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsRow {
    pub stage: String,
    pub task: String,
    pub source_domain: String,
    pub sft_count: usize,
    pub dpo_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsTable {
    pub rows: Vec<StatsRow>,
}

/// Corpus statistics: SFT and DPO counts per (stage, task, domain), summed
/// over manifests that share a key.
pub fn stats(manifests: &[TrainingManifest]) -> StatsTable {
    let mut rows: BTreeMap<(String, String, String), (usize, usize)> = BTreeMap::new();
    for m in manifests {
        let key = (
            m.stage.phase().to_string(),
            m.task.clone().unwrap_or_else(|| "-".into()),
            m.source_domain.clone().unwrap_or_else(|| "-".into()),
        );
        let entry = rows.entry(key).or_default();
        match m.stage {
            Stage::Dpo => entry.1 += m.record_count,
            _ => entry.0 += m.record_count,
        }
    }
    StatsTable {
        rows: rows
            .into_iter()
            .map(|((stage, task, source_domain), (sft_count, dpo_count))| StatsRow {
                stage,
                task,
                source_domain,
                sft_count,
                dpo_count,
            })
            .collect(),
    }
}

impl StatsTable {
    pub fn render_text(&self) -> String {
        let header = ["Stage", "Task", "Domain", "# SFT", "# DPO"];
        let cells: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.stage.clone(),
                    r.task.clone(),
                    r.source_domain.clone(),
                    r.sft_count.to_string(),
                    if r.stage == "Stage1" && r.dpo_count == 0 { "-".into() } else { r.dpo_count.to_string() },
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |cols: [&str; 5]| {
            let mut s = String::new();
            for (i, c) in cols.iter().enumerate() {
                let pad = widths[i] - c.chars().count();
                if i >= 3 {
                    s.push_str(&" ".repeat(pad));
                    s.push_str(c);
                } else {
                    s.push_str(c);
                    s.push_str(&" ".repeat(pad));
                }
                if i < 4 {
                    s.push_str("  ");
                }
            }
            s.trim_end().to_string() + "\n"
        };
        let mut out = line(header);
        out.push_str(&line(widths.map(|w| "-".repeat(w)).each_ref().map(String::as_str)));
        for row in &cells {
            out.push_str(&line(row.each_ref().map(String::as_str)));
        }
        out
    }
}
