//! Output-directory bookkeeping: the run lock, stage receipts and atomic
//! promotion of staged outputs.
//!
//! A stage writes everything under `.staging-<stage>/` first. Only when the
//! stage succeeds are the files renamed into place, followed by the receipt;
//! a stage without a receipt never happened as far as later stages are
//! concerned.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use serde::{Deserialize, Serialize};
use thoughtlog_core::dataset::{sha256_hex, write_atomic};

pub const LOCK_FILE: &str = ".thoughtlog.lock";

/// A prerequisite stage has not completed.
#[derive(Debug)]
pub struct DependencyMissing {
    pub stage: String,
    pub missing: Vec<String>,
}

impl fmt::Display for DependencyMissing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage `{}` needs {} to have completed first", self.stage, self.missing.join(", "))
    }
}

impl std::error::Error for DependencyMissing {}

/// Another process holds the output directory.
#[derive(Debug)]
pub struct Locked(pub PathBuf);

impl fmt::Display for Locked {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "output directory is locked by {} (remove it if no run is active)", self.0.display())
    }
}

impl std::error::Error for Locked {}

/// What a stage consumed and produced; enough to tell whether a rerun
/// would change anything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Receipt {
    pub stage: String,
    pub tool_version: String,
    pub inputs: BTreeMap<String, String>,
    pub params: serde_json::Value,
    pub templates: BTreeMap<String, String>,
    pub counts: BTreeMap<String, usize>,
    pub outputs: BTreeMap<String, String>,
}

impl Receipt {
    pub fn new(stage: &str) -> Self {
        Receipt {
            stage: stage.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: BTreeMap::new(),
            params: serde_json::Value::Null,
            templates: BTreeMap::new(),
            counts: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn input_file(&mut self, key: impl Into<String>, path: &Path) -> Result<()> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.insert(key.into(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn template(&mut self, t: thoughtlog_core::prompt::PromptTemplate) {
        self.templates.insert(t.id(), t.fingerprint());
    }

    fn same_inputs(&self, other: &Receipt) -> bool {
        self.stage == other.stage
            && self.tool_version == other.tool_version
            && self.inputs == other.inputs
            && self.params == other.params
            && self.templates == other.templates
    }
}

#[derive(Debug)]
struct LockGuard(PathBuf);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

#[derive(Debug)]
pub struct Workspace {
    root: PathBuf,
    _lock: LockGuard,
}

impl Workspace {
    pub fn open(root: &Path) -> Result<Workspace> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let lock = root.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => {
                fs::write(&lock, std::process::id().to_string()).ok();
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => return Err(Locked(lock).into()),
            Err(e) => return Err(e).with_context(|| format!("creating {}", lock.display())),
        }
        Ok(Workspace { root: root.to_path_buf(), _lock: LockGuard(lock) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn receipt_path(&self, stage: &str) -> PathBuf {
        self.root.join("receipts").join(format!("{stage}.json"))
    }

    pub fn receipt(&self, stage: &str) -> Option<Receipt> {
        let text = fs::read_to_string(self.receipt_path(stage)).ok()?;
        serde_json::from_str(&text).ok()
    }

    /// Fails unless every listed stage has a receipt.
    pub fn require(&self, stage: &str, deps: &[&str]) -> Result<()> {
        let missing: Vec<String> =
            deps.iter().filter(|d| self.receipt(d).is_none()).map(|d| d.to_string()).collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(DependencyMissing { stage: stage.to_string(), missing }.into())
        }
    }

    /// True when a previous run consumed the same inputs and its outputs are
    /// still intact.
    pub fn up_to_date(&self, planned: &Receipt) -> bool {
        let Some(done) = self.receipt(&planned.stage) else { return false };
        done.same_inputs(planned)
            && done.outputs.iter().all(|(rel, hash)| {
                fs::read(self.root.join(rel)).map(|b| sha256_hex(&b) == *hash).unwrap_or(false)
            })
    }

    pub fn begin(&self, stage: &str) -> Result<Staging> {
        let dir = self.root.join(format!(".staging-{stage}"));
        if dir.exists() {
            fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
        fs::create_dir_all(&dir)?;
        Ok(Staging { dir, root: self.root.clone(), committed: false })
    }
}

pub struct Staging {
    dir: PathBuf,
    root: PathBuf,
    committed: bool,
}

impl Staging {
    /// Staging location for an output at `rel` under the output directory.
    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn write(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.path(rel), bytes).map_err(|e| anyhow!(e))
    }

    /// Promotes every staged file, drops outputs of the previous run that
    /// were not produced again, then writes the receipt.
    pub fn commit(mut self, mut receipt: Receipt) -> Result<Receipt> {
        let mut files = Vec::new();
        collect_files(&self.dir, &mut files)?;
        files.sort();
        let mut outputs = BTreeMap::new();
        for file in &files {
            let rel = file.strip_prefix(&self.dir).expect("under staging").to_string_lossy().replace('\\', "/");
            let bytes = fs::read(file)?;
            outputs.insert(rel, sha256_hex(&bytes));
        }
        let receipt_path = self.root.join("receipts").join(format!("{}.json", receipt.stage));
        if let Some(previous) = fs::read_to_string(&receipt_path).ok().and_then(|t| serde_json::from_str::<Receipt>(&t).ok()) {
            for rel in previous.outputs.keys().filter(|r| !outputs.contains_key(*r)) {
                let _ = fs::remove_file(self.root.join(rel));
            }
        }
        for file in &files {
            let rel = file.strip_prefix(&self.dir).expect("under staging");
            let target = self.root.join(rel);
            if let Some(parent) = target.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::rename(file, &target).with_context(|| format!("promoting {}", target.display()))?;
        }
        receipt.outputs = outputs;
        let mut json = serde_json::to_vec_pretty(&receipt)?;
        json.push(b'\n');
        write_atomic(&receipt_path, &json).map_err(|e| anyhow!(e))?;
        self.committed = true;
        let _ = fs::remove_dir_all(&self.dir);
        Ok(receipt)
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.dir);
        }
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}
