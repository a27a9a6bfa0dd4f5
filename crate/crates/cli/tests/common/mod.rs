#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use thoughtlog_cli::pipeline::Outcome;
use thoughtlog_cli::{execute, Cli};

pub const FULL_RUN: [&str; 10] =
    ["ingest", "rationales", "select", "distill", "review", "generate", "calibrate", "emit", "eval", "stats"];

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/demo")
}

/// Fresh copy of the demo fixture; outputs land in `<dir>/out`.
pub fn demo() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for entry in fs::read_dir(fixture_dir()).unwrap() {
        let p = entry.unwrap().path();
        if p.is_file() {
            fs::copy(&p, dir.path().join(p.file_name().unwrap())).unwrap();
        }
    }
    dir
}

pub fn cli(dir: &Path, args: &[&str]) -> Cli {
    let config = dir.join("config.toml");
    let mock = dir.join("mock.json");
    let mut argv = vec![
        "thoughtlog".to_string(),
        "--config".into(),
        config.display().to_string(),
        "--mock-script".into(),
        mock.display().to_string(),
    ];
    argv.extend(args.iter().map(|s| s.to_string()));
    if args.first() == Some(&"review") && args.len() == 1 {
        argv.push("--decisions".into());
        argv.push(dir.join("decisions.jsonl").display().to_string());
    }
    Cli::try_parse_from(argv).unwrap()
}

pub fn stage(dir: &Path, args: &[&str]) -> anyhow::Result<Outcome> {
    execute(&cli(dir, args), &mut &b""[..], &mut Vec::new())
}

pub fn run_all(dir: &Path) {
    for s in FULL_RUN {
        stage(dir, &[s]).unwrap_or_else(|e| panic!("{s}: {e:#}"));
    }
}

/// Relative path → bytes for every file under `root`, lock and receipts excluded.
pub fn snapshot(root: &Path, sub: &str) -> Vec<(String, Vec<u8>)> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        let Ok(rd) = fs::read_dir(dir) else { return };
        for e in rd {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                out.push((p.strip_prefix(base).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, &root.join(sub), &mut out);
    out.sort();
    out
}
