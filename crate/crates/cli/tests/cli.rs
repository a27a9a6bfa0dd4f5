mod common;

use std::fs;
use std::process::Command;

use common::{cli, demo, run_all, snapshot, stage};
use thoughtlog_cli::pipeline::{Outcome, GENERATIONS, REVIEWED, TEMPLATES};
use thoughtlog_cli::workspace::{DependencyMissing, Locked, LOCK_FILE};
use thoughtlog_cli::{classify, execute};
use thoughtlog_core::dataset::{read_manifest, Stage};

#[test]
fn full_mock_run_emits_manifests_for_every_stage() {
    let dir = demo();
    run_all(dir.path());
    let out = dir.path().join("out");
    let mut stages = Vec::new();
    for name in ["thought_sft", "solution_sft.ad", "solution_sft.rca", "dpo.ad", "dpo.rca"] {
        stages.push(read_manifest(&out.join(format!("datasets/{name}.manifest.json"))).unwrap().stage);
    }
    assert_eq!(stages, [Stage::ThoughtSft, Stage::SolutionSft, Stage::SolutionSft, Stage::Dpo, Stage::Dpo]);
    let stats = fs::read_to_string(out.join("stats/stats.txt")).unwrap();
    assert!(stats.contains("Anomaly Detection"), "{stats}");
    for report in ["eval/ad.BGL-eval.json", "eval/lsm.Router.json", "eval/rca.Router.json", "eval/rca.Router.json.txt"] {
        assert!(out.join(report).is_file(), "{report}");
    }
    assert!(!out.join(LOCK_FILE).exists());
}

#[test]
fn generate_before_distill_is_a_dependency_error() {
    let dir = demo();
    stage(dir.path(), &["ingest"]).unwrap();
    stage(dir.path(), &["rationales"]).unwrap();
    let err = stage(dir.path(), &["generate"]).unwrap_err();
    let dep = err.downcast_ref::<DependencyMissing>().expect("dependency error");
    assert_eq!(dep.missing, ["select", "distill", "review"]);
    assert_eq!(classify(&err).1, 1);
    assert!(!dir.path().join("out").join(GENERATIONS).exists());
}

#[test]
fn eval_refuses_nonzero_temperature() {
    let dir = demo();
    let err = stage(dir.path(), &["eval", "--temperature", "0.7"]).unwrap_err();
    assert_eq!(classify(&err), ("config_invalid", 2));
    assert!(stage(dir.path(), &["eval", "--temperature", "0"]).is_ok());
}

#[test]
fn rerun_with_unchanged_inputs_is_a_no_op() {
    let dir = demo();
    run_all(dir.path());
    let before = snapshot(dir.path(), "out");
    for s in common::FULL_RUN {
        let outcome = stage(dir.path(), &[s]).unwrap();
        assert!(matches!(outcome, Outcome::UpToDate(_)), "{s} reran");
    }
    assert_eq!(before, snapshot(dir.path(), "out"));
}

#[test]
fn changed_input_reruns_the_stage_and_force_overrides() {
    let dir = demo();
    stage(dir.path(), &["ingest"]).unwrap();
    let cases = dir.path().join("cases.jsonl");
    let mut text = fs::read_to_string(&cases).unwrap();
    text.push_str(&text.lines().next().unwrap().replace("hb-001", "hb-007"));
    text.push('\n');
    fs::write(&cases, text).unwrap();
    match stage(dir.path(), &["ingest"]).unwrap() {
        Outcome::Ran(r) => assert_eq!(r.counts["kept"], 5),
        other => panic!("{other:?}"),
    }
    assert!(matches!(stage(dir.path(), &["ingest"]).unwrap(), Outcome::UpToDate(_)));
    assert!(matches!(stage(dir.path(), &["--force", "ingest"]).unwrap(), Outcome::Ran(_)));
}

#[test]
fn failed_stage_leaves_previous_artifacts_untouched() {
    let dir = demo();
    for s in ["ingest", "rationales", "select", "distill", "review"] {
        stage(dir.path(), &[s]).unwrap();
    }
    let out = dir.path().join("out");
    let reviewed = fs::read(out.join(REVIEWED)).unwrap();
    let receipt = fs::read(out.join("receipts/review.json")).unwrap();
    let bad = dir.path().join("bad_decisions.jsonl");
    fs::write(&bad, "{\"template_id\": \"tpl-nope\", \"verdict\": \"approve\"}\n").unwrap();
    let err = stage(dir.path(), &["review", "--decisions", bad.to_str().unwrap()]).unwrap_err();
    assert_eq!(classify(&err), ("stage_failed", 1));
    assert_eq!(fs::read(out.join(REVIEWED)).unwrap(), reviewed);
    assert_eq!(fs::read(out.join("receipts/review.json")).unwrap(), receipt);
    assert!(!out.join(".staging-review").exists());
}

#[test]
fn held_lock_blocks_a_second_run() {
    let dir = demo();
    let out = dir.path().join("out");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(LOCK_FILE), "4242").unwrap();
    let err = stage(dir.path(), &["ingest"]).unwrap_err();
    assert!(err.downcast_ref::<Locked>().is_some());
}

#[test]
fn interactive_review_records_answers_and_resumes() {
    let dir = demo();
    for s in ["ingest", "rationales", "select", "distill"] {
        stage(dir.path(), &[s]).unwrap();
    }
    let out = dir.path().join("out");
    let templates = fs::read_to_string(out.join(TEMPLATES)).unwrap();
    assert_eq!(templates.lines().count(), 4);

    // approve the first, reject the second, then stop
    let mut shown = Vec::new();
    let c = cli(dir.path(), &["review"]);
    let c = thoughtlog_cli::Cli { command: thoughtlog_cli::Command::Review { decisions: None }, ..c };
    execute(&c, &mut &b"a\nr\nq\n"[..], &mut shown).unwrap();
    let shown = String::from_utf8(shown).unwrap();
    assert!(shown.contains("[1/4] tpl-hb-001"), "{shown}");
    let reviewed = fs::read_to_string(out.join(REVIEWED)).unwrap();
    assert_eq!(reviewed.lines().count(), 3);
    assert_eq!(reviewed.matches("\"pending\"").count(), 2);

    // a second session only asks about what is still open
    let mut shown = Vec::new();
    execute(&c, &mut &b"a\na\n"[..], &mut shown).unwrap();
    let shown = String::from_utf8(shown).unwrap();
    assert!(shown.contains("[1/2]") && !shown.contains("tpl-hb-001"), "{shown}");
    let reviewed = fs::read_to_string(out.join(REVIEWED)).unwrap();
    assert_eq!(reviewed.matches("\"approved\"").count(), 3);
    assert_eq!(reviewed.matches("\"pending\"").count(), 0);
}

#[test]
fn invalid_configs_exit_with_status_two() {
    let dir = demo();
    let config = dir.path().join("config.toml");
    let original = fs::read_to_string(&config).unwrap();
    let cases = [
        original.replace("[emit]\nmix = true\nseed = 7", "[emit]\nmix = true"),
        original.replace("cases = [\"cases.jsonl\"]", "cases = [\"missing.jsonl\"]"),
        original.replace("teacher = \"teacher\"", "teacher = \"nobody\""),
        original.replace("session_window = 20", "session_window = 20\nsesion_window = 3"),
        original.replace("\"protocol error\"]", "\"protocol error\", \"sixth\"]"),
        original.replace("seed = 11\n", ""),
    ];
    for (i, text) in cases.iter().enumerate() {
        assert_ne!(*text, original, "case {i} did not change the config");
        fs::write(&config, text).unwrap();
        let err = stage(dir.path(), &["ingest"]).unwrap_err();
        assert_eq!(classify(&err), ("config_invalid", 2), "case {i}: {err:#}");
    }
}

#[test]
fn binary_reports_errors_as_json() {
    let dir = demo();
    let out = Command::new(env!("CARGO_BIN_EXE_thoughtlog"))
        .current_dir(dir.path())
        .args(["--config", "config.toml", "--mock-script", "mock.json", "emit"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "dependency_missing");
    assert_eq!(err["error"]["stage"], "emit");

    let ok = Command::new(env!("CARGO_BIN_EXE_thoughtlog"))
        .current_dir(dir.path())
        .args(["--config", "config.toml", "--mock-script", "mock.json", "ingest"])
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
}
