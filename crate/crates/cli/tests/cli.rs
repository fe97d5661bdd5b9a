mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::BIN;
use pdesynth_core::pipeline::RunManifest;

fn pdesynth(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let text = format!(
        r#"{{"task": "reaction_diffusion", "grid": {{"n": [64], "t_steps": 4}}, "n": 4, "batch": 2, "rounds": "2+2",
            "guest_command": ["{BIN}", "desk-guest", "{{source}}"]{extra}}}"#
    );
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn desk_config(dir: &Path) -> PathBuf {
    write_config(dir, "desk.json", r#", "backend": {"mode": "desk"}"#)
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "runtimes.json" {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn odd_pool_is_rejected_before_any_call() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("odd.json");
    let text = std::fs::read_to_string(desk_config(tmp.path())).unwrap().replace("\"n\": 4", "\"n\": 5");
    std::fs::write(&cfg, text).unwrap();
    let out = tmp.path().join("run");
    let res = pdesynth(&["run", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("even"));
    assert!(!out.join("transcripts").exists());
}

#[test]
fn halted_run_resumes_to_the_same_result() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = desk_config(tmp.path());
    let (whole, halted) = (tmp.path().join("whole"), tmp.path().join("halted"));
    assert!(pdesynth(&["run", "--config", s(&cfg), "--out", s(&whole)]).status.success());
    let first = pdesynth(&["run", "--config", s(&cfg), "--out", s(&halted), "--halt-after-round", "3"]);
    assert_eq!(first.status.code(), Some(10));
    assert!(halted.join("tournament/round-3/ledger.json").exists());
    assert!(!halted.join("tournament/round-4").exists());
    assert!(pdesynth(&["run", "--config", s(&cfg), "--out", s(&halted)]).status.success());
    assert_eq!(files(&whole), files(&halted));
}

#[test]
fn staged_commands_stop_where_asked() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = desk_config(tmp.path());
    let out = tmp.path().join("run");
    assert!(pdesynth(&["analyze", "--config", s(&cfg), "--out", s(&out)]).status.success());
    assert!(out.join("analysis/report.json").exists() && !out.join("candidates").exists());
    assert!(pdesynth(&["genesis", "--config", s(&cfg), "--out", s(&out)]).status.success());
    assert!(out.join("candidates/pool.json").exists() && !out.join("tournament").exists());
    assert!(pdesynth(&["synthesize", "--config", s(&cfg), "--out", s(&out)]).status.success());
    assert!(out.join("tournament/summary.json").exists() && !out.join("report.md").exists());
    assert!(pdesynth(&["run", "--config", s(&cfg), "--out", s(&out)]).status.success());
    let manifest = RunManifest::load(&out).unwrap();
    assert_eq!(manifest.completed.len(), 6);
    assert!(manifest.outcomes.evaluations_used.is_some_and(|e| e > 0));
}

#[test]
fn replay_reproduces_the_recording() {
    let tmp = tempfile::tempdir().unwrap();
    let recorded = tmp.path().join("recorded");
    assert!(pdesynth(&["run", "--config", s(&desk_config(tmp.path())), "--out", s(&recorded)]).status.success());
    let replay = write_config(
        tmp.path(),
        "replay.json",
        &format!(r#", "backend": {{"mode": "replay", "replay_from": "{}"}}"#, s(&recorded.join("transcripts"))),
    );
    let out = tmp.path().join("replayed");
    let res = pdesynth(&["run", "--config", s(&replay), "--out", s(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for f in ["report.md", "tournament/round-1/ledger.json", "tournament/summary.json", "transcripts/00000.json"] {
        if recorded.join(f).exists() {
            assert_eq!(std::fs::read(recorded.join(f)).unwrap(), std::fs::read(out.join(f)).unwrap(), "{f}");
        }
    }
}

#[test]
fn tampered_artifacts_block_resumption() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = desk_config(tmp.path());
    let out = tmp.path().join("run");
    assert!(pdesynth(&["genesis", "--config", s(&cfg), "--out", s(&out)]).status.success());
    std::fs::write(out.join("candidates/g000.py"), "# edited\n").unwrap();
    let res = pdesynth(&["run", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("g000.py"));
}

#[test]
fn report_cost_and_evaluate_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = desk_config(tmp.path());
    let out = tmp.path().join("run");
    assert!(pdesynth(&["run", "--config", s(&cfg), "--out", s(&out)]).status.success());

    std::fs::remove_file(out.join("report.md")).unwrap();
    assert!(pdesynth(&["report", "--run", s(&out)]).status.success());
    assert!(std::fs::read_to_string(out.join("report.md")).unwrap().starts_with("# Solver evolution report"));

    let prices = tmp.path().join("prices.json");
    std::fs::write(&prices, r#"{"models": {"desk": {"input": 2.5, "output": 10.0}}}"#).unwrap();
    let cost = pdesynth(&["cost", "--run", s(&out), "--prices", s(&prices)]);
    let table = String::from_utf8_lossy(&cost.stdout);
    assert!(cost.status.success());
    for row in ["analysis", "genesis", "judge", "debug", "total"] {
        assert!(table.lines().any(|l| l.starts_with(row)), "{table}");
    }

    let source = tmp.path().join("solver.py");
    std::fs::write(&source, "# desk: method=reference\n").unwrap();
    let eval = pdesynth(&["evaluate", "--config", s(&cfg), "--source", s(&source), "--bundle", s(&out.join("reference"))]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let json: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(json["execution"]["status"], "ok");
    assert_eq!(json["feedback"][0]["metric_id"], "general.nrmse");
    assert!(json["feedback"][0]["value"].as_f64().unwrap() <= 1e-12);
}

#[test]
fn reference_command_builds_a_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bundle-run");
    let res = pdesynth(&["reference", "--config", s(&desk_config(tmp.path())), "--out", s(&out)]);
    assert!(res.status.success());
    assert!(out.join("reference/solutions.pdet").exists());
}
