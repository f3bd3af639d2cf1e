use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_frametree");
const WORKER: &str = env!("CARGO_BIN_EXE_frametree-synth-worker");

fn frametree(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn tof_run_writes_manifest_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let out = frametree(&["tof", "--seed", "7", "--out", path(dir.path()), "--format", "json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(summary["extend_calls"], summary["predicted_extend_calls"]);

    let manifest: Value = serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    let log = fs::read(dir.path().join("events.jsonl")).unwrap();
    assert_eq!(manifest["event_log"]["file"], "events.jsonl");
    assert_eq!(manifest["event_log"]["hash"], frametree::manifest::blob_hash(&log));
    assert_eq!(manifest["scores"]["quality"], summary["best_score"]);
    assert_eq!(manifest["algorithm"], "tof");
    for extra in ["landscape.json", "timing.json"] {
        assert!(dir.path().join(extra).exists(), "{extra}");
    }
}

#[test]
fn linear_nfe_is_roots_times_depth() {
    let dir = tempfile::tempdir().unwrap();
    let out = frametree(&["linear", "--seed", "1", "--out", path(dir.path()), "--format", "json"]);
    assert_eq!(code(&out), 0);
    let summary: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(summary["extend_calls"], 8 * 16);
}

#[test]
fn thread_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut seen = Vec::new();
    for threads in ["1", "8"] {
        let out_dir = dir.path().join(threads);
        let out = frametree(&[
            "--threads",
            threads,
            "tof",
            "--seed",
            "42",
            "--gates",
            "--out",
            path(&out_dir),
        ]);
        assert_eq!(code(&out), 0);
        seen.push((
            stdout(&out),
            fs::read(out_dir.join("manifest.json")).unwrap(),
            fs::read(out_dir.join("events.jsonl")).unwrap(),
        ));
    }
    assert_eq!(seen[0], seen[1]);
}

#[test]
fn config_file_is_honoured_and_seed_overrides_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = frametree::RunConfig::synthetic(frametree::Algorithm::Tof, frametree::Schedule::tof_default(2, 5), 3);
    let cfg_path = dir.path().join("config.json");
    fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = frametree(&[
        "tof",
        "--config",
        path(&cfg_path),
        "--seed",
        "11",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(code(&out), 0);
    let manifest: Value = serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["master_seed"], 11);
    assert_eq!(manifest["best_path"]["seeds"].as_array().unwrap().len(), 5);
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.json");
    fs::write(&cfg_path, "{\"algorithm\": 5}").unwrap();
    assert_eq!(
        code(&frametree(&[
            "tof",
            "--config",
            path(&cfg_path),
            "--out",
            path(dir.path())
        ])),
        2
    );
    assert_eq!(code(&frametree(&["linear", "--config", "/no/such/file.json"])), 2);

    let mut cfg = frametree::RunConfig::synthetic(frametree::Algorithm::Tof, frametree::Schedule::tof_default(0, 5), 3);
    cfg.schedule.roots = 0;
    fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(
        code(&frametree(&[
            "tof",
            "--config",
            path(&cfg_path),
            "--out",
            path(dir.path())
        ])),
        2
    );
}

#[test]
fn oracle_refuses_oversized_trees() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = frametree::RunConfig::synthetic(
        frametree::Algorithm::Oracle,
        frametree::Schedule::exhaustive(8, 30, 2),
        1,
    );
    let cfg_path = dir.path().join("big.json");
    fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = frametree(&["oracle", "--config", path(&cfg_path), "--out", path(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("paths"));
}

#[test]
fn oracle_matches_unpruned_tof_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = frametree::RunConfig::synthetic(frametree::Algorithm::Tof, frametree::Schedule::exhaustive(3, 5, 2), 4);
    let cfg_path = dir.path().join("c.json");
    fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let get = |cmd: &str| -> Value {
        let out = frametree(&[
            cmd,
            "--config",
            path(&cfg_path),
            "--out",
            path(&dir.path().join(cmd)),
            "--format",
            "json",
        ]);
        assert_eq!(code(&out), 0);
        serde_json::from_str(&stdout(&out)).unwrap()
    };
    assert_eq!(get("oracle")["best_score"], get("tof")["best_score"]);
}

#[test]
fn unreachable_worker_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = frametree(&[
        "tof",
        "--workers",
        "/definitely/not/a/worker",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(code(&out), 3);
    let out = frametree(&["protocol-check", "--workers", "/definitely/not/a/worker"]);
    assert_eq!(code(&out), 3);
    // a process that exits without a handshake
    let out = frametree(&["tof", "--workers", "true", "--out", path(dir.path())]);
    assert_eq!(code(&out), 3);
}

#[test]
fn usage_errors_exit_64() {
    assert_eq!(code(&frametree(&["--bogus"])), 64);
    assert_eq!(code(&frametree(&["tof", "--seed", "not-a-number"])), 64);
    assert_eq!(code(&frametree(&[])), 64);
    assert_eq!(code(&frametree(&["--help"])), 0);
    assert_eq!(code(&frametree(&["--version"])), 0);
}

#[test]
fn bench_produces_one_point_per_n() {
    let dir = tempfile::tempdir().unwrap();
    let out = frametree(&["bench", "--grid", "n=1..16", "--seed", "5", "--out", path(dir.path())]);
    assert_eq!(code(&out), 0);
    assert_eq!(stdout(&out).lines().count(), 17);
    let curve: Value = serde_json::from_slice(&fs::read(dir.path().join("curve.json")).unwrap()).unwrap();
    assert_eq!(curve["points"].as_array().unwrap().len(), 16);
    assert!(fs::read_to_string(dir.path().join("curve.svg"))
        .unwrap()
        .contains("<svg"));

    let fit = frametree(&[
        "fit",
        "--curve",
        path(&dir.path().join("curve.json")),
        "--format",
        "json",
    ]);
    assert_eq!(code(&fit), 0);
    let fit: Value = serde_json::from_str(&stdout(&fit)).unwrap();
    assert!(fit["s_inf"].is_number());

    let both = frametree(&[
        "bench",
        "--grid",
        "1,2,4,8",
        "--algorithm",
        "both",
        "--out",
        path(&dir.path().join("b")),
    ]);
    assert_eq!(code(&both), 0);
    assert_eq!(stdout(&both).lines().count(), 9);
    let both_curves = dir.path().join("b/curve.json");
    let fits = frametree(&["fit", "--curve", path(&both_curves), "--format", "json"]);
    assert_eq!(code(&fits), 0);
    let fits: Value = serde_json::from_str(&stdout(&fits)).unwrap();
    assert_eq!(fits[0]["algorithm"], "linear");
    assert_eq!(fits[1]["algorithm"], "tof");
    assert_eq!(
        code(&frametree(&["bench", "--grid", "n=0..3", "--out", path(dir.path())])),
        2
    );
}

#[test]
fn synth_worker_passes_protocol_check() {
    let workers = format!("{WORKER} --seed 4");
    let out = frametree(&["protocol-check", "--workers", &workers]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).contains("violations 0"));
}

#[test]
fn worker_backed_run_matches_in_process_run() {
    let dir = tempfile::tempdir().unwrap();
    let workers = format!("{WORKER} --seed 9");
    let remote = frametree(&[
        "tof",
        "--seed",
        "9",
        "--workers",
        &workers,
        "--out",
        path(&dir.path().join("w")),
    ]);
    let local = frametree(&["tof", "--seed", "9", "--out", path(&dir.path().join("l"))]);
    assert_eq!(code(&remote), 0, "{}", String::from_utf8_lossy(&remote.stderr));
    assert_eq!(stdout(&remote), stdout(&local));
    let manifest: Value = serde_json::from_slice(&fs::read(dir.path().join("w/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["backend"]["kind"], "worker");

    // the worker can also be fed the landscape file a synthetic run wrote
    let landscape = dir.path().join("l/landscape.json");
    let workers = format!("{WORKER} --landscape {}", path(&landscape));
    let replay = frametree(&[
        "tof",
        "--seed",
        "9",
        "--workers",
        &workers,
        "--out",
        path(&dir.path().join("r")),
    ]);
    assert_eq!(stdout(&replay), stdout(&local));
}
