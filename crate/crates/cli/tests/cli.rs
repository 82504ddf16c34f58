use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn eigmeta() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_eigmeta"));
    cmd.env_remove("EIGMETA_THREADS");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    if !out.status.success() {
        eprintln!("stdout:\n{}", String::from_utf8_lossy(&out.stdout));
        eprintln!("stderr:\n{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn ok(cmd: &mut Command) -> Output {
    let out = run(cmd);
    assert!(out.status.success(), "command failed: {:?}", out.status);
    out
}

fn toy_csv(dir: &Path) -> PathBuf {
    let path = dir.join("toy.csv");
    let mut text = String::from("a,b,c,label\n");
    for i in 0..60 {
        let x = i as f64 * 0.1;
        text.push_str(&format!("{},{},{},0\n", x.sin(), x.cos(), 0.5 * x - 1.0));
    }
    for i in 0..12 {
        let x = i as f64;
        text.push_str(&format!("{},{},{},1\n", 4.0 + x, -3.0 - x, 2.0 * x));
    }
    fs::write(&path, text).unwrap();
    path
}

fn ring_bundle(dir: &Path) -> PathBuf {
    let out = dir.join("bundle");
    ok(eigmeta().args(["ring", "--train", "6", "--valid", "2", "--target", "2", "--seed", "4", "--out"]).arg(&out));
    out.join("manifest.json")
}

fn small_net() -> [&'static str; 6] {
    ["--hidden", "8", "--repr-dim", "8", "--embed-dim", "4"]
}

fn train_small(manifest: &Path, out: &Path, extra: &[&str]) {
    ok(eigmeta()
        .arg("train")
        .arg("--manifest")
        .arg(manifest)
        .arg("--out")
        .arg(out)
        .args(small_net())
        .args(["--max-updates", "20", "--validation-interval", "5", "--validation-episodes", "5"])
        .args(extra));
}

fn data_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

#[test]
fn synth_writes_requested_task_counts() {
    let dir = TempDir::new().unwrap();
    let csv = toy_csv(dir.path());
    let out = dir.path().join("small");
    ok(eigmeta()
        .args(["synth", "--train", "2", "--valid", "1", "--target", "1", "--input"])
        .arg(&csv)
        .arg("--out")
        .arg(&out));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let tasks = manifest["tasks"].as_array().unwrap();
    assert_eq!(tasks.len(), 4);
    let csvs = fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "csv"))
        .count();
    assert_eq!(csvs, 4);
}

#[test]
fn synth_defaults_and_seed_determinism() {
    let dir = TempDir::new().unwrap();
    let csv = toy_csv(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(eigmeta().args(["synth", "--seed", "11", "--input"]).arg(&csv).arg("--out").arg(out));
    }
    let manifest = fs::read_to_string(a.join("manifest.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(parsed["tasks"].as_array().unwrap().len(), 500);
    assert_eq!(manifest, fs::read_to_string(b.join("manifest.json")).unwrap());
    let name = parsed["tasks"][17]["file"].as_str().unwrap();
    assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
}

#[test]
fn zero_learning_rate_gives_flat_validation_curve() {
    let dir = TempDir::new().unwrap();
    let manifest = ring_bundle(dir.path());
    let out = dir.path().join("run");
    train_small(&manifest, &out, &["--learning-rate", "0", "--patience", "100"]);
    let lines = data_lines(&out.join("curve.csv"));
    assert_eq!(lines[0], "update,loss,validation_auc");
    let aucs: Vec<f64> = lines[1..]
        .iter()
        .filter_map(|l| l.split(',').nth(2).filter(|s| !s.is_empty()).map(|s| s.parse().unwrap()))
        .collect();
    assert!(aucs.len() >= 3);
    assert!(aucs.iter().all(|&v| v == aucs[0]), "{aucs:?}");
    let summary = fs::read_to_string(out.join("train.json")).unwrap();
    assert!(summary.contains("\"seed\""));
}

#[test]
fn missing_manifest_is_reported() {
    let dir = TempDir::new().unwrap();
    let out = run(eigmeta()
        .arg("train")
        .arg("--manifest")
        .arg(dir.path().join("absent.json"))
        .arg("--out")
        .arg(dir.path().join("run")));
    let code = out.status.code().unwrap();
    assert!(code == 1 || code == 2, "exit {code}");
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.json"));
}

#[test]
fn evaluation_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let manifest = ring_bundle(dir.path());
    let run_dir = dir.path().join("run");
    train_small(&manifest, &run_dir, &[]);
    let ckpt = run_dir.join("checkpoint.bin");
    let mut outputs = Vec::new();
    for name in ["e1", "e2"] {
        let out = dir.path().join(name);
        ok(eigmeta()
            .args(["eval", "--episodes", "12", "--eval-seed", "3", "--checkpoint"])
            .arg(&ckpt)
            .arg("--manifest")
            .arg(&manifest)
            .arg("--out")
            .arg(&out));
        outputs.push(data_lines(&out.join("episodes.csv")));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0].len(), 13);
}

#[test]
fn checkpoint_version_mismatch_is_rejected() {
    let dir = TempDir::new().unwrap();
    let manifest = ring_bundle(dir.path());
    let run_dir = dir.path().join("run");
    train_small(&manifest, &run_dir, &[]);
    let ckpt = run_dir.join("checkpoint.bin");
    let bytes = fs::read(&ckpt).unwrap();
    let needle = b"\"version\":1";
    let at = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
    let mut patched = bytes.clone();
    patched[at + needle.len() - 1] = b'7';
    let bad = dir.path().join("bad.bin");
    fs::write(&bad, patched).unwrap();
    let out = run(eigmeta()
        .arg("eval")
        .arg("--checkpoint")
        .arg(&bad)
        .arg("--manifest")
        .arg(&manifest)
        .arg("--out")
        .arg(dir.path().join("ev")));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[train]\nlearning_rat = 0.1\n").unwrap();
    let out = run(eigmeta().arg("--config").arg(&cfg).arg("train"));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
}

#[test]
fn config_file_paths_resolve_relative_to_it() {
    let dir = TempDir::new().unwrap();
    ring_bundle(dir.path());
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        "out = \"cfg-run\"\n\
         [data]\nmanifest = \"bundle/manifest.json\"\n\
         [train]\nmax_updates = 5\nvalidation_interval = 5\nvalidation_episodes = 3\n\
         [train.network]\nhidden = 8\nrepr_dim = 8\nembed_dim = 4\n",
    )
    .unwrap();
    ok(eigmeta().arg("--config").arg(&cfg).arg("train"));
    assert!(dir.path().join("cfg-run/checkpoint.bin").exists());
}

#[test]
fn gradcheck_passes_and_catches_faults() {
    let out = ok(eigmeta().args(["gradcheck", "--size", "6", "--trials", "4"]));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("sym_eig"));
    assert!(text.contains("max relative error"));

    let out = run(eigmeta().args(["gradcheck", "--size", "6", "--trials", "4", "--inject-fault"]));
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn gradcheck_json_report() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("gc.json");
    ok(eigmeta().args(["gradcheck", "--trials", "2", "--json"]).arg(&path));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(report["report"]["passed"], true);
    assert_eq!(report["report"]["checks"].as_array().unwrap().len(), 12);
}

#[test]
fn ablations_run() {
    let dir = TempDir::new().unwrap();
    let manifest = ring_bundle(dir.path());
    for mode in ["woanomaly", "woproj", "wonn", "full"] {
        let out = dir.path().join(mode);
        ok(eigmeta()
            .args(["ablate", "--mode", mode, "--max-updates", "10", "--validation-interval", "5"])
            .args(["--validation-episodes", "3", "--episodes", "6", "--normal-only-k", "4"])
            .args(small_net())
            .arg("--manifest")
            .arg(&manifest)
            .arg("--out")
            .arg(&out));
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
        let mean = summary["mean"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&mean), "{mode}: {mean}");
    }
}

#[test]
fn thread_count_from_environment() {
    let dir = TempDir::new().unwrap();
    let manifest = ring_bundle(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    train_small(&manifest, &a, &[]);
    ok(eigmeta()
        .env("EIGMETA_THREADS", "1")
        .arg("train")
        .arg("--manifest")
        .arg(&manifest)
        .arg("--out")
        .arg(&b)
        .args(small_net())
        .args(["--max-updates", "20", "--validation-interval", "5", "--validation-episodes", "5"]));
    assert_eq!(fs::read(a.join("checkpoint.bin")).unwrap(), fs::read(b.join("checkpoint.bin")).unwrap());

    let out = run(eigmeta().env("EIGMETA_THREADS", "zero").args(["gradcheck", "--trials", "1"]));
    assert_eq!(out.status.code(), Some(1));
}
