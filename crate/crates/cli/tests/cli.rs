use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::SystemTime;

use dermres_core::fusion::{level2_id, LEVEL3_ID};
use dermres_core::{Architecture, PredictionTable, ProbabilityVector};
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_dermres");

fn write_config(dir: &Path, matrix: &str, training: &str) -> PathBuf {
    let text = format!(
        r#"
[paths]
manifest = "data/manifest.csv"
cache_root = "work/cache"
weights = "weights"
runs = "work/runs"
predictions = "work/predictions"
reports = "work/reports"

[synthetic]
n_train = 24
n_test = 12
width = 48
height = 40
seed = 5

[matrix]
{matrix}

[training]
augment = "random_element"
{training}

[training.frozen_units]
resnet18 = 7
"#
    );
    let path = dir.join("pipeline.toml");
    std::fs::write(&path, text).unwrap();
    path
}

const ONE_CELL_PER_SIZE: &str = r#"architectures = ["resnet18"]
resolutions = [64, 128]
optimizers = ["adam"]
repeats = [1]"#;

fn run(config: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--config")
        .arg(config)
        .args(args)
        .env_remove("DERMRES_CACHE_ROOT")
        .output()
        .unwrap()
}

fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().rev().find(|l| l.starts_with('{')).unwrap_or_else(|| panic!("no error line in {stderr}"));
    serde_json::from_str(line).unwrap()
}

/// Every file under `root` with its modification time and bytes.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, (SystemTime, Vec<u8>)> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let meta = std::fs::metadata(&p).unwrap();
                out.insert(p.clone(), (meta.modified().unwrap(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out
}

#[test]
fn train_without_cache_names_preprocess() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), ONE_CELL_PER_SIZE, "epochs = 1\nlr_drop_epochs = []");
    let out = run(&cfg, &["train"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_line(&out)["requires"], "ingest");

    assert!(run(&cfg, &["ingest"]).status.success());
    let out = run(&cfg, &["train"]);
    assert_eq!(out.status.code(), Some(3));
    let e = error_line(&out);
    assert_eq!(e["requires"], "preprocess");
    assert_eq!(e["exit"], 3);
    assert!(!dir.path().join("work/runs").exists());
}

#[test]
fn dry_run_prints_plan_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), ONE_CELL_PER_SIZE, "");
    let before = snapshot(dir.path());
    let out = run(&cfg, &["--dry-run", "all"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    for needle in ["resnet18_64_adam_r1", "resnet18_128_adam_r1", "L1/resnet18/64", "L2/resnet18", LEVEL3_ID, "tables.txt"] {
        assert!(text.contains(needle), "{needle} missing from\n{text}");
    }
    assert_eq!(snapshot(dir.path()), before);
}

#[test]
fn config_and_usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[paths]\nmanifest = 3\n").unwrap();
    let out = run(&cfg, &["ingest"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "config");

    let cfg = write_config(dir.path(), ONE_CELL_PER_SIZE, "");
    assert_eq!(run(&cfg, &["fuse", "--level", "7"]).status.code(), Some(2));
    assert_eq!(run(&cfg, &["bogus"]).status.code(), Some(2));
    assert_eq!(run(&dir.path().join("absent.toml"), &["ingest"]).status.code(), Some(2));
    let plan = dir.path().join("plan.toml");
    std::fs::write(&plan, "[matrix]\narchitectures = []\nresolutions = [64]\noptimizers = [\"adam\"]\nrepeats = [1]\n").unwrap();
    assert_eq!(run(&cfg, &["--plan", plan.to_str().unwrap(), "ingest"]).status.code(), Some(2));
}

fn table(id: &str, shift: f64) -> PredictionTable<f64> {
    let mut t = PredictionTable::new(id);
    for i in 0..5 {
        let a = 0.1 + 0.05 * i as f64 + shift;
        t.insert(format!("img{i}"), ProbabilityVector::new([a, 0.3, 0.7 - a]).unwrap()).unwrap();
    }
    t
}

#[test]
fn fuse_level3_from_level2_tables() {
    let dir = tempfile::tempdir().unwrap();
    let matrix = r#"architectures = ["resnet18", "densenet121"]
resolutions = [128]
optimizers = ["adam"]
repeats = [1]"#;
    let cfg = write_config(dir.path(), matrix, "");
    let preds = dir.path().join("work/predictions");

    let out = run(&cfg, &["fuse", "--level", "3"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_line(&out)["requires"], "fuse --level 2");

    table(&level2_id(Architecture::ResNet18), 0.0).save(&preds).unwrap();
    table(&level2_id(Architecture::DenseNet121), 0.1).save(&preds).unwrap();
    let out = run(&cfg, &["fuse", "--level", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fused = PredictionTable::<f64>::load(&preds, LEVEL3_ID).unwrap();
    let want = table("x", 0.05);
    for (id, p) in &want.rows {
        for k in 0..3 {
            let d = (fused.rows[id].0[k] - p.0[k]).abs();
            assert!(d < 1e-6, "{id} class {k} off by {d}");
        }
    }

    let before = snapshot(dir.path());
    assert!(run(&cfg, &["fuse", "--level", "3"]).status.success());
    assert_eq!(snapshot(dir.path()), before);

    let out = run(&cfg, &["fuse", "--level", "1"]);
    assert_eq!(error_line(&out)["requires"], "predict");
}

#[test]
fn level3_needs_a_multi_resolution_plan() {
    let dir = tempfile::tempdir().unwrap();
    let matrix = r#"architectures = ["resnet18"]
resolutions = [64]
optimizers = ["adam"]
repeats = [1]"#;
    let cfg = write_config(dir.path(), matrix, "");
    assert_eq!(run(&cfg, &["fuse", "--level", "3"]).status.code(), Some(2));
}

#[test]
fn all_runs_end_to_end_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), ONE_CELL_PER_SIZE, "epochs = 3\nlr_drop_epochs = [2]\nbatch_size = 8");
    let out = run(&cfg, &["all"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("level 3 fusion") && stdout.contains("Matsunaga"));

    let work = dir.path().join("work");
    for rel in [
        "predictions/fusion_graph.json",
        "predictions/resnet18_64_adam_r1.csv",
        "predictions/L3/final.csv",
        "predictions/single/64.csv",
        "reports/eval/L3/final.json",
        "reports/tables.txt",
        "reports/tables.json",
        "reports/roc_level3.svg",
        "reports/exemplars.json",
        "runs/resnet18_128_adam_r1/run.json",
    ] {
        assert!(work.join(rel).exists(), "{rel} missing");
    }
    let report: Value = serde_json::from_str(&std::fs::read_to_string(work.join("reports/eval/L3/final.json")).unwrap()).unwrap();
    assert_eq!(report["n_images"], 12);

    let before = snapshot(dir.path());
    let again = run(&cfg, &["all"]);
    assert!(again.status.success());
    assert_eq!(snapshot(dir.path()), before, "a second run rewrote files");
    assert_eq!(again.stdout, stdout.as_bytes());

    // A training change invalidates the runs and everything downstream.
    let cfg = write_config(dir.path(), ONE_CELL_PER_SIZE, "epochs = 2\nlr_drop_epochs = [1]\nbatch_size = 8");
    assert_eq!(run(&cfg, &["predict"]).status.code(), Some(3));
    assert!(run(&cfg, &["train"]).status.success());
    assert!(run(&cfg, &["predict"]).status.success());
    let rec: Value =
        serde_json::from_str(&std::fs::read_to_string(work.join("runs/resnet18_64_adam_r1/run.json")).unwrap()).unwrap();
    assert_eq!(rec["config"]["epochs"], 2);
}

#[test]
fn cache_root_env_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), ONE_CELL_PER_SIZE, "");
    let other = dir.path().join("elsewhere");
    let out = Command::new(BIN)
        .arg("--config")
        .arg(&cfg)
        .args(["--dry-run", "preprocess"])
        .env("DERMRES_CACHE_ROOT", &other)
        .output()
        .unwrap();
    assert!(String::from_utf8(out.stdout).unwrap().contains(other.join("64").to_str().unwrap()));
}
