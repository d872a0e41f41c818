use std::path::Path;
use std::process::{Command, Output};

fn spineseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spineseg"))
        .args(args)
        .env_remove("SPINESEG_RUN_DIR")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "command failed: {}", stderr(&o));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, manifest: &str) -> String {
    let text = format!(
        r#"{{"seed": 3, "dataset": {{"manifest": "{manifest}"}},
  "preprocess": {{"target_depth": 16, "patch_size": [32, 32, 16]}},
  "model": {{"base_width": 4, "levels": 2, "enforce_budget": false}},
  "train": {{"iterations": 2, "batch_size_2d": 4, "slices_per_volume": 2}},
  "matrix": [{{"dimensionality": "2d", "modalities": ["T1", "T2"]}}],
  "folds": 2}}"#
    );
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn missing_manifest_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "nowhere/manifest.json");
    let o = spineseg(&["crossval", "--config", &cfg, "--dry-run"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("dataset.manifest"), "{err}");
    assert!(err.contains("stage `config`"), "{err}");
}

#[test]
fn schema_violation_is_keyed() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, r#"{"seed": 1, "dataset": {"manifest": "m.json"}, "train": {"learning_rate": "fast"}}"#).unwrap();
    let o = spineseg(&["crossval", "--config", p.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("train.learning_rate"), "{}", stderr(&o));
}

#[test]
fn bad_flags_are_usage_errors() {
    let o = spineseg(&["crossval", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    let o = spineseg(&["report"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn report_on_empty_run_fails() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("records.csv"), "case_id,config_id,fold,dice,sensitivity,specificity,tp,fp,fn,tn\n").unwrap();
    let o = spineseg(&["report", "--run", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("stage `report`"));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(spineseg(&["phantom-gen", "--out", data.to_str().unwrap(), "--cases", "4", "--seed", "5"]));
    assert!(data.join("manifest.json").is_file());
    let cfg = write_config(dir.path(), "data/manifest.json");

    let plan = ok(spineseg(&["crossval", "--config", &cfg, "--dry-run", "--folds", "1"]));
    assert!(plan.contains("fold 1: validate"), "{plan}");
    assert!(plan.contains("matrix 2D T1+T2"), "{plan}");
    assert!(!dir.path().join("runs").exists());

    let out = dir.path().join("pre");
    ok(spineseg(&["preprocess", "--config", &cfg, "--out", out.to_str().unwrap()]));
    assert!(out.join("case-000_t2.nii.gz").is_file() && out.join("case-003_mask.nii.gz").is_file());

    let prev = dir.path().join("preview");
    ok(spineseg(&["augment-preview", "--config", &cfg, "--out", prev.to_str().unwrap(), "--count", "2"]));
    assert!(prev.join("case-000_aug001_t1.nii.gz").is_file());
    let log: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(prev.join("transforms.json")).unwrap()).unwrap();
    assert_eq!(log.as_array().unwrap().len(), 2);

    let run = dir.path().join("run");
    ok(spineseg(&["crossval", "--config", &cfg, "--run", run.to_str().unwrap(), "--folds", "0"]));
    let ckpt = run.join("2d-t1-t2/fold-0/checkpoint");
    assert!(ckpt.join("weights.bin").is_file());

    let rec = dir.path().join("eval/records.csv");
    let o = ok(spineseg(&[
        "evaluate", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--modalities", "T1,T2", "--out",
        rec.to_str().unwrap(),
    ]));
    assert!(o.contains("wrote 4 records"), "{o}");

    ok(spineseg(&["report", "--run", run.to_str().unwrap()]));
    let md = std::fs::read(run.join("summary.md")).unwrap();
    let csv = std::fs::read_to_string(run.join("summary.csv")).unwrap();
    assert!(csv.starts_with("metric,statistic,2D [T1+T2],IRV\n"), "{csv}");
    for m in ["dice", "sensitivity", "specificity"] {
        assert!(run.join(format!("boxplot_{m}.svg")).is_file());
    }
    ok(spineseg(&["report", "--run", run.to_str().unwrap()]));
    assert_eq!(std::fs::read(run.join("summary.md")).unwrap(), md);
}

#[test]
fn run_dir_env_overrides_root() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(spineseg(&["phantom-gen", "--out", data.to_str().unwrap(), "--cases", "4", "--seed", "6"]));
    let cfg = write_config(dir.path(), "data/manifest.json");
    let root = dir.path().join("elsewhere");
    let o = Command::new(env!("CARGO_BIN_EXE_spineseg"))
        .args(["train", "--config", &cfg, "--dry-run"])
        .env("SPINESEG_RUN_DIR", &root)
        .output()
        .unwrap();
    let out = ok(o);
    assert!(out.contains(root.to_str().unwrap()), "{out}");
}
