use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn mini() -> Value {
    json!({
        "phantom": { "extents": [32, 32, 32], "subjects": 10, "heldout_subjects": 4 },
        "registration": { "bypass": true },
        "grid": { "patch_size": 8, "stride": 8 },
        "encoder": { "channels": [1, 4, 8], "strides": [1, 2], "experts": 2, "embedding_dim": 8 },
        "contrast": { "negatives": 4, "queue_capacity": 32 },
        "train": { "steps": 4, "batch_size": 4 },
        "eval": { "folds": 2, "probe_seeds": 1 }
    })
}

fn run(dir: &Path, config: &Value, args: &[&str]) -> Output {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_vec(config).unwrap()).unwrap();
    Command::new(env!("CARGO_BIN_EXE_drascore"))
        .args(args)
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(dir.join("out"))
        .env("DRASCORE_LOG", "error")
        .output()
        .unwrap()
}

fn error_line(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not a JSON error line: {text}"))
}

#[test]
fn probe_before_pretrain_names_the_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &mini(), &["probe"]);
    assert!(!o.status.success());
    let e = error_line(&o);
    assert_eq!(e["error"], "missing_artifact");
    assert!(e["message"].as_str().unwrap().contains("checkpoint.dras"), "{e}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = mini();
    cfg["train"]["stpes"] = json!(3);
    let o = run(dir.path(), &cfg, &["generate"]);
    assert!(!o.status.success());
    let e = error_line(&o);
    assert_eq!(e["error"], "config");
    assert!(e["message"].as_str().unwrap().contains("stpes"), "{e}");
}

#[test]
fn generate_twice_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        assert!(run(d.path(), &mini(), &["generate", "--seed", "3"]).status.success());
    }
    let cohort = |d: &Path| {
        let mut files: Vec<_> = fs::read_dir(d.join("out/generate/cohort")).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        files.iter().map(|f| fs::read(f).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(cohort(a.path()), cohort(b.path()));
    assert_eq!(
        fs::read(a.path().join("out/generate/labels.csv")).unwrap(),
        fs::read(b.path().join("out/generate/labels.csv")).unwrap()
    );
}

#[test]
fn zero_step_checkpoint_probes_like_random_init() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["generate", "grid", "pretrain", "probe"] {
        let o = run(dir.path(), &mini(), &[stage, "--steps", "0"]);
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let out = dir.path().join("out");
    let mut r = csv::Reader::from_path(out.join("probe/folds.csv")).unwrap();
    let rows: Vec<Vec<String>> = r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect();
    let of = |variant: &str| -> Vec<(String, String)> {
        rows.iter().filter(|r| r[0] == variant).map(|r| (r[1].clone(), r[4].clone())).collect()
    };
    // the untrained checkpoint is the random initialization itself
    assert!(!of("checkpoint").is_empty());
    assert_eq!(of("checkpoint"), of("random_init"));
    for stage in ["generate", "grid", "pretrain", "probe"] {
        let cfg: Value = serde_json::from_slice(&fs::read(out.join(stage).join("config.json")).unwrap()).unwrap();
        assert!(cfg["version"].as_str().unwrap().starts_with("drascore "));
        assert_eq!(cfg["config"]["train"]["steps"], 0);
        let m: Value = serde_json::from_slice(&fs::read(out.join(stage).join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m["command"], stage);
        for a in m["artifacts"].as_array().unwrap() {
            assert!(out.join(stage).join(a.as_str().unwrap()).exists(), "{a}");
        }
    }
}

#[test]
fn gradcheck_reports_the_worst_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &mini(), &["gradcheck", "--seeds", "1"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    let worst: f64 = text.trim().rsplit(' ').next().unwrap().parse().unwrap();
    assert!(worst < 1e-4);
    assert!(dir.path().join("out/gradcheck/report.csv").exists());
}
