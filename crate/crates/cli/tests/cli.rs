//! End-to-end tests of the `landmark` binary on tiny datasets and networks.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn landmark(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_landmark"))
        .args(args)
        .env("LANDMARK_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("summary is JSON")
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_training(iterations: usize) -> Value {
    json!({
        "iterations": iterations,
        "validation_interval": iterations / 2,
        "batch_size": 2,
        "crop_extents": [32, 32],
        "architecture": {"stem_channels": 4, "block_widths": [4, 8], "block_pairs": [1, 1], "head_width": 8}
    })
}

fn tiny_local(iterations: usize) -> Value {
    json!({
        "iterations": iterations,
        "validation_interval": iterations / 2,
        "batch_size": 2,
        "architecture": {"block_widths": [4, 4], "head_width": 4}
    })
}

/// A 16-image dataset with 10 train, 3 validation and 3 test items.
fn synth_dataset(root: &Path) -> PathBuf {
    let cfg = write_config(
        root,
        "synth.json",
        &json!({"count": 16, "seed": 3, "split": {"counts": {"train": 10, "validation": 3}}}),
    );
    let v = ok(&landmark(root, &["synth", "--config", s(&cfg)]));
    PathBuf::from(v["dir"].as_str().unwrap())
}

fn schema_validator(def: Option<&str>) -> jsonschema::Validator {
    let file = match def {
        Some(_) => "config.schema.json",
        None => "predictions.schema.json",
    };
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs").join(file);
    let mut schema: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    if let Some(d) = def {
        schema["$ref"] = json!(format!("#/$defs/{d}"));
    }
    jsonschema::validator_for(&schema).unwrap()
}

fn assert_valid(v: &jsonschema::Validator, instance: &Value) {
    let errors: Vec<String> = v.iter_errors(instance).map(|e| format!("{e} at {}", e.instance_path)).collect();
    assert!(errors.is_empty(), "{errors:#?}\n{instance:#}");
}

#[test]
fn synth_is_reproducible_and_splits_by_fraction() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(
        root.path(),
        "c.json",
        &json!({"count": 100, "split": {"fractions": {"train": 0.7, "validation": 0.1}}}),
    );
    let a = ok(&landmark(root.path(), &["synth", "--config", s(&cfg)]));
    let b = ok(&landmark(root.path(), &["synth", "--config", s(&cfg)]));
    assert_eq!(a["manifest_sha256"], b["manifest_sha256"]);
    assert_ne!(a["dir"], b["dir"]);
    assert_eq!((a["train"].as_u64(), a["validation"].as_u64(), a["test"].as_u64()), (Some(70), Some(10), Some(20)));
    let c = ok(&landmark(root.path(), &["synth", "--config", s(&cfg), "--seed", "1"]));
    assert_ne!(a["manifest_sha256"], c["manifest_sha256"]);
    let dir = PathBuf::from(a["dir"].as_str().unwrap());
    assert!(dir.starts_with(root.path()));
    let saved: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
    assert_valid(&schema_validator(Some("synth")), &saved);
}

#[test]
fn config_errors_exit_with_usage_status() {
    let root = tempfile::tempdir().unwrap();
    let cfg = write_config(root.path(), "bad.json", &json!({"count": 5, "colour": "red"}));
    let out = landmark(root.path(), &["synth", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));

    let out = landmark(root.path(), &["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    let out = landmark(root.path(), &["train", "--dataset", "x", "--variant", "Q"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("variant"));
    let out = landmark(root.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_status_two() {
    let root = tempfile::tempdir().unwrap();
    let ds = synth_dataset(root.path());
    let out = landmark(
        root.path(),
        &["localize", "--dataset", s(&ds), "--global-checkpoint", "/nonexistent/best.ckpt"],
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let out = landmark(root.path(), &["train", "--dataset", "/nonexistent/dataset"]);
    assert_eq!(out.status.code(), Some(2));
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn train_global(root: &Path, ds: &Path, variant: &str, extra: &[&str]) -> Value {
    let cfg = write_config(root, "train.json", &json!({"training": tiny_training(4)}));
    let mut args = vec!["train", "--config", s(&cfg), "--dataset", s(ds), "--variant", variant];
    args.extend_from_slice(extra);
    ok(&landmark(root, &args))
}

#[test]
fn train_localize_eval_roundtrip() {
    let root = tempfile::tempdir().unwrap();
    let root = root.path();
    let ds = synth_dataset(root);

    let g = train_global(root, &ds, "R_log", &[]);
    assert_eq!(g["variant"], "R_log");
    assert_eq!(g["landmark_names"], json!(["blob", "ring", "cross"]));
    let gckpt = g["checkpoint"].as_str().unwrap().to_string();
    let gdir = Path::new(&gckpt).parent().unwrap().to_path_buf();
    for f in ["best.ckpt", "train_log.jsonl", "loss.csv", "summary.json", "config.json"] {
        assert!(gdir.join(f).exists(), "{f}");
    }
    let saved = read_json(&gdir.join("config.json"));
    assert_eq!(saved["training"]["iterations"], 4);
    assert_valid(&schema_validator(Some("train")), &saved);
    assert_eq!(std::fs::read_to_string(gdir.join("loss.csv")).unwrap().lines().count(), 5);
    let log = std::fs::read_to_string(gdir.join("train_log.jsonl")).unwrap();
    let validated: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter(|e| !e["validation_median_vox"].is_null())
        .map(|e| e["iteration"].as_u64().unwrap())
        .collect();
    assert_eq!(validated, vec![0, 2, 4]);

    let lcfg = write_config(root, "local.json", &json!({"training": tiny_local(4)}));
    let l = ok(&landmark(
        root,
        &[
            "train", "--config", s(&lcfg), "--dataset", s(&ds), "--role", "local",
            "--landmark", "1", "--global-checkpoint", &gckpt,
        ],
    ));
    assert_eq!(l["landmark_names"], json!(["ring"]));
    assert_eq!(l["role"], "local");

    let pcfg = write_config(
        root,
        "localize.json",
        &json!({"dataset": s(&ds), "global_checkpoint": gckpt, "local_checkpoints": [null, l["checkpoint"], null]}),
    );
    let p = ok(&landmark(root, &["localize", "--config", s(&pcfg)]));
    assert_eq!(p["images"], 3);
    let preds = read_json(Path::new(p["predictions"].as_str().unwrap()));
    assert_valid(&schema_validator(None), &preds);
    for img in preds["images"].as_array().unwrap() {
        assert!(img["timings"]["total_ms"].as_f64().unwrap() >= 0.0);
        let lms = img["landmarks"].as_array().unwrap();
        assert_eq!(lms[0]["voxel"], lms[0]["global_voxel"]);
        assert_eq!(lms[0]["refined"], false);
        let l1 = &lms[1];
        assert!(l1["refined"].as_bool().unwrap() ^ l1["fallback"].as_bool().unwrap());
    }

    let go = ok(&landmark(root, &["localize", "--config", s(&pcfg), "--global-only"]));
    let gpreds = read_json(Path::new(go["predictions"].as_str().unwrap()));
    assert_eq!(gpreds["global_only"], true);
    for img in gpreds["images"].as_array().unwrap() {
        for lm in img["landmarks"].as_array().unwrap() {
            assert_eq!(lm["voxel"], lm["global_voxel"]);
            assert_eq!(lm["refined"], false);
        }
    }

    let e = ok(&landmark(
        root,
        &["eval", "--predictions", p["predictions"].as_str().unwrap(), "--references", s(&ds)],
    ));
    let edir = PathBuf::from(e["dir"].as_str().unwrap());
    let report = read_json(&edir.join("report.json"));
    let summary = std::fs::read_to_string(edir.join("summary.csv")).unwrap();
    let pooled_line = summary.lines().find(|l| l.starts_with("all,")).unwrap();
    let fields: Vec<f64> = pooled_line.split(',').skip(1).map(|f| f.parse().unwrap()).collect();
    assert_eq!(fields[0], report["pooled"]["n"].as_f64().unwrap());
    assert_eq!(fields[1], report["pooled"]["median"].as_f64().unwrap());
    assert_eq!(fields[2], report["pooled"]["iqr"].as_f64().unwrap());
    let sdr: Vec<f64> = report["pooled"]["sdr"].as_array().unwrap().iter().map(|p| p["percent"].as_f64().unwrap()).collect();
    assert_eq!(&fields[7..], &sdr[..]);
    for f in ["errors.csv", "sdr.dat", "sdr.svg"] {
        assert!(edir.join(f).exists(), "{f}");
    }
    let thresholds: Vec<f64> = report["pooled"]["sdr"].as_array().unwrap().iter().map(|p| p["threshold_mm"].as_f64().unwrap()).collect();
    for t in [2.0, 2.5, 3.0, 4.0] {
        assert!(thresholds.contains(&t));
    }

    // predictions equal to the references
    let dataset = landmark_core::data::load_dataset(&ds).unwrap();
    let mut perfect = preds.clone();
    for img in perfect["images"].as_array_mut().unwrap() {
        let item = dataset.items.iter().find(|i| i.id == img["image_id"].as_str().unwrap()).unwrap();
        for (k, lm) in img["landmarks"].as_array_mut().unwrap().iter_mut().enumerate() {
            lm["voxel"] = json!(item.landmarks.coords[k]);
        }
    }
    let pp = write_config(root, "perfect.json", &perfect);
    let e = ok(&landmark(root, &["eval", "--predictions", s(&pp), "--references", s(&ds)]));
    assert_eq!(e["pooled_median_mm"], 0.0);
    assert!(e["pooled_sdr"].as_array().unwrap().iter().all(|p| p["percent"] == 100.0));

    let mut wrong = preds;
    wrong["split"] = json!("validation");
    let wp = write_config(root, "wrong.json", &wrong);
    let out = landmark(root, &["eval", "--predictions", s(&wp), "--references", s(&ds)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("image sets differ"));
}

#[test]
fn classification_only_needs_center_fusion() {
    let root = tempfile::tempdir().unwrap();
    let root = root.path();
    let ds = synth_dataset(root);
    let c = train_global(root, &ds, "C", &[]);
    let ckpt = c["checkpoint"].as_str().unwrap();
    ok(&landmark(root, &["localize", "--dataset", s(&ds), "--global-checkpoint", ckpt]));
    let cfg = write_config(root, "weighted.json", &json!({"global_fusion": "weighted"}));
    let out = landmark(
        root,
        &["localize", "--config", s(&cfg), "--dataset", s(&ds), "--global-checkpoint", ckpt],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("centers_weighted"));
}

#[test]
fn single_landmark_global_network() {
    let root = tempfile::tempdir().unwrap();
    let root = root.path();
    let ds = synth_dataset(root);
    let g = train_global(root, &ds, "R_log+C", &["--landmark", "2"]);
    assert_eq!(g["landmark_names"], json!(["cross"]));
    let (net, _) = landmark_core::model::load(Path::new(g["checkpoint"].as_str().unwrap())).unwrap();
    assert_eq!(net.config().num_landmarks, 1);
    let out = landmark(
        root,
        &["localize", "--dataset", s(&ds), "--global-checkpoint", g["checkpoint"].as_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(1), "incompatible landmark count");
    let out = landmark(root, &["train", "--dataset", s(&ds), "--landmark", "3"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ablation_table_and_cache() {
    let root = tempfile::tempdir().unwrap();
    let root = root.path();
    let ds = synth_dataset(root);
    let cfg = write_config(
        root,
        "ablate.json",
        &json!({
            "dataset": s(&ds),
            "variants": ["R", "C", "R_log+C"],
            "global": tiny_training(4),
            "local": tiny_local(2)
        }),
    );
    let a = ok(&landmark(root, &["ablate", "--config", s(&cfg)]));
    let labels: Vec<&str> = a["table"]["rows"].as_array().unwrap().iter().map(|r| r["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["R", "C", "R_log+C", "Proposed global-to-local"]);
    assert_eq!((a["trained"].as_u64(), a["cached"].as_u64()), (Some(6), Some(0)));
    let dir = PathBuf::from(a["dir"].as_str().unwrap());
    let md = std::fs::read_to_string(dir.join("table.md")).unwrap();
    assert!(md.starts_with("| Method | blob | ring | cross | All |"));
    assert_eq!(read_json(&dir.join("table.json")), a["table"]);
    assert_valid(&schema_validator(Some("ablate")), &read_json(&dir.join("config.json")));

    let b = ok(&landmark(root, &["ablate", "--config", s(&cfg)]));
    assert_eq!((b["trained"].as_u64(), b["cached"].as_u64()), (Some(0), Some(6)));
    assert_eq!(a["table"], b["table"]);
}

#[test]
fn default_configs_match_schema() {
    use landmark_cli::config::*;
    let cases: Vec<(&str, Value)> = vec![
        ("synth", serde_json::to_value(SynthConfig::default()).unwrap()),
        (
            "ingest",
            serde_json::to_value(IngestConfig {
                image_dir: "img".into(),
                annotation_dirs: vec!["a".into(), "b".into()],
                ..Default::default()
            })
            .unwrap(),
        ),
        ("train", serde_json::to_value(TrainRunConfig { dataset: "d".into(), ..Default::default() }).unwrap()),
        (
            "localize",
            serde_json::to_value(LocalizeConfig {
                dataset: "d".into(),
                global_checkpoint: "g".into(),
                ..Default::default()
            })
            .unwrap(),
        ),
        (
            "eval",
            serde_json::to_value(EvalConfig { predictions: "p".into(), references: "r".into(), ..Default::default() }).unwrap(),
        ),
        ("ablate", serde_json::to_value(AblateConfig { dataset: "d".into(), ..Default::default() }).unwrap()),
    ];
    for (def, v) in cases {
        let validator = schema_validator(Some(def));
        assert_valid(&validator, &v);
        let mut extra = v.clone();
        extra["unexpected"] = json!(1);
        assert!(!validator.is_valid(&extra), "{def} schema must reject unknown keys");
    }
}
