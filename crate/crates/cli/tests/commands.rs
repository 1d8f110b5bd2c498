use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dtn_core::{Dtn, RunConfig};

const TINY: &str = r#"
seed = 1

[model]
image_h = 16
image_w = 16
channel_plan = [8, 16]
depth = 1
heads = 2

[data]
n_train = 32
n_val = 16
n_test = 200

[train]
batch_size = 16
epochs = 1
lr = 0.001

[distill]
patience = 2
max_generations = 1
max_epochs = 1
"#;

fn dtn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dtn"))
        .args(args)
        .env("DTN_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// Writes the tiny config and returns its path.
fn setup(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

fn out_dir(dir: &Path, name: &str) -> String {
    format!("output_dir={:?}", dir.join(name).display().to_string())
}

fn json(path: PathBuf) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn read_all(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

#[test]
fn training_is_reproducible_from_its_own_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    let cfg = cfg.to_str().unwrap();
    ok(dtn(&[
        "train",
        "--config",
        cfg,
        "--override",
        &out_dir(tmp.path(), "a"),
    ]));
    ok(dtn(&[
        "train",
        "--config",
        cfg,
        "--override",
        &out_dir(tmp.path(), "b"),
    ]));
    let (a, b) = (tmp.path().join("a/train"), tmp.path().join("b/train"));
    for f in ["metrics.json", "train_log.csv"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }

    let manifest = json(a.join("manifest.json"));
    assert_eq!(manifest["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(manifest["command"], "train");
    let copy = a.join("config.toml");
    let resolved: RunConfig = dtn_cli::config::load(&copy, &[]).unwrap();
    assert_eq!(manifest["config_hash"], resolved.config_hash());

    // The copied config alone reproduces the metrics.
    ok(dtn(&[
        "train",
        "--config",
        copy.to_str().unwrap(),
        "--override",
        &out_dir(tmp.path(), "c"),
    ]));
    let c = tmp.path().join("c/train");
    assert_eq!(
        std::fs::read(a.join("metrics.json")).unwrap(),
        std::fs::read(c.join("metrics.json")).unwrap()
    );
    assert!(a.join("checkpoint").is_dir());
}

#[test]
fn exported_data_gives_the_same_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    let cfg = cfg.to_str().unwrap();
    ok(dtn(&[
        "datagen",
        "--config",
        cfg,
        "--override",
        &out_dir(tmp.path(), "d"),
    ]));
    let data = tmp.path().join("d/datagen/data");
    let before = read_all(&data);
    ok(dtn(&[
        "train",
        "--config",
        cfg,
        "--override",
        &out_dir(tmp.path(), "from_disk"),
        "--data",
        data.to_str().unwrap(),
    ]));
    ok(dtn(&[
        "train",
        "--config",
        cfg,
        "--override",
        &out_dir(tmp.path(), "fresh"),
    ]));
    assert_eq!(
        std::fs::read(tmp.path().join("from_disk/train/metrics.json")).unwrap(),
        std::fs::read(tmp.path().join("fresh/train/metrics.json")).unwrap()
    );
    assert_eq!(read_all(&data), before);
}

#[test]
fn untrained_model_scores_at_chance_and_is_left_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = setup(tmp.path());
    let cfg = dtn_cli::config::load(&cfg_path, &[]).unwrap();
    let ckpt = tmp.path().join("untrained");
    Dtn::<f32>::new(cfg.model.clone(), cfg.variant)
        .unwrap()
        .save(&ckpt, BTreeMap::new())
        .unwrap();
    let before = read_all(&ckpt);
    let cfg_s = cfg_path.to_str().unwrap();
    let ck = ckpt.to_str().unwrap();
    ok(dtn(&[
        "eval",
        "--config",
        cfg_s,
        "--override",
        &out_dir(tmp.path(), "e"),
        "--checkpoint",
        ck,
    ]));
    let m = json(tmp.path().join("e/eval/metrics.json"));
    let acc = m["acc"].as_f64().unwrap();
    assert!((acc - 0.5).abs() <= 0.05, "acc {acc}");
    assert_eq!(m["samples"], 200);

    ok(dtn(&[
        "diagnose",
        "--config",
        cfg_s,
        "--override",
        &out_dir(tmp.path(), "e"),
        "--checkpoint",
        ck,
    ]));
    let d = tmp.path().join("e/diagnose");
    let attention = json(d.join("attention.json"));
    assert_eq!(attention["blocks"].as_array().unwrap().len(), 1);
    let pgms = read_all(&d).keys().filter(|k| k.ends_with(".pgm")).count();
    assert_eq!(pgms, 4);
    let features = std::fs::read_to_string(d.join("features.csv")).unwrap();
    assert_eq!(features.lines().count(), 201);
    assert_eq!(read_all(&ckpt), before);
}

#[test]
fn distillation_records_every_generation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    ok(dtn(&[
        "distill",
        "--config",
        cfg.to_str().unwrap(),
        "--override",
        &out_dir(tmp.path(), "x"),
    ]));
    let d = tmp.path().join("x/distill");
    let chain = json(d.join("chain.json"));
    let records = chain["chain"].as_array().unwrap();
    // One initial generation plus G_max = 1 distillation generation.
    assert_eq!(records.len(), 2);
    assert_eq!(records[0]["index"], 0);
    assert_eq!(records[1]["index"], 1);
    assert!(d.join("checkpoint").is_dir());
    assert!(d.join("checkpoints/gen0").is_dir());
    let manifest = json(d.join("manifest.json"));
    assert_eq!(manifest["details"]["generations"], 2);
}

#[test]
fn exit_codes_separate_usage_from_numeric_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let code = |out: Output| out.status.code().unwrap();

    let no_seed = tmp.path().join("no_seed.toml");
    std::fs::write(&no_seed, TINY.replace("seed = 1", "")).unwrap();
    assert_eq!(code(dtn(&["train", "--config", no_seed.to_str().unwrap()])), 2);
    assert_eq!(code(dtn(&["train", "--config", "/nonexistent/cfg.toml"])), 2);
    assert_eq!(code(dtn(&["train", "--config", cfg, "--override", "train.epochs"])), 2);
    assert_eq!(
        code(dtn(&["train", "--config", cfg, "--override", "train.epochs=0"])),
        2
    );
    assert_eq!(code(dtn(&["eval", "--config", cfg])), 2);
    assert_eq!(code(dtn(&["frobnicate"])), 2);

    let bad_threads = Command::new(env!("CARGO_BIN_EXE_dtn"))
        .args(["datagen", "--config", cfg, "--override", &out_dir(tmp.path(), "t")])
        .env("DTN_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(bad_threads), 2);

    let blown = dtn(&[
        "train",
        "--config",
        cfg,
        "--override",
        &out_dir(tmp.path(), "n"),
        "--override",
        "train.lr=1e30",
        "--override",
        "train.weight_decay=0.0",
    ]);
    assert_eq!(code(blown), 1);
}
