//! Command implementations behind the `dtn` binary.
//!
//! Every command writes into `<output_dir>/<command>/`: a copy of the resolved config,
//! a manifest with its hash and the tool version, and the command's own artifacts.

pub mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dtn_core::config::LossKind;
use dtn_core::data::{export_dataset, generate_dataset, load_dataset, DatasetSplit, FAKE};
use dtn_core::diagnostics::{attention_diversity, export_features, grad_cam, write_pgm};
use dtn_core::distill::{self_distill_chain, DtnRunner};
use dtn_core::losses::LossComponents;
use dtn_core::train::{evaluate, fit, write_log, EvalReport};
use dtn_core::{Dtn, DtnError, RunConfig};
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// How many test images get a saliency map.
const SALIENCY_SAMPLES: usize = 4;
/// Samples used for attention statistics.
const ATTENTION_SAMPLES: usize = 64;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] DtnError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Run(DtnError::Config(_)) => 2,
            _ => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(DtnError::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Run(DtnError::Json(e))
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Caps the global worker pool from `DTN_THREADS`, when set.
pub fn init_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("DTN_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("DTN_THREADS must be a positive integer, got `{raw}`")))?;
    // A pool that already exists (tests, embedding) keeps its size.
    if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
        log::debug!("worker pool already initialised");
    }
    Ok(())
}

/// The per-command run directory with its config copy and manifest.
pub struct RunDir {
    pub path: PathBuf,
    command: &'static str,
    config_hash: String,
    seed: u64,
    files: Vec<String>,
}

impl RunDir {
    pub fn create(cfg: &RunConfig, command: &'static str) -> CliResult<Self> {
        let path = Path::new(&cfg.output_dir).join(command);
        std::fs::create_dir_all(&path)?;
        std::fs::write(path.join("config.toml"), config::to_toml(cfg)?)?;
        Ok(Self {
            path,
            command,
            config_hash: cfg.config_hash(),
            seed: cfg.seed,
            files: vec!["config.toml".into()],
        })
    }

    pub fn file(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.path.join(name)
    }

    fn finish(mut self, extra: serde_json::Value) -> CliResult<PathBuf> {
        self.files.push("manifest.json".into());
        let manifest = json!({
            "tool": "dtn",
            "version": TOOL_VERSION,
            "command": self.command,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "files": self.files,
            "details": extra,
        });
        std::fs::write(self.path.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(self.path)
    }
}

/// Metrics as written to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub split: &'static str,
    pub samples: usize,
    pub acc: f64,
    pub auc: f64,
    pub loss: LossComponents,
}

impl MetricsReport {
    fn test(r: &EvalReport) -> Self {
        Self {
            split: "test",
            samples: r.labels.len(),
            acc: r.acc,
            auc: r.auc,
            loss: r.loss,
        }
    }
}

fn dataset(cfg: &RunConfig, data_dir: Option<&Path>) -> CliResult<DatasetSplit> {
    match data_dir {
        Some(dir) => Ok(load_dataset(dir)?),
        None => {
            let m = &cfg.model;
            Ok(generate_dataset(
                &cfg.data,
                m.in_channels,
                m.image_h,
                m.image_w,
                cfg.data_seed(),
            )?)
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn load_model(dir: &Path) -> CliResult<Dtn<f32>> {
    let (model, _) = Dtn::<f32>::load(dir, None)?;
    Ok(model)
}

pub fn cmd_datagen(cfg: &RunConfig) -> CliResult<PathBuf> {
    let mut run = RunDir::create(cfg, "datagen")?;
    let data = dataset(cfg, None)?;
    export_dataset(&data, &run.file("data"))?;
    let counts = json!({
        "train": data.train.len(),
        "val": data.val.len(),
        "test": data.test.len(),
    });
    run.finish(counts)
}

pub fn cmd_train(cfg: &RunConfig, data_dir: Option<&Path>) -> CliResult<PathBuf> {
    let mut run = RunDir::create(cfg, "train")?;
    let data = dataset(cfg, data_dir)?;
    let mut model = Dtn::<f32>::new(cfg.model.clone(), cfg.variant)?;
    let weights = cfg.loss.for_kind(cfg.variant.loss_kind).initial();
    let logs = fit(
        &mut model,
        &data.train,
        &data.val,
        &weights,
        &cfg.train,
        cfg.seed,
        |l| {
            log::info!(
                "epoch {} loss {:.5} val acc {:.4} auc {:.4}",
                l.epoch,
                l.dsd,
                l.val_acc,
                l.val_auc
            );
            true
        },
    )?;
    write_log(&run.file("train_log.csv"), &logs)?;
    model.save(&run.file("checkpoint"), BTreeMap::new())?;
    let metrics = MetricsReport::test(&evaluate(&model, &data.test, &weights)?);
    write_json(&run.file("metrics.json"), &metrics)?;
    run.finish(json!({ "epochs": logs.len(), "parameters": model.num_trainable() }))
}

pub fn cmd_distill(cfg: &RunConfig, data_dir: Option<&Path>) -> CliResult<PathBuf> {
    let mut run = RunDir::create(cfg, "distill")?;
    let data = dataset(cfg, data_dir)?;
    let test = data.test.clone();
    let init = Dtn::<f32>::new(cfg.model.clone(), cfg.variant)?;
    let mut runner = DtnRunner::new(data, cfg.clone(), Some(run.file("checkpoints")));
    let (model, state) = self_distill_chain(&mut runner, init, &cfg.distill)?;
    state.write_manifest(&run.file("chain.json"))?;
    let logs: Vec<_> = state.chain.iter().flat_map(|r| r.history.iter().cloned()).collect();
    write_log(&run.file("distill_log.csv"), &logs)?;
    model.save(&run.file("checkpoint"), BTreeMap::new())?;
    let ce = cfg.loss.for_kind(LossKind::Ce);
    let metrics = MetricsReport::test(&evaluate(&model, &test, &ce)?);
    write_json(&run.file("metrics.json"), &metrics)?;
    run.finish(json!({
        "generations": state.chain.len(),
        "final_generation": state.final_generation(),
    }))
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, data_dir: Option<&Path>) -> CliResult<PathBuf> {
    let mut run = RunDir::create(cfg, "eval")?;
    let data = dataset(cfg, data_dir)?;
    let model = load_model(checkpoint)?;
    let weights = cfg.loss.for_kind(LossKind::Ce);
    let metrics = MetricsReport::test(&evaluate(&model, &data.test, &weights)?);
    println!(
        "acc {:.4} auc {:.4} on {} samples",
        metrics.acc, metrics.auc, metrics.samples
    );
    write_json(&run.file("metrics.json"), &metrics)?;
    run.finish(json!({ "checkpoint": checkpoint.display().to_string() }))
}

pub fn cmd_diagnose(cfg: &RunConfig, checkpoint: &Path, data_dir: Option<&Path>) -> CliResult<PathBuf> {
    let mut run = RunDir::create(cfg, "diagnose")?;
    let data = dataset(cfg, data_dir)?;
    let model = load_model(checkpoint)?;
    let probe = &data.test[..data.test.len().min(ATTENTION_SAMPLES)];
    let report = attention_diversity(&model, probe)?;
    write_json(&run.file("attention.json"), &report)?;
    for s in data.test.iter().take(SALIENCY_SAMPLES) {
        let map = grad_cam(&model, &s.image, FAKE)?;
        write_pgm(&map, &run.file(&format!("saliency_{}.pgm", s.id)))?;
    }
    export_features(&model, &data.test, &run.file("features.csv"))?;
    run.finish(json!({ "checkpoint": checkpoint.display().to_string() }))
}
