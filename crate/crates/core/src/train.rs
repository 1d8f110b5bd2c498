//! Mini-batch training and evaluation of a [`Dtn`].

use dtn_tensor::{AdamConfig, AdamState, Graph, Scalar, StepLr, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{CtcSpace, LossWeights, TrainConfig};
use crate::data::{augment, Sample};
use crate::error::{DtnError, Result};
use crate::losses::{dsd_loss, DsdInputs, LossComponents};
use crate::metrics::{accuracy, auc};
use crate::model::{stack_images, Dtn, ForwardOptions};

/// Optimizer, schedule and randomness carried across epochs.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub adam: AdamState<f32>,
    pub schedule: StepLr,
    pub rng: ChaCha8Rng,
    pub epochs_done: usize,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, seed: u64) -> Self {
        let adam = AdamState::new(AdamConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        });
        Self {
            adam,
            schedule: StepLr {
                base: cfg.lr,
                step_size: cfg.lr_step,
                gamma: cfg.lr_gamma,
            },
            rng: ChaCha8Rng::seed_from_u64(seed),
            epochs_done: 0,
        }
    }
}

/// Splits `0..n` into batches, folding a trailing singleton into the previous batch so
/// batch normalization always sees at least two samples.
pub fn batch_ranges(n: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    let bs = batch_size.max(2);
    let mut out: Vec<_> = (0..n).step_by(bs).map(|s| s..(s + bs).min(n)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().end = last.end;
    }
    out
}

fn labels_tensor<T: Scalar>(samples: &[&Sample]) -> Result<Tensor<T>> {
    let data: Vec<f64> = samples.iter().flat_map(|s| s.hard_label()).collect();
    Ok(Tensor::from_f64(&[samples.len(), 2], &data)?)
}

fn teacher_tensor<T: Scalar>(samples: &[&Sample]) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(2 * samples.len());
    for s in samples {
        let t = s
            .soft_label
            .ok_or_else(|| DtnError::Contract(format!("sample {} has no teacher logits", s.id)))?;
        data.extend(t);
    }
    Ok(Tensor::from_f64(&[samples.len(), 2], &data)?)
}

/// Records the combined loss of one batch on `g`.
fn batch_loss<T: Scalar>(
    model: &Dtn<T>,
    g: &Graph<T>,
    bound: &dtn_tensor::BoundParams,
    samples: &[&Sample],
    images: &[&Tensor<f32>],
    weights: &LossWeights,
    opts: &mut ForwardOptions<'_>,
) -> Result<(dtn_tensor::Var, LossComponents, crate::model::Forward<T>)> {
    let x = g.constant(stack_images(images)?)?;
    let out = model.forward(g, bound, x, opts)?;
    let labels = g.constant(labels_tensor(samples)?)?;
    let teacher = if weights.alpha_kd != 0.0 {
        Some(g.constant(teacher_tensor(samples)?)?)
    } else {
        None
    };
    let ctc_input = match model.variant.ctc_dimensionality {
        CtcSpace::Logits => out.logits,
        CtcSpace::Features => out.features,
    };
    let inputs = DsdInputs {
        labels,
        student_logits: out.logits,
        teacher_logits: teacher,
        ctc_input,
        centers: bound.get("centers")?,
    };
    let (loss, comps) = dsd_loss(g, inputs, weights)?;
    Ok((loss, comps, out))
}

/// One pass over `data` in shuffled mini-batches. Returns the sample-weighted mean loss.
pub fn train_epoch(
    model: &mut Dtn<f32>,
    state: &mut TrainState,
    data: &[Sample],
    weights: &LossWeights,
    cfg: &TrainConfig,
) -> Result<LossComponents> {
    if data.len() < 2 {
        return Err(DtnError::Contract("training needs at least two samples".into()));
    }
    state.adam.lr = state.schedule.lr_at(state.epochs_done);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut state.rng);
    let mut total = LossComponents::default();
    for range in batch_ranges(order.len(), cfg.batch_size) {
        let batch: Vec<Sample> = order[range]
            .iter()
            .map(|&i| augment(&data[i], &mut state.rng, &cfg.augment))
            .collect();
        let refs: Vec<&Sample> = batch.iter().collect();
        let images: Vec<&Tensor<f32>> = batch.iter().map(|s| &s.image).collect();
        let g = Graph::new();
        let bound = model.params.bind(&g)?;
        let mut opts = ForwardOptions::train(Some(&mut state.rng));
        let (loss, comps, out) = batch_loss(model, &g, &bound, &refs, &images, weights, &mut opts)?;
        if !comps.total.is_finite() {
            return Err(DtnError::Numeric(format!("non-finite training loss {}", comps.total)));
        }
        let grads = g.backward(loss)?;
        model.params.accumulate_grads(&bound, &grads)?;
        // Tensors outside the active loss (e.g. unused centers) get zero gradients.
        for (_, t) in model.params.iter_mut() {
            if t.requires_grad() && t.grad().is_none() {
                let zeros = vec![0.0f32; t.numel()];
                t.accumulate_grad(&zeros)?;
            }
        }
        state.adam.step(&mut model.params)?;
        model.apply_bn_stats(&out.bn_stats, cfg.bn_momentum)?;
        total = total.add(comps.scaled(batch.len() as f64));
    }
    state.epochs_done += 1;
    Ok(total.scaled(1.0 / data.len() as f64))
}

/// Eval-mode loss components, accuracy, AUC and fake-class scores over a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub loss: LossComponents,
    pub acc: f64,
    pub auc: f64,
    #[serde(skip)]
    pub scores: Vec<f64>,
    #[serde(skip)]
    pub labels: Vec<usize>,
}

pub const EVAL_BATCH: usize = 64;

pub fn evaluate<T: Scalar>(model: &Dtn<T>, data: &[Sample], weights: &LossWeights) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(DtnError::Metric("empty evaluation split".into()));
    }
    let ranges = batch_ranges(data.len(), EVAL_BATCH);
    let parts = ranges
        .par_iter()
        .map(|r| -> Result<(LossComponents, Vec<f64>)> {
            let samples: Vec<&Sample> = data[r.clone()].iter().collect();
            let images: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
            let g = Graph::no_grad();
            let bound = model.params.bind(&g)?;
            let mut opts = ForwardOptions::eval();
            let (_, comps, out) = batch_loss(model, &g, &bound, &samples, &images, weights, &mut opts)?;
            let logits = g.value(out.logits)?;
            let scores = logits
                .data()
                .chunks(2)
                .map(|l| 1.0 / (1.0 + (l[0].as_f64() - l[1].as_f64()).exp()))
                .collect();
            Ok((comps.scaled(samples.len() as f64), scores))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut loss = LossComponents::default();
    let mut scores = Vec::with_capacity(data.len());
    for (c, s) in parts {
        loss = loss.add(c);
        scores.extend(s);
    }
    let loss = loss.scaled(1.0 / data.len() as f64);
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    Ok(EvalReport {
        loss,
        acc: accuracy(&scores, &labels, 0.5)?,
        auc: auc(&scores, &labels)?,
        scores,
        labels,
    })
}

/// One line of a training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub generation: usize,
    pub epoch: usize,
    #[serde(rename = "L_CE")]
    pub ce: f64,
    #[serde(rename = "L_Ctc")]
    pub ctc: f64,
    #[serde(rename = "L_KD")]
    pub kd: f64,
    #[serde(rename = "L_DSD")]
    pub dsd: f64,
    pub val_acc: f64,
    pub val_auc: f64,
}

impl EpochLog {
    pub fn from_eval(generation: usize, epoch: usize, r: &EvalReport) -> Self {
        Self {
            generation,
            epoch,
            ce: r.loss.ce,
            ctc: r.loss.ctc,
            kd: r.loss.kd,
            dsd: r.loss.total,
            val_acc: r.acc,
            val_auc: r.auc,
        }
    }
}

/// Trains for `cfg.epochs` epochs, evaluating on `val` after each one. `on_epoch` sees
/// every log line and may stop training early by returning `false`.
pub fn fit(
    model: &mut Dtn<f32>,
    train: &[Sample],
    val: &[Sample],
    weights: &LossWeights,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog) -> bool,
) -> Result<Vec<EpochLog>> {
    let mut state = TrainState::new(cfg, seed);
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        train_epoch(model, &mut state, train, weights, cfg)?;
        let report = evaluate(model, val, weights)?;
        let log = EpochLog::from_eval(0, epoch, &report);
        let go_on = on_epoch(&log);
        logs.push(log);
        if !go_on {
            break;
        }
    }
    Ok(logs)
}

/// Writes the per-epoch log as CSV.
pub fn write_log(path: &std::path::Path, logs: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for l in logs {
        w.serialize(l)?;
    }
    w.flush()?;
    Ok(())
}
