//! Soft-tag generation and the generational self-distillation chain.
//!
//! A generation starts the student as a copy of the frozen teacher, evaluates it, then
//! trains epoch by epoch. Every strict improvement of the validation loss becomes the new
//! best checkpoint; every other epoch increments the non-improvement counter `z`, which
//! is never reset inside a generation. The generation ends once `z` reaches the patience
//! (at least one) or the epoch budget runs out. The chain promotes the best student to
//! teacher while it beats the loss its teacher started the generation with.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{DistillConfig, LossWeights, RunConfig};
use crate::data::{DatasetSplit, Sample, Split};
use crate::error::{DtnError, Result};
use crate::losses::LossComponents;
use crate::model::Dtn;
use crate::train::{evaluate, train_epoch, EpochLog, TrainState, EVAL_BATCH};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    PatienceExhausted,
    MaxEpochs,
}

/// Validation outcome of one evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub loss: LossComponents,
    pub acc: Option<f64>,
    pub auc: Option<f64>,
}

impl EvalSummary {
    pub fn from_loss(total: f64) -> Self {
        Self {
            loss: LossComponents {
                total,
                ..LossComponents::default()
            },
            acc: None,
            auc: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub index: usize,
    pub teacher_ckpt: Option<String>,
    pub best_student_ckpt: String,
    /// Loss of the untrained student (a copy of the teacher) at epoch 0.
    pub initial_loss: f64,
    pub best_loss: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// Final value of the non-improvement counter z.
    pub patience_hits: usize,
    pub stop_reason: StopReason,
    pub promoted: bool,
    /// Evaluations from epoch 0 onwards.
    pub history: Vec<EpochLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillState {
    pub chain: Vec<GenerationRecord>,
    /// Loss the last promoted teacher was measured at.
    pub teacher_loss: f64,
    pub max_generations: usize,
    pub patience: usize,
}

impl DistillState {
    /// Index of the generation whose student the chain returns.
    pub fn final_generation(&self) -> usize {
        self.chain
            .iter()
            .filter(|r| r.promoted)
            .map(|r| r.index)
            .next_back()
            .unwrap_or(0)
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// What the chain needs from a model family.
pub trait GenerationRunner {
    type Model: Clone;

    /// Prepares generation `generation`; `teacher` is `None` for initial training.
    fn begin(&mut self, generation: usize, teacher: Option<&Self::Model>) -> Result<()>;

    /// Validation loss of `student` under the current generation's objective.
    fn evaluate(&mut self, student: &Self::Model, generation: usize) -> Result<EvalSummary>;

    fn train_epoch(&mut self, student: &mut Self::Model, generation: usize, epoch: usize) -> Result<()>;

    /// Persists a new best student and returns its identifier.
    fn checkpoint(&mut self, student: &Self::Model, generation: usize, epoch: usize) -> Result<String>;
}

fn log_line(generation: usize, epoch: usize, e: &EvalSummary) -> EpochLog {
    EpochLog {
        generation,
        epoch,
        ce: e.loss.ce,
        ctc: e.loss.ctc,
        kd: e.loss.kd,
        dsd: e.loss.total,
        val_acc: e.acc.unwrap_or(f64::NAN),
        val_auc: e.auc.unwrap_or(f64::NAN),
    }
}

fn checked(e: EvalSummary, generation: usize, epoch: usize) -> Result<EvalSummary> {
    if e.loss.total.is_finite() {
        Ok(e)
    } else {
        Err(DtnError::Numeric(format!(
            "non-finite loss {} in generation {generation}, epoch {epoch}",
            e.loss.total
        )))
    }
}

/// Trains one generation. Returns its record and best student.
pub fn train_generation<R: GenerationRunner>(
    runner: &mut R,
    generation: usize,
    teacher: Option<(&R::Model, &str)>,
    mut student: R::Model,
    patience: usize,
    max_epochs: usize,
) -> Result<(GenerationRecord, R::Model)> {
    runner.begin(generation, teacher.map(|t| t.0))?;
    let first = checked(runner.evaluate(&student, generation)?, generation, 0)?;
    let mut history = vec![log_line(generation, 0, &first)];
    let initial_loss = first.loss.total;
    let mut best_loss = initial_loss;
    let mut best = student.clone();
    let mut best_ckpt = runner.checkpoint(&student, generation, 0)?;
    let mut best_epoch = 0;
    let limit = patience.max(1);
    let mut z = 0;
    let mut stop_reason = StopReason::MaxEpochs;
    let mut epochs_run = 0;
    for epoch in 1..=max_epochs {
        runner.train_epoch(&mut student, generation, epoch)?;
        epochs_run = epoch;
        let e = checked(runner.evaluate(&student, generation)?, generation, epoch)?;
        history.push(log_line(generation, epoch, &e));
        if e.loss.total < best_loss {
            best_loss = e.loss.total;
            best = student.clone();
            best_ckpt = runner.checkpoint(&student, generation, epoch)?;
            best_epoch = epoch;
        } else {
            z += 1;
            if z >= limit {
                stop_reason = StopReason::PatienceExhausted;
                break;
            }
        }
    }
    let record = GenerationRecord {
        index: generation,
        teacher_ckpt: teacher.map(|t| t.1.to_string()),
        best_student_ckpt: best_ckpt,
        initial_loss,
        best_loss,
        best_epoch,
        epochs_run,
        patience_hits: z,
        stop_reason,
        promoted: false,
        history,
    };
    Ok((record, best))
}

/// Initial training followed by up to `max_generations` distillation generations.
/// Returns the last promoted model and the full chain.
pub fn self_distill_chain<R: GenerationRunner>(
    runner: &mut R,
    init: R::Model,
    cfg: &DistillConfig,
) -> Result<(R::Model, DistillState)> {
    let (mut first, mut teacher) = train_generation(runner, 0, None, init, cfg.patience, cfg.max_epochs)?;
    // Initial training always hands over a teacher.
    first.promoted = true;
    let mut teacher_ckpt = first.best_student_ckpt.clone();
    let mut state = DistillState {
        teacher_loss: first.best_loss,
        chain: vec![first],
        max_generations: cfg.max_generations,
        patience: cfg.patience,
    };
    for generation in 1..=cfg.max_generations {
        let (mut record, best) = train_generation(
            runner,
            generation,
            Some((&teacher, &teacher_ckpt)),
            teacher.clone(),
            cfg.patience,
            cfg.max_epochs,
        )?;
        record.promoted = record.best_loss < record.initial_loss;
        let promoted = record.promoted;
        if promoted {
            teacher = best;
            teacher_ckpt = record.best_student_ckpt.clone();
            state.teacher_loss = record.best_loss;
        }
        state.chain.push(record);
        if !promoted {
            break;
        }
    }
    Ok((teacher, state))
}

/// Caches the teacher's eval-mode logits on every sample.
pub fn generate_soft_tags(teacher: &Dtn<f32>, samples: &mut [Sample]) -> Result<()> {
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let out = teacher.infer(&images, EVAL_BATCH)?;
    for (s, o) in samples.iter_mut().zip(out) {
        s.soft_label = Some(o.logits);
    }
    Ok(())
}

/// Runs generations of [`Dtn`] students on a synthetic dataset.
pub struct DtnRunner {
    pub data: DatasetSplit,
    pub config: RunConfig,
    weights: LossWeights,
    state: TrainState,
    ckpt_dir: Option<PathBuf>,
}

impl DtnRunner {
    /// `ckpt_dir`, when given, receives one directory per saved student.
    pub fn new(data: DatasetSplit, config: RunConfig, ckpt_dir: Option<PathBuf>) -> Self {
        let weights = config.loss.for_kind(config.variant.loss_kind).initial();
        let state = TrainState::new(&config.train, config.seed);
        Self {
            data,
            config,
            weights,
            state,
            ckpt_dir,
        }
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }
}

impl GenerationRunner for DtnRunner {
    type Model = Dtn<f32>;

    fn begin(&mut self, generation: usize, teacher: Option<&Dtn<f32>>) -> Result<()> {
        let base = self.config.loss.for_kind(self.config.variant.loss_kind);
        match teacher {
            Some(t) => {
                self.weights = base;
                for split in [Split::Train, Split::Val] {
                    generate_soft_tags(t, self.data.split_mut(split))?;
                }
            }
            None => {
                self.weights = base.initial();
                for split in [Split::Train, Split::Val, Split::Test] {
                    self.data.split_mut(split).iter_mut().for_each(|s| s.soft_label = None);
                }
            }
        }
        let seed = self.config.seed.wrapping_add(0x9e37_79b9 * (generation as u64 + 1));
        self.state = TrainState::new(&self.config.train, seed);
        Ok(())
    }

    fn evaluate(&mut self, student: &Dtn<f32>, _generation: usize) -> Result<EvalSummary> {
        let r = evaluate(student, &self.data.val, &self.weights)?;
        Ok(EvalSummary {
            loss: r.loss,
            acc: Some(r.acc),
            auc: Some(r.auc),
        })
    }

    fn train_epoch(&mut self, student: &mut Dtn<f32>, _generation: usize, _epoch: usize) -> Result<()> {
        train_epoch(
            student,
            &mut self.state,
            &self.data.train,
            &self.weights,
            &self.config.train,
        )?;
        Ok(())
    }

    fn checkpoint(&mut self, student: &Dtn<f32>, generation: usize, epoch: usize) -> Result<String> {
        let id = format!("gen{generation}-epoch{epoch}");
        if let Some(dir) = &self.ckpt_dir {
            let meta = BTreeMap::from([
                ("generation".to_string(), json!(generation)),
                ("epoch".to_string(), json!(epoch)),
            ]);
            student.save(&dir.join(format!("gen{generation}")), meta)?;
        }
        Ok(id)
    }
}
