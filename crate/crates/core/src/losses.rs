//! Cross-entropy, contrastive-center, distillation and combined losses on a recorded graph.
//!
//! All losses take batched inputs (`[n, k]`) and reduce by the batch mean.

use dtn_tensor::{Graph, Scalar, Var};
use serde::{Deserialize, Serialize};

use crate::config::LossWeights;
use crate::error::Result;

/// Probability floor inside the CE logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Per-component loss values for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub ce: f64,
    pub ctc: f64,
    pub kd: f64,
    pub total: f64,
}

impl LossComponents {
    pub fn scaled(self, k: f64) -> Self {
        Self {
            ce: self.ce * k,
            ctc: self.ctc * k,
            kd: self.kd * k,
            total: self.total * k,
        }
    }

    pub fn add(self, o: Self) -> Self {
        Self {
            ce: self.ce + o.ce,
            ctc: self.ctc + o.ctc,
            kd: self.kd + o.kd,
            total: self.total + o.total,
        }
    }
}

/// `-yᵀ ln(p)` for one-hot `labels[n×2]` and probabilities `probs[n×2]`.
pub fn ce_from_probs<T: Scalar>(g: &Graph<T>, probs: Var, labels: Var) -> Result<Var> {
    // Gather the true-class probability first so only that entry is clamped.
    let p_true = g.sum_axis(g.mul(probs, labels)?, 1)?;
    let nll = g.neg(g.ln_clamped(p_true, PROB_FLOOR)?)?;
    Ok(g.mean(nll)?)
}

/// Cross-entropy of softmax(logits) against one-hot labels.
pub fn ce_loss<T: Scalar>(g: &Graph<T>, logits: Var, labels: Var) -> Result<Var> {
    let probs = g.softmax_t(logits, 1.0, 1)?;
    ce_from_probs(g, probs, labels)
}

/// `½‖y − c_y‖² / (‖y − c_{1−y}‖ + ε)`, with `centers[2×k]` holding one row per class.
pub fn ctc_loss<T: Scalar>(g: &Graph<T>, y_pre: Var, labels: Var, centers: Var, eps: f64) -> Result<Var> {
    let own = g.matmul(labels, centers)?;
    let flipped = g.add_scalar(g.neg(labels)?, 1.0)?;
    let other = g.matmul(flipped, centers)?;
    let pull = g.scale(g.sum_axis(g.square(g.sub(y_pre, own)?)?, 1)?, 0.5)?;
    let push = g.sqrt(g.sum_axis(g.square(g.sub(y_pre, other)?)?, 1)?)?;
    let ratio = g.div(pull, g.add_scalar(push, eps)?)?;
    Ok(g.mean(ratio)?)
}

/// `KL(softmax_τ(teacher) ‖ softmax_τ(student))`; the teacher side carries no gradient.
pub fn kd_loss<T: Scalar>(g: &Graph<T>, teacher: Var, student: Var, tau: f64) -> Result<Var> {
    let t = g.detach(teacher)?;
    let log_pt = g.log_softmax_t(t, tau, 1)?;
    let pt = g.softmax_t(t, tau, 1)?;
    let log_ps = g.log_softmax_t(student, tau, 1)?;
    let kl = g.sum_axis(g.mul(pt, g.sub(log_pt, log_ps)?)?, 1)?;
    Ok(g.mean(kl)?)
}

/// Inputs of the combined loss for one batch.
#[derive(Debug, Clone, Copy)]
pub struct DsdInputs {
    pub labels: Var,
    pub student_logits: Var,
    /// Teacher logits; `None` before any teacher exists.
    pub teacher_logits: Option<Var>,
    /// Representation fed to the center loss (logits or features).
    pub ctc_input: Var,
    pub centers: Var,
}

/// `α₁·CE + α₂·Ct-c + α₃·KD`. Zero-weighted terms are not recorded.
pub fn dsd_loss<T: Scalar>(g: &Graph<T>, inputs: DsdInputs, w: &LossWeights) -> Result<(Var, LossComponents)> {
    let ce = ce_loss(g, inputs.student_logits, inputs.labels)?;
    let mut comps = LossComponents {
        ce: scalar(g, ce)?,
        ..LossComponents::default()
    };
    let mut total = g.scale(ce, w.alpha_ce)?;
    if w.alpha_ctc != 0.0 {
        let ctc = ctc_loss(g, inputs.ctc_input, inputs.labels, inputs.centers, w.eps)?;
        comps.ctc = scalar(g, ctc)?;
        total = g.add(total, g.scale(ctc, w.alpha_ctc)?)?;
    }
    if let (Some(teacher), true) = (inputs.teacher_logits, w.alpha_kd != 0.0) {
        let kd = kd_loss(g, teacher, inputs.student_logits, w.tau)?;
        comps.kd = scalar(g, kd)?;
        total = g.add(total, g.scale(kd, w.alpha_kd)?)?;
    }
    comps.total = scalar(g, total)?;
    Ok((total, comps))
}

fn scalar<T: Scalar>(g: &Graph<T>, v: Var) -> Result<f64> {
    Ok(g.value(v)?.data()[0].as_f64())
}
