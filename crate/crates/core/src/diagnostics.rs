//! Attention-diversity statistics, Grad-CAM saliency and feature export.

use std::io::Write;
use std::path::Path;

use dtn_tensor::{sigmoid, Graph, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::AttentionKind;
use crate::data::Sample;
use crate::error::{DtnError, Result};
use crate::model::{stack_images, Dtn, ForwardOptions, Mode};
use crate::train::EVAL_BATCH;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub block: usize,
    /// Mean cosine similarity over distinct head pairs, averaged over the batch.
    pub mean_cosine: f64,
    /// Mean row entropy of each head.
    pub head_entropy: Vec<f64>,
    /// Current σ(θ) of each head; empty when the block has no scale factors.
    pub gates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub blocks: Vec<BlockReport>,
    /// Expert gates σ(θ_i), when present.
    pub moe_gates: Vec<f64>,
}

impl AttentionReport {
    pub fn deepest(&self) -> Option<&BlockReport> {
        self.blocks.last()
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    // Rounding in the norms would otherwise leave self-similarity a hair below 1.
    if a == b {
        return 1.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Mean cosine similarity over all unordered pairs of distinct maps.
pub fn mean_pairwise_cosine(maps: &[&[f64]]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..maps.len() {
        for j in i + 1..maps.len() {
            total += cosine(maps[i], maps[j]);
            pairs += 1;
        }
    }
    if pairs == 0 {
        1.0
    } else {
        total / pairs as f64
    }
}

/// Shannon entropy (nats) of a probability row.
pub fn entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

fn gates<T: Scalar>(model: &Dtn<T>, name: &str) -> Vec<f64> {
    model
        .params
        .get(name)
        .map(|t| t.data().iter().map(|v| sigmoid(v.as_f64())).collect())
        .unwrap_or_default()
}

/// Head-similarity and entropy statistics of every block in eval mode.
pub fn attention_diversity<T: Scalar>(model: &Dtn<T>, batch: &[Sample]) -> Result<AttentionReport> {
    if batch.is_empty() {
        return Err(DtnError::Contract("attention report needs at least one sample".into()));
    }
    let depth = if model.variant.use_levt { model.config.depth } else { 0 };
    let d = model.config.heads;
    let mut cos_sum = vec![0.0; depth];
    let mut ent_sum = vec![vec![0.0; d]; depth];
    let mut rows_seen = 0usize;
    for chunk in batch.chunks(EVAL_BATCH) {
        if depth == 0 {
            break;
        }
        let g = Graph::no_grad();
        let bound = model.params.bind(&g)?;
        let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        let x = g.constant(stack_images::<T>(&images)?)?;
        let out = model.forward(&g, &bound, x, &mut ForwardOptions::eval())?;
        let n = chunk.len();
        for (j, &a) in out.attention.iter().enumerate() {
            let att = g.value(a)?.to_f64_vec();
            let per_head = att.len() / d;
            let per_sample = per_head / n;
            let hw = (per_sample as f64).sqrt() as usize;
            for s in 0..n {
                let maps: Vec<&[f64]> = (0..d)
                    .map(|i| &att[i * per_head + s * per_sample..][..per_sample])
                    .collect();
                cos_sum[j] += mean_pairwise_cosine(&maps);
                for (i, m) in maps.iter().enumerate() {
                    ent_sum[j][i] += m.chunks(hw).map(entropy).sum::<f64>() / hw as f64;
                }
            }
        }
        rows_seen += n;
    }
    let blocks = (0..depth)
        .map(|j| BlockReport {
            block: j,
            mean_cosine: cos_sum[j] / rows_seen as f64,
            head_entropy: ent_sum[j].iter().map(|e| e / rows_seen as f64).collect(),
            gates: if model.variant.attention_kind == AttentionKind::Mas {
                gates(model, &format!("levt.block{j}.theta"))
            } else {
                Vec::new()
            },
        })
        .collect();
    Ok(AttentionReport {
        blocks,
        moe_gates: gates(model, "moe.theta"),
    })
}

/// Saliency over the backbone output grid, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
}

/// Gradient-weighted activation map of `target_class` at the backbone output.
pub fn grad_cam<T: Scalar>(model: &Dtn<T>, image: &Tensor<f32>, target_class: usize) -> Result<SaliencyMap> {
    if target_class > 1 {
        return Err(DtnError::Contract(format!("class {target_class} out of range")));
    }
    let g = Graph::new();
    let bound = model.params.bind(&g)?;
    let x = g.constant(stack_images::<T>(&[image])?)?;
    let x_loc = model.backbone(&g, &bound, x, Mode::Eval)?;
    let feat = g.value(x_loc)?;
    let leaf = g.variable((*feat).clone())?;
    let out = model.forward_from_backbone(&g, &bound, leaf, &mut ForwardOptions::eval())?;
    let mut pick = [0.0; 2];
    pick[target_class] = 1.0;
    let onehot = g.constant(Tensor::from_f64(&[1, 2], &pick)?)?;
    let target = g.sum(g.mul(out.logits, onehot)?)?;
    let grads = g.backward(target)?;
    let s = feat.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let hw = h * w;
    let grad = grads
        .get(leaf)
        .map(|v| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>())
        .unwrap_or_else(|| vec![0.0; c * hw]);
    let fv = feat.to_f64_vec();
    let mut cam = vec![0.0; hw];
    for ch in 0..c {
        let weight = grad[ch * hw..][..hw].iter().sum::<f64>() / hw as f64;
        for (m, f) in cam.iter_mut().zip(&fv[ch * hw..][..hw]) {
            *m += weight * f;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let (lo, hi) = cam
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi <= 0.0 || hi == lo {
        if hi <= 0.0 {
            log::warn!("grad-cam: no positive evidence, returning an all-zero map");
        }
        let fill = if hi > 0.0 { 1.0 } else { 0.0 };
        return Ok(SaliencyMap {
            h,
            w,
            values: vec![fill; hw],
        });
    }
    let values = cam.iter().map(|v| (v - lo) / (hi - lo)).collect();
    Ok(SaliencyMap { h, w, values })
}

/// Binary 8-bit portable graymap.
pub fn write_pgm(map: &SaliencyMap, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", map.w, map.h)?;
    let bytes: Vec<u8> = map
        .values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    Ok(())
}

/// CSV of `sample_id, label, f1..fc` for the pooled features of every sample.
pub fn export_features<T: Scalar>(model: &Dtn<T>, samples: &[Sample], path: &Path) -> Result<()> {
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let out = model.infer(&images, EVAL_BATCH)?;
    let mut w = csv::Writer::from_path(path)?;
    let c = model.config.channels();
    let mut header = vec!["sample_id".to_string(), "label".to_string()];
    header.extend((1..=c).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for (s, o) in samples.iter().zip(out) {
        let mut row = vec![s.id.to_string(), s.label.to_string()];
        row.extend(o.features.iter().map(|v| format!("{v:e}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_basics() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cosine(&[0.3, 0.4], &[0.3, 0.4]) - 1.0).abs() < 1e-15);
        let u = [0.25; 4];
        assert!((entropy(&u) - 4f64.ln()).abs() < 1e-15);
    }
}
