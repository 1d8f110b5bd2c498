//! The detector: CNN backbone, expert attention, locally-enhanced transformer, pooling and
//! a two-way classifier.

mod backbone;
mod init;
mod levt;
mod moe;

use std::collections::BTreeMap;
use std::path::Path;

use dtn_tensor::{checkpoint, BatchStats, BnMode, BoundParams, Graph, ModelParams, Scalar, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use crate::config::{DtnConfig, VariantSpec};
use crate::error::{DtnError, Result};

pub use init::init_params;

pub const BN_EPS: f64 = 1e-5;

/// Tolerance of the attention-row and expert-map contracts.
const CONTRACT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-call switches of [`Dtn::forward`].
pub struct ForwardOptions<'a> {
    pub mode: Mode,
    /// Source of expert input noise; noise is only drawn in training mode.
    pub noise_rng: Option<&'a mut ChaCha8Rng>,
    /// Replaces the expert gates σ(θ_i) with fixed values.
    pub moe_gate: Option<&'a [f64]>,
    /// Replaces every head's σ(θ_{j,i}) with a fixed value.
    pub attention_scale: Option<f64>,
    /// Asserts probability rows and expert-map bounds after each block.
    pub check_contracts: bool,
}

impl<'a> ForwardOptions<'a> {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            noise_rng: None,
            moe_gate: None,
            attention_scale: None,
            check_contracts: cfg!(debug_assertions),
        }
    }

    pub fn train(noise_rng: Option<&'a mut ChaCha8Rng>) -> Self {
        Self {
            mode: Mode::Train,
            noise_rng,
            ..Self::eval()
        }
    }
}

/// Graph handles produced by one forward pass over a batch.
#[derive(Debug)]
pub struct Forward<T> {
    /// `[n × 2]`, index 0 = real, 1 = fake.
    pub logits: Var,
    /// Pooled features `[n × c]`.
    pub features: Var,
    /// Backbone output `[n × c × h × w]`.
    pub x_loc: Var,
    /// Expert attention map `[n × 1 × h × w]`.
    pub moe_map: Option<Var>,
    /// Softmax attention `[d × n × hw × hw]` for each block.
    pub attention: Vec<Var>,
    /// Batch statistics of every batch-norm layer in training mode, keyed by layer prefix.
    pub bn_stats: Vec<(String, BatchStats<T>)>,
}

/// Eval-mode outputs for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub logits: [f64; 2],
    pub features: Vec<f64>,
}

impl Inference {
    /// Softmax probability of the fake class.
    pub fn fake_prob(&self) -> f64 {
        let [a, b] = self.logits;
        1.0 / (1.0 + (a - b).exp())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dtn<T> {
    pub config: DtnConfig,
    pub variant: VariantSpec,
    pub params: ModelParams<T>,
}

pub(crate) struct Ctx<'a, T: Scalar> {
    pub g: &'a Graph<T>,
    pub p: &'a BoundParams,
    pub params: &'a ModelParams<T>,
    pub mode: Mode,
    pub stats: Vec<(String, BatchStats<T>)>,
}

impl<T: Scalar> Ctx<'_, T> {
    pub fn var(&self, name: &str) -> Result<Var> {
        Ok(self.p.get(name)?)
    }

    pub fn bn(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.var(&format!("{prefix}.gamma"))?;
        let beta = self.var(&format!("{prefix}.beta"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.g.batch_norm(x, gamma, beta, BnMode::Train, BN_EPS)?;
                if let Some(s) = stats {
                    self.stats.push((prefix.to_string(), s));
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.params.get(&format!("{prefix}.running_mean"))?.data();
                let var = self.params.get(&format!("{prefix}.running_var"))?.data();
                let mode = BnMode::Eval { mean, var };
                Ok(self.g.batch_norm(x, gamma, beta, mode, BN_EPS)?.0)
            }
        }
    }

    pub fn conv(&self, prefix: &str, x: Var, padding: usize) -> Result<Var> {
        let w = self.var(&format!("{prefix}.w"))?;
        let b = self.var(&format!("{prefix}.b"))?;
        Ok(self.g.conv2d(x, w, Some(b), padding, 1)?)
    }
}

/// Stacks `[c × h × w]` images into one `[n × c × h × w]` tensor.
pub fn stack_images<T: Scalar>(images: &[&Tensor<f32>]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| DtnError::Contract("empty batch".into()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(DtnError::Contract(format!(
                "batch mixes image shapes {:?} and {:?}",
                shape,
                img.shape()
            )));
        }
        data.extend(img.data().iter().map(|&v| T::of(v as f64)));
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Ok(Tensor::new(&full, data)?)
}

impl<T: Scalar> Dtn<T> {
    /// Freshly initialized model; deterministic in `config.seed`.
    pub fn new(config: DtnConfig, variant: VariantSpec) -> Result<Self> {
        config.validate()?;
        variant.validate()?;
        let params = init_params(&config, &variant);
        Ok(Self {
            config,
            variant,
            params,
        })
    }

    pub fn num_trainable(&self) -> usize {
        self.params.num_trainable()
    }

    /// Full forward pass on `x[n × in_channels × h₀ × w₀]`.
    pub fn forward(
        &self,
        g: &Graph<T>,
        bound: &BoundParams,
        x: Var,
        opts: &mut ForwardOptions<'_>,
    ) -> Result<Forward<T>> {
        let mut ctx = Ctx {
            g,
            p: bound,
            params: &self.params,
            mode: opts.mode,
            stats: Vec::new(),
        };
        let x_loc = backbone::forward(&mut ctx, &self.config, x)?;
        let mut out = self.head_inner(&mut ctx, x_loc, opts)?;
        out.bn_stats = ctx.stats;
        Ok(out)
    }

    /// Everything after the backbone, starting from a given backbone output.
    pub fn forward_from_backbone(
        &self,
        g: &Graph<T>,
        bound: &BoundParams,
        x_loc: Var,
        opts: &mut ForwardOptions<'_>,
    ) -> Result<Forward<T>> {
        let mut ctx = Ctx {
            g,
            p: bound,
            params: &self.params,
            mode: opts.mode,
            stats: Vec::new(),
        };
        let mut out = self.head_inner(&mut ctx, x_loc, opts)?;
        out.bn_stats = ctx.stats;
        Ok(out)
    }

    /// Backbone output alone.
    pub fn backbone(&self, g: &Graph<T>, bound: &BoundParams, x: Var, mode: Mode) -> Result<Var> {
        let mut ctx = Ctx {
            g,
            p: bound,
            params: &self.params,
            mode,
            stats: Vec::new(),
        };
        backbone::forward(&mut ctx, &self.config, x)
    }

    fn head_inner(&self, ctx: &mut Ctx<'_, T>, x_loc: Var, opts: &mut ForwardOptions<'_>) -> Result<Forward<T>> {
        let g = ctx.g;
        let (mut x, mut moe_map) = (x_loc, None);
        if self.variant.use_moe {
            let (x_moe, a) = moe::forward(ctx, &self.config, &self.variant, x_loc, opts)?;
            if opts.check_contracts {
                moe::check_map(&*g.value(a)?)?;
            }
            x = x_moe;
            moe_map = Some(a);
        }
        let mut attention = Vec::new();
        if self.variant.use_levt {
            let (y, maps) = levt::forward(ctx, &self.config, &self.variant, x, opts)?;
            if opts.check_contracts {
                for m in &maps {
                    levt::check_rows(&*g.value(*m)?)?;
                }
            }
            x = y;
            attention = maps;
        }
        let features = g.global_avg_pool(x)?;
        let logits = g.add(g.matmul(features, ctx.var("cls.w")?)?, ctx.var("cls.b")?)?;
        Ok(Forward {
            logits,
            features,
            x_loc,
            moe_map,
            attention,
            bn_stats: Vec::new(),
        })
    }

    /// Folds training-batch statistics into the running buffers.
    pub fn apply_bn_stats(&mut self, stats: &[(String, BatchStats<T>)], momentum: f64) -> Result<()> {
        for (prefix, s) in stats {
            let mut mean = self.params.get(&format!("{prefix}.running_mean"))?.data().to_vec();
            let mut var = self.params.get(&format!("{prefix}.running_var"))?.data().to_vec();
            s.update_running(&mut mean, &mut var, momentum);
            self.params
                .get_mut(&format!("{prefix}.running_mean"))?
                .data_mut()
                .copy_from_slice(&mean);
            self.params
                .get_mut(&format!("{prefix}.running_var"))?
                .data_mut()
                .copy_from_slice(&var);
        }
        Ok(())
    }

    /// Eval-mode logits and features, batched and without gradient tracking.
    pub fn infer(&self, images: &[&Tensor<f32>], batch_size: usize) -> Result<Vec<Inference>> {
        let chunks: Vec<&[&Tensor<f32>]> = images.chunks(batch_size.max(1)).collect();
        let parts = chunks
            .par_iter()
            .map(|chunk| self.infer_batch(chunk))
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.into_iter().flatten().collect())
    }

    fn infer_batch(&self, images: &[&Tensor<f32>]) -> Result<Vec<Inference>> {
        let g = Graph::no_grad();
        let bound = self.params.bind(&g)?;
        let x = g.constant(stack_images(images)?)?;
        let out = self.forward(&g, &bound, x, &mut ForwardOptions::eval())?;
        let logits = g.value(out.logits)?;
        let feats = g.value(out.features)?;
        let c = feats.shape()[1];
        Ok((0..images.len())
            .map(|i| Inference {
                logits: [logits.data()[2 * i].as_f64(), logits.data()[2 * i + 1].as_f64()],
                features: feats.data()[i * c..(i + 1) * c].iter().map(|v| v.as_f64()).collect(),
            })
            .collect())
    }

    pub fn cast<U: Scalar>(&self) -> Dtn<U> {
        Dtn {
            config: self.config.clone(),
            variant: self.variant,
            params: self.params.cast(),
        }
    }

    pub fn arch_hash(&self) -> String {
        self.config.arch_hash(&self.variant)
    }

    /// Writes the parameters with architecture metadata and the given extra entries.
    pub fn save(&self, dir: &Path, extra: BTreeMap<String, serde_json::Value>) -> Result<()> {
        let mut meta = extra;
        meta.insert("arch_hash".into(), json!(self.arch_hash()));
        meta.insert("config".into(), serde_json::to_value(&self.config)?);
        meta.insert("variant".into(), serde_json::to_value(self.variant)?);
        checkpoint::save(&self.params, dir, meta)?;
        Ok(())
    }

    /// Loads a checkpoint; when `expected` is given its architecture hash must match.
    pub fn load(dir: &Path, expected: Option<(&DtnConfig, &VariantSpec)>) -> Result<(Self, checkpoint::Manifest)> {
        let (params, manifest) = checkpoint::load::<T>(dir)?;
        let meta = &manifest.metadata;
        let get = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| DtnError::Checkpoint(format!("manifest lacks {k}")))
        };
        let config: DtnConfig = serde_json::from_value(get("config")?)?;
        let variant: VariantSpec = serde_json::from_value(get("variant")?)?;
        let stored_hash = get("arch_hash")?;
        if stored_hash != json!(config.arch_hash(&variant)) {
            return Err(DtnError::Checkpoint("stored hash disagrees with stored config".into()));
        }
        if let Some((c, v)) = expected {
            if stored_hash != json!(c.arch_hash(v)) {
                return Err(DtnError::Checkpoint(
                    "architecture hash mismatch with the requested configuration".into(),
                ));
            }
        }
        let reference = init_params::<T>(&config, &variant);
        if reference.len() != params.len()
            || reference
                .iter()
                .zip(params.iter())
                .any(|((na, a), (nb, b))| na != nb || a.shape() != b.shape() || a.requires_grad() != b.requires_grad())
        {
            return Err(DtnError::Checkpoint(
                "parameter set does not match the architecture".into(),
            ));
        }
        Ok((
            Self {
                config,
                variant,
                params,
            },
            manifest,
        ))
    }
}
