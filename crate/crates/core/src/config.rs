//! Architecture, loss, training, distillation and data settings.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::AugmentOp;
use crate::error::{config_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Gaussian,
    Uniform,
    None,
}

/// Expert input noise: `scale` times the per-sample standard deviation of the feature map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub scale: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            kind: NoiseKind::Gaussian,
            scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DtnConfig {
    pub in_channels: usize,
    pub image_h: usize,
    pub image_w: usize,
    /// Output channels of each conv-BN-ReLU-pool stage.
    pub channel_plan: Vec<usize>,
    /// Number of experts B.
    pub experts: usize,
    /// Number of transformer blocks L.
    pub depth: usize,
    /// Number of attention heads d.
    pub heads: usize,
    pub mlp_ratio: usize,
    pub noise: NoiseSpec,
    pub seed: u64,
}

impl Default for DtnConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            image_h: 32,
            image_w: 32,
            channel_plan: vec![16, 32, 64],
            experts: 2,
            depth: 6,
            heads: 8,
            mlp_ratio: 4,
            noise: NoiseSpec::default(),
            seed: 0,
        }
    }
}

impl DtnConfig {
    /// Channel count c of the backbone output.
    pub fn channels(&self) -> usize {
        self.channel_plan.last().copied().unwrap_or(self.in_channels)
    }

    /// Spatial size (h, w) of the backbone output.
    pub fn feature_hw(&self) -> (usize, usize) {
        let s = 1usize << self.channel_plan.len();
        (self.image_h / s, self.image_w / s)
    }

    pub fn head_dim(&self) -> usize {
        self.channels() / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.image_h == 0 || self.image_w == 0 {
            return config_err("input dimensions must be positive");
        }
        if self.channel_plan.contains(&0) {
            return config_err("channel plan entries must be positive");
        }
        let s = 1usize << self.channel_plan.len();
        if !self.image_h.is_multiple_of(s) || !self.image_w.is_multiple_of(s) {
            return config_err(format!(
                "image {}x{} is not divisible by the backbone stride {s}",
                self.image_h, self.image_w
            ));
        }
        if self.experts == 0 || self.depth == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return config_err("experts, depth, heads and mlp_ratio must be at least 1");
        }
        let c = self.channels();
        if !c.is_multiple_of(self.heads) {
            return config_err(format!("channels {c} not divisible by heads {}", self.heads));
        }
        if c < 4 {
            return config_err("backbone output needs at least 4 channels for the expert bottleneck");
        }
        if !(self.noise.scale >= 0.0 && self.noise.scale.is_finite()) {
            return config_err("noise scale must be finite and non-negative");
        }
        Ok(())
    }

    /// Stable hash of the architecture fields; checkpoints carry it.
    pub fn arch_hash(&self, variant: &VariantSpec) -> String {
        let arch = serde_json::json!({
            "in_channels": self.in_channels,
            "image": [self.image_h, self.image_w],
            "channel_plan": self.channel_plan,
            "experts": self.experts,
            "depth": self.depth,
            "heads": self.heads,
            "mlp_ratio": self.mlp_ratio,
            "variant": variant,
        });
        hex_digest(arch.to_string().as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Vanilla,
    Mas,
    Reattention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    CeKd,
    CeCtc,
    Dsd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CtcSpace {
    /// Two-dimensional classifier logits with learnable 2-D centers.
    Logits,
    /// GAP features with learnable c-dimensional centers.
    Features,
}

/// Which modules and losses are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantSpec {
    pub use_moe: bool,
    pub use_levt: bool,
    pub mas_in_moe: bool,
    pub mas_in_levt: bool,
    pub attention_kind: AttentionKind,
    pub loss_kind: LossKind,
    pub ctc_dimensionality: CtcSpace,
}

impl Default for VariantSpec {
    fn default() -> Self {
        Self::full()
    }
}

impl VariantSpec {
    pub fn full() -> Self {
        Self {
            use_moe: true,
            use_levt: true,
            mas_in_moe: true,
            mas_in_levt: true,
            attention_kind: AttentionKind::Mas,
            loss_kind: LossKind::Dsd,
            ctc_dimensionality: CtcSpace::Logits,
        }
    }

    /// Backbone, GAP and classifier only.
    pub fn baseline() -> Self {
        Self {
            use_moe: false,
            use_levt: false,
            mas_in_moe: false,
            mas_in_levt: false,
            attention_kind: AttentionKind::Vanilla,
            ..Self::full()
        }
    }

    /// Full model with every scaling site switched off.
    pub fn without_mas() -> Self {
        Self {
            mas_in_moe: false,
            mas_in_levt: false,
            attention_kind: AttentionKind::Vanilla,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mas_in_levt && !self.use_levt {
            return config_err("mas_in_levt requires use_levt");
        }
        if self.mas_in_moe && !self.use_moe {
            return config_err("mas_in_moe requires use_moe");
        }
        if self.use_levt && self.mas_in_levt != (self.attention_kind == AttentionKind::Mas) {
            return config_err("mas_in_levt must be set exactly when attention_kind is mas");
        }
        if !self.use_levt && self.attention_kind != AttentionKind::Vanilla {
            return config_err("attention_kind other than vanilla requires use_levt");
        }
        Ok(())
    }
}

/// Balance factors of the combined loss plus the center-loss epsilon and KD temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha_ce: f64,
    pub alpha_ctc: f64,
    pub alpha_kd: f64,
    pub eps: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_ce: 4.0,
            alpha_ctc: 0.4,
            alpha_kd: 0.6,
            eps: 1e-8,
            tau: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha_ce, self.alpha_ctc, self.alpha_kd]
            .iter()
            .any(|a| !(a.is_finite() && *a >= 0.0))
        {
            return config_err("loss weights must be finite and non-negative");
        }
        if !(self.eps > 0.0) {
            return config_err("eps must be positive");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return config_err("tau must be positive");
        }
        Ok(())
    }

    /// Weights actually used for a loss ablation.
    pub fn for_kind(&self, kind: LossKind) -> Self {
        let mut w = *self;
        match kind {
            LossKind::Ce => {
                w.alpha_ctc = 0.0;
                w.alpha_kd = 0.0;
            }
            LossKind::CeKd => w.alpha_ctc = 0.0,
            LossKind::CeCtc => w.alpha_kd = 0.0,
            LossKind::Dsd => {}
        }
        w
    }

    /// Weights for training without a teacher.
    pub fn initial(&self) -> Self {
        Self { alpha_kd: 0.0, ..*self }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub bn_momentum: f64,
    pub augment: Vec<AugmentOp>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 20,
            lr: 1e-4,
            weight_decay: 1e-4,
            lr_step: 15,
            lr_gamma: 0.1,
            bn_momentum: 0.1,
            augment: vec![AugmentOp::HFlip { p: 0.5 }],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return config_err("batch_size must be at least 2 for batch normalization");
        }
        if self.epochs == 0 {
            return config_err("epochs must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return config_err("lr must be positive and weight_decay non-negative");
        }
        if self.lr_step == 0 || !(self.lr_gamma > 0.0) {
            return config_err("lr_step and lr_gamma must be positive");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return config_err("bn_momentum must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Patience t: non-improving epochs tolerated within a generation.
    pub patience: usize,
    /// Distillation generations after initial training.
    pub max_generations: usize,
    /// Training epochs per generation.
    pub max_epochs: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            patience: 5,
            max_generations: 4,
            max_epochs: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub strength: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_val: 500,
            n_test: 500,
            strength: 1.0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, n) in [
            ("n_train", self.n_train),
            ("n_val", self.n_val),
            ("n_test", self.n_test),
        ] {
            if n < 2 || n % 2 != 0 {
                return config_err(format!("{name} must be even and at least 2"));
            }
        }
        if !(self.strength > 0.0 && self.strength <= 1.0) {
            return config_err("strength must lie in (0, 1]");
        }
        Ok(())
    }
}

/// Everything one command needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: String,
    #[serde(default)]
    pub model: DtnConfig,
    #[serde(default)]
    pub variant: VariantSpec,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub data: DataConfig,
}

fn default_output() -> String {
    "runs/default".into()
}

impl RunConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            output_dir: default_output(),
            model: DtnConfig {
                seed,
                ..DtnConfig::default()
            },
            variant: VariantSpec::default(),
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            distill: DistillConfig::default(),
            data: DataConfig::default(),
        }
    }

    /// Validates every section and propagates the master seed into the model.
    pub fn finalize(mut self) -> Result<Self> {
        self.model.seed = self.seed;
        self.model.validate()?;
        self.variant.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        Ok(self)
    }

    pub fn config_hash(&self) -> String {
        hex_digest(serde_json::to_string(self).unwrap_or_default().as_bytes())
    }

    /// Seed for dataset generation.
    pub fn data_seed(&self) -> u64 {
        self.seed ^ 0x5eed_da7a
    }
}
