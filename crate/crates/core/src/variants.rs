//! Ablation ladder and cost accounting of model variants.

use dtn_tensor::{Graph, Scalar, Tensor};

use crate::config::{AttentionKind, DtnConfig, VariantSpec};
use crate::error::Result;
use crate::model::{Dtn, ForwardOptions};

/// Validates `spec` and builds the model it describes.
pub fn build_variant<T: Scalar>(spec: VariantSpec, config: &DtnConfig) -> Result<Dtn<T>> {
    Dtn::new(config.clone(), spec)
}

/// Baseline, +LEVT, +LEVT+MoE, then the full model with scaling at both sites.
pub fn ladder() -> Vec<(&'static str, VariantSpec)> {
    let baseline = VariantSpec::baseline();
    let levt = VariantSpec {
        use_levt: true,
        ..baseline
    };
    let levt_moe = VariantSpec { use_moe: true, ..levt };
    vec![
        ("baseline", baseline),
        ("baseline+levt", levt),
        ("baseline+levt+moe", levt_moe),
        ("baseline+levt+moe+mas", VariantSpec::full()),
    ]
}

/// Same spec with re-attention replacing the scale factors in the transformer.
pub fn with_reattention(spec: VariantSpec) -> VariantSpec {
    VariantSpec {
        mas_in_levt: false,
        attention_kind: AttentionKind::Reattention,
        ..spec
    }
}

/// Nominal scalar operations of one eval-mode forward pass over `n` images.
pub fn forward_flops<T: Scalar>(model: &Dtn<T>, n: usize) -> Result<u64> {
    let c = &model.config;
    let g = Graph::no_grad();
    let bound = model.params.bind(&g)?;
    let before = g.flops();
    let x = g.constant(Tensor::zeros(&[n, c.in_channels, c.image_h, c.image_w]))?;
    let mut opts = ForwardOptions::eval();
    opts.check_contracts = false;
    model.forward(&g, &bound, x, &mut opts)?;
    Ok(g.flops() - before)
}
