use dtn_tensor::Var;

use super::Ctx;
use crate::config::DtnConfig;
use crate::error::{DtnError, Result};
use dtn_tensor::Scalar;

/// Conv3×3 → BN → ReLU → 2×2 max-pool per stage of the channel plan.
pub(crate) fn forward<T: Scalar>(ctx: &mut Ctx<'_, T>, config: &DtnConfig, x: Var) -> Result<Var> {
    let shape = ctx.g.shape(x)?;
    let want = [config.in_channels, config.image_h, config.image_w];
    if shape.len() != 4 || shape[1..] != want {
        return Err(DtnError::Tensor(dtn_tensor::TensorError::Dimension {
            op: "backbone",
            msg: format!("expected n×{want:?}, got {shape:?}"),
        }));
    }
    let mut x = x;
    for s in 0..config.channel_plan.len() {
        x = ctx.conv(&format!("backbone.{s}.conv"), x, 1)?;
        x = ctx.bn(&format!("backbone.{s}.bn"), x)?;
        x = ctx.g.relu(x)?;
        x = ctx.g.max_pool2d(x, 2)?;
    }
    Ok(x)
}
