use dtn_tensor::{Scalar, Tensor, Var};

use super::{Ctx, ForwardOptions, CONTRACT_TOL};
use crate::config::{AttentionKind, DtnConfig, VariantSpec};
use crate::error::{DtnError, Result};

/// Adds the positional embedding and runs every block. Returns the output and the softmax
/// attention of each block.
pub(crate) fn forward<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    config: &DtnConfig,
    variant: &VariantSpec,
    x: Var,
    opts: &ForwardOptions<'_>,
) -> Result<(Var, Vec<Var>)> {
    let g = ctx.g;
    let c = config.channels();
    let (h, w) = config.feature_hw();
    let pos = g.reshape(ctx.var("levt.pos")?, &[1, c, h, w])?;
    let mut x = g.add(x, pos)?;
    let mut maps = Vec::with_capacity(config.depth);
    for j in 0..config.depth {
        let (y, attn) = block(ctx, config, variant, j, x, opts.attention_scale)?;
        x = y;
        maps.push(attn);
    }
    Ok((x, maps))
}

/// One transformer block: BN → multi-head attention → LC residual → BN/MLP residual.
pub(crate) fn block<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    config: &DtnConfig,
    variant: &VariantSpec,
    j: usize,
    x: Var,
    scale_override: Option<f64>,
) -> Result<(Var, Var)> {
    let g = ctx.g;
    let p = format!("levt.block{j}");
    let xb = ctx.bn(&format!("{p}.bn1"), x)?;
    let (x_agg, attn) = attention(ctx, config, variant, &p, xb, scale_override)?;
    let x_lc = g.add(ctx.conv(&format!("{p}.lc"), x_agg, 1)?, x_agg)?;
    let m = ctx.bn(&format!("{p}.bn2"), x_lc)?;
    let m = g.gelu(ctx.conv(&format!("{p}.mlp1"), m, 0)?)?;
    let m = ctx.conv(&format!("{p}.mlp2"), m, 0)?;
    Ok((g.add(m, x_lc)?, attn))
}

/// Scaled multi-head self-attention over the `h·w` tokens of `x[n×c×h×w]`, followed by the
/// aggregation matrix. Heads own contiguous channel groups of width `c/d`.
fn attention<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    config: &DtnConfig,
    variant: &VariantSpec,
    p: &str,
    x: Var,
    scale_override: Option<f64>,
) -> Result<(Var, Var)> {
    let g = ctx.g;
    let s = g.shape(x)?;
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (d, cd, hw) = (config.heads, config.head_dim(), h * w);
    // [n, d, cd, hw] → [d, n, hw, cd] → [d, n·hw, cd]
    let heads = g.reshape(
        g.permute(g.reshape(x, &[n, d, cd, hw])?, &[1, 0, 3, 2])?,
        &[d, n * hw, cd],
    )?;
    let proj = |name: &str| -> Result<Var> {
        let wt = ctx.var(&format!("{p}.{name}"))?;
        Ok(g.reshape(g.bmm(heads, wt, false)?, &[d * n, hw, cd])?)
    };
    let (q, k, v) = (proj("wq")?, proj("wk")?, proj("wv")?);
    let scores = g.reshape(g.bmm(q, k, true)?, &[d, n, hw, hw])?;
    let inv_sqrt = 1.0 / (cd as f64).sqrt();
    let scaled = match (scale_override, variant.attention_kind) {
        (Some(sv), _) => g.scale(scores, sv * inv_sqrt)?,
        (None, AttentionKind::Mas) => {
            let gate = g.scale(g.sigmoid(ctx.var(&format!("{p}.theta"))?)?, inv_sqrt)?;
            g.mul(scores, g.reshape(gate, &[d, 1, 1, 1])?)?
        }
        (None, _) => g.scale(scores, inv_sqrt)?,
    };
    let attn = g.softmax_t(scaled, 1.0, 3)?;
    let mixed = if variant.attention_kind == AttentionKind::Reattention {
        let flat = g.reshape(attn, &[d, n * hw * hw])?;
        g.reshape(g.matmul(ctx.var(&format!("{p}.mix"))?, flat)?, &[d * n, hw, hw])?
    } else {
        g.reshape(attn, &[d * n, hw, hw])?
    };
    let out = g.reshape(g.bmm(mixed, v, false)?, &[d, n, hw, cd])?;
    // [d, n, hw, cd] → [n, hw, d, cd] → [n·hw, c]
    let cat = g.reshape(g.permute(out, &[1, 2, 0, 3])?, &[n * hw, c])?;
    let agg = g.matmul(cat, ctx.var(&format!("{p}.wglo"))?)?;
    let x_agg = g.reshape(g.permute(g.reshape(agg, &[n, hw, c])?, &[0, 2, 1])?, &[n, c, h, w])?;
    Ok((x_agg, attn))
}

/// Every attention row is a probability distribution.
pub(crate) fn check_rows<T: Scalar>(attn: &Tensor<T>) -> Result<()> {
    let hw = *attn.shape().last().unwrap_or(&1);
    for row in attn.data().chunks(hw) {
        let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (sum - 1.0).abs() > CONTRACT_TOL || row.iter().any(|v| v.as_f64() < 0.0) {
            return Err(DtnError::Contract(format!("attention row sums to {sum}")));
        }
    }
    Ok(())
}
