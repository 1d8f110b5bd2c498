use dtn_tensor::{sigmoid, Scalar, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{Ctx, ForwardOptions, Mode, CONTRACT_TOL};
use crate::config::{DtnConfig, NoiseKind, VariantSpec};
use crate::error::{DtnError, Result};

/// Expert noise for one expert: unit-variance draws times `scale` times each sample's
/// feature standard deviation.
fn noise<T: Scalar>(x: &Tensor<T>, kind: NoiseKind, scale: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n = x.shape()[0];
    let per = x.numel() / n;
    let mut out = Vec::with_capacity(x.numel());
    for chunk in x.data().chunks(per) {
        let mean = chunk.iter().map(|v| v.as_f64()).sum::<f64>() / per as f64;
        let var = chunk.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / per as f64;
        let k = scale * var.sqrt();
        for _ in 0..per {
            let z: f64 = match kind {
                NoiseKind::Gaussian => rng.sample(StandardNormal),
                // U(-√3, √3) has unit variance.
                NoiseKind::Uniform => rng.gen_range(-1.0..1.0) * 3f64.sqrt(),
                NoiseKind::None => 0.0,
            };
            out.push(T::of(k * z));
        }
    }
    Tensor::new(x.shape(), out).expect("same shape")
}

/// Returns `(x_loc ⊙ A, A)` with `A[n×1×h×w]`.
pub(crate) fn forward<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    config: &DtnConfig,
    variant: &VariantSpec,
    x_loc: Var,
    opts: &mut ForwardOptions<'_>,
) -> Result<(Var, Var)> {
    let g = ctx.g;
    let use_noise = opts.mode == Mode::Train && config.noise.kind != NoiseKind::None && config.noise.scale > 0.0;
    let x_val = if use_noise { Some(g.value(x_loc)?) } else { None };
    let mut maps = Vec::with_capacity(config.experts);
    for i in 0..config.experts {
        let mut input = x_loc;
        if let (Some(xv), Some(rng)) = (&x_val, opts.noise_rng.as_deref_mut()) {
            let nz = g.constant(noise(xv, config.noise.kind, config.noise.scale, rng))?;
            input = g.add(x_loc, nz)?;
        }
        let h = g.relu(ctx.conv(&format!("moe.expert{i}.conv1"), input, 0)?)?;
        maps.push(g.sigmoid(ctx.conv(&format!("moe.expert{i}.conv2"), h, 0)?)?);
    }
    let mut stacked = g.concat(&maps, 1)?;
    let b = config.experts;
    let gate = match opts.moe_gate {
        Some(values) => {
            if values.len() != b {
                return Err(DtnError::Contract(format!(
                    "{} gate values for {b} experts",
                    values.len()
                )));
            }
            Some(g.constant(Tensor::from_f64(&[1, b, 1, 1], values)?)?)
        }
        None if variant.mas_in_moe => Some(g.reshape(g.sigmoid(ctx.var("moe.theta")?)?, &[1, b, 1, 1])?),
        None => None,
    };
    if let Some(gate) = gate {
        stacked = g.mul(stacked, gate)?;
    }
    let a = g.sigmoid(g.channel_max_pool(stacked)?)?;
    Ok((g.mul(x_loc, a)?, a))
}

/// Every entry of the map lies in `[σ(0), σ(1)]`.
pub(crate) fn check_map<T: Scalar>(a: &Tensor<T>) -> Result<()> {
    let hi = sigmoid(1.0) + CONTRACT_TOL;
    let lo = 0.5 - CONTRACT_TOL;
    match a.data().iter().find(|v| !(lo..=hi).contains(&v.as_f64())) {
        Some(v) => Err(DtnError::Contract(format!("expert map value {v} outside [0.5, σ(1)]"))),
        None => Ok(()),
    }
}
