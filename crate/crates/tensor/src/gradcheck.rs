//! Central finite-difference checks of reverse-mode gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for each `(input, element)` coordinate.
pub fn central_differences(
    f: &mut dyn FnMut(&[Tensor<f64>]) -> Result<f64>,
    inputs: &[Tensor<f64>],
    coords: &[(usize, usize)],
    h: f64,
) -> Result<Vec<f64>> {
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &(t, i) in coords {
        let orig = work[t].data()[i];
        work[t].data_mut()[i] = orig + h;
        let plus = f(&work)?;
        work[t].data_mut()[i] = orig - h;
        let minus = f(&work)?;
        work[t].data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`, or the absolute error when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Relative error per input tensor.
    pub per_input: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares the graph gradient of a scalar function against central differences over every
/// element of every input.
pub fn check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheck>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.variable(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&g, &vars)?;
    let grads = g.backward(loss)?;
    let mut eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::no_grad();
        let vars = xs.iter().map(|t| g.constant(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = f(&g, &vars)?;
        Ok(g.value(out)?.data()[0])
    };
    let mut per_input = Vec::with_capacity(inputs.len());
    for (ti, t) in inputs.iter().enumerate() {
        let coords: Vec<(usize, usize)> = (0..t.numel()).map(|i| (ti, i)).collect();
        let numeric = central_differences(&mut eval, inputs, &coords, h)?;
        let analytic = grads
            .get(vars[ti])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        per_input.push(relative_error(&analytic, &numeric));
    }
    Ok(GradCheck { per_input })
}
