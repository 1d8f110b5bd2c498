//! Differentiable operations on [`Graph`] nodes.

use crate::error::{dim_err, Result, TensorError};
use crate::graph::{Graph, Node, Op, Var};
use crate::kernels::{self, ConvGeom, MatRef};
use crate::scalar::Scalar;
use crate::tensor::{split_axis, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Batch-norm behaviour for one call.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a, T> {
    /// Normalize by the statistics of the current batch.
    Train,
    /// Normalize by stored running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel statistics of a training batch, for running-average updates.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

impl<T: Scalar> BatchStats<T> {
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn update_running(&self, mean: &mut [T], var: &mut [T], momentum: f64) {
        let m = T::of(momentum);
        let keep = T::one() - m;
        for (r, &b) in mean.iter_mut().zip(&self.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in var.iter_mut().zip(&self.var) {
            *r = keep * *r + m * b;
        }
    }
}

fn reduce_to<T: Scalar>(g: &[T], out_shape: &[usize], in_shape: &[usize]) -> Vec<T> {
    if out_shape == in_shape {
        return g.to_vec();
    }
    let map = kernels::broadcast_index_map(in_shape, out_shape);
    let mut buf = vec![T::zero(); in_shape.iter().product()];
    for (&m, &x) in map.iter().zip(g) {
        buf[m] = buf[m] + x;
    }
    buf
}

fn expand<T: Scalar>(t: &Tensor<T>, out_shape: &[usize]) -> Vec<T> {
    if t.shape() == out_shape {
        return t.data().to_vec();
    }
    kernels::broadcast_index_map(t.shape(), out_shape)
        .into_iter()
        .map(|i| t.data()[i])
        .collect()
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return dim_err(op, format!("axis {axis} out of range for {shape:?}"));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    fn binary(&self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (va, vb) = (self.value(a)?, self.value(b)?);
        let out_shape = kernels::broadcast_shape(va.shape(), vb.shape()).ok_or_else(|| TensorError::Dimension {
            op: name,
            msg: format!("cannot broadcast {:?} with {:?}", va.shape(), vb.shape()),
        })?;
        let data: Vec<T> = if va.shape() == vb.shape() {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ea = expand(&va, &out_shape);
            let eb = expand(&vb, &out_shape);
            ea.into_iter().zip(eb).map(|(x, y)| f(x, y)).collect()
        };
        self.add_flops(data.len());
        self.record(Tensor::new(&out_shape, data)?, op, name)
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a.id, b.id))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a.id, b.id))
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a.id, b.id))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a.id, b.id))
    }

    fn unary(&self, a: Var, name: &'static str, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let va = self.value(a)?;
        self.add_flops(va.numel());
        self.record(va.map(f), op, name)
    }

    pub fn scale(&self, a: Var, k: f64) -> Result<Var> {
        let k = T::of(k);
        self.unary(a, "scale", |x| x * k, Op::Scale(a.id, k))
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&self, a: Var, k: f64) -> Result<Var> {
        let k = T::of(k);
        self.unary(a, "add_scalar", |x| x + k, Op::AddScalar(a.id))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary(a, "relu", |x| x.max(T::zero()), Op::Relu(a.id))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Result<Var> {
        let c = T::of(GELU_C);
        let k = T::of(GELU_A);
        let half = T::of(0.5);
        self.unary(
            a,
            "gelu",
            |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()),
            Op::Gelu(a.id),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary(a, "sigmoid", sigmoid, Op::Sigmoid(a.id))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary(a, "exp", |x| x.exp(), Op::Exp(a.id))
    }

    /// Natural log of `max(x, floor)`; gradient is zero where the clamp is active.
    pub fn ln_clamped(&self, a: Var, floor: f64) -> Result<Var> {
        let f = T::of(floor);
        if self.value(a)?.data().iter().any(|&x| x < f) {
            log::warn!("ln: argument below {floor:e} clamped");
        }
        self.unary(a, "ln", |x| x.max(f).ln(), Op::Ln(a.id, f))
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        if self.value(a)?.data().iter().any(|&x| x < T::zero()) {
            return Err(TensorError::Parameter {
                op: "sqrt",
                msg: "negative argument".into(),
            });
        }
        self.unary(a, "sqrt", |x| x.sqrt(), Op::Sqrt(a.id))
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Standard matrix product of `a[m×k]` and `b[k×n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a)?, self.value(b)?);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err("matmul", format!("{sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(
            MatRef::new(va.data(), m, k),
            MatRef::new(vb.data(), k, n),
            &mut out,
            false,
        );
        self.add_flops(2 * m * k * n);
        self.record(Tensor::new(&[m, n], out)?, Op::MatMul(a.id, b.id), "matmul")
    }

    /// Batched product of `a[B×m×k]` with `b[B×k×n]`, or with `b[B×n×k]ᵀ` when
    /// `transpose_b` is set.
    pub fn bmm(&self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (va, vb) = (self.value(a)?, self.value(b)?);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return dim_err("bmm", format!("{sa:?} x {sb:?}"));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return dim_err("bmm", format!("{sa:?} x {sb:?} (transpose_b={transpose_b})"));
        }
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            let am = MatRef::new(&va.data()[i * m * k..][..m * k], m, k);
            let bm = if transpose_b {
                MatRef::new(&vb.data()[i * n * k..][..n * k], n, k).t()
            } else {
                MatRef::new(&vb.data()[i * k * n..][..k * n], k, n)
            };
            kernels::gemm(am, bm, &mut out[i * m * n..][..m * n], false);
        }
        self.add_flops(2 * batch * m * k * n);
        self.record(
            Tensor::new(&[batch, m, n], out)?,
            Op::Bmm {
                a: a.id,
                b: b.id,
                transpose_b,
            },
            "bmm",
        )
    }

    /// Cross-correlation of `x[n×c_in×h×w]` (or a single `c_in×h×w` image) with
    /// `kernel[c_out×c_in×k×k]`, plus an optional per-channel bias.
    pub fn conv2d(&self, x: Var, kernel: Var, bias: Option<Var>, padding: usize, stride: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x)?, self.value(kernel)?);
        let sx = vx.shape();
        let sw = vw.shape();
        let squeeze = sx.len() == 3;
        let (n, c_in, h, w) = match *sx {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => return dim_err("conv2d", format!("input must be 3-D or 4-D, got {sx:?}")),
        };
        if sw.len() != 4 || sw[1] != c_in || sw[2] != sw[3] {
            return dim_err("conv2d", format!("kernel {sw:?} for input {sx:?}"));
        }
        let (c_out, k) = (sw[0], sw[2]);
        if k % 2 == 0 {
            return dim_err("conv2d", format!("kernel size {k} must be odd"));
        }
        let oh = kernels::conv_out_dim(h, k, padding, stride);
        let ow = kernels::conv_out_dim(w, k, padding, stride);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return dim_err(
                "conv2d",
                format!("non-integral output for {h}x{w}, k={k}, padding={padding}, stride={stride}"),
            );
        };
        let vb = match bias {
            Some(b) => {
                let vb = self.value(b)?;
                if vb.shape() != [c_out] {
                    return dim_err("conv2d", format!("bias {:?} for {c_out} channels", vb.shape()));
                }
                Some(vb)
            }
            None => None,
        };
        let geom = ConvGeom {
            n,
            c_in,
            h,
            w,
            k,
            padding,
            stride,
            oh,
            ow,
        };
        let ncols = geom.col_cols();
        let p = oh * ow;
        let mut mat = vec![T::zero(); c_out * ncols];
        if k == 1 && padding == 0 && stride == 1 {
            // 1x1: per-sample product without unfolding.
            for b in 0..n {
                let xs = MatRef::new(&vx.data()[b * c_in * p..][..c_in * p], c_in, p);
                let mut tmp = vec![T::zero(); c_out * p];
                kernels::gemm(MatRef::new(vw.data(), c_out, c_in), xs, &mut tmp, false);
                for co in 0..c_out {
                    mat[co * ncols + b * p..][..p].copy_from_slice(&tmp[co * p..][..p]);
                }
            }
        } else {
            let cols = kernels::im2col(vx.data(), &geom);
            kernels::gemm(
                MatRef::new(vw.data(), c_out, geom.col_rows()),
                MatRef::new(&cols, geom.col_rows(), ncols),
                &mut mat,
                false,
            );
        }
        let mut out = vec![T::zero(); n * c_out * p];
        for b in 0..n {
            for co in 0..c_out {
                let bias_v = vb.as_ref().map_or(T::zero(), |vb| vb.data()[co]);
                let src = &mat[co * ncols + b * p..][..p];
                let dst = &mut out[(b * c_out + co) * p..][..p];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bias_v;
                }
            }
        }
        self.add_flops(2 * c_out * geom.col_rows() * ncols + c_out * ncols);
        let shape: Vec<usize> = if squeeze {
            vec![c_out, oh, ow]
        } else {
            vec![n, c_out, oh, ow]
        };
        self.record(
            Tensor::new(&shape, out)?,
            Op::Conv2d {
                x: x.id,
                w: kernel.id,
                bias: bias.map(|b| b.id),
                geom,
                c_out,
            },
            "conv2d",
        )
    }

    /// Batch normalization over `(n, h, w)` per channel of `x[n×c×h×w]`.
    ///
    /// In training mode the batch statistics are returned so the caller can update its
    /// running averages.
    pub fn batch_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let vx = self.value(x)?;
        let (vg, vb) = (self.value(gamma)?, self.value(beta)?);
        let sx = vx.shape();
        if sx.len() != 4 {
            return dim_err("batch_norm", format!("expected n×c×h×w, got {sx:?}"));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if vg.shape() != [c] || vb.shape() != [c] {
            return dim_err("batch_norm", "gamma/beta must have one entry per channel");
        }
        let p = h * w;
        let count = n * p;
        let eps = T::of(eps);
        let mut xhat = vec![T::zero(); vx.numel()];
        let mut invstd = vec![T::zero(); c];
        let mut out = vec![T::zero(); vx.numel()];
        let train = matches!(mode, BnMode::Train);
        let mut stats = None;
        match mode {
            BnMode::Train => {
                if n < 2 {
                    return Err(TensorError::DegenerateBatch(format!(
                        "batch_norm in train mode needs n >= 2, got {n}"
                    )));
                }
                let mut means = vec![T::zero(); c];
                let mut vars = vec![T::zero(); c];
                let cnt = T::of(count as f64);
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        s = s + vx.data()[(b * c + ch) * p..][..p].iter().copied().sum::<T>();
                    }
                    let mean = s / cnt;
                    let mut ss = T::zero();
                    for b in 0..n {
                        for &v in &vx.data()[(b * c + ch) * p..][..p] {
                            ss = ss + (v - mean) * (v - mean);
                        }
                    }
                    let var = ss / cnt;
                    means[ch] = mean;
                    vars[ch] = ss / T::of((count - 1) as f64);
                    invstd[ch] = T::one() / (var + eps).sqrt();
                }
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * p;
                        for i in base..base + p {
                            xhat[i] = (vx.data()[i] - means[ch]) * invstd[ch];
                            out[i] = vg.data()[ch] * xhat[i] + vb.data()[ch];
                        }
                    }
                }
                stats = Some(BatchStats { mean: means, var: vars });
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return dim_err("batch_norm", "running statistics length mismatch");
                }
                for ch in 0..c {
                    invstd[ch] = T::one() / (var[ch] + eps).sqrt();
                }
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * p;
                        for i in base..base + p {
                            xhat[i] = (vx.data()[i] - mean[ch]) * invstd[ch];
                            out[i] = vg.data()[ch] * xhat[i] + vb.data()[ch];
                        }
                    }
                }
            }
        }
        self.add_flops(4 * vx.numel());
        let v = self.record(
            Tensor::new(sx, out)?,
            Op::BatchNorm {
                x: x.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                invstd,
                train,
            },
            "batch_norm",
        )?;
        Ok((v, stats))
    }

    /// `softmax(x / tau)` along `axis`, computed with max subtraction.
    pub fn softmax_t(&self, a: Var, tau: f64, axis: usize) -> Result<Var> {
        self.softmax_impl(a, tau, axis, false)
    }

    /// `log softmax(x / tau)` along `axis`.
    pub fn log_softmax_t(&self, a: Var, tau: f64, axis: usize) -> Result<Var> {
        self.softmax_impl(a, tau, axis, true)
    }

    fn softmax_impl(&self, a: Var, tau: f64, axis: usize, log: bool) -> Result<Var> {
        let name = if log { "log_softmax" } else { "softmax" };
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(TensorError::Parameter {
                op: name,
                msg: format!("temperature must be positive, got {tau}"),
            });
        }
        let va = self.value(a)?;
        check_axis(name, va.shape(), axis)?;
        let (outer, len, inner) = split_axis(va.shape(), axis);
        let t = T::of(tau);
        let mut out = vec![T::zero(); va.numel()];
        let x = va.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for j in 0..len {
                    let e = ((x[at(j)] - mx) / t).exp();
                    out[at(j)] = e;
                    z = z + e;
                }
                if log {
                    let lz = z.ln();
                    for j in 0..len {
                        out[at(j)] = (x[at(j)] - mx) / t - lz;
                    }
                } else {
                    for j in 0..len {
                        out[at(j)] = out[at(j)] / z;
                    }
                }
            }
        }
        self.add_flops(3 * va.numel());
        let op = if log {
            Op::LogSoftmax { a: a.id, axis, tau: t }
        } else {
            Op::Softmax { a: a.id, axis, tau: t }
        };
        self.record(Tensor::new(va.shape(), out)?, op, name)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&self, a: Var) -> Result<Var> {
        let va = self.value(a)?;
        self.add_flops(va.numel());
        self.record(Tensor::scalar(va.sum()), Op::Sum(a.id), "sum")
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let n = self.value(a)?.numel();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let va = self.value(a)?;
        check_axis("sum_axis", va.shape(), axis)?;
        let (outer, len, inner) = split_axis(va.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &va.data()[(o * len + j) * inner..][..inner];
                for (d, &s) in out[o * inner..][..inner].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        let mut shape = va.shape().to_vec();
        shape[axis] = 1;
        self.add_flops(va.numel());
        self.record(Tensor::new(&shape, out)?, Op::SumAxis(a.id, axis), "sum_axis")
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let len = self.value(a)?.shape().get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / len as f64)
    }

    /// Maximum along `axis` (kept with extent 1). Ties route the gradient to the lowest index.
    pub fn max_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let va = self.value(a)?;
        check_axis("max_axis", va.shape(), axis)?;
        let (outer, len, inner) = split_axis(va.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut bv = va.data()[o * len * inner + i];
                for j in 1..len {
                    let v = va.data()[(o * len + j) * inner + i];
                    if v > bv {
                        bv = v;
                        best = j;
                    }
                }
                out[o * inner + i] = bv;
                argmax[o * inner + i] = (o * len + best) * inner + i;
            }
        }
        let mut shape = va.shape().to_vec();
        shape[axis] = 1;
        self.add_flops(va.numel());
        self.record(Tensor::new(&shape, out)?, Op::MaxAxis { a: a.id, argmax }, "max_axis")
    }

    /// Elementwise maximum over the channel axis: `[B×h×w] -> [h×w]`, or
    /// `[n×B×h×w] -> [n×1×h×w]` for batches.
    pub fn channel_max_pool(&self, a: Var) -> Result<Var> {
        let shape = self.shape(a)?;
        match shape.len() {
            3 => {
                let m = self.max_axis(a, 0)?;
                self.reshape(m, &shape[1..])
            }
            4 => self.max_axis(a, 1),
            _ => dim_err("channel_max_pool", format!("expected 3-D or 4-D, got {shape:?}")),
        }
    }

    /// Per-channel spatial mean: `[c×h×w] -> [1×c]`, or `[n×c×h×w] -> [n×c]`.
    pub fn global_avg_pool(&self, a: Var) -> Result<Var> {
        let shape = self.shape(a)?;
        let (n, c, p) = match *shape {
            [c, h, w] => (1, c, h * w),
            [n, c, h, w] => (n, c, h * w),
            _ => return dim_err("global_avg_pool", format!("expected 3-D or 4-D, got {shape:?}")),
        };
        let flat = self.reshape(a, &[n, c, p])?;
        let m = self.mean_axis(flat, 2)?;
        self.reshape(m, &[n, c])
    }

    /// Non-overlapping `k×k` max pooling of `[n×c×h×w]`; ties go to the first element in
    /// row-major window order.
    pub fn max_pool2d(&self, a: Var, k: usize) -> Result<Var> {
        let va = self.value(a)?;
        let s = va.shape();
        if s.len() != 4 || k == 0 || s[2] % k != 0 || s[3] % k != 0 {
            return dim_err("max_pool2d", format!("{s:?} not divisible into {k}x{k} windows"));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / k, w / k);
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut bi = base + oy * k * w + ox * k;
                    let mut bv = va.data()[bi];
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = base + (oy * k + dy) * w + ox * k + dx;
                            if va.data()[i] > bv {
                                bv = va.data()[i];
                                bi = i;
                            }
                        }
                    }
                    let o = (plane * oh + oy) * ow + ox;
                    out[o] = bv;
                    argmax[o] = bi;
                }
            }
        }
        self.add_flops(va.numel());
        self.record(
            Tensor::new(&[n, c, oh, ow], out)?,
            Op::MaxPool2d { a: a.id, argmax },
            "max_pool2d",
        )
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = self.value(a)?;
        let t = va.reshape(shape)?;
        self.record(t, Op::Reshape(a.id), "reshape")
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        let va = self.value(a)?;
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..va.ndim()).collect::<Vec<_>>() {
            return dim_err(
                "permute",
                format!("{perm:?} is not a permutation of rank {}", va.ndim()),
            );
        }
        let (data, shape) = kernels::permute(va.data(), va.shape(), perm);
        self.record(Tensor::new(&shape, data)?, Op::Permute(a.id, perm.to_vec()), "permute")
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        self.permute(a, &[1, 0])
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return dim_err("concat", "no inputs");
        }
        let values = parts.iter().map(|&p| self.value(p)).collect::<Result<Vec<_>>>()?;
        let first = values[0].shape().to_vec();
        check_axis("concat", &first, axis)?;
        for v in &values[1..] {
            let s = v.shape();
            if s.len() != first.len() || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return dim_err("concat", format!("{s:?} incompatible with {first:?}"));
            }
        }
        let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * len * inner..][..len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.record(
            Tensor::new(&shape, out)?,
            Op::Concat(parts.iter().map(|p| p.id).collect(), axis),
            "concat",
        )
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Gradients of one node's inputs given the gradient of its output.
pub(crate) fn backward_op<T: Scalar>(
    nodes: &[Node<T>],
    id: usize,
    g: &[T],
    wants: &[bool],
) -> Result<Vec<Option<Vec<T>>>> {
    let node = &nodes[id];
    let out = &node.value;
    let val = |i: usize| &nodes[i].value;
    let res = match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![
            Some(reduce_to(g, out.shape(), val(*a).shape())),
            Some(reduce_to(g, out.shape(), val(*b).shape())),
        ],
        Op::Sub(a, b) => {
            let neg: Vec<T> = g.iter().map(|&x| -x).collect();
            vec![
                Some(reduce_to(g, out.shape(), val(*a).shape())),
                Some(reduce_to(&neg, out.shape(), val(*b).shape())),
            ]
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let ga = wants[0].then(|| {
                let eb = expand(vb, out.shape());
                let prod: Vec<T> = g.iter().zip(eb).map(|(&x, y)| x * y).collect();
                reduce_to(&prod, out.shape(), va.shape())
            });
            let gb = wants[1].then(|| {
                let ea = expand(va, out.shape());
                let prod: Vec<T> = g.iter().zip(ea).map(|(&x, y)| x * y).collect();
                reduce_to(&prod, out.shape(), vb.shape())
            });
            vec![ga, gb]
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let eb = expand(vb, out.shape());
            let ga = wants[0].then(|| {
                let q: Vec<T> = g.iter().zip(&eb).map(|(&x, &y)| x / y).collect();
                reduce_to(&q, out.shape(), va.shape())
            });
            let gb = wants[1].then(|| {
                let ea = expand(va, out.shape());
                let q: Vec<T> = g
                    .iter()
                    .zip(ea.iter().zip(&eb))
                    .map(|(&x, (&p, &y))| -x * p / (y * y))
                    .collect();
                reduce_to(&q, out.shape(), vb.shape())
            });
            vec![ga, gb]
        }
        Op::Scale(_, k) => vec![Some(g.iter().map(|&x| x * *k).collect())],
        Op::AddScalar(_) => vec![Some(g.to_vec())],
        Op::Relu(a) => vec![Some(
            g.iter()
                .zip(val(*a).data())
                .map(|(&x, &v)| if v > T::zero() { x } else { T::zero() })
                .collect(),
        )],
        Op::Gelu(a) => {
            let c = T::of(GELU_C);
            let k = T::of(GELU_A);
            let half = T::of(0.5);
            let three = T::of(3.0);
            vec![Some(
                g.iter()
                    .zip(val(*a).data())
                    .map(|(&gi, &x)| {
                        let u = c * (x + k * x * x * x);
                        let th = u.tanh();
                        let du = c * (T::one() + three * k * x * x);
                        gi * (half * (T::one() + th) + half * x * (T::one() - th * th) * du)
                    })
                    .collect(),
            )]
        }
        Op::Sigmoid(_) => vec![Some(
            g.iter()
                .zip(out.data())
                .map(|(&x, &y)| x * y * (T::one() - y))
                .collect(),
        )],
        Op::Exp(_) => vec![Some(g.iter().zip(out.data()).map(|(&x, &y)| x * y).collect())],
        Op::Ln(a, floor) => vec![Some(
            g.iter()
                .zip(val(*a).data())
                .map(|(&x, &v)| if v >= *floor { x / v } else { T::zero() })
                .collect(),
        )],
        Op::Sqrt(_) => {
            let half = T::of(0.5);
            vec![Some(
                g.iter()
                    .zip(out.data())
                    .map(|(&x, &y)| if y > T::zero() { x * half / y } else { T::zero() })
                    .collect(),
            )]
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
            let gm = MatRef::new(g, m, n);
            let ga = wants[0].then(|| {
                let mut da = vec![T::zero(); m * k];
                kernels::gemm(gm, MatRef::new(vb.data(), k, n).t(), &mut da, false);
                da
            });
            let gb = wants[1].then(|| {
                let mut db = vec![T::zero(); k * n];
                kernels::gemm(MatRef::new(va.data(), m, k).t(), gm, &mut db, false);
                db
            });
            vec![ga, gb]
        }
        Op::Bmm { a, b, transpose_b } => {
            let (va, vb) = (val(*a), val(*b));
            let (batch, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
            let n = out.shape()[2];
            let mut da = vec![T::zero(); va.numel()];
            let mut db = vec![T::zero(); vb.numel()];
            for i in 0..batch {
                let gm = MatRef::new(&g[i * m * n..][..m * n], m, n);
                let am = MatRef::new(&va.data()[i * m * k..][..m * k], m, k);
                let bslice = &vb.data()[i * k * n..][..k * n];
                if *transpose_b {
                    // C = A Bᵀ with B[n×k]: dA = G B, dB = Gᵀ A.
                    let bm = MatRef::new(bslice, n, k);
                    if wants[0] {
                        kernels::gemm(gm, bm, &mut da[i * m * k..][..m * k], false);
                    }
                    if wants[1] {
                        kernels::gemm(gm.t(), am, &mut db[i * n * k..][..n * k], false);
                    }
                } else {
                    let bm = MatRef::new(bslice, k, n);
                    if wants[0] {
                        kernels::gemm(gm, bm.t(), &mut da[i * m * k..][..m * k], false);
                    }
                    if wants[1] {
                        kernels::gemm(am.t(), gm, &mut db[i * k * n..][..k * n], false);
                    }
                }
            }
            vec![wants[0].then_some(da), wants[1].then_some(db)]
        }
        Op::Conv2d {
            x,
            w,
            bias,
            geom,
            c_out,
        } => {
            let (vx, vw) = (val(*x), val(*w));
            let c_out = *c_out;
            let p = geom.oh * geom.ow;
            let ncols = geom.col_cols();
            let rows = geom.col_rows();
            // Gradient of the output as a [c_out, n*p] matrix.
            let mut gmat = vec![T::zero(); c_out * ncols];
            for b in 0..geom.n {
                for co in 0..c_out {
                    gmat[co * ncols + b * p..][..p].copy_from_slice(&g[(b * c_out + co) * p..][..p]);
                }
            }
            let pointwise = geom.k == 1 && geom.padding == 0 && geom.stride == 1;
            let cols = if pointwise {
                None
            } else {
                Some(kernels::im2col(vx.data(), geom))
            };
            let gw = wants[1].then(|| {
                let mut dw = vec![T::zero(); c_out * rows];
                match &cols {
                    Some(cols) => kernels::gemm(
                        MatRef::new(&gmat, c_out, ncols),
                        MatRef::new(cols, rows, ncols).t(),
                        &mut dw,
                        false,
                    ),
                    None => {
                        for b in 0..geom.n {
                            let gb: Vec<T> = (0..c_out)
                                .flat_map(|co| gmat[co * ncols + b * p..][..p].iter().copied())
                                .collect();
                            kernels::gemm(
                                MatRef::new(&gb, c_out, p),
                                MatRef::new(&vx.data()[b * rows * p..][..rows * p], rows, p).t(),
                                &mut dw,
                                b > 0,
                            );
                        }
                    }
                }
                dw
            });
            let gx = wants[0].then(|| {
                let mut dcols = vec![T::zero(); rows * ncols];
                kernels::gemm(
                    MatRef::new(vw.data(), c_out, rows).t(),
                    MatRef::new(&gmat, c_out, ncols),
                    &mut dcols,
                    false,
                );
                if pointwise {
                    let mut dx = vec![T::zero(); vx.numel()];
                    for b in 0..geom.n {
                        for ci in 0..rows {
                            dx[(b * rows + ci) * p..][..p].copy_from_slice(&dcols[ci * ncols + b * p..][..p]);
                        }
                    }
                    dx
                } else {
                    kernels::col2im(&dcols, geom)
                }
            });
            let mut res = vec![gx, gw];
            if bias.is_some() {
                let want = wants.get(2).copied().unwrap_or(false);
                res.push(want.then(|| {
                    (0..c_out)
                        .map(|co| gmat[co * ncols..][..ncols].iter().copied().sum())
                        .collect()
                }));
            }
            res
        }
        Op::BatchNorm {
            x,
            gamma,
            xhat,
            invstd,
            train,
            ..
        } => {
            let s = val(*x).shape();
            let (n, c, p) = (s[0], s[1], s[2] * s[3]);
            let vg = val(*gamma);
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * p;
                    for i in base..base + p {
                        dgamma[ch] = dgamma[ch] + g[i] * xhat[i];
                        dbeta[ch] = dbeta[ch] + g[i];
                    }
                }
            }
            let mut dx = vec![T::zero(); g.len()];
            if *train {
                let cnt = T::of((n * p) as f64);
                for ch in 0..c {
                    // Σ dxhat = γ Σ g = γ dβ ; Σ dxhat·xhat = γ dγ
                    let gam = vg.data()[ch];
                    let s1 = gam * dbeta[ch];
                    let s2 = gam * dgamma[ch];
                    let k = invstd[ch] / cnt;
                    for b in 0..n {
                        let base = (b * c + ch) * p;
                        for i in base..base + p {
                            dx[i] = k * (cnt * gam * g[i] - s1 - xhat[i] * s2);
                        }
                    }
                }
            } else {
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * p;
                        let k = vg.data()[ch] * invstd[ch];
                        for i in base..base + p {
                            dx[i] = g[i] * k;
                        }
                    }
                }
            }
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        }
        Op::Softmax { axis, tau, .. } | Op::LogSoftmax { axis, tau, .. } => {
            let log = matches!(node.op, Op::LogSoftmax { .. });
            let (outer, len, inner) = split_axis(out.shape(), *axis);
            let y = out.data();
            let mut dx = vec![T::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    if log {
                        let gs: T = (0..len).map(|j| g[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = (g[at(j)] - y[at(j)].exp() * gs) / *tau;
                        }
                    } else {
                        let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot) / *tau;
                        }
                    }
                }
            }
            vec![Some(dx)]
        }
        Op::Sum(a) => vec![Some(vec![g[0]; val(*a).numel()])],
        Op::SumAxis(a, axis) => {
            let (outer, len, inner) = split_axis(val(*a).shape(), *axis);
            let mut dx = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for j in 0..len {
                    dx[(o * len + j) * inner..][..inner].copy_from_slice(&g[o * inner..][..inner]);
                }
            }
            vec![Some(dx)]
        }
        Op::MaxAxis { a, argmax, .. } | Op::MaxPool2d { a, argmax } => {
            let mut dx = vec![T::zero(); val(*a).numel()];
            for (&src, &gi) in argmax.iter().zip(g) {
                dx[src] = dx[src] + gi;
            }
            vec![Some(dx)]
        }
        Op::Reshape(_) => vec![Some(g.to_vec())],
        Op::Permute(_, perm) => {
            let inv = kernels::inverse_perm(perm);
            let (dx, _) = kernels::permute(g, out.shape(), &inv);
            vec![Some(dx)]
        }
        Op::Concat(parts, axis) => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut res = Vec::with_capacity(parts.len());
            let mut start = 0;
            for &p in parts {
                let len = val(p).shape()[*axis];
                let mut d = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    d.extend_from_slice(&g[(o * total + start) * inner..][..len * inner]);
                }
                start += len;
                res.push(Some(d));
            }
            res
        }
    };
    Ok(res)
}
