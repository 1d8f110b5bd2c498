//! Raw slice kernels shared by the graph ops.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Strided view of a row-major matrix, optionally transposed.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

const PAR_MIN_WORK: usize = 1 << 18;

/// `c[m×n] (+)= a[m×k] · b[k×n]`; `accumulate` selects beta = 1.
///
/// Large products are split into row bands of `c` across the rayon pool; each output element
/// is computed by a single band so results do not depend on the thread count.
pub fn gemm<T: Scalar>(a: MatRef<T>, b: MatRef<T>, c: &mut [T], accumulate: bool) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    debug_assert_eq!(k, b.rows);
    debug_assert_eq!(c.len(), m * n);
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|x| *x = T::zero());
        }
        return;
    }
    let threads = rayon::current_num_threads();
    let work = m * n * k;
    if threads <= 1 || work < PAR_MIN_WORK || m < 2 * threads {
        // SAFETY: dimensions and strides are validated by MatRef construction sites.
        unsafe {
            T::gemm_raw(
                m,
                k,
                n,
                T::one(),
                a.data.as_ptr(),
                a.rs,
                a.cs,
                b.data.as_ptr(),
                b.rs,
                b.cs,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        return;
    }
    let band = m.div_ceil(threads);
    c.par_chunks_mut(band * n).enumerate().for_each(|(bi, chunk)| {
        let r0 = bi * band;
        let rows = chunk.len() / n;
        // SAFETY: row offset r0 < m; the band covers rows r0..r0+rows of a and c.
        unsafe {
            T::gemm_raw(
                rows,
                k,
                n,
                T::one(),
                a.data.as_ptr().offset(r0 as isize * a.rs),
                a.rs,
                a.cs,
                b.data.as_ptr(),
                b.rs,
                b.cs,
                beta,
                chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

/// Output spatial extent of a convolution or pooling window, if integral.
pub fn conv_out_dim(input: usize, k: usize, padding: usize, stride: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < k || stride == 0 || !(padded - k).is_multiple_of(stride) {
        return None;
    }
    Some((padded - k) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub padding: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }
    pub fn col_cols(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

/// Unfolds `x[n,c,h,w]` into `cols[c*k*k, n*oh*ow]`.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.oh * g.ow;
    let ncols = g.col_cols();
    let mut cols = vec![T::zero(); g.col_rows() * ncols];
    cols.par_chunks_mut(ncols).enumerate().for_each(|(row, out)| {
        let ci = row / (g.k * g.k);
        let ki = (row / g.k) % g.k;
        let kj = row % g.k;
        for b in 0..g.n {
            let plane = &x[(b * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
            let dst = &mut out[b * p..][..p];
            for oy in 0..g.oh {
                let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let src_row = &plane[iy as usize * g.w..][..g.w];
                for ox in 0..g.ow {
                    let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                    if ix >= 0 && ix < g.w as isize {
                        dst[oy * g.ow + ox] = src_row[ix as usize];
                    }
                }
            }
        }
    });
    cols
}

/// Adjoint of [`im2col`]: folds `cols` back into an `[n,c,h,w]` buffer, summing overlaps.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.oh * g.ow;
    let ncols = g.col_cols();
    let plane_len = g.h * g.w;
    let mut x = vec![T::zero(); g.n * g.c_in * plane_len];
    // Each (batch, channel) plane is written by exactly one task.
    x.par_chunks_mut(plane_len).enumerate().for_each(|(bc, plane)| {
        let b = bc / g.c_in;
        let ci = bc % g.c_in;
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols[row * ncols + b * p..][..p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            let dst = &mut plane[iy as usize * g.w + ix as usize];
                            *dst = *dst + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    });
    x
}

/// NumPy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return None;
        };
    }
    Some(out)
}

/// For every flat index of `out_shape`, the flat index into a tensor of `in_shape`
/// broadcast against it.
pub fn broadcast_index_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - in_shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..in_shape.len()).rev() {
        if in_shape[i] != 1 {
            strides[i + pad] = s;
        }
        s *= in_shape[i];
    }
    let numel: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..numel {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    map
}

/// Permutes the axes of a row-major buffer: output axis `i` is input axis `perm[i]`.
pub fn permute<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
