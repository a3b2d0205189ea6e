//! Elementwise, scan, masking, normalisation and convolution primitives.
//!
//! All reductions accumulate left to right in a fixed order so that results
//! are reproducible bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Inputs above this are returned unchanged by [`softplus`].
pub const SOFTPLUS_THRESHOLD: f64 = 20.0;

#[inline]
pub fn softplus_scalar<T: Scalar>(x: T) -> T {
    if x > T::cast_f64(SOFTPLUS_THRESHOLD) {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn silu_scalar<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

pub fn softplus<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(softplus_scalar)
}

pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(silu_scalar)
}

pub fn exp<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.exp())
}

pub fn bf16_round(x: &Tensor<f32>) -> Tensor<f32> {
    x.map(crate::tensor::bf16_round_f32)
}

fn require_rank(op: &'static str, x: &Tensor<impl Scalar>, min: usize) -> Result<()> {
    if x.rank() < min {
        return Err(Error::shape(
            op,
            format!("needs rank >= {min}, got shape {:?}", x.shape()),
        ));
    }
    Ok(())
}

/// Inclusive prefix sum along the last axis.
pub fn cumsum_last<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    require_rank("cumsum_last", x, 1)?;
    let mut out = x.clone();
    let n = x.last_dim();
    if n == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_exact_mut(n) {
        let mut acc = T::zero();
        for v in row.iter_mut() {
            acc = acc + *v;
            *v = acc;
        }
    }
    Ok(out)
}

/// How the strict upper triangle of a trailing square matrix is filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    /// One pass over the whole tensor selecting against the triangle.
    #[default]
    Static,
    /// Row-indexed loop that extracts, masks and writes back each row.
    Rowwise,
}

fn square_trailing(op: &'static str, m: &Tensor<impl Scalar>) -> Result<usize> {
    require_rank(op, m, 2)?;
    let s = m.shape();
    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
    if r != c {
        return Err(Error::shape(op, format!("trailing dims {r}x{c} are not square")));
    }
    Ok(r)
}

pub fn tril_mask_static<T: Scalar>(m: &Tensor<T>, fill: T) -> Result<Tensor<T>> {
    let l = square_trailing("tril_mask_static", m)?;
    let mut out = m.clone();
    if l == 0 {
        return Ok(out);
    }
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        let col = k % l;
        let row = (k / l) % l;
        if col > row {
            *v = fill;
        }
    }
    Ok(out)
}

pub fn tril_mask_rowwise<T: Scalar>(m: &Tensor<T>, fill: T) -> Result<Tensor<T>> {
    let l = square_trailing("tril_mask_rowwise", m)?;
    let mut out = m.clone();
    if l == 0 {
        return Ok(out);
    }
    let mats = out.len() / (l * l);
    let data = out.data_mut();
    let mut row_buf = vec![T::zero(); l];
    for mat in 0..mats {
        for i in 0..l {
            let start = (mat * l + i) * l;
            row_buf.copy_from_slice(&data[start..start + l]);
            for v in row_buf.iter_mut().skip(i + 1) {
                *v = fill;
            }
            data[start..start + l].copy_from_slice(&row_buf);
        }
    }
    Ok(out)
}

pub fn tril_mask<T: Scalar>(m: &Tensor<T>, fill: T, strategy: MaskStrategy) -> Result<Tensor<T>> {
    match strategy {
        MaskStrategy::Static => tril_mask_static(m, fill),
        MaskStrategy::Rowwise => tril_mask_rowwise(m, fill),
    }
}

/// Segment sums: `out[.., i, j] = x[j+1] + .. + x[i]` for `i >= j`, `-inf` above
/// the diagonal. Built as cumsum, pairwise difference, then the mask.
pub fn segsum<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    segsum_with(x, MaskStrategy::Static)
}

pub fn segsum_with<T: Scalar>(x: &Tensor<T>, strategy: MaskStrategy) -> Result<Tensor<T>> {
    require_rank("segsum", x, 1)?;
    let l = x.last_dim();
    if l == 0 {
        return Err(Error::shape("segsum", "last extent must be >= 1"));
    }
    let c = cumsum_last(x)?;
    let mut shape = x.shape().to_vec();
    shape.push(l);
    let mut diff = Vec::with_capacity(c.len() * l);
    for row in c.data().chunks_exact(l) {
        for i in 0..l {
            for j in 0..l {
                diff.push(row[i] - row[j]);
            }
        }
    }
    let diff = Tensor::new(shape, diff)?;
    tril_mask(&diff, T::neg_infinity(), strategy)
}

fn rms_scale<T: Scalar>(row: &[T], eps: T) -> T {
    let mut ss = T::zero();
    for &v in row {
        ss = ss + v * v;
    }
    let var = ss / T::cast_f64(row.len() as f64);
    T::one() / (var + eps).sqrt()
}

/// Plain RMSNorm over the last axis.
pub fn rmsnorm<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let d = x.last_dim();
    weight.expect_shape("rmsnorm", &[d])?;
    let eps = T::cast_f64(eps);
    let mut out = x.clone();
    if d == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_exact_mut(d) {
        let scale = rms_scale(row, eps);
        for (v, &w) in row.iter_mut().zip(weight.data()) {
            *v = *v * scale * w;
        }
    }
    Ok(out)
}

/// `u = y * silu(z)`, then RMS-normalise `u` over the last axis and scale by `weight`.
///
/// Variance is computed in the tensor's own element type, which is never
/// narrower than f32 (bf16 is only emulated inside f32 storage).
pub fn rmsnorm_gated<T: Scalar>(
    y: &Tensor<T>,
    z: &Tensor<T>,
    weight: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    if y.shape() != z.shape() {
        return Err(Error::shape(
            "rmsnorm_gated",
            format!("y {:?} vs z {:?}", y.shape(), z.shape()),
        ));
    }
    let d = y.last_dim();
    weight.expect_shape("rmsnorm_gated", &[d])?;
    let eps = T::cast_f64(eps);
    let mut out = y.clone();
    if d == 0 {
        return Ok(out);
    }
    for (row, zrow) in out.data_mut().chunks_exact_mut(d).zip(z.data().chunks_exact(d)) {
        for (u, &g) in row.iter_mut().zip(zrow) {
            *u = *u * silu_scalar(g);
        }
        let scale = rms_scale(row, eps);
        for (v, &w) in row.iter_mut().zip(weight.data()) {
            *v = *v * scale * w;
        }
    }
    Ok(out)
}

/// One causal depthwise tap sum: `bias + sum_j w[j] * window[j]`, in `j` order.
#[inline]
pub(crate) fn conv_tap<T: Scalar>(bias: T, w: &[T], window: impl Iterator<Item = T>) -> T {
    let mut acc = bias;
    for (&wj, xj) in w.iter().zip(window) {
        acc = acc + wj * xj;
    }
    acc
}

/// Causal depthwise convolution over `(B, T, C)` with kernel `(C, k)`, followed by SiLU.
/// Positions before the start of the sequence read as zero.
pub fn depthwise_causal_conv<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    if x.rank() != 3 || w.rank() != 2 {
        return Err(Error::shape(
            "depthwise_causal_conv",
            format!("x {:?}, w {:?}", x.shape(), w.shape()),
        ));
    }
    let (b, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = w.shape()[1];
    if k == 0 {
        return Err(Error::shape("depthwise_causal_conv", "kernel width must be >= 1"));
    }
    w.expect_shape("depthwise_causal_conv", &[c, k])?;
    bias.expect_shape("depthwise_causal_conv", &[c])?;

    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for bi in 0..b {
        let base = bi * t * c;
        for ti in 0..t {
            for ch in 0..c {
                let taps = &w.data()[ch * k..(ch + 1) * k];
                let window = (0..k).map(|j| {
                    let pos = ti + j;
                    if pos < k - 1 {
                        T::zero()
                    } else {
                        xd[base + (pos - (k - 1)) * c + ch]
                    }
                });
                let pre = conv_tap(bias.data()[ch], taps, window);
                out[base + ti * c + ch] = silu_scalar(pre);
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}
