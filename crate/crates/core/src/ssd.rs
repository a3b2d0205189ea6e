//! Chunked state-space-duality (SSD) forward pass.
//!
//! The sequence is padded to a whole number of chunks of `L` tokens. Inside a
//! chunk the recurrence is evaluated as a masked matrix product
//! `(Lmat ⊙ C Bᵀ) X̄`; across chunks a short scan over per-chunk states carries
//! history forward. Shapes use the axis letters
//! `b`atch, `c`hunk, `l`/`s` position in chunk, `h`ead, `p` head dim, `n` state:
//!
//! | contraction          | signature                                |
//! |----------------------|------------------------------------------|
//! | intra-chunk output   | `bclhn,bcshn,bhcls,bcshp->bclhp`         |
//! | chunk states         | `bclhn,bhcl,bclhp->bchpn`                |
//! | inter-chunk scan     | `bhzc,bchpn->bzhpn`                      |
//!
//! Every contraction is written as explicit loops with a fixed reduction
//! order, so results are bitwise reproducible.
//!
//! Conventions: `a = -exp(A_log)` (so every decay `exp(a·dt)` lies in `(0, 1]`),
//! `X̄ = X ⊙ dt`, and the within-chunk cumulative log decay is inclusive of the
//! current position.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cumsum_last, exp, segsum_with, softplus_scalar, MaskStrategy};
use crate::precision::DecayPrecision;
use crate::tensor::{Scalar, Tensor};

/// Clamp range applied to `softplus(dt_raw + dt_bias)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f64, Option<f64>)", into = "(f64, Option<f64>)")]
pub struct DtLimits {
    pub min: f64,
    pub max: f64,
}

impl Default for DtLimits {
    fn default() -> Self {
        Self {
            min: 0.0,
            max: f64::INFINITY,
        }
    }
}

impl DtLimits {
    pub fn validate(&self) -> Result<()> {
        if !(self.min >= 0.0 && self.min < self.max) {
            return Err(Error::Config(format!(
                "dt limits need 0 <= min < max, got ({}, {})",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

// JSON has no infinity; an unbounded maximum is written as null.
impl From<(f64, Option<f64>)> for DtLimits {
    fn from((min, max): (f64, Option<f64>)) -> Self {
        Self {
            min,
            max: max.unwrap_or(f64::INFINITY),
        }
    }
}

impl From<DtLimits> for (f64, Option<f64>) {
    fn from(l: DtLimits) -> Self {
        (l.min, l.max.is_finite().then_some(l.max))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkPlan {
    pub chunk_len: usize,
    pub n_chunks: usize,
    pub pad: usize,
}

impl ChunkPlan {
    pub fn padded_len(&self) -> usize {
        self.n_chunks * self.chunk_len
    }
}

pub fn plan_chunks(seq_len: usize, chunk_len: usize) -> ChunkPlan {
    assert!(seq_len >= 1 && chunk_len >= 1, "plan_chunks needs T >= 1 and L >= 1");
    let n_chunks = seq_len.div_ceil(chunk_len);
    ChunkPlan {
        chunk_len,
        n_chunks,
        pad: n_chunks * chunk_len - seq_len,
    }
}

/// Per-head continuous decay rate `a = -exp(A_log)`.
pub fn decay_rates<T: Scalar>(a_log: &Tensor<T>, precision: DecayPrecision) -> Result<Tensor<T>> {
    if !a_log.is_finite() {
        return Err(Error::NonFinite("A_log"));
    }
    Ok(a_log.map(|v| {
        let e = v.exp();
        let e = match precision {
            DecayPrecision::F32 => e,
            DecayPrecision::Bf16e => e.bf16_round(),
        };
        -e
    }))
}

/// `clamp(softplus(dt_raw + dt_bias), min, max)` over `(.., H)`.
pub fn step_sizes<T: Scalar>(
    dt_raw: &Tensor<T>,
    dt_bias: &Tensor<T>,
    limits: DtLimits,
) -> Result<Tensor<T>> {
    let h = dt_bias.len();
    if dt_raw.last_dim() != h || dt_bias.rank() != 1 {
        return Err(Error::shape(
            "step_sizes",
            format!("dt_raw {:?} vs dt_bias {:?}", dt_raw.shape(), dt_bias.shape()),
        ));
    }
    let (lo, hi) = (T::cast_f64(limits.min), T::cast_f64(limits.max));
    let mut out = dt_raw.clone();
    for row in out.data_mut().chunks_exact_mut(h.max(1)) {
        for (v, &bias) in row.iter_mut().zip(dt_bias.data()) {
            *v = softplus_scalar(*v + bias).max(lo).min(hi);
        }
    }
    Ok(out)
}

/// Returns `(dt, a_dt)` with `a_dt[b,t,h] = a[h] * dt[b,t,h] <= 0`.
pub fn discretize<T: Scalar>(
    dt_raw: &Tensor<T>,
    dt_bias: &Tensor<T>,
    a_log: &Tensor<T>,
    limits: DtLimits,
    precision: DecayPrecision,
) -> Result<(Tensor<T>, Tensor<T>)> {
    limits.validate()?;
    let a = decay_rates(a_log, precision)?;
    let dt = step_sizes(dt_raw, dt_bias, limits)?;
    if a.len() != dt_bias.len() {
        return Err(Error::shape("discretize", "A_log and dt_bias head counts differ"));
    }
    let h = a.len();
    let mut a_dt = dt.clone();
    for row in a_dt.data_mut().chunks_exact_mut(h.max(1)) {
        for (v, &ah) in row.iter_mut().zip(a.data()) {
            *v = ah * *v;
        }
    }
    Ok((dt, a_dt))
}

#[derive(Debug, Clone)]
pub struct SsdInputs<T> {
    /// `(B, T, H, P)`
    pub x: Tensor<T>,
    /// `(B, T, H)`, already softplus'd and clamped.
    pub dt: Tensor<T>,
    /// `(H)`, non-positive.
    pub a: Tensor<T>,
    /// `(B, T, G, N)`
    pub b: Tensor<T>,
    /// `(B, T, G, N)`
    pub c: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct SsdOutputs<T> {
    /// `(B, T, H, P)`
    pub y: Tensor<T>,
    /// `(B, H, P, N)`
    pub final_state: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SsdDims {
    pub batch: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub groups: usize,
    pub state: usize,
}

impl SsdDims {
    pub fn heads_per_group(&self) -> usize {
        self.heads / self.groups
    }
}

impl<T: Scalar> SsdInputs<T> {
    pub fn dims(&self) -> Result<SsdDims> {
        const OP: &str = "ssd_forward";
        if self.x.rank() != 4 || self.b.rank() != 4 {
            return Err(Error::shape(
                OP,
                format!("x {:?}, B {:?}", self.x.shape(), self.b.shape()),
            ));
        }
        let [batch, seq_len, heads, head_dim] = [0, 1, 2, 3].map(|i| self.x.shape()[i]);
        let (groups, state) = (self.b.shape()[2], self.b.shape()[3]);
        if seq_len == 0 {
            return Err(Error::shape(OP, "sequence length must be >= 1"));
        }
        if groups == 0 || heads % groups != 0 {
            return Err(Error::shape(
                OP,
                format!("{heads} heads are not divisible into {groups} groups"),
            ));
        }
        self.dt.expect_shape(OP, &[batch, seq_len, heads])?;
        self.a.expect_shape(OP, &[heads])?;
        self.b.expect_shape(OP, &[batch, seq_len, groups, state])?;
        self.c.expect_shape(OP, &[batch, seq_len, groups, state])?;
        Ok(SsdDims {
            batch,
            seq_len,
            heads,
            head_dim,
            groups,
            state,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SsdOptions {
    pub chunk_len: usize,
    pub mask: MaskStrategy,
}

impl SsdOptions {
    pub fn new(chunk_len: usize) -> Self {
        Self {
            chunk_len,
            mask: MaskStrategy::Static,
        }
    }

    pub fn with_mask(mut self, mask: MaskStrategy) -> Self {
        self.mask = mask;
        self
    }
}

/// `Ydiag[b,c,l,h,p] = Σ_{s,n} C[b,c,l,h,n] B[b,c,s,h,n] Lmat[b,h,c,l,s] X̄[b,c,s,h,p]`,
/// evaluated as `G = C Bᵀ`, `M = G ⊙ Lmat`, `Y = M X̄`.
///
/// `cc`, `bc`: `(B, Nc, L, H, N)`; `lmat`: `(B, H, Nc, L, L)`; `xbar`: `(B, Nc, L, H, P)`.
pub fn intra_chunk_output<T: Scalar>(
    cc: &Tensor<T>,
    bc: &Tensor<T>,
    lmat: &Tensor<T>,
    xbar: &Tensor<T>,
) -> Result<Tensor<T>> {
    const OP: &str = "intra_chunk_output";
    if cc.rank() != 5 || xbar.rank() != 5 {
        return Err(Error::shape(OP, "C and X̄ must be rank 5"));
    }
    let [b, nc, l, h, n] = [0, 1, 2, 3, 4].map(|i| cc.shape()[i]);
    let p = xbar.shape()[4];
    bc.expect_shape(OP, &[b, nc, l, h, n])?;
    lmat.expect_shape(OP, &[b, h, nc, l, l])?;
    xbar.expect_shape(OP, &[b, nc, l, h, p])?;

    let (cd, bd, ld, xd) = (cc.data(), bc.data(), lmat.data(), xbar.data());
    let mut y = vec![T::zero(); b * nc * l * h * p];
    let mut m = vec![T::zero(); l * l];
    for bi in 0..b {
        for ci in 0..nc {
            let chunk = (bi * nc + ci) * l;
            for hi in 0..h {
                let lbase = ((bi * h + hi) * nc + ci) * l * l;
                for li in 0..l {
                    let crow = &cd[((chunk + li) * h + hi) * n..][..n];
                    for si in 0..l {
                        let brow = &bd[((chunk + si) * h + hi) * n..][..n];
                        let mut g = T::zero();
                        for (&cv, &bv) in crow.iter().zip(brow) {
                            g = g + cv * bv;
                        }
                        m[li * l + si] = g * ld[lbase + li * l + si];
                    }
                }
                for li in 0..l {
                    let yrow = ((chunk + li) * h + hi) * p;
                    for si in 0..l {
                        let mv = m[li * l + si];
                        let xrow = &xd[((chunk + si) * h + hi) * p..][..p];
                        for (yv, &xv) in y[yrow..yrow + p].iter_mut().zip(xrow) {
                            *yv = *yv + mv * xv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, nc, l, h, p], y)
}

/// End-of-chunk state contributed by each chunk's own tokens:
/// `states[b,c,h,p,n] = Σ_l B[b,c,l,h,n] · exp(acs[b,h,c,L-1] - acs[b,h,c,l]) · X̄[b,c,l,h,p]`.
///
/// `bc`: `(B, Nc, L, H, N)`; `a_cumsum`: `(B, H, Nc, L)`; `xbar`: `(B, Nc, L, H, P)`.
pub fn chunk_states<T: Scalar>(
    bc: &Tensor<T>,
    a_cumsum: &Tensor<T>,
    xbar: &Tensor<T>,
) -> Result<Tensor<T>> {
    const OP: &str = "chunk_states";
    if bc.rank() != 5 || xbar.rank() != 5 {
        return Err(Error::shape(OP, "B and X̄ must be rank 5"));
    }
    let [b, nc, l, h, n] = [0, 1, 2, 3, 4].map(|i| bc.shape()[i]);
    let p = xbar.shape()[4];
    a_cumsum.expect_shape(OP, &[b, h, nc, l])?;
    xbar.expect_shape(OP, &[b, nc, l, h, p])?;

    let (bd, ad, xd) = (bc.data(), a_cumsum.data(), xbar.data());
    let mut out = vec![T::zero(); b * nc * h * p * n];
    for bi in 0..b {
        for ci in 0..nc {
            let chunk = (bi * nc + ci) * l;
            for hi in 0..h {
                let acs = &ad[((bi * h + hi) * nc + ci) * l..][..l];
                let total = acs[l - 1];
                let obase = ((bi * nc + ci) * h + hi) * p * n;
                for li in 0..l {
                    let decay = (total - acs[li]).exp();
                    let brow = &bd[((chunk + li) * h + hi) * n..][..n];
                    let xrow = &xd[((chunk + li) * h + hi) * p..][..p];
                    for (pi, &xv) in xrow.iter().enumerate() {
                        let orow = &mut out[obase + pi * n..][..n];
                        for (o, &bv) in orow.iter_mut().zip(brow) {
                            *o = *o + bv * decay * xv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, nc, h, p, n], out)
}

/// Propagate chunk states across chunks.
///
/// Returns `(prev_states, final_state)`: the state entering each chunk
/// `(B, Nc, H, P, N)` and the state after the last chunk `(B, H, P, N)`.
/// `chunk_decay_logs[b,h,c]` is the total log decay of chunk `c`.
pub fn inter_chunk_scan<T: Scalar>(
    states: &Tensor<T>,
    chunk_decay_logs: &Tensor<T>,
    initial_state: Option<&Tensor<T>>,
    mask: MaskStrategy,
) -> Result<(Tensor<T>, Tensor<T>)> {
    const OP: &str = "inter_chunk_scan";
    if states.rank() != 5 {
        return Err(Error::shape(OP, "states must be rank 5"));
    }
    let [b, nc, h, p, n] = [0, 1, 2, 3, 4].map(|i| states.shape()[i]);
    chunk_decay_logs.expect_shape(OP, &[b, h, nc])?;
    if let Some(init) = initial_state {
        init.expect_shape(OP, &[b, h, p, n])?;
    }
    let z = nc + 1;
    let state_len = p * n;

    // Leading zero so entry 0 (the initial state) passes through undecayed.
    let mut padded = Vec::with_capacity(b * h * z);
    for row in chunk_decay_logs.data().chunks_exact(nc.max(1)).take(b * h) {
        padded.push(T::zero());
        padded.extend_from_slice(row);
    }
    if nc == 0 {
        padded = vec![T::zero(); b * h];
    }
    let decay_chunk = exp(&segsum_with(&Tensor::new(vec![b, h, z], padded)?, mask)?);
    let dc = decay_chunk.data();

    let sd = states.data();
    // states_with_init[b, c, h] for c in 0..=nc
    let source = |bi: usize, c: usize, hi: usize| -> Option<&[T]> {
        if c == 0 {
            initial_state.map(|init| &init.data()[(bi * h + hi) * state_len..][..state_len])
        } else {
            Some(&sd[((bi * nc + c - 1) * h + hi) * state_len..][..state_len])
        }
    };

    let mut new_states = vec![T::zero(); b * z * h * state_len];
    for bi in 0..b {
        for zi in 0..z {
            for hi in 0..h {
                let out = &mut new_states[((bi * z + zi) * h + hi) * state_len..][..state_len];
                let drow = &dc[((bi * h + hi) * z + zi) * z..][..z];
                for (c, &w) in drow.iter().enumerate() {
                    let Some(src) = source(bi, c, hi) else { continue };
                    for (o, &s) in out.iter_mut().zip(src) {
                        *o = *o + w * s;
                    }
                }
            }
        }
    }

    let per_batch = z * h * state_len;
    let mut prev = Vec::with_capacity(b * nc * h * state_len);
    let mut fin = Vec::with_capacity(b * h * state_len);
    for chunk in new_states.chunks_exact(per_batch) {
        prev.extend_from_slice(&chunk[..nc * h * state_len]);
        fin.extend_from_slice(&chunk[nc * h * state_len..]);
    }
    Ok((
        Tensor::new(vec![b, nc, h, p, n], prev)?,
        Tensor::new(vec![b, h, p, n], fin)?,
    ))
}

/// Readout of the state entering each chunk, decayed to each position:
/// `Yoff[b,c,l,h,p] = (Σ_n C[b,c,l,h,n] prev[b,c,h,p,n]) · exp(acs[b,h,c,l])`.
pub fn cross_chunk_output<T: Scalar>(
    cc: &Tensor<T>,
    prev_states: &Tensor<T>,
    a_cumsum: &Tensor<T>,
) -> Result<Tensor<T>> {
    const OP: &str = "cross_chunk_output";
    if cc.rank() != 5 || prev_states.rank() != 5 {
        return Err(Error::shape(OP, "C and prev_states must be rank 5"));
    }
    let [b, nc, l, h, n] = [0, 1, 2, 3, 4].map(|i| cc.shape()[i]);
    let p = prev_states.shape()[3];
    prev_states.expect_shape(OP, &[b, nc, h, p, n])?;
    a_cumsum.expect_shape(OP, &[b, h, nc, l])?;

    let (cd, sd, ad) = (cc.data(), prev_states.data(), a_cumsum.data());
    let mut y = vec![T::zero(); b * nc * l * h * p];
    for bi in 0..b {
        for ci in 0..nc {
            for li in 0..l {
                for hi in 0..h {
                    let decay = ad[((bi * h + hi) * nc + ci) * l + li].exp();
                    let crow = &cd[(((bi * nc + ci) * l + li) * h + hi) * n..][..n];
                    let sbase = ((bi * nc + ci) * h + hi) * p * n;
                    let ybase = (((bi * nc + ci) * l + li) * h + hi) * p;
                    for pi in 0..p {
                        let srow = &sd[sbase + pi * n..][..n];
                        let mut acc = T::zero();
                        for (&cv, &sv) in crow.iter().zip(srow) {
                            acc = acc + cv * sv;
                        }
                        y[ybase + pi] = acc * decay;
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, nc, l, h, p], y)
}

/// Chunked, padded views of the SSD inputs.
struct Chunked<T> {
    xbar: Tensor<T>,
    a_dt: Tensor<T>,
    bc: Tensor<T>,
    cc: Tensor<T>,
}

fn chunk_inputs<T: Scalar>(inp: &SsdInputs<T>, d: &SsdDims, plan: &ChunkPlan) -> Result<Chunked<T>> {
    let (b, t, h, p, g, n) = (d.batch, d.seq_len, d.heads, d.head_dim, d.groups, d.state);
    let (nc, l) = (plan.n_chunks, plan.chunk_len);
    let tp = plan.padded_len();
    let hpg = d.heads_per_group();

    // Padded positions keep X̄ = 0 and dt = 0 (decay 1, no state increment).
    let mut xbar = vec![T::zero(); b * tp * h * p];
    let mut a_dt = vec![T::zero(); b * h * tp];
    let mut bc = vec![T::zero(); b * tp * h * n];
    let mut cc = vec![T::zero(); b * tp * h * n];
    let (xd, dtd, ad, bd, cd) = (inp.x.data(), inp.dt.data(), inp.a.data(), inp.b.data(), inp.c.data());
    for bi in 0..b {
        for ti in 0..t {
            for hi in 0..h {
                let dt = dtd[(bi * t + ti) * h + hi];
                a_dt[(bi * h + hi) * tp + ti] = ad[hi] * dt;
                let src = ((bi * t + ti) * h + hi) * p;
                let dst = ((bi * tp + ti) * h + hi) * p;
                for pi in 0..p {
                    xbar[dst + pi] = xd[src + pi] * dt;
                }
                let gsrc = ((bi * t + ti) * g + hi / hpg) * n;
                let gdst = ((bi * tp + ti) * h + hi) * n;
                bc[gdst..gdst + n].copy_from_slice(&bd[gsrc..gsrc + n]);
                cc[gdst..gdst + n].copy_from_slice(&cd[gsrc..gsrc + n]);
            }
        }
    }
    // (B, T_pad, ..) is laid out identically to (B, Nc, L, ..); (B, H, T_pad) to (B, H, Nc, L).
    Ok(Chunked {
        xbar: Tensor::new(vec![b, nc, l, h, p], xbar)?,
        a_dt: Tensor::new(vec![b, h, nc, l], a_dt)?,
        bc: Tensor::new(vec![b, nc, l, h, n], bc)?,
        cc: Tensor::new(vec![b, nc, l, h, n], cc)?,
    })
}

/// Full chunked SSD scan. `Y` excludes the `D·x` skip term.
pub fn ssd_forward<T: Scalar>(
    inputs: &SsdInputs<T>,
    opts: SsdOptions,
    initial_state: Option<&Tensor<T>>,
) -> Result<SsdOutputs<T>> {
    let d = inputs.dims()?;
    if opts.chunk_len == 0 {
        return Err(Error::Invalid("chunk length must be >= 1".into()));
    }
    if let Some(init) = initial_state {
        init.expect_shape("ssd_forward", &[d.batch, d.heads, d.head_dim, d.state])?;
    }
    let plan = plan_chunks(d.seq_len, opts.chunk_len);
    let ch = chunk_inputs(inputs, &d, &plan)?;

    let a_cumsum = cumsum_last(&ch.a_dt)?;
    let lmat = exp(&segsum_with(&ch.a_dt, opts.mask)?);
    let y_diag = intra_chunk_output(&ch.cc, &ch.bc, &lmat, &ch.xbar)?;

    let states = chunk_states(&ch.bc, &a_cumsum, &ch.xbar)?;
    let l = plan.chunk_len;
    let logs: Vec<T> = a_cumsum.data().chunks_exact(l).map(|row| row[l - 1]).collect();
    let logs = Tensor::new(vec![d.batch, d.heads, plan.n_chunks], logs)?;
    let (prev_states, final_state) = inter_chunk_scan(&states, &logs, initial_state, opts.mask)?;
    let y_off = cross_chunk_output(&ch.cc, &prev_states, &a_cumsum)?;

    // Sum and drop padding: (B, Nc*L, H, P) -> (B, T, H, P).
    let row = d.heads * d.head_dim;
    let tp = plan.padded_len();
    let mut y = Vec::with_capacity(d.batch * d.seq_len * row);
    for bi in 0..d.batch {
        let base = bi * tp * row;
        let span = base..base + d.seq_len * row;
        y.extend(y_diag.data()[span.clone()].iter().zip(&y_off.data()[span]).map(|(&a, &b)| a + b));
    }
    Ok(SsdOutputs {
        y: Tensor::new(vec![d.batch, d.seq_len, d.heads, d.head_dim], y)?,
        final_state,
    })
}
