//! Brute-force references in f64, plus the tolerance comparison used by every check.
//!
//! Nothing here shares code with the chunked path: the recurrence is stepped
//! token by token and the dense form builds the full `T x T` causal matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::ssd::SsdInputs;
use crate::tensor::{Scalar, Tensor};

/// Dense form is O(T²) in memory.
pub const DENSE_MAX_LEN: usize = 64;

/// Per-token recurrence `h ← exp(a·dt)·h + dt·(B ⊗ x)`, `y = C·h + D·x`.
///
/// Returns `(Y (B,T,H,P), final_state (B,H,P,N))`.
pub fn sequential_ssm(
    inputs: &SsdInputs<f64>,
    d: Option<&Tensor<f64>>,
    initial_state: Option<&Tensor<f64>>,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let dims = inputs.dims()?;
    let (bsz, t, h, p, g, n) = (dims.batch, dims.seq_len, dims.heads, dims.head_dim, dims.groups, dims.state);
    if let Some(d) = d {
        d.expect_shape("sequential_ssm", &[h])?;
    }
    let mut state = match initial_state {
        Some(s) => {
            s.expect_shape("sequential_ssm", &[bsz, h, p, n])?;
            s.data().to_vec()
        }
        None => vec![0.0; bsz * h * p * n],
    };
    let (x, dt, a, bm, cm) = (
        inputs.x.data(),
        inputs.dt.data(),
        inputs.a.data(),
        inputs.b.data(),
        inputs.c.data(),
    );
    let hpg = h / g;
    let mut y = vec![0.0; bsz * t * h * p];
    for b in 0..bsz {
        for ti in 0..t {
            for hi in 0..h {
                let step = dt[(b * t + ti) * h + hi];
                let decay = (a[hi] * step).exp();
                let gi = hi / hpg;
                let skip = d.map_or(0.0, |d| d.data()[hi]);
                for pi in 0..p {
                    let xv = x[((b * t + ti) * h + hi) * p + pi];
                    let mut out = 0.0;
                    for ni in 0..n {
                        let s = &mut state[((b * h + hi) * p + pi) * n + ni];
                        let bv = bm[((b * t + ti) * g + gi) * n + ni];
                        *s = decay * *s + step * bv * xv;
                        out += cm[((b * t + ti) * g + gi) * n + ni] * *s;
                    }
                    y[((b * t + ti) * h + hi) * p + pi] = out + skip * xv;
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![bsz, t, h, p], y)?,
        Tensor::new(vec![bsz, h, p, n], state)?,
    ))
}

/// `Y = (Lmat ⊙ C Bᵀ) X̄ + D·x` with the full causal matrix, zero initial state.
pub fn dense_ssm(inputs: &SsdInputs<f64>, d: Option<&Tensor<f64>>) -> Result<Tensor<f64>> {
    let dims = inputs.dims()?;
    let (bsz, t, h, p, g, n) = (dims.batch, dims.seq_len, dims.heads, dims.head_dim, dims.groups, dims.state);
    if t > DENSE_MAX_LEN {
        return Err(Error::Invalid(format!(
            "dense oracle supports T <= {DENSE_MAX_LEN}, got {t}"
        )));
    }
    let (x, dt, a, bm, cm) = (
        inputs.x.data(),
        inputs.dt.data(),
        inputs.a.data(),
        inputs.b.data(),
        inputs.c.data(),
    );
    let hpg = h / g;
    let mut y = vec![0.0; bsz * t * h * p];
    let mut m = vec![0.0; t * t];
    for b in 0..bsz {
        for hi in 0..h {
            let gi = hi / hpg;
            for i in 0..t {
                for j in 0..t {
                    m[i * t + j] = if j > i {
                        0.0
                    } else {
                        let log_decay: f64 = (j + 1..=i).map(|k| a[hi] * dt[(b * t + k) * h + hi]).sum();
                        let cb: f64 = (0..n)
                            .map(|ni| cm[((b * t + i) * g + gi) * n + ni] * bm[((b * t + j) * g + gi) * n + ni])
                            .sum();
                        cb * log_decay.exp()
                    };
                }
            }
            let skip = d.map_or(0.0, |d| d.data()[hi]);
            for i in 0..t {
                for pi in 0..p {
                    let mut acc = 0.0;
                    for j in 0..t {
                        let xbar = dt[(b * t + j) * h + hi] * x[((b * t + j) * h + hi) * p + pi];
                        acc += m[i * t + j] * xbar;
                    }
                    let xi = x[((b * t + i) * h + hi) * p + pi];
                    y[((b * t + i) * h + hi) * p + pi] = acc + skip * xi;
                }
            }
        }
    }
    Tensor::new(vec![bsz, t, h, p], y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Multi-index of the element with the largest excess over its tolerance.
    pub worst_index: Vec<usize>,
    pub rtol: f64,
    pub atol: f64,
    pub pass: bool,
}

/// Elementwise `|actual - expected| <= atol + rtol·|expected|`.
pub fn compare<A: Scalar, E: Scalar>(
    actual: &Tensor<A>,
    expected: &Tensor<E>,
    rtol: f64,
    atol: f64,
) -> Result<OracleReport> {
    if actual.shape() != expected.shape() {
        return Err(Error::shape(
            "compare",
            format!("{:?} vs {:?}", actual.shape(), expected.shape()),
        ));
    }
    let mut max_abs: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    let mut worst = (f64::NEG_INFINITY, 0);
    let mut pass = true;
    for (i, (&a, &e)) in actual.data().iter().zip(expected.data()).enumerate() {
        let (a, e) = (a.as_f64(), e.as_f64());
        let diff = if a == e { 0.0 } else { (a - e).abs() };
        let bound = atol + rtol * e.abs();
        // NaN differences fail.
        if diff.is_nan() || diff > bound {
            pass = false;
        }
        let excess = if diff.is_nan() { f64::INFINITY } else { diff - bound };
        if excess > worst.0 {
            worst = (excess, i);
        }
        max_abs = max_abs.max(if diff.is_nan() { f64::INFINITY } else { diff });
        let rel = if diff == 0.0 {
            0.0
        } else if e == 0.0 {
            f64::INFINITY
        } else {
            diff / e.abs()
        };
        max_rel = max_rel.max(if rel.is_nan() { f64::INFINITY } else { rel });
    }
    Ok(OracleReport {
        max_abs_err: max_abs,
        max_rel_err: max_rel,
        worst_index: actual.unravel(worst.1),
        rtol,
        atol,
        pass,
    })
}

/// Dimensions of one random SSD problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceDims {
    pub batch: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub groups: usize,
    pub state: usize,
}

impl InstanceDims {
    /// `B <= 2`, `T <= max_len`, `H <= 4`, `P <= 8`, `N <= 8`, `G` either 1 or `H`.
    pub fn sample(rng: &mut SplitMix64, max_len: usize) -> Self {
        let heads = 1 + rng.below(4);
        Self {
            batch: 1 + rng.below(2),
            seq_len: 1 + rng.below(max_len),
            heads,
            head_dim: 1 + rng.below(8),
            groups: if rng.below(2) == 0 { 1 } else { heads },
            state: 1 + rng.below(8),
        }
    }
}

/// Random instance with `x, B, C ~ N(0, 1)`, `dt ~ U[1e-3, 0.1]`, `a ~ -U[1, 16]`,
/// `D ~ N(0, 1)` and an optional `N(0, 1)` initial state.
pub struct Instance {
    pub inputs: SsdInputs<f64>,
    pub d: Tensor<f64>,
    pub initial_state: Tensor<f64>,
}

pub fn random_instance(rng: &mut SplitMix64, dims: InstanceDims) -> Instance {
    let InstanceDims { batch: b, seq_len: t, heads: h, head_dim: p, groups: g, state: n } = dims;
    let mut normal = |shape: Vec<usize>| {
        let len = shape.iter().product();
        Tensor::new(shape, (0..len).map(|_| rng.normal()).collect()).expect("sized")
    };
    let x = normal(vec![b, t, h, p]);
    let bm = normal(vec![b, t, g, n]);
    let cm = normal(vec![b, t, g, n]);
    let d = normal(vec![h]);
    let initial_state = normal(vec![b, h, p, n]);
    let dt = Tensor::new(vec![b, t, h], (0..b * t * h).map(|_| rng.uniform_in(1e-3, 0.1)).collect())
        .expect("sized");
    let a = Tensor::new(vec![h], (0..h).map(|_| -rng.uniform_in(1.0, 16.0)).collect()).expect("sized");
    Instance {
        inputs: SsdInputs { x, dt, a, b: bm, c: cm },
        d,
        initial_state,
    }
}

pub fn cast_inputs<S: Scalar, T: Scalar>(inputs: &SsdInputs<S>) -> SsdInputs<T> {
    SsdInputs {
        x: inputs.x.cast(),
        dt: inputs.dt.cast(),
        a: inputs.a.cast(),
        b: inputs.b.cast(),
        c: inputs.c.cast(),
    }
}
