//! Constant-size decode state, the single-token step, and greedy generation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{check_layer_count, lm_head, prefill, validate_tokens, LayerParams, ModelParams};
use crate::numerics::{conv_tap, rmsnorm, rmsnorm_gated, silu_scalar};
use crate::precision::Site;
use crate::ssd::{decay_rates, step_sizes};
use crate::tensor::{matmul, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache<T> {
    /// `(B, H, P, N)`
    pub ssm_state: Tensor<T>,
    /// `(B, conv_dim, k - 1)`, oldest column first.
    pub conv_state: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mamba2Cache<T> {
    pub batch: usize,
    pub layers: Vec<LayerCache<T>>,
}

impl<T: Scalar> Mamba2Cache<T> {
    /// Bytes held by the cache; a function of batch and config only.
    pub fn byte_size(&self) -> usize {
        self.layers
            .iter()
            .map(|l| (l.ssm_state.len() + l.conv_state.len()) * T::ELEM.size_bytes())
            .sum()
    }

    /// Layer by layer, SSM state then conv state, little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_size());
        for l in &self.layers {
            out.extend(l.ssm_state.to_le_bytes());
            out.extend(l.conv_state.to_le_bytes());
        }
        out
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layers.len() != cfg.n_layers {
            return Err(Error::shape(
                "Mamba2Cache",
                format!("{} layers for a {}-layer config", self.layers.len(), cfg.n_layers),
            ));
        }
        let b = self.batch;
        for l in &self.layers {
            l.ssm_state.expect_shape(
                "Mamba2Cache",
                &[b, cfg.n_heads(), cfg.head_dim, cfg.d_state],
            )?;
            l.conv_state
                .expect_shape("Mamba2Cache", &[b, cfg.conv_dim(), cfg.conv_kernel - 1])?;
        }
        Ok(())
    }
}

/// Analytic cache size in bytes for `batch` rows.
pub fn cache_bytes(cfg: &ModelConfig, batch: usize, elem_bytes: usize) -> usize {
    let per_row = cfg.n_heads() * cfg.head_dim * cfg.d_state + cfg.conv_dim() * (cfg.conv_kernel - 1);
    cfg.n_layers * batch * per_row * elem_bytes
}

pub fn cache_init<T: Scalar>(cfg: &ModelConfig, batch: usize) -> Mamba2Cache<T> {
    assert!(batch >= 1, "cache_init needs batch >= 1");
    let layer = LayerCache {
        ssm_state: Tensor::zeros(vec![batch, cfg.n_heads(), cfg.head_dim, cfg.d_state]),
        conv_state: Tensor::zeros(vec![batch, cfg.conv_dim(), cfg.conv_kernel - 1]),
    };
    Mamba2Cache {
        batch,
        layers: vec![layer; cfg.n_layers],
    }
}

/// Drop the oldest column of `(B, C, w)` and append `col` `(B, C)` as the newest.
pub fn roll_and_insert<T: Scalar>(conv_state: &Tensor<T>, col: &Tensor<T>) -> Result<Tensor<T>> {
    if conv_state.rank() != 3 {
        return Err(Error::shape("roll_and_insert", "conv_state must be rank 3"));
    }
    let [b, c, w] = [0, 1, 2].map(|i| conv_state.shape()[i]);
    col.expect_shape("roll_and_insert", &[b, c])?;
    let mut out = conv_state.clone();
    if w == 0 {
        return Ok(out);
    }
    for (row, &v) in out.data_mut().chunks_exact_mut(w).zip(col.data()) {
        row.rotate_left(1);
        row[w - 1] = v;
    }
    Ok(out)
}

/// Lowest index of the maximum; NaN never wins.
pub fn argmax<T: Scalar>(row: &[T]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] || row[best].is_nan() && !v.is_nan() {
            best = i;
        }
    }
    best as u32
}

fn layer_step<T: Scalar>(
    layer: &LayerParams<T>,
    cache: &LayerCache<T>,
    hidden: &Tensor<T>,
    cfg: &ModelConfig,
) -> Result<(Tensor<T>, LayerCache<T>)> {
    let b = hidden.shape()[0];
    let (h, p, g, n, k) = (cfg.n_heads(), cfg.head_dim, cfg.n_groups, cfg.d_state, cfg.conv_kernel);
    let (d_model, d_inner, conv_dim) = (cfg.d_model, cfg.d_inner(), cfg.conv_dim());
    let policy = &cfg.elem_policy;

    let normed = rmsnorm(hidden, &layer.input_norm_w, cfg.norm_eps)?;
    let mut u = Tensor::new(
        vec![b, cfg.d_in_proj()],
        matmul(normed.data(), layer.w_in.data(), b, d_model, cfg.d_in_proj()),
    )?;
    policy.apply(Site::InProj, &mut u);
    let [z, xbc_in, dt_raw]: [Tensor<T>; 3] = u
        .split_last(&[d_inner, conv_dim, h])?
        .try_into()
        .expect("three widths");

    // Conv readout at the newest position over [conv_state | new column].
    let w = k - 1;
    let state = cache.conv_state.data();
    let mut xbc = vec![T::zero(); b * conv_dim];
    for bi in 0..b {
        for ch in 0..conv_dim {
            let newest = xbc_in.data()[bi * conv_dim + ch];
            let past = &state[(bi * conv_dim + ch) * w..][..w];
            let window = past.iter().copied().chain(std::iter::once(newest));
            let pre = conv_tap(layer.conv_b.data()[ch], &layer.conv_w.data()[ch * k..][..k], window);
            xbc[bi * conv_dim + ch] = silu_scalar(pre);
        }
    }
    let mut xbc = Tensor::new(vec![b, conv_dim], xbc)?;
    policy.apply(Site::ConvOut, &mut xbc);
    let conv_state = roll_and_insert(&cache.conv_state, &xbc_in)?;

    let a = decay_rates(&layer.a_log, policy.decay_exp)?;
    let dt = step_sizes(&dt_raw, &layer.dt_bias, cfg.dt_limits)?;
    let mut ssm = cache.ssm_state.clone();
    let mut y = vec![T::zero(); b * d_inner];
    let hpg = h / g;
    for bi in 0..b {
        let row = &xbc.data()[bi * conv_dim..][..conv_dim];
        let (x, rest) = row.split_at(d_inner);
        let (bmat, cmat) = rest.split_at(g * n);
        for hi in 0..h {
            let dt_h = dt.data()[bi * h + hi];
            let decay = (a.data()[hi] * dt_h).exp();
            let bh = &bmat[(hi / hpg) * n..][..n];
            let ch = &cmat[(hi / hpg) * n..][..n];
            let d_skip = layer.d.data()[hi];
            for pi in 0..p {
                let xv = x[hi * p + pi];
                let xbar = xv * dt_h;
                let hrow = &mut ssm.data_mut()[((bi * h + hi) * p + pi) * n..][..n];
                let mut acc = T::zero();
                for ((hv, &bv), &cv) in hrow.iter_mut().zip(bh).zip(ch) {
                    *hv = decay * *hv + xbar * bv;
                    acc = acc + cv * *hv;
                }
                y[bi * d_inner + hi * p + pi] = acc + d_skip * xv;
            }
        }
    }
    let mut y = Tensor::new(vec![b, d_inner], y)?;
    policy.apply(Site::SsdOut, &mut y);

    let y = rmsnorm_gated(&y, &z, &layer.norm_w, cfg.norm_eps)?;
    let mut proj = Tensor::new(
        vec![b, d_model],
        matmul(y.data(), layer.w_out.data(), b, d_inner, d_model),
    )?;
    policy.apply(Site::OutProj, &mut proj);
    Ok((
        hidden.add(&proj)?,
        LayerCache {
            ssm_state: ssm,
            conv_state,
        },
    ))
}

/// Advance every layer by one token per batch row. Returns `(B, vocab)` logits.
pub fn decode_step<T: Scalar>(
    params: &ModelParams<T>,
    cache: &Mamba2Cache<T>,
    tokens: &[u32],
    cfg: &ModelConfig,
) -> Result<(Tensor<T>, Mamba2Cache<T>)> {
    check_layer_count(params, cfg)?;
    cache.validate(cfg)?;
    if tokens.len() != cache.batch {
        return Err(Error::shape(
            "decode_step",
            format!("{} tokens for a batch of {}", tokens.len(), cache.batch),
        ));
    }
    for &id in tokens {
        if id as usize >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
    }
    let d = cfg.d_model;
    let mut data = Vec::with_capacity(tokens.len() * d);
    for &id in tokens {
        data.extend_from_slice(&params.embedding.data()[id as usize * d..][..d]);
    }
    let mut hidden = Tensor::new(vec![tokens.len(), d], data)?;
    let mut layers = Vec::with_capacity(cache.layers.len());
    for (layer, lc) in params.layers.iter().zip(&cache.layers) {
        let (next, lc) = layer_step(layer, lc, &hidden, cfg)?;
        hidden = next;
        layers.push(lc);
    }
    Ok((
        lm_head(params, &hidden, cfg)?,
        Mamba2Cache {
            batch: cache.batch,
            layers,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    Cached,
    NonCached,
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecodeMode::Cached => "cached",
            DecodeMode::NonCached => "non-cached",
        })
    }
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cached" => Ok(DecodeMode::Cached),
            "non-cached" | "non_cached" => Ok(DecodeMode::NonCached),
            other => Err(Error::Invalid(format!("unknown decode mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GenerateOptions {
    pub keep_logits: bool,
}

#[derive(Debug, Clone)]
pub struct GenerationResult<T> {
    /// One row of `steps` generated ids per batch row.
    pub tokens: Vec<Vec<u32>>,
    /// `(B, G, vocab)` when requested.
    pub per_step_logits: Option<Tensor<T>>,
    pub steps: usize,
    /// Cached mode only: state after consuming the prompt and every generated token.
    pub final_cache: Option<Mamba2Cache<T>>,
}

fn last_position<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, t, v] = [0, 1, 2].map(|i| logits.shape()[i]);
    let mut out = Vec::with_capacity(b * v);
    for bi in 0..b {
        out.extend_from_slice(&logits.data()[(bi * t + t - 1) * v..][..v]);
    }
    Tensor::new(vec![b, v], out)
}

/// Greedy generation of `steps` tokens after `prompt`.
pub fn generate<T: Scalar>(
    params: &ModelParams<T>,
    prompt: &[Vec<u32>],
    steps: usize,
    mode: DecodeMode,
    cfg: &ModelConfig,
    opts: GenerateOptions,
) -> Result<GenerationResult<T>> {
    if steps == 0 {
        return Err(Error::Invalid("generation needs at least one step".into()));
    }
    let (b, _) = validate_tokens(prompt, cfg.vocab_size)?;
    let v = cfg.vocab_size;
    let mut tokens = vec![Vec::with_capacity(steps); b];
    let mut kept: Option<Vec<Vec<T>>> = opts.keep_logits.then(|| Vec::with_capacity(steps));
    let mut record = |logits: &Tensor<T>, tokens: &mut Vec<Vec<u32>>| -> Vec<u32> {
        let picks: Vec<u32> = logits.data().chunks_exact(v).map(argmax).collect();
        for (row, &id) in tokens.iter_mut().zip(&picks) {
            row.push(id);
        }
        if let Some(k) = kept.as_mut() {
            k.push(logits.data().to_vec());
        }
        picks
    };

    let final_cache = match mode {
        DecodeMode::Cached => {
            let pre = prefill(params, prompt, cfg)?;
            let mut cache = pre.cache;
            let mut picks = record(&last_position(&pre.logits)?, &mut tokens);
            for step in 1..=steps {
                let (logits, next) = decode_step(params, &cache, &picks, cfg)?;
                cache = next;
                if step < steps {
                    picks = record(&logits, &mut tokens);
                }
            }
            Some(cache)
        }
        DecodeMode::NonCached => {
            let mut seq: Vec<Vec<u32>> = prompt.to_vec();
            for _ in 0..steps {
                let logits = prefill(params, &seq, cfg)?.logits;
                let picks = record(&last_position(&logits)?, &mut tokens);
                for (row, id) in seq.iter_mut().zip(picks) {
                    row.push(id);
                }
            }
            None
        }
    };

    let per_step_logits = match kept {
        None => None,
        Some(steps_logits) => {
            // Stored step-major as (G, B, vocab); reorder to (B, G, vocab).
            let mut out = Vec::with_capacity(b * steps * v);
            for bi in 0..b {
                for s in &steps_logits {
                    out.extend_from_slice(&s[bi * v..][..v]);
                }
            }
            Some(Tensor::new(vec![b, steps, v], out)?)
        }
    };
    Ok(GenerationResult {
        tokens,
        per_step_logits,
        steps,
        final_cache,
    })
}
