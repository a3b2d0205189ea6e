//! The Mamba-2 stack: embedding, residual blocks, final norm and tied LM head.
//!
//! Block wiring, per token row:
//!
//! ```text
//! normed  = rmsnorm(hidden, input_norm)
//! u       = normed · W_in                     -> [z | xBC | dt_raw]
//! xBC     = silu(causal_conv(xBC))            -> [x | B | C]
//! y       = ssd(x, dt, a, B, C) + D ⊙ x
//! y       = rmsnorm(y ⊙ silu(z), norm)
//! hidden += y · W_out
//! ```

use crate::cache::{LayerCache, Mamba2Cache};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{depthwise_causal_conv, rmsnorm, rmsnorm_gated};
use crate::precision::Site;
use crate::ssd::{decay_rates, ssd_forward, step_sizes, SsdInputs, SsdOptions};
use crate::tensor::{matmul, matmul_transposed, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    /// `(d_model)`
    pub input_norm_w: Tensor<T>,
    /// `(d_model, d_in_proj)`
    pub w_in: Tensor<T>,
    /// `(conv_dim, k)`
    pub conv_w: Tensor<T>,
    /// `(conv_dim)`
    pub conv_b: Tensor<T>,
    /// `(H)`
    pub dt_bias: Tensor<T>,
    /// `(H)`
    pub a_log: Tensor<T>,
    /// `(H)`
    pub d: Tensor<T>,
    /// `(d_inner)`
    pub norm_w: Tensor<T>,
    /// `(d_inner, d_model)`
    pub w_out: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    /// `(vocab, d_model)`; also the transposed LM head.
    pub embedding: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    /// `(d_model)`
    pub final_norm_w: Tensor<T>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn named(&self) -> [(&'static str, &Tensor<T>); 9] {
        [
            ("input_norm.weight", &self.input_norm_w),
            ("in_proj.weight", &self.w_in),
            ("conv1d.weight", &self.conv_w),
            ("conv1d.bias", &self.conv_b),
            ("dt_bias", &self.dt_bias),
            ("A_log", &self.a_log),
            ("D", &self.d),
            ("norm.weight", &self.norm_w),
            ("out_proj.weight", &self.w_out),
        ]
    }

    pub fn cast<U: Scalar>(&self) -> LayerParams<U> {
        LayerParams {
            input_norm_w: self.input_norm_w.cast(),
            w_in: self.w_in.cast(),
            conv_w: self.conv_w.cast(),
            conv_b: self.conv_b.cast(),
            dt_bias: self.dt_bias.cast(),
            a_log: self.a_log.cast(),
            d: self.d.cast(),
            norm_w: self.norm_w.cast(),
            w_out: self.w_out.cast(),
        }
    }
}

/// Per-layer tensor suffixes in canonical order, with shapes for `cfg`.
pub fn layer_shapes(cfg: &ModelConfig) -> [(&'static str, Vec<usize>); 9] {
    let (h, k) = (cfg.n_heads(), cfg.conv_kernel);
    [
        ("input_norm.weight", vec![cfg.d_model]),
        ("in_proj.weight", vec![cfg.d_model, cfg.d_in_proj()]),
        ("conv1d.weight", vec![cfg.conv_dim(), k]),
        ("conv1d.bias", vec![cfg.conv_dim()]),
        ("dt_bias", vec![h]),
        ("A_log", vec![h]),
        ("D", vec![h]),
        ("norm.weight", vec![cfg.d_inner()]),
        ("out_proj.weight", vec![cfg.d_inner(), cfg.d_model]),
    ]
}

/// Every parameter name and shape in canonical order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = vec![("embedding".to_string(), vec![cfg.vocab_size, cfg.d_model])];
    for i in 0..cfg.n_layers {
        for (suffix, shape) in layer_shapes(cfg) {
            out.push((format!("layers.{i}.{suffix}"), shape));
        }
    }
    out.push(("final_norm.weight".to_string(), vec![cfg.d_model]));
    out
}

impl<T: Scalar> ModelParams<T> {
    /// `(name, tensor)` pairs in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, layer) in self.layers.iter().enumerate() {
            for (suffix, t) in layer.named() {
                out.push((format!("layers.{i}.{suffix}"), t));
            }
        }
        out.push(("final_norm.weight".to_string(), &self.final_norm_w));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            embedding: self.embedding.cast(),
            layers: self.layers.iter().map(LayerParams::cast).collect(),
            final_norm_w: self.final_norm_w.cast(),
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        if self.layers.len() != cfg.n_layers {
            return Err(Error::Config(format!(
                "config has {} layers, params have {}",
                cfg.n_layers,
                self.layers.len()
            )));
        }
        for ((name, t), (_, shape)) in self.named_tensors().iter().zip(param_shapes(cfg)) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "ModelParams::validate",
                    detail: format!("{name}: expected {shape:?}, got {:?}", t.shape()),
                });
            }
            if !t.is_finite() {
                return Err(Error::Invalid(format!("{name} contains non-finite values")));
            }
        }
        Ok(())
    }
}

/// Result of one residual block over a sequence.
#[derive(Debug, Clone)]
pub struct BlockOutput<T> {
    /// `(B, T, d_model)`
    pub hidden: Tensor<T>,
    /// `(B, H, P, N)`
    pub final_state: Tensor<T>,
    /// `(B, conv_dim, k - 1)`: the last `k - 1` conv inputs, oldest first.
    pub conv_tail: Tensor<T>,
}

fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.last_dim();
    if w.rank() != 2 || w.shape()[0] != d {
        return Err(Error::shape(
            "linear",
            format!("x {:?} times w {:?}", x.shape(), w.shape()),
        ));
    }
    let cols = w.shape()[1];
    let rows = x.len() / d.max(1);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = cols;
    Tensor::new(shape, matmul(x.data(), w.data(), rows, d, cols))
}

/// Last `k - 1` columns of `(B, T, C)` per channel as `(B, C, k - 1)`,
/// zero-filled where the sequence is shorter than the window.
fn conv_tail<T: Scalar>(xbc: &Tensor<T>, k: usize) -> Tensor<T> {
    let (b, t, c) = (xbc.shape()[0], xbc.shape()[1], xbc.shape()[2]);
    let w = k - 1;
    let mut out = vec![T::zero(); b * c * w];
    for bi in 0..b {
        for j in 0..w {
            // Column j holds position t - w + j.
            let Some(pos) = (t + j).checked_sub(w) else { continue };
            for ch in 0..c {
                out[(bi * c + ch) * w + j] = xbc.data()[(bi * t + pos) * c + ch];
            }
        }
    }
    Tensor::new(vec![b, c, w], out).expect("sized above")
}

/// One residual block over `(B, T, d_model)`.
pub fn block_forward<T: Scalar>(
    layer: &LayerParams<T>,
    hidden: &Tensor<T>,
    cfg: &ModelConfig,
    initial_state: Option<&Tensor<T>>,
) -> Result<BlockOutput<T>> {
    if hidden.rank() != 3 || hidden.shape()[2] != cfg.d_model {
        return Err(Error::shape(
            "block_forward",
            format!("hidden {:?} for d_model {}", hidden.shape(), cfg.d_model),
        ));
    }
    let (b, t) = (hidden.shape()[0], hidden.shape()[1]);
    let (h, p, g, n) = (cfg.n_heads(), cfg.head_dim, cfg.n_groups, cfg.d_state);
    let policy = &cfg.elem_policy;

    let normed = rmsnorm(hidden, &layer.input_norm_w, cfg.norm_eps)?;
    let mut u = linear(&normed, &layer.w_in)?;
    policy.apply(Site::InProj, &mut u);
    let [z, xbc, dt_raw]: [Tensor<T>; 3] = u
        .split_last(&[cfg.d_inner(), cfg.conv_dim(), h])?
        .try_into()
        .expect("three widths");

    let tail = conv_tail(&xbc, cfg.conv_kernel);
    let mut xbc = depthwise_causal_conv(&xbc, &layer.conv_w, &layer.conv_b)?;
    policy.apply(Site::ConvOut, &mut xbc);
    let [x, bmat, cmat]: [Tensor<T>; 3] = xbc
        .split_last(&[cfg.d_inner(), g * n, g * n])?
        .try_into()
        .expect("three widths");

    let a = decay_rates(&layer.a_log, policy.decay_exp)?;
    let dt = step_sizes(&dt_raw, &layer.dt_bias, cfg.dt_limits)?;
    let inputs = SsdInputs {
        x: x.reshape(vec![b, t, h, p])?,
        dt,
        a,
        b: bmat.reshape(vec![b, t, g, n])?,
        c: cmat.reshape(vec![b, t, g, n])?,
    };
    let opts = SsdOptions::new(cfg.chunk_size).with_mask(cfg.mask_strategy);
    let out = ssd_forward(&inputs, opts, initial_state)?;

    let mut y = out.y;
    let dd = layer.d.data();
    for (i, (yv, &xv)) in y.data_mut().iter_mut().zip(inputs.x.data()).enumerate() {
        let head = (i / p) % h;
        *yv = *yv + dd[head] * xv;
    }
    policy.apply(Site::SsdOut, &mut y);

    let y = rmsnorm_gated(&y.reshape(vec![b, t, cfg.d_inner()])?, &z, &layer.norm_w, cfg.norm_eps)?;
    let mut proj = linear(&y, &layer.w_out)?;
    policy.apply(Site::OutProj, &mut proj);

    Ok(BlockOutput {
        hidden: hidden.add(&proj)?,
        final_state: out.final_state,
        conv_tail: tail,
    })
}

pub(crate) fn check_layer_count<T>(params: &ModelParams<T>, cfg: &ModelConfig) -> Result<()> {
    if params.layers.len() != cfg.n_layers {
        return Err(Error::Config(format!(
            "config has {} layers, params have {}",
            cfg.n_layers,
            params.layers.len()
        )));
    }
    Ok(())
}

pub fn validate_tokens(tokens: &[Vec<u32>], vocab: usize) -> Result<(usize, usize)> {
    let b = tokens.len();
    if b == 0 {
        return Err(Error::Invalid("batch must contain at least one row".into()));
    }
    let t = tokens[0].len();
    if t == 0 {
        return Err(Error::Invalid("token rows must be non-empty".into()));
    }
    if tokens.iter().any(|row| row.len() != t) {
        return Err(Error::Invalid("token rows must all have the same length".into()));
    }
    for &id in tokens.iter().flatten() {
        if id as usize >= vocab {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
    }
    Ok((b, t))
}

/// Embedding lookup of `(B, T)` ids into `(B, T, d_model)`.
pub fn embed<T: Scalar>(params: &ModelParams<T>, tokens: &[Vec<u32>], d_model: usize) -> Result<Tensor<T>> {
    let (b, t) = (tokens.len(), tokens.first().map_or(0, Vec::len));
    let mut data = Vec::with_capacity(b * t * d_model);
    for &id in tokens.iter().flatten() {
        let id = id as usize;
        data.extend_from_slice(&params.embedding.data()[id * d_model..(id + 1) * d_model]);
    }
    Tensor::new(vec![b, t, d_model], data)
}

/// Final norm and tied head: `(.., d_model)` to `(.., vocab)`.
pub fn lm_head<T: Scalar>(params: &ModelParams<T>, hidden: &Tensor<T>, cfg: &ModelConfig) -> Result<Tensor<T>> {
    let normed = rmsnorm(hidden, &params.final_norm_w, cfg.norm_eps)?;
    let rows = normed.len() / cfg.d_model;
    let mut shape = hidden.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = cfg.vocab_size;
    Tensor::new(
        shape,
        matmul_transposed(normed.data(), params.embedding.data(), rows, cfg.d_model, cfg.vocab_size),
    )
}

#[derive(Debug, Clone)]
pub struct PrefillOutput<T> {
    /// `(B, T, vocab)`
    pub logits: Tensor<T>,
    pub cache: Mamba2Cache<T>,
}

/// Process a whole prompt in one chunked pass.
pub fn prefill<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[Vec<u32>],
    cfg: &ModelConfig,
) -> Result<PrefillOutput<T>> {
    check_layer_count(params, cfg)?;
    let (b, _) = validate_tokens(tokens, cfg.vocab_size)?;
    let mut hidden = embed(params, tokens, cfg.d_model)?;
    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let out = block_forward(layer, &hidden, cfg, None)?;
        hidden = out.hidden;
        layers.push(LayerCache {
            ssm_state: out.final_state,
            conv_state: out.conv_tail,
        });
    }
    Ok(PrefillOutput {
        logits: lm_head(params, &hidden, cfg)?,
        cache: Mamba2Cache { batch: b, layers },
    })
}
