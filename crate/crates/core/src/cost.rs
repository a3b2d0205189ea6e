//! Closed-form FLOP, byte and memory counts, and the MFU/HBU definitions.
//!
//! FLOPs per layer for a prefill of `T` tokens (`Nc = ceil(T/L)`, chunk
//! terms use the padded length), multiplied by batch:
//!
//! | term            | count                                          |
//! |-----------------|------------------------------------------------|
//! | projections     | `2·T·d_model·d_in + 2·T·d_inner·d_model`       |
//! | conv            | `2·T·conv_dim·k`                               |
//! | intra-chunk     | `2·Nc·L²·H·N + Nc·L²·H + 2·Nc·L²·H·P`          |
//! | chunk states    | `4·Nc·L·H·P·N`                                 |
//! | inter-chunk     | `2·Nc²·H·P·N`                                  |
//! | cross output    | `2·Nc·L·H·P·N`                                 |
//!
//! plus the tied head `2·T·d_model·vocab` once. A decode step costs
//! `2·d_model·d_in + 2·d_inner·d_model + 2·conv_dim·k + 3·H·P·N + 2·H·P·N`
//! per layer plus the head; it has no position term.
//!
//! Bytes are an unfused count: every parameter read once per invocation plus
//! every activation read and written by each op. Real traffic can be lower.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cache::{cache_bytes, DecodeMode};
use crate::config::ModelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub name: String,
    pub peak_tflops: f64,
    pub peak_gbps: f64,
}

impl DeviceSpec {
    pub fn new(name: impl Into<String>, peak_tflops: f64, peak_gbps: f64) -> Result<Self> {
        if !(peak_tflops > 0.0 && peak_gbps > 0.0 && peak_tflops.is_finite() && peak_gbps.is_finite()) {
            return Err(Error::Invalid(format!(
                "device peaks must be positive, got {peak_tflops} TFLOPS and {peak_gbps} GB/s"
            )));
        }
        Ok(Self {
            name: name.into(),
            peak_tflops,
            peak_gbps,
        })
    }

    /// TPU v6e: 918 TFLOPS bf16, 1600 GB/s.
    pub fn v6e() -> Self {
        Self::new("v6e", 918.0, 1600.0).expect("positive")
    }

    /// A100: 312 TFLOPS bf16, 1555 GB/s.
    pub fn a100() -> Self {
        Self::new("a100", 312.0, 1555.0).expect("positive")
    }

    /// `(flops / wall) / (peak_tflops · 10¹²)`
    pub fn mfu(&self, flops: f64, wall_seconds: f64) -> f64 {
        (flops / wall_seconds) / (self.peak_tflops * 1e12)
    }

    /// `(bytes / wall) / (peak_gbps · 10⁹)`
    pub fn hbu(&self, bytes: f64, wall_seconds: f64) -> f64 {
        (bytes / wall_seconds) / (self.peak_gbps * 1e9)
    }
}

impl FromStr for DeviceSpec {
    type Err = Error;

    /// `v6e`, `a100`, or `custom:TFLOPS:GBPS`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v6e" => Ok(Self::v6e()),
            "a100" => Ok(Self::a100()),
            _ => {
                let parts: Vec<&str> = s.split(':').collect();
                match parts.as_slice() {
                    ["custom", tf, gb] => {
                        let parse = |v: &str| {
                            v.parse::<f64>()
                                .map_err(|_| Error::Invalid(format!("bad number {v:?} in device {s:?}")))
                        };
                        Self::new(s, parse(tf)?, parse(gb)?)
                    }
                    _ => Err(Error::Invalid(format!(
                        "unknown device {s:?}; use v6e, a100 or custom:TFLOPS:GBPS"
                    ))),
                }
            }
        }
    }
}

/// Which invocation a byte or FLOP count describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prefill,
    Decode,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Prefill => "prefill",
            Phase::Decode => "decode",
        })
    }
}

struct Dims {
    d_model: u64,
    d_in: u64,
    d_inner: u64,
    conv_dim: u64,
    k: u64,
    h: u64,
    p: u64,
    n: u64,
    l: u64,
    vocab: u64,
    layers: u64,
}

fn dims(cfg: &ModelConfig) -> Dims {
    Dims {
        d_model: cfg.d_model as u64,
        d_in: cfg.d_in_proj() as u64,
        d_inner: cfg.d_inner() as u64,
        conv_dim: cfg.conv_dim() as u64,
        k: cfg.conv_kernel as u64,
        h: cfg.n_heads() as u64,
        p: cfg.head_dim as u64,
        n: cfg.d_state as u64,
        l: cfg.chunk_size as u64,
        vocab: cfg.vocab_size as u64,
        layers: cfg.n_layers as u64,
    }
}

/// Per-term FLOPs for one layer of a prefill (batch 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefillTerms {
    pub projections: u64,
    pub conv: u64,
    pub intra_chunk: u64,
    pub chunk_states: u64,
    pub inter_chunk: u64,
    pub cross_output: u64,
}

impl PrefillTerms {
    pub fn total(&self) -> u64 {
        self.projections + self.conv + self.intra_chunk + self.chunk_states + self.inter_chunk + self.cross_output
    }
}

pub fn prefill_terms(cfg: &ModelConfig, seq_len: usize) -> PrefillTerms {
    let d = dims(cfg);
    let t = seq_len as u64;
    let nc = t.div_ceil(d.l);
    let l2 = d.l * d.l;
    let hpn = d.h * d.p * d.n;
    PrefillTerms {
        projections: 2 * t * d.d_model * d.d_in + 2 * t * d.d_inner * d.d_model,
        conv: 2 * t * d.conv_dim * d.k,
        intra_chunk: 2 * nc * l2 * d.h * d.n + nc * l2 * d.h + 2 * nc * l2 * d.h * d.p,
        chunk_states: 4 * nc * d.l * hpn,
        inter_chunk: 2 * nc * nc * hpn,
        cross_output: 2 * nc * d.l * hpn,
    }
}

pub fn head_flops(cfg: &ModelConfig, tokens: usize) -> u64 {
    2 * tokens as u64 * cfg.d_model as u64 * cfg.vocab_size as u64
}

pub fn flops_prefill(cfg: &ModelConfig, batch: usize, seq_len: usize) -> u64 {
    let d = dims(cfg);
    batch as u64 * (d.layers * prefill_terms(cfg, seq_len).total() + head_flops(cfg, seq_len))
}

/// FLOPs of one cached decode step; independent of position.
pub fn step_flops(cfg: &ModelConfig, batch: usize) -> u64 {
    let d = dims(cfg);
    let hpn = d.h * d.p * d.n;
    let layer = 2 * d.d_model * d.d_in + 2 * d.d_inner * d.d_model + 2 * d.conv_dim * d.k + 3 * hpn + 2 * hpn;
    batch as u64 * (d.layers * layer + head_flops(cfg, 1))
}

/// Total FLOPs to produce `gen` tokens after a `prompt`-token prefix.
///
/// Cached: one prefill plus `gen` steps (the last step folds the final token
/// into the cache). Non-cached: a fresh prefill over every prefix.
pub fn flops_decode(cfg: &ModelConfig, mode: DecodeMode, batch: usize, prompt: usize, gen: usize) -> u64 {
    match mode {
        DecodeMode::Cached => flops_prefill(cfg, batch, prompt) + gen as u64 * step_flops(cfg, batch),
        DecodeMode::NonCached => (0..gen).map(|g| flops_prefill(cfg, batch, prompt + g)).sum(),
    }
}

pub fn param_count(cfg: &ModelConfig) -> u64 {
    let d = dims(cfg);
    let layer = d.d_model + d.d_model * d.d_in + d.conv_dim * d.k + d.conv_dim + 3 * d.h + d.d_inner + d.d_inner * d.d_model;
    d.vocab * d.d_model + d.layers * layer + d.d_model
}

/// Unfused activation element traffic of one layer over `t` tokens, excluding the SSD core.
fn layer_stream_elems(d: &Dims, t: u64) -> u64 {
    let norm = 2 * t * d.d_model;
    let in_proj = t * d.d_model + t * d.d_in;
    let conv = 2 * t * d.conv_dim;
    let ssd_io = t * (d.conv_dim + d.h) + t * d.d_inner;
    let skip = 2 * t * d.d_inner;
    let gated_norm = 3 * t * d.d_inner;
    let out_proj = t * d.d_inner + t * d.d_model;
    let residual = 3 * t * d.d_model;
    norm + in_proj + conv + ssd_io + skip + gated_norm + out_proj + residual
}

fn head_stream_elems(d: &Dims, t: u64) -> u64 {
    let embed = 2 * t * d.d_model;
    let final_norm = 2 * t * d.d_model;
    let head = t * d.d_model + t * d.vocab;
    embed + final_norm + head
}

/// Unfused bytes for one prefill over `seq_len` tokens.
pub fn bytes_prefill(cfg: &ModelConfig, batch: usize, seq_len: usize, elem_bytes: usize) -> u64 {
    let d = dims(cfg);
    let t = seq_len as u64;
    let nc = t.div_ceil(d.l);
    let hpn = d.h * d.p * d.n;
    // Decay matrix and chunk/prev states are each written then read.
    let core = 2 * nc * d.l * d.l * d.h + 2 * nc * hpn + 2 * nc * hpn + hpn;
    let acts = d.layers * (layer_stream_elems(&d, t) + core) + head_stream_elems(&d, t);
    elem_bytes as u64 * (param_count(cfg) + batch as u64 * acts)
}

/// Unfused bytes for one cached decode step; independent of position.
pub fn bytes_step(cfg: &ModelConfig, batch: usize, elem_bytes: usize) -> u64 {
    let d = dims(cfg);
    let hpn = d.h * d.p * d.n;
    let state = 2 * hpn + 2 * d.conv_dim * (d.k - 1);
    let acts = d.layers * (layer_stream_elems(&d, 1) + state) + head_stream_elems(&d, 1);
    elem_bytes as u64 * (param_count(cfg) + batch as u64 * acts)
}

pub fn bytes_model(cfg: &ModelConfig, phase: Phase, batch: usize, seq_len: usize, elem_bytes: usize) -> u64 {
    match phase {
        Phase::Prefill => bytes_prefill(cfg, batch, seq_len, elem_bytes),
        Phase::Decode => bytes_step(cfg, batch, elem_bytes),
    }
}

pub fn bytes_decode(cfg: &ModelConfig, mode: DecodeMode, batch: usize, prompt: usize, gen: usize, elem_bytes: usize) -> u64 {
    match mode {
        DecodeMode::Cached => {
            bytes_prefill(cfg, batch, prompt, elem_bytes) + gen as u64 * bytes_step(cfg, batch, elem_bytes)
        }
        DecodeMode::NonCached => (0..gen).map(|g| bytes_prefill(cfg, batch, prompt + g, elem_bytes)).sum(),
    }
}

/// Peak bytes of sequence-length-proportional buffers during a full forward
/// pass over `seq_len` tokens: hidden, projection output, conv output, decay
/// matrix, X̄, chunk and entering states, SSD output and logits. Parameters
/// and the fixed-size final state are excluded.
pub fn peak_activation_bytes(cfg: &ModelConfig, batch: usize, seq_len: usize, elem_bytes: usize) -> u64 {
    let d = dims(cfg);
    let t = seq_len as u64;
    let nc = t.div_ceil(d.l);
    let tp = nc * d.l;
    let hpn = d.h * d.p * d.n;
    let elems = t * d.d_model
        + t * d.d_in
        + t * d.conv_dim
        + nc * d.l * d.l * d.h
        + tp * d.d_inner
        + 2 * nc * hpn
        + t * d.d_inner
        + t * d.vocab;
    elem_bytes as u64 * batch as u64 * elems
}

/// Analytic memory for one configuration: parameters plus the larger of the
/// cache and the activation peak.
pub fn memory_required(cfg: &ModelConfig, mode: DecodeMode, batch: usize, seq_len: usize, elem_bytes: usize) -> u64 {
    let params = elem_bytes as u64 * param_count(cfg);
    let working = match mode {
        DecodeMode::Cached => cache_bytes(cfg, batch, elem_bytes) as u64 + peak_activation_bytes(cfg, batch, 1, elem_bytes),
        DecodeMode::NonCached => peak_activation_bytes(cfg, batch, seq_len, elem_bytes),
    };
    params + working
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchProtocol {
    pub warmup_runs: usize,
    pub timed_runs: usize,
}

impl Default for BenchProtocol {
    fn default() -> Self {
        Self {
            warmup_runs: 1,
            timed_runs: 5,
        }
    }
}

impl BenchProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.timed_runs == 0 {
            return Err(Error::Invalid("timed runs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub mean: f64,
    pub stddev: f64,
    pub p99: f64,
}

impl TimingStats {
    /// Population standard deviation; nearest-rank p99.
    pub fn from_samples(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let rank = (0.99 * n).ceil() as usize;
        Some(Self {
            mean,
            stddev: var.sqrt(),
            p99: sorted[rank.clamp(1, sorted.len()) - 1],
        })
    }
}

/// One benchmark configuration. `None` metrics mark a skipped (out of memory) row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub model: String,
    pub phase: Phase,
    pub seq_len: usize,
    pub mode: Option<DecodeMode>,
    pub gen_len: Option<usize>,
    pub flops: u64,
    pub bytes: u64,
    pub wall_seconds: Option<f64>,
    pub tokens_per_second: Option<f64>,
    pub mfu: Option<f64>,
    pub hbu: Option<f64>,
    pub timing: Option<TimingStats>,
    pub cache_bytes: Option<u64>,
    pub peak_bytes: Option<u64>,
    pub oom: bool,
}

impl CostReport {
    /// Fill wall time, throughput and utilisation from a measured wall time.
    pub fn with_wall(mut self, wall_seconds: f64, tokens: usize, device: &DeviceSpec) -> Self {
        self.wall_seconds = Some(wall_seconds);
        self.tokens_per_second = Some(tokens as f64 / wall_seconds);
        self.mfu = Some(device.mfu(self.flops as f64, wall_seconds));
        self.hbu = Some(device.hbu(self.bytes as f64, wall_seconds));
        self
    }
}
