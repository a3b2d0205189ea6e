//! Wall-clock benchmarks that pair measured time with the analytic cost model.

use std::hint::black_box;
use std::io;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cache::{argmax, decode_step, DecodeMode};
use crate::config::ModelConfig;
use crate::cost::{
    bytes_decode, bytes_prefill, bytes_step, flops_decode, flops_prefill, memory_required,
    peak_activation_bytes, step_flops, BenchProtocol, CostReport, DeviceSpec, Phase, TimingStats,
};
use crate::error::{Error, Result};
use crate::model::{prefill, ModelParams};
use crate::tensor::Scalar;

#[derive(Debug, Clone)]
pub struct BenchRequest {
    pub model: String,
    pub phase: Phase,
    /// Prompt lengths for prefill; context lengths for decode.
    pub lengths: Vec<usize>,
    /// Decode steps per timed run.
    pub gen_len: usize,
    pub mode: DecodeMode,
    pub batch: usize,
    pub device: DeviceSpec,
    pub protocol: BenchProtocol,
    /// Configurations whose analytic memory exceeds this are reported as OOM.
    pub memory_budget: Option<u64>,
}

/// Deterministic synthetic prompt.
pub fn synthetic_tokens(batch: usize, len: usize, vocab: usize) -> Vec<Vec<u32>> {
    (0..batch)
        .map(|b| (0..len).map(|i| ((i * 7 + b * 13 + 3) % vocab) as u32).collect())
        .collect()
}

fn time_runs(protocol: &BenchProtocol, mut run: impl FnMut() -> Result<()>) -> Result<TimingStats> {
    protocol.validate()?;
    for _ in 0..protocol.warmup_runs {
        run()?;
    }
    let mut samples = Vec::with_capacity(protocol.timed_runs);
    for _ in 0..protocol.timed_runs {
        let start = Instant::now();
        run()?;
        samples.push(start.elapsed().as_secs_f64());
    }
    Ok(TimingStats::from_samples(&samples).expect("timed_runs >= 1"))
}

/// Cached: untimed prompt prefill, then `gen` timed steps. Non-cached: `gen`
/// timed full passes over the growing prefix.
fn decode_run<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    prompt: &[Vec<u32>],
    gen: usize,
    mode: DecodeMode,
) -> Result<(f64, Option<usize>)> {
    match mode {
        DecodeMode::Cached => {
            let pre = prefill(params, prompt, cfg)?;
            let v = cfg.vocab_size;
            let t = prompt[0].len();
            let mut picks: Vec<u32> = (0..prompt.len())
                .map(|b| argmax(&pre.logits.data()[(b * t + t - 1) * v..][..v]))
                .collect();
            let mut cache = pre.cache;
            let start = Instant::now();
            for _ in 0..gen {
                let (logits, next) = decode_step(params, &cache, &picks, cfg)?;
                picks = logits.data().chunks_exact(v).map(argmax).collect();
                cache = black_box(next);
            }
            Ok((start.elapsed().as_secs_f64(), Some(cache.byte_size())))
        }
        DecodeMode::NonCached => {
            let v = cfg.vocab_size;
            let mut seq = prompt.to_vec();
            let start = Instant::now();
            for _ in 0..gen {
                let logits = black_box(prefill(params, &seq, cfg)?.logits);
                let t = seq[0].len();
                for (b, row) in seq.iter_mut().enumerate() {
                    row.push(argmax(&logits.data()[(b * t + t - 1) * v..][..v]));
                }
            }
            Ok((start.elapsed().as_secs_f64(), None))
        }
    }
}

pub fn run_bench<T: Scalar>(params: &ModelParams<T>, cfg: &ModelConfig, req: &BenchRequest) -> Result<Vec<CostReport>> {
    if req.batch == 0 {
        return Err(Error::Invalid("batch must be >= 1".into()));
    }
    if req.lengths.is_empty() || req.lengths.contains(&0) {
        return Err(Error::Invalid("sequence lengths must be >= 1".into()));
    }
    let elem = T::ELEM.size_bytes();
    let mut out = Vec::with_capacity(req.lengths.len());
    for &len in &req.lengths {
        let report = match req.phase {
            Phase::Prefill => {
                let mut r = CostReport {
                    model: req.model.clone(),
                    phase: Phase::Prefill,
                    seq_len: len,
                    mode: None,
                    gen_len: None,
                    flops: flops_prefill(cfg, req.batch, len),
                    bytes: bytes_prefill(cfg, req.batch, len, elem),
                    wall_seconds: None,
                    tokens_per_second: None,
                    mfu: None,
                    hbu: None,
                    timing: None,
                    cache_bytes: Some(crate::cache::cache_bytes(cfg, req.batch, elem) as u64),
                    peak_bytes: Some(peak_activation_bytes(cfg, req.batch, len, elem)),
                    oom: false,
                };
                if exceeds(req, memory_required(cfg, DecodeMode::NonCached, req.batch, len, elem)) {
                    r.oom = true;
                    r
                } else {
                    let tokens = synthetic_tokens(req.batch, len, cfg.vocab_size);
                    let stats = time_runs(&req.protocol, || {
                        black_box(prefill(params, &tokens, cfg)?);
                        Ok(())
                    })?;
                    r.timing = Some(stats);
                    r.with_wall(stats.mean, req.batch * len, &req.device)
                }
            }
            Phase::Decode => {
                let gen = req.gen_len.max(1);
                let (flops, bytes, peak) = match req.mode {
                    DecodeMode::Cached => (
                        gen as u64 * step_flops(cfg, req.batch),
                        gen as u64 * bytes_step(cfg, req.batch, elem),
                        None,
                    ),
                    DecodeMode::NonCached => (
                        flops_decode(cfg, DecodeMode::NonCached, req.batch, len, gen),
                        bytes_decode(cfg, DecodeMode::NonCached, req.batch, len, gen, elem),
                        Some(peak_activation_bytes(cfg, req.batch, len + gen - 1, elem)),
                    ),
                };
                let mut r = CostReport {
                    model: req.model.clone(),
                    phase: Phase::Decode,
                    seq_len: len,
                    mode: Some(req.mode),
                    gen_len: Some(gen),
                    flops,
                    bytes,
                    wall_seconds: None,
                    tokens_per_second: None,
                    mfu: None,
                    hbu: None,
                    timing: None,
                    cache_bytes: None,
                    peak_bytes: peak,
                    oom: false,
                };
                if exceeds(req, memory_required(cfg, req.mode, req.batch, len + gen, elem)) {
                    r.oom = true;
                    if req.mode == DecodeMode::Cached {
                        r.cache_bytes = Some(crate::cache::cache_bytes(cfg, req.batch, elem) as u64);
                    }
                    r
                } else {
                    let prompt = synthetic_tokens(req.batch, len, cfg.vocab_size);
                    let mut cache_size = None;
                    let mut samples = Vec::with_capacity(req.protocol.timed_runs);
                    req.protocol.validate()?;
                    for i in 0..req.protocol.warmup_runs + req.protocol.timed_runs {
                        let (wall, size) = decode_run(params, cfg, &prompt, gen, req.mode)?;
                        if i >= req.protocol.warmup_runs {
                            samples.push(wall);
                        }
                        cache_size = size;
                    }
                    let stats = TimingStats::from_samples(&samples).expect("timed_runs >= 1");
                    r.cache_bytes = cache_size.map(|s| s as u64);
                    r.timing = Some(stats);
                    r.with_wall(stats.mean, req.batch * gen, &req.device)
                }
            }
        };
        out.push(report);
    }
    Ok(out)
}

fn exceeds(req: &BenchRequest, need: u64) -> bool {
    req.memory_budget.is_some_and(|budget| need > budget)
}

/// One CSV line. Empty metric cells mark an OOM row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub model: String,
    pub phase: Phase,
    pub seq_len: usize,
    pub mode: Option<DecodeMode>,
    pub tokens_per_s: Option<f64>,
    pub flops: u64,
    pub bytes: u64,
    pub mfu: Option<f64>,
    pub hbu: Option<f64>,
    pub cache_bytes: Option<u64>,
    pub peak_bytes: Option<u64>,
}

pub const CSV_COLUMNS: [&str; 11] = [
    "model",
    "phase",
    "seq_len",
    "mode",
    "tokens_per_s",
    "flops",
    "bytes",
    "mfu",
    "hbu",
    "cache_bytes",
    "peak_bytes",
];

impl From<&CostReport> for CsvRow {
    fn from(r: &CostReport) -> Self {
        Self {
            model: r.model.clone(),
            phase: r.phase,
            seq_len: r.seq_len,
            mode: r.mode,
            tokens_per_s: r.tokens_per_second,
            flops: r.flops,
            bytes: r.bytes,
            mfu: r.mfu,
            hbu: r.hbu,
            cache_bytes: r.cache_bytes,
            peak_bytes: r.peak_bytes,
        }
    }
}

pub fn write_csv<W: io::Write>(out: W, rows: &[CsvRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(CSV_COLUMNS)?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: io::Read>(input: R) -> Result<Vec<CsvRow>, csv::Error> {
    csv::Reader::from_reader(input).deserialize().collect()
}

fn fmt_opt<T>(v: Option<T>, f: impl Fn(T) -> String) -> String {
    v.map_or_else(|| "-".to_string(), f)
}

/// Fixed-width human-readable table.
pub fn format_table(reports: &[CostReport]) -> String {
    let header = [
        "model", "phase", "seq_len", "mode", "tokens/s", "flops", "bytes", "mfu", "hbu", "cache_bytes", "peak_bytes",
    ];
    let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for r in reports {
        let tps = if r.oom {
            "OOM".to_string()
        } else {
            fmt_opt(r.tokens_per_second, |v| format!("{v:.1}"))
        };
        rows.push(vec![
            r.model.clone(),
            r.phase.to_string(),
            r.seq_len.to_string(),
            fmt_opt(r.mode, |m| m.to_string()),
            tps,
            r.flops.to_string(),
            r.bytes.to_string(),
            fmt_opt(r.mfu, |v| format!("{v:.3e}")),
            fmt_opt(r.hbu, |v| format!("{v:.3e}")),
            fmt_opt(r.cache_bytes, |v| v.to_string()),
            fmt_opt(r.peak_bytes, |v| v.to_string()),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for row in &rows {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, &w)| format!("{cell:>w$}"))
            .collect();
        s.push_str(line.join("  ").trim_end());
        s.push('\n');
    }
    s
}
