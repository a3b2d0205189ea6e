//! Self-checks run by `ssd-engine verify`: oracle agreement, chunk invariance,
//! cached-vs-full consistency, greedy agreement, masking and decay-precision ablations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cache::{decode_step, generate, DecodeMode, GenerateOptions};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{prefill, ModelParams};
use crate::numerics::{tril_mask_rowwise, tril_mask_static, MaskStrategy};
use crate::oracle::{cast_inputs, compare, random_instance, sequential_ssm, InstanceDims, OracleReport};
use crate::precision::DecayPrecision;
use crate::rng::SplitMix64;
use crate::ssd::{ssd_forward, SsdOptions};
use crate::tensor::{Scalar, Tensor};

/// Chunk lengths exercised by the oracle and chunk suites.
pub const CHUNK_LENS: [usize; 5] = [1, 4, 16, 64, 256];
/// f64 gate for chunked vs sequential and across chunk lengths.
pub const F64_SSD_ATOL: f64 = 1e-10;
/// f32 gates for chunked vs sequential.
pub const F32_RTOL: f64 = 1e-5;
pub const F32_ATOL: f64 = 2e-4;
/// Cached-vs-full logit gates.
pub const CACHED_F32_ATOL: f64 = 1.3e-4;
pub const CACHED_F64_ATOL: f64 = 1e-9;
pub const CACHED_PROMPTS: [usize; 3] = [1, 16, 33];
pub const CACHED_STEPS: [usize; 3] = [1, 8, 64];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Oracle,
    Chunk,
    Cached,
    Greedy,
    Masking,
    Bf16,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Oracle,
        Suite::Chunk,
        Suite::Cached,
        Suite::Greedy,
        Suite::Masking,
        Suite::Bf16,
    ];
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Oracle => "oracle",
            Suite::Chunk => "chunk",
            Suite::Cached => "cached",
            Suite::Greedy => "greedy",
            Suite::Masking => "masking",
            Suite::Bf16 => "bf16",
        })
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.to_string() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown suite {s:?}")))
    }
}

/// Parse `all` or a comma-separated list of suite names.
pub fn parse_suites(spec: &str) -> Result<Vec<Suite>> {
    if spec == "all" {
        return Ok(Suite::ALL.to_vec());
    }
    spec.split(',').map(|s| s.trim().parse()).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub suite: Suite,
    pub check: String,
    pub pass: bool,
    pub detail: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<OracleReport>,
}

impl CheckResult {
    fn new(suite: Suite, check: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Self {
            suite,
            check: check.into(),
            pass,
            detail: detail.into(),
            report: None,
        }
    }

    fn with_report(mut self, report: OracleReport) -> Self {
        self.report = Some(report);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Random SSD instances for the oracle, chunk and masking suites.
    pub instances: usize,
    pub max_len: usize,
    pub greedy_steps: usize,
    pub random_matrices: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 40,
            max_len: 512,
            greedy_steps: 64,
            random_matrices: 1000,
        }
    }
}

/// Keeps the report with the largest error, and whether every report passed.
#[derive(Default)]
struct Worst {
    report: Option<OracleReport>,
    all_pass: bool,
    count: usize,
    first_failure: Option<String>,
}

impl Worst {
    fn new() -> Self {
        Self {
            all_pass: true,
            ..Self::default()
        }
    }

    fn add(&mut self, label: impl FnOnce() -> String, r: OracleReport) {
        self.count += 1;
        if !r.pass {
            self.all_pass = false;
            if self.first_failure.is_none() {
                self.first_failure = Some(label());
            }
        }
        let worse = self
            .report
            .as_ref()
            .is_none_or(|w| r.max_abs_err > w.max_abs_err || (!r.pass && w.pass));
        if worse {
            self.report = Some(r);
        }
    }

    fn finish(self, suite: Suite, check: &str) -> CheckResult {
        let max = self.report.as_ref().map_or(0.0, |r| r.max_abs_err);
        let mut detail = format!("{} comparisons, worst max-abs {max:.3e}", self.count);
        if let Some(f) = &self.first_failure {
            detail.push_str(&format!("; first failure: {f}"));
        }
        let res = CheckResult::new(suite, check, self.all_pass, detail);
        match self.report {
            Some(r) => res.with_report(r),
            None => res,
        }
    }
}

fn sample_instances(opts: &VerifyOptions) -> Vec<(InstanceDims, crate::oracle::Instance)> {
    let mut rng = SplitMix64::new(opts.seed);
    (0..opts.instances)
        .map(|_| {
            let dims = InstanceDims::sample(&mut rng, opts.max_len);
            (dims, random_instance(&mut rng, dims))
        })
        .collect()
}

fn oracle_suite(opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    let mut w64 = Worst::new();
    let mut w32 = Worst::new();
    for (i, (dims, inst)) in sample_instances(opts).iter().enumerate() {
        let init = (i % 2 == 1).then_some(&inst.initial_state);
        let (y_ref, s_ref) = sequential_ssm(&inst.inputs, None, init)?;
        // The f32 reference runs on the f32-rounded inputs, so only compute error is measured.
        let in32 = cast_inputs::<f64, f32>(&inst.inputs);
        let init32 = init.map(|s| s.cast::<f32>());
        let (y_ref32, s_ref32) = sequential_ssm(&cast_inputs::<f32, f64>(&in32), None, init32.as_ref().map(|s| s.cast()).as_ref())?;
        for l in CHUNK_LENS {
            let label = || format!("instance {i} {dims:?} L={l}");
            let out = ssd_forward(&inst.inputs, SsdOptions::new(l), init)?;
            w64.add(label, compare(&out.y, &y_ref, 0.0, F64_SSD_ATOL)?);
            w64.add(label, compare(&out.final_state, &s_ref, 0.0, F64_SSD_ATOL)?);
            let out = ssd_forward(&in32, SsdOptions::new(l), init32.as_ref())?;
            w32.add(label, compare(&out.y, &y_ref32, F32_RTOL, F32_ATOL)?);
            w32.add(label, compare(&out.final_state, &s_ref32, F32_RTOL, F32_ATOL)?);
        }
    }
    Ok(vec![
        w64.finish(Suite::Oracle, "chunked vs sequential (f64)"),
        w32.finish(Suite::Oracle, "chunked vs sequential (f32)"),
    ])
}

fn chunk_suite(opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    let mut w = Worst::new();
    for (i, (_, inst)) in sample_instances(opts).iter().enumerate() {
        let outs: Vec<_> = CHUNK_LENS
            .iter()
            .map(|&l| ssd_forward(&inst.inputs, SsdOptions::new(l), None))
            .collect::<Result<_>>()?;
        for a in 0..outs.len() {
            for b in a + 1..outs.len() {
                let label = || format!("instance {i} L={} vs L={}", CHUNK_LENS[a], CHUNK_LENS[b]);
                w.add(label, compare(&outs[a].y, &outs[b].y, 0.0, F64_SSD_ATOL)?);
                w.add(label, compare(&outs[a].final_state, &outs[b].final_state, 0.0, F64_SSD_ATOL)?);
            }
        }
    }
    Ok(vec![w.finish(Suite::Chunk, "pairwise across chunk lengths (f64)")])
}

/// Logits after `prefill(tokens[..prompt])` then one decode step per remaining
/// token, compared with the last position of `prefill(tokens)`.
pub fn cached_vs_full<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    tokens: &[u32],
    prompt: usize,
    atol: f64,
) -> Result<OracleReport> {
    if prompt == 0 || prompt >= tokens.len() {
        return Err(Error::Invalid("need 1 <= prompt < tokens.len()".into()));
    }
    let mut cache = prefill(params, &[tokens[..prompt].to_vec()], cfg)?.cache;
    let mut stepped = None;
    for &tok in &tokens[prompt..] {
        let (logits, next) = decode_step(params, &cache, &[tok], cfg)?;
        cache = next;
        stepped = Some(logits);
    }
    let stepped = stepped.expect("at least one step");
    let full = prefill(params, &[tokens.to_vec()], cfg)?.logits;
    let v = cfg.vocab_size;
    let last = Tensor::new(vec![1, v], full.data()[full.len() - v..].to_vec())?;
    compare(&stepped, &last, 0.0, atol)
}

pub fn random_tokens(rng: &mut SplitMix64, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| rng.below(vocab) as u32).collect()
}

fn cached_suite(params: &ModelParams<f32>, cfg: &ModelConfig, opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    let p64 = params.cast::<f64>();
    let mut rng = SplitMix64::new(opts.seed ^ 0xC0FFEE);
    let mut w32 = Worst::new();
    let mut w64 = Worst::new();
    for p in CACHED_PROMPTS {
        for g in CACHED_STEPS {
            let tokens = random_tokens(&mut rng, p + g, cfg.vocab_size);
            let label = || format!("P={p} G={g}");
            w32.add(label, cached_vs_full(params, cfg, &tokens, p, CACHED_F32_ATOL)?);
            w64.add(label, cached_vs_full(&p64, cfg, &tokens, p, CACHED_F64_ATOL)?);
        }
    }
    Ok(vec![
        w32.finish(Suite::Cached, "prefill+decode vs full prefill (f32)"),
        w64.finish(Suite::Cached, "prefill+decode vs full prefill (f64)"),
    ])
}

fn greedy_check<T: Scalar>(params: &ModelParams<T>, cfg: &ModelConfig, prompt: &[u32], steps: usize) -> Result<(bool, String)> {
    let prompt = [prompt.to_vec()];
    let opts = GenerateOptions::default();
    let cached = generate(params, &prompt, steps, DecodeMode::Cached, cfg, opts)?;
    let full = generate(params, &prompt, steps, DecodeMode::NonCached, cfg, opts)?;
    let first_diff = cached.tokens[0].iter().zip(&full.tokens[0]).position(|(a, b)| a != b);
    Ok(match first_diff {
        None => (true, format!("{steps} tokens identical")),
        Some(i) => (false, format!("first divergence at step {i}")),
    })
}

fn greedy_suite(params: &ModelParams<f32>, cfg: &ModelConfig, opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    let mut rng = SplitMix64::new(opts.seed ^ 0x6EED);
    let prompt = random_tokens(&mut rng, 16, cfg.vocab_size);
    let (ok32, d32) = greedy_check(params, cfg, &prompt, opts.greedy_steps)?;
    let (ok64, d64) = greedy_check(&params.cast::<f64>(), cfg, &prompt, opts.greedy_steps)?;
    Ok(vec![
        CheckResult::new(Suite::Greedy, "cached vs non-cached tokens (f32)", ok32, d32),
        CheckResult::new(Suite::Greedy, "cached vs non-cached tokens (f64)", ok64, d64),
    ])
}

fn masking_suite(params: &ModelParams<f32>, cfg: &ModelConfig, opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    let mut rng = SplitMix64::new(opts.seed ^ 0x3A5C);
    let mut mismatched = 0;
    for _ in 0..opts.random_matrices {
        let l = 1 + rng.below(32);
        let lead = 1 + rng.below(3);
        let m = Tensor::<f32>::new(
            vec![lead, l, l],
            (0..lead * l * l).map(|_| rng.normal() as f32).collect(),
        )?;
        let fill = if rng.below(2) == 0 { f32::NEG_INFINITY } else { 0.0 };
        if !tril_mask_static(&m, fill)?.bitwise_eq(&tril_mask_rowwise(&m, fill)?) {
            mismatched += 1;
        }
    }
    let mut results = vec![CheckResult::new(
        Suite::Masking,
        "tril static vs rowwise on random matrices",
        mismatched == 0,
        format!("{mismatched} of {} differ", opts.random_matrices),
    )];

    let mut ssd_mismatch = 0;
    let instances = sample_instances(opts);
    for (_, inst) in &instances {
        for l in CHUNK_LENS {
            let a = ssd_forward(&inst.inputs, SsdOptions::new(l), None)?;
            let b = ssd_forward(&inst.inputs, SsdOptions::new(l).with_mask(MaskStrategy::Rowwise), None)?;
            if !(a.y.bitwise_eq(&b.y) && a.final_state.bitwise_eq(&b.final_state)) {
                ssd_mismatch += 1;
            }
        }
    }
    results.push(CheckResult::new(
        Suite::Masking,
        "ssd_forward static vs rowwise",
        ssd_mismatch == 0,
        format!("{ssd_mismatch} of {} runs differ", instances.len() * CHUNK_LENS.len()),
    ));

    let tokens = [random_tokens(&mut rng, 3 * cfg.chunk_size + 1, cfg.vocab_size)];
    let stat = ModelConfig { mask_strategy: MaskStrategy::Static, ..cfg.clone() };
    let row = ModelConfig { mask_strategy: MaskStrategy::Rowwise, ..cfg.clone() };
    let same = prefill(params, &tokens, &stat)?.logits.bitwise_eq(&prefill(params, &tokens, &row)?.logits);
    results.push(CheckResult::new(
        Suite::Masking,
        "model logits static vs rowwise",
        same,
        if same { "bitwise identical" } else { "logits differ" },
    ));
    Ok(results)
}

/// Decay-precision ablation on the given model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayAblation {
    /// Two identical baseline runs.
    pub self_repro: f64,
    /// Baseline vs an explicit f32 decay setting (flag off).
    pub flag_off: f64,
    /// Baseline vs bf16-rounded decay (flag on).
    pub flag_on: f64,
}

impl DecayAblation {
    pub fn pass(&self) -> bool {
        self.flag_off == 0.0 && self.flag_on > 0.0 && self.flag_on > 10.0 * self.self_repro
    }
}

pub fn decay_ablation(params: &ModelParams<f32>, cfg: &ModelConfig, tokens: &[Vec<u32>]) -> Result<DecayAblation> {
    let base_cfg = cfg.clone();
    let mut off = cfg.clone();
    off.elem_policy.decay_exp = DecayPrecision::F32;
    let mut on = cfg.clone();
    on.elem_policy.decay_exp = DecayPrecision::Bf16e;
    let base = prefill(params, tokens, &base_cfg)?.logits;
    let again = prefill(params, tokens, &base_cfg)?.logits;
    let off_logits = prefill(params, tokens, &off)?.logits;
    let on_logits = prefill(params, tokens, &on)?.logits;
    Ok(DecayAblation {
        self_repro: base.max_abs_diff(&again)?,
        flag_off: base.max_abs_diff(&off_logits)?,
        flag_on: base.max_abs_diff(&on_logits)?,
    })
}

fn bf16_suite(params: &ModelParams<f32>, cfg: &ModelConfig, opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    let mut rng = SplitMix64::new(opts.seed ^ 0xBF16);
    let tokens = [random_tokens(&mut rng, 32, cfg.vocab_size)];
    let mut base = cfg.clone();
    base.elem_policy.decay_exp = DecayPrecision::F32;
    let a = decay_ablation(params, &base, &tokens)?;
    Ok(vec![
        CheckResult::new(
            Suite::Bf16,
            "f32 decay baseline divergence",
            a.flag_off == 0.0,
            format!("max-abs {:.3e} (self-reproducibility {:.3e})", a.flag_off, a.self_repro),
        ),
        CheckResult::new(
            Suite::Bf16,
            "bf16 decay ablation divergence",
            a.flag_on > 0.0 && a.flag_on > 10.0 * a.self_repro,
            format!("max-abs {:.3e}", a.flag_on),
        ),
    ])
}

pub fn run_suite(suite: Suite, params: &ModelParams<f32>, cfg: &ModelConfig, opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    match suite {
        Suite::Oracle => oracle_suite(opts),
        Suite::Chunk => chunk_suite(opts),
        Suite::Cached => cached_suite(params, cfg, opts),
        Suite::Greedy => greedy_suite(params, cfg, opts),
        Suite::Masking => masking_suite(params, cfg, opts),
        Suite::Bf16 => bf16_suite(params, cfg, opts),
    }
}

pub fn run_verify(params: &ModelParams<f32>, cfg: &ModelConfig, suites: &[Suite], opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    params.validate(cfg)?;
    let mut out = Vec::new();
    for &s in suites {
        out.extend(run_suite(s, params, cfg, opts)?);
    }
    Ok(out)
}

pub fn format_results(results: &[CheckResult]) -> String {
    let w = results.iter().map(|r| r.check.len()).max().unwrap_or(0);
    let mut s = String::new();
    for r in results {
        let status = if r.pass { "PASS" } else { "FAIL" };
        s.push_str(&format!("{status}  {:<7}  {:<w$}  {}\n", r.suite.to_string(), r.check, r.detail));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::random_init;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.to_string().parse::<Suite>().unwrap(), s);
        }
        assert_eq!(parse_suites("all").unwrap().len(), 6);
        assert_eq!(parse_suites("oracle,bf16").unwrap(), vec![Suite::Oracle, Suite::Bf16]);
        assert!(parse_suites("nope").is_err());
    }

    #[test]
    fn quick_verify_passes_on_tiny_model() {
        let cfg = ModelConfig::tiny();
        let params = random_init(&cfg, 5);
        let opts = VerifyOptions {
            instances: 3,
            max_len: 40,
            greedy_steps: 8,
            random_matrices: 20,
            ..VerifyOptions::default()
        };
        let results = run_verify(&params, &cfg, &Suite::ALL, &opts).unwrap();
        assert!(results.iter().all(|r| r.pass), "{}", format_results(&results));
    }
}
