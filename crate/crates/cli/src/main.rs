//! `ssd-engine` command-line interface.
//!
//! Exit codes: 0 success, 1 a verification check failed, 2 usage or invalid
//! input, 3 I/O or bundle load failure.

use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ssd_engine::bench::{self, BenchRequest, CsvRow};
use ssd_engine::bundle;
use ssd_engine::cache::{self, DecodeMode, GenerateOptions};
use ssd_engine::config::ModelConfig;
use ssd_engine::cost::{self, BenchProtocol, CostReport, DeviceSpec, Phase};
use ssd_engine::model::ModelParams;
use ssd_engine::numerics::MaskStrategy;
use ssd_engine::precision::DecayPrecision;
use ssd_engine::verify::{self, VerifyOptions};
use ssd_engine::{Error, Scalar};

#[derive(Parser)]
#[command(name = "ssd-engine", version, about = "Mamba-2 SSD inference, verification and cost benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a randomly initialised model bundle.
    Init(InitArgs),
    /// Run the numerical verification suites.
    Verify(VerifyArgs),
    /// Greedy generation from a prompt of token ids.
    Generate(GenerateArgs),
    /// Time prefill over one or more sequence lengths.
    BenchPrefill(BenchArgs),
    /// Time token generation after a prompt.
    BenchDecode(BenchArgs),
    /// Analytic FLOP, byte and memory counts without running the model.
    Cost(CostArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Bundle directory. Without it a preset is randomly initialised.
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long, default_value = "tiny")]
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the preset's layer count.
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long, value_enum)]
    mask_strategy: Option<Mask>,
    /// Round the decay exponential to bfloat16.
    #[arg(long)]
    ablate_bf16_decay: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mask {
    Static,
    Rowwise,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Csv,
    Jsonl,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Cached,
    NonCached,
}

impl From<Mode> for DecodeMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Cached => DecodeMode::Cached,
            Mode::NonCached => DecodeMode::NonCached,
        }
    }
}

#[derive(Args)]
struct InitArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "tiny")]
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    layers: Option<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// `all` or a comma-separated list of oracle, chunk, cached, greedy, masking, bf16.
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    greedy_steps: Option<usize>,
    #[arg(long)]
    random_matrices: Option<usize>,
    /// Also write the results as JSON lines to this file.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Comma-separated token ids.
    #[arg(long, value_delimiter = ',', required = true)]
    prompt: Vec<u32>,
    #[arg(long, default_value_t = 16)]
    gen_len: usize,
    #[arg(long, value_enum, default_value = "cached")]
    mode: Mode,
    /// Run in f64 instead of f32.
    #[arg(long)]
    f64: bool,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    seq_len: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    gen_len: usize,
    #[arg(long, value_enum, default_value = "cached")]
    mode: Mode,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// v6e, a100 or custom:TFLOPS:GBPS.
    #[arg(long, default_value = "v6e")]
    device: DeviceSpec,
    #[arg(long, default_value_t = 5)]
    runs: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    /// Rows needing more memory than this are reported as OOM instead of run.
    #[arg(long)]
    memory_budget_mb: Option<f64>,
    #[arg(long)]
    f64: bool,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

#[derive(Args)]
struct CostArgs {
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long, default_value = "tiny")]
    preset: String,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long, value_delimiter = ',', required = true)]
    seq_len: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    gen_len: usize,
    /// Decode mode; both are reported when omitted.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Element width in bytes.
    #[arg(long, default_value_t = 4)]
    elem_bytes: usize,
    #[arg(long, default_value = "v6e")]
    device: DeviceSpec,
    /// Measured wall time in seconds, for MFU and HBU.
    #[arg(long)]
    wall_seconds: Option<f64>,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

enum Failure {
    Usage(String),
    Io(String),
    Verify,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Bundle(b) => Failure::Io(b.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn preset_config(name: &str, layers: Option<usize>) -> CliResult<ModelConfig> {
    let mut cfg = ModelConfig::preset(name).ok_or_else(|| {
        Failure::Usage(format!("unknown preset {name:?}; expected one of {}", ModelConfig::PRESETS.join(", ")))
    })?;
    if let Some(n) = layers {
        cfg.n_layers = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(args: &ModelArgs) -> CliResult<(String, ModelParams<f32>, ModelConfig)> {
    let (name, params, mut cfg) = match &args.bundle {
        Some(dir) => {
            let loaded = bundle::load_bundle(dir).map_err(|e| Failure::Io(e.to_string()))?;
            for w in &loaded.warnings {
                eprintln!("warning: {w}");
            }
            let name = dir.file_name().map_or_else(|| "bundle".into(), |n| n.to_string_lossy().into_owned());
            (name, loaded.params, loaded.config)
        }
        None => {
            let cfg = preset_config(&args.preset, args.layers)?;
            let params = bundle::random_init(&cfg, args.seed);
            (args.preset.clone(), params, cfg)
        }
    };
    if let Some(m) = args.mask_strategy {
        cfg.mask_strategy = match m {
            Mask::Static => MaskStrategy::Static,
            Mask::Rowwise => MaskStrategy::Rowwise,
        };
    }
    if args.ablate_bf16_decay {
        cfg.elem_policy.decay_exp = DecayPrecision::Bf16e;
    }
    Ok((name, params, cfg))
}

fn jsonl<T: serde::Serialize>(out: &mut impl Write, rows: &[T]) -> CliResult {
    for r in rows {
        let line = serde_json::to_string(r).map_err(|e| Failure::Io(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

fn emit_reports(reports: &[CostReport], format: Format) -> CliResult {
    let mut out = io::stdout().lock();
    match format {
        Format::Table => write!(out, "{}", bench::format_table(reports))?,
        Format::Csv => {
            let rows: Vec<CsvRow> = reports.iter().map(CsvRow::from).collect();
            bench::write_csv(&mut out, &rows).map_err(|e| Failure::Io(e.to_string()))?;
        }
        Format::Jsonl => jsonl(&mut out, reports)?,
    }
    Ok(())
}

fn init(args: InitArgs) -> CliResult {
    let cfg = preset_config(&args.preset, args.layers)?;
    let params = bundle::random_init(&cfg, args.seed);
    let manifest = bundle::save_bundle(&params, &cfg, &args.out)?;
    println!(
        "wrote {} tensors ({} parameters) to {}",
        manifest.tensors.len(),
        params.param_count(),
        args.out.display()
    );
    Ok(())
}

fn run_verify(args: VerifyArgs) -> CliResult {
    let suites = verify::parse_suites(&args.suite)?;
    if args.format == Format::Csv {
        return Err(Failure::Usage("verify supports --format table or jsonl".into()));
    }
    let (_, params, cfg) = load_model(&args.model)?;
    let mut opts = VerifyOptions { seed: args.model.seed, ..VerifyOptions::default() };
    if let Some(n) = args.instances {
        opts.instances = n;
    }
    if let Some(n) = args.max_len {
        opts.max_len = n;
    }
    if let Some(n) = args.greedy_steps {
        opts.greedy_steps = n;
    }
    if let Some(n) = args.random_matrices {
        opts.random_matrices = n;
    }
    let results = verify::run_verify(&params, &cfg, &suites, &opts)?;
    let mut out = io::stdout().lock();
    match args.format {
        Format::Table => write!(out, "{}", verify::format_results(&results))?,
        Format::Jsonl => jsonl(&mut out, &results)?,
        Format::Csv => unreachable!(),
    }
    if let Some(path) = &args.report {
        let mut file = io::BufWriter::new(std::fs::File::create(path)?);
        jsonl(&mut file, &results)?;
        file.flush()?;
    }
    if results.iter().all(|r| r.pass) {
        Ok(())
    } else {
        Err(Failure::Verify)
    }
}

fn generate_with<T: Scalar>(params: &ModelParams<T>, cfg: &ModelConfig, args: &GenerateArgs) -> CliResult<Vec<u32>> {
    let out = cache::generate(
        params,
        std::slice::from_ref(&args.prompt),
        args.gen_len,
        args.mode.into(),
        cfg,
        GenerateOptions::default(),
    )?;
    Ok(out.tokens.into_iter().next().unwrap_or_default())
}

fn run_generate(args: GenerateArgs) -> CliResult {
    if args.format == Format::Csv {
        return Err(Failure::Usage("generate supports --format table or jsonl".into()));
    }
    let (_, params, cfg) = load_model(&args.model)?;
    let tokens = if args.f64 {
        generate_with(&params.cast::<f64>(), &cfg, &args)?
    } else {
        generate_with(&params, &cfg, &args)?
    };
    let mode = DecodeMode::from(args.mode);
    match args.format {
        Format::Jsonl => {
            let row = serde_json::json!({ "prompt": args.prompt, "mode": mode, "tokens": tokens });
            println!("{row}");
        }
        _ => {
            let ids: Vec<String> = tokens.iter().map(u32::to_string).collect();
            println!("{}", ids.join(","));
        }
    }
    Ok(())
}

fn run_bench(args: BenchArgs, phase: Phase) -> CliResult {
    let (name, params, cfg) = load_model(&args.model)?;
    let req = BenchRequest {
        model: name,
        phase,
        lengths: args.seq_len.clone(),
        gen_len: args.gen_len,
        mode: args.mode.into(),
        batch: args.batch,
        device: args.device.clone(),
        protocol: BenchProtocol { warmup_runs: args.warmup, timed_runs: args.runs },
        memory_budget: args.memory_budget_mb.map(|mb| (mb * 1024.0 * 1024.0) as u64),
    };
    req.protocol.validate()?;
    let reports = if args.f64 {
        bench::run_bench(&params.cast::<f64>(), &cfg, &req)?
    } else {
        bench::run_bench(&params, &cfg, &req)?
    };
    emit_reports(&reports, args.format)
}

fn cost_row(model: &str, phase: Phase, seq_len: usize, mode: Option<DecodeMode>, gen: Option<usize>) -> CostReport {
    CostReport {
        model: model.to_string(),
        phase,
        seq_len,
        mode,
        gen_len: gen,
        flops: 0,
        bytes: 0,
        wall_seconds: None,
        tokens_per_second: None,
        mfu: None,
        hbu: None,
        timing: None,
        cache_bytes: None,
        peak_bytes: None,
        oom: false,
    }
}

fn run_cost(args: CostArgs) -> CliResult {
    let (name, cfg) = match &args.bundle {
        Some(dir) => {
            let manifest = bundle::read_manifest(dir).map_err(|e| Failure::Io(e.to_string()))?;
            manifest.config.validate()?;
            ("bundle".to_string(), manifest.config)
        }
        None => (args.preset.clone(), preset_config(&args.preset, args.layers)?),
    };
    if args.batch == 0 || args.gen_len == 0 || args.seq_len.contains(&0) {
        return Err(Failure::Usage("batch, gen-len and seq-len must be >= 1".into()));
    }
    if args.elem_bytes == 0 {
        return Err(Failure::Usage("elem-bytes must be >= 1".into()));
    }
    let modes: Vec<DecodeMode> = match args.mode {
        Some(m) => vec![m.into()],
        None => vec![DecodeMode::Cached, DecodeMode::NonCached],
    };
    let (b, e, g) = (args.batch, args.elem_bytes, args.gen_len);
    let finish = |r: CostReport, tokens: usize| match args.wall_seconds {
        Some(w) => r.with_wall(w, tokens, &args.device),
        None => r,
    };
    let mut reports = Vec::new();
    for &t in &args.seq_len {
        let mut r = cost_row(&name, Phase::Prefill, t, None, None);
        r.flops = cost::flops_prefill(&cfg, b, t);
        r.bytes = cost::bytes_prefill(&cfg, b, t, e);
        r.cache_bytes = Some(cache::cache_bytes(&cfg, b, e) as u64);
        r.peak_bytes = Some(cost::peak_activation_bytes(&cfg, b, t, e));
        reports.push(finish(r, b * t));
        for &mode in &modes {
            let mut r = cost_row(&name, Phase::Decode, t, Some(mode), Some(g));
            r.flops = cost::flops_decode(&cfg, mode, b, t, g);
            r.bytes = cost::bytes_decode(&cfg, mode, b, t, g, e);
            match mode {
                DecodeMode::Cached => r.cache_bytes = Some(cache::cache_bytes(&cfg, b, e) as u64),
                DecodeMode::NonCached => r.peak_bytes = Some(cost::peak_activation_bytes(&cfg, b, t + g - 1, e)),
            }
            reports.push(finish(r, b * g));
        }
    }
    emit_reports(&reports, args.format)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Init(a) => init(a),
        Command::Verify(a) => run_verify(a),
        Command::Generate(a) => run_generate(a),
        Command::BenchPrefill(a) => run_bench(a, Phase::Prefill),
        Command::BenchDecode(a) => run_bench(a, Phase::Decode),
        Command::Cost(a) => run_cost(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verify) => ExitCode::from(1),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
