//! `picsim`: command-line driver for the position-independent KV caching
//! simulator.
//!
//! Exit status: 0 on success, 1 on usage or input errors, 2 when an internal
//! check fails (live-mode rotation tripwire, rotate-check mismatch).

mod manifest;

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use pic_core::analyzer::{
    compare_strategies, decompose, mask_sweep, mask_sweep_csv, shifted_corpus, Scope, StrategyOptions,
};
use pic_core::chunker::{cdc_chunk, chunks_to_csv, ChunkerParams};
use pic_core::engine::{aggregate_csv, event_log_jsonl, marker_pins, replay, EngineError, Mode, ServeConfig};
use pic_core::kv_registry::{synth_kr_raw, SyntheticKvParams};
use pic_core::model::{flatten, parse_trace, serialize_trace, Trace};
use pic_core::roc::{run_roc, Component, RocConfig};
use pic_core::rotary::{detect_spec, Precision, RotarySpec};
use pic_core::workloads::{generate, header_sweep, sweep_csv, Pattern, PatternParams};

use manifest::RunManifest;

/// An internal check failed; exits with status 2.
#[derive(Debug)]
struct Assertion(String);

impl std::fmt::Display for Assertion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Assertion {}

/// Deterministic unit vector for rotation probes.
fn probe_vector(dim: usize, seed: u64) -> Vec<f64> {
    let params = SyntheticKvParams {
        seed,
        kr_dim: dim,
        ..SyntheticKvParams::default()
    };
    synth_kr_raw(0, &params)
}

#[derive(Parser, Debug, Serialize)]
#[command(name = "picsim", version, about = "Position-independent KV cache simulator", arg_required_else_help = true)]
struct Cli {
    /// Seed for every random draw in the run
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
    /// Directory for reports and the run manifest
    #[arg(long, global = true, default_value = "picsim-out")]
    out_dir: PathBuf,
    /// Report format
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Chunk every request of a trace and list the chunks
    Chunk(ChunkArgs),
    /// Offline trace analysis
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Generate a pattern workload and serve it through the engine
    Simulate(SimulateArgs),
    /// Header-length sweep on agent_meta or sysvar
    Sweep(SweepArgs),
    /// ROC of within-block vs cross-block cosine similarity
    Roc(RocArgs),
    /// Check a rotation against a declared rotary base
    RotateCheck(RotateCheckArgs),
    /// Write a pattern workload as a trace file
    Generate(GenerateArgs),
}

#[derive(Args, Debug, Serialize)]
struct ChunkerArgs {
    /// Boundary mask exponent k
    #[arg(long, default_value_t = 7)]
    mask_exponent: u32,
    #[arg(long, default_value_t = 32)]
    min_size: usize,
    #[arg(long, default_value_t = 512)]
    max_size: usize,
    /// Do not pin boundaries around marker segments
    #[arg(long)]
    no_marker_pin: bool,
}

impl ChunkerArgs {
    fn params(&self) -> Result<ChunkerParams> {
        let p = ChunkerParams {
            mask_exponent: self.mask_exponent,
            min_size: self.min_size,
            max_size: self.max_size,
            marker_pinned: !self.no_marker_pin,
            ..ChunkerParams::default()
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Args, Debug, Serialize)]
struct ChunkArgs {
    /// Trace file (JSON lines)
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    chunker: ChunkerArgs,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum AnalyzeCommand {
    /// Prefix / PIC-cacheable / novel decomposition
    Decompose(DecomposeArgs),
    /// Fixed-block vs CDC vs CDC-with-fallback recovery
    Strategies(StrategiesArgs),
    /// CDC recovery for several mask exponents
    MaskSweep(MaskSweepArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum ScopeArg {
    WithinSession,
    CrossSession,
    Both,
}

#[derive(Args, Debug, Serialize)]
struct TraceSource {
    /// Trace file (JSON lines); omit to use a generated shifted corpus
    #[arg(long)]
    input: Option<PathBuf>,
    /// Requests in the generated shifted corpus
    #[arg(long, default_value_t = 24)]
    shifted_requests: usize,
    /// Shared content length in the generated shifted corpus
    #[arg(long, default_value_t = 4096)]
    shifted_len: usize,
}

impl TraceSource {
    fn load(&self, seed: u64) -> Result<Trace> {
        match &self.input {
            Some(path) => read_trace(path),
            None => Ok(shifted_corpus(self.shifted_requests, self.shifted_len, 64, seed)),
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct DecomposeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = ScopeArg::Both)]
    scope: ScopeArg,
}

#[derive(Args, Debug, Serialize)]
struct StrategiesArgs {
    #[command(flatten)]
    source: TraceSource,
    #[command(flatten)]
    chunker: ChunkerArgs,
    /// Fixed block size
    #[arg(long, default_value_t = 128)]
    block: usize,
    /// Fallback sub-window size
    #[arg(long, default_value_t = 128)]
    subwindow: usize,
    /// Key fixed blocks on content only, ignoring offset
    #[arg(long)]
    content_key: bool,
}

#[derive(Args, Debug, Serialize)]
struct MaskSweepArgs {
    #[command(flatten)]
    source: TraceSource,
    #[command(flatten)]
    chunker: ChunkerArgs,
    /// Mask exponents to sweep
    #[arg(long, value_delimiter = ',', default_values_t = [7u32, 10, 13, 16])]
    k: Vec<u32>,
}

#[derive(Args, Debug, Serialize)]
struct WorkloadArgs {
    #[arg(long, value_parser = parse_pattern, default_value = "agent_meta")]
    pattern: Pattern,
    #[arg(long, default_value_t = 80)]
    n_req: usize,
    #[arg(long, default_value_t = 2500)]
    body_len: usize,
    #[arg(long, default_value_t = 50)]
    header_len: usize,
    #[arg(long, default_value_t = 8)]
    variant_pool: usize,
    /// Strip marker segments (negative control)
    #[arg(long)]
    no_markers: bool,
}

impl WorkloadArgs {
    fn params(&self, seed: u64) -> PatternParams {
        PatternParams {
            pattern: self.pattern,
            n_req: self.n_req,
            body_len: self.body_len,
            header_len: self.header_len,
            variant_pool: self.variant_pool,
            seed,
            markers: !self.no_markers,
        }
    }
}

fn parse_pattern(s: &str) -> Result<Pattern, String> {
    s.parse().map_err(|e: pic_core::workloads::WorkloadError| e.to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum PrecisionArg {
    F64,
    F32,
    Bf16e,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F64 => Precision::F64,
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::Bf16e => Precision::Bf16e,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct EngineArgs {
    #[command(flatten)]
    chunker: ChunkerArgs,
    /// Storage precision of rotary keys
    #[arg(long, value_enum, default_value_t = PrecisionArg::F64)]
    precision: PrecisionArg,
    /// Rotary base of the model
    #[arg(long, default_value_t = 1e4)]
    theta: f64,
    /// Rotary base used to materialize reused keys (defaults to --theta)
    #[arg(long)]
    materialize_theta: Option<f64>,
    /// Probe 128-token sub-windows of missed chunks
    #[arg(long)]
    s1: bool,
    #[arg(long, default_value_t = 32)]
    carveout: usize,
}

impl EngineArgs {
    fn config(&self, seed: u64) -> Result<ServeConfig> {
        let mut config = ServeConfig {
            mode: Mode::from_env(),
            carveout_threshold: self.carveout,
            s1_enabled: self.s1,
            chunker: self.chunker.params()?,
            rotary: RotarySpec::new(self.theta, 64, 1.0)?,
            precision: self.precision.into(),
            materialize_rotary: self
                .materialize_theta
                .map(|t| RotarySpec::new(t, 64, 1.0))
                .transpose()?,
            ..ServeConfig::default()
        };
        config.kv.seed = seed;
        Ok(config)
    }
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    #[command(flatten)]
    workload: WorkloadArgs,
    #[command(flatten)]
    engine: EngineArgs,
    /// Serve this trace instead of generating one
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Skip this many leading requests when averaging
    #[arg(long, default_value_t = 1)]
    warmup: usize,
}

#[derive(Args, Debug, Serialize)]
struct SweepArgs {
    #[command(flatten)]
    workload: WorkloadArgs,
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [50usize, 250, 1000, 2000])]
    header_lens: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ComponentArg {
    Invariant,
    Rotated,
}

#[derive(Args, Debug, Serialize)]
struct RocArgs {
    #[arg(long, value_enum, default_value_t = ComponentArg::Invariant)]
    component: ComponentArg,
    /// Gaussian noise sigma per element
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 500)]
    n_blocks: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 512, 1024, 2048, 3584])]
    positions: Vec<u64>,
    #[arg(long, default_value_t = 4096)]
    window: u64,
    /// Rotary base for the rotated component
    #[arg(long, default_value_t = 1e4)]
    theta: f64,
}

#[derive(Args, Debug, Serialize)]
struct RotateCheckArgs {
    /// Declared rotary base
    #[arg(long, default_value_t = 1e4)]
    theta: f64,
    /// Base the probed system actually rotates with
    #[arg(long)]
    probe_theta: f64,
    #[arg(long, default_value_t = 64)]
    dim: usize,
}

#[derive(Args, Debug, Serialize)]
struct GenerateArgs {
    #[command(flatten)]
    workload: WorkloadArgs,
    /// Output file name inside --out-dir
    #[arg(long, default_value = "trace.jsonl")]
    output: String,
}

fn read_trace(path: &Path) -> Result<Trace> {
    let file = File::open(path).with_context(|| format!("cannot open trace {}", path.display()))?;
    parse_trace(BufReader::new(file)).with_context(|| format!("invalid trace {}", path.display()))
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

/// Writes named reports and the manifest, echoing the first report.
struct Outputs<'a> {
    cli: &'a Cli,
    files: Vec<(String, String)>,
}

impl Outputs<'_> {
    fn add(&mut self, name: impl Into<String>, content: String) {
        self.files.push((name.into(), content));
    }

    fn report(&mut self, stem: &str, csv: String, json_text: String) {
        match self.cli.format {
            Format::Csv => self.add(format!("{stem}.csv"), csv),
            Format::Json => self.add(format!("{stem}.json"), json_text),
        }
    }

    fn finish(self, subcommand: &str) -> Result<()> {
        if let Some((_, first)) = self.files.iter().find(|(name, _)| !name.ends_with(".jsonl")) {
            print!("{first}");
        }
        let manifest = RunManifest::write(&self.cli.out_dir, subcommand, self.cli, &self.files)?;
        eprintln!("wrote {} report(s) and manifest to {}", manifest.outputs.len(), self.cli.out_dir.display());
        Ok(())
    }
}

fn run(cli: &Cli) -> Result<()> {
    let seed = cli.seed;
    let mut out = Outputs { cli, files: Vec::new() };
    let name = match &cli.command {
        Command::Chunk(args) => {
            let params = args.chunker.params()?;
            let trace = read_trace(&args.input)?;
            let mut csv = String::from("request,start,len,fingerprint_hex,forced\n");
            let mut rows = Vec::new();
            for (i, req) in trace.requests.iter().enumerate() {
                let (tokens, _) = flatten(req);
                let chunks = cdc_chunk(&tokens, &params, &marker_pins(&req.marker_spans(), 0));
                for line in chunks_to_csv(&chunks).lines().skip(1) {
                    csv.push_str(&format!("{i},{line}\n"));
                }
                rows.push(serde_json::json!({
                    "request": i,
                    "chunks": chunks.iter().map(|c| serde_json::json!({
                        "start": c.start,
                        "len": c.len,
                        "fingerprint": format!("{:016x}", c.fingerprint),
                        "forced": c.forced.as_str(),
                    })).collect::<Vec<_>>(),
                }));
            }
            out.report("chunks", csv, json(&rows));
            "chunk"
        }
        Command::Analyze(AnalyzeCommand::Decompose(args)) => {
            let trace = read_trace(&args.input)?;
            let scopes = match args.scope {
                ScopeArg::WithinSession => vec![Scope::WithinSession],
                ScopeArg::CrossSession => vec![Scope::CrossSession],
                ScopeArg::Both => vec![Scope::WithinSession, Scope::CrossSession],
            };
            let reports: Vec<_> = scopes.into_iter().map(|s| decompose(&trace, s)).collect();
            let mut csv = String::new();
            for (i, r) in reports.iter().enumerate() {
                let body = r.to_csv();
                csv.push_str(if i == 0 { &body } else { body.split_once('\n').map_or("", |x| x.1) });
            }
            out.report("decomposition", csv, json(&reports));
            "analyze decompose"
        }
        Command::Analyze(AnalyzeCommand::Strategies(args)) => {
            let trace = args.source.load(seed)?;
            let opts = StrategyOptions {
                block: args.block,
                subwindow: args.subwindow,
                fixed_content_key: args.content_key,
            };
            let r = compare_strategies(&trace, &args.chunker.params()?, &opts)?;
            out.report("strategies", r.to_csv(), json(&r));
            "analyze strategies"
        }
        Command::Analyze(AnalyzeCommand::MaskSweep(args)) => {
            let trace = args.source.load(seed)?;
            let points = mask_sweep(&trace, &args.k, &args.chunker.params()?)?;
            out.report("mask_sweep", mask_sweep_csv(&points), json(&points));
            "analyze mask-sweep"
        }
        Command::Simulate(args) => {
            let config = args.engine.config(seed)?;
            let (trace, label) = match &args.trace {
                Some(path) => (read_trace(path)?, "trace".to_string()),
                None => {
                    let params = args.workload.params(seed);
                    (generate(&params)?, params.pattern.to_string())
                }
            };
            let report = replay(&trace, &config, &label).map_err(engine_failure)?;
            let row = pic_core::engine::aggregate(&report.results, &label, "synthetic", args.warmup);
            let rows: Vec<_> = row.into_iter().collect();
            out.report("aggregate", aggregate_csv(&rows), json(&rows));
            out.add("events.jsonl", event_log_jsonl(&trace, &report.results));
            "simulate"
        }
        Command::Sweep(args) => {
            let config = args.engine.config(seed)?;
            let rows = header_sweep(&args.workload.params(seed), &args.header_lens, &config).map_err(|e| match e {
                pic_core::workloads::WorkloadError::Engine(e) => engine_failure(e),
                other => other.into(),
            })?;
            out.report("sweep", sweep_csv(&rows), json(&rows));
            "sweep"
        }
        Command::Roc(args) => {
            let component = match args.component {
                ComponentArg::Invariant => Component::Invariant,
                ComponentArg::Rotated => Component::Rotated,
            };
            let config = RocConfig {
                n_blocks: args.n_blocks,
                positions: args.positions.clone(),
                window: args.window,
                spec: RotarySpec::new(args.theta, 64, 1.0)?,
                ..RocConfig::new(component, args.noise, seed)
            };
            let r = run_roc(&config)?;
            let csv = format!("component,noise_sigma,auc,n_pos,n_neg\n{},{},{:.6},{},{}\n", r.component, r.noise_sigma, r.auc, r.n_pos, r.n_neg);
            out.report("roc", csv, json(&r));
            "roc"
        }
        Command::RotateCheck(args) => {
            let declared = RotarySpec::new(args.theta, args.dim, 1.0)?;
            let actual = RotarySpec::new(args.probe_theta, args.dim, 1.0)?;
            let base = probe_vector(args.dim, seed);
            let v = detect_spec(&declared, &base, |p| actual.rotate_f64(&base, p as i64));
            let verdict = if v.ok { "match" } else { "mismatch" };
            let csv = format!(
                "declared_theta,probe_theta,verdict,max_error,best_fit_theta,best_fit_error\n{},{},{verdict},{:.6e},{},{:.6e}\n",
                args.theta, args.probe_theta, v.max_error, v.best_fit_theta, v.best_fit_error
            );
            let j = serde_json::json!({
                "declared_theta": args.theta,
                "probe_theta": args.probe_theta,
                "verdict": verdict,
                "max_error": v.max_error,
                "best_fit_theta": v.best_fit_theta,
                "best_fit_error": v.best_fit_error,
            });
            out.report("rotate_check", csv, json(&j));
            out.finish("rotate-check")?;
            if !v.ok {
                return Err(Assertion(format!(
                    "rotation does not match declared theta {} (max rel-L2 {:.3e}; best fit theta {})",
                    args.theta, v.max_error, v.best_fit_theta
                ))
                .into());
            }
            return Ok(());
        }
        Command::Generate(args) => {
            let trace = generate(&args.workload.params(seed))?;
            out.add(args.output.clone(), serialize_trace(&trace));
            "generate"
        }
    };
    out.finish(name)
}

fn engine_failure(e: EngineError) -> anyhow::Error {
    match e {
        EngineError::RotationMismatch { .. } => Assertion(e.to_string()).into(),
        other => other.into(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Assertion>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
