mod config;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use moek::numkit::{read_matrix_file, write_matrix_file, Dtype};
use moek::placement::{evaluate_plan, plan_two_stage, plan_with_budget, PlacementPlan, Strategy};
use moek::quant::{precision_pack, quantize_layer, Granularity, OrderingStrategy, PackTarget};
use moek::sim::{render_plotdata, render_report, simulate, ReportFormat, SimReport};
use moek::sweep::{run_sweep, sweep_csv};
use moek::trace::{expert_freq, generate_trace, path_stats, read_trace_file, write_trace_file};
use moek::Error;
use serde::Serialize;

use config::RunConfig;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_IO: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

/// Joint activation/weight quantization and CPU-GPU expert offloading
/// simulation for mixture-of-experts models.
#[derive(Parser, Debug)]
#[command(name = "moek", version, about)]
struct Cli {
    /// TOML config file; flags override its values
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Seed for every random draw (overrides gen.seed)
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for sweeps
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Quantize one layer from weight and calibration matrices
    Quantize(QuantizeArgs),
    /// Generate a synthetic routing trace
    GenTrace(GenTraceArgs),
    /// Path and per-expert activation statistics of a trace
    Stats(StatsArgs),
    /// Build a placement plan from a trace
    Plan(PlanArgs),
    /// Replay a trace against a plan and cost model
    Simulate(SimulateArgs),
    /// Strategy x budget x input-length grid, written as CSV
    Sweep(SweepArgs),
    /// Render saved simulation results
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct QuantizeArgs {
    /// Weight matrix (out x in) in the binary matrix format
    #[arg(long)]
    weights: PathBuf,
    /// Calibration activations (in x tokens)
    #[arg(long)]
    calib: PathBuf,
    /// Directory for codes.bin, layer.toml and the packed expert
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    #[arg(long)]
    bits: Option<u8>,
    #[arg(long)]
    symmetric: bool,
    /// per_tensor or per_token (activations)
    #[arg(long)]
    granularity: Option<String>,
    #[arg(long)]
    grid_steps: Option<usize>,
    /// none, max_abs or sum_squares
    #[arg(long)]
    ordering: Option<String>,
    /// Also write the packed expert for this target (cpu_fp or gpu_int)
    #[arg(long)]
    pack: Option<String>,
}

#[derive(Args, Debug, Default)]
struct GenFlags {
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    experts: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    prefill: Option<usize>,
    #[arg(long)]
    decode: Option<usize>,
    #[arg(long)]
    sequences: Option<usize>,
    #[arg(long)]
    hot_path_prob: Option<f64>,
    #[arg(long)]
    zipf_s: Option<f64>,
    #[arg(long)]
    stream: Option<u64>,
}

#[derive(Args, Debug)]
struct GenTraceArgs {
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    gen: GenFlags,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Number of most frequent paths to list
    #[arg(long, default_value_t = 10)]
    top: usize,
}

#[derive(Args, Debug)]
struct PlanArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// frequency, path or two_stage
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    budget: Option<usize>,
    /// Two-stage: residents per layer taken from hot paths
    #[arg(long)]
    top_k: Option<usize>,
    /// Two-stage: residents per layer added by frequency
    #[arg(long)]
    supplement_k: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct CostFlags {
    /// May be "inf" for a GPU-only configuration
    #[arg(long)]
    latency_cpu_ms: Option<f64>,
    #[arg(long)]
    latency_gpu_ms: Option<f64>,
    #[arg(long)]
    expert_bytes: Option<f64>,
    #[arg(long)]
    pcie_bw: Option<f64>,
    #[arg(long)]
    activation_return_ms: Option<f64>,
    #[arg(long)]
    cache_capacity: Option<usize>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Plan file; without it nothing is resident
    #[arg(long)]
    plan: Option<PathBuf>,
    #[command(flatten)]
    cost: CostFlags,
    /// text, csv or plotdata
    #[arg(long)]
    format: Option<String>,
    /// Write the rendered report here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    /// Save the full result as JSON for `report`
    #[arg(long)]
    json_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Write the CSV here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    budgets: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    lengths: Option<Vec<usize>>,
    #[arg(long)]
    eval_tokens: Option<usize>,
    #[arg(long)]
    decode_tokens: Option<usize>,
    /// Two-stage: residents per layer taken from hot paths
    #[arg(long)]
    stage1_k: Option<usize>,
    #[command(flatten)]
    gen: GenFlags,
    #[command(flatten)]
    cost: CostFlags,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// JSON results written by `simulate --json-out`
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    format: Option<String>,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_numerical() {
            EXIT_NUMERICAL
        } else {
            match e {
                Error::Io(_) | Error::Parse(_) | Error::Shape(_) | Error::Input(_) => EXIT_IO,
                _ => EXIT_USAGE,
            }
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Attaches the offending path to an I/O error.
pub(crate) fn io_error(path: &Path, e: io::Error) -> Error {
    Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn with_path<T>(path: &Path, r: moek::Result<T>) -> moek::Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => io_error(path, io),
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> CliResult<T> {
    Ok(s.parse()?)
}

fn write_output(path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| io_error(p, e))?,
        None => io::stdout()
            .write_all(text.as_bytes())
            .map_err(Error::Io)?,
    }
    Ok(())
}

impl GenFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        let g = &mut cfg.gen;
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { g.$field = v; })*
            };
        }
        set!(layers => layers, experts => experts_per_layer, top_k => top_k,
             prefill => n_prefill_tokens, decode => n_decode_tokens, sequences => sequences,
             hot_path_prob => hot_path_prob, zipf_s => zipf_s, stream => stream);
    }
}

impl CostFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        let c = &mut cfg.cost;
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { c.$field = v; })*
            };
        }
        set!(latency_cpu_ms => latency_cpu_ms, latency_gpu_ms => latency_gpu_ms,
             expert_bytes => expert_bytes, pcie_bw => pcie_bw_bytes_per_ms,
             activation_return_ms => activation_return_ms, cache_capacity => cache_capacity);
    }
}

/// First output line of every run.
#[derive(Serialize)]
struct Echo<'a> {
    command: &'a str,
    jobs: usize,
    paths: toml::Table,
    config: &'a RunConfig,
}

fn echo(command: &str, jobs: usize, paths: &[(&str, Option<&Path>)], cfg: &RunConfig) -> CliResult<()> {
    let mut table = toml::Table::new();
    for (k, p) in paths {
        if let Some(p) = p {
            table.insert((*k).into(), p.display().to_string().into());
        }
    }
    let echo = Echo {
        command,
        jobs,
        paths: table,
        config: cfg,
    };
    let value = toml::Value::try_from(&echo).map_err(|e| Error::Config(e.to_string()))?;
    println!("# config {value}");
    Ok(())
}

fn cmd_quantize(a: &QuantizeArgs, cfg: &mut RunConfig, jobs: usize) -> CliResult<()> {
    if let Some(b) = a.bits {
        cfg.quant.bits = b;
    }
    if a.symmetric {
        cfg.quant.symmetric = true;
    }
    if let Some(g) = &a.granularity {
        cfg.quant.granularity = parse::<Granularity>(g)?;
    }
    if let Some(n) = a.grid_steps {
        cfg.quant.grid_steps = n;
    }
    if let Some(o) = &a.ordering {
        cfg.quant.ordering = parse::<OrderingStrategy>(o)?;
    }
    let pack = a.pack.as_deref().map(parse::<PackTarget>).transpose()?;
    cfg.validate()?;
    echo(
        "quantize",
        jobs,
        &[
            ("weights", Some(&a.weights)),
            ("calib", Some(&a.calib)),
            ("out_dir", Some(&a.out_dir)),
        ],
        cfg,
    )?;

    let w = with_path(&a.weights, read_matrix_file(&a.weights))?;
    let x = with_path(&a.calib, read_matrix_file(&a.calib))?;
    let q = &cfg.quant;
    let result = quantize_layer(&w, &x, &q.quant_config(), q.grid_steps, q.ordering)?;
    for warning in &result.warnings {
        eprintln!("warning: {warning}");
    }

    fs::create_dir_all(&a.out_dir).map_err(|e| io_error(&a.out_dir, e))?;
    let codes = a.out_dir.join("codes.bin");
    with_path(&codes, write_matrix_file(&codes, &result.weights.codes_matrix(), Dtype::F32))?;
    let record = a.out_dir.join("layer.toml");
    fs::write(&record, result.to_toml()?).map_err(|e| io_error(&record, e))?;
    if let Some(target) = pack {
        let packed = precision_pack(&result.weights, target);
        let name = match target {
            PackTarget::CpuFp => "expert.cpu_fp.bin",
            PackTarget::GpuInt => "expert.gpu_int.bin",
        };
        let path = a.out_dir.join(name);
        fs::write(&path, packed.bytes()).map_err(|e| io_error(&path, e))?;
        println!("packed {} bytes to {}", packed.byte_size(), path.display());
    }
    println!(
        "output_mse={:e} rtn_baseline_mse={:e} exponent={}",
        result.output_mse, result.rtn_baseline_mse, result.smoothing.exponent
    );
    Ok(())
}

fn cmd_gen_trace(a: &GenTraceArgs, cfg: &mut RunConfig, jobs: usize) -> CliResult<()> {
    a.gen.apply(cfg);
    cfg.validate()?;
    echo("gen-trace", jobs, &[("out", Some(&a.out))], cfg)?;
    let trace = generate_trace(&cfg.gen)?;
    with_path(&a.out, write_trace_file(&a.out, &trace))?;
    println!(
        "wrote {} tokens ({} activations) to {}",
        trace.len(),
        trace.activation_count(),
        a.out.display()
    );
    Ok(())
}

fn format_path(stats: &moek::trace::PathStats, path: &[u32]) -> String {
    (0..stats.layers())
        .map(|l| {
            stats
                .layer_slice(path, l)
                .iter()
                .map(u32::to_string)
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect::<Vec<_>>()
        .join(";")
}

fn cmd_stats(a: &StatsArgs, cfg: &mut RunConfig, jobs: usize) -> CliResult<()> {
    cfg.validate()?;
    echo("stats", jobs, &[("trace", Some(&a.trace))], cfg)?;
    let trace = with_path(&a.trace, read_trace_file(&a.trace))?;
    let stats = path_stats(&trace)?;
    let freq = expert_freq(&trace)?;
    let total = stats.total() as f64;
    println!(
        "{} tokens, {} distinct paths, {} layers x {} experts, top-{}",
        trace.len(),
        stats.len(),
        stats.layers(),
        stats.experts_per_layer(),
        stats.top_k()
    );
    println!("count\tshare\tpath");
    for (path, count) in stats.entries().iter().take(a.top) {
        println!("{count}\t{:.4}\t{}", *count as f64 / total, format_path(&stats, path));
    }
    let header: Vec<String> = (0..freq.experts_per_layer()).map(|e| format!("e{e}")).collect();
    println!("layer\t{}", header.join("\t"));
    for (l, counts) in freq.counts().iter().enumerate() {
        let row: Vec<String> = counts.iter().map(u64::to_string).collect();
        println!("{l}\t{}", row.join("\t"));
    }
    Ok(())
}

fn cmd_plan(a: &PlanArgs, cfg: &mut RunConfig, jobs: usize) -> CliResult<()> {
    if let Some(s) = &a.strategy {
        cfg.plan.strategy = parse::<Strategy>(s)?;
    }
    if a.budget.is_some() {
        cfg.plan.budget = a.budget;
    }
    if let Some(k) = a.top_k {
        cfg.plan.top_k = k;
    }
    if let Some(k) = a.supplement_k {
        cfg.plan.supplement_k = k;
    }
    cfg.validate()?;
    echo(
        "plan",
        jobs,
        &[("trace", Some(&a.trace)), ("out", Some(&a.out))],
        cfg,
    )?;
    let trace = with_path(&a.trace, read_trace_file(&a.trace))?;
    let stats = path_stats(&trace)?;
    let freq = expert_freq(&trace)?;
    let p = &cfg.plan;
    let plan = match (p.strategy, p.budget) {
        (Strategy::TwoStage, None) => plan_two_stage(&stats, &freq, p.top_k, p.supplement_k)?,
        (s, Some(b)) => plan_with_budget(s, &stats, &freq, b, p.top_k)?,
        (s, None) => {
            return Err(Error::Config(format!("strategy {s} needs --budget")).into());
        }
    };
    with_path(&a.out, plan.write_file(&a.out))?;
    let report = evaluate_plan(&plan, &trace)?;
    let per_layer = plan.residents_per_layer();
    println!(
        "{} plan: {} residents (budget {}), {}..{} per layer",
        plan.strategy(),
        plan.total_residents(),
        plan.budget(),
        per_layer.iter().min().unwrap_or(&0),
        per_layer.iter().max().unwrap_or(&0)
    );
    println!(
        "hit rate on this trace: mean {:.4} std {:.4} gap {:.4}",
        report.mean, report.std, report.gap
    );
    Ok(())
}

fn cmd_simulate(a: &SimulateArgs, cfg: &mut RunConfig, jobs: usize) -> CliResult<()> {
    a.cost.apply(cfg);
    if let Some(f) = &a.format {
        cfg.output.format = f.clone();
    }
    cfg.validate()?;
    echo(
        "simulate",
        jobs,
        &[
            ("trace", Some(&a.trace)),
            ("plan", a.plan.as_deref()),
            ("out", a.out.as_deref()),
            ("json_out", a.json_out.as_deref()),
        ],
        cfg,
    )?;
    let cost = cfg.cost.cost_model();
    for w in cost.warnings() {
        eprintln!("warning: {w}");
    }
    let trace = with_path(&a.trace, read_trace_file(&a.trace))?;
    let plan = match &a.plan {
        Some(p) => with_path(p, PlacementPlan::read_file(p))?,
        None => PlacementPlan::empty(trace.layers(), trace.experts_per_layer()),
    };
    let report = simulate(&trace, &plan, &cost, cfg.cost.cache_capacity)?;
    if let Some(p) = &a.json_out {
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(p, json).map_err(|e| io_error(p, e))?;
    }
    write_output(a.out.as_deref(), &render_report(&report, cfg.report_format()?))
}

fn cmd_sweep(a: &SweepArgs, cfg: &mut RunConfig, jobs: usize) -> CliResult<()> {
    a.gen.apply(cfg);
    a.cost.apply(cfg);
    if let Some(s) = &a.strategies {
        cfg.sweep.strategies = s.iter().map(|s| parse::<Strategy>(s)).collect::<CliResult<_>>()?;
    }
    if let Some(b) = &a.budgets {
        cfg.sweep.budgets = b.clone();
    }
    if let Some(l) = &a.lengths {
        cfg.sweep.input_lengths = l.clone();
    }
    if let Some(n) = a.eval_tokens {
        cfg.sweep.eval_tokens = n;
    }
    if let Some(n) = a.decode_tokens {
        cfg.sweep.decode_tokens = n;
    }
    if let Some(k) = a.stage1_k {
        cfg.plan.top_k = k;
    }
    cfg.validate()?;
    echo("sweep", jobs, &[("out", a.out.as_deref())], cfg)?;
    let rows = run_sweep(&cfg.sweep_config(), jobs)?;
    write_output(a.out.as_deref(), &sweep_csv(&rows))?;
    if let Some(p) = &a.out {
        println!("wrote {} rows to {}", rows.len(), p.display());
    }
    Ok(())
}

fn cmd_report(a: &ReportArgs, cfg: &mut RunConfig, jobs: usize) -> CliResult<()> {
    if let Some(f) = &a.format {
        cfg.output.format = f.clone();
    }
    cfg.validate()?;
    echo("report", jobs, &[], cfg)?;
    let mut reports = Vec::with_capacity(a.inputs.len());
    for p in &a.inputs {
        let text = fs::read_to_string(p).map_err(|e| io_error(p, e))?;
        let r: SimReport = serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("{}: {e}", p.display())))?;
        reports.push(r);
    }
    match cfg.report_format()? {
        ReportFormat::PlotData => {
            let refs: Vec<&SimReport> = reports.iter().collect();
            println!("{}", render_plotdata(&refs));
        }
        f => {
            for r in &reports {
                print!("{}", render_report(r, f));
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.gen.seed = seed;
    }
    if cli.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()).into());
    }
    let jobs = cli.jobs;
    match &cli.command {
        Command::Quantize(a) => cmd_quantize(a, &mut cfg, jobs),
        Command::GenTrace(a) => cmd_gen_trace(a, &mut cfg, jobs),
        Command::Stats(a) => cmd_stats(a, &mut cfg, jobs),
        Command::Plan(a) => cmd_plan(a, &mut cfg, jobs),
        Command::Simulate(a) => cmd_simulate(a, &mut cfg, jobs),
        Command::Sweep(a) => cmd_sweep(a, &mut cfg, jobs),
        Command::Report(a) => cmd_report(a, &mut cfg, jobs),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
