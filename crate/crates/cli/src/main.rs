use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use offload_core::dataset::{self, GenConfig, Range};
use offload_core::eval::{self, Sweep, SweepField};
use offload_core::format::read_scenarios;
use offload_core::mtfnn::{self, infer};
use offload_core::sim::{self, Policy};
use offload_core::solver::{solve_batch, Method, SolutionRow, SolverConfig};
use offload_core::{Dataset, MtfnnArch, MtfnnModel, SimConfig, TrainConfig};

/// Environment variable holding the worker thread count.
const THREADS_ENV: &str = "MECOFF_THREADS";

#[derive(Parser)]
#[command(
    name = "mecoff",
    version,
    about = "Generate, solve, learn and simulate NOMA-uplink task offloading to an edge server",
    after_help = "Worker threads: set MECOFF_THREADS (default: one per logical CPU).\n\
                  Errors are reported as a single JSON line on stderr with a non-zero exit code."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw scenarios, label them with a solver and write a dataset file.
    Gen(GenArgs),
    /// Solve every scenario in a file and write one solution row per line.
    Solve(SolveArgs),
    /// Train the multi-task network on a dataset's training split.
    Train(TrainArgs),
    /// Score a model on a dataset's test split.
    Eval(EvalArgs),
    /// Run a model on every scenario in a file.
    Infer(InferArgs),
    /// Replay offloading policies over a sequence of frames.
    Simulate(SimArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverId {
    Grid,
    Exact,
}

impl From<SolverId> for Method {
    fn from(s: SolverId) -> Method {
        match s {
            SolverId::Grid => Method::Grid,
            SolverId::Exact => Method::Exact,
        }
    }
}

#[derive(Args)]
struct RangeArgs {
    /// Tolerable delay range `lo,hi`, in seconds
    #[arg(long, value_name = "LO,HI", default_value = "0.5,5.0", value_parser = parse_range)]
    theta_range: Range,
    /// Channel power gain range `lo,hi` (sampled log-uniformly), dimensionless
    #[arg(long, value_name = "LO,HI", default_value = "1e-13,1e-9", value_parser = parse_range)]
    gain_range: Range,
}

impl RangeArgs {
    fn apply(&self, ranges: &mut dataset::ParamRanges) {
        ranges.max_delay_s = self.theta_range;
        ranges.channel_gain = self.gain_range;
    }
}

#[derive(Args)]
struct GenArgs {
    /// Number of devices
    #[arg(long, default_value_t = 2)]
    n: usize,
    /// Number of feasible samples to keep
    #[arg(long, default_value_t = 40_000)]
    samples: usize,
    /// Seed for every random stream
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Allocation-ratio granularity of the labeling grid, dimensionless
    #[arg(long, default_value_t = 0.1)]
    omega: f64,
    /// Labeling solver
    #[arg(long, value_enum, default_value = "grid")]
    solver: SolverId,
    /// Add each device's tolerable delay as an extra input feature
    #[arg(long)]
    delay_feature: bool,
    #[command(flatten)]
    ranges: RangeArgs,
    /// Output dataset file (standard output when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SolveArgs {
    /// Scenario file: text lines, JSON lines, or a dataset file
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Solver to run
    #[arg(long, value_enum, default_value = "exact")]
    solver: SolverId,
    /// Allocation-ratio granularity for the grid solver, dimensionless
    #[arg(long, default_value_t = 0.1)]
    omega: f64,
    /// Write 0 instead of the measured solve time, in seconds, so output is reproducible
    #[arg(long)]
    no_timing: bool,
    /// Output file of JSON solution rows (standard output when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset file written by `gen`
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Training epochs
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    /// Mini-batch size, in samples
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Adam learning rate
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    /// Weight of the classification loss
    #[arg(long, default_value_t = 1.0)]
    chi1: f64,
    /// Weight of the regression loss
    #[arg(long, default_value_t = 1.0)]
    chi2: f64,
    /// Seed for weight initialization and batch order
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output model file (standard output when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Model file written by `train`
    #[arg(long)]
    model: PathBuf,
    /// Dataset file; its test split is scored
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Report file, JSON (standard output when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the report as a CSV table here
    #[arg(long, value_name = "FILE")]
    csv: Option<PathBuf>,
    /// Measure per-sample latency, in seconds, and write it to this JSON file
    #[arg(long, value_name = "FILE")]
    timing_out: Option<PathBuf>,
    /// Write a regression-surface CSV sweeping one field of the first test scenario
    #[arg(long, value_name = "FILE", requires = "sweep_field")]
    surface_out: Option<PathBuf>,
    /// Field to sweep: s_bits, c_cycles, f_l_hz, h_sq, alpha or theta_s
    #[arg(long)]
    sweep_field: Option<String>,
    /// Device whose field is swept
    #[arg(long, default_value_t = 0)]
    sweep_device: usize,
    /// Sweep values `start,stop,count`, in the swept field's units
    #[arg(long, value_name = "START,STOP,COUNT", default_value = "3e6,1.5e9,20")]
    sweep_values: String,
}

#[derive(Args)]
struct InferArgs {
    /// Model file written by `train`
    #[arg(long)]
    model: PathBuf,
    /// Scenario file: text lines, JSON lines, or a dataset file
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Write 0 instead of the measured inference time, in seconds
    #[arg(long)]
    no_timing: bool,
    /// Output file of JSON solution rows (standard output when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimArgs {
    /// Number of devices
    #[arg(long, default_value_t = 3)]
    n: usize,
    /// Number of frames
    #[arg(long, default_value_t = 100)]
    frames: usize,
    /// Comma-separated policies: oracle, mtfnn:<model file>, all_local, all_offload_equal
    #[arg(long, default_value = "oracle,all_local,all_offload_equal")]
    policies: String,
    /// Seed for the per-frame scenario draws
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    ranges: RangeArgs,
    /// Write the trace as JSON instead of CSV
    #[arg(long)]
    json: bool,
    /// Output trace file (standard output when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_range(s: &str) -> std::result::Result<Range, String> {
    let (lo, hi) = s.split_once(',').ok_or("expected `lo,hi`")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("{e}"))?;
    Ok(Range::new(lo, hi))
}

fn check_input(path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("input file {} does not exist", path.display());
    }
    Ok(())
}

fn check_output(path: Option<&Path>) -> Result<()> {
    if let Some(p) = path {
        let parent = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        if !parent.is_dir() {
            bail!("output directory {} does not exist", parent.display());
        }
    }
    Ok(())
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => io::stdout().lock().write_all(text.as_bytes()).context("writing standard output"),
    }
}

fn json_lines(rows: &[SolutionRow]) -> Result<String> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

fn gen(a: GenArgs) -> Result<()> {
    check_output(a.out.as_deref())?;
    let mut cfg = GenConfig::new(a.n, a.samples, a.seed);
    cfg.granularity = a.omega;
    cfg.label_method = a.solver.into();
    cfg.delay_feature = a.delay_feature;
    a.ranges.apply(&mut cfg.ranges);
    let ds = dataset::generate(&cfg)?;
    emit(a.out.as_deref(), &ds.to_text()?)
}

fn solve(a: SolveArgs) -> Result<()> {
    check_input(&a.input)?;
    check_output(a.out.as_deref())?;
    let scenarios = read_scenarios(&a.input)?;
    let method: Method = a.solver.into();
    let solutions = solve_batch(method, &scenarios, &SolverConfig::with_granularity(a.omega))?;
    let rows: Vec<SolutionRow> = solutions
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut row = SolutionRow::new(i, method, s.as_ref());
            if a.no_timing {
                row.wall_time_s = 0.0;
            }
            row
        })
        .collect();
    emit(a.out.as_deref(), &json_lines(&rows)?)
}

fn train(a: TrainArgs) -> Result<()> {
    check_input(&a.input)?;
    check_output(a.out.as_deref())?;
    let ds = Dataset::read(&a.input)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        learning_rate: a.lr,
        chi1: a.chi1,
        chi2: a.chi2,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let model = mtfnn::train(&ds, &MtfnnArch::for_scaler(&ds.scaler), &cfg)?;
    emit(a.out.as_deref(), &model.to_text()?)
}

fn sweep_values(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    let [start, stop, count] = parts[..] else {
        bail!("sweep values must be `start,stop,count`, got `{spec}`");
    };
    let (start, stop): (f64, f64) = (start.parse()?, stop.parse()?);
    let count: usize = count.parse()?;
    if count < 2 {
        bail!("sweep needs at least two values");
    }
    Ok((0..count)
        .map(|k| start + (stop - start) * k as f64 / (count - 1) as f64)
        .collect())
}

fn evaluate(a: EvalArgs) -> Result<()> {
    check_input(&a.model)?;
    check_input(&a.input)?;
    for out in [&a.out, &a.csv, &a.timing_out, &a.surface_out] {
        check_output(out.as_deref())?;
    }
    let model = MtfnnModel::load(&a.model)?;
    let ds = Dataset::read(&a.input)?;
    let report = eval::evaluate(&model, &ds)?;
    if let Some(p) = &a.csv {
        emit(Some(p), &report.to_csv())?;
    }
    if let Some(p) = &a.timing_out {
        // timing runs on one thread so the figure is per core
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build()?;
        let latency = pool.install(|| eval::time_methods(&model, &ds))?;
        emit(Some(p), &(serde_json::to_string_pretty(&latency)? + "\n"))?;
    }
    if let Some(p) = &a.surface_out {
        let field: SweepField = a.sweep_field.as_deref().unwrap_or_default().parse()?;
        let sweep = Sweep {
            device: a.sweep_device,
            field,
        };
        let base = &ds.test().next().context("dataset has no test samples")?.scenario;
        let rows = eval::regression_surface(&model, base, sweep, &sweep_values(&a.sweep_values)?, &ds.config.solver_config())?;
        emit(Some(p), &eval::surface_csv(sweep, &rows, base.len()))?;
    }
    emit(a.out.as_deref(), &report.to_text()?)
}

fn run_infer(a: InferArgs) -> Result<()> {
    check_input(&a.model)?;
    check_input(&a.input)?;
    check_output(a.out.as_deref())?;
    let model = MtfnnModel::load(&a.model)?;
    let scenarios = read_scenarios(&a.input)?;
    let rows = scenarios
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let sol = infer(&model, s)?;
            let sol = if a.no_timing { sol.without_timing() } else { sol };
            Ok(SolutionRow::new(i, Method::Mtfnn, Some(&sol)))
        })
        .collect::<offload_core::Result<Vec<_>>>()?;
    emit(a.out.as_deref(), &json_lines(&rows)?)
}

fn simulate(a: SimArgs) -> Result<()> {
    check_output(a.out.as_deref())?;
    let specs = sim::parse_policies(&a.policies)?;
    for s in &specs {
        if let offload_core::PolicySpec::Mtfnn(p) = s {
            check_input(p)?;
        }
    }
    let mut cfg = SimConfig::new(a.frames, a.n, a.seed, specs);
    a.ranges.apply(&mut cfg.ranges);
    let policies = cfg.policies.iter().map(Policy::load).collect::<offload_core::Result<Vec<_>>>()?;
    let trace = sim::run(&cfg, &policies)?;
    let text = if a.json {
        serde_json::to_string_pretty(&trace)? + "\n"
    } else {
        trace.to_csv()
    };
    emit(a.out.as_deref(), &text)
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("{THREADS_ENV} must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::Solve(a) => solve(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => evaluate(a),
        Command::Infer(a) => run_infer(a),
        Command::Simulate(a) => simulate(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<offload_core::Error>().map_or("cli", |c| c.kind());
            let line = serde_json::json!({ "error": kind, "message": format!("{e:#}") });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
