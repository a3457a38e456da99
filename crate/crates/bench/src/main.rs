//! `bench`: command-line front end for the posterior-sampling benchmark.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cdps_bench::config::{BenchConfig, Method};
use cdps_bench::report::{emit_results, write_json};
use cdps_bench::runner::{oracle_row, run_all, score_diagnostics};
use cdps_bench::BenchError;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bench", version, about = "Gaussian-mixture posterior sampling benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every method over the configured grid and write results.csv and summary.json.
    Run(RunArgs),
    /// Exact-posterior sanity run: null-floor and prior SW per matrix.
    Oracle(CommonArgs),
    /// Measurement-residual trajectories for each method.
    Trace(TraceArgs),
    /// Score cosine/MSE along unconditional reverse trajectories.
    Diagnostics(DiagnosticsArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON file mirroring the configuration fields; omitted fields use defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated subset of cdps,dps,score_sde,ilvr.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    /// Add d = 800 to the dimension grid.
    #[arg(long)]
    full_grid: bool,
    /// Write per-step residual and CG traces for the first matrix of each setting.
    #[arg(long)]
    trace: bool,
    /// Reuse one measurement chain for every C-DPS sample of a matrix.
    #[arg(long)]
    shared_y_chain: bool,
    #[arg(long)]
    cg_tol: Option<f64>,
    #[arg(long)]
    cg_max_iter: Option<usize>,
    /// Write zero seconds so reruns are byte-identical.
    #[arg(long)]
    no_timing: bool,
    /// Write first-two-coordinate scatter files for the first matrix.
    #[arg(long)]
    scatter: bool,
}

#[derive(Args)]
struct TraceArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    /// Chains traced per setting.
    #[arg(long, default_value_t = 100)]
    chains: usize,
}

#[derive(Args)]
struct DiagnosticsArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value_t = 100)]
    chains: usize,
}

fn load(common: &CommonArgs) -> Result<BenchConfig, BenchError> {
    let mut cfg = match &common.config {
        Some(path) => BenchConfig::from_json_file(path)?,
        None => BenchConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if common.workers.is_some() {
        cfg.workers = common.workers;
    }
    Ok(cfg)
}

fn init_workers(cfg: &BenchConfig) -> Result<(), BenchError> {
    if let Some(n) = cfg.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| BenchError::Config(e.to_string()))?;
    }
    Ok(())
}

fn write_rows<T: serde::Serialize>(rows: &[T], path: &Path) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| BenchError::csv(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| BenchError::csv(path, e))?;
    }
    w.flush().map_err(|e| BenchError::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), BenchError> {
    std::fs::create_dir_all(path).map_err(|e| BenchError::io(path, e))
}

fn run(args: RunArgs) -> Result<(), BenchError> {
    let mut cfg = load(&args.common)?;
    if let Some(methods) = args.methods {
        cfg.methods = methods;
    }
    if args.full_grid && !cfg.dims.contains(&800) {
        cfg.dims.push(800);
    }
    cfg.shared_y_chain |= args.shared_y_chain;
    cfg.scatter |= args.scatter;
    if let Some(tol) = args.cg_tol {
        cfg.cg_tol = tol;
    }
    if args.cg_max_iter.is_some() {
        cfg.cg_max_iter = args.cg_max_iter;
    }
    if args.no_timing {
        cfg.record_timing = false;
    }
    cfg.validate()?;
    init_workers(&cfg)?;
    let result = run_all(&cfg, args.trace, |line| eprintln!("{line}"))?;
    emit_results(&result, cfg.num_steps, &args.common.out)?;
    write_json(&cfg, &args.common.out.join("config.json"))
}

fn oracle(args: CommonArgs) -> Result<(), BenchError> {
    let cfg = load(&args)?;
    cfg.validate()?;
    init_workers(&cfg)?;
    let mut rows = Vec::new();
    for (d, m, sigma) in cfg.grid() {
        for matrix in 0..cfg.matrices_per_config {
            let row = oracle_row(&cfg, d, m, sigma, matrix)?;
            eprintln!(
                "d={d} m={m} sigma={sigma} matrix={matrix} null={:.4} prior={:.4}",
                row.sw_null, row.sw_prior
            );
            rows.push(row);
        }
    }
    create_dir(&args.out)?;
    write_rows(&rows, &args.out.join("oracle.csv"))
}

fn trace(args: TraceArgs) -> Result<(), BenchError> {
    let mut cfg = load(&args.common)?;
    if let Some(methods) = args.methods {
        cfg.methods = methods;
    }
    cfg.matrices_per_config = 1;
    cfg.samples_per_run = args.chains;
    cfg.trace_chains = args.chains;
    cfg.record_timing = false;
    cfg.validate()?;
    init_workers(&cfg)?;
    let result = run_all(&cfg, true, |line| eprintln!("{line}"))?;
    emit_results(&result, cfg.num_steps, &args.common.out)
}

fn diagnostics(args: DiagnosticsArgs) -> Result<(), BenchError> {
    let cfg = load(&args.common)?;
    cfg.validate()?;
    init_workers(&cfg)?;
    let mut rows = Vec::new();
    for &d in &cfg.dims {
        rows.extend(score_diagnostics(&cfg, d, args.chains)?);
    }
    create_dir(&args.common.out)?;
    write_rows(&rows, &args.common.out.join("diagnostics.csv"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(a) => run(a),
        Command::Oracle(a) => oracle(a),
        Command::Trace(a) => trace(a),
        Command::Diagnostics(a) => diagnostics(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
