// SPDX-License-Identifier: Apache-2.0

//! `vcgra` command line.
//!
//! Exit codes: 0 success, 1 I/O error, 2 usage error, 3 configuration
//! error, 4 workload error, 5 internal error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vcgra::catalog::{self, CatalogError};
use vcgra::config::{ConfigError, RunConfig};
use vcgra::experiment::{self, ExperimentError, Generator};
use vcgra::report::RunReport;
use vcgra::workload_file::{self, WorkloadFileError};
use vcgra_core::engine::SimError;
use vcgra_core::kernels::KernelError;
use vcgra_core::metrics::MetricsError;
use vcgra_core::{KernelCatalog, SchedulingMode, Workload};

#[derive(Parser)]
#[command(name = "vcgra", version, about = "Discrete-event simulator for a region-virtualized multi-tenant CGRA")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when absent.
    #[arg(long, global = true, env = "VCGRA_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a workload file.
    Gen(GenArgs),
    /// Simulate one workload under one mode.
    Run(RunArgs),
    /// Simulate one workload under several modes.
    Compare(CompareArgs),
    /// Compare modes over many generated workloads.
    Sweep(SweepArgs),
    /// Print a saved run report.
    Report(ReportArgs),
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct GeneratorChoice {
    /// Uniform random mix from the catalog.
    #[arg(long)]
    random: bool,
    /// Fragmentation-intensive workload evolved by a genetic algorithm.
    #[arg(long)]
    ga: bool,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    generator: GeneratorChoice,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of jobs (overrides the configuration).
    #[arg(long)]
    jobs: Option<usize>,
    /// Output file; stdout when absent.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Overrides {
    /// Blocking test factor for fragmentation detection.
    #[arg(long)]
    alpha: Option<f64>,
    /// Progress threshold used by a bare `stateless` mode.
    #[arg(long)]
    stateless_threshold: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WorkloadSource {
    /// Workload file; otherwise a random workload is generated.
    #[arg(long)]
    workload: Option<PathBuf>,
    /// Seed for the generated workload (default: first configured seed).
    #[arg(long, conflicts_with = "workload")]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    source: WorkloadSource,
    /// monolithic, tiled, stateless, stateless-F or stateful.
    #[arg(long)]
    mode: Option<String>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    source: WorkloadSource,
    /// Comma-separated modes.
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<String>>,
    #[arg(long)]
    baseline: Option<String>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct SweepArgs {
    /// Seeds: `A..B` (exclusive), `A..=B`, or a comma-separated list.
    #[arg(long)]
    seeds: Option<String>,
    /// Shorthand for `--seeds 0..N`.
    #[arg(long, conflicts_with = "seeds")]
    n_seeds: Option<u64>,
    #[arg(long, value_enum, default_value = "random")]
    generator: GeneratorArg,
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<String>>,
    #[arg(long)]
    baseline: Option<String>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum GeneratorArg {
    Random,
    Ga,
}

#[derive(Args)]
struct ReportArgs {
    /// A `report.json` written by `run` or `compare`.
    path: PathBuf,
    #[arg(long, value_enum, default_value = "table")]
    format: ReportFormat,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ReportFormat {
    Table,
    Json,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Workload(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            Self::Io(_) => 1,
            Self::Usage(_) => 2,
            Self::Config(_) => 3,
            Self::Workload(_) => 4,
            Self::Internal(_) => 5,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Self::Io(e.to_string()),
            _ => Self::Config(e.to_string()),
        }
    }
}

impl From<CatalogError> for CliError {
    fn from(e: CatalogError) -> Self {
        match e {
            CatalogError::Io { .. } => Self::Io(e.to_string()),
            _ => Self::Config(e.to_string()),
        }
    }
}

impl From<WorkloadFileError> for CliError {
    fn from(e: WorkloadFileError) -> Self {
        match e {
            WorkloadFileError::Io { .. } => Self::Io(e.to_string()),
            _ => Self::Workload(e.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        let msg = e.to_string();
        match e {
            ExperimentError::Usage(_) => Self::Usage(msg),
            ExperimentError::Workload(_) => Self::Config(msg),
            ExperimentError::Sim(SimError::InvalidConfig(_)) => Self::Config(msg),
            ExperimentError::Sim(SimError::DuplicateKernel(_) | SimError::Kernel(KernelError::InvalidSpec { .. })) => {
                Self::Workload(msg)
            }
            ExperimentError::Metrics(MetricsError::EmptyWorkload) => {
                Self::Workload(format!("{msg} (every job was rejected)"))
            }
            ExperimentError::Sim(_) | ExperimentError::Metrics(_) => Self::Internal(msg),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::Usage(format!("cannot parse seeds `{s}`"));
    let num = |t: &str| t.trim().parse::<u64>().map_err(|_| bad());
    let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..=") {
        (num(a)?..=num(b)?).collect()
    } else if let Some((a, b)) = s.split_once("..") {
        (num(a)?..num(b)?).collect()
    } else {
        s.split(',').map(num).collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        return Err(CliError::Usage("no seeds selected".into()));
    }
    Ok(seeds)
}

struct Context {
    cfg: RunConfig,
    catalog: KernelCatalog,
}

impl Context {
    fn load(path: Option<&Path>, overrides: Option<&Overrides>) -> Result<Self, CliError> {
        let mut cfg = RunConfig::load(path)?;
        if let Some(o) = overrides {
            if let Some(a) = o.alpha {
                cfg.scheduler.alpha = a;
            }
            if let Some(f) = o.stateless_threshold {
                cfg.scheduler.stateless_threshold = f;
            }
            if let Some(out) = &o.out {
                cfg.output_dir.clone_from(out);
            }
        }
        cfg.validate()?;
        let catalog = catalog::load(cfg.catalog.as_deref())?;
        Ok(Self { cfg, catalog })
    }

    fn workload(&self, src: &WorkloadSource) -> Result<Workload, CliError> {
        match &src.workload {
            Some(p) => Ok(workload_file::load(p)?),
            None => {
                let seed = src.seed.or(self.cfg.seeds.first().copied()).unwrap_or(0);
                Ok(experiment::generate(&self.cfg, &self.catalog, Generator::Random, seed)?)
            }
        }
    }

    fn modes(
        &self,
        modes: &Option<Vec<String>>,
        baseline: &Option<String>,
    ) -> Result<(Vec<SchedulingMode>, SchedulingMode), CliError> {
        let labels = modes.as_ref().unwrap_or(&self.cfg.modes);
        let modes: Vec<SchedulingMode> = labels
            .iter()
            .map(|m| self.cfg.resolve_mode(m).map_err(|e| CliError::Usage(e.to_string())))
            .collect::<Result<_, _>>()?;
        let baseline = self
            .cfg
            .resolve_mode(baseline.as_deref().unwrap_or(&self.cfg.baseline))
            .map_err(|e| CliError::Usage(e.to_string()))?;
        Ok((modes, baseline))
    }

    /// Writes `report.json`, `kernels.csv` and `trace.csv` under `dir`.
    fn write_run(&self, dir: &Path, workload: &Workload, run: &experiment::RunResult) -> Result<RunReport, CliError> {
        let report = RunReport::new(&self.cfg.hash(), run.mode, workload, &run.outcome, run.metrics.clone());
        write_file(&dir.join("report.json"), &report.to_json())?;
        write_file(&dir.join("kernels.csv"), &report.kernels_csv(&run.outcome))?;
        write_file(&dir.join("trace.csv"), &report.trace_csv(&run.outcome.trace))?;
        Ok(report)
    }
}

fn gen(config: Option<&Path>, args: &GenArgs) -> Result<(), CliError> {
    let mut ctx = Context::load(config, None)?;
    if let Some(n) = args.jobs {
        ctx.cfg.workload.n_jobs = n;
        ctx.cfg.validate()?;
    }
    let generator = if args.generator.ga { Generator::Ga } else { Generator::Random };
    let w = experiment::generate(&ctx.cfg, &ctx.catalog, generator, args.seed)?;
    let text = workload_file::to_string(&w)?;
    match &args.out {
        Some(p) => write_file(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(config: Option<&Path>, args: &RunArgs) -> Result<(), CliError> {
    let mut ctx = Context::load(config, Some(&args.overrides))?;
    if let Some(m) = &args.mode {
        ctx.cfg.scheduler.mode.clone_from(m);
    }
    let mode = ctx.cfg.mode().map_err(|e| CliError::Usage(e.to_string()))?;
    let w = ctx.workload(&args.source)?;
    let result = experiment::run(&ctx.cfg, mode, &w)?;
    let report = ctx.write_run(&ctx.cfg.output_dir, &w, &result)?;
    print!("{}", report.table());
    Ok(())
}

fn compare(config: Option<&Path>, args: &CompareArgs) -> Result<(), CliError> {
    let ctx = Context::load(config, Some(&args.overrides))?;
    let (modes, baseline) = ctx.modes(&args.modes, &args.baseline)?;
    let w = ctx.workload(&args.source)?;
    let (cmp, runs) = experiment::compare(&ctx.cfg, &w, &modes, baseline)?;
    let out = &ctx.cfg.output_dir;
    for r in &runs {
        ctx.write_run(&out.join(r.mode.label()), &w, r)?;
    }
    let banner = format!("# vcgra-compare v1 config_hash={} seed={}", ctx.cfg.hash(), w.seed);
    write_file(&out.join("comparison.csv"), &cmp.rows_csv(&banner))?;
    write_file(&out.join("migration_groups.csv"), &cmp.groups_csv(&banner))?;
    print!("{}", cmp.table());
    Ok(())
}

fn sweep(config: Option<&Path>, args: &SweepArgs) -> Result<(), CliError> {
    let ctx = Context::load(config, Some(&args.overrides))?;
    let seeds = match (&args.seeds, args.n_seeds) {
        (Some(s), _) => parse_seeds(s)?,
        (None, Some(0)) => return Err(CliError::Usage("--n-seeds must be at least 1".into())),
        (None, Some(n)) => (0..n).collect(),
        (None, None) => ctx.cfg.seeds.clone(),
    };
    let (modes, baseline) = ctx.modes(&args.modes, &args.baseline)?;
    let generator = match args.generator {
        GeneratorArg::Random => Generator::Random,
        GeneratorArg::Ga => Generator::Ga,
    };
    let report = experiment::sweep(&ctx.cfg, &ctx.catalog, &seeds, generator, &modes, baseline)?;
    let out = &ctx.cfg.output_dir;
    write_file(&out.join("sweep.json"), &report.to_json())?;
    for (name, text) in report.csv_files() {
        write_file(&out.join(name), &text)?;
    }
    print!("{}", report.table());
    Ok(())
}

fn report(args: &ReportArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.path).map_err(|e| io_err(&args.path, e))?;
    let r = RunReport::from_json(&text).map_err(|e| CliError::Workload(format!("{}: {e}", args.path.display())))?;
    match args.format {
        ReportFormat::Table => print!("{}", r.table()),
        ReportFormat::Json => print!("{}", r.to_json()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let config = cli.config.as_deref();
    let result = match &cli.command {
        Command::Gen(a) => gen(config, a),
        Command::Run(a) => run(config, a),
        Command::Compare(a) => compare(config, a),
        Command::Sweep(a) => sweep(config, a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
