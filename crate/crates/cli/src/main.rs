use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use qukf_core::config::{ConfigError, EstimatorKind, ScenarioConfig};
use qukf_core::perf::{self, BenchReport};
use qukf_core::simulation::{compute_metrics, run_scenario, SimulationError};
use qukf_core::telemetry::{self, comparison_table, MetricsDocument, TelemetryError, TelemetryFormat};

mod exit {
    pub const USAGE: u8 = 64;
    pub const PARSE: u8 = 65;
    pub const OTHER: u8 = 1;
    pub const DIVERGENCE: u8 = 70;
    pub const IO: u8 = 74;
    pub const VALIDATION: u8 = 78;
}

#[derive(Parser)]
#[command(name = "qukf", version, about = "Closed-loop runs, filter comparisons and benchmarks for the quaternion UKF")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write telemetry plus a metrics document.
    Run(ScenarioArgs),
    /// Run QUKF and EKF on the same measurements and print an RMSE table.
    Compare(ScenarioArgs),
    /// Time filter updates and sweep padded state sizes.
    Bench(BenchArgs),
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario file, or `default` for the built-in scenario.
    #[arg(long, default_value = "default")]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Scenario length in seconds.
    #[arg(long, allow_hyphen_values = true)]
    duration: Option<f64>,
    /// Output directory.
    #[arg(long, default_value = "qukf-out")]
    out: PathBuf,
    #[arg(long, default_value = "csv")]
    format: TelemetryFormat,
    /// Comma-separated subset of qukf,ekf.
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<EstimatorKind>>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value = "default")]
    config: PathBuf,
    /// Timed updates at the nominal state size.
    #[arg(long, default_value_t = 10_000)]
    iterations: usize,
    /// Timed updates per padded state size.
    #[arg(long, default_value_t = 50)]
    sweep_iterations: usize,
    /// Optional directory for a JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(ConfigError::Parse { .. }) => exit::PARSE,
            CliError::Config(ConfigError::Validation(_)) => exit::VALIDATION,
            CliError::Config(ConfigError::Io { .. }) | CliError::Io { .. } => exit::IO,
            CliError::Telemetry(TelemetryError::Io { .. }) => exit::IO,
            CliError::Simulation(SimulationError::DivergenceDetected { .. }) => exit::DIVERGENCE,
            _ => exit::OTHER,
        }
    }
}

fn load_scenario(args: &ScenarioArgs) -> Result<ScenarioConfig, CliError> {
    let mut cfg = ScenarioConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.run.seed = seed;
    }
    if let Some(d) = args.duration {
        cfg.run.duration = d;
    }
    if let Some(e) = &args.estimators {
        cfg.run.estimators = e.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn run(args: &ScenarioArgs, compare: bool) -> Result<(), CliError> {
    let mut cfg = load_scenario(args)?;
    if compare {
        cfg.run.estimators = vec![EstimatorKind::Qukf, EstimatorKind::Ekf];
    }
    let output = run_scenario(&cfg)?;
    let report = compute_metrics(&output.records, cfg.run.metric_window_start);
    let doc = MetricsDocument::new(&cfg, report);

    create_dir(&args.out)?;
    let telemetry_path = args.out.join(format!("telemetry.{}", args.format.extension()));
    telemetry::write_telemetry(&output.records, &telemetry_path, args.format, Some(&doc.config_digest))?;
    let metrics_path = args.out.join("metrics.json");
    doc.write(&metrics_path)?;

    if compare {
        print!("{}", comparison_table(&doc.metrics));
    }
    for (name, ms) in [("qukf", output.runtime.qukf_mean_ms), ("ekf", output.runtime.ekf_mean_ms)] {
        if let Some(ms) = ms {
            println!("{name} mean update time: {ms:.4} ms");
        }
    }
    println!("telemetry: {}", telemetry_path.display());
    println!("metrics: {}", metrics_path.display());
    Ok(())
}

fn bench(args: &BenchArgs) -> Result<(), CliError> {
    let cfg = ScenarioConfig::load(&args.config)?;
    let inputs = perf::record_inputs(&cfg, 1000)?;
    let latency = perf::qukf_latency(&cfg, &inputs, args.iterations.max(1), 0)?;
    println!(
        "qukf_step over {} updates: mean {:.4} ms, p99 {:.4} ms, max {:.4} ms",
        latency.iterations, latency.mean_ms, latency.p99_ms, latency.max_ms
    );
    let sweep = perf::scaling_sweep(&cfg, &inputs, &perf::DEFAULT_PADDINGS, args.sweep_iterations.max(1))?;
    println!("{:>9} {:>12}", "state dim", "mean ms");
    for p in &sweep {
        println!("{:>9} {:>12.4}", p.dimension, p.mean_ms);
    }
    let fit = perf::fit_cubic(&sweep);
    println!(
        "fit t = {:.4} + {:.3e} N^3 ms: R^2 = {:.4} (log-log slope {:.2})",
        fit.intercept_ms, fit.cubic_ms, fit.r_squared, fit.loglog_slope
    );
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        let report = BenchReport { version: telemetry::CODE_VERSION.to_string(), latency, sweep, fit };
        let path = dir.join("bench.json");
        let text = serde_json::to_string_pretty(&report).expect("bench report serializes");
        std::fs::write(&path, text + "\n").map_err(|source| CliError::Io { path: path.clone(), source })?;
        println!("report: {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(exit::USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Run(a) => run(a, false),
        Command::Compare(a) => run(a, true),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
