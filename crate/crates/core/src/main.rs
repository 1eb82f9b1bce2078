use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedvit::data::heterogeneity_stats;
use fedvit::experiment::{
    build_federation, gradcheck, partition_stats_csv, run_experiment, run_sweep, thread_pool,
    write_outputs, ExperimentConfig, SweepConfig,
};
use fedvit::federation::StrategyKind;
use fedvit::gradcheck::GradcheckOptions;
use fedvit::Error;

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_BAD_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "fedvit", version, about = "Federated training of a miniature Vision Transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config's output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, env = "FEDVIT_JOBS", default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run(Common),
    /// Run the strategy × alpha × seed grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated strategies, e.g. fedavg,fedmha.
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Compare backpropagated and finite-difference gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        corrupt_grad: Option<String>,
    },
    /// Report per-client class histograms of the partition.
    PartitionStats(Common),
}

enum Failure {
    Config(String),
    Runtime(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf), Failure> {
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    let out = common.out.clone().unwrap_or_else(|| config.output_dir.clone());
    config.output_dir = out.clone();
    Ok((config, out))
}

fn with_pool<T>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T, Failure>
where
    T: Send,
{
    Ok(thread_pool(jobs)?.install(f))
}

fn cmd_run(common: &Common) -> Result<(), Failure> {
    let (config, out) = load(common)?;
    let outcome = with_pool(common.jobs, || run_experiment(&config))??;
    write_outputs(&out, &config, &outcome)?;
    let last = outcome.reports.last().expect("round 0 is always present");
    println!(
        "{} rounds: weighted local acc {:.4}, lowest {:.4}, bench {:.4} ({:.1}s) -> {}",
        config.rounds,
        last.local_summary.weighted_mean_acc,
        last.local_summary.min_acc,
        last.bench_summary.weighted_mean_acc,
        outcome.wall_time_s,
        out.display()
    );
    Ok(())
}

fn cmd_sweep(
    common: &Common,
    strategies: &[String],
    alphas: &[f64],
    seeds: &[u64],
) -> Result<(), Failure> {
    let (config, out) = load(common)?;
    let mut axes = config.sweep.clone().unwrap_or_default();
    if !strategies.is_empty() {
        axes.strategies = strategies
            .iter()
            .map(|s| s.parse::<StrategyKind>())
            .collect::<Result<_, _>>()?;
    }
    if !alphas.is_empty() {
        axes.alphas = alphas.to_vec();
    }
    if !seeds.is_empty() {
        axes.seeds = seeds.to_vec();
    }
    validate_axes(&config, &axes)?;
    let outcome = with_pool(common.jobs, || run_sweep(&config, &axes, &out))??;
    println!(
        "{} cells, {} failed -> {}",
        outcome.cells.len(),
        outcome.failures.len(),
        out.join("sweep_summary.csv").display()
    );
    for (cell, err) in &outcome.failures {
        eprintln!("cell {} failed: {err}", cell.dir_name());
    }
    if outcome.failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("{} sweep cell(s) failed", outcome.failures.len())))
    }
}

fn validate_axes(config: &ExperimentConfig, axes: &SweepConfig) -> Result<(), Failure> {
    if let Some(a) = axes.alphas.iter().find(|a| !(**a > 0.0) || !a.is_finite()) {
        return Err(Failure::Config(format!("sweep alpha {a} must be positive")));
    }
    for cell in fedvit::experiment::sweep_cells(config, axes) {
        cell.config(config, Path::new(".")).validate()?;
    }
    Ok(())
}

fn cmd_gradcheck(common: &Common, corrupt: Option<String>) -> Result<(), Failure> {
    let (config, _) = load(common)?;
    let start = std::time::Instant::now();
    let report = with_pool(common.jobs, || gradcheck(&config, corrupt))??;
    for t in &report.tensors {
        let err = t.worst.as_ref().map_or(0.0, |w| w.rel_err);
        println!(
            "{:<16} checked {:>4} skipped {:>3} over tolerance {:>4} max rel err {:.3e}",
            t.name, t.checked, t.skipped, t.over_tolerance, err
        );
    }
    let max = report.max_rel_err();
    println!(
        "max relative error {max:.3e}, {} coordinate(s) over {:e}, loss {:.6}, round-off scale eps*|L|/h {:.2e} ({:.1}s)",
        report.over_tolerance(),
        GradcheckOptions::default().tolerance,
        report.loss,
        report.roundoff_scale(),
        start.elapsed().as_secs_f64()
    );
    match report.worst() {
        Some(w) if report.over_tolerance() > 0 => Err(Failure::Check(format!(
            "gradient check failed at {}[{}]: analytic {:e}, numeric {:e}, relative error {:.3e}",
            w.name, w.index, w.analytic, w.numeric, w.rel_err
        ))),
        _ => Ok(()),
    }
}

fn cmd_partition_stats(common: &Common) -> Result<(), Failure> {
    let (config, out) = load(common)?;
    let fed = build_federation(&config)?;
    let stats = heterogeneity_stats(&fed.parts)?;
    for (k, (n, hist)) in stats.sizes.iter().zip(&stats.histograms).enumerate() {
        println!("client {k:>3}: {n:>5} samples, classes {hist:?}");
    }
    println!("dispersion {}", stats.dispersion);
    std::fs::create_dir_all(&out).map_err(Error::from)?;
    std::fs::write(out.join("partition_stats.csv"), partition_stats_csv(&stats)).map_err(Error::from)?;
    let summary = serde_json::json!({ "dispersion": stats.dispersion, "sizes": stats.sizes });
    std::fs::write(
        out.join("partition_summary.json"),
        serde_json::to_string_pretty(&summary).map_err(Error::from)?,
    )
    .map_err(Error::from)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(common) => cmd_run(&common),
        Command::Sweep {
            common,
            strategies,
            alphas,
            seeds,
        } => cmd_sweep(&common, &strategies, &alphas, &seeds),
        Command::Gradcheck { common, corrupt_grad } => cmd_gradcheck(&common, corrupt_grad),
        Command::PartitionStats(common) => cmd_partition_stats(&common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_BAD_CONFIG)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(EXIT_CHECK_FAILED)
        }
    }
}
