//! Experiment configuration, orchestration and result files.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{
    dirichlet_indices, dominant_indices, generate_synthetic, heterogeneity_stats, load_idx,
    train_test_split, train_test_split_lenient, Dataset, HeterogeneityStats, PartitionSpec,
    SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::federation::{evaluate, run_round, ClientState, RoundReport, ServerState, StrategyConfig, StrategyKind};
use crate::gradcheck::{check_model_gradients, GradcheckOptions, GradcheckReport};
use crate::seed::mix;
use crate::tensor::Tensor;
use crate::vit::{init_model, ModelWeights, ViTConfig};

/// Where samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Idx { images: PathBuf, labels: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub num_clients: usize,
    pub alpha: f64,
    pub min_per_client: usize,
    /// When set, client 0 holds this stratified share of the pool and the
    /// Dirichlet split covers the remaining clients.
    pub dominant_share: Option<f64>,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            num_clients: 10,
            alpha: 0.5,
            min_per_client: 2,
            dominant_share: None,
        }
    }
}

/// Axes of a sweep; empty axes fall back to the base config's value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub strategies: Vec<StrategyKind>,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
}

fn default_rounds() -> usize {
    5
}

fn default_test_fraction() -> f64 {
    0.25
}

fn default_bench_fraction() -> f64 {
    0.2
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ViTConfig,
    #[serde(default)]
    pub data: DataSource,
    #[serde(default)]
    pub partition: PartitionConfig,
    pub strategy: StrategyConfig,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_bench_fraction")]
    pub global_benchmark_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

impl ExperimentConfig {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            model: ViTConfig::default(),
            data: DataSource::default(),
            partition: PartitionConfig::default(),
            strategy: StrategyConfig::new(kind),
            rounds: default_rounds(),
            test_fraction: default_test_fraction(),
            global_benchmark_fraction: default_bench_fraction(),
            seed: 0,
            output_dir: default_output_dir(),
            sweep: None,
        }
    }

    /// Parses a JSON config. Errors name the offending field by its dotted
    /// path, e.g. `strategy.kind`.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner().to_string();
            Error::Config(describe_parse_error(&path, &inner))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.strategy.validate()?;
        if self.partition.num_clients == 0 {
            return Err(Error::Config("partition.num_clients must be >= 1".into()));
        }
        if !(self.partition.alpha > 0.0) || !self.partition.alpha.is_finite() {
            return Err(Error::Config("partition.alpha must be positive".into()));
        }
        if let Some(s) = self.partition.dominant_share {
            if !(s > 0.0 && s < 1.0) || self.partition.num_clients < 2 {
                return Err(Error::Config(
                    "partition.dominant_share must lie in (0, 1) with num_clients >= 2".into(),
                ));
            }
        }
        for (name, f) in [
            ("test_fraction", self.test_fraction),
            ("global_benchmark_fraction", self.global_benchmark_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {f}")));
            }
        }
        if self.strategy.kind == StrategyKind::FedBn && !self.model.use_layernorm {
            return Err(Error::Config(
                "strategy.kind FEDBN needs model.use_layernorm = true".into(),
            ));
        }
        if let DataSource::Synthetic(s) = &self.data {
            let m = &self.model;
            if s.classes != m.classes {
                return Err(Error::Config(format!(
                    "data.synthetic.classes ({}) differs from model.classes ({})",
                    s.classes, m.classes
                )));
            }
            if (s.image_h, s.image_w, 1) != (m.image_h, m.image_w, m.channels_in) {
                return Err(Error::Config(
                    "data.synthetic image size differs from the model input".into(),
                ));
            }
        }
        let shapes: crate::params::ParamSet = self
            .model
            .param_shapes()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(&s)))
            .collect();
        self.strategy
            .validate_against(&shapes)
            .map_err(|e| Error::Config(format!("strategy: {e}")))
    }

    fn data_seed(&self) -> u64 {
        mix(&[self.seed, 1])
    }

    fn model_seed(&self) -> u64 {
        mix(&[self.seed, 5])
    }
}

fn describe_parse_error(path: &str, inner: &str) -> String {
    // serde reports a missing key at its parent; append the key itself
    if let Some(rest) = inner.strip_prefix("missing field `") {
        let field = rest.split('`').next().unwrap_or(rest);
        let full = if path == "." || path.is_empty() {
            field.to_string()
        } else {
            format!("{path}.{field}")
        };
        return format!("missing field `{full}`");
    }
    format!("field `{path}`: {inner}")
}

/// Global pool, benchmark set and per-client splits of an experiment.
#[derive(Debug, Clone)]
pub struct Federation {
    pub clients: Vec<ClientState>,
    pub bench: Dataset,
    /// Per-client data before the train/test split.
    pub parts: Vec<Dataset>,
    pub stats: HeterogeneityStats,
}

fn load_data(config: &ExperimentConfig) -> Result<Dataset> {
    let data = match &config.data {
        DataSource::Synthetic(spec) => generate_synthetic(&SyntheticSpec {
            seed: config.data_seed(),
            ..spec.clone()
        })?,
        DataSource::Idx { images, labels } => load_idx(images, labels)?,
    };
    let m = &config.model;
    if data.classes > m.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but model.classes is {}",
            data.classes, m.classes
        )));
    }
    if let Some(img) = data.images.first() {
        if img.shape() != [m.image_h, m.image_w, m.channels_in] {
            return Err(Error::Config(format!(
                "images are {:?}, model expects [{}, {}, {}]",
                img.shape(),
                m.image_h,
                m.image_w,
                m.channels_in
            )));
        }
    }
    Ok(Dataset {
        classes: m.classes,
        ..data
    })
}

/// Data generation, benchmark carve-out, partitioning and client splits.
pub fn build_federation(config: &ExperimentConfig) -> Result<Federation> {
    let data = load_data(config)?;
    let (pool, bench) = train_test_split(&data, config.global_benchmark_fraction, mix(&[config.seed, 2]))?;
    let spec = PartitionSpec {
        num_clients: config.partition.num_clients,
        alpha: config.partition.alpha,
        seed: mix(&[config.seed, 3]),
        // every client needs a train and a test sample
        min_per_client: config.partition.min_per_client.max(2),
    };
    let part = match config.partition.dominant_share {
        Some(share) => dominant_indices(&pool.labels, pool.classes, share, &spec)?,
        None => dirichlet_indices(&pool.labels, pool.classes, &spec)?,
    };
    let parts: Vec<Dataset> = part.client_indices.iter().map(|idx| pool.subset(idx)).collect();
    let stats = heterogeneity_stats(&parts)?;
    let clients = parts
        .iter()
        .enumerate()
        .map(|(k, d)| {
            let (train, test) = train_test_split_lenient(d, config.test_fraction, mix(&[config.seed, 4, k as u64]))?;
            Ok(ClientState::new(k, train, test))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Federation {
        clients,
        bench,
        parts,
        stats,
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    /// Round 0 is the initial model; round r follows the r-th aggregation.
    pub reports: Vec<RoundReport>,
    pub final_global: ModelWeights,
    pub dispersion: f64,
    pub wall_time_s: f64,
}

/// Runs one experiment on the current rayon pool.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let start = Instant::now();
    let fed = build_federation(config)?;
    let mut clients = fed.clients;
    let model = &config.model;
    let mut server = ServerState {
        global_weights: init_model(model, config.model_seed())?,
        round: 0,
    };
    let t0 = Instant::now();
    let mut initial = evaluate(0, &server.global_weights, &clients, &fed.bench, &config.strategy, model, &[])?;
    initial.wall_time_s = t0.elapsed().as_secs_f64();
    let mut reports = vec![initial];
    for _ in 0..config.rounds {
        let (next, report) = run_round(&server, &mut clients, &fed.bench, &config.strategy, model, config.seed)?;
        server = next;
        reports.push(report);
    }
    Ok(ExperimentOutcome {
        reports,
        final_global: server.global_weights,
        dispersion: fed.stats.dispersion,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Builds a rayon pool with `jobs` threads (at least one).
pub fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

pub const ROUNDS_HEADER: &str =
    "round,client_id,n_train,n_test,local_test_acc,global_bench_acc,mean_loss,strategy,alpha,seed,min_acc,max_acc,spread";

/// Per-client rows plus one `GLOBAL` row per round. Floats use the shortest
/// representation that parses back to the same value.
pub fn rounds_csv(reports: &[RoundReport], strategy: StrategyKind, alpha: f64, seed: u64) -> String {
    let mut out = String::from(ROUNDS_HEADER);
    out.push('\n');
    for r in reports {
        for c in &r.clients {
            let acc = c.local.accuracy;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.round, c.client_id, c.n_train, c.n_test, acc, c.bench.accuracy, c.local.mean_loss,
                strategy, alpha, seed, acc, acc, 0.0
            );
        }
        let n_train: usize = r.clients.iter().map(|c| c.n_train).sum();
        let n_test: usize = r.clients.iter().map(|c| c.n_test).sum();
        let s = &r.local_summary;
        let _ = writeln!(
            out,
            "{},GLOBAL,{},{},{},{},{},{},{},{},{},{},{}",
            r.round, n_train, n_test, s.weighted_mean_acc, r.bench_summary.weighted_mean_acc,
            r.weighted_mean_loss, strategy, alpha, seed, s.min_acc, s.max_acc, s.spread
        );
    }
    out
}

#[derive(Debug, Serialize)]
struct RoundSummary {
    round: usize,
    weighted_local_acc: f64,
    mean_local_acc: f64,
    lowest_local_acc: f64,
    highest_local_acc: f64,
    spread: f64,
    bench_acc: f64,
    weighted_mean_loss: f64,
    wall_time_s: f64,
}

fn round_summaries(reports: &[RoundReport]) -> Vec<RoundSummary> {
    reports
        .iter()
        .map(|r| RoundSummary {
            round: r.round,
            weighted_local_acc: r.local_summary.weighted_mean_acc,
            mean_local_acc: r.local_summary.mean_acc,
            lowest_local_acc: r.local_summary.min_acc,
            highest_local_acc: r.local_summary.max_acc,
            spread: r.local_summary.spread,
            bench_acc: r.bench_summary.weighted_mean_acc,
            weighted_mean_loss: r.weighted_mean_loss,
            wall_time_s: r.wall_time_s,
        })
        .collect()
}

/// Writes `rounds.csv`, `summary.json` and `checkpoint.json` into `dir`.
pub fn write_outputs(dir: &Path, config: &ExperimentConfig, outcome: &ExperimentOutcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let csv = rounds_csv(&outcome.reports, config.strategy.kind, config.partition.alpha, config.seed);
    std::fs::write(dir.join("rounds.csv"), csv)?;
    let last = outcome.reports.last().expect("round 0 is always present");
    let summary = serde_json::json!({
        "config": config,
        "dispersion": outcome.dispersion,
        "final": {
            "round": last.round,
            "weighted_local_acc": last.local_summary.weighted_mean_acc,
            "lowest_local_acc": last.local_summary.min_acc,
            "bench_acc": last.bench_summary.weighted_mean_acc,
        },
        "rounds": round_summaries(&outcome.reports),
        "wall_time_s": outcome.wall_time_s,
    });
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    checkpoint::save(dir.join("checkpoint.json"), &config.model, &outcome.final_global)
}

/// One sweep cell's identifying coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub strategy: StrategyKind,
    pub alpha: f64,
    pub seed: u64,
}

impl Cell {
    pub fn dir_name(&self) -> String {
        format!("{}_a{}_s{}", self.strategy.as_str().to_lowercase(), self.alpha, self.seed)
    }

    /// The base config specialized to this cell. FEDBN cells switch layer
    /// norm on, since the strategy has nothing to keep local otherwise.
    pub fn config(&self, base: &ExperimentConfig, out: &Path) -> ExperimentConfig {
        let mut c = base.clone();
        c.strategy.kind = self.strategy;
        c.partition.alpha = self.alpha;
        c.seed = self.seed;
        c.sweep = None;
        c.output_dir = out.join(self.dir_name());
        if self.strategy == StrategyKind::FedBn {
            c.model.use_layernorm = true;
        }
        c
    }
}

/// Cartesian product strategies × alphas × seeds, in that nesting order.
pub fn sweep_cells(base: &ExperimentConfig, axes: &SweepConfig) -> Vec<Cell> {
    let strategies = if axes.strategies.is_empty() {
        vec![base.strategy.kind]
    } else {
        axes.strategies.clone()
    };
    let alphas = if axes.alphas.is_empty() {
        vec![base.partition.alpha]
    } else {
        axes.alphas.clone()
    };
    let seeds = if axes.seeds.is_empty() {
        vec![base.seed]
    } else {
        axes.seeds.clone()
    };
    let mut cells = Vec::new();
    for &strategy in &strategies {
        for &alpha in &alphas {
            for &seed in &seeds {
                cells.push(Cell { strategy, alpha, seed });
            }
        }
    }
    cells
}

pub const SWEEP_HEADER: &str =
    "strategy,alpha,seed,round,weighted_local_acc,mean_local_acc,min_acc,max_acc,spread,bench_acc,mean_loss";

#[derive(Debug)]
pub struct SweepOutcome {
    pub cells: Vec<Cell>,
    pub failures: Vec<(Cell, String)>,
}

/// Runs every cell (in parallel on the current pool), each into its own
/// subdirectory of `out`, then writes `sweep_summary.csv` and, when any
/// cell failed, `sweep_failures.csv`.
pub fn run_sweep(base: &ExperimentConfig, axes: &SweepConfig, out: &Path) -> Result<SweepOutcome> {
    let cells = sweep_cells(base, axes);
    let names: BTreeSet<String> = cells.iter().map(Cell::dir_name).collect();
    if names.len() != cells.len() {
        return Err(Error::Config("sweep axes contain duplicates".into()));
    }
    std::fs::create_dir_all(out)?;
    let results: Vec<Result<Vec<RoundReport>>> = cells
        .par_iter()
        .map(|cell| {
            let config = cell.config(base, out);
            let outcome = run_experiment(&config)?;
            write_outputs(&config.output_dir, &config, &outcome)?;
            Ok(outcome.reports)
        })
        .collect();
    let mut summary = String::from(SWEEP_HEADER);
    summary.push('\n');
    let mut failures = Vec::new();
    for (cell, result) in cells.iter().zip(results) {
        match result {
            Ok(reports) => {
                for r in &reports {
                    let s = &r.local_summary;
                    let _ = writeln!(
                        summary,
                        "{},{},{},{},{},{},{},{},{},{},{}",
                        cell.strategy, cell.alpha, cell.seed, r.round, s.weighted_mean_acc, s.mean_acc,
                        s.min_acc, s.max_acc, s.spread, r.bench_summary.weighted_mean_acc, r.weighted_mean_loss
                    );
                }
            }
            Err(e) => failures.push((cell.clone(), e.to_string())),
        }
    }
    std::fs::write(out.join("sweep_summary.csv"), summary)?;
    if !failures.is_empty() {
        let mut w = csv::Writer::from_path(out.join("sweep_failures.csv"))?;
        w.write_record(["strategy", "alpha", "seed", "error"])?;
        for (cell, err) in &failures {
            w.write_record([
                cell.strategy.to_string(),
                cell.alpha.to_string(),
                cell.seed.to_string(),
                err.clone(),
            ])?;
        }
        w.flush()?;
    }
    Ok(SweepOutcome { cells, failures })
}

/// Per-client class counts of the partition, before train/test splitting.
pub fn partition_stats_csv(stats: &HeterogeneityStats) -> String {
    let mut out = String::from("client,class,count,frequency\n");
    for (k, (hist, freq)) in stats.histograms.iter().zip(&stats.frequencies).enumerate() {
        for (c, (&n, &f)) in hist.iter().zip(freq).enumerate() {
            let _ = writeln!(out, "{k},{c},{n},{f}");
        }
    }
    out
}

/// Samples of the gradient-check batch.
pub const GRADCHECK_BATCH: usize = 8;

/// Finite-difference check of the configured model at its initial weights
/// on a random batch of the configured data.
pub fn gradcheck(config: &ExperimentConfig, corrupt: Option<String>) -> Result<GradcheckReport> {
    config.validate()?;
    let data = load_data(config)?;
    let model = init_model(&config.model, config.model_seed())?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[config.seed, 7]));
    let picks = sample(&mut rng, data.len(), GRADCHECK_BATCH.min(data.len())).into_vec();
    let images: Vec<&Tensor> = picks.iter().map(|&i| &data.images[i]).collect();
    let labels: Vec<usize> = picks.iter().map(|&i| data.labels[i]).collect();
    let opts = GradcheckOptions {
        seed: mix(&[config.seed, 8]),
        corrupt,
        ..GradcheckOptions::default()
    };
    check_model_gradients(&model, &images, &labels, &config.model, &opts)
}
