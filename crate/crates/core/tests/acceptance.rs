//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedvit::data::{
    dirichlet_indices, heterogeneity_stats, load_idx, Dataset, PartitionSpec, IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC,
};
use fedvit::experiment::{build_federation, run_experiment, Cell, DataSource, ExperimentConfig};
use fedvit::federation::{
    aggregate, alignment_penalty, local_train, train_round, ClientUpdate, ServerState,
    StrategyConfig, StrategyKind,
};
use fedvit::vit::{init_model, mhsa_flops, ViTConfig};
use fedvit::Error;

const GRADCHECK_MAX_REL_ERR: f64 = 1e-6;
const GRADCHECK_MAX_SECONDS: f64 = 60.0;
const PROX_SLACK: f64 = 1e-9;
const PROX_MUS: [f64; 5] = [0.0, 0.1, 0.5, 2.0, 10.0];
const HOMOGENEITY_TOL: f64 = 0.05;
const HOMOGENEITY_MIN_SHARE: f64 = 0.95;
const PARTITION_SEEDS: u64 = 20;
const DISPERSION_ALPHAS: [f64; 5] = [0.1, 0.5, 1.0, 10.0, 1000.0];
const TREND_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const TREND_ALPHA: f64 = 0.1;
const TREND_MIN_BEAT_LOCAL: usize = 4;
const TREND_MIN_FAIRER: usize = 3;
const TREND_MAX_SECONDS: f64 = 1800.0;
const WEIGHTED_MIN_WINS: usize = 4;
const DOMINANT_SHARE: f64 = 0.6;
/// Local schedule of the training-trend experiments. The defaults (one
/// epoch of batch 16) leave the model at chance after five rounds.
const TREND_EPOCHS: usize = 10;
const TREND_BATCH: usize = 8;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn gradient_check() -> Outcome {
    let dir = tempfile::tempdir().map_err(fail)?;
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"strategy": {"kind": "FEDAVG"}}"#).map_err(fail)?;
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_fedvit"))
        .args(["gradcheck", "--config", cfg.to_str().unwrap()])
        .output()
        .map_err(fail)?;
    let secs = start.elapsed().as_secs_f64();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let summary = stdout
        .lines()
        .find(|l| l.starts_with("max relative error"))
        .unwrap_or("no summary line")
        .to_string();
    let max: f64 = summary
        .split_whitespace()
        .nth(3)
        .and_then(|v| v.trim_end_matches(',').parse().ok())
        .unwrap_or(f64::INFINITY);
    let detail = format!("{summary}; wall {secs:.1}s; {}", String::from_utf8_lossy(&out.stderr).trim());
    ensure(secs < GRADCHECK_MAX_SECONDS, format!("too slow: {detail}"))?;
    ensure(out.status.success() && max <= GRADCHECK_MAX_REL_ERR, detail.clone())?;
    Ok(detail)
}

fn flops_formula() -> Outcome {
    let oracle = |h: u128, w: u128, c: u128| 3 * h * w * c * c + 2 * h * h * w * w * c;
    ensure(mhsa_flops(4, 4, 8).map_err(fail)? == 7168, "(4,4,8) != 7168")?;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..10 {
        let (h, w, c) = (rng.random_range(1..200u64), rng.random_range(1..200u64), rng.random_range(1..1024u64));
        let got = mhsa_flops(h, w, c).map_err(fail)?;
        ensure(
            u128::from(got) == oracle(h.into(), w.into(), c.into()),
            format!("mismatch at ({h},{w},{c})"),
        )?;
    }
    Ok("(4,4,8) = 7168 and 10 random triples exact".into())
}

fn base_config(kind: StrategyKind) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(kind);
    c.partition.alpha = TREND_ALPHA;
    c
}

fn degenerate_mu() -> Outcome {
    let run = |kind: StrategyKind, mu: f64| -> Result<fedvit::params::ParamSet, String> {
        let mut c = base_config(kind);
        c.strategy.mu = mu;
        c.rounds = 3;
        Ok(run_experiment(&c).map_err(fail)?.final_global)
    };
    let avg = run(StrategyKind::FedAvg, 0.5)?;
    let mha = run(StrategyKind::FedMha, 0.0)?;
    let prox = run(StrategyKind::FedProx, 0.0)?;
    ensure(mha == avg, "FEDMHA(mu=0) differs from FEDAVG")?;
    ensure(prox == avg, "FEDPROX(mu=0) differs from FEDAVG")?;
    let moved = avg != init_model(&ViTConfig::default(), 0).map_err(fail)?;
    ensure(moved, "weights did not change")?;
    Ok("global weights bitwise equal after 3 rounds".into())
}

fn proximal_pull() -> Outcome {
    let config = base_config(StrategyKind::FedMha);
    let fed = build_federation(&config).map_err(fail)?;
    let global = init_model(&config.model, 17).map_err(fail)?;
    let client = &fed.clients[0];
    let mut penalties = Vec::new();
    for mu in PROX_MUS {
        let s = StrategyConfig {
            mu,
            local_epochs: 3,
            ..config.strategy.clone()
        };
        let u = local_train(client, &global, &s, &config.model, 99).map_err(fail)?;
        penalties.push(alignment_penalty(&u.weights, &global, &s.aligned_names).map_err(fail)?);
    }
    let shown: Vec<String> = penalties.iter().map(|p| format!("{p:.6e}")).collect();
    let detail = format!("penalties [{}]", shown.join(", "));
    ensure(penalties.windows(2).all(|w| w[1] <= w[0] + PROX_SLACK), detail.clone())?;
    Ok(detail)
}

fn aggregation_identities() -> Outcome {
    let mut config = base_config(StrategyKind::FedBn);
    config.model.use_layernorm = true;
    let fed = build_federation(&config).map_err(fail)?;
    let global = init_model(&config.model, 3).map_err(fail)?;
    let server = ServerState {
        global_weights: global.clone(),
        round: 0,
    };
    let mut clients = fed.clients.clone();
    let (next, updates) = train_round(&server, &mut clients, &config.strategy, &config.model, 1).map_err(fail)?;
    let excluded = config.strategy.excluded_names.resolve(&global);
    ensure(!excluded.is_empty(), "no excluded parameters")?;
    for name in &excluded {
        ensure(next.global_weights.get(name) == global.get(name), format!("{name} changed"))?;
    }

    let avg = StrategyConfig::new(StrategyKind::FedAvg);
    let unweighted = StrategyConfig { weighted: false, ..avg.clone() };
    let equal: Vec<ClientUpdate> = updates
        .iter()
        .take(3)
        .map(|u| ClientUpdate { num_samples: 40, ..u.clone() })
        .collect();
    let w = aggregate(&equal, &global, &avg).map_err(fail)?;
    let uw = aggregate(&equal, &global, &unweighted).map_err(fail)?;
    ensure(w == uw, "equal-size weighted != unweighted")?;

    let same: Vec<ClientUpdate> = (0..4)
        .map(|i| ClientUpdate {
            client_id: i,
            num_samples: 10 + 7 * i,
            ..updates[0].clone()
        })
        .collect();
    ensure(aggregate(&same, &global, &avg).map_err(fail)? == updates[0].weights, "fixed point broken")?;
    Ok(format!("{} FEDBN-excluded tensors kept; equal-size and fixed-point identities bitwise", excluded.len()))
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn partition_properties() -> Outcome {
    let labels: Vec<usize> = (0..3).flat_map(|c| std::iter::repeat_n(c, 200)).collect();
    let parts_of = |idx: &[Vec<usize>]| -> Vec<Dataset> {
        idx.iter()
            .map(|i| Dataset {
                images: Vec::new(),
                labels: i.iter().map(|&j| labels[j]).collect(),
                classes: 3,
            })
            .collect()
    };
    for &alpha in &DISPERSION_ALPHAS {
        for m in [1, 3, 10] {
            for seed in 0..PARTITION_SEEDS {
                let p = dirichlet_indices(&labels, 3, &PartitionSpec::new(m, alpha, seed)).map_err(fail)?;
                let mut all: Vec<usize> = p.client_indices.concat();
                all.sort_unstable();
                ensure(
                    all == (0..labels.len()).collect::<Vec<_>>(),
                    format!("conservation broken at alpha={alpha} m={m} seed={seed}"),
                )?;
            }
        }
    }
    let mut medians = Vec::new();
    for &alpha in &DISPERSION_ALPHAS {
        let mut d = Vec::new();
        for seed in 0..PARTITION_SEEDS {
            let p = dirichlet_indices(&labels, 3, &PartitionSpec::new(10, alpha, seed)).map_err(fail)?;
            d.push(heterogeneity_stats(&parts_of(&p.client_indices)).map_err(fail)?.dispersion);
        }
        medians.push(median(d));
    }
    let rho = spearman(&DISPERSION_ALPHAS, &medians);
    let homogeneous = (0..PARTITION_SEEDS)
        .filter(|&seed| {
            let p = dirichlet_indices(&labels, 3, &PartitionSpec::new(10, 1000.0, seed)).unwrap();
            let stats = heterogeneity_stats(&parts_of(&p.client_indices)).unwrap();
            stats
                .frequencies
                .iter()
                .all(|f| f.iter().all(|v| (v - 1.0 / 3.0).abs() <= HOMOGENEITY_TOL))
        })
        .count();
    let share = homogeneous as f64 / PARTITION_SEEDS as f64;
    let shown: Vec<String> = medians.iter().map(|m| format!("{m:.4e}")).collect();
    let detail = format!("median dispersions [{}], Spearman {rho:.3}, homogeneous share {share}", shown.join(", "));
    ensure(rho < 0.0, detail.clone())?;
    ensure(share >= HOMOGENEITY_MIN_SHARE, detail.clone())?;
    Ok(detail)
}

struct TrendCell {
    bench_acc: f64,
    lowest: f64,
}

fn trend_cell(kind: StrategyKind, seed: u64) -> Result<TrendCell, String> {
    let mut base = base_config(kind);
    base.strategy.local_epochs = TREND_EPOCHS;
    base.strategy.batch_size = TREND_BATCH;
    base.data = DataSource::default();
    let cell = Cell {
        strategy: kind,
        alpha: TREND_ALPHA,
        seed,
    };
    let config = cell.config(&base, Path::new("unused"));
    let out = run_experiment(&config).map_err(fail)?;
    let last = out.reports.last().unwrap();
    Ok(TrendCell {
        bench_acc: last.bench_summary.weighted_mean_acc,
        lowest: last.local_summary.min_acc,
    })
}

fn heterogeneity_trend() -> Outcome {
    let start = Instant::now();
    let mut results = std::collections::BTreeMap::new();
    for kind in StrategyKind::ALL {
        let cells = TREND_SEEDS
            .iter()
            .map(|&s| trend_cell(kind, s))
            .collect::<Result<Vec<_>, _>>()?;
        results.insert(kind, cells);
    }
    let secs = start.elapsed().as_secs_f64();
    let local = &results[&StrategyKind::Local];
    let mut notes = Vec::new();
    let mut ok = true;
    for kind in [StrategyKind::FedAvg, StrategyKind::FedProx, StrategyKind::FedBn, StrategyKind::FedMha] {
        let beats = results[&kind]
            .iter()
            .zip(local)
            .filter(|(f, l)| f.bench_acc > l.bench_acc)
            .count();
        ok &= beats >= TREND_MIN_BEAT_LOCAL;
        notes.push(format!("{kind} beats LOCAL {beats}/5"));
    }
    let fairer = results[&StrategyKind::FedMha]
        .iter()
        .zip(&results[&StrategyKind::FedAvg])
        .filter(|(m, a)| m.lowest >= a.lowest)
        .count();
    ok &= fairer >= TREND_MIN_FAIRER;
    notes.push(format!("FEDMHA lowest >= FEDAVG {fairer}/5"));
    for (kind, cells) in &results {
        let accs: Vec<String> = cells.iter().map(|c| format!("{:.3}/{:.3}", c.bench_acc, c.lowest)).collect();
        notes.push(format!("{kind} bench/lowest [{}]", accs.join(" ")));
    }
    notes.push(format!("{secs:.0}s"));
    let detail = notes.join("; ");
    ensure(ok && secs < TREND_MAX_SECONDS, detail.clone())?;
    Ok(detail)
}

fn weighted_averaging() -> Outcome {
    let mut wins = 0;
    let mut pairs = Vec::new();
    for &seed in &TREND_SEEDS {
        let mut accs = [0.0; 2];
        for (slot, weighted) in [true, false].into_iter().enumerate() {
            let mut c = base_config(StrategyKind::FedAvg);
            c.strategy.weighted = weighted;
            c.strategy.local_epochs = TREND_EPOCHS;
            c.strategy.batch_size = TREND_BATCH;
            c.partition.dominant_share = Some(DOMINANT_SHARE);
            c.seed = seed;
            let out = run_experiment(&c).map_err(fail)?;
            accs[slot] = out.reports.last().unwrap().local_summary.weighted_mean_acc;
        }
        wins += usize::from(accs[0] >= accs[1]);
        pairs.push(format!("{:.3}/{:.3}", accs[0], accs[1]));
    }
    let detail = format!("weighted >= unweighted in {wins}/5 seeds [{}]", pairs.join(" "));
    ensure(wins >= WEIGHTED_MIN_WINS, detail.clone())?;
    Ok(detail)
}

fn sweep_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(fail)?;
    let cfg = dir.path().join("c.json");
    std::fs::write(
        &cfg,
        r#"{"strategy": {"kind": "FEDAVG"}, "rounds": 2,
            "sweep": {"strategies": ["FEDAVG", "FEDMHA", "LOCAL"], "alphas": [0.1, 1.0], "seeds": [3]}}"#,
    )
    .map_err(fail)?;
    let mut trees = Vec::new();
    for jobs in ["1", "8"] {
        let out = dir.path().join(format!("jobs{jobs}"));
        let run = Command::new(env!("CARGO_BIN_EXE_fedvit"))
            .args(["sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--jobs", jobs])
            .output()
            .map_err(fail)?;
        ensure(run.status.success(), format!("sweep with --jobs {jobs} failed"))?;
        let mut files = Vec::new();
        for entry in std::fs::read_dir(&out).map_err(fail)? {
            let p = entry.map_err(fail)?.path();
            if p.is_dir() {
                let bytes = std::fs::read(p.join("rounds.csv")).map_err(fail)?;
                files.push((p.file_name().unwrap().to_owned(), bytes));
            }
        }
        files.sort();
        trees.push(files);
    }
    ensure(trees[0].len() == 6, format!("expected 6 cells, found {}", trees[0].len()))?;
    ensure(trees[0] == trees[1], "rounds.csv differs between --jobs 1 and --jobs 8")?;
    Ok("6 cells, rounds.csv byte-identical for --jobs 1 and 8".into())
}

fn idx_ingestion() -> Outcome {
    let dir = tempfile::tempdir().map_err(fail)?;
    let header = |magic: u32, dims: &[u32]| -> Vec<u8> {
        let mut b = magic.to_be_bytes().to_vec();
        for d in dims {
            b.extend(d.to_be_bytes());
        }
        b
    };
    let pixels: Vec<u8> = vec![0, 255, 51, 102, 153, 204, 1, 2, 3, 10, 20, 30, 40, 50, 60, 70, 80, 90];
    let mut images = header(IDX_IMAGES_MAGIC, &[2, 3, 3]);
    images.extend(&pixels);
    let mut labels = header(IDX_LABELS_MAGIC, &[2]);
    labels.extend([1u8, 0]);
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.path().join(name);
        std::fs::write(&p, bytes).unwrap();
        p
    };
    let (ip, lp) = (write("img", &images), write("lbl", &labels));
    let d = load_idx(&ip, &lp).map_err(fail)?;
    ensure(d.labels == vec![1, 0] && d.classes == 2, "labels")?;
    for (k, img) in d.images.iter().enumerate() {
        ensure(img.shape() == [3, 3, 1], "shape")?;
        for (i, &v) in img.data().iter().enumerate() {
            ensure(v == f64::from(pixels[k * 9 + i]) / 255.0, format!("pixel {k}/{i}"))?;
        }
    }
    let mut bad = images.clone();
    bad[2] = 0x09;
    let bad_magic = load_idx(write("bad", &bad), &lp);
    let truncated = load_idx(write("empty", &[]), &lp);
    let mut three = header(IDX_LABELS_MAGIC, &[3]);
    three.extend([0u8, 1, 1]);
    let mismatch = load_idx(&ip, write("three", &three));
    ensure(matches!(bad_magic, Err(Error::BadMagic { .. })), format!("{bad_magic:?}"))?;
    ensure(matches!(truncated, Err(Error::Truncated { .. })), format!("{truncated:?}"))?;
    ensure(
        matches!(mismatch, Err(Error::CountMismatch { images: 2, labels: 3 })),
        format!("{mismatch:?}"),
    )?;
    Ok("fixture exact; bad magic, truncation and count mismatch reported distinctly".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient check on the default model", gradient_check),
        ("attention cost formula", flops_formula),
        ("zero-mu strategies equal FedAvg", degenerate_mu),
        ("proximal pull is monotone in mu", proximal_pull),
        ("aggregation identities", aggregation_identities),
        ("partition properties", partition_properties),
        ("heterogeneity and fairness trend", heterogeneity_trend),
        ("weighted averaging under size skew", weighted_averaging),
        ("sweep determinism across job counts", sweep_determinism),
        ("IDX ingestion", idx_ingestion),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("[PASS] {:>2} {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {:>2} {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}
