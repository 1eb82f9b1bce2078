//! Client-local training, server aggregation and the round loop.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, fairness_summary, weighted_mean, ClientMetrics, FairnessSummary};
use crate::optim::{sgd_step_with, ClipMode};
use crate::params::{NamePatterns, ParamSet};
use crate::seed::mix;
use crate::tensor::Tensor;
use crate::vit::{loss_and_grads, ModelWeights, ViTConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StrategyKind {
    #[serde(rename = "LOCAL", alias = "local")]
    Local,
    #[serde(rename = "FEDAVG", alias = "fedavg")]
    FedAvg,
    #[serde(rename = "FEDPROX", alias = "fedprox")]
    FedProx,
    #[serde(rename = "FEDBN", alias = "fedbn")]
    FedBn,
    #[serde(rename = "FEDMHA", alias = "fedmha")]
    FedMha,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::Local,
        StrategyKind::FedAvg,
        StrategyKind::FedProx,
        StrategyKind::FedBn,
        StrategyKind::FedMha,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Local => "LOCAL",
            StrategyKind::FedAvg => "FEDAVG",
            StrategyKind::FedProx => "FEDPROX",
            StrategyKind::FedBn => "FEDBN",
            StrategyKind::FedMha => "FEDMHA",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

fn default_aligned() -> NamePatterns {
    NamePatterns::new(["block*.wq", "block*.wk", "block*.wv", "block*.mlp_*"])
}

fn default_excluded() -> NamePatterns {
    NamePatterns::new(["block*.ln*"])
}

fn default_mu() -> f64 {
    0.5
}

fn default_true() -> bool {
    true
}

fn default_one() -> usize {
    1
}

fn default_batch() -> usize {
    16
}

fn default_lr() -> f64 {
    0.01
}

fn default_clip() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_true")]
    pub weighted: bool,
    #[serde(default = "default_aligned")]
    pub aligned_names: NamePatterns,
    #[serde(default = "default_excluded")]
    pub excluded_names: NamePatterns,
    #[serde(default = "default_one")]
    pub local_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub clip_mode: ClipMode,
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            mu: default_mu(),
            weighted: true,
            aligned_names: default_aligned(),
            excluded_names: default_excluded(),
            local_epochs: 1,
            batch_size: default_batch(),
            lr: default_lr(),
            clip_norm: default_clip(),
            clip_mode: ClipMode::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0) || !self.mu.is_finite() {
            return Err(Error::Config("strategy.mu must be a finite value >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("strategy.batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config("strategy.lr must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("strategy.clip_norm must be positive".into()));
        }
        Ok(())
    }

    /// Checks that the name patterns used by this strategy match the model.
    pub fn validate_against(&self, params: &ParamSet) -> Result<()> {
        match self.kind {
            StrategyKind::FedMha => self.aligned_names.resolve_nonempty(params).map(drop),
            StrategyKind::FedBn => self.excluded_names.resolve_nonempty(params).map(drop),
            _ => Ok(()),
        }
    }

    /// Parameters carrying the proximal penalty.
    pub fn penalized<'a>(&self, params: &'a ParamSet) -> Result<Vec<&'a str>> {
        match self.kind {
            StrategyKind::FedProx => Ok(params.names().collect()),
            StrategyKind::FedMha => self.aligned_names.resolve_nonempty(params),
            _ => Ok(Vec::new()),
        }
    }

    fn excludes(&self, name: &str) -> bool {
        self.kind == StrategyKind::FedBn && self.excluded_names.matches(name)
    }
}

/// Sum of squared Frobenius distances over the parameters matching `names`.
pub fn alignment_penalty(local: &ParamSet, global: &ParamSet, names: &NamePatterns) -> Result<f64> {
    local.ensure_congruent(global)?;
    let matched = names.resolve_nonempty(local)?;
    local.squared_distance(global, &matched)
}

/// Mean cross-entropy on the batch plus `(μ/2)·Σ_{S} ‖w − w_global‖²`, and
/// its exact gradient.
pub fn local_objective_grad(
    weights: &ModelWeights,
    global: &ModelWeights,
    images: &[&Tensor],
    labels: &[usize],
    strategy: &StrategyConfig,
    config: &ViTConfig,
) -> Result<(f64, ParamSet)> {
    weights.ensure_congruent(global)?;
    if images.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let (mut loss, mut grads) = loss_and_grads(weights, images, labels, config)?;
    let penalized = strategy.penalized(weights)?;
    if strategy.mu == 0.0 || penalized.is_empty() {
        return Ok((loss, grads));
    }
    let mu = strategy.mu;
    loss += 0.5 * mu * weights.squared_distance(global, &penalized)?;
    for name in penalized {
        let w = weights.require(name)?.data();
        let wg = global.require(name)?.data();
        let g = grads.get_mut(name).expect("congruent").data_mut();
        for ((gv, &a), &b) in g.iter_mut().zip(w).zip(wg) {
            *gv += mu * (a - b);
        }
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub train: Dataset,
    pub test: Dataset,
    /// Weights kept between rounds (LOCAL: the whole model; FEDBN: the
    /// excluded parameters are read from here).
    pub weights: Option<ModelWeights>,
}

impl ClientState {
    pub fn new(id: usize, train: Dataset, test: Dataset) -> Self {
        Self {
            id,
            train,
            test,
            weights: None,
        }
    }

    /// The model this client starts local training from, which is also the
    /// model it deploys for evaluation.
    pub fn starting_weights(&self, global: &ModelWeights, strategy: &StrategyConfig) -> ModelWeights {
        match (strategy.kind, &self.weights) {
            (StrategyKind::Local, Some(own)) => own.clone(),
            (StrategyKind::FedBn, Some(own)) => {
                let mut w = global.clone();
                for (name, t) in w.iter_mut() {
                    if strategy.excludes(name) {
                        *t = own.get(name).expect("congruent").clone();
                    }
                }
                w
            }
            _ => global.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub global_weights: ModelWeights,
    pub round: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub weights: ModelWeights,
    pub num_samples: usize,
    /// Mean objective value per local epoch.
    pub train_loss: Vec<f64>,
}

/// Local mini-batch SGD from the client's starting weights. Batches are drawn
/// from a fresh shuffle per epoch driven by `rng_stream`.
pub fn local_train(
    client: &ClientState,
    global: &ModelWeights,
    strategy: &StrategyConfig,
    config: &ViTConfig,
    rng_stream: u64,
) -> Result<ClientUpdate> {
    let n = client.train.len();
    if n == 0 {
        return Err(Error::Empty("client training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_stream);
    let mut w = client.starting_weights(global, strategy);
    let mut order: Vec<usize> = (0..n).collect();
    let mut train_loss = Vec::with_capacity(strategy.local_epochs);
    for _ in 0..strategy.local_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(strategy.batch_size) {
            let images: Vec<&Tensor> = chunk.iter().map(|&i| &client.train.images[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| client.train.labels[i]).collect();
            let (loss, grads) = local_objective_grad(&w, global, &images, &labels, strategy, config)?;
            w = sgd_step_with(&w, &grads, strategy.lr, strategy.clip_norm, strategy.clip_mode)?;
            total += loss;
            batches += 1;
        }
        train_loss.push(total / batches as f64);
    }
    Ok(ClientUpdate {
        client_id: client.id,
        weights: w,
        num_samples: n,
        train_loss,
    })
}

/// `nᵢ/N` when weighted, `1/m` otherwise, in the order given.
pub fn aggregation_coefficients(sizes: &[usize], weighted: bool) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::Empty("update list"));
    }
    if weighted {
        let total: usize = sizes.iter().sum();
        if total == 0 {
            return Err(Error::Empty("update samples"));
        }
        Ok(sizes.iter().map(|&n| n as f64 / total as f64).collect())
    } else {
        Ok(vec![1.0 / sizes.len() as f64; sizes.len()])
    }
}

/// Server update. Accumulates `w_ref + Σ cᵢ(wᵢ − w_ref)` in ascending client
/// id, where `w_ref` is the lowest-id update, so identical updates are an
/// exact fixed point and the result does not depend on list order.
/// FEDBN-excluded parameters keep `prev_global`; LOCAL returns it unchanged.
pub fn aggregate(
    updates: &[ClientUpdate],
    prev_global: &ModelWeights,
    strategy: &StrategyConfig,
) -> Result<ModelWeights> {
    if updates.is_empty() {
        return Err(Error::Empty("update list"));
    }
    for u in updates {
        u.weights.ensure_congruent(prev_global)?;
    }
    if strategy.kind == StrategyKind::Local {
        return Ok(prev_global.clone());
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let sizes: Vec<usize> = sorted.iter().map(|u| u.num_samples).collect();
    let coeffs = aggregation_coefficients(&sizes, strategy.weighted)?;
    let reference = &sorted[0].weights;
    let mut out = prev_global.clone();
    for (name, t) in out.iter_mut() {
        if strategy.excludes(name) {
            continue;
        }
        let base = reference.get(name).expect("congruent").data();
        let mut acc = base.to_vec();
        for (u, &c) in sorted.iter().zip(&coeffs).skip(1) {
            let w = u.weights.get(name).expect("congruent").data();
            for ((a, &wv), &bv) in acc.iter_mut().zip(w).zip(base) {
                *a += c * (wv - bv);
            }
        }
        t.data_mut().copy_from_slice(&acc);
    }
    Ok(out)
}

/// Per-client evaluation of the deployed model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientReport {
    pub client_id: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// On the client's own test split.
    pub local: ClientMetrics,
    /// On the shared benchmark set.
    pub bench: ClientMetrics,
    pub train_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: usize,
    pub clients: Vec<ClientReport>,
    /// Over the clients' local-test accuracies; `min_acc` is the lowest
    /// global accuracy when the deployed model is the global one.
    pub local_summary: FairnessSummary,
    pub bench_summary: FairnessSummary,
    /// Local-test loss averaged with test-set sizes as weights.
    pub weighted_mean_loss: f64,
    pub wall_time_s: f64,
}

/// Evaluates every client's deployed model on its own test split and on
/// `bench`.
pub fn evaluate(
    round: usize,
    global: &ModelWeights,
    clients: &[ClientState],
    bench: &Dataset,
    strategy: &StrategyConfig,
    config: &ViTConfig,
    train_loss: &[Vec<f64>],
) -> Result<RoundReport> {
    let shares_global = matches!(
        strategy.kind,
        StrategyKind::FedAvg | StrategyKind::FedProx | StrategyKind::FedMha
    );
    let global_bench = if shares_global {
        Some(accuracy(global, bench, config)?)
    } else {
        None
    };
    let reports = clients
        .par_iter()
        .enumerate()
        .map(|(i, c)| -> Result<ClientReport> {
            let deployed = c.starting_weights(global, strategy);
            let mut local = accuracy(&deployed, &c.test, config)?;
            let mut bench_m = match &global_bench {
                Some(m) => m.clone(),
                None => accuracy(&deployed, bench, config)?,
            };
            local.client_id = c.id;
            bench_m.client_id = c.id;
            Ok(ClientReport {
                client_id: c.id,
                n_train: c.train.len(),
                n_test: c.test.len(),
                local,
                bench: bench_m,
                train_loss: train_loss.get(i).cloned().unwrap_or_default(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let locals: Vec<ClientMetrics> = reports.iter().map(|r| r.local.clone()).collect();
    let benches: Vec<ClientMetrics> = reports.iter().map(|r| r.bench.clone()).collect();
    let losses: Vec<f64> = locals.iter().map(|m| m.mean_loss).collect();
    let sizes: Vec<usize> = locals.iter().map(|m| m.total).collect();
    Ok(RoundReport {
        round,
        local_summary: fairness_summary(&locals)?,
        bench_summary: fairness_summary(&benches)?,
        weighted_mean_loss: weighted_mean(&losses, &sizes)?,
        clients: reports,
        wall_time_s: 0.0,
    })
}

/// Seed of client `id`'s local RNG in `round`.
pub fn client_stream(global_seed: u64, id: usize, round: usize) -> u64 {
    mix(&[global_seed, id as u64, round as u64])
}

/// Broadcast, local training on every client, aggregation. Updates the
/// clients' persistent weights for LOCAL and FEDBN and returns the new server
/// state with the per-client updates.
pub fn train_round(
    server: &ServerState,
    clients: &mut [ClientState],
    strategy: &StrategyConfig,
    config: &ViTConfig,
    global_seed: u64,
) -> Result<(ServerState, Vec<ClientUpdate>)> {
    let round = server.round + 1;
    let snapshot = &server.global_weights;
    let updates = clients
        .par_iter()
        .map(|c| local_train(c, snapshot, strategy, config, client_stream(global_seed, c.id, round)))
        .collect::<Result<Vec<_>>>()?;
    if matches!(strategy.kind, StrategyKind::Local | StrategyKind::FedBn) {
        for (c, u) in clients.iter_mut().zip(&updates) {
            c.weights = Some(u.weights.clone());
        }
    }
    let global_weights = aggregate(&updates, snapshot, strategy)?;
    Ok((ServerState { global_weights, round }, updates))
}

/// [`train_round`] followed by [`evaluate`].
pub fn run_round(
    server: &ServerState,
    clients: &mut [ClientState],
    bench: &Dataset,
    strategy: &StrategyConfig,
    config: &ViTConfig,
    global_seed: u64,
) -> Result<(ServerState, RoundReport)> {
    let start = std::time::Instant::now();
    let (next, updates) = train_round(server, clients, strategy, config, global_seed)?;
    let losses: Vec<Vec<f64>> = updates.into_iter().map(|u| u.train_loss).collect();
    let mut report = evaluate(next.round, &next.global_weights, clients, bench, strategy, config, &losses)?;
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok((next, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::vit::init_model;

    fn tiny_config() -> ViTConfig {
        ViTConfig {
            image_h: 8,
            image_w: 8,
            dim: 8,
            heads: 2,
            blocks: 1,
            mlp_hidden: 16,
            ..ViTConfig::default()
        }
    }

    fn tiny_data(n: usize, seed: u64) -> Dataset {
        generate_synthetic(&SyntheticSpec {
            samples_per_class: n,
            image_h: 8,
            image_w: 8,
            seed,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn single(name: &str, data: Vec<f64>) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name, Tensor::new(vec![data.len()], data).unwrap());
        p
    }

    fn update(id: usize, n: usize, w: ParamSet) -> ClientUpdate {
        ClientUpdate {
            client_id: id,
            weights: w,
            num_samples: n,
            train_loss: vec![],
        }
    }

    #[test]
    fn strategy_names_parse() {
        for k in StrategyKind::ALL {
            assert_eq!(k.as_str().parse::<StrategyKind>().unwrap(), k);
            assert_eq!(k.as_str().to_lowercase().parse::<StrategyKind>().unwrap(), k);
        }
        assert!("fedsgd".parse::<StrategyKind>().is_err());
        let s: StrategyConfig = serde_json::from_str(r#"{"kind":"fedmha"}"#).unwrap();
        assert_eq!(s, StrategyConfig::new(StrategyKind::FedMha));
    }

    #[test]
    fn penalty_examples() {
        let mut a = ParamSet::new();
        a.insert("block0.wq", Tensor::zeros(&[2, 2]));
        a.insert("head_w", Tensor::zeros(&[2, 2]));
        let mut b = a.clone();
        b.insert("block0.wq", Tensor::filled(&[2, 2], 1.0));
        b.insert("head_w", Tensor::filled(&[2, 2], 9.0));
        let pats = NamePatterns::new(["block*.wq"]);
        assert_eq!(alignment_penalty(&a, &a, &pats).unwrap(), 0.0);
        assert_eq!(alignment_penalty(&a, &b, &pats).unwrap(), 4.0);
        assert!(matches!(
            alignment_penalty(&a, &b, &NamePatterns::new(["nothing"])),
            Err(Error::EmptyMatch(_))
        ));
    }

    #[test]
    fn penalty_matches_element_loop() {
        let config = tiny_config();
        let a = init_model(&config, 1).unwrap();
        let b = init_model(&config, 2).unwrap();
        let pats = StrategyConfig::new(StrategyKind::FedMha).aligned_names;
        let mut oracle = 0.0;
        for (name, t) in a.iter() {
            let leaf = name.split('.').nth(1).unwrap_or("");
            if name.starts_with("block") && (["wq", "wk", "wv"].contains(&leaf) || leaf.starts_with("mlp_")) {
                for (x, y) in t.data().iter().zip(b.get(name).unwrap().data()) {
                    oracle += (x - y) * (x - y);
                }
            }
        }
        assert!((alignment_penalty(&a, &b, &pats).unwrap() - oracle).abs() <= 1e-12);
    }

    #[test]
    fn anchor_point_and_zero_mu_give_plain_gradients() {
        let config = tiny_config();
        let data = tiny_data(4, 0);
        let images: Vec<&Tensor> = data.images.iter().collect();
        let g = init_model(&config, 3).unwrap();
        let w = init_model(&config, 4).unwrap();
        let plain = loss_and_grads(&w, &images, &data.labels, &config).unwrap();
        let avg = StrategyConfig::new(StrategyKind::FedAvg);
        for kind in [StrategyKind::FedMha, StrategyKind::FedProx] {
            let s = StrategyConfig { mu: 0.0, ..StrategyConfig::new(kind) };
            let out = local_objective_grad(&w, &g, &images, &data.labels, &s, &config).unwrap();
            assert_eq!(out, plain);
            let at_anchor = local_objective_grad(&g, &g, &images, &data.labels, &StrategyConfig::new(kind), &config);
            let reference = local_objective_grad(&g, &g, &images, &data.labels, &avg, &config);
            assert_eq!(at_anchor.unwrap(), reference.unwrap());
        }
    }

    #[test]
    fn fedprox_gradient_matches_finite_differences() {
        let config = tiny_config();
        let data = tiny_data(2, 5);
        let images: Vec<&Tensor> = data.images.iter().collect();
        let g = init_model(&config, 6).unwrap().map(|t| t.map_values(|v| v * 20.0));
        let w = init_model(&config, 7).unwrap().map(|t| t.map_values(|v| v * 20.0));
        let s = StrategyConfig::new(StrategyKind::FedProx);
        let (_, grads) = local_objective_grad(&w, &g, &images, &data.labels, &s, &config).unwrap();
        let f = |p: &ParamSet| local_objective_grad(p, &g, &images, &data.labels, &s, &config).unwrap().0;
        let mut probe = w.clone();
        for name in ["block0.wq", "block0.mlp_b1", "head_w"] {
            for i in 0..4 {
                let orig = w.get(name).unwrap().data()[i];
                probe.get_mut(name).unwrap().data_mut()[i] = orig + 1e-5;
                let plus = f(&probe);
                probe.get_mut(name).unwrap().data_mut()[i] = orig - 1e-5;
                let minus = f(&probe);
                probe.get_mut(name).unwrap().data_mut()[i] = orig;
                let fd = (plus - minus) / 2e-5;
                let an = grads.get(name).unwrap().data()[i];
                let err = crate::gradcheck::relative_error(an, fd);
                assert!(err <= 1e-6, "{name}[{i}]: {an} vs {fd} ({err})");
            }
        }
    }

    #[test]
    fn zero_epochs_return_start_and_training_is_deterministic() {
        let config = tiny_config();
        let data = tiny_data(5, 1);
        let client = ClientState::new(0, data.clone(), data);
        let g = init_model(&config, 0).unwrap();
        let s = StrategyConfig { local_epochs: 0, ..StrategyConfig::new(StrategyKind::FedAvg) };
        assert_eq!(local_train(&client, &g, &s, &config, 1).unwrap().weights, g);
        let s = StrategyConfig { local_epochs: 2, batch_size: 4, ..s };
        let a = local_train(&client, &g, &s, &config, 9).unwrap();
        assert_eq!(a, local_train(&client, &g, &s, &config, 9).unwrap());
        assert_eq!(a.num_samples, 15);
        assert_eq!(a.train_loss.len(), 2);
    }

    #[test]
    fn full_batch_epoch_is_one_clipped_step() {
        let config = tiny_config();
        let data = tiny_data(3, 2);
        let client = ClientState::new(0, data.clone(), data.clone());
        let g = init_model(&config, 8).unwrap();
        let s = StrategyConfig {
            batch_size: data.len(),
            clip_norm: 1e-3,
            ..StrategyConfig::new(StrategyKind::FedAvg)
        };
        let out = local_train(&client, &g, &s, &config, 4).unwrap();
        let images: Vec<&Tensor> = data.images.iter().collect();
        let (_, grads) = loss_and_grads(&g, &images, &data.labels, &config).unwrap();
        let norm = grads.global_norm();
        let mut expected = g.clone();
        for ((_, w), (_, gr)) in expected.iter_mut().zip(grads.iter()) {
            for (wv, gv) in w.data_mut().iter_mut().zip(gr.data()) {
                *wv -= 0.01 * gv * (1e-3 / norm.max(1e-3)).min(1.0);
            }
        }
        for ((_, a), (_, b)) in out.weights.iter().zip(expected.iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn aggregation_examples() {
        let s = StrategyConfig::new(StrategyKind::FedAvg);
        let u = vec![update(0, 100, single("w", vec![0.0])), update(1, 300, single("w", vec![4.0]))];
        let prev = single("w", vec![7.0]);
        assert_eq!(aggregate(&u, &prev, &s).unwrap().get("w").unwrap().data(), &[3.0]);
        let unweighted = StrategyConfig { weighted: false, ..s.clone() };
        assert_eq!(aggregate(&u, &prev, &unweighted).unwrap().get("w").unwrap().data(), &[2.0]);

        let prev = single("w", vec![7.0, 7.0]);
        let same = vec![update(0, 5, single("w", vec![0.1, 0.7])), update(1, 9, single("w", vec![0.1, 0.7]))];
        assert_eq!(aggregate(&same, &prev, &s).unwrap(), same[0].weights);

        let eq = vec![update(0, 5, single("w", vec![0.1, 0.3])), update(1, 5, single("w", vec![0.7, -0.2]))];
        assert_eq!(aggregate(&eq, &prev, &s).unwrap(), aggregate(&eq, &prev, &unweighted).unwrap());

        let local = StrategyConfig::new(StrategyKind::Local);
        assert_eq!(aggregate(&eq, &prev, &local).unwrap(), prev);
        assert!(aggregate(&[], &prev, &s).is_err());
    }

    #[test]
    fn fedbn_keeps_excluded_and_clients_keep_their_own() {
        let config = ViTConfig { use_layernorm: true, ..tiny_config() };
        let prev = init_model(&config, 0).unwrap();
        let s = StrategyConfig::new(StrategyKind::FedBn);
        let perturbed = |k: f64| prev.map(|t| t.map_values(|v| v + k));
        let u = vec![update(0, 3, perturbed(0.1)), update(1, 4, perturbed(0.2))];
        let out = aggregate(&u, &prev, &s).unwrap();
        for (name, t) in out.iter() {
            if name.contains(".ln") {
                assert_eq!(t, prev.get(name).unwrap());
            } else {
                assert_ne!(t, prev.get(name).unwrap());
            }
        }
        let data = tiny_data(2, 0);
        let mut client = ClientState::new(0, data.clone(), data);
        client.weights = Some(perturbed(0.5));
        let start = client.starting_weights(&out, &s);
        assert_eq!(start.get("block0.ln1_g"), client.weights.as_ref().unwrap().get("block0.ln1_g"));
        assert_eq!(start.get("block0.wq"), out.get("block0.wq"));
    }

    #[test]
    fn aggregation_ignores_list_order() {
        let s = StrategyConfig::new(StrategyKind::FedAvg);
        let u: Vec<ClientUpdate> = (0..5)
            .map(|i| update(i, 3 + i * 7, single("w", vec![(i as f64).sin(), 0.3 * i as f64])))
            .collect();
        let prev = single("w", vec![0.0, 0.0]);
        let mut rev = u.clone();
        rev.reverse();
        rev.swap(0, 2);
        assert_eq!(aggregate(&u, &prev, &s).unwrap(), aggregate(&rev, &prev, &s).unwrap());
        let c = aggregation_coefficients(&[3, 10, 17, 24, 31], true).unwrap();
        assert!((c.iter().sum::<f64>() - 1.0).abs() <= 1e-15);
    }

    fn tiny_federation(n_clients: usize) -> (Vec<ClientState>, Dataset) {
        let data = tiny_data(6, 3);
        let clients = (0..n_clients)
            .map(|i| {
                let idx: Vec<usize> = (0..data.len()).filter(|j| j % n_clients == i).collect();
                let d = data.subset(&idx);
                ClientState::new(i, d.clone(), d)
            })
            .collect();
        (clients, data)
    }

    #[test]
    fn round_examples() {
        let config = tiny_config();
        let g = init_model(&config, 0).unwrap();
        let server = ServerState { global_weights: g.clone(), round: 0 };

        let (mut one, bench) = tiny_federation(1);
        let s = StrategyConfig::new(StrategyKind::FedAvg);
        let expected = local_train(&one[0], &g, &s, &config, client_stream(5, 0, 1)).unwrap();
        let (next, report) = run_round(&server, &mut one, &bench, &s, &config, 5).unwrap();
        assert_eq!(next.global_weights, expected.weights);
        assert_eq!(next.round, 1);
        assert_eq!(report.clients.len(), 1);

        let (mut three, bench) = tiny_federation(3);
        let frozen = StrategyConfig { local_epochs: 0, ..s };
        let (next, report) = run_round(&server, &mut three, &bench, &frozen, &config, 5).unwrap();
        assert_eq!(next.global_weights, g);
        assert_eq!(report.clients.len(), 3);

        let local = StrategyConfig::new(StrategyKind::Local);
        let mut state = server.clone();
        for _ in 0..2 {
            state = run_round(&state, &mut three, &bench, &local, &config, 5).unwrap().0;
            assert_eq!(state.global_weights, g);
        }
        assert!(three.iter().all(|c| c.weights.as_ref().is_some_and(|w| w != &g)));
    }
}
