//! Round-based federated training: FedAvg, joint basis training, the
//! coordinate-descent basis algorithm, warm-start and new-client
//! personalization.
//!
//! Each round the server samples clients, every sampled client runs its
//! local update from the broadcast global object, and the server averages
//! the returned objects in ascending client order. Local updates are pure
//! functions of (global object, client data, config, client RNG stream), so
//! they run in parallel without affecting results.
//!
//! Local updates of the basis algorithms:
//!
//! * **joint** (`fedbasis_naive`): start from `ψ = 0`, `V = V̄`; run `E`
//!   epochs of SGD updating `ψ` and every basis at each step.
//! * **coordinate descent** (`fedbasis`): start from `ψ = 0`, `V = V̄`;
//!   run `E` epochs on `ψ` alone, sharpen the softmax to temperature `τ`,
//!   then run `E` epochs on `V` alone with `ψ` frozen.
//!
//! In both cases `ψ` is discarded at the end of the round.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{self, BasisSet, CombinationState, GradTargets};
use crate::diagnostics;
use crate::error::{Error, Result};
use crate::kmeans;
use crate::nn::{self, init_params_with, MlpSpec, ParamVector};
use crate::pflbed::{ClientDataset, EvalSet};
use crate::rng::{RngSeed, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Fedavg,
    FedbasisNaive,
    Fedbasis,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Fedavg => "fedavg",
            Algorithm::FedbasisNaive => "fedbasis_naive",
            Algorithm::Fedbasis => "fedbasis",
        }
    }

    /// Data-size weights for FedAvg, uniform weights for the basis algorithms.
    pub fn default_weighting(self) -> Weighting {
        match self {
            Algorithm::Fedavg => Weighting::ByDataSize,
            _ => Weighting::Uniform,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    ByDataSize,
}

/// Federated training knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedConfig {
    pub rounds: usize,
    pub participation_fraction: f64,
    /// Epochs per local phase (both phases of coordinate descent).
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr_bases: f64,
    pub lr_logits: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Sharpening temperature.
    pub temperature: f64,
    pub num_bases: usize,
    pub use_major: bool,
    pub warm_start_fraction: f64,
    /// `None` picks the algorithm's default.
    pub aggregation_weighting: Option<Weighting>,
    pub algorithm: Algorithm,
    pub seed: RngSeed,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            rounds: 40,
            participation_fraction: 1.0,
            local_epochs: 5,
            batch_size: 16,
            lr_bases: 0.05,
            lr_logits: 0.05,
            weight_decay: 1e-4,
            momentum: 0.9,
            temperature: 0.1,
            num_bases: 4,
            use_major: true,
            warm_start_fraction: 0.3,
            aggregation_weighting: None,
            algorithm: Algorithm::Fedbasis,
            seed: RngSeed(0),
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.participation_fraction > 0.0 && self.participation_fraction <= 1.0) {
            return bad("participation_fraction must lie in (0, 1]");
        }
        if self.local_epochs == 0 {
            return bad("local_epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr_bases >= 0.0 && self.lr_logits >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.temperature > 0.0 && self.temperature <= 1.0) {
            return bad("temperature must lie in (0, 1]");
        }
        if self.num_bases == 0 {
            return bad("num_bases must be positive");
        }
        if !(self.warm_start_fraction >= 0.0 && self.warm_start_fraction < 1.0) {
            return bad("warm_start_fraction must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn weighting(&self) -> Weighting {
        self.aggregation_weighting
            .unwrap_or_else(|| self.algorithm.default_weighting())
    }

    /// Number of leading FedAvg rounds used to warm-start the bases.
    pub fn warm_start_rounds(&self) -> usize {
        if self.algorithm == Algorithm::Fedavg {
            return 0;
        }
        (self.warm_start_fraction * self.rounds as f64).floor() as usize
    }

    fn sgd(&self, lr: f64) -> SgdParams {
        SgdParams {
            lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// Plain SGD hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Heavy-ball SGD with coupled weight decay:
/// `v ← μ v + (g + λ p)`, `p ← p − η v`.
#[derive(Debug, Clone)]
struct Sgd {
    params: SgdParams,
    velocity: Vec<f64>,
}

impl Sgd {
    fn new(params: SgdParams, len: usize) -> Self {
        Sgd {
            params,
            velocity: vec![0.0; len],
        }
    }

    fn step(&mut self, p: &mut [f64], g: &[f64]) {
        let SgdParams {
            lr,
            momentum,
            weight_decay,
        } = self.params;
        for ((pv, &gv), v) in p.iter_mut().zip(g).zip(self.velocity.iter_mut()) {
            *v = momentum * *v + (gv + weight_decay * *pv);
            *pv -= lr * *v;
        }
    }
}

/// Shuffled mini-batches of one epoch.
fn epoch_batches(n: usize, batch_size: usize, rng: &mut StreamRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn non_empty(data: &ClientDataset) -> Result<()> {
    if data.is_empty() {
        Err(Error::EmptyDataset(format!("client {}", data.id)))
    } else {
        Ok(())
    }
}

fn finite(p: ParamVector) -> Result<ParamVector> {
    p.check_finite()?;
    Ok(p)
}

/// `epochs` of mini-batch SGD on all parameters of `theta`.
pub fn sgd_train(
    spec: &MlpSpec,
    theta: &ParamVector,
    data: &ClientDataset,
    epochs: usize,
    batch_size: usize,
    sgd: SgdParams,
    rng: &mut StreamRng,
    mut on_epoch: impl FnMut(usize, &ParamVector),
) -> Result<ParamVector> {
    non_empty(data)?;
    let mut theta = theta.clone();
    let mut opt = Sgd::new(sgd, theta.len());
    on_epoch(0, &theta);
    for epoch in 1..=epochs {
        for rows in epoch_batches(data.len(), batch_size, rng) {
            let g = nn::grad_params(spec, &theta, &data.batch(&rows)?)?;
            opt.step(theta.values_mut(), g.values());
        }
        on_epoch(epoch, &theta);
    }
    finite(theta)
}

/// FedAvg local update: `E` epochs of SGD from the global model.
pub fn client_update_fedavg(
    spec: &MlpSpec,
    global: &ParamVector,
    data: &ClientDataset,
    cfg: &FedConfig,
    rng: &mut StreamRng,
) -> Result<ParamVector> {
    sgd_train(spec, global, data, cfg.local_epochs, cfg.batch_size, cfg.sgd(cfg.lr_bases), rng, |_, _| {})
}

/// Plain fine-tuning of every parameter.
pub fn finetune_full(
    spec: &MlpSpec,
    theta: &ParamVector,
    data: &ClientDataset,
    epochs: usize,
    batch_size: usize,
    sgd: SgdParams,
    rng: &mut StreamRng,
    on_epoch: impl FnMut(usize, &ParamVector),
) -> Result<ParamVector> {
    sgd_train(spec, theta, data, epochs, batch_size, sgd, rng, on_epoch)
}

/// Weighted average `x_0 + Σ_{i≥1} w_i (x_i − x_0)`, accumulated in list
/// order. Equal to `Σ w_i x_i` because the weights sum to one, and returns
/// `x_0` bit-for-bit when every input is identical.
pub fn aggregate(params: &[&ParamVector], weights: &[f64]) -> Result<ParamVector> {
    let first = *params
        .first()
        .ok_or_else(|| Error::Config("nothing to aggregate".into()))?;
    if weights.len() != params.len() {
        return Err(Error::mismatch("aggregation weights", params.len(), weights.len()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("aggregation weights sum to {total}, not 1")));
    }
    for p in &params[1..] {
        first.check_same_shape(p)?;
    }
    let mut out = first.clone();
    for (p, &w) in params.iter().zip(weights).skip(1) {
        for ((o, &x), &x0) in out.values_mut().iter_mut().zip(p.values()).zip(first.values()) {
            *o += w * (x - x0);
        }
    }
    Ok(out)
}

/// Basis-wise [`aggregate`].
pub fn aggregate_bases(sets: &[&BasisSet], weights: &[f64]) -> Result<BasisSet> {
    let first = *sets
        .first()
        .ok_or_else(|| Error::Config("nothing to aggregate".into()))?;
    for s in &sets[1..] {
        if s.k() != first.k() || s.has_major() != first.has_major() {
            return Err(Error::mismatch("basis count", first.k(), s.k()));
        }
    }
    let bases = (0..first.k())
        .map(|k| {
            let col: Vec<&ParamVector> = sets.iter().map(|s| &s.bases()[k]).collect();
            aggregate(&col, weights)
        })
        .collect::<Result<Vec<_>>>()?;
    let major = if first.has_major() {
        let col: Vec<&ParamVector> = sets.iter().map(|s| s.major().unwrap()).collect();
        Some(aggregate(&col, weights)?)
    } else {
        None
    };
    BasisSet::new(bases, major)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Joint,
    Logits,
    Bases,
}

/// Collapse diagnostics sampled after each local epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalEpoch {
    pub phase: Phase,
    pub epoch: usize,
    /// Mean pairwise cosine of the local bases (`None` for `K < 2`).
    pub cosine: Option<f64>,
    pub entropy: f64,
}

/// Result of one client's basis update.
#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub bases: BasisSet,
    /// The combination the client ended the round with (sharpened for the
    /// coordinate-descent algorithm). Kept for diagnostics only.
    pub state: CombinationState,
    /// Entry 0 is the round start.
    pub trace: Vec<LocalEpoch>,
}

fn snapshot(phase: Phase, epoch: usize, set: &BasisSet, state: &CombinationState) -> LocalEpoch {
    LocalEpoch {
        phase,
        epoch,
        cosine: diagnostics::mean_pairwise_cosine(set).ok(),
        entropy: diagnostics::alpha_entropy(&state.coefficients()),
    }
}

struct BasisOptimizers {
    bases: Vec<Sgd>,
    major: Option<Sgd>,
}

impl BasisOptimizers {
    fn new(set: &BasisSet, sgd: SgdParams) -> Self {
        BasisOptimizers {
            bases: set.bases().iter().map(|b| Sgd::new(sgd, b.len())).collect(),
            major: set.major().map(|m| Sgd::new(sgd, m.len())),
        }
    }

    fn step(&mut self, set: &mut BasisSet, grads: &basis::CombinedGradients) {
        let mut opts = self.bases.iter_mut().chain(self.major.as_mut());
        let mut gs = grads.bases.iter().chain(grads.major.as_ref());
        for p in set.arrays_mut() {
            let (opt, g) = (opts.next().unwrap(), gs.next().unwrap());
            opt.step(p.values_mut(), g.values());
        }
    }
}

fn finite_bases(set: BasisSet) -> Result<BasisSet> {
    for p in set.arrays() {
        p.check_finite()?;
    }
    Ok(set)
}

/// Joint local training of `ψ` and every basis.
pub fn client_update_fedbasis_naive(
    spec: &MlpSpec,
    global: &BasisSet,
    data: &ClientDataset,
    cfg: &FedConfig,
    rng: &mut StreamRng,
) -> Result<LocalUpdate> {
    non_empty(data)?;
    let mut set = global.clone();
    let mut state = CombinationState::uniform(set.num_blocks(), set.k(), 1.0)?;
    let mut opt_bases = BasisOptimizers::new(&set, cfg.sgd(cfg.lr_bases));
    let mut opt_logits = Sgd::new(cfg.sgd(cfg.lr_logits), state.trainable_params());
    let mut trace = vec![snapshot(Phase::Joint, 0, &set, &state)];
    for epoch in 1..=cfg.local_epochs {
        for rows in epoch_batches(data.len(), cfg.batch_size, rng) {
            let grads = basis::combined_gradients(spec, &set, &state, &data.batch(&rows)?, GradTargets::ALL)?;
            opt_bases.step(&mut set, &grads);
            opt_logits.step(state.logits_mut().as_mut_slice(), grads.logits.as_slice());
        }
        trace.push(snapshot(Phase::Joint, epoch, &set, &state));
    }
    Ok(LocalUpdate {
        bases: finite_bases(set)?,
        state,
        trace,
    })
}

/// Coordinate-descent local training.
///
/// `logits_rng` drives the shuffles of the `ψ` phase and `bases_rng` those of
/// the basis phase; with `K = 1` and no major basis the basis phase is
/// exactly [`client_update_fedavg`] on `bases_rng`.
pub fn client_update_fedbasis(
    spec: &MlpSpec,
    global: &BasisSet,
    data: &ClientDataset,
    cfg: &FedConfig,
    logits_rng: &mut StreamRng,
    bases_rng: &mut StreamRng,
) -> Result<LocalUpdate> {
    non_empty(data)?;
    let mut set = global.clone();
    let mut state = CombinationState::uniform(set.num_blocks(), set.k(), 1.0)?;
    let mut trace = vec![snapshot(Phase::Logits, 0, &set, &state)];

    let mut opt_logits = Sgd::new(cfg.sgd(cfg.lr_logits), state.trainable_params());
    for epoch in 1..=cfg.local_epochs {
        for rows in epoch_batches(data.len(), cfg.batch_size, logits_rng) {
            let g = basis::grad_logits(spec, &set, &state, &data.batch(&rows)?)?;
            opt_logits.step(state.logits_mut().as_mut_slice(), g.as_slice());
        }
        trace.push(snapshot(Phase::Logits, epoch, &set, &state));
    }

    let state = state.sharpen(cfg.temperature)?;
    trace.push(snapshot(Phase::Bases, 0, &set, &state));

    let mut opt_bases = BasisOptimizers::new(&set, cfg.sgd(cfg.lr_bases));
    for epoch in 1..=cfg.local_epochs {
        for rows in epoch_batches(data.len(), cfg.batch_size, bases_rng) {
            let grads = basis::combined_gradients(spec, &set, &state, &data.batch(&rows)?, GradTargets::BASES)?;
            opt_bases.step(&mut set, &grads);
        }
        trace.push(snapshot(Phase::Bases, epoch, &set, &state));
    }
    Ok(LocalUpdate {
        bases: finite_bases(set)?,
        state,
        trace,
    })
}

/// The server-side model: a single network or a basis set.
#[derive(Debug, Clone, PartialEq)]
pub enum GlobalModel {
    Single(ParamVector),
    Bases(BasisSet),
}

impl GlobalModel {
    pub fn as_single(&self) -> Option<&ParamVector> {
        match self {
            GlobalModel::Single(p) => Some(p),
            GlobalModel::Bases(_) => None,
        }
    }

    pub fn as_bases(&self) -> Option<&BasisSet> {
        match self {
            GlobalModel::Bases(b) => Some(b),
            GlobalModel::Single(_) => None,
        }
    }
}

/// Client that was dropped from a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedClient {
    pub client: usize,
    pub reason: String,
}

/// One record of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub algorithm: Algorithm,
    pub participants: Vec<usize>,
    pub skipped: Vec<SkippedClient>,
    /// Mean pairwise cosine of the aggregated non-major bases.
    pub mean_pairwise_cosine: Option<f64>,
    /// Mean over participants of the entropy (nats) of their final local
    /// combination.
    pub mean_alpha_entropy: Option<f64>,
    /// Aggregation-weighted mean local loss of each participant's model
    /// after aggregation.
    pub global_loss: f64,
    pub mean_personalized_accuracy: Option<f64>,
    pub mean_global_accuracy: Option<f64>,
}

/// Optional per-round evaluation and execution settings.
#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    /// Shared test set per domain; enables accuracy summaries.
    pub test_sets: Option<&'a BTreeMap<String, EvalSet>>,
    /// Evaluate accuracies every this many rounds (and on the last round);
    /// 0 disables.
    pub eval_every: usize,
    /// Worker threads for client updates; `None` uses the global pool.
    pub threads: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct FederationOutcome {
    pub global: GlobalModel,
    pub metrics: Vec<RoundMetrics>,
    /// Mean pairwise cosine of the bases before the first basis round.
    pub initial_cosine: Option<f64>,
    /// Final combinations of the last round's participants, by client index.
    pub last_states: BTreeMap<usize, CombinationState>,
}

/// Independently initialized bases (and major basis when configured).
pub fn init_bases(spec: &MlpSpec, cfg: &FedConfig) -> Result<BasisSet> {
    let bases = (0..cfg.num_bases)
        .map(|k| init_params_with(spec, &mut cfg.seed.stream("init", &[k as u64])))
        .collect();
    let major = cfg
        .use_major
        .then(|| init_params_with(spec, &mut cfg.seed.stream("init-major", &[])));
    BasisSet::new(bases, major)
}

/// The initial FedAvg model (identical to basis 0 of [`init_bases`]).
pub fn init_single(spec: &MlpSpec, cfg: &FedConfig) -> ParamVector {
    init_params_with(spec, &mut cfg.seed.stream("init", &[0]))
}

fn sample_clients(m: usize, fraction: f64, round: usize, seed: RngSeed) -> Vec<usize> {
    let count = ((fraction * m as f64).ceil() as usize).clamp(1, m);
    if count == m {
        return (0..m).collect();
    }
    let mut picked = rand::seq::index::sample(&mut seed.stream("sample", &[round as u64]), m, count).into_vec();
    picked.sort_unstable();
    picked
}

fn aggregation_weights(clients: &[ClientDataset], ids: &[usize], weighting: Weighting) -> Vec<f64> {
    match weighting {
        Weighting::Uniform => vec![1.0 / ids.len() as f64; ids.len()],
        Weighting::ByDataSize => {
            let total: usize = ids.iter().map(|&i| clients[i].len()).sum();
            ids.iter()
                .map(|&i| clients[i].len() as f64 / total as f64)
                .collect()
        }
    }
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map(|pool| pool.install(f))
            .unwrap_or_else(|e| panic!("cannot build thread pool: {e}")),
        None => f(),
    }
}

enum LocalResult {
    Single(ParamVector),
    Bases(LocalUpdate),
}

fn run_local(
    spec: &MlpSpec,
    global: &GlobalModel,
    data: &ClientDataset,
    cfg: &FedConfig,
    algorithm: Algorithm,
    round: usize,
    client: usize,
) -> Result<LocalResult> {
    let key = [round as u64, client as u64];
    let mut local_rng = cfg.seed.stream("local", &key);
    match (algorithm, global) {
        (Algorithm::Fedavg, GlobalModel::Single(theta)) => {
            client_update_fedavg(spec, theta, data, cfg, &mut local_rng).map(LocalResult::Single)
        }
        (Algorithm::FedbasisNaive, GlobalModel::Bases(set)) => {
            client_update_fedbasis_naive(spec, set, data, cfg, &mut local_rng).map(LocalResult::Bases)
        }
        (Algorithm::Fedbasis, GlobalModel::Bases(set)) => {
            let mut logits_rng = cfg.seed.stream("local-logits", &key);
            client_update_fedbasis(spec, set, data, cfg, &mut logits_rng, &mut local_rng).map(LocalResult::Bases)
        }
        _ => Err(Error::Config(format!(
            "{} cannot train this global model",
            algorithm.as_str()
        ))),
    }
}

/// Per-client personalized and global test accuracy of `model`.
pub fn evaluate_model(spec: &MlpSpec, model: &ParamVector, set: &EvalSet, label_dist: &[f64]) -> Result<(f64, f64)> {
    let preds = nn::predict(spec, model, &set.features)?;
    Ok((
        diagnostics::personalized_accuracy(&preds, &set.labels, label_dist)?,
        diagnostics::global_accuracy(&preds, &set.labels)?,
    ))
}

/// Model a participant would use after aggregation.
fn client_model(global: &GlobalModel, state: Option<&CombinationState>) -> Result<ParamVector> {
    match (global, state) {
        (GlobalModel::Single(p), _) => Ok(p.clone()),
        (GlobalModel::Bases(set), Some(s)) => basis::combine(set, s),
        (GlobalModel::Bases(set), None) => {
            basis::combine(set, &CombinationState::uniform(set.num_blocks(), set.k(), 1.0)?)
        }
    }
}

struct RoundOutput {
    global: GlobalModel,
    metrics: RoundMetrics,
    states: BTreeMap<usize, CombinationState>,
    locals: Vec<(usize, ParamVector)>,
}

fn run_round(
    spec: &MlpSpec,
    clients: &[ClientDataset],
    cfg: &FedConfig,
    algorithm: Algorithm,
    global: &GlobalModel,
    round: usize,
    opts: &RunOptions,
) -> Result<RoundOutput> {
    let participants = sample_clients(clients.len(), cfg.participation_fraction, round, cfg.seed);
    let results: Vec<Result<LocalResult>> = with_pool(opts.threads, || {
        participants
            .par_iter()
            .map(|&c| run_local(spec, global, &clients[c], cfg, algorithm, round, c))
            .collect()
    });

    let mut ok_ids = Vec::new();
    let mut skipped = Vec::new();
    let mut singles = Vec::new();
    let mut updates = Vec::new();
    for (&c, r) in participants.iter().zip(results) {
        match r {
            Ok(LocalResult::Single(p)) => {
                ok_ids.push(c);
                singles.push(p);
            }
            Ok(LocalResult::Bases(u)) => {
                ok_ids.push(c);
                updates.push(u);
            }
            Err(e) => {
                log::warn!("round {round}: client {c} skipped: {e}");
                skipped.push(SkippedClient {
                    client: c,
                    reason: e.to_string(),
                });
            }
        }
    }

    if ok_ids.is_empty() {
        return Err(Error::RoundFailed {
            round,
            count: skipped.len(),
            first: skipped.first().map_or_else(String::new, |s| s.reason.clone()),
        });
    }
    let weights = aggregation_weights(clients, &ok_ids, cfg.weighting());
    let new_global = match global {
        GlobalModel::Single(_) => {
            let refs: Vec<&ParamVector> = singles.iter().collect();
            GlobalModel::Single(aggregate(&refs, &weights)?)
        }
        GlobalModel::Bases(_) => {
            let refs: Vec<&BasisSet> = updates.iter().map(|u| &u.bases).collect();
            GlobalModel::Bases(aggregate_bases(&refs, &weights)?)
        }
    };

    let states: BTreeMap<usize, CombinationState> = ok_ids
        .iter()
        .zip(&updates)
        .map(|(&c, u)| (c, u.state.clone()))
        .collect();

    let mean_pairwise_cosine = new_global
        .as_bases()
        .and_then(|s| diagnostics::mean_pairwise_cosine(s).ok());
    let mean_alpha_entropy = (!updates.is_empty()).then(|| {
        updates
            .iter()
            .map(|u| diagnostics::alpha_entropy(&u.state.coefficients()))
            .sum::<f64>()
            / updates.len() as f64
    });

    let mut global_loss = 0.0;
    let mut pers = Vec::new();
    let mut glob = Vec::new();
    let evaluate = opts.test_sets.is_some()
        && opts.eval_every > 0
        && ((round + 1).is_multiple_of(opts.eval_every) || round + 1 == cfg.rounds);
    for (&c, &w) in ok_ids.iter().zip(&weights) {
        let model = client_model(&new_global, states.get(&c))?;
        let (loss, _) = nn::forward_loss(spec, &model, &clients[c].full_batch()?)?;
        global_loss += w * loss;
        if evaluate {
            let test = opts.test_sets.unwrap().get(&clients[c].domain).ok_or_else(|| {
                Error::Format(format!("no test set for domain {}", clients[c].domain))
            })?;
            let (p, g) = evaluate_model(spec, &model, test, &clients[c].label_distribution)?;
            pers.push(p);
            glob.push(g);
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);

    let locals = ok_ids.iter().copied().zip(singles).collect();
    Ok(RoundOutput {
        metrics: RoundMetrics {
            round,
            algorithm,
            participants: ok_ids,
            skipped,
            mean_pairwise_cosine,
            mean_alpha_entropy,
            global_loss,
            mean_personalized_accuracy: mean(&pers),
            mean_global_accuracy: mean(&glob),
        },
        global: new_global,
        states,
        locals,
    })
}

/// Outcome of the FedAvg prefix used to seed the bases.
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub bases: BasisSet,
    pub metrics: Vec<RoundMetrics>,
    pub fedavg_rounds: usize,
}

/// Run FedAvg for `⌊warm_start_fraction · T⌋` rounds, cluster the last
/// round's local models into `K` groups and use the centroids as bases; the
/// FedAvg global model becomes the major basis when one is configured.
pub fn warm_start(spec: &MlpSpec, clients: &[ClientDataset], cfg: &FedConfig) -> Result<WarmStart> {
    warm_start_with(spec, clients, cfg, &RunOptions::default())
}

fn warm_start_with(spec: &MlpSpec, clients: &[ClientDataset], cfg: &FedConfig, opts: &RunOptions) -> Result<WarmStart> {
    cfg.validate()?;
    let rounds = cfg.warm_start_rounds();
    if rounds == 0 {
        return Err(Error::Config("warm start needs at least one FedAvg round".into()));
    }
    if clients.len() < cfg.num_bases {
        return Err(Error::Config(format!(
            "warm start clusters {} clients into {} bases",
            clients.len(),
            cfg.num_bases
        )));
    }
    let mut fedavg = cfg.clone();
    fedavg.algorithm = Algorithm::Fedavg;
    if cfg.aggregation_weighting.is_none() {
        fedavg.aggregation_weighting = Some(Weighting::ByDataSize);
    }
    let mut global = GlobalModel::Single(init_single(spec, cfg));
    let mut metrics = Vec::with_capacity(rounds);
    let mut locals = Vec::new();
    for round in 0..rounds {
        let out = run_round(spec, clients, &fedavg, Algorithm::Fedavg, &global, round, opts)?;
        global = out.global;
        metrics.push(out.metrics);
        locals = out.locals;
    }
    if locals.len() < cfg.num_bases {
        return Err(Error::Config(format!(
            "last warm-start round returned {} local models for {} bases",
            locals.len(),
            cfg.num_bases
        )));
    }
    let points: Vec<&[f64]> = locals.iter().map(|(_, p)| p.values()).collect();
    let clustering = kmeans::kmeans(&points, cfg.num_bases, &mut cfg.seed.stream("kmeans-warm", &[]))?;
    let block_spec = spec.block_spec();
    let mut centroids = clustering.centroids;

    // coinciding centroids would start at the collapse fixed point
    let jitter = Normal::new(0.0, 1e-3).expect("valid normal");
    let mut rng = cfg.seed.stream("warm-jitter", &[]);
    for k in 1..centroids.len() {
        if centroids[..k].iter().any(|c| *c == centroids[k]) {
            for v in centroids[k].iter_mut() {
                *v += jitter.sample(&mut rng);
            }
        }
    }
    let bases = centroids
        .into_iter()
        .map(|c| ParamVector::new(c, block_spec.clone()))
        .collect::<Result<Vec<_>>>()?;
    let major = if cfg.use_major {
        global.as_single().cloned()
    } else {
        None
    };
    Ok(WarmStart {
        bases: BasisSet::new(bases, major)?,
        metrics,
        fedavg_rounds: rounds,
    })
}

/// Run `cfg.rounds` rounds of the configured algorithm.
pub fn run_federation(
    spec: &MlpSpec,
    clients: &[ClientDataset],
    cfg: &FedConfig,
    opts: &RunOptions,
) -> Result<FederationOutcome> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(Error::Config("no clients".into()));
    }
    for c in clients {
        if c.dim != spec.input_dim() {
            return Err(Error::mismatch(format!("client {} features", c.id), spec.input_dim(), c.dim));
        }
    }
    let mut metrics = Vec::with_capacity(cfg.rounds);
    let mut first_round = 0;
    let mut global = match cfg.algorithm {
        Algorithm::Fedavg => GlobalModel::Single(init_single(spec, cfg)),
        _ if cfg.warm_start_rounds() > 0 => {
            let ws = warm_start_with(spec, clients, cfg, opts)?;
            metrics = ws.metrics;
            first_round = ws.fedavg_rounds;
            GlobalModel::Bases(ws.bases)
        }
        _ => GlobalModel::Bases(init_bases(spec, cfg)?),
    };
    let initial_cosine = global
        .as_bases()
        .and_then(|s| diagnostics::mean_pairwise_cosine(s).ok());
    let mut last_states = BTreeMap::new();
    for round in first_round..cfg.rounds {
        let out = run_round(spec, clients, cfg, cfg.algorithm, &global, round, opts)?;
        global = out.global;
        metrics.push(out.metrics);
        last_states = out.states;
    }
    Ok(FederationOutcome {
        global,
        metrics,
        initial_cosine,
        last_states,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierMode {
    #[default]
    Frozen,
    Trained,
}

/// Settings for fitting a new client's combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PersonalizeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_logits: f64,
    pub lr_classifier: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub classifier_mode: ClassifierMode,
}

impl Default for PersonalizeConfig {
    fn default() -> Self {
        PersonalizeConfig {
            epochs: 20,
            batch_size: 16,
            lr_logits: 0.05,
            lr_classifier: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            classifier_mode: ClassifierMode::Frozen,
        }
    }
}

/// A new client's personalized model.
#[derive(Debug, Clone)]
pub struct Personalized {
    pub state: CombinationState,
    /// Additive correction to the classifier block (zero elsewhere).
    pub classifier_delta: Option<ParamVector>,
    pub model: ParamVector,
    /// Number of scalars that were optimized.
    pub trainable_params: usize,
}

/// Fit `ψ` (and optionally a classifier correction) with the bases frozen.
///
/// `on_epoch(e, model)` sees the personalized model after `e` epochs,
/// starting with the uniform combination at `e = 0`.
pub fn personalize_new_client(
    spec: &MlpSpec,
    bases: &BasisSet,
    data: &ClientDataset,
    cfg: &PersonalizeConfig,
    rng: &mut StreamRng,
    mut on_epoch: impl FnMut(usize, &ParamVector),
) -> Result<Personalized> {
    non_empty(data)?;
    let mut state = CombinationState::uniform(bases.num_blocks(), bases.k(), 1.0)?;
    let sgd = |lr| SgdParams {
        lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    let mut opt_logits = Sgd::new(sgd(cfg.lr_logits), state.trainable_params());
    let cls = spec.classifier_block();
    let mut delta = match cfg.classifier_mode {
        ClassifierMode::Frozen => None,
        ClassifierMode::Trained => Some(ParamVector::zeros(bases.block_spec().clone())),
    };
    let cls_len = bases.block_spec().blocks()[cls.min(bases.num_blocks() - 1)].len;
    let mut opt_cls = Sgd::new(sgd(cfg.lr_classifier), cls_len);
    let trainable_params = state.trainable_params() + delta.as_ref().map_or(0, |_| cls_len);
    if delta.is_some() && bases.num_blocks() != spec.num_layers() {
        return Err(Error::Config("classifier training needs one block per layer".into()));
    }

    let model_of = |state: &CombinationState, delta: &Option<ParamVector>| -> Result<ParamVector> {
        let mut m = basis::combine(bases, state)?;
        if let Some(d) = delta {
            for (x, y) in m.values_mut().iter_mut().zip(d.values()) {
                *x += y;
            }
        }
        Ok(m)
    };
    on_epoch(0, &model_of(&state, &delta)?);
    for epoch in 1..=cfg.epochs {
        for rows in epoch_batches(data.len(), cfg.batch_size, rng) {
            let grads = basis::combined_gradients_with_offset(
                spec,
                bases,
                &state,
                delta.as_ref(),
                &data.batch(&rows)?,
                GradTargets::LOGITS,
            )?;
            opt_logits.step(state.logits_mut().as_mut_slice(), grads.logits.as_slice());
            if let Some(d) = delta.as_mut() {
                opt_cls.step(d.block_mut(cls), grads.theta.block(cls));
            }
        }
        on_epoch(epoch, &model_of(&state, &delta)?);
    }
    let model = finite(model_of(&state, &delta)?)?;
    Ok(Personalized {
        state,
        classifier_delta: delta,
        model,
        trainable_params,
    })
}

/// How a new client adapts a trained global model.
#[derive(Debug, Clone, Copy)]
pub enum Personalizer<'a> {
    /// Fit the combination (and optionally the classifier) over frozen bases.
    Combination {
        bases: &'a BasisSet,
        cfg: &'a PersonalizeConfig,
    },
    /// Fine-tune every parameter of a single model.
    FineTune {
        model: &'a ParamVector,
        epochs: usize,
        batch_size: usize,
        sgd: SgdParams,
    },
}

/// Per-epoch personalized accuracy on the test and validation sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub test: Vec<f64>,
    pub val: Vec<f64>,
    pub trainable_params: usize,
    pub model: ParamVector,
}

/// Personalize on `data`, scoring every epoch (entry 0 is the start point)
/// with the client's label distribution.
pub fn personalization_curve(
    spec: &MlpSpec,
    personalizer: Personalizer,
    data: &ClientDataset,
    test: &EvalSet,
    val: &EvalSet,
    rng: &mut StreamRng,
) -> Result<Curve> {
    let mut test_acc = Vec::new();
    let mut val_acc = Vec::new();
    let mut failure = None;
    let mut score = |_: usize, m: &ParamVector| {
        let r = evaluate_model(spec, m, test, &data.label_distribution)
            .and_then(|(t, _)| Ok((t, evaluate_model(spec, m, val, &data.label_distribution)?.0)));
        match r {
            Ok((t, v)) => {
                test_acc.push(t);
                val_acc.push(v);
            }
            Err(e) => failure = failure.take().or(Some(e)),
        }
    };
    let (model, trainable_params) = match personalizer {
        Personalizer::Combination { bases, cfg } => {
            let p = personalize_new_client(spec, bases, data, cfg, rng, &mut score)?;
            (p.model, p.trainable_params)
        }
        Personalizer::FineTune {
            model,
            epochs,
            batch_size,
            sgd,
        } => {
            let m = finetune_full(spec, model, data, epochs, batch_size, sgd, rng, &mut score)?;
            (m, spec.param_count())
        }
    };
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(Curve {
        test: test_acc,
        val: val_acc,
        trainable_params,
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::pflbed::label_distribution;
    use rand::Rng;

    fn spec() -> MlpSpec {
        MlpSpec::new(vec![3, 6, 3], Activation::Relu).unwrap()
    }

    fn client(id: usize, n: usize, seed: u64) -> ClientDataset {
        let mut rng = RngSeed(seed).stream("client", &[id as u64]);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let features = labels
            .iter()
            .flat_map(|&y| (0..3).map(move |j| if j == y { 1.5 } else { 0.0 }))
            .map(|v: f64| v + rng.random_range(-0.5..0.5))
            .collect::<Vec<_>>();
        ClientDataset {
            id,
            domain: "d".into(),
            dim: 3,
            label_distribution: label_distribution(labels.iter().copied(), 3),
            features,
            labels,
        }
    }

    fn cfg() -> FedConfig {
        FedConfig {
            rounds: 3,
            local_epochs: 2,
            batch_size: 4,
            num_bases: 3,
            use_major: false,
            warm_start_fraction: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn aggregate_examples() {
        let bs = std::sync::Arc::new(nn::BlockSpec::single(1).unwrap());
        let v = |x: f64| ParamVector::new(vec![x], bs.clone()).unwrap();
        assert_eq!(aggregate(&[&v(1.0), &v(3.0)], &[0.5, 0.5]).unwrap().values(), &[2.0]);
        assert_eq!(aggregate(&[&v(0.0), &v(4.0)], &[0.25, 0.75]).unwrap().values(), &[3.0]);
        assert_eq!(aggregate(&[&v(7.25)], &[1.0]).unwrap().values(), &[7.25]);
        assert!(aggregate(&[&v(1.0), &v(3.0)], &[0.5, 0.4]).is_err());
        assert!(aggregate(&[], &[]).is_err());
        let other = ParamVector::new(vec![1.0, 2.0], std::sync::Arc::new(nn::BlockSpec::single(2).unwrap())).unwrap();
        assert!(aggregate(&[&v(1.0), &other], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn aggregating_copies_is_exact() {
        let s = spec();
        let p = init_params_with(&s, &mut RngSeed(1).stream("t", &[]));
        let copies = vec![&p; 7];
        assert_eq!(aggregate(&copies, &[1.0 / 7.0; 7]).unwrap(), p);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let s = spec();
        let theta = init_single(&s, &cfg());
        let data = client(0, 10, 1);
        let c = FedConfig { lr_bases: 0.0, lr_logits: 0.0, ..cfg() };
        let out = client_update_fedavg(&s, &theta, &data, &c, &mut RngSeed(0).stream("x", &[])).unwrap();
        assert_eq!(out, theta);
        let set = init_bases(&s, &c).unwrap();
        let u = client_update_fedbasis_naive(&s, &set, &data, &c, &mut RngSeed(0).stream("x", &[])).unwrap();
        assert_eq!(u.bases, set);
    }

    #[test]
    fn single_full_batch_step_matches_gradient_step() {
        let s = spec();
        let theta = init_single(&s, &cfg());
        let data = client(0, 10, 2);
        let c = FedConfig { local_epochs: 1, batch_size: 10, momentum: 0.0, weight_decay: 0.0, lr_bases: 0.3, ..cfg() };
        let out = client_update_fedavg(&s, &theta, &data, &c, &mut RngSeed(0).stream("x", &[])).unwrap();
        // shuffling changes summation order only; compare to rounding
        let g = nn::grad_params(&s, &theta, &data.full_batch().unwrap()).unwrap();
        for ((o, t), gv) in out.values().iter().zip(theta.values()).zip(g.values()) {
            assert!((o - (t - 0.3 * gv)).abs() < 1e-14);
        }
    }

    #[test]
    fn empty_client_is_an_error() {
        let s = spec();
        let mut data = client(0, 4, 3);
        data.features.clear();
        data.labels.clear();
        let err = client_update_fedavg(&s, &init_single(&s, &cfg()), &data, &cfg(), &mut RngSeed(0).stream("x", &[]));
        assert!(matches!(err, Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn single_basis_naive_matches_fedavg() {
        let s = spec();
        let c = FedConfig { num_bases: 1, ..cfg() };
        let data = client(0, 13, 4);
        let set = init_bases(&s, &c).unwrap();
        let a = client_update_fedavg(&s, &set.bases()[0], &data, &c, &mut RngSeed(5).stream("x", &[])).unwrap();
        let b = client_update_fedbasis_naive(&s, &set, &data, &c, &mut RngSeed(5).stream("x", &[])).unwrap();
        assert_eq!(b.bases.bases()[0], a);
    }

    #[test]
    fn identical_bases_keep_uniform_alpha() {
        let s = spec();
        let c = cfg();
        let v = init_single(&s, &c);
        let set = BasisSet::new(vec![v.clone(), v.clone(), v], None).unwrap();
        let data = client(0, 12, 6);
        let u = client_update_fedbasis(&s, &set, &data, &c, &mut RngSeed(1).stream("a", &[]), &mut RngSeed(1).stream("b", &[])).unwrap();
        for a in u.state.coefficients().as_slice() {
            assert!((a - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_rounds_return_initial_model() {
        let s = spec();
        let clients: Vec<_> = (0..3).map(|i| client(i, 8, 7)).collect();
        let c = FedConfig { rounds: 0, ..cfg() };
        let out = run_federation(&s, &clients, &c, &RunOptions::default()).unwrap();
        assert!(out.metrics.is_empty());
        assert_eq!(out.global, GlobalModel::Bases(init_bases(&s, &c).unwrap()));
    }

    #[test]
    fn failed_client_is_skipped() {
        let s = spec();
        let mut clients: Vec<_> = (0..3).map(|i| client(i, 8, 8)).collect();
        clients[1].features.clear();
        clients[1].labels.clear();
        let c = FedConfig { rounds: 1, algorithm: Algorithm::Fedavg, ..cfg() };
        let out = run_federation(&s, &clients, &c, &RunOptions::default()).unwrap();
        assert_eq!(out.metrics[0].participants, vec![0, 2]);
        assert_eq!(out.metrics[0].skipped.len(), 1);
    }

    #[test]
    fn round_with_no_survivors_fails() {
        let clients: Vec<_> = (0..2).map(|i| client(i, 8, 8)).collect();
        let c = FedConfig { rounds: 1, lr_bases: 1e300, lr_logits: 1e300, ..cfg() };
        let err = run_federation(&spec(), &clients, &c, &RunOptions::default()).unwrap_err();
        assert!(matches!(err, Error::RoundFailed { round: 0, count: 2, .. }), "{err}");
        assert!(!err.is_validation());
    }

    #[test]
    fn partial_participation_samples_ceil_fraction() {
        let picked = sample_clients(10, 0.25, 3, RngSeed(1));
        assert_eq!(picked.len(), 3);
        assert!(picked.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(picked, sample_clients(10, 0.25, 3, RngSeed(1)));
    }

    #[test]
    fn warm_start_counts_rounds_and_needs_enough_clients() {
        let s = spec();
        let clients: Vec<_> = (0..4).map(|i| client(i, 8, 9)).collect();
        let c = FedConfig { rounds: 10, warm_start_fraction: 0.3, num_bases: 2, use_major: true, ..cfg() };
        let ws = warm_start(&s, &clients, &c).unwrap();
        assert_eq!(ws.fedavg_rounds, 3);
        assert_eq!(ws.metrics.len(), 3);
        assert!(ws.bases.has_major());
        let too_many = FedConfig { num_bases: 5, ..c };
        assert!(matches!(warm_start(&s, &clients, &too_many), Err(Error::Config(_))));
    }

    #[test]
    fn personalization_with_zero_epochs_is_uniform() {
        let s = spec();
        let c = cfg();
        let set = init_bases(&s, &c).unwrap();
        let data = client(0, 9, 10);
        let pc = PersonalizeConfig { epochs: 0, ..Default::default() };
        let p = personalize_new_client(&s, &set, &data, &pc, &mut RngSeed(0).stream("p", &[]), |_, _| {}).unwrap();
        let uniform = basis::combine(&set, &CombinationState::uniform(2, 3, 1.0).unwrap()).unwrap();
        assert_eq!(p.model, uniform);
        assert_eq!(p.trainable_params, 2 * 3);
        let pc = PersonalizeConfig { classifier_mode: ClassifierMode::Trained, ..pc };
        let p = personalize_new_client(&s, &set, &data, &pc, &mut RngSeed(0).stream("p", &[]), |_, _| {}).unwrap();
        assert_eq!(p.trainable_params, 2 * 3 + 7 * 3);
    }

    #[test]
    fn config_validation() {
        assert!(FedConfig { temperature: 0.0, ..cfg() }.validate().is_err());
        assert!(FedConfig { momentum: 1.0, ..cfg() }.validate().is_err());
        assert!(FedConfig { warm_start_fraction: 1.0, ..cfg() }.validate().is_err());
        assert!(FedConfig { participation_fraction: 0.0, ..cfg() }.validate().is_err());
        assert!(cfg().validate().is_ok());
    }
}
