//! Shared test oracles: central finite differences and random instances.
#![allow(dead_code)]

use std::sync::Arc;

use fedbasis::basis::{combine, BasisSet, CombinationState};
use fedbasis::matrix::Matrix;
use fedbasis::nn::{self, init_params_with, Activation, Batch, MlpSpec, ParamVector};
use fedbasis::pflbed::{build_pflbed, make_synthetic_multidomain, BenchConfig, Benchmark, Manifest, SyntheticConfig, Table};
use fedbasis::rng::{RngSeed, StreamRng};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const STEP: f64 = 1e-5;
/// Added to the denominator of the relative error.
pub const REL_FLOOR: f64 = 1e-8;

pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] += h;
    xm[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + REL_FLOOR)
}

/// Max relative error of `analytic` against finite differences of `f` at `x`,
/// over `coords` (all coordinates when `None`).
pub fn max_rel_err(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], coords: Option<&[usize]>) -> f64 {
    let all: Vec<usize> = (0..x.len()).collect();
    coords
        .unwrap_or(&all)
        .iter()
        .map(|&i| rel_err(analytic[i], central_diff(&f, x, i, STEP)))
        .fold(0.0, f64::max)
}

pub fn normal(rng: &mut StreamRng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn random_spec(rng: &mut StreamRng) -> MlpSpec {
    let shapes: [&[usize]; 5] = [&[3, 2], &[4, 5, 3], &[6, 8, 4], &[16, 32, 7], &[16, 32, 32, 7]];
    let act = if rng.random_bool(0.5) { Activation::Relu } else { Activation::Tanh };
    MlpSpec::new(shapes[rng.random_range(0..shapes.len())].to_vec(), act).unwrap()
}

/// Glorot weights plus small random biases.
pub fn random_params(spec: &MlpSpec, rng: &mut StreamRng) -> ParamVector {
    let mut p = init_params_with(spec, rng);
    for v in p.values_mut() {
        *v += 0.05 * normal(rng);
    }
    p
}

pub fn random_batch(spec: &MlpSpec, n: usize, rng: &mut StreamRng) -> Batch {
    let dim = spec.input_dim();
    let features = (0..n * dim).map(|_| normal(rng)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..spec.num_classes())).collect();
    Batch::new(features, labels, dim).unwrap()
}

pub fn random_state(num_blocks: usize, k: usize, rng: &mut StreamRng) -> CombinationState {
    let logits = Matrix::from_vec(num_blocks, k, (0..num_blocks * k).map(|_| 0.5 * normal(rng)).collect());
    let tau = rng.random_range(0.5..=1.0);
    CombinationState::new(logits, tau).unwrap()
}

pub struct Instance {
    pub spec: MlpSpec,
    pub set: BasisSet,
    pub state: CombinationState,
    pub batch: Batch,
}

pub fn random_instance(rng: &mut StreamRng, max_k: usize, major: bool) -> Instance {
    let spec = random_spec(rng);
    let k = rng.random_range(1..=max_k);
    let bases = (0..k).map(|_| random_params(&spec, rng)).collect();
    let major = major.then(|| random_params(&spec, rng));
    let set = BasisSet::new(bases, major).unwrap();
    let state = random_state(set.num_blocks(), k, rng);
    let n = rng.random_range(1..=8);
    let batch = random_batch(&spec, n, rng);
    Instance { spec, set, state, batch }
}

impl Instance {
    pub fn loss_at(&self, set: &BasisSet, state: &CombinationState) -> f64 {
        let theta = combine(set, state).unwrap();
        nn::forward_loss(&self.spec, &theta, &self.batch).unwrap().0
    }

    /// The set with array `which` (bases first, then the major) replaced.
    pub fn with_array(&self, which: usize, values: &[f64]) -> BasisSet {
        let (mut bases, mut major) = self.set.clone().into_parts();
        let target = if which < bases.len() { &mut bases[which] } else { major.as_mut().unwrap() };
        *target = ParamVector::new(values.to_vec(), Arc::clone(self.set.block_spec())).unwrap();
        BasisSet::new(bases, major).unwrap()
    }

    pub fn with_logits(&self, values: &[f64]) -> CombinationState {
        let l = self.state.logits();
        CombinationState::new(Matrix::from_vec(l.rows(), l.cols(), values.to_vec()), self.state.temperature()).unwrap()
    }
}

/// Up to `limit` distinct coordinates out of `len`.
pub fn sample_coords(len: usize, limit: usize, rng: &mut StreamRng) -> Vec<usize> {
    if len <= limit {
        return (0..len).collect();
    }
    let mut v = rand::seq::index::sample(rng, len, limit).into_vec();
    v.sort_unstable();
    v
}

/// Worst relative errors of the three analytic gradients on one instance.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradErrors {
    pub params: f64,
    pub bases: f64,
    pub logits: f64,
}

pub fn check_instance(inst: &Instance, coord_limit: usize, rng: &mut StreamRng) -> GradErrors {
    let spec = &inst.spec;
    let theta = combine(&inst.set, &inst.state).unwrap();
    let coords = sample_coords(theta.len(), coord_limit, rng);

    let g = nn::grad_params(spec, &theta, &inst.batch).unwrap();
    let bs = theta.block_spec().clone();
    let params = max_rel_err(
        |x| nn::forward_loss(spec, &ParamVector::new(x.to_vec(), bs.clone()).unwrap(), &inst.batch).unwrap().0,
        theta.values(),
        g.values(),
        Some(&coords),
    );

    let gb = fedbasis::basis::grad_bases(spec, &inst.set, &inst.state, &inst.batch).unwrap();
    let gm = fedbasis::basis::grad_major(spec, &inst.set, &inst.state, &inst.batch).unwrap();
    let mut bases = 0.0f64;
    for (which, (array, grad)) in inst.set.arrays().zip(gb.iter().chain(gm.as_ref())).enumerate() {
        let err = max_rel_err(
            |x| inst.loss_at(&inst.with_array(which, x), &inst.state),
            array.values(),
            grad.values(),
            Some(&coords),
        );
        bases = bases.max(err);
    }

    let gl = fedbasis::basis::grad_logits(spec, &inst.set, &inst.state, &inst.batch).unwrap();
    let logits = max_rel_err(
        |x| inst.loss_at(&inst.set, &inst.with_logits(x)),
        inst.state.logits().as_slice(),
        gl.as_slice(),
        None,
    );
    GradErrors { params, bases, logits }
}

/// A synthetic benchmark together with its table and manifest.
pub struct Bench {
    pub table: Table,
    pub manifest: Manifest,
    pub data: Benchmark,
}

pub fn synthetic_bench(synthetic: &SyntheticConfig, bench: &BenchConfig, seed: u64) -> Bench {
    let mut domains = make_synthetic_multidomain(synthetic, RngSeed(seed)).unwrap();
    let table = Table::from_domains(&mut domains).unwrap();
    let manifest = build_pflbed(&table, bench, RngSeed(seed)).unwrap();
    let data = Benchmark::materialize(&table, &manifest).unwrap();
    Bench { table, manifest, data }
}

/// A small benchmark for protocol tests: 4 domains of 280 samples.
pub fn small_bench(seed: u64, participating_per_domain: usize) -> Bench {
    let synthetic = SyntheticConfig {
        samples_per_domain: 280,
        ..Default::default()
    };
    let bench = BenchConfig {
        participating_per_domain,
        new_per_domain: 2,
        ..Default::default()
    };
    synthetic_bench(&synthetic, &bench, seed)
}

pub fn default_spec() -> MlpSpec {
    MlpSpec::new(vec![16, 32, 7], Activation::Relu).unwrap()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
