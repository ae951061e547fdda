//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs without the libtest harness so the lines always show.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use fedbasis::basis::{self, combine, BasisSet, CombinationState};
use fedbasis::cli::{self, checkpoint, ExperimentConfig, Overrides};
use fedbasis::diagnostics::{kmeans_compress, last_best, pca_compress};
use fedbasis::nn::{self, MlpSpec, ParamVector};
use fedbasis::pflbed::*;
use fedbasis::protocol::*;
use fedbasis::rng::RngSeed;
use serde_json::json;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
/// Seed for the single-run criteria.
const CANONICAL_SEED: u64 = 0;

const FD_TOLERANCE: f64 = 1e-4;
const FD_INSTANCES: usize = 100;
const FD_BUDGET: Duration = Duration::from_secs(30);
const IDENTITY_TOLERANCE: f64 = 1e-12;
const COLLAPSE_COSINE_RISE: f64 = 0.3;
const COLLAPSE_ENTROPY_SHARE: f64 = 0.95;
const COLLAPSE_BUDGET: Duration = Duration::from_secs(180);
const MITIGATION_COSINE_GAP: f64 = 0.05;
const MITIGATION_ENTROPY_SHARE: f64 = 0.8;
const PERSONALIZATION_MARGIN: f64 = 0.03;
const SEEDS_REQUIRED: usize = 4;
const SCARCE_SAMPLES: usize = 8;
const COMPRESSION_DROP: f64 = 0.05;
const COMPRESSED_RANK: usize = 4;
const EXACT_RECONSTRUCTION: f64 = 1e-8;
const NAIVE_DISCREPANCY: f64 = 0.3;
const SMALL_CLIENT: usize = 64;
const ZERO_MISMATCH: f64 = 1e-12;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

/// The standard synthetic benchmark: default generator, 10 participating
/// and 10 new clients per domain.
fn standard_bench(seed: u64) -> Bench {
    let bench = BenchConfig {
        participating_per_domain: 10,
        new_per_domain: 10,
        ..Default::default()
    };
    synthetic_bench(&SyntheticConfig::default(), &bench, seed)
}

/// Defaults without the major basis and warm start, so training starts from
/// independently random bases.
fn plain(algorithm: Algorithm, seed: u64) -> FedConfig {
    FedConfig {
        algorithm,
        use_major: false,
        warm_start_fraction: 0.0,
        seed: RngSeed(seed),
        ..Default::default()
    }
}

fn train(spec: &MlpSpec, bench: &Bench, cfg: &FedConfig) -> FederationOutcome {
    run_federation(spec, &bench.data.participating, cfg, &RunOptions::default()).unwrap()
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let mut rng = RngSeed(CANONICAL_SEED).stream("acceptance-fd", &[]);
    let mut worst = GradErrors::default();
    for i in 0..FD_INSTANCES {
        let inst = random_instance(&mut rng, 4, i % 2 == 1);
        let e = check_instance(&inst, 64, &mut rng);
        worst.params = worst.params.max(e.params);
        worst.bases = worst.bases.max(e.bases);
        worst.logits = worst.logits.max(e.logits);
    }
    let elapsed = start.elapsed();
    let pass = worst.params < FD_TOLERANCE
        && worst.bases < FD_TOLERANCE
        && worst.logits < FD_TOLERANCE
        && elapsed < FD_BUDGET;
    verdict(
        pass,
        format!(
            "{FD_INSTANCES} instances, max rel err params {:.2e} bases {:.2e} logits {:.2e} (< {FD_TOLERANCE:.0e}), {:.1}s",
            worst.params,
            worst.bases,
            worst.logits,
            elapsed.as_secs_f64()
        ),
    )
}

fn gradient_identities() -> Verdict {
    let mut rng = RngSeed(CANONICAL_SEED).stream("acceptance-identity", &[]);
    let mut scaled = 0.0f64;
    let mut collapsed = 0.0f64;
    for i in 0..FD_INSTANCES {
        let inst = random_instance(&mut rng, 4, i % 2 == 0);
        let theta = combine(&inst.set, &inst.state).unwrap();
        let g = nn::grad_params(&inst.spec, &theta, &inst.batch).unwrap();
        let alpha = inst.state.coefficients();
        let s = inst.set.scale();
        let gb = basis::grad_bases(&inst.spec, &inst.set, &inst.state, &inst.batch).unwrap();
        for (k, gk) in gb.iter().enumerate() {
            for b in 0..inst.set.num_blocks() {
                for (x, y) in gk.block(b).iter().zip(g.block(b)) {
                    scaled = scaled.max((x - s * alpha.get(b, k) * y).abs());
                }
            }
        }

        let k = 2 + i % 3;
        let set = BasisSet::new(vec![inst.set.bases()[0].clone(); k], inst.set.major().cloned()).unwrap();
        let state = random_state(set.num_blocks(), k, &mut rng);
        let gl = basis::grad_logits(&inst.spec, &set, &state, &inst.batch).unwrap();
        collapsed = gl.as_slice().iter().fold(collapsed, |m, v| m.max(v.abs()));
    }
    verdict(
        scaled <= IDENTITY_TOLERANCE && collapsed <= IDENTITY_TOLERANCE,
        format!("max |grad_bases - alpha * grad_params| {scaled:.1e}, identical-bases max |grad_logits| {collapsed:.1e} (<= {IDENTITY_TOLERANCE:.0e})"),
    )
}

fn fedavg_reduction() -> Verdict {
    let bench = synthetic_bench(
        &SyntheticConfig::default(),
        &BenchConfig {
            participating_per_domain: 2,
            new_per_domain: 1,
            ..Default::default()
        },
        CANONICAL_SEED,
    );
    let spec = default_spec();
    // both algorithms must aggregate with the same weights
    let avg_cfg = FedConfig {
        rounds: 20,
        num_bases: 1,
        aggregation_weighting: Some(Weighting::ByDataSize),
        ..plain(Algorithm::Fedavg, CANONICAL_SEED)
    };
    let fb_cfg = FedConfig {
        algorithm: Algorithm::Fedbasis,
        ..avg_cfg.clone()
    };
    let avg = train(&spec, &bench, &avg_cfg);
    let fb = train(&spec, &bench, &fb_cfg);
    let single = avg.global.as_single().unwrap();
    let basis = &fb.global.as_bases().unwrap().bases()[0];
    let differing = single.values().iter().zip(basis.values()).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
    let losses = |o: &FederationOutcome| o.metrics.iter().map(|m| m.global_loss.to_bits()).collect::<Vec<_>>();
    verdict(
        differing == 0 && losses(&avg) == losses(&fb) && bench.data.participating.len() == 8,
        format!(
            "M = {}, T = 20: {differing} of {} parameters differ, per-round losses identical: {}",
            bench.data.participating.len(),
            single.len(),
            losses(&avg) == losses(&fb)
        ),
    )
}

struct CollapseRun {
    seed: u64,
    initial_cosine: f64,
    naive_cosine: f64,
    naive_entropy: f64,
    improved_cosine: f64,
    improved_entropy: f64,
}

fn collapse_runs() -> (Vec<CollapseRun>, Duration) {
    let spec = default_spec();
    let mut runs = Vec::new();
    let mut slowest = Duration::ZERO;
    for seed in SEEDS {
        let bench = standard_bench(seed);
        let start = Instant::now();
        let naive = train(&spec, &bench, &plain(Algorithm::FedbasisNaive, seed));
        slowest = slowest.max(start.elapsed());
        let improved = train(&spec, &bench, &plain(Algorithm::Fedbasis, seed));
        let last = |o: &FederationOutcome| {
            let m = o.metrics.last().unwrap();
            (m.mean_pairwise_cosine.unwrap(), m.mean_alpha_entropy.unwrap())
        };
        let (naive_cosine, naive_entropy) = last(&naive);
        let (improved_cosine, improved_entropy) = last(&improved);
        runs.push(CollapseRun {
            seed,
            initial_cosine: naive.initial_cosine.unwrap(),
            naive_cosine,
            naive_entropy,
            improved_cosine,
            improved_entropy,
        });
    }
    (runs, slowest)
}

fn collapse_reproduction(runs: &[CollapseRun], slowest: Duration) -> Verdict {
    let ln_k = (FedConfig::default().num_bases as f64).ln();
    let ok = |r: &CollapseRun| {
        r.naive_cosine >= r.initial_cosine + COLLAPSE_COSINE_RISE && r.naive_entropy >= COLLAPSE_ENTROPY_SHARE * ln_k
    };
    let detail = runs
        .iter()
        .map(|r| format!("s{} cos {:.3}->{:.3} H {:.3}", r.seed, r.initial_cosine, r.naive_cosine, r.naive_entropy))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(
        runs.iter().all(ok) && slowest < COLLAPSE_BUDGET,
        format!("{detail} (ln K = {ln_k:.3}); slowest run {:.1}s", slowest.as_secs_f64()),
    )
}

fn collapse_mitigation(runs: &[CollapseRun]) -> Verdict {
    let ln_k = (FedConfig::default().num_bases as f64).ln();
    let ok = |r: &CollapseRun| {
        r.improved_cosine <= r.naive_cosine - MITIGATION_COSINE_GAP
            && r.improved_entropy <= MITIGATION_ENTROPY_SHARE * ln_k
    };
    let detail = runs
        .iter()
        .map(|r| format!("s{} cos {:.3} vs {:.3} H {:.3}", r.seed, r.improved_cosine, r.naive_cosine, r.improved_entropy))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(runs.iter().all(ok), detail)
}

struct PersonalizationRun {
    seed: u64,
    fedbasis: f64,
    uniform: f64,
    fedavg: f64,
    delta_fedbasis: f64,
    delta_finetune: f64,
    frozen_counts_ok: bool,
    trained_counts_ok: bool,
    compression: Option<Compression>,
}

struct Compression {
    original: f64,
    pca: f64,
    kmeans: f64,
    full_rank_error: f64,
}

fn personalized(spec: &MlpSpec, bench: &Bench, model: &ParamVector, data: &ClientDataset) -> f64 {
    evaluate_model(spec, model, &bench.data.test[&data.domain], &data.label_distribution).unwrap().0
}

fn mean_accuracy(spec: &MlpSpec, bench: &Bench, models: &[ParamVector], clients: &[ClientDataset]) -> f64 {
    let acc: Vec<f64> = clients.iter().zip(models).map(|(c, m)| personalized(spec, bench, m, c)).collect();
    mean(&acc)
}

fn compression(spec: &MlpSpec, bench: &Bench, global: &ParamVector, seed: u64) -> Compression {
    let clients = &bench.data.participating;
    let sgd = SgdParams {
        lr: 0.05,
        momentum: 0.9,
        weight_decay: 1e-4,
    };
    let models: Vec<ParamVector> = clients
        .iter()
        .map(|c| finetune_full(spec, global, c, 20, 8, sgd, &mut RngSeed(seed).stream("ft9", &[c.id as u64]), |_, _| {}).unwrap())
        .collect();
    let pca = pca_compress(&models, COMPRESSED_RANK).unwrap();
    let (_, centroids) = kmeans_compress(&models, COMPRESSED_RANK, &mut RngSeed(seed).stream("km", &[])).unwrap();
    let full = pca_compress(&models, models.len()).unwrap();
    let (mut err, mut norm) = (0.0, 0.0);
    for (m, r) in models.iter().zip(&full.reconstructed) {
        for (a, b) in m.values().iter().zip(r.values()) {
            err += (a - b) * (a - b);
            norm += a * a;
        }
    }
    Compression {
        original: mean_accuracy(spec, bench, &models, clients),
        pca: mean_accuracy(spec, bench, &pca.reconstructed, clients),
        kmeans: mean_accuracy(spec, bench, &centroids, clients),
        full_rank_error: (err / norm).sqrt(),
    }
}

// stream names are the ones the tolerances were calibrated with
fn personalization_run(seed: u64) -> PersonalizationRun {
    let spec = default_spec();
    let bench = standard_bench(seed);
    let classes = bench.data.classes;
    let fb = train(&spec, &bench, &plain(Algorithm::Fedbasis, seed));
    let avg = train(&spec, &bench, &plain(Algorithm::Fedavg, seed));
    let bases = fb.global.as_bases().unwrap();
    let global = avg.global.as_single().unwrap();
    let uniform = combine(bases, &CombinationState::uniform(bases.num_blocks(), bases.k(), 1.0).unwrap()).unwrap();
    let trained = PersonalizeConfig {
        classifier_mode: ClassifierMode::Trained,
        ..Default::default()
    };
    let frozen = PersonalizeConfig::default();
    let finetune = Personalizer::FineTune {
        model: global,
        epochs: 20,
        batch_size: 16,
        sgd: SgdParams {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
        },
    };
    let expected_frozen = bases.num_blocks() * bases.k();
    let expected_trained = expected_frozen + spec.block_spec().blocks()[spec.classifier_block()].len;

    let (mut acc_fb, mut acc_uniform, mut acc_avg) = (vec![], vec![], vec![]);
    let (mut delta_fb, mut delta_ft) = (vec![], vec![]);
    let (mut frozen_counts_ok, mut trained_counts_ok) = (true, true);
    for c in &bench.data.new {
        let (test, val) = (&bench.data.test[&c.domain], &bench.data.val[&c.domain]);
        let p = personalize_new_client(&spec, bases, c, &trained, &mut RngSeed(seed).stream("pers", &[c.id as u64]), |_, _| {}).unwrap();
        trained_counts_ok &= p.trainable_params == expected_trained;
        acc_fb.push(personalized(&spec, &bench, &p.model, c));
        acc_uniform.push(personalized(&spec, &bench, &uniform, c));
        acc_avg.push(personalized(&spec, &bench, global, c));
        let f = personalize_new_client(&spec, bases, c, &frozen, &mut RngSeed(seed).stream("frozen", &[c.id as u64]), |_, _| {}).unwrap();
        frozen_counts_ok &= f.trainable_params == expected_frozen;

        let scarce = c.subsample_to(SCARCE_SAMPLES, classes, &mut RngSeed(seed).stream("scarce", &[c.id as u64]));
        let combination = Personalizer::Combination { bases, cfg: &trained };
        let curve_fb = personalization_curve(&spec, combination, &scarce, test, val, &mut RngSeed(seed).stream("pers2", &[c.id as u64])).unwrap();
        let curve_ft = personalization_curve(&spec, finetune, &scarce, test, val, &mut RngSeed(seed).stream("ft", &[c.id as u64])).unwrap();
        delta_fb.push(last_best(&curve_fb.test, &curve_fb.val).unwrap().delta);
        delta_ft.push(last_best(&curve_ft.test, &curve_ft.val).unwrap().delta);
    }
    PersonalizationRun {
        seed,
        fedbasis: mean(&acc_fb),
        uniform: mean(&acc_uniform),
        fedavg: mean(&acc_avg),
        delta_fedbasis: mean(&delta_fb),
        delta_finetune: mean(&delta_ft),
        frozen_counts_ok,
        trained_counts_ok,
        compression: (seed == CANONICAL_SEED).then(|| compression(&spec, &bench, global, seed)),
    }
}

fn personalization_benefit(runs: &[PersonalizationRun]) -> Verdict {
    let ok = |r: &PersonalizationRun| {
        r.fedbasis >= r.uniform + PERSONALIZATION_MARGIN && r.fedbasis >= r.fedavg + PERSONALIZATION_MARGIN
    };
    let passed = runs.iter().filter(|r| ok(r)).count();
    let detail = runs
        .iter()
        .map(|r| format!("s{} {:.3} vs uniform {:.3} fedavg {:.3}", r.seed, r.fedbasis, r.uniform, r.fedavg))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(passed >= SEEDS_REQUIRED, format!("{passed}/{} seeds: {detail}", runs.len()))
}

fn robustness_gap(runs: &[PersonalizationRun]) -> Verdict {
    let passed = runs.iter().filter(|r| r.delta_fedbasis <= r.delta_finetune).count();
    let detail = runs
        .iter()
        .map(|r| format!("s{} {:.4} vs {:.4}", r.seed, r.delta_fedbasis, r.delta_finetune))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(
        passed >= SEEDS_REQUIRED,
        format!("{passed}/{} seeds, {SCARCE_SAMPLES} samples, mean |delta| fedbasis vs fedavg+ft: {detail}", runs.len()),
    )
}

/// Counts from the library plus the assertion inside the `personalize`
/// command's report.
fn parameter_count(runs: &[PersonalizationRun], report: &Result<String, String>) -> Verdict {
    let library = runs.iter().all(|r| r.frozen_counts_ok && r.trained_counts_ok);
    match report {
        Ok(summary) => verdict(library, format!("library counts exact: {library}; run report: {summary}")),
        Err(e) => verdict(false, format!("library counts exact: {library}; run report failed: {e}")),
    }
}

fn compression_direction(runs: &[PersonalizationRun]) -> Verdict {
    let c = runs.iter().find_map(|r| r.compression.as_ref()).expect("canonical seed ran");
    let pass = c.original - c.pca >= COMPRESSION_DROP
        && c.original - c.kmeans >= COMPRESSION_DROP
        && c.full_rank_error < EXACT_RECONSTRUCTION;
    verdict(
        pass,
        format!(
            "uncompressed {:.3}, pca-{COMPRESSED_RANK} {:.3}, k-means-{COMPRESSED_RANK} {:.3}, full-rank rel. error {:.1e}",
            c.original, c.pca, c.kmeans, c.full_rank_error
        ),
    )
}

fn benchmark_faithfulness() -> Verdict {
    let bench = synthetic_bench(&SyntheticConfig::default(), &BenchConfig::default(), CANONICAL_SEED);
    let table = &bench.table;
    let mut mismatch = 0.0f64;
    for c in &bench.manifest.clients {
        let test: Vec<usize> = bench.manifest.domain(&c.domain).unwrap().test.iter().map(|&r| table.labels[r]).collect();
        let eval = reweighted_distribution(&c.label_distribution, &test);
        mismatch = mismatch.max(label_discrepancy(&c.label_distribution, &eval).unwrap());
    }
    let mut small = bench.manifest.clone();
    small.clients.retain(|c| c.train.len() <= SMALL_CLIENT);
    let kept = small.participating().count();
    let naive = naive_split_discrepancy(table, &small, RngSeed(CANONICAL_SEED));
    verdict(
        mismatch <= ZERO_MISMATCH && naive > NAIVE_DISCREPANCY && kept > 0,
        format!(
            "max evaluation mismatch {mismatch:.1e}; naive 50/50 split discrepancy {naive:.3} over {kept} clients with <= {SMALL_CLIENT} samples (beta {})",
            BenchConfig::default().beta
        ),
    )
}

fn pipeline_config(out: &Path) -> ExperimentConfig {
    let doc = json!({
        "data": {"synthetic": {"samples_per_domain": 280}},
        "bench": {"participating_per_domain": 2, "new_per_domain": 1},
        "fed": {"rounds": 4, "local_epochs": 1, "warm_start_fraction": 0.5},
        "personalize": {"epochs": 2, "lr_grid": [0.05]},
        "diagnostics": {"finetune_epochs": 1, "pca_components": [1, 8], "kmeans_clusters": [1, 2]},
    });
    let overrides = Overrides {
        seed: Some(CANONICAL_SEED),
        out: Some(out.to_path_buf()),
        set: vec![],
    };
    ExperimentConfig::from_value(doc, &overrides).unwrap()
}

fn run_pipeline(out: &Path) -> Result<BTreeMap<String, Vec<u8>>, Box<dyn std::error::Error>> {
    let mut files = BTreeMap::new();
    for algorithm in [Algorithm::Fedbasis, Algorithm::Fedavg] {
        let dir = out.join(algorithm.as_str());
        let mut cfg = pipeline_config(&dir);
        cfg.fed.algorithm = algorithm;
        cli::cmd_build_bench(&cfg)?;
        cli::cmd_train(&cfg)?;
        cli::cmd_personalize(&cfg)?;
        cli::cmd_diagnose(&cfg)?;
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            let name = format!("{}/{}", algorithm.as_str(), path.file_name().unwrap().to_string_lossy());
            files.insert(name, std::fs::read(&path)?);
        }
    }
    Ok(files)
}

fn snapshot(out: &Path) -> Result<BTreeMap<String, Vec<u8>>, Box<dyn std::error::Error>> {
    let result = run_pipeline(out);
    std::fs::remove_dir_all(out)?;
    result
}

/// The pipeline runs twice in the same directory, since reports record
/// their own paths.
fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let (first, second) = match (snapshot(&out), snapshot(&out)) {
        (Ok(x), Ok(y)) => (x, y),
        (Err(e), _) | (_, Err(e)) => return verdict(false, format!("pipeline failed: {e}")),
    };
    let differing: Vec<&String> = first.keys().filter(|k| first.get(*k) != second.get(*k)).collect();
    let required = ["manifest.json", "metrics.jsonl", "checkpoint.fbas"];
    let complete = ["fedbasis", "fedavg"]
        .iter()
        .all(|alg| required.iter().all(|f| first.contains_key(&format!("{alg}/{f}"))));

    let mut roundtrip = true;
    for alg in ["fedbasis", "fedavg"] {
        let bytes = &first[&format!("{alg}/checkpoint.fbas")];
        let model = checkpoint::decode(bytes).unwrap();
        roundtrip &= &checkpoint::encode(&model) == bytes;
        let again = checkpoint::decode(&checkpoint::encode(&model)).unwrap();
        roundtrip &= again == model;
    }
    verdict(
        differing.is_empty() && complete && first.len() == second.len() && roundtrip,
        format!(
            "{} files compared, differing: {differing:?}; checkpoint roundtrip bit-exact: {roundtrip}",
            first.len()
        ),
    )
}

/// Frozen-classifier personalization through the command, whose report
/// asserts the trainable-parameter count.
fn command_report() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = pipeline_config(dir.path());
    cfg.personalize.classifier_mode = ClassifierMode::Frozen;
    let run = || -> fedbasis::Result<String> {
        cli::cmd_build_bench(&cfg)?;
        cli::cmd_train(&cfg)?;
        let summary = cli::cmd_personalize(&cfg)?;
        let counts = summary
            .methods
            .iter()
            .map(|m| format!("{} trained {} of expected {:?}", m.local_size, m.trainable_params, m.expected_trainable_params))
            .collect::<Vec<_>>();
        Ok(counts.join(", "))
    };
    run().map_err(|e| e.to_string())
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(&str, Verdict)> = Vec::new();
    let mut report = |id: &'static str, v: Verdict| {
        println!("{id} {} {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((id, v));
    };

    report("C1 gradient-correctness", gradient_correctness());
    report("C2 gradient-identities", gradient_identities());
    report("C3 fedavg-reduction", fedavg_reduction());
    let (collapse, slowest) = collapse_runs();
    report("C4 collapse-reproduction", collapse_reproduction(&collapse, slowest));
    report("C5 collapse-mitigation", collapse_mitigation(&collapse));
    let runs: Vec<PersonalizationRun> = SEEDS.iter().map(|&s| personalization_run(s)).collect();
    report("C6 personalization-benefit", personalization_benefit(&runs));
    report("C7 robustness-gap", robustness_gap(&runs));
    report("C8 parameter-count", parameter_count(&runs, &command_report()));
    report("C9 compression-baselines", compression_direction(&runs));
    report("C10 benchmark-faithfulness", benchmark_faithfulness());
    report("C11 determinism-persistence", determinism());

    let failed: Vec<&str> = results.iter().filter(|(_, v)| !v.pass).map(|(id, _)| *id).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.1}s",
        results.len() - failed.len(),
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        eprintln!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
