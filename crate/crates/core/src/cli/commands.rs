//! Subcommand implementations. Every command is a pure function of its
//! configuration; files are written from the calling thread only.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::checkpoint;
use super::config::{DataSource, ExperimentConfig};
use crate::basis::BasisSet;
use crate::diagnostics::{self, ClientCoefficients};
use crate::error::{Error, Result};
use crate::nn::{MlpSpec, ParamVector};
use crate::pflbed::{self, Benchmark, ClientDataset, Manifest, Table};
use crate::protocol::{self, ClassifierMode, GlobalModel, Personalizer, RunOptions, SgdParams};

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// The input table, generated or read from CSV.
pub fn load_table(cfg: &ExperimentConfig) -> Result<Table> {
    match &cfg.data {
        DataSource::Synthetic(s) => {
            let mut domains = pflbed::make_synthetic_multidomain(s, cfg.master_seed())?;
            Table::from_domains(&mut domains)
        }
        DataSource::Csv { path } => Table::read_csv_path(path),
    }
}

/// Table, manifest and model spec of an already built benchmark.
pub struct Loaded {
    pub table: Table,
    pub manifest: Manifest,
    pub bench: Benchmark,
    pub spec: MlpSpec,
}

pub fn load_benchmark(cfg: &ExperimentConfig) -> Result<Loaded> {
    let table = load_table(cfg)?;
    let path = cfg.manifest_path();
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = Manifest::from_json(&text)?;
    if manifest.classes != table.classes {
        return Err(Error::Format(format!(
            "manifest has {} classes but the data has {}",
            manifest.classes, table.classes
        )));
    }
    let bench = Benchmark::materialize(&table, &manifest)?;
    let spec = cfg.model.spec(table.dim, table.classes)?;
    Ok(Loaded {
        table,
        manifest,
        bench,
        spec,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BuildSummary {
    pub manifest: PathBuf,
    pub domains: usize,
    pub participating_clients: usize,
    pub new_clients: usize,
    pub naive_split_discrepancy: f64,
}

/// Build the benchmark manifest (and the generated data for synthetic sources).
pub fn cmd_build_bench(cfg: &ExperimentConfig) -> Result<BuildSummary> {
    let table = load_table(cfg)?;
    let manifest = pflbed::build_pflbed(&table, &cfg.bench, cfg.master_seed())?;
    if let DataSource::Synthetic(_) = cfg.data {
        let mut buf = Vec::new();
        table.write_csv(&mut buf)?;
        write_file(&cfg.out.join("data.csv"), &buf)?;
    }
    let path = cfg.manifest_path();
    write_file(&path, manifest.to_json()?.as_bytes())?;
    let summary = BuildSummary {
        manifest: path,
        domains: manifest.domains.len(),
        participating_clients: manifest.participating().count(),
        new_clients: manifest.new_clients().count(),
        naive_split_discrepancy: pflbed::naive_split_discrepancy(&table, &manifest, cfg.master_seed()),
    };
    log::info!(
        "manifest with {} participating and {} new clients over {} domains",
        summary.participating_clients,
        summary.new_clients,
        summary.domains
    );
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub rounds: usize,
    pub arrays: usize,
}

/// Run federated training; writes `checkpoint.fbas` and `metrics.jsonl`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    let loaded = load_benchmark(cfg)?;
    let opts = RunOptions {
        test_sets: Some(&loaded.bench.test),
        eval_every: cfg.diagnostics.eval_every,
        threads: None,
    };
    let outcome = protocol::run_federation(&loaded.spec, &loaded.bench.participating, &cfg.fed, &opts)?;
    let mut log = Vec::new();
    for m in &outcome.metrics {
        serde_json::to_writer(&mut log, m)?;
        log.push(b'\n');
        log::info!("round {} loss {:.4}", m.round, m.global_loss);
    }
    write_file(&cfg.metrics_path(), &log)?;
    write_file(&cfg.checkpoint_path(), &checkpoint::encode(&outcome.global))?;
    let arrays = match &outcome.global {
        GlobalModel::Single(_) => 1,
        GlobalModel::Bases(b) => b.arrays().count(),
    };
    Ok(TrainSummary {
        checkpoint: cfg.checkpoint_path(),
        metrics: cfg.metrics_path(),
        rounds: outcome.metrics.len(),
        arrays,
    })
}

fn load_model(path: &Path, spec: &MlpSpec) -> Result<GlobalModel> {
    let model = checkpoint::read_path(path)?;
    let blocks = match &model {
        GlobalModel::Single(p) => p.block_spec().clone(),
        GlobalModel::Bases(b) => b.block_spec().clone(),
    };
    if blocks != spec.block_spec() {
        return Err(Error::Checkpoint(format!(
            "{} does not match the configured model",
            path.display()
        )));
    }
    Ok(model)
}

/// One row of the personalization report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub client_id: usize,
    pub method: String,
    pub local_size: String,
    pub last_acc: f64,
    pub best_acc: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub checkpoint: PathBuf,
    pub local_size: String,
    pub lr: f64,
    pub mean_last: f64,
    pub mean_best: f64,
    pub mean_delta: f64,
    pub trainable_params: usize,
    /// `num_blocks × K` when only the combination is trained.
    pub expected_trainable_params: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PersonalizeSummary {
    pub report: PathBuf,
    pub methods: Vec<MethodSummary>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn write_report<W: Write>(rows: &[ReportRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["client_id", "method", "local_size", "last_acc", "best_acc", "delta"])?;
    for r in rows {
        w.write_record([
            r.client_id.to_string(),
            r.method.clone(),
            r.local_size.clone(),
            format!("{:.16e}", r.last_acc),
            format!("{:.16e}", r.best_acc),
            format!("{:.16e}", r.delta),
        ])?;
    }
    w.flush().map_err(|e| Error::io("personalize.csv", e))
}

/// Personalize every new client from each checkpoint, at every local size,
/// picking the learning rate by mean final validation accuracy.
pub fn cmd_personalize(cfg: &ExperimentConfig) -> Result<PersonalizeSummary> {
    let loaded = load_benchmark(cfg)?;
    let spec = &loaded.spec;
    let bench = &loaded.bench;
    let settings = &cfg.personalize;
    let seed = cfg.master_seed();
    let paths = if settings.checkpoints.is_empty() {
        vec![cfg.checkpoint_path()]
    } else {
        settings.checkpoints.clone()
    };
    let mut rows = Vec::new();
    let mut methods = Vec::new();
    for path in &paths {
        let model = load_model(path, spec)?;
        let (method, expected) = match &model {
            GlobalModel::Bases(b) => (
                "fedbasis",
                (settings.classifier_mode == ClassifierMode::Frozen).then(|| b.num_blocks() * b.k()),
            ),
            GlobalModel::Single(_) => ("fedavg_ft", None),
        };
        for (size_idx, (size, &fraction)) in settings.local_sizes.iter().enumerate() {
            let clients: Vec<ClientDataset> = bench
                .new
                .iter()
                .map(|c| c.subsample(fraction, bench.classes, &mut seed.stream("local-size", &[c.id as u64])))
                .collect();
            let mut best: Option<(f64, f64, Vec<protocol::Curve>)> = None;
            for &lr in &settings.lr_grid {
                let pcfg = settings.for_lr(lr);
                let personalizer = match &model {
                    GlobalModel::Bases(b) => Personalizer::Combination { bases: b, cfg: &pcfg },
                    GlobalModel::Single(m) => Personalizer::FineTune {
                        model: m,
                        epochs: settings.epochs,
                        batch_size: settings.batch_size,
                        sgd: SgdParams {
                            lr,
                            momentum: settings.momentum,
                            weight_decay: settings.weight_decay,
                        },
                    },
                };
                let curves = clients
                    .par_iter()
                    .map(|c| {
                        protocol::personalization_curve(
                            spec,
                            personalizer,
                            c,
                            &bench.test[&c.domain],
                            &bench.val[&c.domain],
                            &mut seed.stream("personalize", &[c.id as u64, size_idx as u64]),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                let score = mean(&curves.iter().map(|c| *c.val.last().unwrap()).collect::<Vec<_>>());
                if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                    best = Some((score, lr, curves));
                }
            }
            let (_, lr, curves) = best.expect("non-empty learning-rate grid");
            let mut lb = Vec::new();
            for (c, curve) in clients.iter().zip(&curves) {
                let r = diagnostics::last_best(&curve.test, &curve.val)?;
                rows.push(ReportRow {
                    client_id: c.id,
                    method: method.to_string(),
                    local_size: size.clone(),
                    last_acc: r.last,
                    best_acc: r.best,
                    delta: r.delta,
                });
                lb.push(r);
            }
            let trainable = curves.first().map_or(0, |c| c.trainable_params);
            if let Some(e) = expected {
                if curves.iter().any(|c| c.trainable_params != e) {
                    return Err(Error::Config(format!(
                        "personalization trained {trainable} scalars, expected {e}"
                    )));
                }
            }
            methods.push(MethodSummary {
                method: method.to_string(),
                checkpoint: path.clone(),
                local_size: size.clone(),
                lr,
                mean_last: mean(&lb.iter().map(|r| r.last).collect::<Vec<_>>()),
                mean_best: mean(&lb.iter().map(|r| r.best).collect::<Vec<_>>()),
                mean_delta: mean(&lb.iter().map(|r| r.delta).collect::<Vec<_>>()),
                trainable_params: trainable,
                expected_trainable_params: expected,
            });
        }
    }
    let report = cfg.out.join("personalize.csv");
    let mut buf = Vec::new();
    write_report(&rows, &mut buf)?;
    write_file(&report, &buf)?;
    let summary = PersonalizeSummary { report, methods };
    write_json(&cfg.out.join("personalize_summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct CompressionRow {
    pub method: String,
    pub k: usize,
    pub mean_personalized_accuracy: f64,
    pub explained_variance: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagnoseSummary {
    pub checkpoint: PathBuf,
    /// Mean pairwise cosine of the bases (basis checkpoints).
    pub mean_pairwise_cosine: Option<f64>,
    /// Mean α entropy over participating clients (basis checkpoints).
    pub mean_alpha_entropy: Option<f64>,
    /// Agreement between k-means clusters (k = number of domains) of the
    /// per-client models or coefficients and the true domains.
    pub domain_adjusted_rand_index: Option<f64>,
    pub uncompressed_accuracy: Option<f64>,
    pub compression: Vec<CompressionRow>,
}

fn domain_labels(clients: &[ClientDataset]) -> Vec<usize> {
    let mut names: Vec<&str> = Vec::new();
    clients
        .iter()
        .map(|c| match names.iter().position(|n| *n == c.domain) {
            Some(i) => i,
            None => {
                names.push(&c.domain);
                names.len() - 1
            }
        })
        .collect()
}

fn domain_ari(points: &[Vec<f64>], clients: &[ClientDataset], cfg: &ExperimentConfig) -> Result<Option<f64>> {
    let truth = domain_labels(clients);
    let k = truth.iter().max().map_or(0, |m| m + 1);
    if k < 2 || points.len() < k {
        return Ok(None);
    }
    let refs: Vec<&[f64]> = points.iter().map(Vec::as_slice).collect();
    let c = crate::kmeans::kmeans(&refs, k, &mut cfg.master_seed().stream("diagnose-domains", &[]))?;
    Ok(Some(diagnostics::adjusted_rand_index(&c.assignments, &truth)))
}

fn mean_accuracy(spec: &MlpSpec, bench: &Benchmark, models: &[ParamVector]) -> Result<f64> {
    let accs = bench
        .participating
        .iter()
        .zip(models)
        .map(|(c, m)| Ok(protocol::evaluate_model(spec, m, &bench.test[&c.domain], &c.label_distribution)?.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&accs))
}

fn diagnose_bases(cfg: &ExperimentConfig, loaded: &Loaded, bases: &BasisSet, summary: &mut DiagnoseSummary) -> Result<()> {
    let clients = &loaded.bench.participating;
    let pcfg = protocol::PersonalizeConfig {
        classifier_mode: ClassifierMode::Frozen,
        ..cfg.personalize.for_lr(cfg.fed.lr_logits.max(f64::MIN_POSITIVE))
    };
    let fitted = clients
        .par_iter()
        .map(|c| {
            protocol::personalize_new_client(
                &loaded.spec,
                bases,
                c,
                &pcfg,
                &mut cfg.master_seed().stream("diagnose-fit", &[c.id as u64]),
                |_, _| {},
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let coefficients: Vec<ClientCoefficients> = clients
        .iter()
        .zip(&fitted)
        .map(|(c, p)| ClientCoefficients {
            client_id: c.id,
            domain: c.domain.clone(),
            coefficients: p.state.coefficients(),
        })
        .collect();
    let mut buf = Vec::new();
    diagnostics::coefficient_heatmap_export(&coefficients, &mut buf)?;
    write_file(&cfg.out.join("coefficients.csv"), &buf)?;
    summary.mean_pairwise_cosine = diagnostics::mean_pairwise_cosine(bases).ok();
    summary.mean_alpha_entropy = Some(mean(
        &coefficients
            .iter()
            .map(|c| diagnostics::alpha_entropy(&c.coefficients))
            .collect::<Vec<_>>(),
    ));
    let points: Vec<Vec<f64>> = coefficients.iter().map(|c| c.coefficients.as_slice().to_vec()).collect();
    summary.domain_adjusted_rand_index = domain_ari(&points, clients, cfg)?;
    let models: Vec<ParamVector> = fitted.into_iter().map(|p| p.model).collect();
    summary.uncompressed_accuracy = Some(mean_accuracy(&loaded.spec, &loaded.bench, &models)?);
    Ok(())
}

/// Fine-tune `model` on every participating client with the diagnostics recipe.
pub fn finetuned_models(cfg: &ExperimentConfig, loaded: &Loaded, model: &ParamVector) -> Result<Vec<ParamVector>> {
    let d = &cfg.diagnostics;
    let sgd = SgdParams {
        lr: d.finetune_lr,
        momentum: cfg.fed.momentum,
        weight_decay: cfg.fed.weight_decay,
    };
    loaded
        .bench
        .participating
        .par_iter()
        .map(|c| {
            protocol::finetune_full(
                &loaded.spec,
                model,
                c,
                d.finetune_epochs,
                d.finetune_batch_size,
                sgd,
                &mut cfg.master_seed().stream("diagnose-finetune", &[c.id as u64]),
                |_, _| {},
            )
        })
        .collect()
}

fn diagnose_single(cfg: &ExperimentConfig, loaded: &Loaded, model: &ParamVector, summary: &mut DiagnoseSummary) -> Result<()> {
    let models = finetuned_models(cfg, loaded, model)?;
    let m = models.len();
    summary.uncompressed_accuracy = Some(mean_accuracy(&loaded.spec, &loaded.bench, &models)?);
    for &k in &cfg.diagnostics.pca_components {
        if k > m {
            log::warn!("skipping PCA with {k} components for {m} models");
            continue;
        }
        let pca = diagnostics::pca_compress(&models, k)?;
        summary.compression.push(CompressionRow {
            method: "pca".into(),
            k,
            mean_personalized_accuracy: mean_accuracy(&loaded.spec, &loaded.bench, &pca.reconstructed)?,
            explained_variance: Some(pca.explained_variance),
        });
    }
    for &k in &cfg.diagnostics.kmeans_clusters {
        if k > m {
            log::warn!("skipping k-means with {k} clusters for {m} models");
            continue;
        }
        let mut rng = cfg.master_seed().stream("diagnose-kmeans", &[k as u64]);
        let (_, replaced) = diagnostics::kmeans_compress(&models, k, &mut rng)?;
        summary.compression.push(CompressionRow {
            method: "kmeans".into(),
            k,
            mean_personalized_accuracy: mean_accuracy(&loaded.spec, &loaded.bench, &replaced)?,
            explained_variance: None,
        });
    }
    let points: Vec<Vec<f64>> = models.iter().map(|p| p.values().to_vec()).collect();
    summary.domain_adjusted_rand_index = domain_ari(&points, &loaded.bench.participating, cfg)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "k", "mean_personalized_accuracy", "explained_variance"])?;
    for r in &summary.compression {
        w.write_record([
            r.method.clone(),
            r.k.to_string(),
            format!("{:.16e}", r.mean_personalized_accuracy),
            r.explained_variance.map_or(String::new(), |v| format!("{v:.16e}")),
        ])?;
    }
    let buf = w.into_inner().map_err(|e| Error::io("compression.csv", e.into_error()))?;
    write_file(&cfg.out.join("compression.csv"), &buf)
}

/// Collapse statistics and coefficient heatmap for basis checkpoints;
/// PCA and k-means compression sweeps for single-model checkpoints.
pub fn cmd_diagnose(cfg: &ExperimentConfig) -> Result<DiagnoseSummary> {
    let loaded = load_benchmark(cfg)?;
    let path = cfg.diagnostics.checkpoint.clone().unwrap_or_else(|| cfg.checkpoint_path());
    let model = load_model(&path, &loaded.spec)?;
    let mut summary = DiagnoseSummary {
        checkpoint: path,
        mean_pairwise_cosine: None,
        mean_alpha_entropy: None,
        domain_adjusted_rand_index: None,
        uncompressed_accuracy: None,
        compression: Vec::new(),
    };
    match &model {
        GlobalModel::Bases(b) => diagnose_bases(cfg, &loaded, b, &mut summary)?,
        GlobalModel::Single(m) => diagnose_single(cfg, &loaded, m, &mut summary)?,
    }
    write_json(&cfg.out.join("diagnostics.json"), &summary)?;
    Ok(summary)
}
