//! Experiment configuration: one JSON document plus `--set` overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::nn::{Activation, MlpSpec};
use crate::pflbed::{BenchConfig, SyntheticConfig};
use crate::protocol::{ClassifierMode, FedConfig, PersonalizeConfig};
use crate::rng::RngSeed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Csv { path: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![32],
            activation: Activation::Relu,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, dim: usize, classes: usize) -> Result<MlpSpec> {
        let mut sizes = vec![dim];
        sizes.extend(&self.hidden);
        sizes.push(classes);
        MlpSpec::new(sizes, self.activation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PersonalizeSettings {
    pub epochs: usize,
    pub batch_size: usize,
    /// Candidate learning rates; the one with the best mean final
    /// validation accuracy is reported.
    pub lr_grid: Vec<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub classifier_mode: ClassifierMode,
    /// Named fractions of each new client's data.
    pub local_sizes: BTreeMap<String, f64>,
    /// Checkpoints to personalize from; empty means `<out>/checkpoint.fbas`.
    pub checkpoints: Vec<PathBuf>,
}

impl Default for PersonalizeSettings {
    fn default() -> Self {
        PersonalizeSettings {
            epochs: 20,
            batch_size: 16,
            lr_grid: vec![0.005, 0.01, 0.05],
            momentum: 0.9,
            weight_decay: 1e-4,
            classifier_mode: ClassifierMode::Trained,
            local_sizes: [("S", 0.25), ("M", 0.5), ("L", 1.0)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            checkpoints: Vec::new(),
        }
    }
}

impl PersonalizeSettings {
    pub fn for_lr(&self, lr: f64) -> PersonalizeConfig {
        PersonalizeConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_logits: lr,
            lr_classifier: lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            classifier_mode: self.classifier_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    /// Rounds between accuracy evaluations during training (0 disables).
    pub eval_every: usize,
    /// Fine-tuning recipe for the compression baselines.
    pub finetune_epochs: usize,
    pub finetune_batch_size: usize,
    pub finetune_lr: f64,
    pub pca_components: Vec<usize>,
    pub kmeans_clusters: Vec<usize>,
    /// Checkpoint to diagnose; `None` means `<out>/checkpoint.fbas`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            eval_every: 10,
            finetune_epochs: 20,
            finetune_batch_size: 8,
            finetune_lr: 0.05,
            pca_components: vec![1, 2, 4, 8, 16, 40],
            kmeans_clusters: vec![1, 2, 4, 8],
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed; every random stream derives from it.
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataSource,
    /// Manifest to read; `None` means `<out>/manifest.json`.
    pub manifest: Option<PathBuf>,
    pub bench: BenchConfig,
    pub model: ModelConfig,
    /// Federated settings. The seed comes from the top-level `seed`.
    pub fed: FedConfig,
    pub personalize: PersonalizeSettings,
    pub diagnostics: DiagnosticsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            data: DataSource::default(),
            manifest: None,
            bench: BenchConfig::default(),
            model: ModelConfig::default(),
            fed: FedConfig::default(),
            personalize: PersonalizeSettings::default(),
            diagnostics: DiagnosticsConfig::default(),
        }
    }
}

/// Raw overrides collected from the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub set: Vec<String>,
}

/// Parse `VALUE` as JSON, falling back to a plain string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Apply `key.path=value` to a JSON document, creating objects on the way.
pub fn apply_set(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {assignment:?}")))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad key {key:?}")));
    }
    let mut node = doc;
    for part in &parts[..parts.len() - 1] {
        if !node.is_object() {
            return Err(Error::Config(format!("{key}: {part} is not an object")));
        }
        node = node
            .as_object_mut()
            .unwrap()
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    match node.as_object_mut() {
        Some(obj) => {
            obj.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
            Ok(())
        }
        None => Err(Error::Config(format!("{key}: parent is not an object"))),
    }
}

impl ExperimentConfig {
    pub fn from_value(mut doc: Value, overrides: &Overrides) -> Result<ExperimentConfig> {
        if !doc.is_object() {
            return Err(Error::Config("configuration must be a JSON object".into()));
        }
        for s in &overrides.set {
            apply_set(&mut doc, s)?;
        }
        if let Some(seed) = overrides.seed {
            doc["seed"] = Value::from(seed);
        }
        if let Some(out) = &overrides.out {
            doc["out"] = Value::String(out.to_string_lossy().into_owned());
        }
        if doc.get("fed").and_then(|f| f.get("seed")).is_some() {
            return Err(Error::Config("fed.seed is not configurable; set the top-level seed".into()));
        }
        let mut cfg: ExperimentConfig =
            serde_json::from_value(doc).map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        cfg.fed.seed = RngSeed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read `path` (or start from defaults) and apply the overrides.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
        let doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        Self::from_value(doc, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.fed.validate()?;
        self.bench.fractions.validate()?;
        if !(self.bench.beta > 0.0) {
            return Err(Error::Config("bench.beta must be positive".into()));
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::Config("model.hidden sizes must be positive".into()));
        }
        let p = &self.personalize;
        if p.batch_size == 0 {
            return Err(Error::Config("personalize.batch_size must be positive".into()));
        }
        if p.lr_grid.is_empty() || p.lr_grid.iter().any(|&lr| !(lr > 0.0)) {
            return Err(Error::Config("personalize.lr_grid needs positive learning rates".into()));
        }
        if !(p.momentum >= 0.0 && p.momentum < 1.0) || !(p.weight_decay >= 0.0) {
            return Err(Error::Config("personalize momentum/weight_decay out of range".into()));
        }
        if p.local_sizes.is_empty() || p.local_sizes.values().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::Config("personalize.local_sizes fractions must lie in (0, 1]".into()));
        }
        let d = &self.diagnostics;
        if d.finetune_batch_size == 0 || !(d.finetune_lr >= 0.0) {
            return Err(Error::Config("diagnostics fine-tuning settings out of range".into()));
        }
        if d.pca_components.contains(&0) || d.kmeans_clusters.contains(&0) {
            return Err(Error::Config("diagnostics component counts must be positive".into()));
        }
        Ok(())
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| self.out.join("manifest.json"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out.join("checkpoint.fbas")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.out.join("metrics.jsonl")
    }

    pub fn master_seed(&self) -> RngSeed {
        RngSeed(self.seed)
    }
}
