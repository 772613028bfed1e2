//! Experiment configuration.
//!
//! Files are TOML. Every key is optional; omitted keys take the defaults
//! below, which reproduce the label-shift experiment (8 cycles, 5
//! repetitions, 1000/500/1000 splits, 500 labels per triggered cycle).
//! Keys can be written as sections or dotted, e.g.
//! `trigger.divergence_threshold = 0.05`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cycle::{RetrainPolicy, TriggerPolicy};
use crate::dataset::{self, FormSpec, LabeledSet, ShiftSpec, SplitSizes};
use crate::error::{Error, Result};
use crate::estimator::SamplingPlan;
use crate::model::TrainConfig;
use crate::oracle::{ForestConfig, MinerConfig, OracleMode};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Mnist,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub mnist_images: PathBuf,
    pub mnist_labels: PathBuf,
    pub synthetic_size: usize,
    pub synthetic_noise: f64,
    pub synthetic_seed: u64,
    pub train_size: usize,
    pub verification_size: usize,
    /// Operational inputs per cycle.
    pub batch_size: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Mnist,
            mnist_images: PathBuf::from("data/images-idx3-ubyte"),
            mnist_labels: PathBuf::from("data/labels-idx1-ubyte"),
            synthetic_size: 10_000,
            synthetic_noise: 0.5,
            synthetic_seed: 0,
            train_size: 1000,
            verification_size: 500,
            batch_size: 1000,
        }
    }
}

impl DatasetConfig {
    pub fn load(&self) -> Result<LabeledSet> {
        match self.kind {
            DatasetKind::Mnist => dataset::load_idx(&self.mnist_images, &self.mnist_labels),
            DatasetKind::Synthetic => dataset::synth_generate(
                self.synthetic_size,
                dataset::N_CLASSES,
                self.synthetic_noise,
                self.synthetic_seed,
            ),
        }
    }

    pub fn split_sizes(&self, cycles: usize) -> SplitSizes {
        SplitSizes {
            train: self.train_size,
            verification: self.verification_size,
            operational: cycles * self.batch_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("results"),
        }
    }
}

/// C4.5 rule-mining limits as they appear in the config file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RulesConfig {
    pub max_depth: usize,
    pub min_leaf: usize,
    pub min_confidence: f64,
    pub min_support: usize,
}

impl Default for RulesConfig {
    fn default() -> Self {
        let m = MinerConfig::default();
        RulesConfig {
            max_depth: m.max_depth,
            min_leaf: m.min_leaf,
            min_confidence: m.min_confidence,
            min_support: m.min_support,
        }
    }
}

impl From<RulesConfig> for MinerConfig {
    fn from(r: RulesConfig) -> Self {
        MinerConfig {
            max_depth: r.max_depth,
            min_leaf: r.min_leaf,
            min_confidence: r.min_confidence,
            min_support: r.min_support,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub cycles: usize,
    pub repetitions: usize,
    pub oracle: OracleMode,
    pub master_seed: u64,
    /// Run repetitions on the rayon pool. Output does not depend on it.
    pub parallel: bool,
    pub dataset: DatasetConfig,
    pub trigger: TriggerPolicy,
    pub retrain: RetrainPolicy,
    pub sampling: SamplingPlan,
    pub shift: ShiftSpec,
    pub train: TrainConfig,
    pub rules: RulesConfig,
    pub forest: ForestConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            cycles: 8,
            repetitions: 5,
            oracle: OracleMode::DnnOs,
            master_seed: 1,
            parallel: true,
            dataset: DatasetConfig::default(),
            trigger: TriggerPolicy::default(),
            retrain: RetrainPolicy::default(),
            sampling: SamplingPlan::default(),
            shift: ShiftSpec::default(),
            train: TrainConfig::default(),
            rules: RulesConfig::default(),
            forest: ForestConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

/// Command-line overrides, applied on top of the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub cycles: Option<usize>,
    pub repetitions: Option<usize>,
    pub oracle: Option<OracleMode>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub dataset: Option<DatasetKind>,
    pub mnist_images: Option<PathBuf>,
    pub mnist_labels: Option<PathBuf>,
}

fn config_err(field: &str, what: &str) -> Error {
    Error::Config(format!("{field}: {what}"))
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cycles == 0 {
            return Err(config_err("cycles", "must be >= 1"));
        }
        if self.repetitions == 0 {
            return Err(config_err("repetitions", "must be >= 1"));
        }
        let t = &self.trigger;
        if !(t.divergence_threshold > 0.0 && t.divergence_threshold < 1.0) {
            return Err(config_err("trigger.divergence_threshold", "must lie in (0, 1)"));
        }
        if !(t.minimum_accuracy > 0.0 && t.minimum_accuracy < 1.0) {
            return Err(config_err("trigger.minimum_accuracy", "must lie in (0, 1)"));
        }
        let r = &self.retrain;
        if r.k == 0 {
            return Err(config_err("retrain.k", "must be >= 1"));
        }
        if !(r.new_label_split > 0.0 && r.new_label_split <= 1.0) {
            return Err(config_err("retrain.new_label_split", "must lie in (0, 1]"));
        }
        self.sampling.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.sampling.budget > self.dataset.batch_size {
            return Err(config_err("sampling.budget", "exceeds dataset.batch_size"));
        }
        self.shift
            .validate()
            .map_err(|e| Error::Config(format!("shift: {e}")))?;
        self.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.forest
            .validate()
            .map_err(|e| Error::Config(format!("forest: {e}")))?;
        let d = &self.dataset;
        if d.train_size == 0 || d.verification_size == 0 || d.batch_size == 0 {
            return Err(config_err(
                "dataset",
                "train_size, verification_size and batch_size must be >= 1",
            ));
        }
        if !(0.0..=0.5).contains(&d.synthetic_noise) {
            return Err(config_err("dataset.synthetic_noise", "must lie in [0, 0.5]"));
        }
        if !(self.rules.min_confidence > 0.0 && self.rules.min_confidence <= 1.0) {
            return Err(config_err("rules.min_confidence", "must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.cycles {
            self.cycles = v;
        }
        if let Some(v) = o.repetitions {
            self.repetitions = v;
        }
        if let Some(v) = o.oracle {
            self.oracle = v;
        }
        if let Some(v) = o.seed {
            self.master_seed = v;
        }
        if let Some(v) = &o.out {
            self.output.dir = v.clone();
        }
        if let Some(v) = o.dataset {
            self.dataset.kind = v;
        }
        if let Some(v) = &o.mnist_images {
            self.dataset.mnist_images = v.clone();
        }
        if let Some(v) = &o.mnist_labels {
            self.dataset.mnist_labels = v.clone();
        }
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn forms(&self) -> FormSpec {
        FormSpec::default()
    }
}

/// Reads the file (if any), applies flag overrides and validates.
pub fn parse_config(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str::<ExperimentConfig>(&text).map_err(|e| Error::Config(e.message().to_string()))?
        }
        None => ExperimentConfig::default(),
    };
    cfg.apply(overrides);
    cfg.validate()?;
    Ok(cfg)
}
