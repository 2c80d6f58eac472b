//! Experiment configuration file.

use std::path::{Path, PathBuf};

use layerprune::distill::DistillConfig;
use layerprune::eval::BenchConfig;
use layerprune::mask::{NMScheme, SchemeSpec};
use layerprune::recover::PruneLearnConfig;
use layerprune::train::TrainConfig;
use layerprune::{TaskConfig, ToyDiTConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PruneMethod {
    /// Learned N:M mask.
    Learnable,
    /// First and last layers plus evenly spaced ones.
    Oracle,
    /// Lowest calibration loss among random masks.
    MinLoss,
    MedianLoss,
    MaxLoss,
    Sensitivity,
    Similarity,
    Mse,
}

impl PruneMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::Learnable => "learnable",
            Self::Oracle => "oracle",
            Self::MinLoss => "min-loss",
            Self::MedianLoss => "median-loss",
            Self::MaxLoss => "max-loss",
            Self::Sensitivity => "sensitivity",
            Self::Similarity => "similarity",
            Self::Mse => "mse",
        }
    }

    pub fn is_random(self) -> bool {
        matches!(self, Self::MinLoss | Self::MedianLoss | Self::MaxLoss)
    }

    /// Output stage directory.
    pub fn stage(self) -> &'static str {
        if self == Self::Learnable {
            "prune-learn"
        } else {
            "prune-baseline"
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RandomSpaceKind {
    /// Any `keep` of the layers.
    Keep,
    /// One candidate per block of the scheme.
    Scheme,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSection {
    pub method: PruneMethod,
    /// Calibration examples shared by the baselines.
    pub calibration_size: usize,
    pub calibration_seed: u64,
    /// Masks scored by the random-search baselines.
    pub random_samples: usize,
    pub random_space: RandomSpaceKind,
    /// Mask learning; its `scheme` also fixes how many layers the baselines keep.
    pub learn: PruneLearnConfig,
}

impl Default for PruneSection {
    fn default() -> Self {
        Self {
            method: PruneMethod::Learnable,
            calibration_size: 512,
            calibration_seed: 0,
            random_samples: 2000,
            random_space: RandomSpaceKind::Keep,
            learn: PruneLearnConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RecoverMethod {
    Finetune,
    Distill,
}

impl RecoverMethod {
    pub fn stage(self) -> &'static str {
        match self {
            Self::Finetune => "finetune",
            Self::Distill => "distill",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoverSection {
    pub method: RecoverMethod,
    /// Shared by both methods; plain fine-tuning ignores the teacher weights.
    pub train: DistillConfig,
}

impl Default for RecoverSection {
    fn default() -> Self {
        Self { method: RecoverMethod::Distill, train: DistillConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Fixes held-out timesteps and noise.
    pub seed: u64,
    /// Points used for the sample-quality distance.
    pub samples: usize,
    pub sample_steps: usize,
    /// Held-out examples feeding the activation statistics.
    pub activation_batch: usize,
    /// Also time the forward pass (not reproducible).
    pub throughput: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { seed: 0, samples: 1000, sample_steps: 50, activation_batch: 256, throughput: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub model: ToyDiTConfig,
    pub task: TaskConfig,
    pub train: TrainConfig,
    pub prune: PruneSection,
    pub recover: RecoverSection,
    pub eval: EvalSection,
    pub bench: BenchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs"),
            seeds: vec![0, 1, 2],
            model: ToyDiTConfig::default(),
            task: TaskConfig::default(),
            train: TrainConfig::default(),
            prune: PruneSection::default(),
            recover: RecoverSection::default(),
            eval: EvalSection::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|_| CliError::Missing(path.to_path_buf()))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg_err = |e: layerprune::Error| CliError::Config(e.to_string());
        self.model.validate().map_err(cfg_err)?;
        if self.model.num_timesteps != self.task.num_timesteps {
            return Err(CliError::Config("model.num_timesteps must equal task.num_timesteps".into()));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must list at least one seed".into()));
        }
        self.train.validate("train").map_err(cfg_err)?;
        self.prune.learn.validate().map_err(cfg_err)?;
        self.scheme()?;
        if self.prune.calibration_size == 0 {
            return Err(CliError::Config("prune.calibration_size must be positive".into()));
        }
        if self.prune.random_samples == 0 {
            return Err(CliError::Config("prune.random_samples must be positive".into()));
        }
        self.recover.train.validate("recover.train").map_err(cfg_err)?;
        if self.eval.samples < 100 {
            return Err(CliError::Config("eval.samples must be at least 100".into()));
        }
        if self.eval.sample_steps == 0 || self.eval.sample_steps > self.task.num_timesteps {
            return Err(CliError::Config("eval.sample_steps must lie in 1..=task.num_timesteps".into()));
        }
        if self.bench.trials < 5 {
            return Err(CliError::Config("bench.trials must be at least 5".into()));
        }
        Ok(())
    }

    pub fn scheme(&self) -> Result<NMScheme, CliError> {
        let spec: SchemeSpec = self.prune.learn.scheme.parse().map_err(|e: layerprune::Error| {
            CliError::Config(format!("prune.learn.scheme: {e}"))
        })?;
        spec.for_depth(self.model.depth).map_err(|e| CliError::Config(format!("prune.learn.scheme: {e}")))
    }

    /// Layers every pruning method keeps.
    pub fn keep(&self) -> Result<usize, CliError> {
        Ok(self.scheme()?.kept())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Digest of the whole resolved configuration.
    pub fn hash(&self) -> String {
        digest(&serde_json::to_value(self).expect("config serializes"))
    }
}

/// Short hex SHA-256 of a JSON value's canonical text.
pub fn digest(value: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(value).expect("json value serializes");
    hex::encode(&Sha256::digest(&bytes)[..8])
}
