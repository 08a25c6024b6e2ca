//! Flat TOML experiment configs. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::models::{Activation, Loss, SamplingStrategy};
use crate::optim::{HyperParams, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    SyntheticClassification,
    SyntheticRegression,
    FileDataset,
}

/// Configuration shared by `train`, `sweep` and `ablate`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub task: Task,
    /// Delimited text file, required for `file-dataset`.
    pub data_path: Option<PathBuf>,
    /// Loss head; inferred from the task when absent (required for files).
    pub loss: Option<Loss>,
    pub examples: usize,
    pub features: usize,
    pub classes: usize,
    pub separation: f64,
    pub spread: f64,
    pub noise: f64,
    /// Use `y = w·x + Σ c x²` instead of a linear target.
    pub quadratic: bool,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub optimizer: Variant,
    /// Arms compared by `sweep`.
    pub optimizers: Vec<Variant>,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub batch_sizes: Vec<usize>,
    pub steps: u64,
    pub eval_every: u64,
    /// Steps excluded from step-length statistics; defaults to `10 / (1 - β₂)`
    /// capped at half the run.
    pub warmup: Option<u64>,
    pub holdout: f64,
    pub sampling: SamplingStrategy,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let hp = HyperParams::default();
        TrainConfig {
            task: Task::SyntheticClassification,
            data_path: None,
            loss: None,
            examples: 1000,
            features: 2,
            classes: 2,
            separation: 4.0,
            spread: 1.0,
            noise: 0.1,
            quadratic: false,
            hidden: Vec::new(),
            activation: Activation::Tanh,
            optimizer: Variant::Eve,
            optimizers: vec![Variant::Adam, Variant::Eve],
            alpha: hp.alpha,
            beta1: hp.beta1,
            beta2: hp.beta2,
            epsilon: hp.epsilon,
            batch_size: 32,
            batch_sizes: vec![8, 32, 128],
            steps: 1000,
            eval_every: 100,
            warmup: None,
            holdout: 0.2,
            sampling: SamplingStrategy::ShuffledEpochs,
            seed: 0,
            out: None,
        }
    }
}

impl TrainConfig {
    pub fn hyper_params(&self) -> HyperParams {
        HyperParams {
            alpha: self.alpha,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            batch_size: self.batch_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if self.task == Task::FileDataset && self.data_path.is_none() {
            return Err(Error::Config("file-dataset needs data_path".into()));
        }
        if self.task == Task::FileDataset && self.loss.is_none() {
            return Err(Error::Config("file-dataset needs an explicit loss".into()));
        }
        if self.optimizers.is_empty() {
            return Err(Error::Config("optimizers must not be empty".into()));
        }
        if self.batch_sizes.is_empty() {
            return Err(Error::Config("batch_sizes must not be empty".into()));
        }
        self.hyper_params().validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Warmup used for step-length statistics over a run of `self.steps`.
    pub fn effective_warmup(&self) -> u64 {
        let w = self.warmup.unwrap_or_else(|| self.hyper_params().warmup_steps());
        if w >= self.steps {
            self.steps / 2
        } else {
            w
        }
    }
}

/// Configuration of the stationary-stream step-length probe.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilityConfig {
    pub mu: f64,
    pub sigma: f64,
    /// Parameters per synthetic gradient vector.
    pub params: usize,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    /// Measured steps, taken after a `10 / (1 - β₂)` warmup.
    pub steps: u64,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        let hp = HyperParams::default();
        StabilityConfig {
            mu: 1.0,
            sigma: 0.5,
            params: 16,
            alpha: hp.alpha,
            beta1: hp.beta1,
            beta2: hp.beta2,
            epsilon: hp.epsilon,
            batch_size: 64,
            steps: 10_000,
            seed: 0,
            out: None,
        }
    }
}

impl StabilityConfig {
    pub fn hyper_params(&self) -> HyperParams {
        HyperParams {
            alpha: self.alpha,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            batch_size: self.batch_size,
        }
    }
}

/// Configuration of the `SE(η) / SE(η̄)` report.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StderrConfig {
    pub mu: f64,
    pub sigma: f64,
    pub n: usize,
    pub batch_sizes: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for StderrConfig {
    fn default() -> Self {
        StderrConfig {
            mu: 1.0,
            sigma: 0.5,
            n: 1024,
            batch_sizes: vec![4, 16, 64],
            trials: 10_000,
            seed: 0,
            out: None,
        }
    }
}

pub fn parse_config<T: DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        let c: TrainConfig = parse_config("").unwrap();
        assert_eq!(c, TrainConfig::default());
        assert!(c.validate().is_ok());
    }

    #[test]
    fn typed_keys() {
        let c: TrainConfig = parse_config(
            r#"
            task = "synthetic-regression"
            hidden = [8, 4]
            activation = "relu"
            optimizer = "eve-no-correction"
            batch_size = 16
            steps = 10
            "#,
        )
        .unwrap();
        assert_eq!(c.task, Task::SyntheticRegression);
        assert_eq!(c.hidden, vec![8, 4]);
        assert_eq!(c.optimizer, Variant::EveNoCorrection);
        assert_eq!(c.hyper_params().batch_size, 16);
    }

    #[test]
    fn unknown_and_mistyped_keys_fail() {
        assert!(parse_config::<TrainConfig>("stpes = 3").is_err());
        assert!(parse_config::<TrainConfig>("steps = \"many\"").is_err());
        assert!(parse_config::<StderrConfig>("hidden = [1]").is_err());
        assert!(parse_config::<StabilityConfig>("optimizer = \"adam\"").is_err());
    }

    #[test]
    fn invariants() {
        let zero_steps = TrainConfig {
            steps: 0,
            ..Default::default()
        };
        assert!(zero_steps.validate().is_err());
        let file_without_path = TrainConfig {
            task: Task::FileDataset,
            ..Default::default()
        };
        assert!(file_without_path.validate().is_err());
        let bad_beta = TrainConfig {
            beta2: 1.0,
            ..Default::default()
        };
        assert!(bad_beta.validate().is_err());
    }

    #[test]
    fn warmup_is_capped_for_short_runs() {
        let c = TrainConfig {
            steps: 2000,
            ..Default::default()
        };
        assert_eq!(c.effective_warmup(), 1000);
        let c = TrainConfig {
            steps: 20_000,
            ..Default::default()
        };
        assert_eq!(c.effective_warmup(), 10_000);
        let c = TrainConfig {
            steps: 20,
            warmup: Some(5),
            ..Default::default()
        };
        assert_eq!(c.effective_warmup(), 5);
    }
}
