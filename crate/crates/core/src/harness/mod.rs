//! Experiment runners behind the command-line interface.

mod config;
mod experiment;
mod metrics;
mod stability;

pub use config::{load_config, parse_config, StabilityConfig, StderrConfig, Task, TrainConfig};
pub use experiment::{
    run_ablation, run_ablation_on, run_batch_sweep, run_training, AblationRow, AblationSummary, Experiment, RunOptions,
    RunSummary, ShadowReport, TrainingRun,
};
pub use metrics::{write_csv, write_csv_file, MetricsRow, RunningStats};
pub use stability::{run_stability_probe, StabilityReport};

use crate::error::Result;
use crate::stderr_lab::{se_ratio_report, GaussianSpec, RatioRow};

/// `SE(η) / SE(η̄)` table for the configured batch sizes.
pub fn run_stderr(c: &StderrConfig) -> Result<Vec<RatioRow>> {
    let spec = GaussianSpec::new(c.mu, c.sigma)?;
    se_ratio_report(&spec, c.n, &c.batch_sizes, c.trials, c.seed)
}
