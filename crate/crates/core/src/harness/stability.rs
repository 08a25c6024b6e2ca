//! Step-length stability on a stationary synthetic gradient stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::config::StabilityConfig;
use super::metrics::RunningStats;
use crate::error::{Error, Result};
use crate::grad_stats::{batch_mean, GradBatch};
use crate::models::ParamBlock;
use crate::optim::{adam_step, eve_step, MomentState};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub batch_size: usize,
    pub warmup: u64,
    pub steps: u64,
    pub mean_adam: f64,
    pub std_adam: f64,
    pub mean_eve: f64,
    pub std_eve: f64,
    /// `std_eve / std_adam`; empty when Adam's step length never varies.
    pub ratio: Option<f64>,
}

/// Feeds the same i.i.d. `N(μ, σ²)` examplewise gradient batches to Adam
/// (through their mean) and Eve, and compares the spread of step lengths
/// over `steps` steps following a `10 / (1 - β₂)` warmup.
pub fn run_stability_probe(c: &StabilityConfig) -> Result<StabilityReport> {
    let hp = c.hyper_params();
    hp.validate()?;
    if !(c.sigma >= 0.0 && c.sigma.is_finite() && c.mu.is_finite()) {
        return Err(Error::Config("need finite mu and sigma >= 0".into()));
    }
    if c.params == 0 || c.steps < 2 {
        return Err(Error::Config("need params >= 1 and steps >= 2".into()));
    }
    let warmup = hp.warmup_steps();
    let (b, p) = (c.batch_size, c.params);
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut adam = (ParamBlock::vector("theta", vec![0.0; p]), MomentState::new(p));
    let mut eve = adam.clone();
    let mut adam_len = RunningStats::default();
    let mut eve_len = RunningStats::default();
    for step in 1..=warmup + c.steps {
        let values = (0..b * p)
            .map(|_| c.mu + c.sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let g = GradBatch::new("theta".into(), b, p, values)?;
        let (ta, sa, ra) = adam_step(&adam.0, &adam.1, &batch_mean(&g), &hp)?;
        let (te, se, re) = eve_step(&eve.0, &eve.1, &g, &hp)?;
        adam = (ta, sa);
        eve = (te, se);
        if step > warmup {
            adam_len.push(ra.step_length);
            eve_len.push(re.step_length);
        }
    }
    let (std_adam, std_eve) = (adam_len.std(), eve_len.std());
    Ok(StabilityReport {
        batch_size: b,
        warmup,
        steps: c.steps,
        mean_adam: adam_len.mean(),
        std_adam,
        mean_eve: eve_len.mean(),
        std_eve,
        ratio: (std_adam > 0.0).then(|| std_eve / std_adam),
    })
}
