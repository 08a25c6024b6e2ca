//! Monte-Carlo checks of estimator standard errors under i.i.d. Gaussian
//! gradients.
//!
//! A "trial" draws `N` samples from `N(μ, σ²)` and evaluates an estimator on
//! them; the standard error is the standard deviation of that estimator
//! across trials. Each trial reads its own ChaCha stream (`seed`, stream =
//! trial index), so results do not depend on evaluation order and all
//! estimators in one report see the same draws.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};

pub const MIN_TRIALS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianSpec {
    mu: f64,
    sigma: f64,
}

impl GaussianSpec {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !mu.is_finite() || !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!(
                "need finite mu and sigma > 0, got mu={mu}, sigma={sigma}"
            )));
        }
        Ok(GaussianSpec { mu, sigma })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    fn draw(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| self.mu + self.sigma * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

/// `(1/N) Σ g² - ((1/N) Σ g)²`, evaluated on data shifted by the first
/// sample and clamped at zero.
pub fn pop_variance_estimator(samples: &[f64]) -> Result<f64> {
    let first = *samples
        .first()
        .ok_or_else(|| Error::invalid("need at least one sample"))?;
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    for &x in samples {
        let d = x - first;
        s1 += d;
        s2 += d * d;
    }
    let n = samples.len() as f64;
    let m = s1 / n;
    Ok((s2 / n - m * m).max(0.0))
}

fn mean(samples: &[f64]) -> f64 {
    let mut s = 0.0;
    for &x in samples {
        s += x;
    }
    s / samples.len() as f64
}

/// Exact standard error of `s²` for `N` Gaussian samples: `((N-1)/N) √(2/(N-1)) σ²`.
pub fn se_s2_exact(n: usize, sigma: f64) -> Result<f64> {
    if n < 2 {
        return Err(Error::invalid("standard error of s² needs N >= 2"));
    }
    let nf = n as f64;
    Ok((nf - 1.0) / nf * (2.0 / (nf - 1.0)).sqrt() * sigma * sigma)
}

/// Large-`N` form `√(2/N) σ²`.
pub fn se_s2_approx(n: usize, sigma: f64) -> Result<f64> {
    if n < 2 {
        return Err(Error::invalid("standard error of s² needs N >= 2"));
    }
    Ok((2.0 / n as f64).sqrt() * sigma * sigma)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    /// Population variance of all `N` samples.
    S2,
    /// Its square root.
    S,
    /// Population variance of the `N/B` means of consecutive size-`B` batches.
    BatchMeanS2 {
        b: usize,
    },
    BatchMeanS {
        b: usize,
    },
    /// Eve-style relative std `√((q - ḡ²) / (B ḡ²))` from all samples.
    Eta {
        b: usize,
    },
    /// Adam-style relative std `√(s̄² / ḡ̄²)` from the batch means.
    EtaBar {
        b: usize,
    },
}

impl Estimator {
    pub fn name(&self) -> String {
        match *self {
            Estimator::S2 => "s2".into(),
            Estimator::S => "s".into(),
            Estimator::BatchMeanS2 { b } => format!("batch_mean_s2[B={b}]"),
            Estimator::BatchMeanS { b } => format!("batch_mean_s[B={b}]"),
            Estimator::Eta { b } => format!("eta[B={b}]"),
            Estimator::EtaBar { b } => format!("eta_bar[B={b}]"),
        }
    }

    fn batch_size(&self) -> usize {
        match *self {
            Estimator::S2 | Estimator::S => 1,
            Estimator::BatchMeanS2 { b }
            | Estimator::BatchMeanS { b }
            | Estimator::Eta { b }
            | Estimator::EtaBar { b } => b,
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        let b = self.batch_size();
        if b == 0 || !n.is_multiple_of(b) {
            return Err(Error::invalid(format!("batch size {b} does not divide N = {n}")));
        }
        let groups = n / b;
        let needs = match self {
            Estimator::Eta { .. } => 1,
            _ => 2,
        };
        if groups < needs {
            return Err(Error::invalid(format!("{} needs at least {needs} groups", self.name())));
        }
        Ok(())
    }

    fn evaluate(&self, samples: &[f64]) -> f64 {
        match *self {
            Estimator::S2 => pop_variance_estimator(samples).unwrap(),
            Estimator::S => pop_variance_estimator(samples).unwrap().sqrt(),
            Estimator::BatchMeanS2 { b } => pop_variance_estimator(&batch_means(samples, b)).unwrap(),
            Estimator::BatchMeanS { b } => pop_variance_estimator(&batch_means(samples, b)).unwrap().sqrt(),
            Estimator::Eta { b } => relative_std(pop_variance_estimator(samples).unwrap(), mean(samples), b as f64),
            Estimator::EtaBar { b } => {
                let means = batch_means(samples, b);
                relative_std(pop_variance_estimator(&means).unwrap(), mean(&means), 1.0)
            }
        }
    }

    /// Closed-form standard error where one is available.
    pub fn predicted_se(&self, spec: &GaussianSpec, n: usize) -> Option<f64> {
        let sigma = spec.sigma;
        match *self {
            Estimator::S2 => se_s2_exact(n, sigma).ok(),
            // delta method: SE(√x) ≈ SE(x) / (2√x)
            Estimator::S => se_s2_exact(n, sigma).ok().map(|se| se / (2.0 * sigma)),
            Estimator::BatchMeanS2 { b } => se_s2_exact(n / b, sigma / (b as f64).sqrt()).ok(),
            Estimator::BatchMeanS { b } => {
                let sigma_b = sigma / (b as f64).sqrt();
                se_s2_exact(n / b, sigma_b).ok().map(|se| se / (2.0 * sigma_b))
            }
            Estimator::Eta { .. } | Estimator::EtaBar { .. } => None,
        }
    }
}

fn relative_std(variance: f64, mean: f64, divisor: f64) -> f64 {
    (variance / (divisor * (mean * mean))).sqrt()
}

fn batch_means(samples: &[f64], b: usize) -> Vec<f64> {
    samples.chunks_exact(b).map(mean).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialSummary {
    pub statistic: String,
    pub trials: usize,
    /// Mean of the estimator across trials.
    pub mean: f64,
    pub empirical_se: f64,
    pub predicted_se: Option<f64>,
}

/// Mean and sample standard deviation (divisor `n - 1`), accumulated in order.
fn mean_and_sd(values: &[f64]) -> (f64, f64) {
    let m = mean(values);
    let mut ss = 0.0;
    for v in values {
        ss += (v - m) * (v - m);
    }
    (m, (ss / (values.len() - 1) as f64).sqrt())
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

fn check_trials(trials: usize) -> Result<()> {
    if trials < MIN_TRIALS {
        return Err(Error::invalid(format!(
            "need at least {MIN_TRIALS} trials, got {trials}"
        )));
    }
    Ok(())
}

/// Draws the per-trial datasets once and evaluates every estimator on each.
fn run_trials(spec: &GaussianSpec, n: usize, trials: usize, seed: u64, estimators: &[Estimator]) -> Vec<Vec<f64>> {
    let mut values = vec![Vec::with_capacity(trials); estimators.len()];
    for trial in 0..trials {
        let samples = spec.draw(&mut trial_rng(seed, trial), n);
        for (out, est) in values.iter_mut().zip(estimators) {
            out.push(est.evaluate(&samples));
        }
    }
    values
}

/// Empirical standard error of `estimator` over `trials` independent datasets of size `n`.
pub fn mc_se(estimator: Estimator, spec: &GaussianSpec, n: usize, trials: usize, seed: u64) -> Result<TrialSummary> {
    check_trials(trials)?;
    estimator.check(n)?;
    let values = run_trials(spec, n, trials, seed, &[estimator]).remove(0);
    let (mean, empirical_se) = mean_and_sd(&values);
    Ok(TrialSummary {
        statistic: estimator.name(),
        trials,
        mean,
        empirical_se,
        predicted_se: estimator.predicted_se(spec, n),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioRow {
    #[serde(rename = "B")]
    pub batch_size: usize,
    pub trials: usize,
    pub se_eta: f64,
    pub se_eta_bar: f64,
    pub ratio: f64,
    #[serde(rename = "predicted")]
    pub predicted: f64,
}

/// `SE(η) / SE(η̄)` for each batch size, against the predicted `1/√B`.
pub fn se_ratio_report(
    spec: &GaussianSpec,
    n: usize,
    batch_sizes: &[usize],
    trials: usize,
    seed: u64,
) -> Result<Vec<RatioRow>> {
    check_trials(trials)?;
    if batch_sizes.is_empty() {
        return Err(Error::invalid("need at least one batch size"));
    }
    let mut estimators = Vec::with_capacity(2 * batch_sizes.len());
    for &b in batch_sizes {
        let pair = [Estimator::Eta { b }, Estimator::EtaBar { b }];
        for e in &pair {
            e.check(n)?;
        }
        estimators.extend(pair);
    }
    let values = run_trials(spec, n, trials, seed, &estimators);
    Ok(batch_sizes
        .iter()
        .zip(values.chunks_exact(2))
        .map(|(&b, pair)| {
            let (_, se_eta) = mean_and_sd(&pair[0]);
            let (_, se_eta_bar) = mean_and_sd(&pair[1]);
            RatioRow {
                batch_size: b,
                trials,
                se_eta,
                se_eta_bar,
                ratio: se_eta / se_eta_bar,
                predicted: 1.0 / (b as f64).sqrt(),
            }
        })
        .collect())
}

/// Comma-delimited report with header `B,trials,se_eta,se_eta_bar,ratio,predicted`.
pub fn write_ratio_report<W: Write>(rows: &[RatioRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
