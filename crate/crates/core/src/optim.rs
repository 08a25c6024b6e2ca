//! Adam and Eve as pure state transitions on one parameter block.
//!
//! Both optimizers keep the same moment state. They differ only in what is
//! averaged into the second moment (squared batch mean for Adam, mean of
//! examplewise squares for Eve) and in Eve's conversion of the examplewise
//! second moment back into a batch-gradient second moment before the update.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad_stats::{batch_mean, raw_second_moment, BlockId, GradBatch, StatKind, StatVector};
use crate::models::ParamBlock;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            alpha: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 1,
        }
    }
}

impl HyperParams {
    pub fn with_batch_size(self, batch_size: usize) -> Self {
        HyperParams { batch_size, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        Ok(())
    }

    /// Steps before step-length statistics are considered stationary: `10 / (1 - β₂)`.
    pub fn warmup_steps(&self) -> u64 {
        (10.0 / (1.0 - self.beta2)).round() as u64
    }
}

/// Biased moment accumulators of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl MomentState {
    pub fn new(param_count: usize) -> Self {
        MomentState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// EMA update with a first- and second-moment observation; increments `t`.
    fn advance(&self, first: &[f64], second: &[f64], hp: &HyperParams) -> MomentState {
        let (b1, b2) = (hp.beta1, hp.beta2);
        MomentState {
            m: self.m.iter().zip(first).map(|(m, g)| b1 * m + (1.0 - b1) * g).collect(),
            v: self
                .v
                .iter()
                .zip(second)
                .map(|(v, q)| b2 * v + (1.0 - b2) * q)
                .collect(),
            t: self.t + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DebiasedMoments {
    pub m_hat: Vec<f64>,
    pub v_hat: Vec<f64>,
}

pub fn debias(state: &MomentState, hp: &HyperParams) -> Result<DebiasedMoments> {
    if state.t == 0 {
        return Err(Error::NotStarted);
    }
    let t = i32::try_from(state.t).unwrap_or(i32::MAX);
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    Ok(DebiasedMoments {
        m_hat: state.m.iter().map(|m| m / c1).collect(),
        v_hat: state.v.iter().map(|v| v / c2).collect(),
    })
}

/// One applied update and its size.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step_number: u64,
    pub update: Vec<f64>,
    /// Euclidean norm of `update`.
    pub step_length: f64,
    pub per_coord_abs_mean: f64,
}

impl StepRecord {
    pub fn new(step_number: u64, update: Vec<f64>) -> Self {
        let step_length = update.iter().map(|u| u * u).sum::<f64>().sqrt();
        let per_coord_abs_mean = if update.is_empty() {
            0.0
        } else {
            update.iter().map(|u| u.abs()).sum::<f64>() / update.len() as f64
        };
        StepRecord {
            step_number,
            update,
            step_length,
            per_coord_abs_mean,
        }
    }

    /// Joins per-block records of the same step into a whole-model record.
    pub fn concat<'a>(records: impl IntoIterator<Item = &'a StepRecord>) -> StepRecord {
        let mut step_number = 0;
        let mut update = Vec::new();
        for r in records {
            step_number = r.step_number;
            update.extend_from_slice(&r.update);
        }
        StepRecord::new(step_number, update)
    }
}

/// Eve's batch second moment `(1/B) v̂_e + (1 - 1/B) m̂²`.
pub fn batch_second_moment(v_hat_e: &[f64], m_hat: &[f64], batch_size: usize) -> Vec<f64> {
    let inv_b = 1.0 / batch_size as f64;
    v_hat_e
        .iter()
        .zip(m_hat)
        .map(|(v, m)| inv_b * v + (1.0 - inv_b) * (m * m))
        .collect()
}

fn apply_update(
    theta: &ParamBlock,
    m_hat: &[f64],
    second: &[f64],
    hp: &HyperParams,
    t: u64,
) -> (ParamBlock, StepRecord) {
    let update: Vec<f64> = m_hat
        .iter()
        .zip(second)
        .map(|(m, v)| -(hp.alpha * m / (v.sqrt() + hp.epsilon)))
        .collect();
    let mut next = theta.clone();
    next.values.iter_mut().zip(&update).for_each(|(p, u)| *p += u);
    (next, StepRecord::new(t, update))
}

fn check_dims(theta: &ParamBlock, state: &MomentState, stat_len: usize) -> Result<()> {
    if theta.len() != state.len() || stat_len != theta.len() {
        return Err(Error::shape(format!(
            "block `{}`: {} parameters, state of {}, gradient of {}",
            theta.id,
            theta.len(),
            state.len(),
            stat_len
        )));
    }
    Ok(())
}

fn check_finite(values: &[f64], what: &'static str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { what, index }),
        None => Ok(()),
    }
}

pub type Transition = (ParamBlock, MomentState, StepRecord);

/// Adam on the batch-mean gradient.
pub fn adam_step(
    theta: &ParamBlock,
    state: &MomentState,
    mean_grad: &StatVector,
    hp: &HyperParams,
) -> Result<Transition> {
    check_dims(theta, state, mean_grad.len())?;
    check_finite(&mean_grad.values, "mean gradient")?;
    let squares: Vec<f64> = mean_grad.values.iter().map(|g| g * g).collect();
    let next = state.advance(&mean_grad.values, &squares, hp);
    let md = debias(&next, hp)?;
    let (theta, record) = apply_update(theta, &md.m_hat, &md.v_hat, hp, next.t);
    Ok((theta, next, record))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Correction {
    /// Convert the examplewise second moment into a batch second moment.
    Batch,
    /// Ablation: use the examplewise second moment directly.
    None,
}

/// Eve from precomputed batch statistics (batch mean and examplewise raw
/// second moment), so the examplewise buffer can be dropped before the step.
pub fn eve_step_from_stats(
    theta: &ParamBlock,
    state: &MomentState,
    mean: &StatVector,
    raw: &StatVector,
    hp: &HyperParams,
    correction: Correction,
) -> Result<Transition> {
    check_dims(theta, state, mean.len())?;
    if raw.len() != mean.len() {
        return Err(Error::shape("mean and raw second moment lengths differ"));
    }
    check_finite(&mean.values, "mean gradient")?;
    check_finite(&raw.values, "raw second moment")?;
    let next = state.advance(&mean.values, &raw.values, hp);
    let md = debias(&next, hp)?;
    let (theta, record) = match correction {
        Correction::Batch => {
            let v_hat = batch_second_moment(&md.v_hat, &md.m_hat, hp.batch_size);
            apply_update(theta, &md.m_hat, &v_hat, hp, next.t)
        }
        Correction::None => apply_update(theta, &md.m_hat, &md.v_hat, hp, next.t),
    };
    Ok((theta, next, record))
}

fn check_batch(g: &GradBatch, hp: &HyperParams) -> Result<()> {
    if g.batch_size() != hp.batch_size {
        return Err(Error::invalid(format!(
            "gradient batch has {} examples but hyperparameters say B = {}",
            g.batch_size(),
            hp.batch_size
        )));
    }
    Ok(())
}

pub fn eve_step(theta: &ParamBlock, state: &MomentState, g: &GradBatch, hp: &HyperParams) -> Result<Transition> {
    check_batch(g, hp)?;
    eve_step_from_stats(
        theta,
        state,
        &batch_mean(g),
        &raw_second_moment(g),
        hp,
        Correction::Batch,
    )
}

/// Eve without the batch second-moment correction.
pub fn eve_step_no_correction(
    theta: &ParamBlock,
    state: &MomentState,
    g: &GradBatch,
    hp: &HyperParams,
) -> Result<Transition> {
    check_batch(g, hp)?;
    eve_step_from_stats(
        theta,
        state,
        &batch_mean(g),
        &raw_second_moment(g),
        hp,
        Correction::None,
    )
}

fn relative_std(m_hat: &[f64], v_hat: &[f64], divisor: f64) -> Vec<f64> {
    m_hat
        .iter()
        .zip(v_hat)
        .map(|(&m, &v)| {
            let m2 = m * m;
            if m2 == 0.0 {
                f64::INFINITY
            } else {
                ((v - m2).max(0.0) / (divisor * m2)).sqrt()
            }
        })
        .collect()
}

/// Adam's relative batch-gradient standard deviation `√((v̂ - m̂²) / m̂²)`.
/// Coordinates with `m̂ = 0` are `+∞`.
pub fn eta_bar(md: &DebiasedMoments) -> Vec<f64> {
    relative_std(&md.m_hat, &md.v_hat, 1.0)
}

/// Eve's estimate `√((v̂_e - m̂²) / (B m̂²))` from examplewise moments.
pub fn eta(md: &DebiasedMoments, batch_size: usize) -> Result<Vec<f64>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    Ok(relative_std(&md.m_hat, &md.v_hat, batch_size as f64))
}

/// Per-coordinate step magnitude `α / √(η² + 1)` of the ε-free update.
pub fn sign_form_step_length(alpha: f64, eta_value: f64) -> f64 {
    alpha / (eta_value * eta_value + 1.0).sqrt()
}

/// Mean over finite entries; `None` when every entry is a sentinel.
pub fn finite_mean(values: &[f64]) -> Option<f64> {
    let (sum, n) = values
        .iter()
        .filter(|v| v.is_finite())
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Adam,
    Eve,
    EveNoCorrection,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Adam => "adam",
            Variant::Eve => "eve",
            Variant::EveNoCorrection => "eve-no-correction",
        }
    }

    pub fn uses_examplewise(self) -> bool {
        !matches!(self, Variant::Adam)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Variant::Adam),
            "eve" => Ok(Variant::Eve),
            "eve-no-correction" => Ok(Variant::EveNoCorrection),
            other => Err(Error::invalid(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// What an optimizer needs from one block's gradients.
#[derive(Debug, Clone)]
pub enum BlockStats {
    Mean(StatVector),
    Examplewise { mean: StatVector, raw: StatVector },
}

impl BlockStats {
    pub fn from_batch(g: &GradBatch) -> BlockStats {
        BlockStats::Examplewise {
            mean: batch_mean(g),
            raw: raw_second_moment(g),
        }
    }

    pub fn mean(&self) -> &StatVector {
        match self {
            BlockStats::Mean(m) | BlockStats::Examplewise { mean: m, .. } => m,
        }
    }
}

/// Per-block optimizer state for a whole model.
#[derive(Debug, Clone)]
pub struct LayerwiseOptimizer {
    variant: Variant,
    hp: HyperParams,
    states: HashMap<BlockId, MomentState>,
}

impl LayerwiseOptimizer {
    pub fn new(variant: Variant, hp: HyperParams) -> Result<Self> {
        hp.validate()?;
        Ok(LayerwiseOptimizer {
            variant,
            hp,
            states: HashMap::new(),
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn hyper_params(&self) -> &HyperParams {
        &self.hp
    }

    pub fn state(&self, id: &BlockId) -> Option<&MomentState> {
        self.states.get(id)
    }

    /// Updates `theta` in place and returns the block's step record.
    pub fn step(&mut self, theta: &mut ParamBlock, stats: &BlockStats) -> Result<StepRecord> {
        let state = self
            .states
            .entry(theta.id.clone())
            .or_insert_with(|| MomentState::new(theta.len()));
        let (next_theta, next_state, record) = match (self.variant, stats) {
            (Variant::Adam, s) => adam_step(theta, state, s.mean(), &self.hp)?,
            (Variant::Eve, BlockStats::Examplewise { mean, raw }) => {
                eve_step_from_stats(theta, state, mean, raw, &self.hp, Correction::Batch)?
            }
            (Variant::EveNoCorrection, BlockStats::Examplewise { mean, raw }) => {
                eve_step_from_stats(theta, state, mean, raw, &self.hp, Correction::None)?
            }
            (v, BlockStats::Mean(_)) => {
                return Err(Error::invalid(format!("{v} needs examplewise statistics")));
            }
        };
        debug_assert_eq!(stats.mean().kind, StatKind::Mean);
        *theta = next_theta;
        *state = next_state;
        Ok(record)
    }
}
