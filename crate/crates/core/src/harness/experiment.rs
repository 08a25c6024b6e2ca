//! Training runs, batch-size sweeps and the batch-correction ablation.

use serde::Serialize;

use super::config::{Task, TrainConfig};
use super::metrics::{MetricsRow, RunningStats};
use crate::error::{Error, Result};
use crate::grad_stats::{examplewise_variance, StatKind, StatVector};
use crate::models::{Activation, BatchSampler, Dataset, Loss, Mlp, Params, SamplingStrategy};
use crate::optim::{
    eve_step_from_stats, BlockStats, Correction, HyperParams, LayerwiseOptimizer, MomentState, StepRecord, Variant,
};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn derived_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_add(k.wrapping_mul(GOLDEN))
}

/// Model, data split and initial parameters shared by every arm of a comparison.
#[derive(Debug, Clone)]
pub struct Experiment {
    model: Mlp,
    train: Dataset,
    eval: Dataset,
    init: Params,
    sampling: SamplingStrategy,
    sampler_seed: u64,
}

/// Knobs of a single run.
#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub variant: Variant,
    pub hp: HyperParams,
    pub steps: u64,
    pub eval_every: u64,
    pub warmup: u64,
    /// For `Eve`: also evaluate the uncorrected update from the same state
    /// at every step and count coordinates where it is larger.
    pub shadow: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ShadowReport {
    pub steps_checked: u64,
    /// Steps where some coordinate of the uncorrected update exceeded Eve's.
    pub violating_steps: u64,
    pub max_examplewise_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub optimizer: Variant,
    pub batch_size: usize,
    pub steps: u64,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub final_train_accuracy: Option<f64>,
    pub final_eval_loss: f64,
    pub final_eval_accuracy: Option<f64>,
    /// Step-length statistics over steps after the warmup.
    pub mean_step_length: f64,
    pub std_step_length: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub rows: Vec<MetricsRow>,
    pub summary: RunSummary,
    /// Whole-model step length of every step.
    pub step_lengths: Vec<f64>,
    pub final_params: Params,
    pub shadow: Option<ShadowReport>,
}

impl Experiment {
    pub fn new(
        model: Mlp,
        train: Dataset,
        eval: Dataset,
        init: Params,
        sampling: SamplingStrategy,
        sampler_seed: u64,
    ) -> Result<Self> {
        model.check_params(&init)?;
        for d in [&train, &eval] {
            if d.feature_dim() != model.input_dim() {
                return Err(Error::shape(format!(
                    "dataset has {} features, model expects {}",
                    d.feature_dim(),
                    model.input_dim()
                )));
            }
        }
        Ok(Experiment {
            model,
            train,
            eval,
            init,
            sampling,
            sampler_seed,
        })
    }

    pub fn from_config(c: &TrainConfig) -> Result<Self> {
        c.validate()?;
        let data_seed = derived_seed(c.seed, 1);
        let data = match c.task {
            Task::SyntheticClassification => {
                Dataset::gaussian_blobs(c.examples, c.classes, c.features, c.separation, c.spread, data_seed)?
            }
            Task::SyntheticRegression if c.quadratic => {
                Dataset::quadratic_regression(c.examples, c.features, c.noise, data_seed)?
            }
            Task::SyntheticRegression => Dataset::linear_regression(c.examples, c.features, c.noise, data_seed)?,
            Task::FileDataset => Dataset::load(c.data_path.as_deref().expect("validated"))?,
        };
        let loss = match (c.loss, c.task) {
            (Some(l), _) => l,
            (None, Task::SyntheticRegression) => Loss::Mse,
            (None, _) if data.class_count() > 2 => Loss::SoftmaxCrossEntropy,
            (None, _) => Loss::Logistic,
        };
        let outputs = match loss {
            Loss::SoftmaxCrossEntropy => data.class_count().max(2),
            _ => 1,
        };
        let mut sizes = vec![data.feature_dim()];
        sizes.extend(&c.hidden);
        sizes.push(outputs);
        let activation = if c.hidden.is_empty() {
            Activation::Identity
        } else {
            c.activation
        };
        let model = Mlp::new(sizes, activation, loss)?;
        let (train, eval) = data.split_holdout(c.holdout, derived_seed(c.seed, 2))?;
        let init = model.init_params(derived_seed(c.seed, 3));
        Experiment::new(model, train, eval, init, c.sampling, derived_seed(c.seed, 4))
    }

    pub fn model(&self) -> &Mlp {
        &self.model
    }

    pub fn train_set(&self) -> &Dataset {
        &self.train
    }

    pub fn eval_set(&self) -> &Dataset {
        &self.eval
    }

    pub fn init_params(&self) -> &Params {
        &self.init
    }

    /// Mean loss and, for classifiers, accuracy over `data`.
    pub fn evaluate(&self, params: &Params, data: &Dataset) -> Result<(f64, Option<f64>)> {
        let mut loss = 0.0;
        let mut correct = 0usize;
        for ex in data.iter() {
            loss += self.model.forward_loss(params, &ex)?;
            if self.model.loss().is_classification() && self.model.predict_class(params, ex.x)? == ex.y as usize {
                correct += 1;
            }
        }
        let n = data.len() as f64;
        let acc = self.model.loss().is_classification().then(|| correct as f64 / n);
        Ok((loss / n, acc))
    }

    fn metrics_row(
        &self,
        params: &Params,
        step: u64,
        last: Option<&StepRecord>,
        lengths: &RunningStats,
    ) -> Result<MetricsRow> {
        let (train_loss, train_accuracy) = self.evaluate(params, &self.train)?;
        let (eval_loss, eval_accuracy) = self.evaluate(params, &self.eval)?;
        if !train_loss.is_finite() {
            return Err(Error::Diverged { step, loss: train_loss });
        }
        Ok(MetricsRow {
            step,
            train_loss,
            train_accuracy,
            eval_loss,
            eval_accuracy,
            step_length: last.map_or(0.0, |r| r.step_length),
            per_coord_abs_mean: last.map_or(0.0, |r| r.per_coord_abs_mean),
            step_length_std: lengths.std(),
        })
    }

    /// Runs one optimizer from the shared initialization. Adam consumes the
    /// one-pass batch gradient; the Eve variants consume per-block statistics
    /// from the streaming examplewise sweep.
    pub fn run(&self, opts: &RunOptions) -> Result<TrainingRun> {
        if opts.steps == 0 || opts.eval_every == 0 {
            return Err(Error::Config("steps and eval_every must be at least 1".into()));
        }
        let hp = opts.hp;
        let mut opt = LayerwiseOptimizer::new(opts.variant, hp)?;
        let mut sampler = BatchSampler::new(self.train.len(), hp.batch_size, self.sampling, self.sampler_seed)?;
        let mut params = self.init.clone();
        let mut all_lengths = RunningStats::default();
        let mut after_warmup = RunningStats::default();
        let mut step_lengths = Vec::with_capacity(opts.steps as usize);
        let shadow_on = opts.shadow && opts.variant == Variant::Eve;
        let mut shadow = ShadowReport::default();
        let mut rows = vec![self.metrics_row(&params, 0, None, &all_lengths)?];

        for step in 1..=opts.steps {
            let indices = sampler.next_batch();
            let batch = self.train.examples(&indices);
            let stats: Vec<(usize, BlockStats)> = if opts.variant.uses_examplewise() {
                let mut max_var = shadow.max_examplewise_variance;
                let report = self.model.streaming_backprop(&params, &batch, |g| {
                    if shadow_on {
                        let v = examplewise_variance(g);
                        max_var = v.values.iter().copied().fold(max_var, f64::max);
                    }
                    Ok(BlockStats::from_batch(g))
                })?;
                shadow.max_examplewise_variance = max_var;
                report
                    .outputs
                    .into_iter()
                    .map(|(id, s)| Ok((params.index_of(&id)?, s)))
                    .collect::<Result<_>>()?
            } else {
                let grads = self.model.batch_gradient(&params, &batch)?;
                grads
                    .blocks()
                    .iter()
                    .enumerate()
                    .map(|(i, b)| {
                        Ok((
                            i,
                            BlockStats::Mean(StatVector::new(b.id.clone(), StatKind::Mean, b.values.clone())?),
                        ))
                    })
                    .collect::<Result<_>>()?
            };

            let mut records: Vec<Option<StepRecord>> = vec![None; params.blocks().len()];
            let mut violated = false;
            for (idx, s) in &stats {
                let block = &mut params.blocks_mut()[*idx];
                if shadow_on {
                    if let BlockStats::Examplewise { mean, raw } = s {
                        let state = opt
                            .state(&block.id)
                            .cloned()
                            .unwrap_or_else(|| MomentState::new(block.len()));
                        let eve = eve_step_from_stats(block, &state, mean, raw, &hp, Correction::Batch)?;
                        let plain = eve_step_from_stats(block, &state, mean, raw, &hp, Correction::None)?;
                        violated |= plain.2.update.iter().zip(&eve.2.update).any(|(p, e)| p.abs() > e.abs());
                    }
                }
                records[*idx] = Some(opt.step(block, s)?);
            }
            if shadow_on {
                shadow.steps_checked += 1;
                shadow.violating_steps += u64::from(violated);
            }
            let record = StepRecord::concat(records.iter().flatten());
            if !record.step_length.is_finite() {
                return Err(Error::Diverged { step, loss: f64::NAN });
            }
            all_lengths.push(record.step_length);
            if step > opts.warmup {
                after_warmup.push(record.step_length);
            }
            step_lengths.push(record.step_length);
            if step % opts.eval_every == 0 || step == opts.steps {
                rows.push(self.metrics_row(&params, step, Some(&record), &all_lengths)?);
            }
        }

        let first = &rows[0];
        let last = rows.last().expect("at least the initial row");
        let summary = RunSummary {
            optimizer: opts.variant,
            batch_size: hp.batch_size,
            steps: opts.steps,
            initial_train_loss: first.train_loss,
            final_train_loss: last.train_loss,
            final_train_accuracy: last.train_accuracy,
            final_eval_loss: last.eval_loss,
            final_eval_accuracy: last.eval_accuracy,
            mean_step_length: after_warmup.mean(),
            std_step_length: after_warmup.std(),
        };
        Ok(TrainingRun {
            rows,
            summary,
            step_lengths,
            final_params: params,
            shadow: shadow_on.then_some(shadow),
        })
    }
}

fn options(c: &TrainConfig, variant: Variant, batch_size: usize) -> RunOptions {
    RunOptions {
        variant,
        hp: c.hyper_params().with_batch_size(batch_size),
        steps: c.steps,
        eval_every: c.eval_every,
        warmup: c.effective_warmup(),
        shadow: false,
    }
}

/// Trains `config.optimizer` for `config.steps` steps.
pub fn run_training(config: &TrainConfig) -> Result<TrainingRun> {
    let exp = Experiment::from_config(config)?;
    exp.run(&options(config, config.optimizer, config.batch_size))
}

/// One run per batch size and optimizer, all arms sharing data, initial
/// parameters and sampler seed.
pub fn run_batch_sweep(config: &TrainConfig, batch_sizes: &[usize]) -> Result<Vec<RunSummary>> {
    if batch_sizes.is_empty() {
        return Err(Error::Config("batch size list is empty".into()));
    }
    let exp = Experiment::from_config(config)?;
    let mut out = Vec::with_capacity(batch_sizes.len() * config.optimizers.len());
    for &b in batch_sizes {
        if b == 0 || b > exp.train_set().len() {
            return Err(Error::Config(format!(
                "batch size {b} must lie in 1..={}",
                exp.train_set().len()
            )));
        }
        for &variant in &config.optimizers {
            out.push(exp.run(&options(config, variant, b))?.summary);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub arm: Variant,
    pub mean_step_length: f64,
    pub std_step_length: f64,
    pub final_train_loss: f64,
    pub final_eval_loss: f64,
    pub final_eval_accuracy: Option<f64>,
    /// This arm's mean step length over Eve's.
    pub step_length_ratio: f64,
    pub shadow_steps: u64,
    pub shadow_violating_steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSummary {
    pub eve: RunSummary,
    pub no_correction: RunSummary,
    /// `mean_step_length(no correction) / mean_step_length(eve)` after warmup.
    pub step_length_ratio: f64,
    pub shadow: ShadowReport,
    pub eve_step_lengths: Vec<f64>,
    pub no_correction_step_lengths: Vec<f64>,
}

impl AblationSummary {
    pub fn rows(&self) -> Vec<AblationRow> {
        [(&self.eve, 1.0), (&self.no_correction, self.step_length_ratio)]
            .into_iter()
            .map(|(s, ratio)| AblationRow {
                arm: s.optimizer,
                mean_step_length: s.mean_step_length,
                std_step_length: s.std_step_length,
                final_train_loss: s.final_train_loss,
                final_eval_loss: s.final_eval_loss,
                final_eval_accuracy: s.final_eval_accuracy,
                step_length_ratio: ratio,
                shadow_steps: self.shadow.steps_checked,
                shadow_violating_steps: self.shadow.violating_steps,
            })
            .collect()
    }
}

/// Paired Eve / Eve-without-correction runs on an existing experiment.
///
/// Fails when examplewise gradients vary but the uncorrected arm's mean
/// step length after warmup is not strictly smaller.
pub fn run_ablation_on(
    exp: &Experiment,
    hp: HyperParams,
    steps: u64,
    eval_every: u64,
    warmup: u64,
) -> Result<AblationSummary> {
    let base = RunOptions {
        variant: Variant::Eve,
        hp,
        steps,
        eval_every,
        warmup,
        shadow: true,
    };
    let eve = exp.run(&base)?;
    let plain = exp.run(&RunOptions {
        variant: Variant::EveNoCorrection,
        shadow: false,
        ..base
    })?;
    let shadow = eve.shadow.clone().unwrap_or_default();
    let ratio = plain.summary.mean_step_length / eve.summary.mean_step_length;
    if shadow.max_examplewise_variance > 0.0
        && plain
            .summary
            .mean_step_length
            .partial_cmp(&eve.summary.mean_step_length)
            != Some(std::cmp::Ordering::Less)
    {
        return Err(Error::Assertion(format!(
            "uncorrected mean step length {} is not below Eve's {}",
            plain.summary.mean_step_length, eve.summary.mean_step_length
        )));
    }
    Ok(AblationSummary {
        eve: eve.summary,
        no_correction: plain.summary,
        step_length_ratio: ratio,
        shadow,
        eve_step_lengths: eve.step_lengths,
        no_correction_step_lengths: plain.step_lengths,
    })
}

pub fn run_ablation(config: &TrainConfig) -> Result<AblationSummary> {
    let exp = Experiment::from_config(config)?;
    run_ablation_on(
        &exp,
        config.hyper_params(),
        config.steps,
        config.eval_every,
        config.effective_warmup(),
    )
}
