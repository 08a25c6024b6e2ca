//! Datasets, synthetic generators and minibatch sampling.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Borrowed view of one example.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub x: &'a [f64],
    pub y: f64,
}

/// `D` examples stored row-major, one target per example.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    targets: Vec<f64>,
    feature_dim: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<f64>, targets: Vec<f64>, feature_dim: usize) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::invalid("dataset must contain at least one example"));
        }
        if feature_dim == 0 || inputs.len() != targets.len() * feature_dim {
            return Err(Error::shape(format!(
                "{} input values for {} examples of width {feature_dim}",
                inputs.len(),
                targets.len()
            )));
        }
        if let Some(index) = inputs.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "dataset inputs",
                index,
            });
        }
        if let Some(index) = targets.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "dataset targets",
                index,
            });
        }
        Ok(Dataset {
            inputs,
            targets,
            feature_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn example(&self, i: usize) -> Example<'_> {
        Example {
            x: &self.inputs[i * self.feature_dim..(i + 1) * self.feature_dim],
            y: self.targets[i],
        }
    }

    pub fn examples(&self, indices: &[usize]) -> Vec<Example<'_>> {
        indices.iter().map(|&i| self.example(i)).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = Example<'_>> {
        (0..self.len()).map(|i| self.example(i))
    }

    /// Number of classes implied by integer targets (`max + 1`).
    pub fn class_count(&self) -> usize {
        self.targets.iter().fold(0.0f64, |a, &b| a.max(b)) as usize + 1
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut inputs = Vec::with_capacity(indices.len() * self.feature_dim);
        let mut targets = Vec::with_capacity(indices.len());
        for &i in indices {
            let ex = self.example(i);
            inputs.extend_from_slice(ex.x);
            targets.push(ex.y);
        }
        Dataset::new(inputs, targets, self.feature_dim)
    }

    /// Shuffles once with `seed` and holds out `round(fraction * D)` examples
    /// (at least one, and at least one left for training).
    pub fn split_holdout(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
            return Err(Error::invalid("holdout fraction must lie in (0, 1)"));
        }
        if self.len() < 2 {
            return Err(Error::invalid("need at least two examples to hold some out"));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let held = ((self.len() as f64 * fraction).round() as usize).clamp(1, self.len() - 1);
        let (eval, train) = order.split_at(held);
        Ok((self.subset(train)?, self.subset(eval)?))
    }

    /// Parses one example per line, features first and the target last.
    /// Fields are separated by commas and/or whitespace; blank lines and
    /// lines starting with `#` are skipped.
    pub fn from_delimited_text(text: &str, origin: &Path) -> Result<Dataset> {
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        let mut width = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                message,
            };
            let fields = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|f| !f.is_empty())
                .map(|f| f.parse::<f64>().map_err(|e| parse_err(format!("`{f}`: {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            if fields.len() < 2 {
                return Err(parse_err("need at least one feature and a target".into()));
            }
            match width {
                None => width = Some(fields.len()),
                Some(w) if w != fields.len() => {
                    return Err(parse_err(format!("expected {w} fields, found {}", fields.len())));
                }
                _ => {}
            }
            let (target, features) = fields.split_last().unwrap();
            inputs.extend_from_slice(features);
            targets.push(*target);
        }
        let width = width.ok_or_else(|| Error::invalid(format!("{} has no examples", origin.display())))?;
        Dataset::new(inputs, targets, width - 1)
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let text = std::fs::read_to_string(path)?;
        Dataset::from_delimited_text(&text, path)
    }

    /// Isotropic Gaussian clusters. Class `k` is centred at distance
    /// `separation` from the origin along angle `2πk / classes` in the first
    /// two features (the first feature only when `dim == 1`); labels cycle
    /// through the classes.
    pub fn gaussian_blobs(
        n: usize,
        classes: usize,
        dim: usize,
        separation: f64,
        spread: f64,
        seed: u64,
    ) -> Result<Dataset> {
        if classes < 2 || dim == 0 {
            return Err(Error::invalid("blobs need at least two classes and one feature"));
        }
        if dim == 1 && classes > 2 {
            return Err(Error::invalid("more than two classes need at least two features"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = Vec::with_capacity(n * dim);
        let mut targets = Vec::with_capacity(n);
        for i in 0..n {
            let k = i % classes;
            let angle = std::f64::consts::TAU * k as f64 / classes as f64;
            for j in 0..dim {
                let centre = match j {
                    0 => separation * angle.cos(),
                    1 => separation * angle.sin(),
                    _ => 0.0,
                };
                let noise: f64 = rng.sample(StandardNormal);
                inputs.push(centre + spread * noise);
            }
            targets.push(k as f64);
        }
        Dataset::new(inputs, targets, dim)
    }

    /// `y = w·x + noise`, with `w` and `x` standard normal.
    pub fn linear_regression(n: usize, dim: usize, noise: f64, seed: u64) -> Result<Dataset> {
        Self::regression(n, dim, noise, seed, false)
    }

    /// `y = w·x + Σ c_j x_j² + noise`.
    pub fn quadratic_regression(n: usize, dim: usize, noise: f64, seed: u64) -> Result<Dataset> {
        Self::regression(n, dim, noise, seed, true)
    }

    fn regression(n: usize, dim: usize, noise: f64, seed: u64, quadratic: bool) -> Result<Dataset> {
        if dim == 0 {
            return Err(Error::invalid("regression needs at least one feature"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let c: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.5).collect();
        let mut inputs = Vec::with_capacity(n * dim);
        let mut targets = Vec::with_capacity(n);
        for _ in 0..n {
            let x: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let mut y: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
            if quadratic {
                y += c.iter().zip(&x).map(|(a, b)| a * b * b).sum::<f64>();
            }
            y += noise * rng.sample::<f64, _>(StandardNormal);
            inputs.extend(x);
            targets.push(y);
        }
        Dataset::new(inputs, targets, dim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingStrategy {
    WithReplacement,
    #[default]
    ShuffledEpochs,
}

/// Seeded source of minibatch index sets over `0..n`.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    n: usize,
    batch_size: usize,
    strategy: SamplingStrategy,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, strategy: SamplingStrategy, seed: u64) -> Result<Self> {
        if n == 0 || batch_size == 0 {
            return Err(Error::invalid("sampler needs a non-empty dataset and batch"));
        }
        if strategy == SamplingStrategy::ShuffledEpochs && batch_size > n {
            return Err(Error::invalid(format!(
                "batch size {batch_size} exceeds dataset size {n}"
            )));
        }
        Ok(BatchSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            n,
            batch_size,
            strategy,
            order: (0..n).collect(),
            cursor: n,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        match self.strategy {
            SamplingStrategy::WithReplacement => {
                (0..self.batch_size).map(|_| self.rng.random_range(0..self.n)).collect()
            }
            SamplingStrategy::ShuffledEpochs => (0..self.batch_size)
                .map(|_| {
                    if self.cursor == self.n {
                        self.order.shuffle(&mut self.rng);
                        self.cursor = 0;
                    }
                    self.cursor += 1;
                    self.order[self.cursor - 1]
                })
                .collect(),
        }
    }
}
