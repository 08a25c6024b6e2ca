//! Dense feed-forward networks with analytic examplewise backpropagation.
//!
//! Layer `l` computes `z_l = W_l a_l + b_l` with `W_l` stored row-major as
//! `out x in`; hidden layers apply the activation, the last layer feeds the
//! loss head directly. Blocks are declared input-to-output as
//! `layer{l}.weight`, `layer{l}.bias`.

use std::cell::Cell;
use std::ops::Deref;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Example;
use super::params::{BlockShape, ParamBlock, Params};
use crate::error::{Error, Result};
use crate::grad_stats::{BlockId, GradBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    /// `½ (o - y)²` on a single output.
    Mse,
    /// Binary cross-entropy on a single logit, targets in {0, 1}.
    Logistic,
    /// Softmax cross-entropy, target is the class index.
    SoftmaxCrossEntropy,
}

impl Loss {
    fn value(self, out: &[f64], y: f64) -> f64 {
        match self {
            Loss::Mse => {
                let r = out[0] - y;
                0.5 * r * r
            }
            Loss::Logistic => {
                let o = out[0];
                o.max(0.0) + (-o.abs()).exp().ln_1p() - y * o
            }
            Loss::SoftmaxCrossEntropy => log_sum_exp(out) - out[y as usize],
        }
    }

    /// dLoss/dout.
    fn gradient(self, out: &[f64], y: f64) -> Vec<f64> {
        match self {
            Loss::Mse => vec![out[0] - y],
            Loss::Logistic => vec![sigmoid(out[0]) - y],
            Loss::SoftmaxCrossEntropy => {
                let lse = log_sum_exp(out);
                let mut g: Vec<f64> = out.iter().map(|o| (o - lse).exp()).collect();
                g[y as usize] -= 1.0;
                g
            }
        }
    }

    fn check_target(self, y: f64, outputs: usize) -> Result<()> {
        let ok = match self {
            Loss::Mse => y.is_finite(),
            Loss::Logistic => y == 0.0 || y == 1.0,
            Loss::SoftmaxCrossEntropy => y >= 0.0 && y.fract() == 0.0 && (y as usize) < outputs,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("target {y} not valid for {self:?}")))
        }
    }

    pub fn is_classification(self) -> bool {
        !matches!(self, Loss::Mse)
    }
}

fn sigmoid(o: f64) -> f64 {
    if o >= 0.0 {
        1.0 / (1.0 + (-o).exp())
    } else {
        let e = o.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn weight_id(layer: usize) -> BlockId {
    BlockId(format!("layer{layer}.weight"))
}

pub fn bias_id(layer: usize) -> BlockId {
    BlockId(format!("layer{layer}.bias"))
}

/// Per-example forward intermediates.
struct Trace {
    /// Input to each layer (`a_0 = x`).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each layer; the last one is the network output.
    pre: Vec<Vec<f64>>,
}

impl Trace {
    fn output(&self) -> &[f64] {
        self.pre.last().expect("at least one layer")
    }
}

/// Counts `f64` entries held by live examplewise gradient buffers.
#[derive(Debug, Default)]
pub struct BufferMeter {
    current: Cell<usize>,
    peak: Cell<usize>,
}

impl BufferMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn track(&self, batch: GradBatch) -> Metered<'_> {
        let now = self.current.get() + batch.len();
        self.current.set(now);
        self.peak.set(self.peak.get().max(now));
        Metered { batch, meter: self }
    }

    pub fn current(&self) -> usize {
        self.current.get()
    }

    pub fn peak(&self) -> usize {
        self.peak.get()
    }
}

/// A gradient buffer whose size is released from its meter on drop.
#[derive(Debug)]
pub struct Metered<'a> {
    batch: GradBatch,
    meter: &'a BufferMeter,
}

impl Deref for Metered<'_> {
    type Target = GradBatch;

    fn deref(&self) -> &GradBatch {
        &self.batch
    }
}

impl Drop for Metered<'_> {
    fn drop(&mut self) {
        self.meter.current.set(self.meter.current.get() - self.batch.len());
    }
}

/// Result of a layerwise sweep: one consumer output per block, in visit order.
#[derive(Debug, Clone)]
pub struct StreamReport<R> {
    pub outputs: Vec<(BlockId, R)>,
    /// Largest number of examplewise gradient entries alive at once.
    pub peak_buffer_entries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    activation: Activation,
    loss: Loss,
}

impl Mlp {
    /// `sizes` lists the input width, every hidden width and the output width.
    pub fn new(sizes: Vec<usize>, activation: Activation, loss: Loss) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::invalid("a model needs at least input and output sizes"));
        }
        if sizes.contains(&0) {
            return Err(Error::invalid("layer sizes must be positive"));
        }
        let out = *sizes.last().unwrap();
        match loss {
            Loss::Mse | Loss::Logistic if out != 1 => {
                return Err(Error::invalid(format!("{loss:?} needs exactly one output")));
            }
            Loss::SoftmaxCrossEntropy if out < 2 => {
                return Err(Error::invalid("softmax cross-entropy needs at least two outputs"));
            }
            _ => {}
        }
        Ok(Mlp {
            sizes,
            activation,
            loss,
        })
    }

    pub fn linear_regression(features: usize) -> Result<Self> {
        Mlp::new(vec![features, 1], Activation::Identity, Loss::Mse)
    }

    pub fn logistic_regression(features: usize) -> Result<Self> {
        Mlp::new(vec![features, 1], Activation::Identity, Loss::Logistic)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn loss(&self) -> Loss {
        self.loss
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Block ids in declaration (input-to-output) order.
    pub fn block_ids(&self) -> Vec<BlockId> {
        (0..self.num_layers())
            .flat_map(|l| [weight_id(l), bias_id(l)])
            .collect()
    }

    fn shapes(&self) -> Vec<(BlockId, BlockShape)> {
        (0..self.num_layers())
            .flat_map(|l| {
                let (rows, cols) = (self.sizes[l + 1], self.sizes[l]);
                [
                    (weight_id(l), BlockShape::Matrix { rows, cols }),
                    (bias_id(l), BlockShape::Vector { len: rows }),
                ]
            })
            .collect()
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params(&self, seed: u64) -> Params {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = self
            .shapes()
            .into_iter()
            .map(|(id, shape)| {
                let values = match shape {
                    BlockShape::Matrix { rows, cols } => {
                        let limit = (6.0 / (rows + cols) as f64).sqrt();
                        (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect()
                    }
                    BlockShape::Vector { len } => vec![0.0; len],
                };
                ParamBlock { id, shape, values }
            })
            .collect();
        Params::new(blocks).expect("generated ids are unique")
    }

    /// Zero-valued parameters with the model's layout.
    pub fn zero_params(&self) -> Params {
        let blocks = self
            .shapes()
            .into_iter()
            .map(|(id, shape)| ParamBlock {
                id,
                values: vec![0.0; shape.len()],
                shape,
            })
            .collect();
        Params::new(blocks).expect("generated ids are unique")
    }

    pub fn check_params(&self, params: &Params) -> Result<()> {
        let expected = self.shapes();
        if params.blocks().len() != expected.len() {
            return Err(Error::shape(format!(
                "model has {} blocks, parameters have {}",
                expected.len(),
                params.blocks().len()
            )));
        }
        for ((id, shape), block) in expected.iter().zip(params.blocks()) {
            if &block.id != id || block.shape != *shape || block.values.len() != shape.len() {
                return Err(Error::shape(format!(
                    "expected block `{id}` with shape {shape:?}, found `{}` {:?}",
                    block.id, block.shape
                )));
            }
        }
        Ok(())
    }

    fn check_example(&self, ex: &Example<'_>) -> Result<()> {
        if ex.x.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "example has {} features, model expects {}",
                ex.x.len(),
                self.input_dim()
            )));
        }
        self.loss.check_target(ex.y, self.output_dim())
    }

    fn weights<'p>(&self, params: &'p Params, layer: usize) -> (&'p [f64], &'p [f64]) {
        let blocks = params.blocks();
        (&blocks[2 * layer].values, &blocks[2 * layer + 1].values)
    }

    fn trace(&self, params: &Params, x: &[f64]) -> Trace {
        let layers = self.num_layers();
        let mut inputs = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers);
        let mut a = x.to_vec();
        for l in 0..layers {
            let (w, b) = self.weights(params, l);
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let z: Vec<f64> = (0..n_out)
                .map(|i| {
                    let row = &w[i * n_in..(i + 1) * n_in];
                    let mut s = 0.0;
                    for (wij, aj) in row.iter().zip(&a) {
                        s += wij * aj;
                    }
                    s + b[i]
                })
                .collect();
            let next = if l + 1 < layers {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            } else {
                Vec::new()
            };
            inputs.push(std::mem::replace(&mut a, next));
            pre.push(z);
        }
        Trace { inputs, pre }
    }

    /// Network output (logits or regression value) for one input.
    pub fn forward(&self, params: &Params, x: &[f64]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        if x.len() != self.input_dim() {
            return Err(Error::shape("input width does not match model"));
        }
        Ok(self.trace(params, x).output().to_vec())
    }

    /// Loss `f(x, θ)` of a single example.
    pub fn forward_loss(&self, params: &Params, ex: &Example<'_>) -> Result<f64> {
        self.check_params(params)?;
        self.check_example(ex)?;
        Ok(self.loss.value(self.trace(params, ex.x).output(), ex.y))
    }

    pub fn predict_class(&self, params: &Params, x: &[f64]) -> Result<usize> {
        let out = self.forward(params, x)?;
        Ok(match self.loss {
            Loss::Logistic | Loss::Mse => usize::from(out[0] > 0.0),
            Loss::SoftmaxCrossEntropy => {
                out.iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
                    )
                    .0
            }
        })
    }

    fn backprop_delta(&self, params: &Params, layer: usize, delta: &[f64], pre_below: &[f64]) -> Vec<f64> {
        let (w, _) = self.weights(params, layer);
        let (n_in, n_out) = (self.sizes[layer], self.sizes[layer + 1]);
        let mut below = vec![0.0; n_in];
        for i in 0..n_out {
            let row = &w[i * n_in..(i + 1) * n_in];
            for j in 0..n_in {
                below[j] += row[j] * delta[i];
            }
        }
        below
            .iter_mut()
            .zip(pre_below)
            .for_each(|(d, &z)| *d *= self.activation.derivative(z));
        below
    }

    fn prepare(&self, params: &Params, batch: &[Example<'_>]) -> Result<(Vec<Trace>, Vec<Vec<f64>>)> {
        self.check_params(params)?;
        if batch.is_empty() {
            return Err(Error::invalid("batch must contain at least one example"));
        }
        for ex in batch {
            self.check_example(ex)?;
        }
        let traces: Vec<Trace> = batch.iter().map(|ex| self.trace(params, ex.x)).collect();
        let deltas = traces
            .iter()
            .zip(batch)
            .map(|(t, ex)| self.loss.gradient(t.output(), ex.y))
            .collect();
        Ok((traces, deltas))
    }

    /// Walks the blocks output-to-input, building each block's examplewise
    /// gradients only when it is visited and handing them to `visit`.
    fn sweep<F>(&self, params: &Params, batch: &[Example<'_>], mut visit: F) -> Result<()>
    where
        F: FnMut(usize, GradBatch) -> Result<()>,
    {
        let (traces, mut deltas) = self.prepare(params, batch)?;
        let bsz = batch.len();
        for l in (0..self.num_layers()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);

            let bias_rows: Vec<f64> = deltas.iter().flatten().copied().collect();
            visit(2 * l + 1, GradBatch::new(bias_id(l), bsz, n_out, bias_rows)?)?;

            let mut weight_rows = Vec::with_capacity(bsz * n_out * n_in);
            for (delta, t) in deltas.iter().zip(&traces) {
                let a = &t.inputs[l];
                for &d in delta {
                    weight_rows.extend(a.iter().map(|&aj| d * aj));
                }
            }
            visit(2 * l, GradBatch::new(weight_id(l), bsz, n_out * n_in, weight_rows)?)?;

            if l > 0 {
                deltas = deltas
                    .iter()
                    .zip(&traces)
                    .map(|(d, t)| self.backprop_delta(params, l, d, &t.pre[l - 1]))
                    .collect();
            }
        }
        Ok(())
    }

    /// Layerwise streaming evaluation: each block's `B x P` buffer is built,
    /// passed to `consumer`, and released before the next block is built.
    pub fn streaming_backprop<R, F>(
        &self,
        params: &Params,
        batch: &[Example<'_>],
        mut consumer: F,
    ) -> Result<StreamReport<R>>
    where
        F: FnMut(&GradBatch) -> Result<R>,
    {
        let meter = BufferMeter::new();
        let mut outputs = Vec::with_capacity(2 * self.num_layers());
        self.sweep(params, batch, |_, g| {
            let g = meter.track(g);
            let r = consumer(&g)?;
            outputs.push((g.block_id().clone(), r));
            Ok(())
        })?;
        Ok(StreamReport {
            outputs,
            peak_buffer_entries: meter.peak(),
        })
    }

    /// Materializes every block's examplewise gradients before reducing any.
    pub fn materialized_backprop<R, F>(
        &self,
        params: &Params,
        batch: &[Example<'_>],
        mut consumer: F,
    ) -> Result<StreamReport<R>>
    where
        F: FnMut(&GradBatch) -> Result<R>,
    {
        let meter = BufferMeter::new();
        let mut held = Vec::new();
        self.sweep(params, batch, |_, g| {
            held.push(meter.track(g));
            Ok(())
        })?;
        let outputs = held
            .iter()
            .map(|g| Ok((g.block_id().clone(), consumer(g)?)))
            .collect::<Result<Vec<_>>>()?;
        let peak_buffer_entries = meter.peak();
        drop(held);
        Ok(StreamReport {
            outputs,
            peak_buffer_entries,
        })
    }

    /// Examplewise gradients of every block, in output-to-input order.
    pub fn examplewise_grads(&self, params: &Params, batch: &[Example<'_>]) -> Result<Vec<GradBatch>> {
        let mut all = Vec::new();
        self.sweep(params, batch, |_, g| {
            all.push(g);
            Ok(())
        })?;
        Ok(all)
    }

    /// Examplewise gradients of a single block: row `b` is `∇ f(x_b, θ)`
    /// restricted to `block`.
    pub fn examplewise_grad_block(&self, params: &Params, batch: &[Example<'_>], block: &BlockId) -> Result<GradBatch> {
        let target = params.index_of(block)?;
        let mut found = None;
        self.sweep(params, batch, |idx, g| {
            if idx == target {
                found = Some(g);
            }
            Ok(())
        })?;
        found.ok_or_else(|| Error::UnknownBlock(block.to_string()))
    }

    /// Gradient of the batch-mean loss in a single pass: the output error is
    /// scaled by `1/B` and accumulated through the layers without forming
    /// any per-example gradient.
    pub fn batch_gradient(&self, params: &Params, batch: &[Example<'_>]) -> Result<Params> {
        let (traces, deltas) = self.prepare(params, batch)?;
        let scale = 1.0 / batch.len() as f64;
        let mut deltas: Vec<Vec<f64>> = deltas
            .into_iter()
            .map(|d| d.into_iter().map(|v| v * scale).collect())
            .collect();
        let mut grads = self.zero_params();
        for l in (0..self.num_layers()).rev() {
            let n_in = self.sizes[l];
            {
                let blocks = grads.blocks_mut();
                let (head, tail) = blocks.split_at_mut(2 * l + 1);
                let gw = &mut head[2 * l].values;
                let gb = &mut tail[0].values;
                for (delta, t) in deltas.iter().zip(&traces) {
                    let a = &t.inputs[l];
                    for (i, &d) in delta.iter().enumerate() {
                        gb[i] += d;
                        for j in 0..n_in {
                            gw[i * n_in + j] += d * a[j];
                        }
                    }
                }
            }
            if l > 0 {
                deltas = deltas
                    .iter()
                    .zip(&traces)
                    .map(|(d, t)| self.backprop_delta(params, l, d, &t.pre[l - 1]))
                    .collect();
            }
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad_stats::{batch_mean, examplewise_variance, raw_second_moment, StatVector};
    use crate::models::data::Dataset;
    use crate::models::fd::finite_difference_grad;

    fn mlp() -> Mlp {
        Mlp::new(vec![3, 5, 4, 2], Activation::Tanh, Loss::SoftmaxCrossEntropy).unwrap()
    }

    fn data(seed: u64, n: usize) -> Dataset {
        Dataset::gaussian_blobs(n, 2, 3, 1.0, 1.0, seed).unwrap()
    }

    #[test]
    fn constructor_validates_heads() {
        assert!(Mlp::new(vec![2], Activation::Tanh, Loss::Mse).is_err());
        assert!(Mlp::new(vec![2, 2], Activation::Tanh, Loss::Mse).is_err());
        assert!(Mlp::new(vec![2, 1], Activation::Tanh, Loss::SoftmaxCrossEntropy).is_err());
        assert!(Mlp::new(vec![2, 0, 1], Activation::Tanh, Loss::Logistic).is_err());
    }

    #[test]
    fn zero_linear_model_has_zero_loss_on_zero_target() {
        let m = Mlp::linear_regression(3).unwrap();
        let p = m.zero_params();
        let ex = Example {
            x: &[1.0, -2.0, 0.5],
            y: 0.0,
        };
        assert_eq!(m.forward_loss(&p, &ex).unwrap(), 0.0);
    }

    #[test]
    fn logistic_loss_at_zero_logit_is_ln2() {
        let m = Mlp::logistic_regression(2).unwrap();
        let p = m.zero_params();
        for y in [0.0, 1.0] {
            let l = m.forward_loss(&p, &Example { x: &[0.3, 0.7], y }).unwrap();
            assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_and_target_errors() {
        let m = Mlp::logistic_regression(2).unwrap();
        let p = m.zero_params();
        assert!(m.forward_loss(&p, &Example { x: &[0.3], y: 1.0 }).is_err());
        assert!(m.forward_loss(&p, &Example { x: &[0.3, 0.1], y: 0.5 }).is_err());
        let other = Mlp::logistic_regression(3).unwrap().zero_params();
        assert!(m.forward_loss(&other, &Example { x: &[0.3, 0.1], y: 1.0 }).is_err());
    }

    /// Straightforward re-implementation: explicit loops over layers,
    /// textbook softmax.
    fn reference_loss(m: &Mlp, p: &Params, x: &[f64], y: usize) -> f64 {
        let mut a = x.to_vec();
        let layers = m.num_layers();
        for l in 0..layers {
            let w = &p.blocks()[2 * l].values;
            let b = &p.blocks()[2 * l + 1].values;
            let n_in = a.len();
            let mut z = b.clone();
            for (i, zi) in z.iter_mut().enumerate() {
                *zi += (0..n_in).map(|j| w[i * n_in + j] * a[j]).sum::<f64>();
            }
            a = if l + 1 < layers {
                z.iter().map(|v| v.tanh()).collect()
            } else {
                z
            };
        }
        let denom: f64 = a.iter().map(|v| v.exp()).sum();
        -(a[y].exp() / denom).ln()
    }

    #[test]
    fn forward_matches_reference_implementation() {
        let m = mlp();
        let p = m.init_params(9);
        let d = data(1, 20);
        for i in 0..d.len() {
            let ex = d.example(i);
            let got = m.forward_loss(&p, &ex).unwrap();
            let want = reference_loss(&m, &p, ex.x, ex.y as usize);
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn linear_regression_row_is_residual_times_input() {
        let m = Mlp::linear_regression(3).unwrap();
        let p = m.zero_params().with_flat(&[0.5, -1.0, 2.0, 0.0]).unwrap();
        let x = [1.0, 2.0, 3.0];
        let y = 0.25;
        let g = m
            .examplewise_grad_block(&p, &[Example { x: &x, y }], &weight_id(0))
            .unwrap();
        let r = 0.5 * 1.0 - 1.0 * 2.0 + 2.0 * 3.0 - y;
        assert_eq!(g.row(0), &[r * 1.0, r * 2.0, r * 3.0]);
    }

    #[test]
    fn duplicated_example_gives_identical_rows() {
        let m = mlp();
        let p = m.init_params(3);
        let d = data(2, 4);
        let batch = [d.example(1), d.example(1)];
        for g in m.examplewise_grads(&p, &batch).unwrap() {
            assert_eq!(g.row(0), g.row(1));
        }
    }

    #[test]
    fn unknown_block_is_rejected() {
        let m = mlp();
        let p = m.init_params(3);
        let d = data(2, 4);
        let err = m.examplewise_grad_block(&p, &[d.example(0)], &"nope".into());
        assert!(matches!(err, Err(Error::UnknownBlock(_))));
        assert!(m.examplewise_grads(&p, &[]).is_err());
    }

    #[test]
    fn examplewise_rows_match_finite_differences() {
        let m = mlp();
        let p = m.init_params(5);
        let d = data(3, 4);
        let batch: Vec<_> = (0..4).map(|i| d.example(i)).collect();
        let grads = m.examplewise_grads(&p, &batch).unwrap();
        for (b, ex) in batch.iter().enumerate() {
            let numeric = finite_difference_grad(&m, &p, ex, 1e-5).unwrap();
            let mut offset = 0;
            for block in p.blocks() {
                let g = grads.iter().find(|g| g.block_id() == &block.id).unwrap();
                for (k, &analytic) in g.row(b).iter().enumerate() {
                    let fd = numeric[offset + k];
                    if analytic.abs() > 1e-8 {
                        assert!(((analytic - fd) / analytic).abs() <= 1e-5, "{analytic} vs {fd}");
                    }
                }
                offset += block.len();
            }
        }
    }

    #[test]
    fn batch_mean_matches_one_pass_gradient() {
        let m = Mlp::new(vec![3, 6, 2], Activation::Relu, Loss::SoftmaxCrossEntropy).unwrap();
        let p = m.init_params(8);
        let d = data(4, 16);
        let batch: Vec<_> = (0..16).map(|i| d.example(i)).collect();
        let one_pass = m.batch_gradient(&p, &batch).unwrap();
        for g in m.examplewise_grads(&p, &batch).unwrap() {
            let mean = batch_mean(&g).values;
            let want = &one_pass.get(g.block_id()).unwrap().values;
            for (a, b) in mean.iter().zip(want) {
                assert!((a - b).abs() <= 1e-10 * b.abs().max(1e-12), "{a} vs {b}");
            }
        }
    }

    fn moments(g: &GradBatch) -> Result<(StatVector, StatVector, StatVector)> {
        Ok((batch_mean(g), raw_second_moment(g), examplewise_variance(g)))
    }

    #[test]
    fn streaming_equals_materialized_bitwise() {
        let m = Mlp::new(vec![4, 8, 6, 3], Activation::Tanh, Loss::SoftmaxCrossEntropy).unwrap();
        let p = m.init_params(11);
        let d = Dataset::gaussian_blobs(12, 3, 4, 1.0, 1.0, 7).unwrap();
        let batch: Vec<_> = (0..12).map(|i| d.example(i)).collect();
        let s = m.streaming_backprop(&p, &batch, moments).unwrap();
        let f = m.materialized_backprop(&p, &batch, moments).unwrap();
        assert_eq!(s.outputs.len(), 6);
        for ((ia, a), (ib, b)) in s.outputs.iter().zip(&f.outputs) {
            assert_eq!(ia, ib);
            for (x, y) in [(&a.0, &b.0), (&a.1, &b.1), (&a.2, &b.2)] {
                let xb: Vec<u64> = x.values.iter().map(|v| v.to_bits()).collect();
                let yb: Vec<u64> = y.values.iter().map(|v| v.to_bits()).collect();
                assert_eq!(xb, yb);
            }
        }
        let per_block: Vec<usize> = p.blocks().iter().map(|b| 12 * b.len()).collect();
        assert_eq!(s.peak_buffer_entries, *per_block.iter().max().unwrap());
        assert_eq!(f.peak_buffer_entries, per_block.iter().sum::<usize>());
    }

    #[test]
    fn streaming_visits_output_to_input() {
        let m = mlp();
        let p = m.init_params(1);
        let d = data(5, 3);
        let r = m.streaming_backprop(&p, &[d.example(0)], |_| Ok(())).unwrap();
        let ids: Vec<_> = r.outputs.iter().map(|(id, _)| id.as_str().to_owned()).collect();
        assert_eq!(
            ids,
            [
                "layer2.bias",
                "layer2.weight",
                "layer1.bias",
                "layer1.weight",
                "layer0.bias",
                "layer0.weight"
            ]
        );
    }

    #[test]
    fn single_block_model_streams_like_direct_extraction() {
        let m = Mlp::new(vec![3, 2], Activation::Identity, Loss::SoftmaxCrossEntropy).unwrap();
        let p = m.init_params(4);
        let d = data(6, 5);
        let batch: Vec<_> = (0..5).map(|i| d.example(i)).collect();
        let r = m.streaming_backprop(&p, &batch, |g| Ok(raw_second_moment(g))).unwrap();
        let direct = m.examplewise_grad_block(&p, &batch, &weight_id(0)).unwrap();
        let (_, streamed) = r.outputs.iter().find(|(id, _)| id == &weight_id(0)).unwrap();
        assert_eq!(streamed, &raw_second_moment(&direct));
    }

    #[test]
    fn consumer_error_aborts_sweep() {
        let m = mlp();
        let p = m.init_params(1);
        let d = data(5, 3);
        let mut calls = 0;
        let r: Result<StreamReport<()>> = m.streaming_backprop(&p, &[d.example(0)], |_| {
            calls += 1;
            Err(Error::invalid("stop"))
        });
        assert!(r.is_err());
        assert_eq!(calls, 1);
    }

    #[test]
    fn meter_releases_on_drop() {
        let meter = BufferMeter::new();
        {
            let _a = meter.track(GradBatch::new("a".into(), 2, 3, vec![0.0; 6]).unwrap());
            let _b = meter.track(GradBatch::new("b".into(), 1, 1, vec![0.0]).unwrap());
            assert_eq!(meter.current(), 7);
        }
        assert_eq!(meter.current(), 0);
        assert_eq!(meter.peak(), 7);
    }
}
