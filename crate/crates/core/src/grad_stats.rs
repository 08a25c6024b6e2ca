//! Reductions over a batch of examplewise gradients.
//!
//! Every reduction walks the examples in ascending order and keeps one
//! accumulator per parameter column, so repeated evaluations on the same
//! batch are bit-identical regardless of how the caller schedules blocks.

use std::fmt;

use crate::error::{Error, Result};

/// Identifier of a parameter block (one weight matrix or bias vector).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockId(pub String);

impl BlockId {
    pub fn new(name: impl Into<String>) -> Self {
        BlockId(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for BlockId {
    fn from(s: &str) -> Self {
        BlockId(s.to_owned())
    }
}

/// `B` examplewise gradients for one parameter block, stored row-major
/// (one row per example, one column per parameter).
#[derive(Debug, Clone, PartialEq)]
pub struct GradBatch {
    block_id: BlockId,
    values: Vec<f64>,
    batch_size: usize,
    param_count: usize,
}

impl GradBatch {
    pub fn new(block_id: BlockId, batch_size: usize, param_count: usize, values: Vec<f64>) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if param_count == 0 {
            return Err(Error::invalid("parameter count must be at least 1"));
        }
        if values.len() != batch_size * param_count {
            return Err(Error::shape(format!(
                "gradient batch `{block_id}` has {} entries, expected {batch_size}x{param_count}",
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "gradient batch",
                index,
            });
        }
        Ok(GradBatch {
            block_id,
            values,
            batch_size,
            param_count,
        })
    }

    /// Builds a batch from a list of equally sized rows.
    pub fn from_rows(block_id: BlockId, rows: &[Vec<f64>]) -> Result<Self> {
        let batch_size = rows.len();
        let param_count = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != param_count) {
            return Err(Error::shape("ragged gradient rows"));
        }
        let values = rows.iter().flatten().copied().collect();
        GradBatch::new(block_id, batch_size, param_count, values)
    }

    pub fn block_id(&self) -> &BlockId {
        &self.block_id
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, b: usize) -> &[f64] {
        &self.values[b * self.param_count..(b + 1) * self.param_count]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.param_count)
    }

    fn column(&self, p: usize) -> Vec<f64> {
        self.rows().map(|r| r[p]).collect()
    }

    /// Number of `f64` entries held by this batch.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatKind {
    Mean,
    RawSecondMoment,
    Variance,
    Median,
    /// Mean absolute deviation about the batch mean.
    Mad,
    KthMoment(u32),
}

impl StatKind {
    fn is_nonnegative(self) -> bool {
        matches!(self, StatKind::RawSecondMoment | StatKind::Variance | StatKind::Mad)
    }
}

/// A per-parameter statistic of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct StatVector {
    pub block_id: BlockId,
    pub kind: StatKind,
    pub values: Vec<f64>,
}

impl StatVector {
    pub fn new(block_id: BlockId, kind: StatKind, values: Vec<f64>) -> Result<Self> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "statistic",
                index,
            });
        }
        if kind.is_nonnegative() && values.iter().any(|&v| v < 0.0) {
            return Err(Error::invalid(format!("{kind:?} statistic must be non-negative")));
        }
        Ok(StatVector { block_id, kind, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Column sums of `f(g)` in ascending example order, divided by `B`.
fn column_mean_of(g: &GradBatch, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut acc = vec![0.0; g.param_count];
    for row in g.rows() {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += f(v);
        }
    }
    let b = g.batch_size as f64;
    acc.iter_mut().for_each(|a| *a /= b);
    acc
}

fn column_mean_of_shifted(g: &GradBatch, shift: &[f64]) -> Vec<f64> {
    let mut acc = vec![0.0; g.param_count];
    for row in g.rows() {
        for p in 0..g.param_count {
            acc[p] += row[p] - shift[p];
        }
    }
    let b = g.batch_size as f64;
    acc.iter_mut().for_each(|a| *a /= b);
    acc
}

/// `(1/B) Σ_b g_b`, the batch gradient.
pub fn batch_mean(g: &GradBatch) -> StatVector {
    StatVector {
        block_id: g.block_id.clone(),
        kind: StatKind::Mean,
        values: column_mean_of(g, |v| v),
    }
}

/// `(1/B) Σ_b g_b²`, the examplewise raw second moment.
pub fn raw_second_moment(g: &GradBatch) -> StatVector {
    StatVector {
        block_id: g.block_id.clone(),
        kind: StatKind::RawSecondMoment,
        values: column_mean_of(g, |v| v * v),
    }
}

/// Population variance (divisor `B`) of the examplewise gradients.
///
/// Evaluated as `E[d²] - E[d]²` on the data shifted by the first example,
/// which is algebraically `raw_second_moment - batch_mean²` but loses no
/// precision when the mean dominates and is exactly zero for constant
/// columns. Rounding negatives are clamped to zero.
pub fn examplewise_variance(g: &GradBatch) -> StatVector {
    let shift = g.row(0).to_vec();
    let mut s1 = vec![0.0; g.param_count];
    let mut s2 = vec![0.0; g.param_count];
    for row in g.rows() {
        for p in 0..g.param_count {
            let d = row[p] - shift[p];
            s1[p] += d;
            s2[p] += d * d;
        }
    }
    let b = g.batch_size as f64;
    let values = s1
        .iter()
        .zip(&s2)
        .map(|(&a, &q)| {
            let m = a / b;
            (q / b - m * m).max(0.0)
        })
        .collect();
    StatVector {
        block_id: g.block_id.clone(),
        kind: StatKind::Variance,
        values,
    }
}

/// Variance of the batch mean from the examplewise variance: `Var(ḡ) = Var(g) / B`.
pub fn batch_variance_from_examplewise(var_e: &StatVector, batch_size: usize) -> Result<StatVector> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    if var_e.values.iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("variance entries must be non-negative"));
    }
    let b = batch_size as f64;
    Ok(StatVector {
        block_id: var_e.block_id.clone(),
        kind: StatKind::Variance,
        values: var_e.values.iter().map(|v| v / b).collect(),
    })
}

fn median_of(mut column: Vec<f64>) -> f64 {
    column.sort_by(f64::total_cmp);
    let n = column.len();
    if n % 2 == 1 {
        column[n / 2]
    } else {
        (column[n / 2 - 1] + column[n / 2]) / 2.0
    }
}

fn power(v: f64, k: u32) -> f64 {
    let mut acc = v;
    for _ in 1..k {
        acc *= v;
    }
    acc
}

/// Any supported per-column statistic over the `B` examples.
///
/// `KthMoment(2)` multiplies in the same order as [`raw_second_moment`] and
/// therefore agrees with it bit for bit.
pub fn generic_statistic(g: &GradBatch, kind: StatKind) -> Result<StatVector> {
    let values = match kind {
        StatKind::Mean => return Ok(batch_mean(g)),
        StatKind::RawSecondMoment => return Ok(raw_second_moment(g)),
        StatKind::Variance => return Ok(examplewise_variance(g)),
        StatKind::Median => (0..g.param_count).map(|p| median_of(g.column(p))).collect(),
        StatKind::Mad => {
            // shifted mean so constant columns give exactly zero
            let shift = g.row(0).to_vec();
            let mut mean = column_mean_of_shifted(g, &shift);
            mean.iter_mut().zip(&shift).for_each(|(m, s)| *m += s);
            let mut acc = vec![0.0; g.param_count];
            for row in g.rows() {
                for p in 0..g.param_count {
                    acc[p] += (row[p] - mean[p]).abs();
                }
            }
            let b = g.batch_size as f64;
            acc.into_iter().map(|a| a / b).collect()
        }
        StatKind::KthMoment(0) => {
            return Err(Error::invalid("moment order must be at least 1"));
        }
        StatKind::KthMoment(k) => column_mean_of(g, |v| power(v, k)),
    };
    StatVector::new(g.block_id.clone(), kind, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn batch(rows: &[&[f64]]) -> GradBatch {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        GradBatch::from_rows("w".into(), &rows).unwrap()
    }

    fn random_batch(seed: u64, b: usize, p: usize) -> GradBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..b * p).map(|_| rng.random_range(-3.0..5.0)).collect();
        GradBatch::new("w".into(), b, p, values).unwrap()
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(GradBatch::new("w".into(), 0, 1, vec![]).is_err());
        assert!(GradBatch::new("w".into(), 2, 2, vec![1.0; 3]).is_err());
        assert!(matches!(
            GradBatch::new("w".into(), 1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1, .. })
        ));
        assert!(GradBatch::new("w".into(), 1, 1, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn mean_of_small_batch() {
        assert_eq!(batch_mean(&batch(&[&[1.0, 2.0], &[3.0, 4.0]])).values, vec![2.0, 3.0]);
    }

    #[test]
    fn mean_of_constant_batch() {
        let g = batch(&[&[1.5, -0.25][..]; 6]);
        assert_eq!(batch_mean(&g).values, vec![1.5, -0.25]);
    }

    #[test]
    fn mean_matches_naive_resummation() {
        let g = random_batch(7, 7, 3);
        let m = batch_mean(&g);
        for p in 0..3 {
            let mut s = 0.0;
            for b in 0..7 {
                s += g.values()[b * 3 + p];
            }
            let want = s / 7.0;
            assert!(((m.values[p] - want) / want).abs() <= 1e-15);
        }
    }

    #[test]
    fn raw_second_moment_small_and_constant() {
        assert_eq!(
            raw_second_moment(&batch(&[&[1.0, 2.0], &[3.0, 4.0]])).values,
            vec![5.0, 10.0]
        );
        let g = batch(&[&[3.0][..]; 4]);
        assert_eq!(raw_second_moment(&g).values, vec![9.0]);
    }

    #[test]
    fn raw_second_moment_dominates_mean_square() {
        let g = random_batch(11, 5, 4);
        let m = batch_mean(&g).values;
        let q = raw_second_moment(&g).values;
        for p in 0..4 {
            assert!(q[p] >= m[p] * m[p]);
        }
    }

    #[test]
    fn variance_examples() {
        assert_eq!(examplewise_variance(&batch(&[&[1.0], &[3.0]])).values, vec![1.0]);
        let g = batch(&[&[0.1, 7.3, -2.2][..]; 5]);
        assert_eq!(examplewise_variance(&g).values, vec![0.0; 3]);
        assert_eq!(generic_statistic(&g, StatKind::Mad).unwrap().values, vec![0.0; 3]);
        let bv = batch_variance_from_examplewise(&examplewise_variance(&g), 5).unwrap();
        assert_eq!(bv.values, vec![0.0; 3]);
    }

    #[test]
    fn variance_matches_two_pass_oracle() {
        let g = random_batch(3, 9, 2);
        let v = examplewise_variance(&g).values;
        for p in 0..2 {
            let col: Vec<f64> = (0..9).map(|b| g.values()[b * 2 + p]).collect();
            let mean = col.iter().sum::<f64>() / 9.0;
            let want = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 9.0;
            assert!(((v[p] - want) / want).abs() <= 1e-12, "{} vs {want}", v[p]);
        }
    }

    #[test]
    fn variance_is_stable_under_large_offset() {
        // raw - mean² would cancel catastrophically here
        let g = batch(&[&[1e8 + 1.0], &[1e8 + 3.0]]);
        assert_eq!(examplewise_variance(&g).values, vec![1.0]);
    }

    #[test]
    fn batch_variance_divides_by_batch_size() {
        let v = StatVector::new("w".into(), StatKind::Variance, vec![4.0]).unwrap();
        assert_eq!(batch_variance_from_examplewise(&v, 4).unwrap().values, vec![1.0]);
        let z = StatVector::new("w".into(), StatKind::Variance, vec![0.0]).unwrap();
        assert_eq!(batch_variance_from_examplewise(&z, 17).unwrap().values, vec![0.0]);
        assert!(batch_variance_from_examplewise(&v, 0).is_err());
        let neg = StatVector {
            block_id: "w".into(),
            kind: StatKind::Variance,
            values: vec![-1.0],
        };
        assert!(batch_variance_from_examplewise(&neg, 2).is_err());
    }

    #[test]
    fn variance_sum_law_monte_carlo() {
        let b = 16;
        let trials = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let means: Vec<f64> = (0..trials)
            .map(|_| {
                let values = (0..b).map(|_| rng.sample(StandardNormal)).collect();
                let g = GradBatch::new("w".into(), b, 1, values).unwrap();
                batch_mean(&g).values[0]
            })
            .collect();
        let mu = means.iter().sum::<f64>() / trials as f64;
        let empirical = means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / (trials - 1) as f64;
        let unit = StatVector::new("w".into(), StatKind::Variance, vec![1.0]).unwrap();
        let predicted = batch_variance_from_examplewise(&unit, b).unwrap().values[0];
        assert!((empirical / predicted - 1.0).abs() < 0.05, "{empirical} vs {predicted}");
    }

    #[test]
    fn generic_statistics() {
        let med = generic_statistic(&batch(&[&[1.0], &[2.0], &[10.0]]), StatKind::Median).unwrap();
        assert_eq!(med.values, vec![2.0]);
        let med_even = generic_statistic(&batch(&[&[4.0], &[1.0], &[10.0], &[2.0]]), StatKind::Median).unwrap();
        assert_eq!(med_even.values, vec![3.0]);
        let mad = generic_statistic(&batch(&[&[1.0], &[3.0]]), StatKind::Mad).unwrap();
        assert_eq!(mad.values, vec![1.0]);
        let m3 = generic_statistic(&batch(&[&[1.0], &[2.0]]), StatKind::KthMoment(3)).unwrap();
        assert_eq!(m3.values, vec![4.5]);
        assert!(generic_statistic(&batch(&[&[1.0]]), StatKind::KthMoment(0)).is_err());
    }

    #[test]
    fn block_id_is_propagated() {
        let g = GradBatch::new("layer1.bias".into(), 1, 2, vec![1.0, 2.0]).unwrap();
        assert_eq!(batch_mean(&g).block_id.as_str(), "layer1.bias");
        assert_eq!(examplewise_variance(&g).kind, StatKind::Variance);
    }

    fn batch_strategy() -> impl Strategy<Value = GradBatch> {
        (1usize..12, 1usize..6).prop_flat_map(|(b, p)| {
            prop::collection::vec(-1e3f64..1e3, b * p).prop_map(move |v| GradBatch::new("w".into(), b, p, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn raw_moment_bounds_mean_square(g in batch_strategy()) {
            let m = batch_mean(&g).values;
            let q = raw_second_moment(&g).values;
            for (mi, qi) in m.iter().zip(&q) {
                prop_assert!(*qi >= mi * mi * (1.0 - 1e-12));
            }
        }

        #[test]
        fn variance_agrees_with_moment_difference(g in batch_strategy()) {
            let m = batch_mean(&g).values;
            let q = raw_second_moment(&g).values;
            let v = examplewise_variance(&g).values;
            for p in 0..m.len() {
                prop_assert!(v[p] >= 0.0);
                prop_assert!((v[p] - (q[p] - m[p] * m[p])).abs() <= 1e-12 * q[p].max(1e-300) * 8.0);
            }
        }

        #[test]
        fn second_kth_moment_is_raw_moment(g in batch_strategy()) {
            let k2 = generic_statistic(&g, StatKind::KthMoment(2)).unwrap().values;
            let raw = raw_second_moment(&g).values;
            prop_assert_eq!(
                k2.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                raw.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }

        #[test]
        fn reductions_are_deterministic(g in batch_strategy()) {
            let h = g.clone();
            for kind in [StatKind::Mean, StatKind::RawSecondMoment, StatKind::Variance, StatKind::Median, StatKind::Mad, StatKind::KthMoment(4)] {
                let a = generic_statistic(&g, kind).unwrap().values;
                let b = generic_statistic(&h, kind).unwrap().values;
                prop_assert_eq!(
                    a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                    b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
                );
            }
        }
    }
}
