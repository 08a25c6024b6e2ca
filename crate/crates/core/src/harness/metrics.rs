use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::Result;

/// Welford accumulator for mean and sample standard deviation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    n: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Sample standard deviation; zero with fewer than two observations.
    pub fn std(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / (self.n - 1) as f64).sqrt()
        }
    }
}

/// One evaluation point of a training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: u64,
    pub train_loss: f64,
    pub train_accuracy: Option<f64>,
    pub eval_loss: f64,
    pub eval_accuracy: Option<f64>,
    pub step_length: f64,
    pub per_coord_abs_mean: f64,
    /// Standard deviation of all step lengths so far.
    pub step_length_std: f64,
}

/// Writes `rows` as comma-delimited text with a header row.
pub fn write_csv<T: Serialize, W: Write>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    write_csv(rows, BufWriter::new(File::create(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welford_matches_two_pass() {
        let xs = [1.0, 4.0, 2.5, -3.0, 10.0];
        let mut s = RunningStats::default();
        xs.iter().for_each(|&x| s.push(x));
        let mean = xs.iter().sum::<f64>() / 5.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!((s.mean() - mean).abs() < 1e-12);
        assert!((s.std() - var.sqrt()).abs() < 1e-12);
        assert_eq!(RunningStats::default().std(), 0.0);
    }

    #[test]
    fn metrics_header_and_empty_accuracy() {
        let row = MetricsRow {
            step: 0,
            train_loss: 0.5,
            train_accuracy: None,
            eval_loss: 0.25,
            eval_accuracy: None,
            step_length: 0.0,
            per_coord_abs_mean: 0.0,
            step_length_std: 0.0,
        };
        let mut buf = Vec::new();
        write_csv(&[row], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "step,train_loss,train_accuracy,eval_loss,eval_accuracy,step_length,per_coord_abs_mean,step_length_std\n\
             0,0.5,,0.25,,0.0,0.0,0.0\n"
        );
    }
}
