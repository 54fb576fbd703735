//! Batch-normalisation primitives on `B × C` feature matrices.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;

/// Where a set of normalisation statistics came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsProvenance {
    TrainRunning,
    TestBatch,
    RbnGlobal,
}

/// Per-feature mean and (biased) variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub provenance: StatsProvenance,
}

impl BnStats {
    pub fn new(mean: Vec<f64>, var: Vec<f64>, provenance: StatsProvenance) -> Self {
        Self { mean, var, provenance }
    }

    /// Mean 0, variance 1: the state of running statistics before any update.
    pub fn standard(width: usize) -> Self {
        Self::new(vec![0.0; width], vec![1.0; width], StatsProvenance::TrainRunning)
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn check(&self, width: usize) -> Result<()> {
        if self.mean.len() != width || self.var.len() != width {
            return Err(Error::Shape(format!(
                "statistics of width {}/{} for {width} features",
                self.mean.len(),
                self.var.len()
            )));
        }
        if self.mean.iter().chain(&self.var).any(|v| v.is_nan()) {
            return Err(Error::NonFinite { what: "normalisation statistics".into() });
        }
        if let Some(i) = self.var.iter().position(|&v| v < 0.0) {
            return Err(invalid(format!("negative variance {} at feature {i}", self.var[i])));
        }
        Ok(())
    }
}

/// Column means and biased variances (divide by `B`), two-pass.
pub fn batch_stats(f: &Matrix) -> Result<BnStats> {
    let b = f.rows();
    if b == 0 {
        return Err(invalid("batch statistics need at least one row"));
    }
    let n = b as f64;
    let mean: Vec<f64> = f.column_sums().into_iter().map(|s| s / n).collect();
    let mut var = vec![0.0; f.cols()];
    for row in f.row_iter() {
        for ((acc, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = x - m;
            *acc += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    Ok(BnStats::new(mean, var, StatsProvenance::TestBatch))
}

/// `γ·(F − μ)/√(σ² + ε) + β`, feature-wise.
pub fn bn_forward(f: &Matrix, stats: &BnStats, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Matrix> {
    let c = f.cols();
    stats.check(c)?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Shape(format!(
            "affine parameters of width {}/{} for {c} features",
            gamma.len(),
            beta.len()
        )));
    }
    let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = f.clone();
    for r in 0..out.rows() {
        for (j, v) in out.row_mut(r).iter_mut().enumerate() {
            *v = gamma[j] * (*v - stats.mean[j]) * inv_std[j] + beta[j];
        }
    }
    Ok(out)
}
