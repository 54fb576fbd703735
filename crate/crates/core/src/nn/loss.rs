//! Softmax heads. Every loss returns its value together with `∂loss/∂logits`.

use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;

pub fn log_softmax_row(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn softmax_row(z: &[f64]) -> Vec<f64> {
    log_softmax_row(z).into_iter().map(f64::exp).collect()
}

pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let p = softmax_row(logits.row(r));
        out.row_mut(r).copy_from_slice(&p);
    }
    out
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) }).0
}

/// Mean hard-label cross-entropy.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (b, c) = (logits.rows(), logits.cols());
    if labels.len() != b || b == 0 {
        return Err(Error::Shape(format!("{} labels for {b} rows", labels.len())));
    }
    let mut grad = Matrix::zeros(b, c);
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(invalid(format!("label {y} out of range for {c} classes")));
        }
        let logp = log_softmax_row(logits.row(r));
        loss -= logp[y];
        let g = grad.row_mut(r);
        for (j, lp) in logp.iter().enumerate() {
            g[j] = lp.exp() / b as f64;
        }
        g[y] -= 1.0 / b as f64;
    }
    Ok((loss / b as f64, grad))
}

/// Mean Shannon entropy of the row softmaxes.
pub fn mean_entropy(logits: &Matrix) -> (f64, Matrix) {
    let (b, c) = (logits.rows(), logits.cols());
    let mut grad = Matrix::zeros(b, c);
    let mut total = 0.0;
    for r in 0..b {
        let logp = log_softmax_row(logits.row(r));
        let h: f64 = logp.iter().map(|&lp| -lp.exp() * lp).sum();
        total += h;
        let g = grad.row_mut(r);
        for j in 0..c {
            g[j] = -logp[j].exp() * (logp[j] + h) / b as f64;
        }
    }
    (total / b as f64, grad)
}
