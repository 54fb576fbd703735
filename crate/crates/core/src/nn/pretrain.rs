//! Source-domain pretraining: softmax cross-entropy with training-mode BN.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{argmax, cross_entropy};
use super::{AdamConfig, AdamState, DenseNet, ParamMask, StatsSource};
use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;
use crate::seed::{self, tag};
use crate::synth_data::LabeledExample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 20, lr: 1e-2, batch_size: 64, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: usize,
    pub final_loss: f64,
    /// Clean holdout accuracy under the frozen running statistics.
    pub holdout_accuracy: f64,
}

pub(crate) fn features(examples: &[&LabeledExample]) -> Result<Matrix> {
    Matrix::from_rows(&examples.iter().map(|e| e.x.as_slice()).collect::<Vec<_>>())
}

/// Trains every parameter of `net` on `source`; running statistics end up as
/// the pretrained (μ_s, σ_s²).
pub fn pretrain(
    net: &mut DenseNet,
    source: &[LabeledExample],
    holdout: &[LabeledExample],
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    if source.is_empty() {
        return Err(invalid("empty source set"));
    }
    if cfg.batch_size == 0 {
        return Err(invalid("pretraining batch size must be positive"));
    }
    net.init_running_stats();
    let mut rng = seed::rng(cfg.seed, &[tag::PRETRAIN]);
    let mut opt = AdamState::new(net.params(ParamMask::All).len(), AdamConfig::with_lr(cfg.lr));
    let mut order: Vec<usize> = (0..source.len()).collect();
    let mut final_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            // a single-row batch has zero variance; fold it into training anyway
            let batch: Vec<&LabeledExample> = chunk.iter().map(|&i| &source[i]).collect();
            let x = features(&batch)?;
            let labels: Vec<usize> = batch.iter().map(|e| e.y).collect();
            let fwd = net.forward_train(&x)?;
            let (loss, dlogits) = cross_entropy(&fwd.logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            let grads = net.backward(&fwd.tape, &dlogits, ParamMask::All)?;
            let mut params = net.params(ParamMask::All);
            opt.step(&mut params, &grads)?;
            net.set_params(ParamMask::All, &params)?;
            epoch_loss += loss;
            batches += 1;
        }
        final_loss = epoch_loss / batches as f64;
    }
    let holdout_accuracy = if holdout.is_empty() { f64::NAN } else { accuracy(net, holdout)? };
    Ok(PretrainReport { epochs: cfg.epochs, final_loss, holdout_accuracy })
}

/// Predicted classes under the given statistics source.
pub fn predict(net: &DenseNet, x: &Matrix, source: StatsSource<'_>) -> Result<Vec<usize>> {
    let fwd = net.forward(x, source)?;
    Ok(fwd.logits.row_iter().map(argmax).collect())
}

/// Accuracy under the frozen running statistics.
pub fn accuracy(net: &DenseNet, examples: &[LabeledExample]) -> Result<f64> {
    let refs: Vec<&LabeledExample> = examples.iter().collect();
    let x = features(&refs)?;
    let pred = predict(net, &x, StatsSource::TrainRunning)?;
    let correct = pred.iter().zip(examples).filter(|(p, e)| **p == e.y).count();
    Ok(correct as f64 / examples.len() as f64)
}
