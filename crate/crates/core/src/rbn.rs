//! Robust batch normalisation: per-layer global statistics seeded from the
//! pretrained running statistics and tracked by an exponential moving average
//! of memory-bank batch statistics.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{BnStats, DenseNet, StatsProvenance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbnState {
    alpha: f64,
    layers: Vec<BnStats>,
    updates: Vec<u64>,
}

impl RbnState {
    /// Copies the running statistics of every BN layer of `net`.
    pub fn init_from_pretrained(net: &DenseNet, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(invalid(format!("RBN rate must lie in (0, 1], got {alpha}")));
        }
        let layers = net
            .running_stats()
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                s.cloned()
                    .map(|mut s| {
                        s.provenance = StatsProvenance::RbnGlobal;
                        s
                    })
                    .ok_or_else(|| invalid(format!("BN layer {i} has no running statistics; pretrain first")))
            })
            .collect::<Result<Vec<_>>>()?;
        let updates = vec![0; layers.len()];
        Ok(Self { alpha, layers, updates })
    }

    pub(crate) fn from_parts(alpha: f64, layers: Vec<BnStats>, updates: Vec<u64>) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) || layers.len() != updates.len() {
            return Err(invalid("malformed RBN state"));
        }
        for l in &layers {
            l.check(l.width())?;
        }
        Ok(Self { alpha, layers, updates })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Current globals of BN layer `layer`. Panics if the layer does not exist.
    pub fn provide(&self, layer: usize) -> &BnStats {
        &self.layers[layer]
    }

    /// `μ_g ← (1−α)μ_g + αμ`, `σ_g² ← (1−α)σ_g² + ασ²` for one layer.
    /// The incoming statistics are validated before anything is mutated.
    pub fn ema_update_layer(&mut self, layer: usize, incoming: &BnStats) -> Result<()> {
        let current = self.layers.get_mut(layer).ok_or_else(|| invalid(format!("no BN layer {layer}")))?;
        incoming.check(current.width())?;
        let a = self.alpha;
        for (g, &m) in current.mean.iter_mut().zip(&incoming.mean) {
            *g = (1.0 - a) * *g + a * m;
        }
        for (g, &v) in current.var.iter_mut().zip(&incoming.var) {
            *g = (1.0 - a) * *g + a * v;
        }
        self.updates[layer] += 1;
        Ok(())
    }

    /// Updates every layer at once; all inputs are checked first.
    pub fn ema_update(&mut self, incoming: &[BnStats]) -> Result<()> {
        if incoming.len() != self.layers.len() {
            return Err(Error::Shape(format!("{} statistics for {} BN layers", incoming.len(), self.layers.len())));
        }
        for (s, g) in incoming.iter().zip(&self.layers) {
            s.check(g.width())?;
        }
        for (i, s) in incoming.iter().enumerate() {
            self.ema_update_layer(i, s)?;
        }
        Ok(())
    }

    /// Number of EMA updates applied to each layer.
    pub fn update_counts(&self) -> &[u64] {
        &self.updates
    }

    /// `‖μ_g − μ_s‖₂` over all layers concatenated.
    pub fn mean_drift(&self, net: &DenseNet) -> f64 {
        self.layers
            .iter()
            .zip(net.running_stats())
            .flat_map(|(g, s)| {
                let s = s.map(|s| s.mean.as_slice()).unwrap_or(&[]);
                g.mean.iter().zip(s).map(|(a, b)| (a - b) * (a - b))
            })
            .sum::<f64>()
            .sqrt()
    }
}
