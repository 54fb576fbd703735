//! Weak/strong view pair for feature vectors. The weak view is the identity;
//! the strong view applies per-sample scale jitter, feature dropout and
//! additive Gaussian noise.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrongAugment {
    pub noise_sigma: f64,
    pub dropout: f64,
    pub scale_low: f64,
    pub scale_high: f64,
}

impl StrongAugment {
    /// Noise at half the within-class stddev, 10% dropout, scale jitter ±10%.
    pub fn for_stddev(within_class_stddev: f64) -> Self {
        Self { noise_sigma: 0.5 * within_class_stddev, dropout: 0.1, scale_low: 0.9, scale_high: 1.1 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) || !(0.0..1.0).contains(&self.dropout) || !(self.scale_low <= self.scale_high) {
            return Err(invalid(format!("malformed strong augmentation {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentPair {
    pub strong: StrongAugment,
}

impl AugmentPair {
    pub fn weak(&self, x: &Matrix) -> Matrix {
        x.clone()
    }

    pub fn strong<R: Rng + ?Sized>(&self, x: &Matrix, rng: &mut R) -> Matrix {
        let s = &self.strong;
        let mut out = x.clone();
        for r in 0..out.rows() {
            let scale =
                if s.scale_high > s.scale_low { rng.random_range(s.scale_low..s.scale_high) } else { s.scale_low };
            for v in out.row_mut(r) {
                let keep = s.dropout == 0.0 || rng.random::<f64>() >= s.dropout;
                let z: f64 = StandardNormal.sample(rng);
                *v = if keep { *v * scale } else { 0.0 } + s.noise_sigma * z;
            }
        }
        out
    }
}
