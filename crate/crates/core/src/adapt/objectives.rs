//! Training objectives for the teacher–student update.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;
use crate::nn::loss::{log_softmax_row, softmax};
use crate::nn::{DenseNet, Forward, Gradients, ParamMask, StatsSource};
use crate::rbn::RbnState;

/// Lower clamp on student probabilities inside the log.
pub const LOG_CLAMP: f64 = 1e-12;

/// `E(A) = exp(−A/N) / (1 + exp(−A/N))`: weight of a bank entry of age `A`.
pub fn timeliness_weight(age: u64, capacity: usize) -> f64 {
    let e = (-(age as f64) / capacity as f64).exp();
    e / (1.0 + e)
}

/// Normalisation of the soft cross-entropy between teacher and student.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyNorm {
    /// `−(1/C)·Σ p_T log p_S`.
    #[default]
    PerClass,
    /// `−Σ p_T log p_S`.
    Standard,
}

impl ConsistencyNorm {
    fn factor(self, num_classes: usize) -> f64 {
        match self {
            ConsistencyNorm::PerClass => 1.0 / num_classes as f64,
            ConsistencyNorm::Standard => 1.0,
        }
    }
}

fn clamped_log(p: f64) -> f64 {
    p.max(LOG_CLAMP).ln()
}

/// `−(1/C)·Σ_c p_T(c)·log max(p_S(c), 1e-12)`.
pub fn consistency_loss(p_teacher: &[f64], p_student: &[f64]) -> Result<f64> {
    if p_teacher.len() != p_student.len() || p_teacher.is_empty() {
        return Err(Error::Shape(format!("{} vs {} probabilities", p_teacher.len(), p_student.len())));
    }
    let c = p_teacher.len() as f64;
    Ok(-p_teacher.iter().zip(p_student).map(|(&t, &s)| t * clamped_log(s)).sum::<f64>() / c)
}

/// Per-row consistency value and its gradient with respect to the student
/// logits. Clamped coordinates contribute no gradient.
fn consistency_row(p_teacher: &[f64], student_logits: &[f64], norm: ConsistencyNorm) -> (f64, Vec<f64>) {
    let k = norm.factor(p_teacher.len());
    let log_ps = log_softmax_row(student_logits);
    let log_clamp = LOG_CLAMP.ln();
    let mut value = 0.0;
    let mut active_mass = 0.0;
    let mut active = vec![0.0; p_teacher.len()];
    for (c, (&t, &lp)) in p_teacher.iter().zip(&log_ps).enumerate() {
        if lp >= log_clamp {
            value -= t * lp;
            active[c] = t;
            active_mass += t;
        } else {
            value -= t * log_clamp;
        }
    }
    let grad = log_ps.iter().zip(&active).map(|(&lp, &a)| k * (lp.exp() * active_mass - a)).collect();
    (k * value, grad)
}

/// Variant of the bank objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BankObjective {
    /// Teacher on weak views under RBN globals (updated by this pass), student
    /// on strong views under the updated globals; timeliness-weighted
    /// consistency.
    RobustRbn,
    /// As `RobustRbn` but both passes normalise with their own batch statistics.
    RobustTestBatch,
    /// Unweighted mean entropy of the student on the bank under RBN globals
    /// updated by this pass; no teacher.
    EntropyRbn,
}

#[derive(Debug, Clone)]
pub struct BankLoss {
    pub loss: f64,
    pub student: Forward,
    pub dlogits: Matrix,
}

impl BankLoss {
    pub fn gradients(&self, student: &DenseNet) -> Result<Gradients> {
        student.backward(&self.student.tape, &self.dlogits, ParamMask::AffineOnly)
    }
}

/// Timeliness-reweighted teacher–student loss on a bank snapshot:
/// `(1/Ω)·Σ_i E(A_i)·ℓ(x_i', x_i'')`.
#[allow(clippy::too_many_arguments)]
pub fn robust_loss(
    teacher: &DenseNet,
    student: &DenseNet,
    rbn: &mut RbnState,
    weak: &Matrix,
    strong: &Matrix,
    ages: &[u64],
    capacity: usize,
    norm: ConsistencyNorm,
    objective: BankObjective,
) -> Result<BankLoss> {
    let omega = ages.len();
    if omega == 0 {
        return Err(invalid("empty memory bank"));
    }
    if weak.rows() != omega || strong.rows() != omega {
        return Err(Error::Shape(format!("{omega} ages for {}/{} views", weak.rows(), strong.rows())));
    }
    match objective {
        BankObjective::RobustRbn | BankObjective::RobustTestBatch => {
            let (teacher_out, student_out) = if objective == BankObjective::RobustRbn {
                let t = teacher.forward(weak, StatsSource::RbnUpdate(rbn))?;
                let s = student.forward(strong, StatsSource::RbnGlobal(rbn))?;
                (t, s)
            } else {
                let t = teacher.forward(weak, StatsSource::TestBatch)?;
                let s = student.forward(strong, StatsSource::TestBatch)?;
                (t, s)
            };
            let p_teacher = softmax(&teacher_out.logits);
            let mut dlogits = Matrix::zeros(omega, student.num_classes());
            let mut loss = 0.0;
            for (i, &age) in ages.iter().enumerate() {
                let w = timeliness_weight(age, capacity) / omega as f64;
                let (v, g) = consistency_row(p_teacher.row(i), student_out.logits.row(i), norm);
                loss += w * v;
                for (d, gv) in dlogits.row_mut(i).iter_mut().zip(g) {
                    *d = w * gv;
                }
            }
            Ok(BankLoss { loss, student: student_out, dlogits })
        }
        BankObjective::EntropyRbn => {
            let s = student.forward(weak, StatsSource::RbnUpdate(rbn))?;
            let (loss, dlogits) = crate::nn::loss::mean_entropy(&s.logits);
            Ok(BankLoss { loss, student: s, dlogits })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timeliness_closed_forms() {
        assert_eq!(timeliness_weight(0, 64), 0.5);
        let want = (-1f64).exp() / (1.0 + (-1f64).exp());
        assert!((timeliness_weight(64, 64) - want).abs() < 1e-15);
        assert!((want - 0.268_941_421_369_995_1).abs() < 1e-15);
        for a in 0..640 {
            assert!(timeliness_weight(a + 1, 64) < timeliness_weight(a, 64));
        }
    }

    #[test]
    fn consistency_worked_values() {
        let l = consistency_loss(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((l - 0.346_573_590_279_972_6).abs() < 1e-9);
        let u = consistency_loss(&[0.1; 10], &[0.1; 10]).unwrap();
        assert!((u - 10f64.ln() / 10.0).abs() < 1e-9);
        assert!((u - 0.230_258_509_299_404_6).abs() < 1e-9);
        let same = consistency_loss(&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0]).unwrap();
        assert!(same.abs() < 1e-11);
    }

    #[test]
    fn row_gradient_matches_finite_differences() {
        let pt = [0.2, 0.5, 0.3];
        let z = [0.3, -1.2, 2.0];
        for norm in [ConsistencyNorm::PerClass, ConsistencyNorm::Standard] {
            let (_, g) = consistency_row(&pt, &z, norm);
            for j in 0..3 {
                let h = 1e-6;
                let mut zp = z;
                zp[j] += h;
                let mut zm = z;
                zm[j] -= h;
                let fd = (consistency_row(&pt, &zp, norm).0 - consistency_row(&pt, &zm, norm).0) / (2.0 * h);
                assert!((fd - g[j]).abs() < 1e-8, "{norm:?} {j}: {fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn standard_norm_is_c_times_per_class() {
        let pt = [0.2, 0.5, 0.3];
        let z = [0.3, -1.2, 2.0];
        let (a, _) = consistency_row(&pt, &z, ConsistencyNorm::PerClass);
        let (b, _) = consistency_row(&pt, &z, ConsistencyNorm::Standard);
        assert!((3.0 * a - b).abs() < 1e-12);
    }
}
