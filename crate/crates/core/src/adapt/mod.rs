//! Online adaptation: RoTTA (robust BN + CSTU bank + timeliness-reweighted
//! teacher–student training), its ablations, and the Source / BN / PL / TENT
//! baselines.
//!
//! Every method reports predictions made before it learns anything from the
//! batch being predicted.

mod augment;
pub mod objectives;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use augment::{AugmentPair, StrongAugment};
pub use objectives::{consistency_loss, robust_loss, timeliness_weight, BankObjective, ConsistencyNorm};

use crate::cstu::MemoryBank;
use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;
use crate::nn::loss::{argmax, cross_entropy, mean_entropy, softmax};
use crate::nn::{AdamConfig, AdamState, DenseNet, ParamMask, StatsSource};
use crate::rbn::RbnState;
use crate::seed::{self, tag};
use crate::stream::StreamBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Source,
    Bn,
    Pl,
    Tent,
    Rotta,
    RottaNoRbn,
    RottaNoCstu,
    RottaNoRt,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Source,
        Method::Bn,
        Method::Pl,
        Method::Tent,
        Method::Rotta,
        Method::RottaNoRbn,
        Method::RottaNoCstu,
        Method::RottaNoRt,
    ];

    pub const BASELINES: [Method; 4] = [Method::Source, Method::Bn, Method::Pl, Method::Tent];

    pub const ABLATIONS: [Method; 4] = [Method::Rotta, Method::RottaNoRbn, Method::RottaNoCstu, Method::RottaNoRt];

    pub fn name(self) -> &'static str {
        match self {
            Method::Source => "source",
            Method::Bn => "bn",
            Method::Pl => "pl",
            Method::Tent => "tent",
            Method::Rotta => "rotta",
            Method::RottaNoRbn => "rotta_no_rbn",
            Method::RottaNoCstu => "rotta_no_cstu",
            Method::RottaNoRt => "rotta_no_rt",
        }
    }

    pub fn is_rotta_family(self) -> bool {
        matches!(self, Method::Rotta | Method::RottaNoRbn | Method::RottaNoCstu | Method::RottaNoRt)
    }

    pub fn is_adaptive(self) -> bool {
        !matches!(self, Method::Source | Method::Bn)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(vec![format!("unknown method `{s}`")]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub method: Method,
    pub lr: f64,
    pub capacity: usize,
    pub alpha: f64,
    pub nu: f64,
    pub lambda_t: f64,
    pub lambda_u: f64,
    pub consistency_norm: ConsistencyNorm,
    pub augment: AugmentPair,
    /// RoTTA-family methods take one optimisation step per this many
    /// incoming samples.
    pub samples_per_update: usize,
    pub seed: u64,
}

impl AdaptConfig {
    pub fn new(method: Method, within_class_stddev: f64, seed: u64) -> Self {
        Self {
            method,
            lr: 1e-3,
            capacity: 64,
            alpha: 0.05,
            nu: 0.001,
            lambda_t: 1.0,
            lambda_u: 1.0,
            consistency_norm: ConsistencyNorm::PerClass,
            augment: AugmentPair { strong: StrongAugment::for_stddev(within_class_stddev) },
            samples_per_update: 64,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push(format!("lr must be positive, got {}", self.lr));
        }
        if self.capacity == 0 {
            errs.push("capacity must be positive".into());
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            errs.push(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.nu) {
            errs.push(format!("nu must lie in [0, 1], got {}", self.nu));
        }
        if !(self.lambda_t >= 0.0) || !(self.lambda_u >= 0.0) {
            errs.push("lambda_t and lambda_u must be non-negative".into());
        }
        if self.samples_per_update == 0 {
            errs.push("samples_per_update must be positive".into());
        }
        if self.augment.strong.validate().is_err() {
            errs.push("strong augmentation is malformed".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Result of processing one incoming batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub predictions: Vec<usize>,
    /// Mean loss over the optimisation steps taken, if any.
    pub loss: Option<f64>,
    pub updates: usize,
}

/// Full state of one online adaptation run.
#[derive(Debug, Clone)]
pub struct AdapterState {
    cfg: AdaptConfig,
    source: DenseNet,
    student: DenseNet,
    teacher: DenseNet,
    rbn: RbnState,
    bank: MemoryBank,
    optimizer: AdamState,
    rng: seed::Rng,
    pending_samples: usize,
    steps: usize,
}

impl AdapterState {
    pub fn new(pretrained: &DenseNet, cfg: AdaptConfig) -> Result<Self> {
        cfg.validate()?;
        let rbn = RbnState::init_from_pretrained(pretrained, cfg.alpha)?;
        let bank = MemoryBank::new(cfg.capacity, pretrained.num_classes(), cfg.lambda_t, cfg.lambda_u)?;
        let optimizer = AdamState::new(pretrained.params(ParamMask::AffineOnly).len(), AdamConfig::with_lr(cfg.lr));
        let rng = seed::rng(cfg.seed, &[tag::AUGMENT]);
        Ok(Self {
            source: pretrained.clone(),
            student: pretrained.clone(),
            teacher: pretrained.clone(),
            rbn,
            bank,
            optimizer,
            rng,
            pending_samples: 0,
            steps: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.cfg
    }

    pub fn method(&self) -> Method {
        self.cfg.method
    }

    pub fn student(&self) -> &DenseNet {
        &self.student
    }

    pub fn teacher(&self) -> &DenseNet {
        &self.teacher
    }

    pub fn source(&self) -> &DenseNet {
        &self.source
    }

    pub fn rbn(&self) -> &RbnState {
        &self.rbn
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.bank
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// ‖μ_g − μ_s‖ of the RBN globals against the pretrained running means.
    pub fn rbn_drift(&self) -> f64 {
        self.rbn.mean_drift(&self.source)
    }

    pub fn step(&mut self, batch: &StreamBatch) -> Result<StepOutcome> {
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        let x = Matrix::from_rows(&batch.examples.iter().map(|e| e.x.as_slice()).collect::<Vec<_>>())?;
        let out = if self.cfg.method.is_rotta_family() { self.rotta_step(&x)? } else { self.baseline_step(&x)? };
        self.steps += 1;
        if let Some(l) = out.loss {
            if !l.is_finite() {
                return Err(Error::Aborted { step: self.steps, reason: format!("non-finite loss {l}") });
            }
        }
        Ok(out)
    }

    fn rotta_step(&mut self, x: &Matrix) -> Result<StepOutcome> {
        let method = self.cfg.method;
        // (1) predictions; RBN globals are read, not updated
        let predictor = if method == Method::RottaNoRt { &self.student } else { &self.teacher };
        let source =
            if method == Method::RottaNoRbn { StatsSource::TestBatch } else { StatsSource::RbnGlobal(&self.rbn) };
        let probs = softmax(&predictor.forward(x, source)?.logits);
        let predictions: Vec<usize> = probs.row_iter().map(argmax).collect();

        // (2) bank admission, one sample at a time
        if method != Method::RottaNoCstu {
            for (row, p) in x.row_iter().zip(probs.row_iter()) {
                self.bank.admit(row, p)?;
            }
        }

        // (3) + (4) optimisation steps at the configured sample rate
        self.pending_samples += x.rows();
        let due = self.pending_samples / self.cfg.samples_per_update;
        self.pending_samples %= self.cfg.samples_per_update;
        let mut losses = Vec::new();
        for _ in 0..due {
            if let Some(l) = self.rotta_update(x)? {
                losses.push(l);
            }
        }
        let loss = (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64);
        Ok(StepOutcome { predictions, loss, updates: losses.len() })
    }

    /// One student/teacher update; `None` when there is nothing to train on.
    fn rotta_update(&mut self, incoming: &Matrix) -> Result<Option<f64>> {
        let method = self.cfg.method;
        let (weak, ages) = if method == Method::RottaNoCstu {
            (self.cfg.augment.weak(incoming), vec![0; incoming.rows()])
        } else {
            if self.bank.is_empty() {
                return Ok(None);
            }
            let snap = self.bank.snapshot();
            let rows: Vec<&[f64]> = snap.iter().map(|(x, _)| *x).collect();
            (Matrix::from_rows(&rows)?, snap.iter().map(|(_, a)| *a).collect::<Vec<u64>>())
        };
        let objective = match method {
            Method::RottaNoRbn => BankObjective::RobustTestBatch,
            Method::RottaNoRt => BankObjective::EntropyRbn,
            _ => BankObjective::RobustRbn,
        };
        let strong = if objective == BankObjective::EntropyRbn {
            weak.clone()
        } else {
            self.cfg.augment.strong(&weak, &mut self.rng)
        };
        let out = robust_loss(
            &self.teacher,
            &self.student,
            &mut self.rbn,
            &weak,
            &strong,
            &ages,
            self.cfg.capacity,
            self.cfg.consistency_norm,
            objective,
        )?;
        if !out.loss.is_finite() {
            return Err(Error::Aborted { step: self.steps, reason: format!("non-finite bank loss {}", out.loss) });
        }
        let grads = out.gradients(&self.student)?;
        let mut params = self.student.params(ParamMask::AffineOnly);
        self.optimizer.step(&mut params, &grads)?;
        self.student.set_params(ParamMask::AffineOnly, &params)?;
        if method != Method::RottaNoRt {
            self.update_teacher()?;
        }
        Ok(Some(out.loss))
    }

    /// `θ_T ← (1−ν)θ_T + νθ_S` over the affine parameters.
    fn update_teacher(&mut self) -> Result<()> {
        let nu = self.cfg.nu;
        let student = self.student.params(ParamMask::AffineOnly);
        let mut teacher = self.teacher.params(ParamMask::AffineOnly);
        for (t, s) in teacher.iter_mut().zip(&student) {
            // clamp keeps the result between the endpoints despite rounding
            *t = ((1.0 - nu) * *t + nu * s).clamp(t.min(*s), t.max(*s));
        }
        self.teacher.set_params(ParamMask::AffineOnly, &teacher)
    }

    fn baseline_step(&mut self, x: &Matrix) -> Result<StepOutcome> {
        let method = self.cfg.method;
        let source = if method == Method::Source { StatsSource::TrainRunning } else { StatsSource::TestBatch };
        let fwd = self.student.forward(x, source)?;
        let predictions: Vec<usize> = fwd.logits.row_iter().map(argmax).collect();
        let (loss, dlogits) = match method {
            Method::Pl => cross_entropy(&fwd.logits, &predictions)?,
            Method::Tent => mean_entropy(&fwd.logits),
            _ => return Ok(StepOutcome { predictions, loss: None, updates: 0 }),
        };
        if !loss.is_finite() {
            return Err(Error::Aborted { step: self.steps, reason: format!("non-finite {method} loss {loss}") });
        }
        let grads = self.student.backward(&fwd.tape, &dlogits, ParamMask::AffineOnly)?;
        let mut params = self.student.params(ParamMask::AffineOnly);
        self.optimizer.step(&mut params, &grads)?;
        self.student.set_params(ParamMask::AffineOnly, &params)?;
        Ok(StepOutcome { predictions, loss: Some(loss), updates: 1 })
    }

    /// JSON dump of the mutable state, for post-mortems of aborted runs.
    pub fn dump(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Dump<'a> {
            method: Method,
            steps: usize,
            config: &'a AdaptConfig,
            student_affine: Vec<f64>,
            teacher_affine: Vec<f64>,
            rbn: &'a RbnState,
            bank: &'a MemoryBank,
            optimizer: &'a AdamState,
        }
        Ok(serde_json::to_string(&Dump {
            method: self.cfg.method,
            steps: self.steps,
            config: &self.cfg,
            student_affine: self.student.params(ParamMask::AffineOnly),
            teacher_affine: self.teacher.params(ParamMask::AffineOnly),
            rbn: &self.rbn,
            bank: &self.bank,
            optimizer: &self.optimizer,
        })?)
    }
}

/// One line of the per-batch JSON-lines trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub segment: usize,
    pub method: Method,
    pub batch_error: f64,
    pub loss: Option<f64>,
    pub bank_size: usize,
    pub occupancy: Vec<usize>,
    pub mean_bank_age: f64,
    pub mean_bank_uncertainty: f64,
    pub rbn_drift: f64,
}

impl TraceRecord {
    pub fn capture(state: &AdapterState, batch: &StreamBatch, outcome: &StepOutcome) -> Self {
        let wrong = outcome.predictions.iter().zip(batch.labels()).filter(|(p, y)| **p != *y).count();
        Self {
            step: batch.global_step,
            segment: batch.segment_index,
            method: state.method(),
            batch_error: wrong as f64 / batch.len() as f64,
            loss: outcome.loss,
            bank_size: state.bank().len(),
            occupancy: state.bank().occupancy().to_vec(),
            mean_bank_age: state.bank().mean_age(),
            mean_bank_uncertainty: state.bank().mean_uncertainty(),
            rbn_drift: state.rbn_drift(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("cotta".parse::<Method>().is_err());
    }

    #[test]
    fn config_validation_lists_every_field() {
        let mut cfg = AdaptConfig::new(Method::Rotta, 0.5, 0);
        cfg.alpha = 0.0;
        cfg.capacity = 0;
        cfg.nu = 2.0;
        match cfg.validate() {
            Err(Error::Config(v)) => assert_eq!(v.len(), 3, "{v:?}"),
            other => panic!("{other:?}"),
        }
    }
}
