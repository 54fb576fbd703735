//! Minimal dense network engine: Linear / BatchNorm / ReLU stacks with a
//! recorded tape for exact reverse-mode gradients.
//!
//! Normalisation statistics are chosen per forward pass through
//! [`StatsSource`]. Gradients flow through the statistics whenever they depend
//! on the batch: fully for test-batch statistics, scaled by the EMA rate when
//! the pass itself updates RBN globals, not at all for frozen statistics.

mod adam;
mod batchnorm;
pub mod checkpoint;
pub mod loss;
mod pretrain;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use adam::{AdamConfig, AdamState};
pub use batchnorm::{batch_stats, bn_forward, BnStats, StatsProvenance};
pub use pretrain::{accuracy, predict, pretrain, PretrainConfig, PretrainReport};

use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;
use crate::rbn::RbnState;
use crate::seed::{self, tag};

/// Numerical stability constant inside the normalisation square root.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics momentum during pretraining: `new = 0.9·old + 0.1·batch`.
pub const BN_MOMENTUM: f64 = 0.1;

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn next_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running: Option<BnStats>,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        Self { gamma: vec![1.0; width], beta: vec![0.0; width], running: None, eps: BN_EPS }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Linear(Linear),
    BatchNorm(BatchNorm),
    Relu,
}

/// Which parameters a gradient or parameter vector covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamMask {
    All,
    /// γ and β of every BN layer.
    AffineOnly,
}

/// Normalisation statistics for one forward pass.
#[derive(Debug)]
pub enum StatsSource<'a> {
    /// Frozen pretraining running statistics (μ_s, σ_s²).
    TrainRunning,
    /// Statistics of the batch being normalised.
    TestBatch,
    /// RBN globals, read-only.
    RbnGlobal(&'a RbnState),
    /// RBN globals, EMA-updated layer by layer from this batch before each
    /// layer normalises.
    RbnUpdate(&'a mut RbnState),
}

#[derive(Debug, Clone)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
}

impl MlpSpec {
    /// d → 64 → 64 → C.
    pub fn default_for(input_dim: usize, num_classes: usize) -> Self {
        Self { input_dim, hidden: vec![64, 64], num_classes }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseNet {
    layers: Vec<Layer>,
    #[serde(skip, default = "next_version")]
    version: u64,
}

impl PartialEq for DenseNet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Per-layer intermediates needed by the backward pass.
#[derive(Debug, Clone)]
enum Record {
    Linear { input: Matrix },
    Relu { output: Matrix },
    BatchNorm { input: Matrix, batch_mean: Vec<f64>, mean: Vec<f64>, inv_std: Vec<f64>, stats_weight: f64 },
}

#[derive(Debug, Clone)]
pub struct Tape {
    version: u64,
    records: Vec<Record>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Matrix,
    pub tape: Tape,
}

/// Named span of a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlot {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub values: Vec<f64>,
    pub layout: Vec<ParamSlot>,
}

impl Gradients {
    pub fn slot(&self, name: &str) -> Option<&[f64]> {
        self.layout.iter().find(|s| s.name == name).map(|s| &self.values[s.offset..s.offset + s.len])
    }
}

impl DenseNet {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let mut width: Option<usize> = None;
        for (i, layer) in layers.iter().enumerate() {
            match layer {
                Layer::Linear(l) => {
                    if l.bias.len() != l.weight.rows() {
                        return Err(Error::Shape(format!("layer {i}: bias does not match weight rows")));
                    }
                    if let Some(w) = width {
                        if w != l.weight.cols() {
                            return Err(Error::Shape(format!(
                                "layer {i}: expects {} inputs, gets {w}",
                                l.weight.cols()
                            )));
                        }
                    }
                    width = Some(l.weight.rows());
                }
                Layer::BatchNorm(bn) => {
                    let w = width.ok_or_else(|| Error::Shape(format!("layer {i}: BN before any Linear")))?;
                    if bn.gamma.len() != w || bn.beta.len() != w {
                        return Err(Error::Shape(format!("layer {i}: BN width {} on {w} features", bn.gamma.len())));
                    }
                    if let Some(r) = &bn.running {
                        r.check(w)?;
                    }
                    if !(bn.eps > 0.0) {
                        return Err(invalid(format!("layer {i}: BN eps must be positive")));
                    }
                }
                Layer::Relu => {}
            }
        }
        if !matches!(layers.first(), Some(Layer::Linear(_))) || !matches!(layers.last(), Some(Layer::Linear(_))) {
            return Err(Error::Shape("network must start and end with a Linear layer".into()));
        }
        Ok(Self { layers, version: next_version() })
    }

    /// Linear → BN → ReLU per hidden width, then a Linear head. He-normal
    /// weights, zero biases, BN at γ=1, β=0 and no running statistics yet.
    pub fn mlp(spec: &MlpSpec, seed: u64) -> Result<Self> {
        let mut rng = seed::rng(seed, &[tag::INIT]);
        let mut layers = Vec::new();
        let mut fan_in = spec.input_dim;
        for &h in &spec.hidden {
            layers.push(Layer::Linear(init_linear(fan_in, h, &mut rng)));
            layers.push(Layer::BatchNorm(BatchNorm::new(h)));
            layers.push(Layer::Relu);
            fan_in = h;
        }
        layers.push(Layer::Linear(init_linear(fan_in, spec.num_classes, &mut rng)));
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    fn touch(&mut self) {
        self.version = next_version();
    }

    pub fn input_dim(&self) -> usize {
        match &self.layers[0] {
            Layer::Linear(l) => l.weight.cols(),
            _ => unreachable!("validated at construction"),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Linear(l)) => l.weight.rows(),
            _ => unreachable!("validated at construction"),
        }
    }

    pub fn bn_layers(&self) -> impl Iterator<Item = &BatchNorm> {
        self.layers.iter().filter_map(|l| match l {
            Layer::BatchNorm(bn) => Some(bn),
            _ => None,
        })
    }

    pub fn bn_count(&self) -> usize {
        self.bn_layers().count()
    }

    pub fn running_stats(&self) -> Vec<Option<&BnStats>> {
        self.bn_layers().map(|bn| bn.running.as_ref()).collect()
    }

    /// Sets every BN layer's running statistics to mean 0, variance 1.
    pub fn init_running_stats(&mut self) {
        for layer in &mut self.layers {
            if let Layer::BatchNorm(bn) = layer {
                bn.running = Some(BnStats::standard(bn.width()));
            }
        }
        self.touch();
    }

    /// Inference or adaptation forward pass; never touches running statistics.
    pub fn forward(&self, x: &Matrix, mut source: StatsSource<'_>) -> Result<Forward> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut records = Vec::with_capacity(self.layers.len());
        let mut bn_index = 0;
        for layer in &self.layers {
            h = match layer {
                Layer::Linear(l) => {
                    let out = h.affine_transposed(&l.weight, &l.bias)?;
                    records.push(Record::Linear { input: h });
                    out
                }
                Layer::Relu => {
                    let out = h.map(|v| v.max(0.0));
                    records.push(Record::Relu { output: out.clone() });
                    out
                }
                Layer::BatchNorm(bn) => {
                    let (stats, batch_mean, weight) = match &mut source {
                        StatsSource::TrainRunning => {
                            let r = bn
                                .running
                                .clone()
                                .ok_or_else(|| invalid(format!("BN layer {bn_index} has no running statistics")))?;
                            (r, Vec::new(), 0.0)
                        }
                        StatsSource::TestBatch => {
                            let s = batch_stats(&h)?;
                            let m = s.mean.clone();
                            (s, m, 1.0)
                        }
                        StatsSource::RbnGlobal(state) => (state.provide(bn_index).clone(), Vec::new(), 0.0),
                        StatsSource::RbnUpdate(state) => {
                            let s = batch_stats(&h)?;
                            state.ema_update_layer(bn_index, &s)?;
                            (state.provide(bn_index).clone(), s.mean, state.alpha())
                        }
                    };
                    bn_index += 1;
                    let (out, rec) = normalize(bn, h, stats, batch_mean, weight)?;
                    records.push(rec);
                    out
                }
            };
        }
        Ok(Forward { logits: h, tape: Tape { version: self.version, records } })
    }

    /// Training-mode pass: normalise with batch statistics and fold them into
    /// the running statistics with momentum [`BN_MOMENTUM`].
    pub fn forward_train(&mut self, x: &Matrix) -> Result<Forward> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut records = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            h = match layer {
                Layer::Linear(l) => {
                    let out = h.affine_transposed(&l.weight, &l.bias)?;
                    records.push(Record::Linear { input: h });
                    out
                }
                Layer::Relu => {
                    let out = h.map(|v| v.max(0.0));
                    records.push(Record::Relu { output: out.clone() });
                    out
                }
                Layer::BatchNorm(bn) => {
                    let s = batch_stats(&h)?;
                    let running = bn.running.get_or_insert_with(|| BnStats::standard(s.width()));
                    for (r, &m) in running.mean.iter_mut().zip(&s.mean) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                    }
                    for (r, &v) in running.var.iter_mut().zip(&s.var) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                    }
                    let m = s.mean.clone();
                    let (out, rec) = normalize(bn, h, s, m, 1.0)?;
                    records.push(rec);
                    out
                }
            };
        }
        self.touch();
        Ok(Forward { logits: h, tape: Tape { version: self.version, records } })
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape(format!("input has {} features, network expects {}", x.cols(), self.input_dim())));
        }
        if x.rows() == 0 {
            return Err(invalid("empty input batch"));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite { what: "network input".into() });
        }
        Ok(())
    }

    /// Reverse-mode gradients of a scalar loss given `∂loss/∂logits`.
    pub fn backward(&self, tape: &Tape, dlogits: &Matrix, mask: ParamMask) -> Result<Gradients> {
        if tape.version != self.version {
            return Err(Error::StaleTape { recorded: tape.version, current: self.version });
        }
        if tape.records.len() != self.layers.len() {
            return Err(Error::Shape("tape does not match the network".into()));
        }
        let layout = self.param_layout(mask);
        let mut values = vec![0.0; layout.last().map_or(0, |s| s.offset + s.len)];
        let mut slots = layout.iter().rev().peekable();
        let mut g = dlogits.clone();
        for (i, (layer, rec)) in self.layers.iter().zip(&tape.records).enumerate().rev() {
            g = match (layer, rec) {
                (Layer::Linear(l), Record::Linear { input }) => {
                    if mask == ParamMask::All {
                        let db = g.column_sums();
                        let dw = g.transpose_matmul(input)?;
                        let bias_slot = slots.next().expect("layout covers every linear");
                        values[bias_slot.offset..bias_slot.offset + bias_slot.len].copy_from_slice(&db);
                        let w_slot = slots.next().expect("layout covers every linear");
                        values[w_slot.offset..w_slot.offset + w_slot.len].copy_from_slice(dw.as_slice());
                    }
                    if i == 0 {
                        break;
                    }
                    g.matmul(&l.weight)?
                }
                (Layer::Relu, Record::Relu { output }) => {
                    let mut g = g;
                    for (gv, &o) in g.as_mut_slice().iter_mut().zip(output.as_slice()) {
                        if o <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    g
                }
                (Layer::BatchNorm(bn), Record::BatchNorm { input, batch_mean, mean, inv_std, stats_weight }) => {
                    let (dx, dgamma, dbeta) = bn_backward(bn, &g, input, batch_mean, mean, inv_std, *stats_weight);
                    let beta_slot = slots.next().expect("layout covers every BN");
                    values[beta_slot.offset..beta_slot.offset + beta_slot.len].copy_from_slice(&dbeta);
                    let gamma_slot = slots.next().expect("layout covers every BN");
                    values[gamma_slot.offset..gamma_slot.offset + gamma_slot.len].copy_from_slice(&dgamma);
                    dx
                }
                _ => return Err(Error::Shape(format!("tape record {i} does not match its layer"))),
            };
        }
        Ok(Gradients { values, layout })
    }

    pub fn param_layout(&self, mask: ParamMask) -> Vec<ParamSlot> {
        let mut layout = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, len: usize| {
            layout.push(ParamSlot { name, offset, len });
            offset += len;
        };
        let (mut li, mut bi) = (0, 0);
        for layer in &self.layers {
            match layer {
                Layer::Linear(l) => {
                    if mask == ParamMask::All {
                        push(format!("linear{li}.weight"), l.weight.rows() * l.weight.cols());
                        push(format!("linear{li}.bias"), l.bias.len());
                    }
                    li += 1;
                }
                Layer::BatchNorm(bn) => {
                    push(format!("bn{bi}.gamma"), bn.width());
                    push(format!("bn{bi}.beta"), bn.width());
                    bi += 1;
                }
                Layer::Relu => {}
            }
        }
        layout
    }

    /// Flat copy of the parameters selected by `mask`, in layout order.
    pub fn params(&self, mask: ParamMask) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Linear(l) if mask == ParamMask::All => {
                    out.extend_from_slice(l.weight.as_slice());
                    out.extend_from_slice(&l.bias);
                }
                Layer::BatchNorm(bn) => {
                    out.extend_from_slice(&bn.gamma);
                    out.extend_from_slice(&bn.beta);
                }
                _ => {}
            }
        }
        out
    }

    pub fn set_params(&mut self, mask: ParamMask, values: &[f64]) -> Result<()> {
        let expected: usize = self.param_layout(mask).iter().map(|s| s.len).sum();
        if values.len() != expected {
            return Err(Error::Shape(format!("{} values for {expected} parameters", values.len())));
        }
        let mut rest = values;
        let mut take = |dst: &mut [f64]| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        for layer in &mut self.layers {
            match layer {
                Layer::Linear(l) if mask == ParamMask::All => {
                    take(l.weight.as_mut_slice());
                    take(&mut l.bias);
                }
                Layer::BatchNorm(bn) => {
                    take(&mut bn.gamma);
                    take(&mut bn.beta);
                }
                _ => {}
            }
        }
        self.touch();
        Ok(())
    }

    /// Mutable access to the raw layers; invalidates outstanding tapes.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.touch();
        &mut self.layers
    }
}

fn init_linear<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Linear {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite stddev");
    let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
    Linear { weight: Matrix::from_vec(fan_out, fan_in, data).expect("sized"), bias: vec![0.0; fan_out] }
}

fn normalize(
    bn: &BatchNorm,
    input: Matrix,
    stats: BnStats,
    batch_mean: Vec<f64>,
    weight: f64,
) -> Result<(Matrix, Record)> {
    stats.check(bn.width())?;
    let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
    let mut out = input.clone();
    for r in 0..out.rows() {
        for (j, v) in out.row_mut(r).iter_mut().enumerate() {
            *v = bn.gamma[j] * (*v - stats.mean[j]) * inv_std[j] + bn.beta[j];
        }
    }
    Ok((out, Record::BatchNorm { input, batch_mean, mean: stats.mean, inv_std, stats_weight: weight }))
}

/// Backward through `y = γ(x − m)·r + β` with `m = a + w·μ_B`,
/// `v = s + w·σ²_B`, `r = (v + ε)^{-1/2}`.
fn bn_backward(
    bn: &BatchNorm,
    g: &Matrix,
    input: &Matrix,
    batch_mean: &[f64],
    mean: &[f64],
    inv_std: &[f64],
    w: f64,
) -> (Matrix, Vec<f64>, Vec<f64>) {
    let (b, c) = (g.rows(), g.cols());
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut dmean = vec![0.0; c];
    let mut dvar = vec![0.0; c];
    for r in 0..b {
        let (gr, xr) = (g.row(r), input.row(r));
        for j in 0..c {
            let centered = xr[j] - mean[j];
            let xhat = centered * inv_std[j];
            dgamma[j] += gr[j] * xhat;
            dbeta[j] += gr[j];
            let dxhat = gr[j] * bn.gamma[j];
            dmean[j] -= dxhat * inv_std[j];
            dvar[j] -= 0.5 * dxhat * centered * inv_std[j].powi(3);
        }
    }
    let mut dx = Matrix::zeros(b, c);
    let n = b as f64;
    for r in 0..b {
        let (gr, xr) = (g.row(r), input.row(r));
        let out = dx.row_mut(r);
        for j in 0..c {
            let mut v = gr[j] * bn.gamma[j] * inv_std[j];
            if w != 0.0 {
                v += w * dmean[j] / n + 2.0 * w * (xr[j] - batch_mean[j]) * dvar[j] / n;
            }
            out[j] = v;
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_net(seed: u64) -> DenseNet {
        let mut n = DenseNet::mlp(&MlpSpec { input_dim: 3, hidden: vec![5, 4], num_classes: 3 }, seed).unwrap();
        n.init_running_stats();
        n
    }

    fn batch(seed: u64, rows: usize, cols: usize) -> Matrix {
        let mut rng = seed::rng(seed, &[42]);
        let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn identity_linear_passes_inputs_through() {
        let net =
            DenseNet::from_layers(vec![Layer::Linear(Linear { weight: Matrix::identity(3), bias: vec![0.0; 3] })])
                .unwrap();
        let x = batch(1, 4, 3);
        let out = net.forward(&x, StatsSource::TrainRunning).unwrap();
        assert_eq!(out.logits, x);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let net = small_net(1);
        assert!(matches!(net.forward(&batch(1, 2, 4), StatsSource::TestBatch), Err(Error::Shape(_))));
        let bad = vec![
            Layer::Linear(Linear { weight: Matrix::zeros(4, 3), bias: vec![0.0; 4] }),
            Layer::BatchNorm(BatchNorm::new(5)),
            Layer::Linear(Linear { weight: Matrix::zeros(2, 4), bias: vec![0.0; 2] }),
        ];
        assert!(DenseNet::from_layers(bad).is_err());
    }

    #[test]
    fn non_finite_input_rejected() {
        let net = small_net(1);
        let mut x = batch(1, 2, 3);
        x.set(0, 0, f64::INFINITY);
        assert!(net.forward(&x, StatsSource::TestBatch).is_err());
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let net = small_net(2);
        let x = batch(2, 6, 3);
        let f = net.forward(&x, StatsSource::TestBatch).unwrap();
        let zero = Matrix::zeros(6, 3);
        let g = net.backward(&f.tape, &zero, ParamMask::All).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn affine_mask_excludes_linear_parameters() {
        let net = small_net(3);
        let x = batch(3, 6, 3);
        let f = net.forward(&x, StatsSource::TestBatch).unwrap();
        let g = net.backward(&f.tape, &Matrix::from_vec(6, 3, vec![0.1; 18]).unwrap(), ParamMask::AffineOnly).unwrap();
        assert!(g.layout.iter().all(|s| s.name.starts_with("bn")));
        assert_eq!(g.values.len(), 2 * (5 + 4));
        assert!(g.slot("linear0.weight").is_none());
    }

    #[test]
    fn stale_tape_rejected() {
        let mut net = small_net(4);
        let x = batch(4, 6, 3);
        let f = net.forward(&x, StatsSource::TestBatch).unwrap();
        let p = net.params(ParamMask::AffineOnly);
        net.set_params(ParamMask::AffineOnly, &p).unwrap();
        assert!(matches!(net.backward(&f.tape, &Matrix::zeros(6, 3), ParamMask::All), Err(Error::StaleTape { .. })));
    }

    #[test]
    fn test_batch_and_running_stats_diverge_on_shifted_batch() {
        let net = small_net(5);
        let x = batch(5, 8, 3).map(|v| v + 4.0);
        let a = net.forward(&x, StatsSource::TestBatch).unwrap().logits;
        let b = net.forward(&x, StatsSource::TrainRunning).unwrap().logits;
        let diff: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(p, q)| (p - q).abs()).sum();
        assert!(diff > 1e-3, "{diff}");
    }

    #[test]
    fn params_roundtrip() {
        let mut net = small_net(6);
        let mut p = net.params(ParamMask::All);
        p.iter_mut().for_each(|v| *v += 1.0);
        net.set_params(ParamMask::All, &p).unwrap();
        assert_eq!(net.params(ParamMask::All), p);
        assert!(net.set_params(ParamMask::All, &p[1..]).is_err());
    }

    #[test]
    fn forward_train_updates_running_stats_with_momentum() {
        let mut net = small_net(7);
        let x = batch(7, 8, 3);
        let before = net.running_stats()[0].unwrap().clone();
        // batch stats of the first BN input
        let Layer::Linear(l0) = &net.layers()[0] else { unreachable!() };
        let h = x.affine_transposed(&l0.weight, &l0.bias).unwrap();
        let s = batch_stats(&h).unwrap();
        net.forward_train(&x).unwrap();
        let after = net.running_stats()[0].unwrap();
        for j in 0..5 {
            assert!((after.mean[j] - (0.9 * before.mean[j] + 0.1 * s.mean[j])).abs() < 1e-12);
            assert!((after.var[j] - (0.9 * before.var[j] + 0.1 * s.var[j])).abs() < 1e-12);
        }
    }
}
