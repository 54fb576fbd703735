//! Finite-difference gradient oracle.

use rand::Rng;
use rand_distr::StandardNormal;

use ptta_core::adapt::{robust_loss, BankObjective, ConsistencyNorm};
use ptta_core::linalg::Matrix;
use ptta_core::nn::loss::{argmax, cross_entropy, mean_entropy};
use ptta_core::nn::{DenseNet, Layer, MlpSpec, ParamMask, StatsSource};
use ptta_core::rbn::RbnState;
use ptta_core::seed;

#[derive(Debug, Clone)]
pub struct Case {
    pub name: String,
    pub rel: f64,
}

pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-4;

pub fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// d=5 → 7 → BN → ReLU → 3, with non-trivial affine and running statistics.
pub fn two_layer_net(seed: u64) -> DenseNet {
    let mut net = DenseNet::mlp(&MlpSpec { input_dim: 5, hidden: vec![7], num_classes: 3 }, seed).unwrap();
    net.init_running_stats();
    let mut rng = seed::rng(seed, &[99]);
    for layer in net.layers_mut() {
        if let Layer::BatchNorm(bn) = layer {
            for g in &mut bn.gamma {
                *g = 1.0 + 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
            for b in &mut bn.beta {
                *b = 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
            let run = bn.running.as_mut().unwrap();
            for m in &mut run.mean {
                *m = 0.5 * rng.sample::<f64, _>(StandardNormal);
            }
            for v in &mut run.var {
                *v = 0.5 + rng.random::<f64>();
            }
        }
    }
    net
}

pub fn perturbed(net: &DenseNet, scale: f64, seed: u64) -> DenseNet {
    let mut out = net.clone();
    let mut p = out.params(ParamMask::All);
    let mut rng = seed::rng(seed, &[7]);
    for v in &mut p {
        *v += scale * rng.sample::<f64, _>(StandardNormal);
    }
    out.set_params(ParamMask::All, &p).unwrap();
    out
}

/// Worst relative error of `analytic` against central differences of `loss`,
/// with the coordinate where it occurs.
pub fn check(name: &str, net: &DenseNet, mask: ParamMask, analytic: &[f64], loss: impl Fn(&DenseNet) -> f64) -> Case {
    let base = net.params(mask);
    assert_eq!(base.len(), analytic.len(), "{name}: gradient length");
    let layout = net.param_layout(mask);
    let mut worst = Case { name: name.to_string(), rel: 0.0 };
    for i in 0..base.len() {
        let eval = |delta: f64| {
            let mut p = base.clone();
            p[i] += delta;
            let mut n = net.clone();
            n.set_params(mask, &p).unwrap();
            loss(&n)
        };
        let fd = (eval(H) - eval(-H)) / (2.0 * H);
        let a = analytic[i];
        let scale = a.abs().max(fd.abs());
        let rel = if scale < 1e-8 { 0.0 } else { (a - fd).abs() / scale };
        if rel >= worst.rel {
            let slot = layout.iter().find(|s| i >= s.offset && i < s.offset + s.len).unwrap();
            worst =
                Case { name: format!("{name}: {}[{}] analytic {a:e} vs fd {fd:e}", slot.name, i - slot.offset), rel };
        }
    }
    worst
}

pub struct Bank {
    pub weak: Matrix,
    pub strong: Matrix,
    pub ages: Vec<u64>,
}

pub fn bank(seed: u64) -> Bank {
    let mut rng = seed::rng(seed, &[5]);
    let weak = random_matrix(8, 5, &mut rng);
    let mut strong = weak.clone();
    for v in strong.as_mut_slice() {
        *v = *v * 1.05 + 0.3 * rng.sample::<f64, _>(StandardNormal);
    }
    let ages = (0..8).map(|_| rng.random_range(0..200)).collect();
    Bank { weak, strong, ages }
}

pub fn robust_case(objective: BankObjective, norm: ConsistencyNorm, mask: ParamMask, seed: u64) -> Case {
    let student = two_layer_net(seed);
    let teacher = perturbed(&student, 0.05, seed);
    let rbn = RbnState::init_from_pretrained(&student, 0.3).unwrap();
    let b = bank(seed);
    let run = |s: &DenseNet| {
        let mut r = rbn.clone();
        robust_loss(&teacher, s, &mut r, &b.weak, &b.strong, &b.ages, 64, norm, objective).unwrap()
    };
    let out = run(&student);
    let grads = student.backward(&out.student.tape, &out.dlogits, mask).unwrap();
    check(&format!("{objective:?}/{norm:?}/{mask:?}"), &student, mask, &grads.values, |s| run(s).loss)
}

pub fn robust_cases() -> Vec<Case> {
    let mut out = Vec::new();
    for seed in 0..3 {
        for mask in [ParamMask::AffineOnly, ParamMask::All] {
            for norm in [ConsistencyNorm::PerClass, ConsistencyNorm::Standard] {
                out.push(robust_case(BankObjective::RobustRbn, norm, mask, seed));
            }
            out.push(robust_case(BankObjective::RobustTestBatch, ConsistencyNorm::PerClass, mask, seed));
            // statistics depend on the student here, with weight α
            out.push(robust_case(BankObjective::EntropyRbn, ConsistencyNorm::PerClass, mask, seed));
        }
    }
    out
}

pub fn pl_tent_cases() -> Vec<Case> {
    let mut out = Vec::new();
    for seed in 0..3 {
        let net = two_layer_net(seed);
        let x = random_matrix(8, 5, &mut seed::rng(seed, &[3]));
        let fwd = net.forward(&x, StatsSource::TestBatch).unwrap();
        let labels: Vec<usize> = fwd.logits.row_iter().map(argmax).collect();
        for mask in [ParamMask::AffineOnly, ParamMask::All] {
            let (_, d) = cross_entropy(&fwd.logits, &labels).unwrap();
            let g = net.backward(&fwd.tape, &d, mask).unwrap();
            out.push(check("pl", &net, mask, &g.values, |n| {
                cross_entropy(&n.forward(&x, StatsSource::TestBatch).unwrap().logits, &labels).unwrap().0
            }));

            let (_, d) = mean_entropy(&fwd.logits);
            let g = net.backward(&fwd.tape, &d, mask).unwrap();
            out.push(check("tent", &net, mask, &g.values, |n| {
                mean_entropy(&n.forward(&x, StatsSource::TestBatch).unwrap().logits).0
            }));
        }
        // frozen statistics
        let fwd = net.forward(&x, StatsSource::TrainRunning).unwrap();
        let (_, d) = cross_entropy(&fwd.logits, &labels).unwrap();
        let g = net.backward(&fwd.tape, &d, ParamMask::All).unwrap();
        out.push(check("source-ce", &net, ParamMask::All, &g.values, |n| {
            cross_entropy(&n.forward(&x, StatsSource::TrainRunning).unwrap().logits, &labels).unwrap().0
        }));
    }
    out
}

/// Two BN layers: layer-1 statistics depend on layer-0 affine parameters.
pub fn deeper_cases() -> Vec<Case> {
    let mut net = DenseNet::mlp(&MlpSpec { input_dim: 4, hidden: vec![6, 5], num_classes: 3 }, 11).unwrap();
    net.init_running_stats();
    let net = perturbed(&net, 0.1, 11);
    let x = random_matrix(8, 4, &mut seed::rng(11, &[1]));
    let rbn = RbnState::init_from_pretrained(&net, 0.2).unwrap();
    let run = |n: &DenseNet| {
        let mut r = rbn.clone();
        let f = n.forward(&x, StatsSource::RbnUpdate(&mut r)).unwrap();
        let (l, d) = mean_entropy(&f.logits);
        (l, d, f)
    };
    let (_, d, f) = run(&net);
    [ParamMask::AffineOnly, ParamMask::All]
        .into_iter()
        .map(|mask| {
            let g = net.backward(&f.tape, &d, mask).unwrap();
            check("rbn-update", &net, mask, &g.values, |n| run(n).0)
        })
        .collect()
}
