//! Synthetic Gaussian-cluster classification task, corruption families, and
//! the line-oriented dataset format.
//!
//! The task is a mixture of isotropic Gaussians: class `c` draws
//! `center[c] + N(0, stddev² I)`. Corruptions are deterministic given the
//! corruption seed and a per-example key, so a whole corrupted segment can be
//! replayed from example indices alone.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::seed::{self, tag};

/// Gaussian noise at severity 1 has stddev `NOISE_SCALE * within_class_stddev`.
pub const NOISE_SCALE: f64 = 1.5;
/// Length of the shift vector at severity 1, in feature units.
pub const SHIFT_MAGNITUDE: f64 = 8.0;
/// Rotation angle at severity 1, in radians (90°).
pub const MAX_ROTATION: f64 = std::f64::consts::FRAC_PI_2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub class_centers: Vec<Vec<f64>>,
    pub within_class_stddev: f64,
    pub seed: u64,
}

impl TaskSpec {
    /// Draws class centers from a unit Gaussian, frozen by `seed`.
    pub fn sample(num_classes: usize, feature_dim: usize, within_class_stddev: f64, seed: u64) -> Result<Self> {
        if num_classes == 0 || feature_dim == 0 {
            return Err(invalid("num_classes and feature_dim must be positive"));
        }
        let mut rng = seed::rng(seed, &[tag::TASK]);
        let class_centers =
            (0..num_classes).map(|_| (0..feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let spec = Self { num_classes, feature_dim, class_centers, within_class_stddev, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.feature_dim == 0 {
            return Err(invalid("num_classes and feature_dim must be positive"));
        }
        if !(self.within_class_stddev > 0.0 && self.within_class_stddev.is_finite()) {
            return Err(invalid(format!("within_class_stddev must be positive, got {}", self.within_class_stddev)));
        }
        if self.class_centers.len() != self.num_classes {
            return Err(invalid(format!(
                "{} class centers for {} classes",
                self.class_centers.len(),
                self.num_classes
            )));
        }
        for (c, center) in self.class_centers.iter().enumerate() {
            if center.len() != self.feature_dim {
                return Err(invalid(format!("center {c} has dimension {}", center.len())));
            }
            if center.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { what: format!("class center {c}") });
            }
        }
        for a in 0..self.num_classes {
            for b in a + 1..self.num_classes {
                if self.class_centers[a] == self.class_centers[b] {
                    return Err(invalid(format!("class centers {a} and {b} coincide")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub x: Vec<f64>,
    pub y: usize,
}

/// Draws `counts[c]` examples of class `c`, class-major order.
fn draw_examples(spec: &TaskSpec, counts: &[usize], rng_tag: u64) -> Result<Vec<LabeledExample>> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed, &[rng_tag]);
    let mut out = Vec::with_capacity(counts.iter().sum());
    for (y, &n) in counts.iter().enumerate() {
        let center = &spec.class_centers[y];
        for _ in 0..n {
            let x = center
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + spec.within_class_stddev * z
                })
                .collect();
            out.push(LabeledExample { x, y });
        }
    }
    Ok(out)
}

/// Clean source training set: `n_per_class` examples for every class.
pub fn generate_source_set(spec: &TaskSpec, n_per_class: usize) -> Result<Vec<LabeledExample>> {
    if n_per_class == 0 {
        return Err(invalid("n_per_class must be at least 1"));
    }
    draw_examples(spec, &vec![n_per_class; spec.num_classes], tag::SOURCE_SET)
}

/// Clean held-out pool of `total` examples, class counts differing by at most
/// one (lower class indices take the remainder). Drawn independently of the
/// source set.
pub fn generate_holdout_pool(spec: &TaskSpec, total: usize) -> Result<Vec<LabeledExample>> {
    if total < spec.num_classes {
        return Err(invalid(format!("holdout pool of {total} cannot cover {} classes", spec.num_classes)));
    }
    let base = total / spec.num_classes;
    let extra = total % spec.num_classes;
    let counts: Vec<usize> = (0..spec.num_classes).map(|c| base + usize::from(c < extra)).collect();
    draw_examples(spec, &counts, tag::HOLDOUT)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Identity,
    GaussianNoise,
    FeatureShift,
    Rotation2dPairs,
    FeatureScale,
    OcclusionMask,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 6] = [
        CorruptionKind::Identity,
        CorruptionKind::GaussianNoise,
        CorruptionKind::FeatureShift,
        CorruptionKind::Rotation2dPairs,
        CorruptionKind::FeatureScale,
        CorruptionKind::OcclusionMask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::Identity => "identity",
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::FeatureShift => "feature_shift",
            CorruptionKind::Rotation2dPairs => "rotation_2d_pairs",
            CorruptionKind::FeatureScale => "feature_scale",
            CorruptionKind::OcclusionMask => "occlusion_mask",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(vec![format!("unknown corruption kind `{s}`")]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: f64, seed: u64) -> Self {
        Self { kind, severity, seed }
    }

    pub fn identity() -> Self {
        Self::new(CorruptionKind::Identity, 0.0, 0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.severity) {
            return Err(Error::Config(vec![format!(
                "severity must lie in [0, 1], got {} for {}",
                self.severity, self.kind
            )]));
        }
        Ok(())
    }
}

/// A corruption resolved against a task: the fixed random structure (shift
/// direction, rotation pairs, occlusion block) is drawn once from the
/// corruption seed, per-example noise from `(seed, key)`.
#[derive(Debug, Clone)]
pub struct Corruption {
    spec: CorruptionSpec,
    noise_sigma: f64,
    shift: Vec<f64>,
    pairs: Vec<(usize, usize)>,
    occluded: Vec<usize>,
}

impl Corruption {
    pub fn new(spec: &CorruptionSpec, task: &TaskSpec) -> Result<Self> {
        spec.validate()?;
        let d = task.feature_dim;
        let s = spec.severity;
        let mut rng = seed::rng(spec.seed, &[tag::CORRUPTION]);
        let mut shift = Vec::new();
        let mut pairs = Vec::new();
        let mut occluded = Vec::new();
        match spec.kind {
            CorruptionKind::FeatureShift => {
                let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                shift = dir.iter().map(|v| s * SHIFT_MAGNITUDE * v / norm).collect();
            }
            CorruptionKind::Rotation2dPairs => {
                let mut perm: Vec<usize> = (0..d).collect();
                for i in (1..d).rev() {
                    perm.swap(i, rng.random_range(0..=i));
                }
                pairs = perm.chunks_exact(2).map(|p| (p[0], p[1])).collect();
            }
            CorruptionKind::OcclusionMask => {
                let len = (s * d as f64).round() as usize;
                let start = rng.random_range(0..d);
                occluded = (0..len.min(d)).map(|i| (start + i) % d).collect();
            }
            _ => {}
        }
        Ok(Self { spec: spec.clone(), noise_sigma: s * NOISE_SCALE * task.within_class_stddev, shift, pairs, occluded })
    }

    pub fn spec(&self) -> &CorruptionSpec {
        &self.spec
    }

    /// Applies the corruption; `key` individualises the per-example noise.
    pub fn apply(&self, example: &LabeledExample, key: u64) -> LabeledExample {
        let mut x = example.x.clone();
        let s = self.spec.severity;
        match self.spec.kind {
            CorruptionKind::Identity => {}
            CorruptionKind::GaussianNoise => {
                let mut rng = seed::rng(self.spec.seed, &[tag::CORRUPTION, key]);
                for v in &mut x {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v += self.noise_sigma * z;
                }
            }
            CorruptionKind::FeatureShift => {
                for (v, d) in x.iter_mut().zip(&self.shift) {
                    *v += d;
                }
            }
            CorruptionKind::Rotation2dPairs => {
                let (sin, cos) = (s * MAX_ROTATION).sin_cos();
                for &(i, j) in &self.pairs {
                    let (a, b) = (x[i], x[j]);
                    x[i] = cos * a - sin * b;
                    x[j] = sin * a + cos * b;
                }
            }
            CorruptionKind::FeatureScale => {
                for v in &mut x {
                    *v *= 1.0 + s;
                }
            }
            CorruptionKind::OcclusionMask => {
                for &i in &self.occluded {
                    x[i] = 0.0;
                }
            }
        }
        LabeledExample { x, y: example.y }
    }
}

/// One-off corruption of a single example (per-example key 0).
pub fn apply_corruption(example: &LabeledExample, c: &CorruptionSpec, task: &TaskSpec) -> Result<LabeledExample> {
    if example.x.len() != task.feature_dim {
        return Err(Error::Shape(format!("example has {} features, task has {}", example.x.len(), task.feature_dim)));
    }
    Ok(Corruption::new(c, task)?.apply(example, 0))
}

const DATASET_MAGIC: &str = "ptta-dataset v1";

/// Writes `ptta-dataset v1 classes=C dim=D` followed by one
/// `y<TAB>x_0,...,x_{d-1}` line per example. Floats use the shortest
/// representation that round-trips.
pub fn write_dataset<W: Write>(mut w: W, num_classes: usize, dim: usize, examples: &[LabeledExample]) -> Result<()> {
    writeln!(w, "{DATASET_MAGIC} classes={num_classes} dim={dim}")?;
    for ex in examples {
        if ex.x.len() != dim {
            return Err(Error::Shape(format!("example with {} features in a dim={dim} dataset", ex.x.len())));
        }
        write!(w, "{}\t", ex.y)?;
        for (i, v) in ex.x.iter().enumerate() {
            if i > 0 {
                w.write_all(b",")?;
            }
            write!(w, "{v:?}")?;
        }
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<(usize, usize, Vec<LabeledExample>)> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty dataset".into()))??;
    let rest =
        header.strip_prefix(DATASET_MAGIC).ok_or_else(|| Error::Format(format!("bad dataset header `{header}`")))?;
    let mut classes = None;
    let mut dim = None;
    for field in rest.split_whitespace() {
        match field.split_once('=') {
            Some(("classes", v)) => classes = v.parse::<usize>().ok(),
            Some(("dim", v)) => dim = v.parse::<usize>().ok(),
            _ => return Err(Error::Format(format!("unexpected header field `{field}`"))),
        }
    }
    let (classes, dim) = classes.zip(dim).ok_or_else(|| Error::Format("header must carry classes= and dim=".into()))?;
    let mut examples = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Format(format!("line {}: {what}", lineno + 2));
        let (y, xs) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
        let y: usize = y.parse().map_err(|_| bad("bad label"))?;
        if y >= classes {
            return Err(bad("label out of range"));
        }
        let x = xs
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|_| bad("bad feature value")))
            .collect::<Result<Vec<_>>>()?;
        if x.len() != dim {
            return Err(bad("wrong feature count"));
        }
        examples.push(LabeledExample { x, y });
    }
    Ok((classes, dim, examples))
}
