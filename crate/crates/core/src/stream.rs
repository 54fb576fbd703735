//! Continually-changing, correlation-sampled test streams.
//!
//! Each segment corrupts the same base pool with its own corruption, then
//! orders it by a Dirichlet class-to-slot partition: class `c` spreads its
//! examples over `T` slots with proportions `q[c, ·] ~ Dir(δ)`, and the slots
//! are concatenated. Small δ concentrates each class in few slots, which makes
//! consecutive batches label-correlated.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Open01};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::seed::{self, tag};
use crate::synth_data::{Corruption, CorruptionSpec, LabeledExample, TaskSpec};

/// Draws a point on the `t`-simplex from a symmetric Dirichlet(δ).
///
/// The `t` independent Gamma(δ, 1) draws are taken in log space (for δ < 1
/// via `Gamma(δ+1)·U^{1/δ}`) so that tiny concentrations do not underflow
/// every coordinate to zero before normalisation.
pub fn dirichlet_sample<R: Rng + ?Sized>(delta: f64, t: usize, rng: &mut R) -> Result<Vec<f64>> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(invalid(format!("Dirichlet concentration must be positive, got {delta}")));
    }
    if t == 0 {
        return Err(invalid("Dirichlet dimension must be at least 1"));
    }
    if t == 1 {
        return Ok(vec![1.0]);
    }
    let boosted = delta < 1.0;
    let gamma = Gamma::new(if boosted { delta + 1.0 } else { delta }, 1.0)
        .map_err(|e| invalid(format!("gamma({delta}): {e}")))?;
    let logs: Vec<f64> = (0..t)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let mut l = g.ln();
            if boosted {
                let u: f64 = Open01.sample(rng);
                l += u.ln() / delta;
            }
            l
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / sum).collect())
}

/// Row-stochastic class × slot matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionMatrix {
    rows: Vec<Vec<f64>>,
}

impl PartitionMatrix {
    pub fn sample<R: Rng + ?Sized>(num_classes: usize, slots: usize, delta: f64, rng: &mut R) -> Result<Self> {
        let rows = (0..num_classes).map(|_| dirichlet_sample(delta, slots, rng)).collect::<Result<_>>()?;
        Ok(Self { rows })
    }

    /// The δ → ∞ limit: every class split evenly over the slots.
    pub fn uniform(num_classes: usize, slots: usize) -> Self {
        Self { rows: vec![vec![1.0 / slots as f64; slots]; num_classes] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let slots = rows.first().map_or(0, Vec::len);
        if slots == 0 {
            return Err(invalid("partition matrix needs at least one slot"));
        }
        for (c, row) in rows.iter().enumerate() {
            if row.len() != slots || row.iter().any(|&q| !(q >= 0.0)) {
                return Err(invalid(format!("partition row {c} is malformed")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(invalid(format!("partition row {c} sums to {s}")));
            }
        }
        Ok(Self { rows })
    }

    pub fn num_classes(&self) -> usize {
        self.rows.len()
    }

    pub fn slots(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn row(&self, c: usize) -> &[f64] {
        &self.rows[c]
    }
}

/// Largest-remainder apportionment of `n` items by proportions `q`.
/// Counts sum to exactly `n`; remainder ties go to the lower slot index.
pub fn apportion(q: &[f64], n: usize) -> Vec<usize> {
    let ideal: Vec<f64> = q.iter().map(|&p| p * n as f64).collect();
    let mut counts: Vec<usize> = ideal.iter().map(|v| v.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..q.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = ideal[a] - ideal[a].floor();
        let rb = ideal[b] - ideal[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &slot in order.iter().cycle().take(n.saturating_sub(assigned)) {
        counts[slot] += 1;
    }
    counts
}

/// Orders the grouped items by an explicit partition. Each class's items are
/// shuffled, cut into consecutive slot shares, and within each slot the class
/// runs stay contiguous, with the run order and the order inside each run
/// shuffled.
pub fn build_correlated_segment_with<T: Clone, R: Rng + ?Sized>(
    by_class: &[Vec<T>],
    partition: &PartitionMatrix,
    rng: &mut R,
) -> Result<Vec<T>> {
    if by_class.is_empty() {
        return Err(invalid("no classes to partition"));
    }
    if partition.num_classes() != by_class.len() {
        return Err(invalid(format!("partition has {} rows for {} classes", partition.num_classes(), by_class.len())));
    }
    let slots = partition.slots();
    let mut slot_runs: Vec<Vec<Vec<T>>> = vec![Vec::new(); slots];
    for (c, items) in by_class.iter().enumerate() {
        let mut items = items.clone();
        items.shuffle(rng);
        let counts = apportion(partition.row(c), items.len());
        let mut rest = items.as_slice();
        for (slot, &k) in counts.iter().enumerate() {
            let (head, tail) = rest.split_at(k);
            if !head.is_empty() {
                slot_runs[slot].push(head.to_vec());
            }
            rest = tail;
        }
    }
    let mut out = Vec::with_capacity(by_class.iter().map(Vec::len).sum());
    for mut runs in slot_runs {
        runs.shuffle(rng);
        for mut run in runs {
            run.shuffle(rng);
            out.extend(run);
        }
    }
    Ok(out)
}

/// Draws a fresh `Dir(δ)` partition and orders the grouped items by it.
pub fn build_correlated_segment<T: Clone, R: Rng + ?Sized>(
    by_class: &[Vec<T>],
    slots: usize,
    delta: f64,
    rng: &mut R,
) -> Result<Vec<T>> {
    if by_class.is_empty() {
        return Err(invalid("no classes to partition"));
    }
    if by_class.iter().any(Vec::is_empty) {
        return Err(invalid("every class must be present in the pool"));
    }
    let partition = PartitionMatrix::sample(by_class.len(), slots, delta, rng)?;
    build_correlated_segment_with(by_class, &partition, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSchedule {
    pub segments: Vec<CorruptionSpec>,
    pub examples_per_segment: usize,
    #[serde(default)]
    pub allow_single_segment: bool,
}

impl SegmentSchedule {
    pub fn new(segments: Vec<CorruptionSpec>, examples_per_segment: usize) -> Self {
        Self { segments, examples_per_segment, allow_single_segment: false }
    }

    pub fn single(segment: CorruptionSpec, examples_per_segment: usize) -> Self {
        Self { segments: vec![segment], examples_per_segment, allow_single_segment: true }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.segments.is_empty() || (self.segments.len() < 2 && !self.allow_single_segment) {
            errs.push(format!(
                "schedule needs at least 2 segments (got {}); single-segment runs need allow_single_segment",
                self.segments.len()
            ));
        }
        if self.examples_per_segment == 0 {
            errs.push("examples_per_segment must be positive".into());
        }
        for (i, s) in self.segments.iter().enumerate() {
            if let Err(Error::Config(e)) = s.validate() {
                errs.extend(e.into_iter().map(|m| format!("segment {i}: {m}")));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamBatch {
    pub examples: Vec<LabeledExample>,
    /// Index of each example in the base pool.
    pub pool_indices: Vec<usize>,
    /// Segment of each example; differs from `segment_index` only when the
    /// batch straddles a segment boundary.
    pub example_segments: Vec<usize>,
    /// Segment of the first example in the batch.
    pub segment_index: usize,
    pub global_step: usize,
}

impl StreamBatch {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.examples.iter().map(|e| e.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamParams {
    pub delta: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Slot count per segment; `None` uses ⌈segment size / batch size⌉.
    pub slots: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct PttaStream {
    pub batches: Vec<StreamBatch>,
    pub manifest: StreamManifest,
}

fn group_by_class(pool: &[LabeledExample], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut groups = vec![Vec::new(); num_classes];
    for (i, ex) in pool.iter().enumerate() {
        if ex.y >= num_classes {
            return Err(invalid(format!("pool example {i} has label {} >= {num_classes}", ex.y)));
        }
        groups[ex.y].push(i);
    }
    Ok(groups)
}

/// Builds the full PTTA stream: per segment, corrupt the pool, order it with
/// a freshly drawn partition, then chunk the concatenation into batches.
pub fn build_ptta_stream(
    schedule: &SegmentSchedule,
    pool: &[LabeledExample],
    task: &TaskSpec,
    params: StreamParams,
) -> Result<PttaStream> {
    schedule.validate()?;
    if params.batch_size == 0 {
        return Err(invalid("batch_size must be at least 1"));
    }
    if pool.len() != schedule.examples_per_segment {
        return Err(invalid(format!(
            "pool has {} examples but the schedule expects {} per segment",
            pool.len(),
            schedule.examples_per_segment
        )));
    }
    let slots = params.slots.unwrap_or_else(|| schedule.examples_per_segment.div_ceil(params.batch_size)).max(1);
    let groups = group_by_class(pool, task.num_classes)?;

    let mut order: Vec<(usize, usize)> = Vec::with_capacity(pool.len() * schedule.segments.len());
    for (s, _) in schedule.segments.iter().enumerate() {
        let mut rng = seed::rng(params.seed, &[tag::STREAM, s as u64]);
        let ordered = build_correlated_segment(&groups, slots, params.delta, &mut rng)?;
        order.extend(ordered.into_iter().map(|i| (s, i)));
    }

    let manifest = StreamManifest {
        format: MANIFEST_FORMAT.to_string(),
        version: MANIFEST_VERSION,
        delta: params.delta,
        batch_size: params.batch_size,
        seed: params.seed,
        slots_per_segment: slots,
        examples_per_segment: schedule.examples_per_segment,
        segments: schedule.segments.clone(),
        batches: order
            .chunks(params.batch_size)
            .enumerate()
            .map(|(step, chunk)| BatchRecord {
                global_step: step,
                segment_index: chunk[0].0,
                example_indices: chunk.iter().map(|&(_, i)| i).collect(),
            })
            .collect(),
    };
    let batches = manifest.replay(pool, task)?;
    Ok(PttaStream { batches, manifest })
}

const MANIFEST_FORMAT: &str = "ptta-stream-manifest";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub global_step: usize,
    pub segment_index: usize,
    pub example_indices: Vec<usize>,
}

/// Replayable description of a stream: ordered batches of pool indices plus
/// the segment corruptions. Raw features are not stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamManifest {
    pub format: String,
    pub version: u32,
    pub delta: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub slots_per_segment: usize,
    pub examples_per_segment: usize,
    pub segments: Vec<CorruptionSpec>,
    pub batches: Vec<BatchRecord>,
}

impl StreamManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            return Err(Error::Format(format!("unsupported manifest {} v{}", m.format, m.version)));
        }
        Ok(m)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifest serialises");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Reconstructs the stream batches from the base pool.
    pub fn replay(&self, pool: &[LabeledExample], task: &TaskSpec) -> Result<Vec<StreamBatch>> {
        let corruptions = self.segments.iter().map(|c| Corruption::new(c, task)).collect::<Result<Vec<_>>>()?;
        let mut position = 0usize;
        self.batches
            .iter()
            .map(|rec| {
                let mut examples = Vec::with_capacity(rec.example_indices.len());
                let mut example_segments = Vec::with_capacity(rec.example_indices.len());
                for &i in &rec.example_indices {
                    let seg = position / self.examples_per_segment;
                    position += 1;
                    let base =
                        pool.get(i).ok_or_else(|| Error::Format(format!("manifest references pool index {i}")))?;
                    let corruption = corruptions
                        .get(seg)
                        .ok_or_else(|| Error::Format(format!("manifest position maps to missing segment {seg}")))?;
                    examples.push(corruption.apply(base, i as u64));
                    example_segments.push(seg);
                }
                Ok(StreamBatch {
                    examples,
                    pool_indices: rec.example_indices.clone(),
                    example_segments,
                    segment_index: rec.segment_index,
                    global_step: rec.global_step,
                })
            })
            .collect()
    }
}

/// Label statistics of a stream, computed from true labels only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamStats {
    /// Mean over batches of the empirical label entropy (nats).
    pub mean_label_entropy: f64,
    /// Fraction of batches whose most frequent class exceeds half the batch.
    pub majority_fraction: f64,
}

pub fn label_entropy(labels: impl IntoIterator<Item = usize>, num_classes: usize) -> f64 {
    let mut counts = vec![0usize; num_classes];
    let mut n = 0usize;
    for y in labels {
        counts[y] += 1;
        n += 1;
    }
    if n == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&k| k > 0)
        .map(|&k| {
            let p = k as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

pub fn stream_stats(batches: &[StreamBatch], num_classes: usize) -> StreamStats {
    if batches.is_empty() {
        return StreamStats { mean_label_entropy: 0.0, majority_fraction: 0.0 };
    }
    let mut entropy = 0.0;
    let mut majority = 0usize;
    for b in batches {
        entropy += label_entropy(b.labels(), num_classes);
        let mut counts = vec![0usize; num_classes];
        b.labels().for_each(|y| counts[y] += 1);
        if 2 * counts.iter().max().copied().unwrap_or(0) > b.len() {
            majority += 1;
        }
    }
    StreamStats {
        mean_label_entropy: entropy / batches.len() as f64,
        majority_fraction: majority as f64 / batches.len() as f64,
    }
}
