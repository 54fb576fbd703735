//! Experiment orchestration: pretraining, online runs, ablations, sweeps and
//! CSV reporting.
//!
//! Every run is a pure function of `(config, seed)`. Streams are seeded
//! independently of the method, so all methods in one comparison consume the
//! same stream manifest.

mod csv_io;

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use csv_io::{
    read_summary_csv, read_sweep_csv, summarize, write_runs_csv, write_summary_csv, write_sweep_csv, MethodSummary,
    SummaryRow, SweepRow, RUNS_COLUMNS, SUMMARY_COLUMNS, SWEEP_COLUMNS,
};

use crate::adapt::{AdaptConfig, AdapterState, AugmentPair, ConsistencyNorm, Method, StrongAugment, TraceRecord};
use crate::error::{Error, Result};
use crate::nn::{pretrain, DenseNet, MlpSpec, PretrainConfig, PretrainReport};
use crate::seed::{self, tag};
use crate::stream::{build_ptta_stream, PttaStream, SegmentSchedule, StreamParams};
use crate::synth_data::{generate_holdout_pool, generate_source_set, CorruptionKind, CorruptionSpec, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub within_class_stddev: f64,
    pub source_per_class: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { num_classes: 10, feature_dim: 16, within_class_stddev: 0.8, source_per_class: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSettings {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        let d = PretrainConfig::default();
        Self { epochs: d.epochs, lr: d.lr, batch_size: d.batch_size }
    }
}

/// The default 8-segment benchmark schedule. Corruption seeds here are
/// offsets; each run mixes them with its own seed.
pub fn default_schedule(examples_per_segment: usize) -> SegmentSchedule {
    use CorruptionKind::*;
    let segments = [
        (FeatureShift, 1.0),
        (GaussianNoise, 0.5),
        (FeatureShift, 0.7),
        (OcclusionMask, 0.5),
        (FeatureShift, 0.9),
        (Rotation2dPairs, 0.3),
        (FeatureScale, 1.0),
        (FeatureShift, 0.8),
    ];
    SegmentSchedule::new(
        segments.iter().enumerate().map(|(i, &(k, s))| CorruptionSpec::new(k, s, i as u64)).collect(),
        examples_per_segment,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    pub pretrain: PretrainSettings,
    pub schedule: SegmentSchedule,
    pub method: Method,
    pub delta: f64,
    pub batch_size: usize,
    /// Slots per segment; `None` uses ⌈segment size / batch size⌉.
    #[serde(default)]
    pub slots: Option<usize>,
    pub capacity: usize,
    pub alpha: f64,
    pub nu: f64,
    pub lambda_t: f64,
    pub lambda_u: f64,
    pub lr: f64,
    pub samples_per_update: usize,
    #[serde(default)]
    pub consistency_norm: ConsistencyNorm,
    pub seeds: Vec<u64>,
    /// Directory for per-batch JSON-lines traces; none when unset.
    #[serde(default)]
    pub trace_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskConfig::default(),
            pretrain: PretrainSettings::default(),
            schedule: default_schedule(1024),
            method: Method::Rotta,
            delta: 0.1,
            batch_size: 64,
            slots: None,
            capacity: 64,
            alpha: 0.05,
            nu: 0.001,
            lambda_t: 1.0,
            lambda_u: 1.0,
            lr: 1e-3,
            samples_per_update: 64,
            consistency_norm: ConsistencyNorm::PerClass,
            seeds: vec![0, 1, 2, 3, 4],
            trace_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn with_method(&self, method: Method) -> Self {
        Self { method, ..self.clone() }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks every field and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let t = &self.task;
        if t.num_classes < 2 {
            errs.push(format!("task.num_classes must be at least 2, got {}", t.num_classes));
        }
        if t.feature_dim == 0 {
            errs.push("task.feature_dim must be positive".into());
        }
        if !(t.within_class_stddev > 0.0 && t.within_class_stddev.is_finite()) {
            errs.push(format!("task.within_class_stddev must be positive, got {}", t.within_class_stddev));
        }
        if t.source_per_class == 0 {
            errs.push("task.source_per_class must be positive".into());
        }
        if self.pretrain.epochs == 0 {
            errs.push("pretrain.epochs must be positive".into());
        }
        if !(self.pretrain.lr > 0.0 && self.pretrain.lr.is_finite()) {
            errs.push(format!("pretrain.lr must be positive, got {}", self.pretrain.lr));
        }
        if self.pretrain.batch_size == 0 {
            errs.push("pretrain.batch_size must be positive".into());
        }
        if let Err(Error::Config(e)) = self.schedule.validate() {
            errs.extend(e.into_iter().map(|m| format!("schedule: {m}")));
        }
        if t.num_classes > 0 && self.schedule.examples_per_segment < t.num_classes {
            errs.push("schedule.examples_per_segment must cover every class".into());
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            errs.push(format!("delta must be positive, got {}", self.delta));
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be positive".into());
        }
        if self.slots == Some(0) {
            errs.push("slots must be positive when given".into());
        }
        if self.seeds.is_empty() {
            errs.push("seeds must not be empty".into());
        }
        let adapt = self.adapt_config(0);
        if let Err(Error::Config(e)) = adapt.validate() {
            errs.extend(e);
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn adapt_config(&self, seed: u64) -> AdaptConfig {
        AdaptConfig {
            method: self.method,
            lr: self.lr,
            capacity: self.capacity,
            alpha: self.alpha,
            nu: self.nu,
            lambda_t: self.lambda_t,
            lambda_u: self.lambda_u,
            consistency_norm: self.consistency_norm,
            augment: AugmentPair { strong: StrongAugment::for_stddev(self.task.within_class_stddev) },
            samples_per_update: self.samples_per_update,
            seed,
        }
    }

    /// Hex SHA-256 of the configuration as run for one seed (seed list and
    /// trace directory excluded).
    pub fn hash_for_seed(&self, seed: u64) -> String {
        let mut c = self.clone();
        c.seeds = vec![seed];
        c.trace_dir = None;
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config serialises")))
    }

    /// The schedule with corruption seeds mixed with the run seed.
    pub fn resolved_schedule(&self, seed: u64) -> SegmentSchedule {
        let mut s = self.schedule.clone();
        for (i, c) in s.segments.iter_mut().enumerate() {
            c.seed = seed::derive(seed, &[tag::CORRUPTION, i as u64, c.seed]);
        }
        s
    }
}

/// Everything a run needs that does not depend on the method.
#[derive(Debug)]
pub struct SeedContext {
    pub seed: u64,
    pub task: TaskSpec,
    pub net: DenseNet,
    pub pretrain: PretrainReport,
    pub pool: Vec<crate::synth_data::LabeledExample>,
}

type CacheKey = String;
type CacheCell = Arc<OnceLock<std::result::Result<Arc<SeedContext>, String>>>;

/// Pretrained models keyed by (seed, task, pretraining settings, pool size).
/// Safe to share across worker threads; each key is trained once.
#[derive(Debug, Default)]
pub struct PretrainCache {
    cells: Mutex<HashMap<CacheKey, CacheCell>>,
    dir: Option<PathBuf>,
}

impl PretrainCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Also persist checkpoints under `dir` and reuse them across processes.
    pub fn with_dir(dir: impl Into<PathBuf>) -> Self {
        Self { cells: Mutex::default(), dir: Some(dir.into()) }
    }

    pub fn get(&self, cfg: &ExperimentConfig, seed: u64) -> Result<Arc<SeedContext>> {
        let key = serde_json::to_string(&(seed, &cfg.task, &cfg.pretrain, cfg.schedule.examples_per_segment))?;
        let cell = {
            let mut cells = self.cells.lock().expect("cache lock");
            cells.entry(key.clone()).or_default().clone()
        };
        cell.get_or_init(|| self.build(cfg, seed, &key).map(Arc::new).map_err(|e| e.to_string()))
            .clone()
            .map_err(Error::InvalidArgument)
    }

    fn build(&self, cfg: &ExperimentConfig, seed: u64, key: &str) -> Result<SeedContext> {
        let t = &cfg.task;
        let task = TaskSpec::sample(t.num_classes, t.feature_dim, t.within_class_stddev, seed)?;
        let pool = generate_holdout_pool(&task, cfg.schedule.examples_per_segment)?;
        let stem = self
            .dir
            .as_ref()
            .map(|d| d.join(format!("pretrained_{}", &hex::encode(Sha256::digest(key.as_bytes()))[..16])));
        if let Some(stem) = &stem {
            if stem.with_extension("json").exists() {
                let (net, _) = crate::nn::checkpoint::load(stem)?;
                let acc = crate::nn::accuracy(&net, &pool)?;
                let report =
                    PretrainReport { epochs: cfg.pretrain.epochs, final_loss: f64::NAN, holdout_accuracy: acc };
                return Ok(SeedContext { seed, task, net, pretrain: report, pool });
            }
        }
        let source = generate_source_set(&task, t.source_per_class)?;
        let spec = MlpSpec::default_for(t.feature_dim, t.num_classes);
        let mut net = DenseNet::mlp(&spec, seed::derive(seed, &[tag::INIT]))?;
        let pcfg = PretrainConfig {
            epochs: cfg.pretrain.epochs,
            lr: cfg.pretrain.lr,
            batch_size: cfg.pretrain.batch_size,
            seed,
        };
        let report = pretrain(&mut net, &source, &pool, &pcfg)?;
        if let Some(stem) = &stem {
            fs::create_dir_all(stem.parent().unwrap_or(Path::new(".")))?;
            crate::nn::checkpoint::save(stem, &net, None)?;
        }
        Ok(SeedContext { seed, task, net, pretrain: report, pool })
    }
}

pub fn build_stream(cfg: &ExperimentConfig, ctx: &SeedContext) -> Result<PttaStream> {
    build_ptta_stream(
        &cfg.resolved_schedule(ctx.seed),
        &ctx.pool,
        &ctx.task,
        StreamParams { delta: cfg.delta, batch_size: cfg.batch_size, seed: ctx.seed, slots: cfg.slots },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub seed: u64,
    /// Error (%) per segment.
    pub segment_errors: Vec<f64>,
    pub segment_counts: Vec<usize>,
    /// Example-weighted mean of the segment errors (%).
    pub avg_error: f64,
    pub trace_path: Option<PathBuf>,
    pub wall_clock_secs: f64,
    pub config_hash: String,
    pub stream_hash: String,
    pub source_holdout_accuracy: f64,
    pub updates: usize,
}

/// Runs one method on one seed.
pub fn run_single(cfg: &ExperimentConfig, seed: u64, cache: &PretrainCache) -> Result<RunReport> {
    cfg.validate()?;
    let started = Instant::now();
    let ctx = cache.get(cfg, seed)?;
    let stream = build_stream(cfg, &ctx)?;
    let config_hash = cfg.hash_for_seed(seed);
    let mut state = AdapterState::new(&ctx.net, cfg.adapt_config(seed))?;

    let trace_path =
        cfg.trace_dir.as_ref().map(|d| d.join(format!("{}_seed{}_{}.jsonl", cfg.method, seed, &config_hash[..12])));
    let mut trace = match &trace_path {
        Some(p) => {
            fs::create_dir_all(p.parent().unwrap_or(Path::new(".")))?;
            Some(BufWriter::new(fs::File::create(p)?))
        }
        None => None,
    };

    let segments = cfg.schedule.segments.len();
    let mut wrong = vec![0usize; segments];
    let mut counts = vec![0usize; segments];
    let mut updates = 0;
    for batch in &stream.batches {
        let outcome = match state.step(batch) {
            Ok(o) => o,
            Err(e) => {
                if let (Some(dir), Ok(dump)) = (&cfg.trace_dir, state.dump()) {
                    let _ = fs::write(dir.join(format!("{}_seed{}_abort.json", cfg.method, seed)), dump);
                }
                return Err(e);
            }
        };
        updates += outcome.updates;
        for ((p, ex), &s) in outcome.predictions.iter().zip(&batch.examples).zip(&batch.example_segments) {
            counts[s] += 1;
            if *p != ex.y {
                wrong[s] += 1;
            }
        }
        if let Some(w) = trace.as_mut() {
            serde_json::to_writer(&mut *w, &TraceRecord::capture(&state, batch, &outcome))?;
            w.write_all(b"\n")?;
        }
    }
    if let Some(mut w) = trace {
        w.flush()?;
    }
    let segment_errors: Vec<f64> =
        wrong.iter().zip(&counts).map(|(&w, &n)| if n == 0 { 0.0 } else { 100.0 * w as f64 / n as f64 }).collect();
    let total: usize = counts.iter().sum();
    let avg_error = 100.0 * wrong.iter().sum::<usize>() as f64 / total as f64;
    Ok(RunReport {
        method: cfg.method,
        seed,
        segment_errors,
        segment_counts: counts,
        avg_error,
        trace_path,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        config_hash,
        stream_hash: stream.manifest.hash(),
        source_holdout_accuracy: ctx.pretrain.holdout_accuracy,
        updates,
    })
}

/// Runs `cfg.method` for every seed in parallel; reports come back in seed
/// order.
pub fn run_experiment(cfg: &ExperimentConfig, cache: &PretrainCache) -> Result<Vec<RunReport>> {
    run_grid(std::slice::from_ref(cfg), cache)
}

/// Runs every (config, seed) cell in parallel. Output order is config-major,
/// then seed order, regardless of scheduling.
pub fn run_grid(configs: &[ExperimentConfig], cache: &PretrainCache) -> Result<Vec<RunReport>> {
    for c in configs {
        c.validate()?;
    }
    let cells: Vec<(&ExperimentConfig, u64)> =
        configs.iter().flat_map(|c| c.seeds.iter().map(move |&s| (c, s))).collect();
    // pretrain each seed once before fanning out over methods
    let mut seen = Vec::new();
    let unique: Vec<&(&ExperimentConfig, u64)> = cells
        .iter()
        .filter(|(c, s)| {
            let k = (*s, c.task.clone(), c.pretrain.clone(), c.schedule.examples_per_segment);
            if seen.contains(&k) {
                false
            } else {
                seen.push(k);
                true
            }
        })
        .collect();
    unique.par_iter().map(|(c, s)| cache.get(c, *s).map(|_| ())).collect::<Result<Vec<()>>>()?;
    cells.par_iter().map(|(c, s)| run_single(c, *s, cache)).collect()
}

/// Full RoTTA and its three variants on shared streams, in that order.
pub fn ablation_suite(base: &ExperimentConfig, cache: &PretrainCache) -> Result<Vec<RunReport>> {
    if base.method != Method::Rotta {
        return Err(Error::Config(vec![format!("ablation base method must be rotta, got {}", base.method)]));
    }
    let configs: Vec<ExperimentConfig> = Method::ABLATIONS.iter().map(|&m| base.with_method(m)).collect();
    run_grid(&configs, cache)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Delta,
    BatchSize,
    Alpha,
    Nu,
    LambdaRatio,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Delta => "delta",
            SweepAxis::BatchSize => "batch_size",
            SweepAxis::Alpha => "alpha",
            SweepAxis::Nu => "nu",
            SweepAxis::LambdaRatio => "lambda_ratio",
        }
    }

    /// Applies one sweep value. For `lambda_ratio` the value is λ_t and
    /// λ_u = 2 − λ_t.
    pub fn apply(self, base: &ExperimentConfig, value: f64) -> ExperimentConfig {
        let mut c = base.clone();
        match self {
            SweepAxis::Delta => c.delta = value,
            SweepAxis::BatchSize => c.batch_size = value as usize,
            SweepAxis::Alpha => c.alpha = value,
            SweepAxis::Nu => c.nu = value,
            SweepAxis::LambdaRatio => {
                c.lambda_t = value;
                c.lambda_u = 2.0 - value;
            }
        }
        c
    }

    /// Default grid for each axis.
    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepAxis::Delta => vec![10.0, 1.0, 0.1, 0.01],
            SweepAxis::BatchSize => vec![16.0, 32.0, 64.0, 128.0],
            SweepAxis::Alpha => vec![0.01, 0.05, 0.1],
            SweepAxis::Nu => vec![0.0005, 0.001, 0.005],
            SweepAxis::LambdaRatio => vec![0.0, 0.5, 1.0, 1.5, 2.0],
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [SweepAxis::Delta, SweepAxis::BatchSize, SweepAxis::Alpha, SweepAxis::Nu, SweepAxis::LambdaRatio]
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(vec![format!("unknown sweep axis `{s}`")]))
    }
}

/// One run per (value, method, seed).
pub fn sweep(
    axis: SweepAxis,
    values: &[f64],
    methods: &[Method],
    base: &ExperimentConfig,
    cache: &PretrainCache,
) -> Result<Vec<SweepRow>> {
    if values.len() < 2 {
        return Err(Error::Config(vec![format!("a {axis} sweep needs at least 2 values, got {}", values.len())]));
    }
    if methods.is_empty() {
        return Err(Error::Config(vec!["a sweep needs at least one method".into()]));
    }
    if axis == SweepAxis::BatchSize && values.iter().any(|v| !(*v >= 1.0 && v.fract() == 0.0)) {
        return Err(Error::Config(vec!["batch sizes must be positive integers".into()]));
    }
    let mut configs = Vec::new();
    let mut keys = Vec::new();
    for &v in values {
        for &m in methods {
            configs.push(axis.apply(&base.with_method(m), v));
            keys.push(v);
        }
    }
    let reports = run_grid(&configs, cache)?;
    let per_config = base.seeds.len();
    Ok(reports
        .iter()
        .enumerate()
        .map(|(i, r)| SweepRow {
            axis: axis.name().to_string(),
            value: keys[i / per_config],
            method: r.method,
            seed: r.seed,
            avg_error: r.avg_error,
        })
        .collect())
}
