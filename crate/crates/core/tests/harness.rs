use ptta_core::adapt::{Method, TraceRecord};
use ptta_core::harness::{
    ablation_suite, read_summary_csv, read_sweep_csv, run_experiment, run_single, summarize, sweep, write_runs_csv,
    write_summary_csv, write_sweep_csv, ExperimentConfig, PretrainCache, SweepAxis, TaskConfig, RUNS_COLUMNS,
    SUMMARY_COLUMNS, SWEEP_COLUMNS,
};
use ptta_core::nn::checkpoint;
use ptta_core::stream::SegmentSchedule;
use ptta_core::synth_data::{CorruptionKind, CorruptionSpec};
use ptta_core::Error;

fn small_config() -> ExperimentConfig {
    ExperimentConfig {
        task: TaskConfig { num_classes: 4, feature_dim: 8, within_class_stddev: 0.8, source_per_class: 150 },
        schedule: SegmentSchedule::new(
            vec![
                CorruptionSpec::new(CorruptionKind::FeatureShift, 0.8, 0),
                CorruptionSpec::new(CorruptionKind::OcclusionMask, 0.5, 1),
            ],
            200,
        ),
        seeds: vec![0, 1],
        ..ExperimentConfig::default()
    }
}

#[test]
fn validation_lists_every_violated_field() {
    let mut cfg =
        ExperimentConfig { delta: 0.0, batch_size: 0, alpha: 2.0, seeds: Vec::new(), ..ExperimentConfig::default() };
    cfg.task.num_classes = 1;
    let Err(Error::Config(errs)) = cfg.validate() else { panic!("expected a config error") };
    for field in ["delta", "batch_size", "alpha", "seeds", "task.num_classes"] {
        assert!(errs.iter().any(|e| e.starts_with(field)), "{field} missing from {errs:?}");
    }
    assert_eq!(errs.len(), 5);
    assert!(ExperimentConfig::default().validate().is_ok());
}

#[test]
fn config_json_roundtrip() {
    let cfg = small_config();
    assert_eq!(ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
    let partial = r#"{"method": "tent", "delta": 1.0}"#;
    let c = ExperimentConfig::from_json(partial).unwrap();
    assert_eq!((c.method, c.delta, c.batch_size), (Method::Tent, 1.0, 64));
    assert!(ExperimentConfig::from_json(r#"{"method": "cotta"}"#).is_err());
}

#[test]
fn sweeps_need_two_values_and_valid_batches() {
    let cache = PretrainCache::new();
    let base = small_config();
    for (axis, values) in [(SweepAxis::Delta, vec![0.1]), (SweepAxis::BatchSize, vec![16.0, 2.5])] {
        assert!(matches!(sweep(axis, &values, &[Method::Bn], &base, &cache), Err(Error::Config(_))));
    }
    let lambda = SweepAxis::LambdaRatio.default_values();
    assert_eq!((lambda[0], *lambda.last().unwrap()), (0.0, 2.0));
    let lo = SweepAxis::LambdaRatio.apply(&base, 0.0);
    let hi = SweepAxis::LambdaRatio.apply(&base, 2.0);
    assert_eq!((lo.lambda_t, lo.lambda_u, hi.lambda_t, hi.lambda_u), (0.0, 2.0, 2.0, 0.0));
    assert_eq!("lambda_ratio".parse::<SweepAxis>().unwrap(), SweepAxis::LambdaRatio);
}

#[test]
fn sweep_rows_follow_values_and_methods() {
    let cache = PretrainCache::new();
    let rows = sweep(SweepAxis::Delta, &[10.0, 0.1], &[Method::Bn, Method::Source], &small_config(), &cache).unwrap();
    let keys: Vec<(f64, Method, u64)> = rows.iter().map(|r| (r.value, r.method, r.seed)).collect();
    assert_eq!(
        keys,
        vec![
            (10.0, Method::Bn, 0),
            (10.0, Method::Bn, 1),
            (10.0, Method::Source, 0),
            (10.0, Method::Source, 1),
            (0.1, Method::Bn, 0),
            (0.1, Method::Bn, 1),
            (0.1, Method::Source, 0),
            (0.1, Method::Source, 1),
        ]
    );
    // Source ignores correlation: the per-seed error is the same at both δ
    assert_eq!(rows[2].avg_error, rows[6].avg_error);
    let mut buf = Vec::new();
    write_sweep_csv(&mut buf, &rows).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), SWEEP_COLUMNS.join(","));
    assert_eq!(text.lines().count(), 9);
    assert_eq!(read_sweep_csv(text.as_bytes()).unwrap(), rows);
    let Err(Error::Format(msg)) = read_sweep_csv("method,seed,avg_error\n".as_bytes()) else { panic!() };
    assert!(msg.contains("axis, value"), "{msg}");
}

#[test]
fn methods_share_streams_and_errors_are_weighted() {
    let cache = PretrainCache::new();
    let base = small_config();
    let mut hashes = Vec::new();
    for &m in &Method::ALL {
        for r in run_experiment(&base.with_method(m), &cache).unwrap() {
            let total: usize = r.segment_counts.iter().sum();
            assert_eq!(r.segment_counts, vec![200, 200]);
            let weighted: f64 =
                r.segment_errors.iter().zip(&r.segment_counts).map(|(e, &n)| e * n as f64).sum::<f64>() / total as f64;
            assert!((weighted - r.avg_error).abs() < 1e-9);
            hashes.push((r.seed, r.stream_hash));
        }
    }
    for seed in [0, 1] {
        let mut h: Vec<&String> = hashes.iter().filter(|(s, _)| *s == seed).map(|(_, h)| h).collect();
        h.dedup();
        assert_eq!(h.len(), 1, "seed {seed}");
    }
}

#[test]
fn ablation_rows_match_standalone_runs() {
    let cache = PretrainCache::new();
    let base = small_config();
    let table = ablation_suite(&base, &cache).unwrap();
    let methods: Vec<Method> = table.iter().map(|r| r.method).collect();
    assert_eq!(methods, Method::ABLATIONS.iter().flat_map(|&m| [m, m]).collect::<Vec<_>>());
    for seed in [0, 1] {
        let solo = run_single(&base, seed, &cache).unwrap();
        let row = &table[seed as usize];
        assert_eq!(
            (row.avg_error, &row.segment_errors, &row.config_hash),
            (solo.avg_error, &solo.segment_errors, &solo.config_hash)
        );
    }
    assert!(ablation_suite(&base.with_method(Method::Bn), &cache).is_err());

    // the w/o RBN variant differs from full RoTTA in one config field
    let a: serde_json::Value = serde_json::from_str(&base.to_json().unwrap()).unwrap();
    let b: serde_json::Value = serde_json::from_str(&base.with_method(Method::RottaNoRbn).to_json().unwrap()).unwrap();
    let diff: Vec<&String> =
        a.as_object().unwrap().iter().filter(|(k, v)| b[k.as_str()] != **v).map(|(k, _)| k).collect();
    assert_eq!(diff, vec!["method"]);
}

#[test]
fn reruns_reproduce_reports() {
    let base = small_config();
    let a = run_experiment(&base, &PretrainCache::new()).unwrap();
    let b = run_experiment(&base, &PretrainCache::new()).unwrap();
    for (x, y) in a.iter().zip(&b) {
        let mut y = y.clone();
        y.wall_clock_secs = x.wall_clock_secs;
        assert_eq!(*x, y);
    }
}

#[test]
fn checkpoints_persist_across_caches() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let first = PretrainCache::with_dir(dir.path()).get(&cfg, 0).unwrap();
    let files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(files.len(), 2);
    let second = PretrainCache::with_dir(dir.path()).get(&cfg, 0).unwrap();
    assert_eq!(first.net, second.net);
    assert_eq!(first.pretrain.holdout_accuracy, second.pretrain.holdout_accuracy);

    let stem = dir.path().join("copy");
    checkpoint::save(&stem, &first.net, None).unwrap();
    let (net, rbn) = checkpoint::load(&stem).unwrap();
    assert_eq!(net, first.net);
    assert!(rbn.is_none());
}

#[test]
fn csv_outputs_have_frozen_headers() {
    let cache = PretrainCache::new();
    let base = small_config();
    let mut reports = run_experiment(&base.with_method(Method::Bn), &cache).unwrap();
    reports.extend(run_experiment(&base.with_method(Method::Source), &cache).unwrap());

    let mut runs = Vec::new();
    write_runs_csv(&mut runs, &reports, &base.schedule.segments).unwrap();
    let runs = String::from_utf8(runs).unwrap();
    assert_eq!(runs.lines().next().unwrap(), RUNS_COLUMNS.join(","));
    assert_eq!(runs.lines().count(), 1 + 4 * 2);
    assert!(runs.lines().nth(1).unwrap().starts_with("bn,0,0,feature_shift,0.8,200,"));

    let mut summary = Vec::new();
    write_summary_csv(&mut summary, &reports).unwrap();
    assert_eq!(String::from_utf8(summary.clone()).unwrap().lines().next().unwrap(), SUMMARY_COLUMNS.join(","));
    let rows = read_summary_csv(summary.as_slice()).unwrap();
    let s = summarize(&rows);
    assert_eq!(s.iter().map(|m| (m.method, m.runs)).collect::<Vec<_>>(), vec![(Method::Bn, 2), (Method::Source, 2)]);
    let mean = (reports[0].avg_error + reports[1].avg_error) / 2.0;
    assert!((s[0].mean - mean).abs() < 1e-9);

    assert!(read_summary_csv("method,seed\nbn,0\n".as_bytes()).is_err());
}

#[test]
fn traces_have_one_record_per_batch() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.seeds = vec![0];
    cfg.trace_dir = Some(dir.path().to_path_buf());
    let r = run_single(&cfg, 0, &PretrainCache::new()).unwrap();
    let text = std::fs::read_to_string(r.trace_path.unwrap()).unwrap();
    let records: Vec<TraceRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 400usize.div_ceil(64));
    assert!(records.iter().enumerate().all(|(i, t)| t.step == i && t.bank_size <= 64));
    assert!(records.iter().all(|t| t.occupancy.iter().sum::<usize>() == t.bank_size));
    assert!(records.last().unwrap().rbn_drift > 0.0);
    // trace location does not enter the hash
    assert_eq!(r.config_hash, small_config().hash_for_seed(0));
}
