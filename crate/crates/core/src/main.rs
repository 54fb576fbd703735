use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ptta_core::adapt::{ConsistencyNorm, Method};
use ptta_core::harness::{
    ablation_suite, default_schedule, read_summary_csv, read_sweep_csv, run_grid, summarize, sweep, write_runs_csv,
    write_summary_csv, write_sweep_csv, ExperimentConfig, PretrainCache, RunReport, SweepAxis,
};
use ptta_core::{Error, Result};

#[derive(Parser)]
#[command(name = "ptta", version, about = "Practical test-time adaptation benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain and checkpoint the source model for each seed.
    Pretrain(Common),
    /// Run one or more methods on the benchmark stream.
    Run {
        #[command(flatten)]
        common: Common,
        /// Comma-separated methods; defaults to the config's method.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<Method>,
    },
    /// Full RoTTA and its three ablated variants.
    Ablate(Common),
    /// One-axis sweep.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values; defaults to the axis's standard grid.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "bn,rotta")]
        methods: Vec<Method>,
    },
    /// Aggregate summary CSVs into mean ± std per method; sweep CSVs per value.
    Report {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "results")]
    out_dir: PathBuf,
    #[arg(long, default_value = "checkpoints")]
    checkpoint_dir: PathBuf,
    /// Write per-batch JSON-lines traces under this directory.
    #[arg(long)]
    trace_dir: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    slots: Option<usize>,
    #[arg(long)]
    capacity: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long)]
    lambda_t: Option<f64>,
    #[arg(long)]
    lambda_u: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    samples_per_update: Option<usize>,
    #[arg(long)]
    examples_per_segment: Option<usize>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    within_class_stddev: Option<f64>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    /// Drop the 1/C factor in the consistency loss.
    #[arg(long)]
    standard_consistency: bool,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::from_json(&fs::read_to_string(p)?)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { c.$($field).+ = v; })*
            };
        }
        set!(
            method => method,
            delta => delta,
            batch_size => batch_size,
            capacity => capacity,
            alpha => alpha,
            nu => nu,
            lambda_t => lambda_t,
            lambda_u => lambda_u,
            lr => lr,
            samples_per_update => samples_per_update,
            num_classes => task.num_classes,
            feature_dim => task.feature_dim,
            within_class_stddev => task.within_class_stddev,
            pretrain_epochs => pretrain.epochs,
        );
        if self.slots.is_some() {
            c.slots = self.slots;
        }
        if let Some(n) = self.examples_per_segment {
            c.schedule = default_schedule(n);
        }
        if !self.seeds.is_empty() {
            c.seeds = self.seeds.clone();
        }
        if self.trace_dir.is_some() {
            c.trace_dir = self.trace_dir.clone();
        }
        if self.standard_consistency {
            c.consistency_norm = ConsistencyNorm::Standard;
        }
        c.validate()?;
        Ok(c)
    }

    fn cache(&self) -> PretrainCache {
        PretrainCache::with_dir(&self.checkpoint_dir)
    }
}

fn write_reports(dir: &Path, stem: &str, cfg: &ExperimentConfig, reports: &[RunReport]) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_runs_csv(fs::File::create(dir.join(format!("{stem}_runs.csv")))?, reports, &cfg.schedule.segments)?;
    write_summary_csv(fs::File::create(dir.join(format!("{stem}_summary.csv")))?, reports)?;
    fs::write(dir.join(format!("{stem}_config.json")), cfg.to_json()?)?;
    print_summary(&reports.iter().map(|r| (r.method, r.avg_error)).collect::<Vec<_>>());
    Ok(())
}

fn print_summary(rows: &[(Method, f64)]) {
    println!("{:<14} {:>8} {:>8} {:>5}", "method", "mean", "std", "runs");
    for s in summarize(rows) {
        println!("{:<14} {:>8.2} {:>8.2} {:>5}", s.method.name(), s.mean, s.std, s.runs);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(common) => {
            let cfg = common.config()?;
            let cache = common.cache();
            for &seed in &cfg.seeds {
                let ctx = cache.get(&cfg, seed)?;
                println!("seed {seed}: clean holdout accuracy {:.4}", ctx.pretrain.holdout_accuracy);
            }
        }
        Command::Run { common, methods } => {
            let cfg = common.config()?;
            let methods = if methods.is_empty() { vec![cfg.method] } else { methods };
            let configs: Vec<_> = methods.iter().map(|&m| cfg.with_method(m)).collect();
            let reports = run_grid(&configs, &common.cache())?;
            write_reports(&common.out_dir, "run", &cfg, &reports)?;
        }
        Command::Ablate(common) => {
            let cfg = common.config()?.with_method(Method::Rotta);
            let reports = ablation_suite(&cfg, &common.cache())?;
            write_reports(&common.out_dir, "ablation", &cfg, &reports)?;
        }
        Command::Sweep { common, axis, values, methods } => {
            let cfg = common.config()?;
            let values = if values.is_empty() { axis.default_values() } else { values };
            let rows = sweep(axis, &values, &methods, &cfg, &common.cache())?;
            fs::create_dir_all(&common.out_dir)?;
            write_sweep_csv(fs::File::create(common.out_dir.join(format!("sweep_{axis}.csv")))?, &rows)?;
            for &v in &values {
                println!("{axis} = {v}");
                print_summary(
                    &rows.iter().filter(|r| r.value == v).map(|r| (r.method, r.avg_error)).collect::<Vec<_>>(),
                );
            }
        }
        Command::Report { csv } => {
            let mut rows = Vec::new();
            for p in csv {
                let text =
                    fs::read_to_string(&p).map_err(|e| Error::InvalidArgument(format!("{}: {e}", p.display())))?;
                if text.lines().next().is_some_and(|h| h.split(',').any(|c| c == "axis")) {
                    // sweeps are summarised per swept value
                    let sweep = read_sweep_csv(text.as_bytes())?;
                    let mut keys: Vec<(String, f64)> = Vec::new();
                    for r in &sweep {
                        if !keys.contains(&(r.axis.clone(), r.value)) {
                            keys.push((r.axis.clone(), r.value));
                        }
                    }
                    for (axis, v) in keys {
                        println!("{} ({axis} = {v})", p.display());
                        let group: Vec<(Method, f64)> = sweep
                            .iter()
                            .filter(|r| r.axis == axis && r.value == v)
                            .map(|r| (r.method, r.avg_error))
                            .collect();
                        print_summary(&group);
                    }
                } else {
                    rows.extend(read_summary_csv(text.as_bytes())?);
                }
            }
            if !rows.is_empty() {
                print_summary(&rows);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
