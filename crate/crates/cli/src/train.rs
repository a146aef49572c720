use std::path::{Path, PathBuf};

use clap::Args;
use deepe_core::checkpoint;
use deepe_core::data::{Dataset, Split};
use deepe_core::eval::{evaluate, EvalOptions, Metrics};
use deepe_core::train::{train_loop, write_log};
use deepe_core::Scalar;
use serde_json::json;

use crate::config::{ConfigFlags, RunConfig};
use crate::{create_dir, manifest, with_precision, write_csv, CmdResult, DataSource, Failure};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LOG_FILE: &str = "train_log.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SUMMARY_STATS_FILE: &str = "summary_stats.csv";

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Dataset directory or `synthetic[:SEED]`.
    #[arg(long)]
    pub data: DataSource,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Repeat with seeds `seed..seed+runs`, one subdirectory per run.
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    #[command(flatten)]
    pub config: ConfigFlags,
}

/// Outcome of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub seed: u64,
    pub best_epoch: usize,
    pub epochs: usize,
    pub valid_mrr: Option<f64>,
    pub test: Metrics,
}

fn train_one<T: Scalar>(dataset: &Dataset, cfg: &RunConfig, dir: &Path) -> Result<RunSummary, Failure> {
    let out = train_loop::<T>(dataset, &cfg.model, &cfg.train)?;
    checkpoint::save(&out.best, dataset, dir.join(BEST_CHECKPOINT))?;
    checkpoint::save(&out.last, dataset, dir.join(FINAL_CHECKPOINT))?;
    write_log(&out.log, dir.join(LOG_FILE))?;
    let opts = EvalOptions {
        ties: cfg.train.ties,
        ..EvalOptions::from_env()
    };
    let test = evaluate(&out.best, dataset, Split::Test, &opts)?;
    Ok(RunSummary {
        seed: cfg.train.seed,
        best_epoch: out.best_epoch,
        epochs: out.log.len(),
        valid_mrr: out.best_valid_mrr,
        test: test.overall,
    })
}

/// Trains one model per seed and writes checkpoints, logs and manifests.
pub fn train_runs(
    source: &DataSource,
    dataset: &Dataset,
    cfg: &RunConfig,
    runs: usize,
    out: &Path,
    argv: &[String],
) -> Result<Vec<RunSummary>, Failure> {
    if runs == 0 {
        return Err(Failure::Input("--runs must be at least 1".into()));
    }
    create_dir(out)?;
    let data = manifest::data_section(source, dataset)?;
    let mut summaries = Vec::with_capacity(runs);
    for i in 0..runs {
        let run_cfg = cfg.with_seed(cfg.train.seed + i as u64);
        let dir = if runs == 1 {
            out.to_path_buf()
        } else {
            out.join(format!("run-{}", run_cfg.train.seed))
        };
        create_dir(&dir)?;
        log::info!("run {}/{runs}: seed {} -> {}", i + 1, run_cfg.train.seed, dir.display());
        let s = with_precision!(run_cfg.precision, train_one(dataset, &run_cfg, &dir))?;
        manifest::write(
            &dir,
            "train",
            argv,
            Some(&run_cfg),
            Some(data.clone()),
            json!({
                "artifacts": [BEST_CHECKPOINT, FINAL_CHECKPOINT, LOG_FILE],
                "best_epoch": s.best_epoch,
                "best_valid_mrr": s.valid_mrr,
            }),
        )?;
        println!(
            "seed {}: best epoch {} valid mrr {} test mrr {:.4} mr {:.1} hits@1 {:.4} hits@10 {:.4}",
            s.seed,
            s.best_epoch,
            s.valid_mrr.map_or("-".into(), |m| format!("{m:.4}")),
            s.test.mrr,
            s.test.mr,
            s.test.hits1,
            s.test.hits10
        );
        summaries.push(s);
    }
    write_summary(out, &summaries)?;
    Ok(summaries)
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn write_summary(out: &Path, runs: &[RunSummary]) -> Result<(), Failure> {
    let fmt = deepe_core::eval::fmt_sig6;
    let rows: Vec<Vec<String>> = runs
        .iter()
        .map(|s| {
            vec![
                s.seed.to_string(),
                s.best_epoch.to_string(),
                s.epochs.to_string(),
                s.valid_mrr.map(fmt).unwrap_or_default(),
                fmt(s.test.mr),
                fmt(s.test.mrr),
                fmt(s.test.hits1),
                fmt(s.test.hits10),
            ]
        })
        .collect();
    write_csv(
        &out.join(SUMMARY_FILE),
        &["seed", "best_epoch", "epochs", "valid_mrr", "test_mr", "test_mrr", "test_hits1", "test_hits10"],
        &rows,
    )?;
    let metrics: [(&str, fn(&RunSummary) -> f64); 4] = [
        ("test_mr", |s| s.test.mr),
        ("test_mrr", |s| s.test.mrr),
        ("test_hits1", |s| s.test.hits1),
        ("test_hits10", |s| s.test.hits10),
    ];
    let stats: Vec<Vec<String>> = metrics
        .iter()
        .map(|(name, f)| {
            let xs: Vec<f64> = runs.iter().map(f).collect();
            let (m, sd) = mean_std(&xs);
            vec![name.to_string(), runs.len().to_string(), fmt(m), fmt(sd)]
        })
        .collect();
    write_csv(&out.join(SUMMARY_STATS_FILE), &["metric", "runs", "mean", "std"], &stats)
}

pub fn run(args: &TrainArgs, argv: &[String]) -> CmdResult {
    let cfg = args.config.resolve()?;
    let dataset = args.data.load()?;
    train_runs(&args.data, &dataset, &cfg, args.runs, &args.out, argv).map(|_| ())
}
