use std::path::{Path, PathBuf};

use clap::Args;
use deepe_core::checkpoint;
use deepe_core::data::{Dataset, Split};
use deepe_core::eval::{emit_report, evaluate, EvalOptions, EvalReport, TieMode};
use deepe_core::Scalar;
use serde_json::json;

use crate::{create_dir, manifest, with_precision, CmdResult, DataSource, Failure};

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory or `synthetic[:SEED]`; vocabularies must match the
    /// checkpoint.
    #[arg(long)]
    pub data: DataSource,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value = "average")]
    pub ties: TieMode,
    /// Directory for `overall.csv`, `by_category.csv`, `by_degree.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn eval_at<T: Scalar>(path: &Path, dataset: &Dataset, split: Split, opts: &EvalOptions) -> Result<EvalReport, Failure> {
    let model = checkpoint::load_for::<T>(path, dataset)?;
    Ok(evaluate(&model, dataset, split, opts)?)
}

/// Loads a checkpoint at its stored precision and evaluates it.
pub fn evaluate_checkpoint(path: &Path, dataset: &Dataset, split: Split, ties: TieMode) -> Result<EvalReport, Failure> {
    let header = checkpoint::read_header(path)?;
    let opts = EvalOptions {
        ties,
        ..EvalOptions::from_env()
    };
    with_precision!(header.precision, eval_at(path, dataset, split, &opts))
}

pub fn print_report(report: &EvalReport) {
    for (scope, m) in [("all", &report.overall), ("head", &report.head), ("tail", &report.tail)] {
        println!(
            "{scope:>4}: n {} mr {:.2} mrr {:.4} hits@1 {:.4} hits@10 {:.4}",
            m.count, m.mr, m.mrr, m.hits1, m.hits10
        );
    }
}

pub fn run(args: &EvalArgs, argv: &[String]) -> CmdResult {
    let dataset = args.data.load()?;
    let report = evaluate_checkpoint(&args.checkpoint, &dataset, args.split, args.ties)?;
    print_report(&report);
    if let Some(out) = &args.out {
        create_dir(out)?;
        let files = emit_report(&report, out)?;
        let names: Vec<String> = files
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect();
        manifest::write(
            out,
            "eval",
            argv,
            None,
            Some(manifest::data_section(&args.data, &dataset)?),
            json!({
                "checkpoint": args.checkpoint.display().to_string(),
                "checkpoint_sha256": manifest::file_sha256(&args.checkpoint)?,
                "split": args.split,
                "ties": args.ties,
                "artifacts": names,
            }),
        )?;
    }
    Ok(())
}
