use std::path::PathBuf;

use clap::Args;
use deepe_core::data::{Dataset, DatasetStats, Split, REFERENCE_STATS};
use deepe_core::eval::emit_report;
use deepe_core::layers::identity_dropout_total_drop_prob;
use serde_json::json;

use crate::config::ConfigFlags;
use crate::evaluate::{evaluate_checkpoint, print_report};
use crate::{create_dir, manifest, write_csv, write_file, CmdResult, DataSource, Failure};

pub const STATS_FILE: &str = "stats.csv";
pub const STATS_DETAIL_FILE: &str = "stats.txt";
pub const SURVIVAL_FILE: &str = "identity_dropout.csv";

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset directory or `synthetic[:SEED]`.
    #[arg(long)]
    pub data: Option<DataSource>,
    /// Name used in the stats table; defaults to the directory name.
    #[arg(long)]
    pub name: Option<String>,
    /// Evaluate this checkpoint and write category and degree breakdowns.
    #[arg(long, requires = "data")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Exit 1 unless the counts equal the published statistics for `name`.
    #[arg(long, requires = "data")]
    pub check_reference: bool,
    #[command(flatten)]
    pub config: ConfigFlags,
}

/// `(order, drop probability)` for orders `0, step, 2 step, ...` below
/// `n_blocks`, with `step = max(1, n_blocks / 4)`.
pub fn survival_table(n_blocks: usize, alpha: f64) -> Result<Vec<(usize, f64)>, Failure> {
    let step = (n_blocks / 4).max(1);
    (0..n_blocks.max(1))
        .step_by(step)
        .map(|order| Ok((order, identity_dropout_total_drop_prob(n_blocks, alpha, order)?)))
        .collect()
}

pub fn reference_stats(name: &str) -> Option<DatasetStats> {
    REFERENCE_STATS
        .iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(name))
        .map(|(_, s)| *s)
}

fn stats_rows(s: &DatasetStats, reference: Option<&DatasetStats>) -> Vec<Vec<String>> {
    let pick = |s: &DatasetStats| [s.entities, s.relations, s.train, s.valid, s.test];
    let ours = pick(s);
    let theirs = reference.map(pick);
    ["entities", "relations", "train", "valid", "test"]
        .iter()
        .enumerate()
        .map(|(i, label)| {
            let mut row = vec![label.to_string(), ours[i].to_string()];
            if let Some(t) = theirs {
                row.push(t[i].to_string());
            }
            row
        })
        .collect()
}

fn dataset_name(args: &AnalyzeArgs, source: &DataSource) -> String {
    args.name.clone().unwrap_or_else(|| match source {
        DataSource::Dir(d) => d
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| d.display().to_string()),
        DataSource::Synthetic(_) => "synthetic".into(),
    })
}

pub fn run(args: &AnalyzeArgs, argv: &[String]) -> CmdResult {
    let cfg = args.config.resolve()?;
    create_dir(&args.out)?;
    let n = cfg.model.n_deepe_blocks;
    let alpha = cfg.model.dropout.p_identity;
    let table = survival_table(n, alpha)?;
    let rows: Vec<Vec<String>> = table
        .iter()
        .map(|(o, p)| vec![n.to_string(), alpha.to_string(), o.to_string(), format!("{p:.3}"), format!("{:.3}", 1.0 - p)])
        .collect();
    write_csv(&args.out.join(SURVIVAL_FILE), &["blocks", "alpha", "order", "drop_prob", "keep_prob"], &rows)?;
    println!("identity dropout, {n} blocks, alpha {alpha}:");
    for (o, p) in &table {
        println!("  order {o:>3}: drop {p:.3}");
    }
    let mut artifacts = vec![SURVIVAL_FILE.to_string()];
    let mut data_section = None;
    let mut failure = None;

    if let Some(source) = &args.data {
        let dataset: Dataset = source.load()?;
        let name = dataset_name(args, source);
        let reference = reference_stats(&name);
        let stats = dataset.stats();
        let mut header = vec!["statistic".to_string(), name.clone()];
        if reference.is_some() {
            header.push("published".into());
        }
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        write_csv(&args.out.join(STATS_FILE), &header, &stats_rows(&stats, reference.as_ref()))?;
        write_file(&args.out.join(STATS_DETAIL_FILE), dataset.stats_report())?;
        artifacts.extend([STATS_FILE.to_string(), STATS_DETAIL_FILE.to_string()]);
        println!("{name}: {stats:?}");
        if args.check_reference {
            match reference {
                None => return Err(Failure::Input(format!("no published statistics for {name:?}"))),
                Some(r) if r != stats => {
                    failure = Some(Failure::Check(format!("{name}: counts {stats:?} differ from published {r:?}")))
                }
                Some(_) => println!("{name}: counts match the published statistics"),
            }
        }
        if let Some(ckpt) = &args.checkpoint {
            let report = evaluate_checkpoint(ckpt, &dataset, args.split, cfg.train.ties)?;
            print_report(&report);
            for p in emit_report(&report, &args.out)? {
                if let Some(n) = p.file_name() {
                    artifacts.push(n.to_string_lossy().into_owned());
                }
            }
        }
        data_section = Some(manifest::data_section(source, &dataset)?);
    }
    manifest::write(&args.out, "analyze", argv, Some(&cfg), data_section, json!({ "artifacts": artifacts }))?;
    failure.map_or(Ok(()), Err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forty_block_table_reads_published_values() {
        let t = survival_table(40, 0.01).unwrap();
        let orders: Vec<usize> = t.iter().map(|r| r.0).collect();
        assert_eq!(orders, [0, 10, 20, 30]);
        let shown: Vec<String> = t.iter().map(|r| format!("{:.3}", r.1)).collect();
        assert_eq!(shown, ["0.331", "0.260", "0.182", "0.096"]);
    }

    #[test]
    fn small_networks_list_every_order() {
        let t = survival_table(2, 0.1).unwrap();
        assert_eq!(t.len(), 2);
        assert!((t[0].1 - 0.19).abs() < 1e-12);
        assert!((t[1].1 - 0.1).abs() < 1e-12);
    }

    #[test]
    fn reference_lookup_ignores_case() {
        assert_eq!(reference_stats("wn18rr").unwrap().entities, 40943);
        assert!(reference_stats("nell").is_none());
    }
}
