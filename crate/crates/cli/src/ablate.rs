use std::path::PathBuf;

use clap::{Args, ValueEnum};
use deepe_core::data::{Dataset, RelationCategory, Split};
use deepe_core::eval::{evaluate, fmt_sig6, EvalOptions, EvalReport, Metrics};
use deepe_core::train::train_model;
use deepe_core::{FeatureBlockKind, Model, Scalar};
use serde_json::json;

use crate::config::{ConfigFlags, RunConfig};
use crate::{create_dir, manifest, with_precision, write_csv, CmdResult, DataSource, Failure};

pub const COMPARISON_FILE: &str = "ablation.csv";
pub const DEPTH_FILE: &str = "depth_sweep.csv";

/// Which branch of a single DeepE block stays enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Gate {
    /// Identity (0th order) branch only.
    Linear,
    /// Non-linear (1st order) branch only.
    Nonlinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    NoProject,
    NoIdentityDropout,
    Gate(Gate),
    BlockKind(FeatureBlockKind),
}

impl Variant {
    pub fn label(self) -> String {
        match self {
            Variant::Baseline => "baseline".into(),
            Variant::NoProject => "no_project".into(),
            Variant::NoIdentityDropout => "no_identity_dropout".into(),
            Variant::Gate(Gate::Linear) => "gate_linear_only".into(),
            Variant::Gate(Gate::Nonlinear) => "gate_nonlinear_only".into(),
            Variant::BlockKind(k) => format!("feature_blocks_{k}"),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: DataSource,
    #[arg(long)]
    pub out: PathBuf,
    /// Split the variants are compared on.
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Replace the project network with the identity map.
    #[arg(long)]
    pub no_project: bool,
    /// Disable dropout on the identity shortcuts.
    #[arg(long)]
    pub no_identity_dropout: bool,
    /// Keep only one branch of the (single) DeepE block.
    #[arg(long, value_enum)]
    pub gate: Option<Gate>,
    /// Compare against a model whose feature blocks are of this kind.
    #[arg(long = "swap-block-kind")]
    pub swap_block_kind: Option<FeatureBlockKind>,
    /// Comma-separated feature-network depths to sweep.
    #[arg(long, value_delimiter = ',')]
    pub depths: Vec<usize>,
    /// Block kinds for the depth sweep; defaults to the configured kind.
    #[arg(long, value_delimiter = ',')]
    pub kinds: Vec<FeatureBlockKind>,
    #[command(flatten)]
    pub config: ConfigFlags,
}

pub fn check_variant(cfg: &RunConfig, variant: Variant) -> Result<(), Failure> {
    if let Variant::Gate(_) = variant {
        if cfg.model.n_deepe_blocks != 1 || cfg.model.feature_block_kind != FeatureBlockKind::DeepE {
            return Err(Failure::Input(format!(
                "--gate needs a single DeepE feature block, the model has {} {} blocks",
                cfg.model.n_deepe_blocks, cfg.model.feature_block_kind
            )));
        }
    }
    Ok(())
}

fn build<T: Scalar>(dataset: &Dataset, cfg: &RunConfig, variant: Variant) -> Result<Model<T>, Failure> {
    let mut model_cfg = cfg.model.clone();
    if let Variant::BlockKind(k) = variant {
        model_cfg.feature_block_kind = k;
    }
    let mut model = Model::<T>::new(model_cfg, dataset.n_entities(), dataset.n_relations())?;
    match variant {
        Variant::NoProject => model.drop_project_network(),
        Variant::NoIdentityDropout => model.set_identity_dropout(0.0),
        Variant::Gate(Gate::Linear) => model.set_gates(true, false),
        Variant::Gate(Gate::Nonlinear) => model.set_gates(false, true),
        Variant::Baseline | Variant::BlockKind(_) => {}
    }
    Ok(model)
}

fn train_eval<T: Scalar>(dataset: &Dataset, cfg: &RunConfig, variant: Variant, split: Split) -> Result<EvalReport, Failure> {
    let model = build::<T>(dataset, cfg, variant)?;
    let out = train_model(model, dataset, &cfg.train)?;
    let opts = EvalOptions {
        ties: cfg.train.ties,
        ..EvalOptions::from_env()
    };
    Ok(evaluate(&out.best, dataset, split, &opts)?)
}

/// Trains the variant from scratch and evaluates its best snapshot.
pub fn train_variant(dataset: &Dataset, cfg: &RunConfig, variant: Variant, split: Split) -> Result<EvalReport, Failure> {
    check_variant(cfg, variant)?;
    with_precision!(cfg.precision, train_eval(dataset, cfg, variant, split))
}

/// Trains one model per depth with feature blocks of `kind`.
pub fn depth_sweep(
    dataset: &Dataset,
    cfg: &RunConfig,
    kind: FeatureBlockKind,
    depths: &[usize],
    split: Split,
) -> Result<Vec<(usize, EvalReport)>, Failure> {
    depths
        .iter()
        .map(|&d| {
            let mut c = cfg.clone();
            c.model.n_deepe_blocks = d;
            c.model.feature_block_kind = kind;
            let r = train_variant(dataset, &c, Variant::Baseline, split)?;
            log::info!("{kind} depth {d}: mrr {:.4}", r.overall.mrr);
            Ok((d, r))
        })
        .collect()
}

fn metric_cells(m: &Metrics) -> Vec<String> {
    vec![m.count.to_string(), fmt_sig6(m.mr), fmt_sig6(m.mrr), fmt_sig6(m.hits1), fmt_sig6(m.hits10)]
}

pub fn run(args: &AblateArgs, argv: &[String]) -> CmdResult {
    let cfg = args.config.resolve()?;
    let dataset = args.data.load()?;
    let mut variants = vec![Variant::Baseline];
    if args.no_project {
        variants.push(Variant::NoProject);
    }
    if args.no_identity_dropout {
        variants.push(Variant::NoIdentityDropout);
    }
    if let Some(g) = args.gate {
        variants.push(Variant::Gate(g));
    }
    if let Some(k) = args.swap_block_kind {
        variants.push(Variant::BlockKind(k));
    }
    for &v in &variants {
        check_variant(&cfg, v)?;
    }
    create_dir(&args.out)?;
    let mut artifacts = Vec::new();

    if variants.len() > 1 || args.depths.is_empty() {
        let mut rows = Vec::new();
        for &v in &variants {
            let r = train_variant(&dataset, &cfg, v, args.split)?;
            println!("{:<24} mrr {:.4} mr {:.2} hits@10 {:.4}", v.label(), r.overall.mrr, r.overall.mr, r.overall.hits10);
            let mut row = vec![v.label()];
            row.extend(metric_cells(&r.overall));
            row.extend(RelationCategory::ALL.iter().map(|&c| fmt_sig6(r.category_mrr(c))));
            rows.push(row);
        }
        write_csv(
            &args.out.join(COMPARISON_FILE),
            &["variant", "count", "mr", "mrr", "hits1", "hits10", "mrr_1-1", "mrr_1-N", "mrr_N-1", "mrr_N-N"],
            &rows,
        )?;
        artifacts.push(COMPARISON_FILE);
    }

    if !args.depths.is_empty() {
        if args.depths.contains(&0) {
            return Err(Failure::Input("--depths entries must be at least 1".into()));
        }
        let kinds = if args.kinds.is_empty() {
            vec![cfg.model.feature_block_kind]
        } else {
            args.kinds.clone()
        };
        let mut rows = Vec::new();
        for kind in kinds {
            for (d, r) in depth_sweep(&dataset, &cfg, kind, &args.depths, args.split)? {
                println!("{kind:<7} depth {d:>2}: mrr {:.4}", r.overall.mrr);
                let mut row = vec![kind.to_string(), d.to_string()];
                row.extend(metric_cells(&r.overall));
                rows.push(row);
            }
        }
        write_csv(&args.out.join(DEPTH_FILE), &["kind", "depth", "count", "mr", "mrr", "hits1", "hits10"], &rows)?;
        artifacts.push(DEPTH_FILE);
    }

    manifest::write(
        &args.out,
        "ablate",
        argv,
        Some(&cfg),
        Some(manifest::data_section(&args.data, &dataset)?),
        json!({
            "split": args.split,
            "variants": variants.iter().map(|v| v.label()).collect::<Vec<_>>(),
            "depths": args.depths,
            "artifacts": artifacts,
        }),
    )
}
