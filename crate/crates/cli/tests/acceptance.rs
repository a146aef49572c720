//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line.
//!
//! Criteria 5 and 7 need the benchmark datasets under `DEEPE_DATA_DIR`
//! (`FB15k-237/`, `WN18RR/`, `YAGO3-10/`, each with `train.txt`, `valid.txt`,
//! `test.txt`) and are ignored by default; run them with
//! `cargo test --release -p deepe-cli --test acceptance -- --ignored`.

use std::collections::HashSet;
use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use deepe_cli::ablate::{depth_sweep, train_variant, Gate, Variant};
use deepe_cli::config::{Preset, RunConfig};
use deepe_core::checkpoint;
use deepe_core::data::{Dataset, RelationCategory, Split, Triple, Vocab};
use deepe_core::eval::{evaluate, evaluate_with, rank_queries, EvalOptions, ModelScorer, Scorer, TieMode};
use deepe_core::gradcheck::{run_gradcheck, GradcheckOptions};
use deepe_core::layers::{identity_dropout_total_drop_prob, Activation};
use deepe_core::synthetic::rule_graph;
use deepe_core::train::train_loop;
use deepe_core::{DropoutSpec, FeatureBlockKind, Matrix, Mode, Model, ModelConfig, Precision, Rng};

const DATA_ENV: &str = "DEEPE_DATA_DIR";

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    println!("criterion {id}: {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
}

fn deepe() -> Command {
    Command::new(env!("CARGO_BIN_EXE_deepe"))
}

fn data_dir(name: &str) -> PathBuf {
    let root = std::env::var(DATA_ENV)
        .unwrap_or_else(|_| panic!("{DATA_ENV} is not set; point it at the benchmark datasets"));
    PathBuf::from(root).join(name)
}

/// Small memorisation config shared by the toy-graph criteria.
fn toy_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("dim", "32"),
        ("deepe_blocks", "1"),
        ("resnet_blocks", "1"),
        ("resnet_inner", "2"),
        ("drop_input_fc", "0"),
        ("drop_identity", "0"),
        ("drop_resnet_fc", "0"),
        ("batch_size", "64"),
        ("max_epochs", "100"),
        ("eval_every", "5"),
        ("precision", "32"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

#[test]
fn criterion_01_gradient_exactness() {
    let start = Instant::now();
    let out = deepe().args(["gradcheck", "--precision", "64"]).output().unwrap();
    let elapsed = start.elapsed();
    let report = run_gradcheck(&GradcheckOptions::default()).unwrap();
    let cfg = deepe_core::gradcheck::gradcheck_model_config(0);
    let shape_ok = cfg.dim == 8 && cfg.n_deepe_blocks == 2 && cfg.n_resnet_blocks == 1;
    let worst = report.max_rel_error();
    let pass = out.status.code() == Some(0) && worst < 1e-5 && shape_ok && elapsed < Duration::from_secs(60);
    verdict(
        1,
        "gradient exactness",
        pass,
        &format!("max rel err {worst:.2e} over {} groups, cli exit {:?}, {elapsed:.1?}", report.groups.len(), out.status.code()),
    );
    assert!(pass, "{}", String::from_utf8_lossy(&out.stdout));
}

fn random_graph(rng: &mut Rng) -> Dataset {
    let ne = 3 + rng.below(28);
    let nr = 1 + rng.below(4);
    let target = (3 + rng.below(ne * 3)).min(ne * ne * nr);
    let mut seen = HashSet::new();
    let mut all = Vec::new();
    while all.len() < target {
        let t = Triple::new(rng.below(ne), rng.below(nr), rng.below(ne));
        if seen.insert(t) {
            all.push(t);
        }
    }
    let k = (all.len() / 4).max(1);
    let test = all.split_off(all.len() - k);
    let valid = all.split_off(all.len() - k.min(all.len() / 2));
    Dataset::from_splits(
        Vocab::from_names((0..ne).map(|i| format!("e{i}"))),
        Vocab::from_names((0..nr).map(|i| format!("r{i}"))),
        all,
        valid,
        test,
    )
    .unwrap()
}

/// Model scores rounded to one decimal so ties are common.
struct Coarse<'a>(ModelScorer<'a, f64>);

impl Scorer for Coarse<'_> {
    type Elem = f64;
    fn n_entities(&self) -> usize {
        self.0.n_entities()
    }
    fn score(&self, heads: &[usize], relations: &[usize]) -> deepe_core::Result<Matrix<f64>> {
        Ok(self.0.score(heads, relations)?.map(|s| (s * 10.0).round() / 10.0))
    }
}

/// Sort-based filtered ranks in query order `(tail, head)` per triple.
fn oracle_ranks<S: Scorer<Elem = f64>>(scorer: &S, ds: &Dataset, split: &[Triple], ties: TieMode) -> Vec<f64> {
    let nr = ds.n_relations();
    let known: HashSet<(usize, usize, usize)> = ds
        .train
        .iter()
        .chain(&ds.valid)
        .chain(&ds.test)
        .flat_map(|t| [(t.head, t.relation, t.tail), (t.tail, t.relation + nr, t.head)])
        .collect();
    let mut out = Vec::new();
    for t in split {
        for (h, r, gold) in [(t.head, t.relation, t.tail), (t.tail, t.relation + nr, t.head)] {
            let scores = scorer.score(&[h], &[r]).unwrap();
            let mut cands: Vec<f64> = (0..ds.n_entities())
                .filter(|&e| e == gold || !known.contains(&(h, r, e)))
                .map(|e| scores.get(0, e))
                .collect();
            cands.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let g = scores.get(0, gold);
            let first = cands.iter().position(|&s| s == g).unwrap() as f64 + 1.0;
            let last = cands.iter().rposition(|&s| s == g).unwrap() as f64 + 1.0;
            out.push(match ties {
                TieMode::Average => (first + last) / 2.0,
                TieMode::Pessimistic => last,
                TieMode::Optimistic => first,
            });
        }
    }
    out
}

#[test]
fn criterion_02_ranking_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = Rng::new(2024);
    let mut worst: f64 = 0.0;
    let mut queries = 0usize;
    let mut tied = 0usize;
    for g in 0..200u64 {
        let ds = random_graph(&mut rng);
        let cfg = ModelConfig {
            dim: 4,
            n_deepe_blocks: 2,
            n_resnet_blocks: 1,
            dropout: DropoutSpec::NONE,
            seed: g,
            ..ModelConfig::default()
        };
        let mut model = Model::<f64>::new(cfg, ds.n_entities(), ds.n_relations()).unwrap();
        model.set_mode(Mode::Eval);
        let exact = ModelScorer::new(&model).unwrap();
        let coarse = Coarse(ModelScorer::new(&model).unwrap());
        for ties in [TieMode::Average, TieMode::Pessimistic, TieMode::Optimistic] {
            let opts = EvalOptions {
                ties,
                batch_size: 1 + (g as usize % 7),
                workers: None,
            };
            for (ranks, oracle) in [
                (rank_queries(&exact, &ds, &ds.test, &opts).unwrap(), oracle_ranks(&exact, &ds, &ds.test, ties)),
                (rank_queries(&coarse, &ds, &ds.test, &opts).unwrap(), oracle_ranks(&coarse, &ds, &ds.test, ties)),
            ] {
                assert_eq!(ranks.len(), oracle.len());
                for (r, o) in ranks.iter().zip(&oracle) {
                    worst = worst.max((r.filtered_rank - o).abs());
                    tied += usize::from(r.filtered_rank.fract() != 0.0);
                }
                queries += oracle.len();
            }
            let report = evaluate_with(&coarse, &ds, Split::Test, &opts).unwrap();
            let oracle = oracle_ranks(&coarse, &ds, &ds.test, ties);
            let n = oracle.len() as f64;
            let mr = oracle.iter().sum::<f64>() / n;
            let mrr = oracle.iter().map(|r| 1.0 / r).sum::<f64>() / n;
            let h10 = oracle.iter().filter(|&&r| r <= 10.0).count() as f64 / n;
            worst = worst.max((report.overall.mr - mr).abs());
            worst = worst.max((report.overall.mrr - mrr).abs());
            worst = worst.max((report.overall.hits10 - h10).abs());
            let direct = evaluate(&model, &ds, Split::Test, &opts).unwrap();
            let exact_oracle = oracle_ranks(&exact, &ds, &ds.test, ties);
            let mrr = exact_oracle.iter().map(|r| 1.0 / r).sum::<f64>() / n;
            worst = worst.max((direct.overall.mrr - mrr).abs());
        }
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-12 && tied > 0 && elapsed < Duration::from_secs(60);
    verdict(
        2,
        "ranking oracle equivalence",
        pass,
        &format!("200 graphs, {queries} queries ({tied} with tie-averaged ranks), max diff {worst:.1e}, {elapsed:.1?}"),
    );
    assert!(pass);
}

/// `max |f(x+a+b) - f(x+a) - f(x+b) + f(x)|` and the scaling residual over
/// increments of the whole `h‖r` input.
fn superposition(model: &mut Model<f64>, rng: &mut Rng) -> f64 {
    let d = model.dim();
    let vec = |rng: &mut Rng| -> Vec<f64> { (0..d).map(|_| rng.normal()).collect() };
    let (xh, xr, ah, ar, bh, br) = (vec(rng), vec(rng), vec(rng), vec(rng), vec(rng), vec(rng));
    let lambda = -1.75;
    let comb = |x: &[f64], a: &[f64], b: &[f64], ca: f64, cb: f64| -> Vec<f64> {
        x.iter().zip(a).zip(b).map(|((x, a), b)| x + ca * a + cb * b).collect()
    };
    let coeffs = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (lambda, 0.0)];
    for (i, &(ca, cb)) in coeffs.iter().enumerate() {
        model.entity_emb.value.row_mut(i).copy_from_slice(&comb(&xh, &ah, &bh, ca, cb));
        model.relation_emb.value.row_mut(i).copy_from_slice(&comb(&xr, &ar, &br, ca, cb));
    }
    let v = model.infer_features(&[0, 1, 2, 3, 4], &[0, 1, 2, 3, 4]).unwrap();
    let mut worst: f64 = 0.0;
    for k in 0..d {
        let f = |i| v.get(i, k);
        let scale = f(0).abs().max(1.0);
        worst = worst.max((f(3) - f(1) - f(2) + f(0)).abs() / scale);
        worst = worst.max((f(4) - f(0) - lambda * (f(1) - f(0))).abs() / scale);
    }
    worst
}

fn perturbed_five_block_model(seed: u64) -> Model<f64> {
    let cfg = ModelConfig {
        dim: 6,
        n_deepe_blocks: 5,
        n_resnet_blocks: 1,
        dropout: DropoutSpec::NONE,
        seed,
        ..ModelConfig::default()
    };
    let mut m = Model::<f64>::new(cfg, 5, 3).unwrap();
    let mut rng = Rng::new(seed + 100);
    m.visit_tensors_mut(&mut |name, t| {
        if name.contains("bn") || name.contains("input_bn") {
            let noise: Matrix<f64> = rng.normal_matrix(t.rows(), t.cols(), 0.3);
            *t = if name.ends_with("running_var") || name.ends_with("gamma") {
                noise.map(|v| 1.0 + v.abs())
            } else {
                noise
            };
        }
    });
    m.set_mode(Mode::Eval);
    m
}

#[test]
fn criterion_03_linear_collapse() {
    let mut rng = Rng::new(3);
    let mut linear_worst: f64 = 0.0;
    let mut relu_min = f64::INFINITY;
    for seed in 0..20 {
        let mut m = perturbed_five_block_model(seed);
        let relu = superposition(&mut m, &mut rng);
        relu_min = relu_min.min(relu);
        m.set_activation(Activation::Identity);
        linear_worst = linear_worst.max(superposition(&mut m, &mut rng));
    }
    let pass = linear_worst < 1e-8 && relu_min > 1e-6;
    verdict(
        3,
        "linear collapse",
        pass,
        &format!("identity activation residual {linear_worst:.1e}; relu residual at least {relu_min:.1e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_04_identity_dropout_arithmetic() {
    let want = ["0.331", "0.260", "0.182", "0.096"];
    let got: Vec<String> = [0, 10, 20, 30]
        .iter()
        .map(|&o| format!("{:.3}", identity_dropout_total_drop_prob(40, 0.01, o).unwrap()))
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let status = deepe()
        .args(["analyze", "--preset", "fb15k-237", "--out"])
        .arg(dir.path())
        .output()
        .unwrap()
        .status;
    let csv = std::fs::read_to_string(dir.path().join("identity_dropout.csv")).unwrap();
    let cli: Vec<String> = csv.lines().skip(1).map(|l| l.split(',').nth(3).unwrap().to_string()).collect();
    let pass = got == want && cli == want && status.success();
    verdict(4, "identity-dropout arithmetic", pass, &format!("library {got:?}, cli {cli:?}"));
    assert!(pass);
}

#[test]
#[ignore = "needs the benchmark datasets under DEEPE_DATA_DIR"]
fn criterion_05_dataset_fidelity() {
    let start = Instant::now();
    let published = [
        ("FB15k-237", [14541, 237, 272115, 17535, 20446]),
        ("WN18RR", [40943, 11, 86835, 3034, 3134]),
        ("YAGO3-10", [123182, 37, 1079040, 5000, 5000]),
    ];
    let mut pass = true;
    let mut details = Vec::new();
    for (name, want) in published {
        let ds = Dataset::load_dir(data_dir(name)).unwrap();
        let s = ds.stats();
        let got = [s.entities, s.relations, s.train, s.valid, s.test];
        pass &= got == want;
        details.push(format!("{name} {got:?}"));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(60);
    verdict(5, "dataset fidelity", pass, &format!("{} in {elapsed:.1?}", details.join("; ")));
    assert!(pass);
}

/// Published FB15k-237 settings scaled to d=64 and four DeepE blocks.
fn overfit_config() -> RunConfig {
    let mut cfg = RunConfig::from_preset(Some(Preset::Fb15k237));
    for (k, v) in [
        ("dim", "64"),
        ("deepe_blocks", "4"),
        ("max_epochs", "300"),
        ("batch_size", "32"),
        ("loss", "bce"),
        ("eval_every", "10"),
        ("precision", "32"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

#[test]
fn criterion_06_overfit_sanity() {
    let start = Instant::now();
    let ds = rule_graph(0, 0.1).unwrap();
    assert_eq!((ds.n_entities(), ds.n_relations(), ds.train.len()), (50, 5, 500));
    let cfg = overfit_config();
    let out = train_loop::<f32>(&ds, &cfg.model, &cfg.train).unwrap();
    let report = evaluate(&out.best, &ds, Split::Train, &EvalOptions::default()).unwrap();
    let elapsed = start.elapsed();
    let pass = report.overall.mrr >= 0.95 && out.log.len() <= 300 && elapsed < Duration::from_secs(600);
    verdict(
        6,
        "overfit sanity",
        pass,
        &format!(
            "train filtered mrr {:.4} (need >= 0.95), best epoch {} of {}, {elapsed:.1?}",
            report.overall.mrr,
            out.best_epoch,
            out.log.len()
        ),
    );
    assert!(pass);
}

#[test]
#[ignore = "hours of CPU; needs WN18RR under DEEPE_DATA_DIR"]
fn criterion_07_wn18rr_proxy() {
    let ds = Dataset::load_dir(data_dir("WN18RR")).unwrap();
    let cfg = RunConfig::from_preset(Some(Preset::Wn18rr));
    let out = train_loop::<f32>(&ds, &cfg.model, &cfg.train).unwrap();
    let report = evaluate(&out.best, &ds, Split::Test, &EvalOptions::default()).unwrap();
    let pass = report.overall.mrr >= 0.44;
    verdict(
        7,
        "WN18RR proxy",
        pass,
        &format!("test filtered mrr {:.4} (need >= 0.44), mr {:.0}", report.overall.mrr, report.overall.mr),
    );
    assert!(pass);
}

#[test]
fn criterion_08_ablation_direction() {
    let start = Instant::now();
    let ds = rule_graph(0, 0.1).unwrap();
    let cfg = toy_config();
    let both = train_variant(&ds, &cfg, Variant::Baseline, Split::Train).unwrap();
    let linear = train_variant(&ds, &cfg, Variant::Gate(Gate::Linear), Split::Train).unwrap();
    let (b, l) = (
        both.category_mrr(RelationCategory::OneToMany),
        linear.category_mrr(RelationCategory::OneToMany),
    );
    let elapsed = start.elapsed();
    let pass = b > l && elapsed < Duration::from_secs(900);
    verdict(
        8,
        "ablation direction",
        pass,
        &format!("1-N mrr: 0th+1th {b:.4} vs 0th only {l:.4}, {elapsed:.1?}"),
    );
    assert!(pass);
}

#[test]
fn criterion_09_depth_robustness() {
    let start = Instant::now();
    let ds = rule_graph(0, 0.1).unwrap();
    let cfg = toy_config();
    let depths: Vec<usize> = (1..=8).collect();
    let mrr = |kind| -> Vec<f64> {
        depth_sweep(&ds, &cfg, kind, &depths, Split::Train)
            .unwrap()
            .iter()
            .map(|(_, r)| r.overall.mrr)
            .collect()
    };
    let deepe = mrr(FeatureBlockKind::DeepE);
    let resnet = mrr(FeatureBlockKind::ResNet);
    let floor = 0.9 * deepe[0];
    let pass = deepe.iter().all(|&m| m >= floor) && start.elapsed() < Duration::from_secs(1800);
    let fmt = |v: &[f64]| v.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>().join(" ");
    verdict(
        9,
        "depth robustness",
        pass,
        &format!("deepe [{}] floor {floor:.3}; resnet [{}]", fmt(&deepe), fmt(&resnet)),
    );
    assert!(pass);
}

#[test]
fn criterion_10_checkpoint_round_trip() {
    let ds = rule_graph(10, 0.1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config();
    cfg.set("max_epochs", "5").unwrap();
    let mut identical = true;
    for precision in [Precision::F32, Precision::F64] {
        let path = dir.path().join(format!("{precision}.ckpt"));
        let (before, after) = match precision {
            Precision::F32 => {
                let out = train_loop::<f32>(&ds, &cfg.model, &cfg.train).unwrap();
                checkpoint::save(&out.best, &ds, &path).unwrap();
                let loaded = checkpoint::load_for::<f32>(&path, &ds).unwrap();
                let opts = EvalOptions::default();
                (evaluate(&out.best, &ds, Split::Valid, &opts).unwrap(), evaluate(&loaded, &ds, Split::Valid, &opts).unwrap())
            }
            Precision::F64 => {
                let out = train_loop::<f64>(&ds, &cfg.model, &cfg.train).unwrap();
                checkpoint::save(&out.best, &ds, &path).unwrap();
                let loaded = checkpoint::load_for::<f64>(&path, &ds).unwrap();
                let opts = EvalOptions::default();
                (evaluate(&out.best, &ds, Split::Valid, &opts).unwrap(), evaluate(&loaded, &ds, Split::Valid, &opts).unwrap())
            }
        };
        identical &= before == after;
    }

    let run = dir.path().join("run");
    let train = deepe()
        .args(["train", "--data", "synthetic:10", "--max_epochs", "3", "--dim", "8", "--out"])
        .arg(&run)
        .status()
        .unwrap();
    let eval = |out: &str| {
        deepe()
            .args(["eval", "--data", "synthetic:10", "--split", "valid", "--checkpoint"])
            .arg(run.join("best.ckpt"))
            .arg("--out")
            .arg(dir.path().join(out))
            .status()
            .unwrap()
    };
    let (e1, e2) = (eval("a"), eval("b"));
    let files_equal = ["overall.csv", "by_category.csv", "by_degree.csv"].iter().all(|f| {
        std::fs::read(dir.path().join("a").join(f)).unwrap() == std::fs::read(dir.path().join("b").join(f)).unwrap()
    });
    let pass = identical && train.success() && e1.success() && e2.success() && files_equal;
    verdict(
        10,
        "checkpoint round-trip",
        pass,
        &format!("in-memory reports identical: {identical}; cli reports byte-identical: {files_equal}"),
    );
    assert!(pass);
}
