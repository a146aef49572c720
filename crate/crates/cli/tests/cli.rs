use std::path::Path;
use std::process::{Command, Output};

fn deepe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deepe")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const QUICK: [&str; 8] = ["--dim", "8", "--max_epochs", "2", "--batch_size", "64", "--eval_every", "1"];

fn train(data: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", data, "--out", p(out)];
    args.extend(QUICK);
    args.extend(extra);
    deepe(&args)
}

#[test]
fn missing_train_file_is_an_input_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(p(dir.path()), &dir.path().join("out"), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains(p(&dir.path().join("train.txt"))), "{}", stderr(&out));
}

#[test]
fn train_writes_checkpoints_log_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = train("synthetic", dir.path(), &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["best.ckpt", "final.ckpt", "train_log.csv", "manifest.json", "summary.csv"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["model_config"]["dim"], 8);
    assert!(manifest["data"]["entity_vocab_hash"].is_string());
}

#[test]
fn runs_flag_writes_one_summary_row_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = train("synthetic", dir.path(), &["--runs", "2", "--seed", "5"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let seeds: Vec<&str> = summary.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(seeds, ["5", "6"]);
    assert!(dir.path().join("run-5/best.ckpt").is_file());
    assert!(dir.path().join("run-6/manifest.json").is_file());
    let stats = std::fs::read_to_string(dir.path().join("summary_stats.csv")).unwrap();
    assert!(stats.starts_with("metric,runs,mean,std\n"));
    assert!(stats.contains("test_mrr,2,"));
}

#[test]
fn manifest_config_reproduces_a_64_bit_run_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    assert!(train("synthetic", &a, &["--precision", "64", "--seed", "3"]).status.success());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    let cfg_path = dir.path().join("replay.cfg");
    std::fs::write(&cfg_path, manifest["config"].as_str().unwrap()).unwrap();
    let b = dir.path().join("b");
    let out = deepe(&["train", "--data", "synthetic", "--config", p(&cfg_path), "--out", p(&b)]);
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["best.ckpt", "final.ckpt", "train_log.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn config_file_rejects_unknown_keys_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "dim=8\nwidth=3\n").unwrap();
    let out = deepe(&["train", "--data", "synthetic", "--config", p(&bad), "--out", p(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("bad.cfg:2"), "{}", stderr(&out));

    let good = dir.path().join("good.cfg");
    std::fs::write(&good, "# toy\ndim = 6\nmax_epochs=1\nbatch_size=64\n").unwrap();
    let run = dir.path().join("run");
    let out = deepe(&["train", "--data", "synthetic", "--config", p(&good), "--dim", "10", "--out", p(&run)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["model_config"]["dim"], 10);
    assert_eq!(manifest["train_config"]["max_epochs"], 1);
}

#[test]
fn eval_writes_reports_and_rejects_foreign_vocabularies() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(train("synthetic", &run, &[]).status.success());
    let ckpt = run.join("best.ckpt");
    let rep = dir.path().join("rep");
    let out = deepe(&["eval", "--data", "synthetic", "--checkpoint", p(&ckpt), "--out", p(&rep)]);
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["overall.csv", "by_category.csv", "by_degree.csv", "manifest.json"] {
        assert!(rep.join(f).is_file(), "{f}");
    }

    let other = dir.path().join("other");
    std::fs::create_dir(&other).unwrap();
    for split in ["train", "valid", "test"] {
        std::fs::write(other.join(format!("{split}.txt")), "a\tr\tb\nb\tr\tc\n").unwrap();
    }
    let out = deepe(&["eval", "--data", p(&other), "--checkpoint", p(&ckpt)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("hash"), "{}", stderr(&out));
}

#[test]
fn corrupted_checkpoint_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(train("synthetic", &run, &[]).status.success());
    let ckpt = run.join("best.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&ckpt, bytes).unwrap();
    let out = deepe(&["eval", "--data", "synthetic", "--checkpoint", p(&ckpt)]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn gradcheck_detects_a_perturbed_backward_pass() {
    assert_eq!(deepe(&["gradcheck"]).status.code(), Some(0));
    assert_eq!(deepe(&["gradcheck", "--perturb-backward"]).status.code(), Some(1));
    let f32_run = deepe(&["gradcheck", "--precision", "32"]);
    assert!(stderr(&f32_run).contains("warning"));
    assert!(String::from_utf8_lossy(&f32_run.stdout).contains("tolerance 1e-2"));
}

#[test]
fn analyze_writes_stats_and_breakdowns() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert!(train("synthetic", &run, &[]).status.success());
    let out_dir = dir.path().join("an");
    let out = deepe(&[
        "analyze",
        "--data",
        "synthetic",
        "--checkpoint",
        p(&run.join("best.ckpt")),
        "--out",
        p(&out_dir),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let stats = std::fs::read_to_string(out_dir.join("stats.csv")).unwrap();
    assert_eq!(stats, "statistic,synthetic\nentities,50\nrelations,5\ntrain,500\nvalid,50\ntest,50\n");
    assert!(out_dir.join("by_category.csv").is_file());
    assert!(out_dir.join("by_degree.csv").is_file());
    let check = deepe(&["analyze", "--data", "synthetic", "--check-reference", "--out", p(&out_dir)]);
    assert_eq!(check.status.code(), Some(2));
}

#[test]
fn gate_ablation_is_limited_to_single_block_models() {
    let dir = tempfile::tempdir().unwrap();
    let out = deepe(&[
        "ablate", "--data", "synthetic", "--gate", "linear", "--deepe_blocks", "3", "--out", p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("single DeepE"));
}

#[test]
fn ablation_and_depth_sweep_emit_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["ablate", "--data", "synthetic", "--no-project", "--gate", "linear", "--out", p(dir.path())];
    args.extend(QUICK);
    let out = deepe(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    let table = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    let variants: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(variants, ["baseline", "no_project", "gate_linear_only"]);

    let sweep = dir.path().join("sweep");
    let mut args = vec![
        "ablate", "--data", "synthetic", "--depths", "1,2,3,4,5,6,7,8", "--feature_block_kind", "resnet", "--out", p(&sweep),
    ];
    args.extend(["--dim", "8", "--max_epochs", "1", "--batch_size", "128"]);
    let out = deepe(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(sweep.join("depth_sweep.csv")).unwrap();
    let depths: Vec<String> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            assert_eq!(f[0], "resnet");
            f[1].to_string()
        })
        .collect();
    assert_eq!(depths, ["1", "2", "3", "4", "5", "6", "7", "8"]);
}
