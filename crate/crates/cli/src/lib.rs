//! Command-line front end: `train`, `eval`, `analyze`, `gradcheck` and
//! `ablate`.
//!
//! Exit codes: 0 success, 1 check or threshold failure, 2 input error,
//! 3 corrupt artifact.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use deepe_core::data::Dataset;
use deepe_core::synthetic::rule_graph;

pub mod ablate;
pub mod analyze;
pub mod config;
pub mod evaluate;
pub mod gradcheck;
pub mod manifest;
pub mod train;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_CORRUPT: i32 = 3;

/// A command failure with its exit code class.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Failure {
    #[error("{0}")]
    Check(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Corrupt(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Check(_) => EXIT_CHECK,
            Failure::Input(_) => EXIT_INPUT,
            Failure::Corrupt(_) => EXIT_CORRUPT,
        }
    }
}

impl From<deepe_core::Error> for Failure {
    fn from(e: deepe_core::Error) -> Self {
        use deepe_core::Error as E;
        let msg = e.to_string();
        match e {
            E::CorruptCheckpoint(_) => Failure::Corrupt(msg),
            E::Io { .. } | E::Parse { .. } | E::Config(_) | E::VocabMismatch { .. } | E::Csv(_) => {
                Failure::Input(msg)
            }
            _ => Failure::Check(msg),
        }
    }
}

pub type CmdResult = Result<(), Failure>;

#[derive(Debug, Parser)]
#[command(name = "deepe", version, about = "Train and evaluate DeepE link-prediction models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write best/final checkpoints and a training log.
    Train(train::TrainArgs),
    /// Evaluate a checkpoint with filtered ranking.
    Eval(evaluate::EvalArgs),
    /// Dataset statistics, identity-dropout survival and breakdown tables.
    Analyze(analyze::AnalyzeArgs),
    /// Finite-difference check of every hand-written backward pass.
    Gradcheck(gradcheck::GradcheckArgs),
    /// Ablation runs and depth sweeps.
    Ablate(ablate::AblateArgs),
}

/// `--data` argument: a directory with `train.txt`, `valid.txt`, `test.txt`,
/// or `synthetic[:SEED]` for the built-in rule graph.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Dir(PathBuf),
    Synthetic(u64),
}

impl std::str::FromStr for DataSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "synthetic" {
            return Ok(DataSource::Synthetic(0));
        }
        if let Some(seed) = s.strip_prefix("synthetic:") {
            return seed
                .parse()
                .map(DataSource::Synthetic)
                .map_err(|e| format!("bad synthetic seed {seed:?}: {e}"));
        }
        Ok(DataSource::Dir(PathBuf::from(s)))
    }
}

impl std::fmt::Display for DataSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DataSource::Dir(p) => write!(f, "{}", p.display()),
            DataSource::Synthetic(seed) => write!(f, "synthetic:{seed}"),
        }
    }
}

/// Held-out fraction of the synthetic graph.
pub const SYNTHETIC_HELDOUT: f64 = 0.1;

impl DataSource {
    pub fn load(&self) -> Result<Dataset, Failure> {
        match self {
            DataSource::Dir(dir) => {
                for f in ["train.txt", "valid.txt", "test.txt"] {
                    let p = dir.join(f);
                    if !p.is_file() {
                        return Err(Failure::Input(format!("{}: file not found", p.display())));
                    }
                }
                Ok(Dataset::load_dir(dir)?)
            }
            DataSource::Synthetic(seed) => Ok(rule_graph(*seed, SYNTHETIC_HELDOUT)?),
        }
    }

    pub fn files(&self) -> Vec<PathBuf> {
        match self {
            DataSource::Dir(dir) => ["train.txt", "valid.txt", "test.txt"].iter().map(|f| dir.join(f)).collect(),
            DataSource::Synthetic(_) => Vec::new(),
        }
    }
}

pub(crate) fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Input(format!("{}: {e}", dir.display())))
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    std::fs::write(path, contents).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

pub(crate) fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), Failure> {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    write_file(path, out)
}

/// Runs `body` with `T` set to the configured element type.
#[macro_export]
macro_rules! with_precision {
    ($precision:expr, $f:ident ( $($arg:expr),* $(,)? )) => {
        match $precision {
            deepe_core::Precision::F32 => $f::<f32>($($arg),*),
            deepe_core::Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

pub fn dispatch(cli: Cli) -> CmdResult {
    let argv: Vec<String> = std::env::args().collect();
    match cli.command {
        Command::Train(a) => train::run(&a, &argv),
        Command::Eval(a) => evaluate::run(&a, &argv),
        Command::Analyze(a) => analyze::run(&a, &argv),
        Command::Gradcheck(a) => gradcheck::run(&a),
        Command::Ablate(a) => ablate::run(&a, &argv),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {f}");
            f.code()
        }
    }
}
