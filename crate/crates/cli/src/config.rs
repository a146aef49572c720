//! Run configuration: presets, `key=value` files and flag overrides.
//!
//! Resolution order is preset, then file, then flags; later sources win.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use clap::{Args, ValueEnum};
use deepe_core::eval::TieMode;
use deepe_core::train::{LossKind, TrainConfig};
use deepe_core::{DropoutSpec, FeatureBlockKind, ModelConfig, Precision};

use crate::Failure;

/// Every key accepted in a config file, in the order they are written back.
pub const KEYS: [&str; 22] = [
    "dim",
    "deepe_blocks",
    "resnet_blocks",
    "resnet_inner",
    "drop_input_fc",
    "drop_identity",
    "drop_resnet_fc",
    "lr",
    "l2",
    "batch_size",
    "seed",
    "max_epochs",
    "plateau_factor",
    "plateau_patience",
    "early_stop_patience",
    "label_smoothing",
    "eval_every",
    "loss",
    "feature_block_kind",
    "bn_momentum",
    "precision",
    "ties",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    #[value(name = "fb15k-237")]
    Fb15k237,
    #[value(name = "wn18rr")]
    Wn18rr,
    #[value(name = "yago3-10")]
    Yago310,
}

impl Preset {
    /// Published per-dataset hyper-parameters as `key=value` pairs.
    pub fn pairs(self) -> [(&'static str, &'static str); 8] {
        match self {
            Preset::Fb15k237 => [
                ("dim", "300"),
                ("l2", "5e-8"),
                ("deepe_blocks", "40"),
                ("resnet_blocks", "1"),
                ("resnet_inner", "2"),
                ("drop_input_fc", "0.4"),
                ("drop_identity", "0.01"),
                ("drop_resnet_fc", "0.4"),
            ],
            Preset::Wn18rr => [
                ("dim", "250"),
                ("l2", "5e-5"),
                ("deepe_blocks", "1"),
                ("resnet_blocks", "2"),
                ("resnet_inner", "3"),
                ("drop_input_fc", "0.4"),
                ("drop_identity", "0"),
                ("drop_resnet_fc", "0"),
            ],
            Preset::Yago310 => [
                ("dim", "500"),
                ("l2", "5e-8"),
                ("deepe_blocks", "2"),
                ("resnet_blocks", "1"),
                ("resnet_inner", "2"),
                ("drop_input_fc", "0.4"),
                ("drop_identity", "0"),
                ("drop_resnet_fc", "0"),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig {
                batch_size: 128,
                ..TrainConfig::default()
            },
            precision: Precision::F32,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| format!("{key}={value}: {e}"))
}

fn parse_precision(value: &str) -> Result<Precision, String> {
    match value {
        "32" | "f32" => Ok(Precision::F32),
        "64" | "f64" => Ok(Precision::F64),
        other => Err(format!("precision={other}: expected 32 or 64")),
    }
}

impl RunConfig {
    pub fn from_preset(preset: Option<Preset>) -> Self {
        let mut cfg = Self::default();
        if let Some(p) = preset {
            for (k, v) in p.pairs() {
                cfg.set(k, v).expect("preset values parse");
            }
        }
        cfg
    }

    /// Applies one key. Unknown keys and unparsable values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let value = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "dim" => m.dim = parse(key, value)?,
            "deepe_blocks" => m.n_deepe_blocks = parse(key, value)?,
            "resnet_blocks" => m.n_resnet_blocks = parse(key, value)?,
            "resnet_inner" => m.resnet_inner_layers = parse(key, value)?,
            "drop_input_fc" => {
                let p = parse(key, value)?;
                m.dropout.p_input = p;
                m.dropout.p_fc = p;
            }
            "drop_identity" => m.dropout.p_identity = parse(key, value)?,
            "drop_resnet_fc" => m.dropout.p_resnet_fc = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "l2" => t.l2 = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "seed" => {
                let s = parse(key, value)?;
                t.seed = s;
                m.seed = s;
            }
            "max_epochs" => t.max_epochs = parse(key, value)?,
            "plateau_factor" => t.plateau_factor = parse(key, value)?,
            "plateau_patience" => t.plateau_patience = parse(key, value)?,
            "early_stop_patience" => t.early_stop_patience = parse(key, value)?,
            "label_smoothing" => t.label_smoothing = parse(key, value)?,
            "eval_every" => t.eval_every = parse(key, value)?,
            "loss" => t.loss = parse::<LossKind>(key, value)?,
            "feature_block_kind" => m.feature_block_kind = parse::<FeatureBlockKind>(key, value)?,
            "bn_momentum" => m.bn_momentum = parse(key, value)?,
            "precision" => self.precision = parse_precision(value)?,
            "ties" => t.ties = parse::<TieMode>(key, value)?,
            other => return Err(format!("unknown config key {other:?}")),
        }
        Ok(())
    }

    /// Reads a `key=value` file on top of the current values. Blank lines
    /// and lines starting with `#` are skipped.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Failure::Input(format!("{}:{}: expected key=value", path.display(), i + 1))
            })?;
            self.set(k.trim(), v)
                .map_err(|e| Failure::Input(format!("{}:{}: {e}", path.display(), i + 1)))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        self.model.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        if !(0.0..=1.0).contains(&self.model.bn_momentum) {
            return Err(format!("bn_momentum={} outside [0, 1]", self.model.bn_momentum));
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        let t = &self.train;
        let d: &DropoutSpec = &m.dropout;
        Some(match key {
            "dim" => m.dim.to_string(),
            "deepe_blocks" => m.n_deepe_blocks.to_string(),
            "resnet_blocks" => m.n_resnet_blocks.to_string(),
            "resnet_inner" => m.resnet_inner_layers.to_string(),
            "drop_input_fc" => d.p_input.to_string(),
            "drop_identity" => d.p_identity.to_string(),
            "drop_resnet_fc" => d.p_resnet_fc.to_string(),
            "lr" => t.lr.to_string(),
            "l2" => t.l2.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "seed" => t.seed.to_string(),
            "max_epochs" => t.max_epochs.to_string(),
            "plateau_factor" => t.plateau_factor.to_string(),
            "plateau_patience" => t.plateau_patience.to_string(),
            "early_stop_patience" => t.early_stop_patience.to_string(),
            "label_smoothing" => t.label_smoothing.to_string(),
            "eval_every" => t.eval_every.to_string(),
            "loss" => t.loss.to_string(),
            "feature_block_kind" => m.feature_block_kind.to_string(),
            "bn_momentum" => m.bn_momentum.to_string(),
            "precision" => match self.precision {
                Precision::F32 => "32".into(),
                Precision::F64 => "64".into(),
            },
            "ties" => t.ties.to_string(),
            _ => return None,
        })
    }

    /// The resolved configuration in file syntax; parsing it back yields an
    /// equal config.
    pub fn to_file_string(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.model.seed = seed;
        c.train.seed = seed;
        c
    }
}

macro_rules! config_flags {
    ($($key:ident),* $(,)?) => {
        /// Flags overriding config keys of the same name.
        #[derive(Debug, Clone, Default, Args)]
        pub struct ConfigFlags {
            /// Start from published per-dataset hyper-parameters.
            #[arg(long, value_enum)]
            pub preset: Option<Preset>,
            /// `key=value` config file.
            #[arg(long)]
            pub config: Option<std::path::PathBuf>,
            $(
                #[arg(long = stringify!($key), value_name = "VALUE", hide_short_help = true)]
                pub $key: Option<String>,
            )*
        }

        impl ConfigFlags {
            pub fn overrides(&self) -> Vec<(&'static str, &str)> {
                let mut out = Vec::new();
                $(
                    if let Some(v) = &self.$key {
                        out.push((stringify!($key), v.as_str()));
                    }
                )*
                out
            }
        }
    };
}

config_flags!(
    dim,
    deepe_blocks,
    resnet_blocks,
    resnet_inner,
    drop_input_fc,
    drop_identity,
    drop_resnet_fc,
    lr,
    l2,
    batch_size,
    seed,
    max_epochs,
    plateau_factor,
    plateau_patience,
    early_stop_patience,
    label_smoothing,
    eval_every,
    loss,
    feature_block_kind,
    bn_momentum,
    precision,
    ties,
);

impl ConfigFlags {
    pub fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut cfg = RunConfig::from_preset(self.preset);
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        for (k, v) in self.overrides() {
            cfg.set(k, v).map_err(|e| Failure::Input(format!("--{e}")))?;
        }
        cfg.validate().map_err(Failure::Input)?;
        Ok(cfg)
    }
}
