//! `manifest.json`: everything needed to rerun a command.

use std::path::Path;

use deepe_core::checkpoint::FORMAT_VERSION;
use deepe_core::data::Dataset;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::{write_file, DataSource, Failure};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct DataFile {
    pub path: String,
    pub sha256: String,
}

pub fn file_sha256(path: &Path) -> Result<String, Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn data_section(source: &DataSource, dataset: &Dataset) -> Result<Value, Failure> {
    let files = source
        .files()
        .iter()
        .map(|p| {
            Ok(DataFile {
                path: p.display().to_string(),
                sha256: file_sha256(p)?,
            })
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    Ok(json!({
        "source": source.to_string(),
        "files": files,
        "entity_vocab_hash": dataset.entities.hash(),
        "relation_vocab_hash": dataset.relations.hash(),
        "stats": dataset.stats(),
    }))
}

/// Writes `dir/manifest.json`. `extra` is merged in at the top level.
pub fn write(
    dir: &Path,
    command: &str,
    argv: &[String],
    config: Option<&RunConfig>,
    data: Option<Value>,
    extra: Value,
) -> Result<(), Failure> {
    let mut m = json!({
        "tool": "deepe",
        "version": env!("CARGO_PKG_VERSION"),
        "checkpoint_format_version": FORMAT_VERSION,
        "command": command,
        "argv": argv,
    });
    if let Some(cfg) = config {
        m["config"] = json!(cfg.to_file_string());
        m["model_config"] = json!(cfg.model);
        m["train_config"] = json!(cfg.train);
        m["precision"] = json!(cfg.precision);
        m["seeds"] = json!({ "model": cfg.model.seed, "train": cfg.train.seed });
    }
    if let Some(d) = data {
        m["data"] = d;
    }
    if let (Value::Object(target), Value::Object(src)) = (&mut m, extra) {
        target.extend(src);
    }
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
    write_file(&dir.join(FILE_NAME), text + "\n")
}
