//! Single-file model archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "DEEPECKP"
//! version      u32
//! header_len   u64
//! header       JSON (see CheckpointHeader)
//! payload      tensors back to back, row-major, element width from `precision`
//! digest       32 bytes SHA-256 of everything above
//! ```
//!
//! Tensor names are the dotted paths produced by `Model::visit_tensors`,
//! for example `entity_emb`, `feature.0.fc1.weight`, `project.1.inner0.bn.running_var`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numkernel::{Matrix, Precision, Scalar};

pub const MAGIC: &[u8; 8] = b"DEEPECKP";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub precision: Precision,
    pub n_entities: usize,
    pub n_relations: usize,
    pub entity_vocab_hash: String,
    pub relation_vocab_hash: String,
    pub gate_linear: bool,
    pub gate_nonlinear: bool,
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointHeader {
    /// Errors unless the vocabularies match `dataset`.
    pub fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        for (what, ours, theirs) in [
            ("entity", &self.entity_vocab_hash, dataset.entities.hash()),
            ("relation", &self.relation_vocab_hash, dataset.relations.hash()),
        ] {
            if *ours != theirs {
                return Err(Error::VocabMismatch {
                    what,
                    checkpoint: ours.clone(),
                    dataset: theirs,
                });
            }
        }
        Ok(())
    }
}

/// Serializes `model` with the vocab hashes of the dataset it was trained on.
pub fn to_bytes<T: Scalar>(model: &Model<T>, dataset: &Dataset) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    model.visit_tensors(&mut |name, m| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            rows: m.rows(),
            cols: m.cols(),
            offset: payload.len(),
        });
        for &x in m.data() {
            x.write_le(&mut payload);
        }
    });
    let (gate_linear, gate_nonlinear) = model.gates();
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        model_config: model.config().clone(),
        precision: T::PRECISION,
        n_entities: model.n_entities(),
        n_relations: model.n_relations(),
        entity_vocab_hash: dataset.entities.hash(),
        relation_vocab_hash: dataset.relations.hash(),
        gate_linear,
        gate_nonlinear,
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Config(format!("checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(8 + 4 + 8 + json.len() + payload.len() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn save<T: Scalar>(model: &Model<T>, dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(model, dataset)?;
    // write-then-rename so a crash never leaves a half-written archive
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

/// Validates framing and digest; returns the header and the payload slice.
fn parse(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 20 + DIGEST_LEN || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint (bad magic or truncated)"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("digest mismatch"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| corrupt("header length exceeds file"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&body[20..header_end]).map_err(|e| corrupt(format!("header: {e}")))?;
    Ok((header, &body[header_end..]))
}

pub fn read_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(parse(&bytes)?.0)
}

fn decode<T: Scalar>(chunk: &[u8], precision: Precision) -> T {
    match precision {
        Precision::F32 => T::of(f32::read_le(chunk) as f64),
        Precision::F64 => T::of(f64::read_le(chunk)),
    }
}

/// Rebuilds a model from archive bytes, converting precision if needed.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(Model<T>, CheckpointHeader)> {
    let (header, payload) = parse(bytes)?;
    let width = match header.precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    let mut model = Model::<T>::new(header.model_config.clone(), header.n_entities, header.n_relations)
        .map_err(|e| corrupt(format!("stored config rejected: {e}")))?;
    model.set_gates(header.gate_linear, header.gate_nonlinear);

    let mut expected = Vec::new();
    model.visit_tensors(&mut |name, m| expected.push((name.to_string(), m.rows(), m.cols())));
    if expected.len() != header.tensors.len() {
        return Err(corrupt(format!(
            "{} tensors stored, architecture needs {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    let mut loaded: Vec<Matrix<T>> = Vec::with_capacity(expected.len());
    for ((name, rows, cols), entry) in expected.iter().zip(&header.tensors) {
        if *name != entry.name || (*rows, *cols) != (entry.rows, entry.cols) {
            return Err(corrupt(format!(
                "tensor {} is {}x{}, expected {name} {rows}x{cols}",
                entry.name, entry.rows, entry.cols
            )));
        }
        let len = rows * cols * width;
        let bytes = entry
            .offset
            .checked_add(len)
            .and_then(|end| payload.get(entry.offset..end))
            .ok_or_else(|| corrupt(format!("tensor {name} runs past the payload")))?;
        let data = bytes.chunks_exact(width).map(|c| decode(c, header.precision)).collect();
        loaded.push(Matrix::from_vec(*rows, *cols, data)?);
    }
    let mut it = loaded.into_iter();
    model.visit_tensors_mut(&mut |_, m| *m = it.next().expect("counted above"));
    model.set_mode(crate::layers::Mode::Eval);
    Ok((model, header))
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<(Model<T>, CheckpointHeader)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Loads and checks the archive against `dataset`'s vocabularies.
pub fn load_for<T: Scalar>(path: impl AsRef<Path>, dataset: &Dataset) -> Result<Model<T>> {
    let (model, header) = load(path)?;
    header.check_dataset(dataset)?;
    Ok(model)
}
