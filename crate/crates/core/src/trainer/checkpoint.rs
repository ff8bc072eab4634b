//! Checkpoint directories: a JSON manifest plus one little-endian `f32` file
//! per parameter (and per optimizer moment when present).

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::model::{ModelConfig, ModelError, ModelState};

use super::{OptimizerState, TrainConfig};

pub const MANIFEST: &str = "manifest.json";
const FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: invalid manifest: {source}")]
    Manifest { path: PathBuf, source: serde_json::Error },
    #[error("{path}: unsupported checkpoint format {found}")]
    Format { path: PathBuf, found: u32 },
    #[error("{path}: corrupt checkpoint: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("parameter {name}: checkpoint has shape {found:?}, model config expects {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Trained state plus the metadata needed to resume or evaluate it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelState<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
    pub train_config: Option<TrainConfig>,
    /// Category names in label-index order.
    pub labels: Vec<String>,
    pub epoch: usize,
    pub validation_f1: Option<f64>,
    /// Content hash of the vocabulary the model was trained with.
    pub vocab_sha256: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct OptimizerEntry {
    step: u64,
    m: Vec<TensorEntry>,
    v: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: u32,
    model_config: ModelConfig,
    train_config: Option<TrainConfig>,
    labels: Vec<String>,
    epoch: usize,
    validation_f1: Option<f64>,
    vocab_sha256: Option<String>,
    params: Vec<TensorEntry>,
    optimizer: Option<OptimizerEntry>,
}

fn encode(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_tensors(
    dir: &Path,
    prefix: &str,
    suffix: &str,
    tensors: &BTreeMap<String, Tensor<f32>>,
) -> Result<Vec<TensorEntry>, CheckpointError> {
    tensors
        .iter()
        .map(|(name, t)| {
            let file = format!("{prefix}{name}{suffix}.f32");
            let bytes = encode(t);
            let path = dir.join(&file);
            fs::write(&path, &bytes).map_err(io_err(&path))?;
            Ok(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                file,
                sha256: sha256_hex(&bytes),
            })
        })
        .collect()
}

/// Writes `checkpoint` to `dir`, replacing any previous checkpoint there. The
/// directory is assembled under a temporary name and renamed into place.
pub fn save_checkpoint(checkpoint: &Checkpoint, dir: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let dir = dir.as_ref();
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint");
    let staging = dir.with_file_name(format!(".{name}.partial"));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(io_err(&staging))?;
    }
    fs::create_dir_all(&staging).map_err(io_err(&staging))?;
    let params = write_tensors(&staging, "", "", checkpoint.model.params())?;
    let optimizer = match &checkpoint.optimizer {
        Some(o) => Some(OptimizerEntry {
            step: o.step,
            m: write_tensors(&staging, "optim.", ".m", &o.m)?,
            v: write_tensors(&staging, "optim.", ".v", &o.v)?,
        }),
        None => None,
    };
    let manifest = Manifest {
        format: FORMAT,
        model_config: checkpoint.model.config().clone(),
        train_config: checkpoint.train_config.clone(),
        labels: checkpoint.labels.clone(),
        epoch: checkpoint.epoch,
        validation_f1: checkpoint.validation_f1,
        vocab_sha256: checkpoint.vocab_sha256.clone(),
        params,
        optimizer,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    let path = staging.join(MANIFEST);
    fs::write(&path, json).map_err(io_err(&path))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::rename(&staging, dir).map_err(io_err(dir))
}

fn read_tensor(dir: &Path, entry: &TensorEntry) -> Result<Tensor<f32>, CheckpointError> {
    let path = dir.join(&entry.file);
    let corrupt = |reason: String| CheckpointError::Corrupt {
        path: path.clone(),
        reason,
    };
    if entry.file.contains(['/', '\\']) || entry.file.starts_with("..") {
        return Err(corrupt("file name escapes the checkpoint directory".into()));
    }
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let numel: usize = entry.shape.iter().product();
    if bytes.len() != numel * 4 {
        return Err(corrupt(format!(
            "{} holds {} bytes, shape {:?} needs {}",
            entry.name,
            bytes.len(),
            entry.shape,
            numel * 4
        )));
    }
    if sha256_hex(&bytes) != entry.sha256 {
        return Err(corrupt(format!("{} does not match its recorded sha256", entry.name)));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(entry.shape.clone(), data).map_err(|e| corrupt(e.to_string()))
}

fn read_all(dir: &Path, entries: &[TensorEntry]) -> Result<BTreeMap<String, Tensor<f32>>, CheckpointError> {
    entries
        .iter()
        .map(|e| Ok((e.name.clone(), read_tensor(dir, e)?)))
        .collect()
}

fn read_manifest(dir: &Path) -> Result<Manifest, CheckpointError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| CheckpointError::Manifest {
        path: path.clone(),
        source,
    })?;
    if manifest.format != FORMAT {
        return Err(CheckpointError::Format {
            path,
            found: manifest.format,
        });
    }
    Ok(manifest)
}

/// Loads and verifies a checkpoint. Nothing is returned unless every file
/// matches its recorded size and hash.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    check_shapes(&manifest, &manifest.model_config)?;
    let model = ModelState::from_params(manifest.model_config, read_all(dir, &manifest.params)?)?;
    let optimizer = match &manifest.optimizer {
        Some(o) => {
            let state = OptimizerState {
                step: o.step,
                m: read_all(dir, &o.m)?,
                v: read_all(dir, &o.v)?,
            };
            for (name, p) in model.params() {
                for moments in [&state.m, &state.v] {
                    if moments.get(name).map(Tensor::shape) != Some(p.shape()) {
                        return Err(CheckpointError::Corrupt {
                            path: dir.to_owned(),
                            reason: format!("optimizer moments for {name} are missing or misshapen"),
                        });
                    }
                }
            }
            Some(state)
        }
        None => None,
    };
    Ok(Checkpoint {
        model,
        optimizer,
        train_config: manifest.train_config,
        labels: manifest.labels,
        epoch: manifest.epoch,
        validation_f1: manifest.validation_f1,
        vocab_sha256: manifest.vocab_sha256,
    })
}

/// Like [`load_checkpoint`], but first checks every stored shape against
/// `expected`, naming the first parameter that differs.
pub fn load_checkpoint_for(dir: impl AsRef<Path>, expected: &ModelConfig) -> Result<Checkpoint, CheckpointError> {
    let dir = dir.as_ref();
    check_shapes(&read_manifest(dir)?, expected)?;
    load_checkpoint(dir)
}

fn check_shapes(manifest: &Manifest, config: &ModelConfig) -> Result<(), CheckpointError> {
    let stored: BTreeMap<&str, &[usize]> = manifest
        .params
        .iter()
        .map(|e| (e.name.as_str(), e.shape.as_slice()))
        .collect();
    for (name, shape) in config.param_shapes() {
        match stored.get(name.as_str()) {
            Some(&found) if found == shape.as_slice() => {}
            Some(&found) => {
                return Err(CheckpointError::Shape {
                    name,
                    expected: shape,
                    found: found.to_vec(),
                })
            }
            None => return Err(ModelError::MissingParam(name).into()),
        }
    }
    if stored.len() != config.param_shapes().len() {
        let known: Vec<String> = config.param_shapes().into_iter().map(|(n, _)| n).collect();
        if let Some(extra) = stored.keys().find(|k| !known.iter().any(|n| n == *k)) {
            return Err(ModelError::UnexpectedParam((*extra).to_owned()).into());
        }
    }
    Ok(())
}
