//! Self-describing checkpoint directories.
//!
//! ```text
//! <dir>/config.json   training config, model dims, labels, tensor manifest
//! <dir>/vocab.txt     one token per line in id order
//! <dir>/weights.bin   manifest-ordered row-major little-endian f32
//! ```
//!
//! A checkpoint is written into a sibling temporary directory and renamed
//! into place, so readers never observe a partial write.

use std::fs;
use std::path::{Path, PathBuf};

use lama_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{LamaError, Result};
use crate::model::{expected_shapes, ModelParams};
use crate::text::{LabelMap, Vocab};
use crate::trainer::TrainConfig;

pub const CONFIG_FILE: &str = "config.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub labels: LabelMap,
    pub params: ModelParams<f32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into `weights.bin`.
    pub offset: u64,
}

#[derive(Serialize, Deserialize)]
struct ConfigFile {
    #[serde(flatten)]
    train: TrainConfig,
    vocab_size: usize,
    labels: LabelMap,
    tensors: Vec<TensorEntry>,
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| LamaError::io(path, e))
}

impl Checkpoint {
    pub fn manifest(&self) -> Vec<TensorEntry> {
        let mut offset = 0u64;
        self.params
            .named()
            .into_iter()
            .map(|(name, t)| {
                let entry = TensorEntry {
                    name,
                    shape: [t.rows(), t.cols()],
                    offset,
                };
                offset += 4 * t.len() as u64;
                entry
            })
            .collect()
    }

    fn config_json(&self) -> Result<String> {
        let file = ConfigFile {
            train: self.config.clone(),
            vocab_size: self.vocab.len(),
            labels: self.labels.clone(),
            tensors: self.manifest(),
        };
        let mut s = serde_json::to_string_pretty(&file)?;
        s.push('\n');
        Ok(s)
    }

    fn weights(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * self.params.num_parameters());
        for t in self.params.tensors() {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Writes the checkpoint to `dir`, replacing any previous one atomically.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let parent = match dir.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        io(&parent, fs::create_dir_all(&parent))?;
        let name = dir
            .file_name()
            .ok_or_else(|| LamaError::Checkpoint(format!("invalid directory {}", dir.display())))?
            .to_string_lossy()
            .into_owned();
        let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
        if tmp.exists() {
            io(&tmp, fs::remove_dir_all(&tmp))?;
        }
        io(&tmp, fs::create_dir(&tmp))?;
        let config = tmp.join(CONFIG_FILE);
        io(&config, fs::write(&config, self.config_json()?))?;
        self.vocab.save(&tmp.join(VOCAB_FILE))?;
        let weights = tmp.join(WEIGHTS_FILE);
        io(&weights, fs::write(&weights, self.weights()))?;

        if dir.exists() {
            let old = parent.join(format!(".{name}.old-{}", std::process::id()));
            io(dir, fs::rename(dir, &old))?;
            io(dir, fs::rename(&tmp, dir))?;
            io(&old, fs::remove_dir_all(&old))?;
        } else {
            io(dir, fs::rename(&tmp, dir))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config_path = dir.join(CONFIG_FILE);
        let text = io(&config_path, fs::read_to_string(&config_path))?;
        let file: ConfigFile = serde_json::from_str(&text)?;
        file.train.validate()?;
        let vocab = Vocab::load(&dir.join(VOCAB_FILE), file.train.min_count)?;
        if vocab.len() != file.vocab_size {
            return Err(LamaError::Checkpoint(format!(
                "vocab.txt has {} entries, config records {}",
                vocab.len(),
                file.vocab_size
            )));
        }
        let model_config = file.train.model_config(vocab.len(), file.labels.len());
        let expected = expected_shapes(&model_config);
        let listed: Vec<(String, (usize, usize))> = file
            .tensors
            .iter()
            .map(|e| (e.name.clone(), (e.shape[0], e.shape[1])))
            .collect();
        if listed != expected {
            return Err(LamaError::Checkpoint(
                "tensor manifest does not match the configured model".into(),
            ));
        }
        let weights_path = dir.join(WEIGHTS_FILE);
        let bytes = io(&weights_path, fs::read(&weights_path))?;
        let mut tensors = Vec::with_capacity(file.tensors.len());
        for e in &file.tensors {
            let n = e.shape[0] * e.shape[1];
            let start = e.offset as usize;
            let end = start + 4 * n;
            let raw = bytes.get(start..end).ok_or_else(|| {
                LamaError::Checkpoint(format!("weights.bin too short for `{}`", e.name))
            })?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.push(Tensor::from_vec(e.shape[0], e.shape[1], data).map_err(|err| {
                LamaError::Checkpoint(format!("tensor `{}`: {err}", e.name))
            })?);
        }
        let total: usize = file.tensors.iter().map(|e| 4 * e.shape[0] * e.shape[1]).sum();
        if total != bytes.len() {
            return Err(LamaError::Checkpoint(format!(
                "weights.bin holds {} bytes, manifest describes {total}",
                bytes.len()
            )));
        }
        let params = ModelParams::from_tensors(model_config, tensors)?;
        Ok(Self {
            config: file.train,
            vocab,
            labels: file.labels,
            params,
        })
    }
}
