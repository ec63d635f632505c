//! Binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (model config, run metadata, tensor names and shapes), then every
//! tensor as little-endian `f64` in header order. Encoding is a pure
//! function of the model and metadata, so equal inputs give equal bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{ParamSet, Tensor};
use crate::model::{JtwModel, ModelConfig, ModelError};
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"JTWCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("trailing bytes after tensor data")]
    Trailing,
    #[error("bad checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Run metadata stored next to the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    /// Content hash of the vocabulary the model was trained with.
    pub vocab_hash: String,
    pub train: TrainConfig,
    /// Context window size used to build training instances.
    pub window: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

pub fn encode(model: &JtwModel, meta: &CheckpointMeta) -> Vec<u8> {
    let header = Header {
        model: model.config().clone(),
        meta: meta.clone(),
        tensors: model
            .params()
            .iter()
            .map(|(_, name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + 8 * model.params().num_elements());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in model.params().iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8], CheckpointError> {
    if bytes.len() < n {
        return Err(CheckpointError::Truncated);
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn decode(mut bytes: &[u8]) -> Result<(JtwModel, CheckpointMeta), CheckpointError> {
    if take(&mut bytes, 8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = u64::from_le_bytes(take(&mut bytes, 8)?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| CheckpointError::Truncated)?;
    let header: Header = serde_json::from_slice(take(&mut bytes, len)?)?;
    let mut params = ParamSet::new();
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = take(&mut bytes, n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::from_vec(&entry.shape, data).map_err(ModelError::from)?;
        params.add(entry.name, tensor);
    }
    if !bytes.is_empty() {
        return Err(CheckpointError::Trailing);
    }
    Ok((JtwModel::from_params(header.model, params)?, header.meta))
}

/// Writes through a temporary file in the same directory, then renames.
pub fn save(path: &Path, model: &JtwModel, meta: &CheckpointMeta) -> Result<(), CheckpointError> {
    write_atomic(path, &encode(model, meta))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    let file_name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(JtwModel, CheckpointMeta), CheckpointError> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InputMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(input: InputMode) -> JtwModel {
        let cfg = ModelConfig {
            vocab_size: 7,
            latent_dim: 3,
            topics: 2,
            hidden: 4,
            samples: 2,
            input,
        };
        JtwModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()
    }

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            seed: 42,
            vocab_hash: "abc".into(),
            train: TrainConfig::default(),
            window: 10,
        }
    }

    #[test]
    fn encode_decode_encode_is_byte_identical() {
        for input in [InputMode::Bow, InputMode::Dense { dim: 5 }] {
            let m = model(input);
            let bytes = encode(&m, &meta());
            let (back, back_meta) = decode(&bytes).unwrap();
            assert_eq!(back, m);
            assert_eq!(back_meta, meta());
            assert_eq!(encode(&back, &back_meta), bytes);
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = encode(&model(InputMode::Bow), &meta());
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(CheckpointError::Truncated)));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(CheckpointError::Trailing)));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(CheckpointError::BadMagic)));
        let mut ver = bytes;
        ver[8] = 9;
        assert!(matches!(decode(&ver), Err(CheckpointError::Version(9))));
    }

    #[test]
    fn save_and_load_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = model(InputMode::Bow);
        save(&path, &m, &meta()).unwrap();
        let (back, _) = load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
