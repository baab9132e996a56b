//! Versioned binary checkpoint container.
//!
//! Layout: 8-byte magic, u32 version, a UTF-8 key=value config block, a
//! manifest of (name, rows, cols, offset) entries, then the tensor data as
//! little-endian 32-bit floats in row-major order. All integers are
//! little-endian u64 unless noted. Tensors are stored in schema order, so
//! loading and re-saving a checkpoint is byte-identical.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use crate::model::{Model, ModelConfig, ModelError, Params};
use crate::tensor::Scalar;
use crate::training::Objective;

const MAGIC: &[u8; 8] = b"BANGCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Trained weights plus the metadata needed to rebuild and rerun the model.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub objective: Objective,
    pub step: u64,
    pub seed: u64,
    pub params: Params<f32>,
}

impl Checkpoint {
    pub fn new(
        config: ModelConfig,
        objective: Objective,
        step: u64,
        seed: u64,
        params: Params<f32>,
    ) -> Self {
        Checkpoint { config, objective, step, seed, params }
    }

    /// Instantiate a model at the requested precision.
    pub fn model<F: Scalar>(&self) -> Result<Model<F>, ModelError> {
        Model::from_parts(self.config.clone(), self.params.cast())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());

        let mut config_text = self.config.to_kv();
        config_text.push_str(&format!(
            "objective={}\nstep={}\nseed={}\n",
            self.objective, self.step, self.seed
        ));
        push_bytes(&mut out, config_text.as_bytes());

        let entries: Vec<(&str, &Array2<f32>)> = self.params.iter().collect();
        out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
        let mut offset = 0u64;
        for (name, arr) in &entries {
            push_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(arr.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(arr.ncols() as u64).to_le_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            offset += (arr.len() * 4) as u64;
        }
        for (_, arr) in &entries {
            for v in arr.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(8)?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let config_text = String::from_utf8(cur.take_len_prefixed()?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("config block is not UTF-8".into()))?;
        let kv: HashMap<String, String> = config_text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect();
        let config = ModelConfig::from_kv(&kv)?;
        let objective: Objective = kv
            .get("objective")
            .ok_or_else(|| CheckpointError::Corrupt("missing objective".into()))?
            .parse()
            .map_err(CheckpointError::Corrupt)?;
        let step = parse_u64(&kv, "step")?;
        let seed = parse_u64(&kv, "seed")?;

        let n = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
        let mut manifest = Vec::with_capacity(n);
        for _ in 0..n {
            let name = String::from_utf8(cur.take_len_prefixed()?.to_vec())
                .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?;
            let rows = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
            let cols = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
            let offset = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
            manifest.push((name, rows, cols, offset));
        }
        let data = &bytes[cur.pos..];
        let mut tensors = HashMap::with_capacity(n);
        for (name, rows, cols, offset) in manifest {
            let nbytes = rows * cols * 4;
            let slice = data
                .get(offset..offset + nbytes)
                .ok_or_else(|| CheckpointError::Corrupt(format!("tensor {name} out of bounds")))?;
            let mut arr = Array2::zeros((rows, cols));
            for (i, chunk) in slice.chunks_exact(4).enumerate() {
                arr[(i / cols, i % cols)] = f32::from_le_bytes(chunk.try_into().unwrap());
            }
            if tensors.insert(name.clone(), arr).is_some() {
                return Err(CheckpointError::Corrupt(format!("duplicate tensor {name}")));
            }
        }
        let params = Params::from_named(&config, tensors)?;
        Ok(Checkpoint { config, objective, step, seed, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn push_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
    out.extend_from_slice(b);
}

fn parse_u64(kv: &HashMap<String, String>, key: &str) -> Result<u64, CheckpointError> {
    kv.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CheckpointError::Corrupt(format!("missing or bad {key}")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| CheckpointError::Corrupt("truncated file".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn take_len_prefixed(&mut self) -> Result<&'a [u8], CheckpointError> {
        let n = u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize;
        self.take(n)
    }
}
