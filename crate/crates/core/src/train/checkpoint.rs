//! Checkpoint container.
//!
//! Layout (integers little-endian):
//!
//! | field                         | encoding                              |
//! |-------------------------------|---------------------------------------|
//! | magic `NASTCKPT`              | 8 bytes                               |
//! | container version             | `u32`                                 |
//! | model config                  | `u32` length + JSON text              |
//! | training metadata             | `u32` length + JSON text              |
//! | tensor count                  | `u32`                                 |
//! | each tensor                   | `u32` name length + UTF-8 name + NASTFEAT version-2 record |
//! | checksum                      | SHA-256 of every preceding byte       |
//!
//! Tensor names are the canonical parameter names. Adam moments use the
//! prefixes `adam.m/` and `adam.v/`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{TrainConfig, TrainState};
use crate::autodiff::Params;
use crate::error::{NastError, Result};
use crate::featureio::{decode_matrix_f64, encode_matrix_f64};
use crate::model::{NastConfig, NastModel};
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NASTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

#[derive(Debug, Serialize, Deserialize)]
struct RngState {
    seed_hex: String,
    stream: u64,
    /// Decimal, since JSON numbers cannot hold every `u128`.
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed_hex: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || NastError::Serde("malformed generator state".into());
        if self.seed_hex.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed_hex[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    step: u64,
    tau: f64,
    rng: RngState,
    #[serde(default)]
    train_config: Option<TrainConfig>,
}

/// `out_dir/ckpt_<step>.nast`, zero-padded so names sort by step.
pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("ckpt_{step:08}.nast"))
}

fn push_blob(out: &mut Vec<u8>, bytes: &[u8]) -> Result<()> {
    let len = u32::try_from(bytes.len())
        .map_err(|_| NastError::InvalidParameter("checkpoint field exceeds 4 GiB".into()))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(bytes);
    Ok(())
}

/// Serializes `state` (and optionally the run's training config).
pub fn encode_checkpoint(state: &TrainState, train_config: Option<&TrainConfig>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    push_blob(&mut out, serde_json::to_string(state.model.config())?.as_bytes())?;
    let meta = Meta {
        step: state.step,
        tau: state.tau,
        rng: RngState::capture(&state.rng),
        train_config: train_config.cloned(),
    };
    push_blob(&mut out, serde_json::to_string(&meta)?.as_bytes())?;
    let params = state.model.params();
    let count = params.len() * 3;
    out.extend_from_slice(&(count as u32).to_le_bytes());
    let tensor = |name: &str, m: &Matrix, out: &mut Vec<u8>| -> Result<()> {
        push_blob(out, name.as_bytes())?;
        encode_matrix_f64(m, out)
    };
    for (name, m) in params.iter() {
        tensor(name, m, &mut out)?;
    }
    for (i, (name, _)) in params.iter().enumerate() {
        tensor(&format!("{M_PREFIX}{name}"), &state.m[i], &mut out)?;
    }
    for (i, (name, _)) in params.iter().enumerate() {
        tensor(&format!("{V_PREFIX}{name}"), &state.v[i], &mut out)?;
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn save_checkpoint(state: &TrainState, train_config: Option<&TrainConfig>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(state, train_config)?;
    fs::write(path, bytes).map_err(|e| NastError::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| NastError::Integrity("checkpoint ends mid-record".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

/// Parses a checkpoint and returns the state plus the stored training config.
pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<(TrainState, Option<TrainConfig>)> {
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(NastError::BadMagic {
            path: path.to_path_buf(),
            expected: "NASTCKPT",
        });
    }
    if bytes.len() < 12 + DIGEST_LEN {
        return Err(NastError::Integrity(format!("{} is truncated", path.display())));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(NastError::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(NastError::Integrity(format!(
            "checksum mismatch in {} (truncated or corrupted)",
            path.display()
        )));
    }

    let mut c = Cursor { bytes: body, pos: 12 };
    let config: NastConfig = serde_json::from_slice(c.blob()?)?;
    let meta: Meta = serde_json::from_slice(c.blob()?)?;
    let count = c.u32()? as usize;
    let mut params = Params::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for _ in 0..count {
        let name = std::str::from_utf8(c.blob()?)
            .map_err(|_| NastError::Integrity("tensor name is not UTF-8".into()))?
            .to_string();
        let (matrix, used) = decode_matrix_f64(path, &body[c.pos..])?;
        c.pos += used;
        if name.starts_with(M_PREFIX) {
            m.push(matrix);
        } else if name.starts_with(V_PREFIX) {
            v.push(matrix);
        } else {
            params.insert(name, matrix);
        }
    }
    if c.pos != body.len() {
        return Err(NastError::Integrity("trailing bytes after the last tensor".into()));
    }
    let model = NastModel::from_params(config, params)?;
    if m.len() != model.params().len() || v.len() != model.params().len() {
        return Err(NastError::ConfigMismatch("optimizer moments do not match parameters".into()));
    }
    for (i, (_, p)) in model.params().iter().enumerate() {
        if m[i].shape() != p.shape() || v[i].shape() != p.shape() {
            return Err(NastError::ConfigMismatch("optimizer moment shape differs from parameter".into()));
        }
    }
    let state = TrainState {
        model,
        m,
        v,
        step: meta.step,
        rng: meta.rng.restore()?,
        tau: meta.tau,
    };
    Ok((state, meta.train_config))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| NastError::io(path, e))?;
    Ok(decode_checkpoint(path, &bytes)?.0)
}

/// Loads a checkpoint and requires its model config to equal `expected`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &NastConfig) -> Result<TrainState> {
    let state = load_checkpoint(path)?;
    let found = state.model.config();
    if found != expected {
        let a = serde_json::to_value(found)?;
        let b = serde_json::to_value(expected)?;
        let diffs: Vec<String> = a
            .as_object()
            .unwrap()
            .iter()
            .filter(|(k, v)| b.get(k.as_str()) != Some(v))
            .map(|(k, v)| format!("{k}: checkpoint {v}, requested {}", b[k.as_str()]))
            .collect();
        return Err(NastError::ConfigMismatch(diffs.join("; ")));
    }
    Ok(state)
}
