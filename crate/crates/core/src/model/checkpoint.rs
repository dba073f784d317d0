//! Binary checkpoint:
//!
//! ```text
//! magic "GEORCKPT" | u32 format version | u64 header length | header JSON
//! | parameters as little-endian f64 | sha256 of everything before it
//! ```
//!
//! The JSON header carries the architecture, vocabulary, feature statistics,
//! training config and model version string.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{model_version, Architecture, Estimator, ModelParams, TrainConfig};
use crate::error::{Error, Result};
use crate::featurizer::{Featurizer, Vocabulary};

const MAGIC: &[u8; 8] = b"GEORCKPT";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    model_version: String,
    vocab_fingerprint: String,
    n_params: usize,
    arch: Architecture,
    featurizer: Featurizer,
    config: TrainConfig,
}

pub fn save_checkpoint(path: impl AsRef<Path>, est: &Estimator) -> Result<()> {
    let path = path.as_ref();
    let header = serde_json::to_vec(&Header {
        model_version: est.version.clone(),
        vocab_fingerprint: est.featurizer.vocab.fingerprint(),
        n_params: est.params.len(),
        arch: est.params.arch.clone(),
        featurizer: est.featurizer.clone(),
        config: est.config.clone(),
    })?;
    let mut buf = Vec::with_capacity(header.len() + est.params.len() * 8 + 64);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&est.params.to_le_bytes());
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Estimator> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: &str| Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };

    if bytes.len() < MAGIC.len() + 4 + 8 + 32 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint (bad magic or too short)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::VersionMismatch(format!(
            "checkpoint format {version}, this build reads {CHECKPOINT_FORMAT_VERSION}"
        )));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch (truncated or modified)"));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|e| *e <= body.len())
        .ok_or_else(|| corrupt("header length out of range"))?;
    let header: Header =
        serde_json::from_slice(&body[20..header_end]).map_err(|e| corrupt(&e.to_string()))?;
    let raw = &body[header_end..];
    if raw.len() != header.n_params * 8 {
        return Err(corrupt("parameter block size mismatch"));
    }
    let values = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let params = ModelParams::from_values(header.arch, values)?;
    let featurizer = header.featurizer;
    if featurizer.vocab.fingerprint() != header.vocab_fingerprint
        || model_version(&featurizer.vocab, &params) != header.model_version
    {
        return Err(corrupt("model version does not match contents"));
    }
    Ok(Estimator {
        featurizer,
        params,
        config: header.config,
        version: header.model_version,
    })
}

/// Loads a checkpoint and checks it was trained against `vocab`.
pub fn load_checkpoint_for_vocab(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Estimator> {
    let est = load_checkpoint(path)?;
    let (want, got) = (vocab.fingerprint(), est.featurizer.vocab.fingerprint());
    if want != got {
        return Err(Error::VersionMismatch(format!(
            "checkpoint vocabulary {got} differs from expected {want}"
        )));
    }
    Ok(est)
}
