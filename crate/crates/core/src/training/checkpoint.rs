//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//! `"CLOC"`, version `u32`, header length `u64`, JSON header, array count
//! `u32`, then per array its element count `u64` followed by `f64`
//! values, then a SHA-256 digest of every preceding byte. Arrays are the
//! parameter tensors in declaration order, then the optimizer's first
//! moments, then its second moments.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{io_err, EpochLoss, TrainError};
use crate::model::{ModelParams, NetworkConfig};
use crate::numerics::{OptimizerState, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CLOC";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: NetworkConfig,
    pub condition_names: Vec<String>,
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    /// Epochs completed.
    pub epoch: u64,
    /// Run seed; with `epoch` this fixes the remaining RNG streams.
    pub seed: u64,
    pub loss_history: Vec<EpochLoss>,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    network: NetworkConfig,
    condition_names: Vec<String>,
    epoch: u64,
    seed: u64,
    optimizer_step: u64,
    has_moments: bool,
    loss_history: Vec<EpochLoss>,
    config_hash: String,
    arrays: Vec<ArrayInfo>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayInfo {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.params.named_tensors();
        let has_moments = !self.optimizer.first_moment.is_empty();
        let header = Header {
            network: self.network.clone(),
            condition_names: self.condition_names.clone(),
            epoch: self.epoch,
            seed: self.seed,
            optimizer_step: self.optimizer.step,
            has_moments,
            loss_history: self.loss_history.clone(),
            config_hash: self.config_hash.clone(),
            arrays: tensors
                .iter()
                .map(|(name, t)| ArrayInfo {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");

        let mut arrays: Vec<&[f64]> = tensors.iter().map(|(_, t)| t.data()).collect();
        if has_moments {
            arrays.extend(self.optimizer.first_moment.iter().map(Vec::as_slice));
            arrays.extend(self.optimizer.second_moment.iter().map(Vec::as_slice));
        }

        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for a in arrays {
            out.extend_from_slice(&(a.len() as u64).to_le_bytes());
            for v in a {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let corrupt = |m: &str| TrainError::CorruptCheckpoint(m.to_string());
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(corrupt("missing CLOC magic"));
        }
        if bytes.len() < 8 + DIGEST_LEN {
            return Err(corrupt("file is truncated"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or modified file)"));
        }

        let mut r = Reader { buf: body, pos: 8 };
        let header_len = r.u64()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(header_len)?).map_err(|e| corrupt(&format!("header: {e}")))?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u64()? as usize;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| corrupt("array length overflow"))?)?;
            arrays.push(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect::<Vec<f64>>(),
            );
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes after arrays"));
        }

        let n_params = header.arrays.len();
        let expected = if header.has_moments { 3 * n_params } else { n_params };
        if count != expected {
            return Err(corrupt("array count does not match the header"));
        }
        let mut it = arrays.into_iter();
        let mut tensors = Vec::with_capacity(n_params);
        for info in &header.arrays {
            let data = it.next().expect("count checked");
            tensors.push(Tensor::new(info.shape.clone(), data).map_err(|e| corrupt(&format!("{}: {e}", info.name)))?);
        }
        let params = ModelParams::from_tensors(&header.network, tensors)?;
        let optimizer = if header.has_moments {
            let first: Vec<Vec<f64>> = it.by_ref().take(n_params).collect();
            let second: Vec<Vec<f64>> = it.collect();
            let shapes_ok = first
                .iter()
                .chain(second.iter())
                .zip(header.arrays.iter().chain(header.arrays.iter()))
                .all(|(m, info)| m.len() == info.shape.iter().product::<usize>());
            if !shapes_ok {
                return Err(corrupt("optimizer moments do not match the parameters"));
            }
            OptimizerState {
                step: header.optimizer_step,
                first_moment: first,
                second_moment: second,
            }
        } else {
            OptimizerState {
                step: header.optimizer_step,
                ..OptimizerState::default()
            }
        };
        Ok(Checkpoint {
            network: header.network,
            condition_names: header.condition_names,
            params,
            optimizer,
            epoch: header.epoch,
            seed: header.seed,
            loss_history: header.loss_history,
            config_hash: header.config_hash,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| TrainError::CorruptCheckpoint("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    std::fs::write(path, checkpoint.to_bytes()).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Checkpoint::from_bytes(&bytes)
}
