//! Binary checkpoint format.
//!
//! Layout: `FEATCKPT`, version `u32`, header length `u64`, JSON header
//! (config and tensor manifest), parameter values as little-endian `f64` in
//! manifest order, then an FNV-1a 64-bit checksum of every preceding byte.
//! All integers are little-endian.

use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use super::{FeatModel, ModelConfig};
use crate::error::{FeatError, Result};
use crate::numerics::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FEATCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the value section, in values.
    pub offset: usize,
}

/// Decoded header of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

impl FeatModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::with_capacity(self.params.len());
        let mut offset = 0;
        for (name, t) in self.params.iter() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.numel();
        }
        let header = serde_json::to_vec(&Checkpoint {
            config: self.config.clone(),
            tensors,
        })?;
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + offset * 8 + 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    /// Decode a checkpoint; nothing is built unless every check passes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE + 8 {
            return Err(FeatError::Format(format!("checkpoint truncated at {} bytes", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(FeatError::Format("not a checkpoint (bad magic)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if checksum(body) != stored {
            return Err(FeatError::Format("checksum mismatch (truncated or corrupted file)".into()));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(FeatError::Format(format!(
                "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let data_start = PREAMBLE
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| FeatError::Format("header length exceeds file".into()))?;
        let header: Checkpoint = serde_json::from_slice(&body[PREAMBLE..data_start])
            .map_err(|e| FeatError::Format(format!("header: {e}")))?;
        let data = &body[data_start..];
        if data.len() % 8 != 0 {
            return Err(FeatError::Format("value section is not a whole number of f64".into()));
        }
        let values: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();

        let mut model = FeatModel::new(header.config.clone()).map_err(|e| match e {
            FeatError::Config { field, message } => FeatError::Format(format!("stored config field `{field}`: {message}")),
            other => other,
        })?;
        let ids: Vec<_> = model.params.ids().collect();
        if ids.len() != header.tensors.len() {
            return Err(FeatError::Format(format!(
                "manifest lists {} tensors, the config builds {}",
                header.tensors.len(),
                ids.len()
            )));
        }
        let mut expected_offset = 0;
        for (id, entry) in ids.into_iter().zip(&header.tensors) {
            let name = model.params.name(id).to_string();
            let shape = model.params.get(id).shape().to_vec();
            if entry.name != name || entry.shape != shape || entry.offset != expected_offset {
                return Err(FeatError::Format(format!(
                    "tensor `{}` {:?} at {} does not match `{name}` {shape:?} at {expected_offset}",
                    entry.name, entry.shape, entry.offset
                )));
            }
            let len: usize = shape.iter().product();
            let slice = values
                .get(entry.offset..entry.offset + len)
                .ok_or_else(|| FeatError::Format(format!("values of `{name}` run past the file")))?;
            model.params.set(id, Tensor::new(shape, slice.to_vec())?)?;
            expected_offset += len;
        }
        if expected_offset != values.len() {
            return Err(FeatError::Format(format!(
                "{} trailing values after the last tensor",
                values.len() - expected_offset
            )));
        }
        Ok(model)
    }
}

pub fn save(model: &FeatModel, path: &Path) -> Result<()> {
    std::fs::write(path, model.to_bytes()?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<FeatModel> {
    FeatModel::from_bytes(&std::fs::read(path)?)
}

/// Load and require the stored config to equal `expected`; a mismatch names
/// the first differing field.
pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<FeatModel> {
    let model = load(path)?;
    match expected.first_difference(model.config()) {
        None => Ok(model),
        Some(field) => Err(FeatError::config(
            field.clone(),
            format!(
                "checkpoint has {}, expected {}",
                json_field(model.config(), &field),
                json_field(expected, &field)
            ),
        )),
    }
}

fn json_field(cfg: &ModelConfig, field: &str) -> String {
    serde_json::to_value(cfg)
        .ok()
        .and_then(|v| v.get(field).map(ToString::to_string))
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> FeatModel {
        FeatModel::new(ModelConfig { layers: 1, d: 8, d_hidden: 4, d_ff: 8, heads: 2, ..ModelConfig::default() }).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = small();
        let bytes = m.to_bytes().unwrap();
        let back = FeatModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        for ((na, a), (nb, b)) in m.params().iter().zip(back.params().iter()) {
            assert_eq!(na, nb);
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = small().to_bytes().unwrap();
        for cut in [0, 7, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(FeatModel::from_bytes(&bytes[..cut]), Err(FeatError::Format(_))), "cut {cut}");
        }
    }

    #[test]
    fn flipped_bit_is_detected() {
        let mut bytes = small().to_bytes().unwrap();
        let i = bytes.len() - 20;
        bytes[i] ^= 1;
        assert!(matches!(FeatModel::from_bytes(&bytes), Err(FeatError::Format(_))));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = small().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let n = bytes.len() - 8;
        let sum = checksum(&bytes[..n]);
        bytes[n..].copy_from_slice(&sum.to_le_bytes());
        match FeatModel::from_bytes(&bytes) {
            Err(FeatError::Format(m)) => assert!(m.contains("version 7")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_mismatch_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = small();
        save(&m, &path).unwrap();
        let expected = ModelConfig { d_state: 4, ..m.config().clone() };
        match load_expecting(&path, &expected) {
            Err(FeatError::Config { field, .. }) => assert_eq!(field, "d_state"),
            other => panic!("{other:?}"),
        }
        assert!(load_expecting(&path, m.config()).is_ok());
    }
}
