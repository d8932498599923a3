//! Self-contained binary checkpoints.
//!
//! Layout: 8-byte magic `VSFCKPT1`, a little-endian u32 length prefix and a
//! UTF-8 JSON metadata header (configs, vocabulary, tokenization artifacts,
//! tensor names and shapes), the named tensors as little-endian f64 in
//! declaration order, and a trailing little-endian CRC-32 of every byte
//! before it. Loading verifies the checksum before touching anything else,
//! so a corrupted file never half-loads.

use super::pipeline::TokenizerArtifacts;
use super::TrainConfig;
use crate::model::{ModelConfig, ModelParams};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;
use vsf_numerics::Tensor;

const MAGIC: &[u8; 8] = b"VSFCKPT1";
const FORMAT_VERSION: u8 = b'1';

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} unsupported; this build reads version {expected}")]
    VersionMismatch { found: char, expected: char },
    #[error("checkpoint file is truncated")]
    Truncated,
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("tensor layout mismatch: {0}")]
    Layout(String),
}

/// Everything inference needs: configuration, vocabulary, frozen
/// tokenization artifacts, and the trained parameters (with batch-norm
/// running statistics inside).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub config: TrainConfig,
    pub class_names: Vec<String>,
    pub n_variables: usize,
    pub series_len: usize,
    pub artifacts: TokenizerArtifacts,
    pub params: ModelParams,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    model: ModelConfig,
    class_names: Vec<String>,
    n_variables: usize,
    series_len: usize,
    artifacts: TokenizerArtifacts,
    tensors: Vec<TensorMeta>,
}

/// Named tensors in payload order: trainable parameters, then batch-norm
/// running statistics.
fn payload_tensors(params: &ModelParams) -> Vec<(String, &Tensor)> {
    let mut out = params.named_tensors();
    for (name, state) in params.bn_states() {
        out.push((format!("{name}.running_mean"), &state.running_mean));
        out.push((format!("{name}.running_var"), &state.running_var));
    }
    out
}

pub fn checkpoint_bytes(cp: &ModelCheckpoint) -> Result<Vec<u8>, CheckpointError> {
    let tensors = payload_tensors(&cp.params);
    let header = Header {
        config: cp.config.clone(),
        model: cp.params.config.clone(),
        class_names: cp.class_names.clone(),
        n_variables: cp.n_variables,
        series_len: cp.series_len,
        artifacts: cp.artifacts.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorMeta {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for (_, tensor) in &tensors {
        for v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    Ok(bytes)
}

pub fn save_checkpoint(cp: &ModelCheckpoint, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    std::fs::write(path, checkpoint_bytes(cp)?)?;
    Ok(())
}

pub fn load_checkpoint_bytes(bytes: &[u8]) -> Result<ModelCheckpoint, CheckpointError> {
    if bytes.len() < MAGIC.len() + 4 + 4 {
        return Err(CheckpointError::Truncated);
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed });
    }
    if body[..7] != MAGIC[..7] {
        return Err(CheckpointError::BadMagic);
    }
    if body[7] != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: body[7] as char,
            expected: FORMAT_VERSION as char,
        });
    }
    let header_len =
        u32::from_le_bytes(body[8..12].try_into().expect("4 bytes")) as usize;
    if body.len() < 12 + header_len {
        return Err(CheckpointError::Truncated);
    }
    let header: Header = serde_json::from_slice(&body[12..12 + header_len])?;

    let mut offset = 12 + header_len;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for meta in &header.tensors {
        let numel: usize = meta.shape.iter().product();
        let end = offset + numel * 8;
        if body.len() < end {
            return Err(CheckpointError::Truncated);
        }
        let data: Vec<f64> = body[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(meta.shape.clone(), data)
            .map_err(|e| CheckpointError::Layout(format!("{}: {e}", meta.name)))?;
        tensors.push((meta.name.clone(), tensor));
        offset = end;
    }
    if offset != body.len() {
        return Err(CheckpointError::Layout(format!(
            "{} trailing bytes after the declared tensors",
            body.len() - offset
        )));
    }

    // Rebuild the parameter struct and fill every tensor by name.
    let mut params = ModelParams::init(header.model, 0);
    let mut cursor = tensors.iter();
    for (name, slot) in params.named_tensors_mut() {
        let Some((stored_name, tensor)) = cursor.next() else {
            return Err(CheckpointError::Layout(format!("missing tensor {name}")));
        };
        if stored_name != &name || tensor.shape() != slot.shape() {
            return Err(CheckpointError::Layout(format!(
                "expected {name} {:?}, found {stored_name} {:?}",
                slot.shape(),
                tensor.shape()
            )));
        }
        *slot = tensor.clone();
    }
    for (name, state) in params.bn_states_mut() {
        for (suffix, slot) in [
            ("running_mean", &mut state.running_mean),
            ("running_var", &mut state.running_var),
        ] {
            let expected = format!("{name}.{suffix}");
            let Some((stored_name, tensor)) = cursor.next() else {
                return Err(CheckpointError::Layout(format!("missing tensor {expected}")));
            };
            if stored_name != &expected || tensor.shape() != slot.shape() {
                return Err(CheckpointError::Layout(format!(
                    "expected {expected} {:?}, found {stored_name} {:?}",
                    slot.shape(),
                    tensor.shape()
                )));
            }
            *slot = tensor.clone();
        }
    }
    if cursor.next().is_some() {
        return Err(CheckpointError::Layout(
            "checkpoint carries tensors this model layout does not use".into(),
        ));
    }

    Ok(ModelCheckpoint {
        config: header.config,
        class_names: header.class_names,
        n_variables: header.n_variables,
        series_len: header.series_len,
        artifacts: header.artifacts,
        params,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelCheckpoint, CheckpointError> {
    load_checkpoint_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{gen_synthetic, SyntheticKind};
    use crate::trainer::pipeline::fit_artifacts;
    use crate::trainer::TrainConfig;

    fn toy_checkpoint() -> ModelCheckpoint {
        let data = gen_synthetic(SyntheticKind::Mixed, 4, 2, 48, 2, 11).unwrap();
        let config = TrainConfig {
            k: 1,
            granularity_max: 2,
            ..TrainConfig::default()
        };
        let artifacts = fit_artifacts(&data, &config).unwrap();
        let mcfg = super::super::pipeline::model_config(&artifacts, &config, &data);
        let params = ModelParams::init(mcfg, 13);
        ModelCheckpoint {
            config,
            class_names: data.class_names().to_vec(),
            n_variables: data.n_variables(),
            series_len: data.series_len(),
            artifacts,
            params,
        }
    }

    #[test]
    fn round_trip_preserves_everything_exactly() {
        let cp = toy_checkpoint();
        let bytes = checkpoint_bytes(&cp).unwrap();
        let loaded = load_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(cp, loaded);
        for ((na, ta), (nb, tb)) in cp
            .params
            .named_tensors()
            .iter()
            .zip(loaded.params.named_tensors().iter())
        {
            assert_eq!(na, nb);
            for (a, b) in ta.data().iter().zip(tb.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn every_corrupted_byte_is_caught() {
        let cp = toy_checkpoint();
        let bytes = checkpoint_bytes(&cp).unwrap();
        let mut rng = vsf_numerics::rng::SplitMix64::new(17);
        for _ in 0..20 {
            let mut corrupted = bytes.clone();
            let pos = rng.below(corrupted.len());
            corrupted[pos] ^= 0x40;
            let err = load_checkpoint_bytes(&corrupted).expect_err("corruption must not load");
            assert!(
                matches!(err, CheckpointError::ChecksumMismatch { .. }),
                "byte {pos}: unexpected error {err:?}"
            );
        }
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let cp = toy_checkpoint();
        let mut bytes = checkpoint_bytes(&cp).unwrap();
        bytes[7] = b'2';
        // restore checksum so only the version differs
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        match load_checkpoint_bytes(&bytes) {
            Err(CheckpointError::VersionMismatch { found, expected }) => {
                assert_eq!(found, '2');
                assert_eq!(expected, '1');
            }
            other => panic!("expected version mismatch, got {other:?}"),
        }
        let msg = load_checkpoint_bytes(&bytes).unwrap_err().to_string();
        assert!(msg.contains('2') && msg.contains('1'));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let cp = toy_checkpoint();
        let bytes = checkpoint_bytes(&cp).unwrap();
        let cut = &bytes[..bytes.len() / 2];
        assert!(load_checkpoint_bytes(cut).is_err());
        assert!(matches!(
            load_checkpoint_bytes(&bytes[..6]),
            Err(CheckpointError::Truncated)
        ));
    }
}
