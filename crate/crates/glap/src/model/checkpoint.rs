//! Checkpoints: a directory holding `meta.json` (version, step, config
//! hash, logit form, and the resolved model architecture) plus one
//! GLAP-TENSOR file per named parameter. Loads are bit-exact and
//! version- and checksum-checked.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, TowerParams};
use crate::data::tensor_file;
use crate::error::{GlapError, Result};
use crate::loss::LogitForm;

pub const CHECKPOINT_VERSION: u32 = 1;
const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    /// Global optimizer step at save time.
    pub step: u64,
    /// Hash of the originating run configuration (provenance only).
    pub config_hash: String,
    pub logit_form: LogitForm,
    pub model: ModelConfig,
}

pub fn save_checkpoint(
    dir: &Path,
    params: &TowerParams,
    step: u64,
    config_hash: &str,
    logit_form: LogitForm,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| GlapError::io(dir, e))?;
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        step,
        config_hash: config_hash.to_string(),
        logit_form,
        model: params.config().clone(),
    };
    let meta_path = dir.join(META_FILE);
    let body = serde_json::to_string_pretty(&meta)
        .map_err(|e| GlapError::Config(format!("serialize checkpoint meta: {e}")))?;
    std::fs::write(&meta_path, body + "\n").map_err(|e| GlapError::io(&meta_path, e))?;

    let mut result = Ok(());
    params.for_each_tensor(&mut |name, dims, data| {
        if result.is_ok() {
            result = tensor_file::write_tensor(&dir.join(format!("{name}.gt")), dims, data);
        }
    });
    result
}

#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub params: TowerParams,
    pub meta: CheckpointMeta,
}

pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    let meta_path = dir.join(META_FILE);
    let body = std::fs::read_to_string(&meta_path).map_err(|e| GlapError::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&body).map_err(|e| GlapError::Corrupt {
        path: meta_path.clone(),
        message: format!("invalid meta.json: {e}"),
    })?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(GlapError::Version {
            path: meta_path,
            found: meta.version,
            supported: CHECKPOINT_VERSION,
        });
    }

    // Build the parameter skeleton from the stored architecture, then
    // overwrite every tensor from disk.
    let mut params = TowerParams::init(&meta.model, 0)?;
    for (name, slice) in params.all_tensors_mut() {
        let path = dir.join(format!("{name}.gt"));
        if !path.exists() {
            return Err(GlapError::Corrupt {
                path,
                message: format!("missing tensor {name:?}"),
            });
        }
        let tensor = tensor_file::read_tensor(&path)?;
        if tensor.values().len() != slice.len() {
            return Err(GlapError::Shape(format!(
                "tensor {name:?} in {} has {} values, model expects {}",
                dir.display(),
                tensor.values().len(),
                slice.len()
            )));
        }
        slice.copy_from_slice(tensor.values());
    }
    Ok(LoadedCheckpoint { params, meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::encoder::{EncoderKind, EncoderSpec};
    use crate::model::projection::ProjectionKind;

    fn config() -> ModelConfig {
        ModelConfig {
            audio: EncoderSpec {
                kind: EncoderKind::MeanpoolLinear,
                input_dim: 5,
                output_dim: 6,
                trainable: true,
            },
            text: EncoderSpec {
                kind: EncoderKind::ByteTrigramHash,
                input_dim: 32,
                output_dim: 6,
                trainable: false,
            },
            projection: ProjectionKind::Mlp,
            embed_dim: 4,
        }
    }

    fn tensor_bits(p: &TowerParams) -> Vec<(String, Vec<u32>)> {
        let mut out = Vec::new();
        p.for_each_tensor(&mut |name, _, data| {
            out.push((name.to_string(), data.iter().map(|v| v.to_bits()).collect()));
        });
        out
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let params = TowerParams::init(&config(), 123).unwrap();
        save_checkpoint(dir.path(), &params, 42, "cfg-hash", LogitForm::PaperLiteral).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        assert_eq!(tensor_bits(&params), tensor_bits(&loaded.params));
        assert_eq!(loaded.meta.step, 42);
        assert_eq!(loaded.meta.config_hash, "cfg-hash");
        assert_eq!(loaded.meta.logit_form, LogitForm::PaperLiteral);
        assert_eq!(&loaded.meta.model, params.config());
    }

    #[test]
    fn frozen_tensors_are_persisted_too() {
        let dir = tempfile::tempdir().unwrap();
        let params = TowerParams::init(&config(), 5).unwrap();
        save_checkpoint(dir.path(), &params, 0, "h", LogitForm::SiglipConsistent).unwrap();
        assert!(dir.path().join("text_encoder.w.gt").exists());
        let loaded = load_checkpoint(dir.path()).unwrap();
        assert_eq!(tensor_bits(&params), tensor_bits(&loaded.params));
    }

    #[test]
    fn corrupted_tensor_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let params = TowerParams::init(&config(), 1).unwrap();
        save_checkpoint(dir.path(), &params, 0, "h", LogitForm::SiglipConsistent).unwrap();
        let victim = dir.path().join("proj_a.w2.gt");
        let mut bytes = std::fs::read(&victim).unwrap();
        let n = bytes.len();
        bytes[n - 10] ^= 0xff;
        std::fs::write(&victim, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()).unwrap_err(),
            GlapError::Checksum { .. }
        ));
    }

    #[test]
    fn future_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let params = TowerParams::init(&config(), 1).unwrap();
        save_checkpoint(dir.path(), &params, 0, "h", LogitForm::SiglipConsistent).unwrap();
        let meta_path = dir.path().join("meta.json");
        let body = std::fs::read_to_string(&meta_path)
            .unwrap()
            .replace("\"version\": 1", "\"version\": 2");
        std::fs::write(&meta_path, body).unwrap();
        match load_checkpoint(dir.path()).unwrap_err() {
            GlapError::Version { found, supported, .. } => {
                assert_eq!((found, supported), (2, CHECKPOINT_VERSION));
            }
            other => panic!("expected Version, got {other:?}"),
        }
    }

    #[test]
    fn missing_tensor_detected() {
        let dir = tempfile::tempdir().unwrap();
        let params = TowerParams::init(&config(), 1).unwrap();
        save_checkpoint(dir.path(), &params, 0, "h", LogitForm::SiglipConsistent).unwrap();
        std::fs::remove_file(dir.path().join("loss.beta.gt")).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()).unwrap_err(),
            GlapError::Corrupt { .. }
        ));
    }
}
