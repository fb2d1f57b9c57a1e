//! Checkpoint container.
//!
//! Layout (integers little-endian):
//!
//! | bytes | content                                           |
//! |-------|---------------------------------------------------|
//! | 8     | magic `SEGRLCK\0`                                 |
//! | 4     | `u32` format version                              |
//! | 8     | `u64` model fingerprint                           |
//! | 8     | `u64` payload length `N`                          |
//! | N     | payload, a [`crate::tensorfile`] container        |
//! | 32    | SHA-256 of every preceding byte                   |
//!
//! The payload metadata holds the model spec, training mode, epoch, best
//! validation mIoU and the reward baseline; the tensors are the trainable
//! weights under their `Module::params` names.

use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, SegModel};
use crate::nn::Module;
use crate::rl::BaselineState;
use crate::tensorfile;
use crate::trainer::AblationMode;

pub const MAGIC: &[u8; 8] = b"SEGRLCK\0";
pub const VERSION: u32 = 1;
const PREFIX: usize = 8 + 4 + 8 + 8;
const DIGEST: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointBundle {
    pub spec: ModelSpec,
    pub model: SegModel<f32>,
    pub mode: AblationMode,
    pub baseline: BaselineState,
    pub epoch: usize,
    pub best_val_miou: f64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    spec: ModelSpec,
    mode: AblationMode,
    baseline: BaselineState,
    epoch: usize,
    best_val_miou: f64,
}

impl CheckpointBundle {
    pub fn fingerprint(&self) -> u64 {
        self.spec.fingerprint()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = Meta {
            spec: self.spec.clone(),
            mode: self.mode,
            baseline: self.baseline,
            epoch: self.epoch,
            best_val_miou: self.best_val_miou,
        };
        let payload = tensorfile::encode(
            serde_json::to_value(&meta).expect("metadata serializes"),
            &self.model.params(),
        );
        let mut out = Vec::with_capacity(PREFIX + payload.len() + DIGEST);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint().to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Checks, in order: magic, checksum, version, payload, fingerprint.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..8] != MAGIC {
            return Err(Error::integrity(path, "bad magic bytes, not a checkpoint"));
        }
        if bytes.len() < PREFIX + DIGEST {
            return Err(Error::integrity(path, "file truncated"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::integrity(path, "checksum mismatch"));
        }
        let u32_at = |i: usize| u32::from_le_bytes(body[i..i + 4].try_into().expect("4 bytes"));
        let u64_at = |i: usize| u64::from_le_bytes(body[i..i + 8].try_into().expect("8 bytes"));
        let version = u32_at(8);
        if version != VERSION {
            return Err(Error::Incompatible {
                path: path.to_path_buf(),
                found: version,
                expected: VERSION,
            });
        }
        let fingerprint = u64_at(12);
        let len = u64_at(20) as usize;
        if body.len() != PREFIX + len {
            return Err(Error::integrity(path, "payload length does not match file size"));
        }
        let file = tensorfile::decode(&body[PREFIX..])
            .map_err(|e| Error::integrity(path, format!("payload: {e}")))?;
        let meta: Meta = serde_json::from_value(file.metadata.clone())
            .map_err(|e| Error::integrity(path, format!("metadata: {e}")))?;
        if meta.spec.fingerprint() != fingerprint {
            return Err(Error::integrity(path, "fingerprint does not match stored spec"));
        }
        let mut model = SegModel::new(&meta.spec, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        let shapes: Vec<(String, Vec<usize>)> = model
            .params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        for ((name, shape), slot) in shapes.iter().zip(model.params_mut()) {
            *slot = file.expect(name, shape)?;
        }
        Ok(CheckpointBundle {
            spec: meta.spec,
            model,
            mode: meta.mode,
            baseline: meta.baseline,
            epoch: meta.epoch,
            best_val_miou: meta.best_val_miou,
        })
    }

    /// Writes to a sibling temp file and renames it into place, so a failed
    /// write never leaves a half-written checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Errors unless the checkpoint was written for `spec`.
    pub fn check_spec(&self, spec: &ModelSpec, path: &Path) -> Result<()> {
        if self.spec != *spec {
            return Err(Error::Config(format!(
                "checkpoint {} was trained with a different model configuration (fingerprint {:016x}, expected {:016x})",
                path.display(),
                self.fingerprint(),
                spec.fingerprint()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderConfig;
    use crate::encoder::EncoderConfig;
    use crate::rl::ActionSpace;

    fn bundle() -> CheckpointBundle {
        let spec = ModelSpec {
            side: 16,
            num_classes: 3,
            encoder: EncoderConfig {
                patch_size: 4,
                embed_dim: 8,
                num_layers: 2,
                ..Default::default()
            },
            decoder: DecoderConfig {
                fused_channels: 8,
                min_channels: 4,
                skips: true,
            },
            actions: ActionSpace::default(),
        };
        let model = SegModel::new(&spec, &mut rand_chacha::ChaCha8Rng::seed_from_u64(7)).unwrap();
        let mut baseline = BaselineState::new(0.9).unwrap();
        baseline.update(0.012_345_678_9);
        CheckpointBundle {
            spec,
            model,
            mode: AblationMode::CurriculumRl,
            baseline,
            epoch: 4,
            best_val_miou: 0.123_456_789_012_345_6,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let b = bundle();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best.ckpt");
        b.save(&path).unwrap();
        let back = CheckpointBundle::load(&path).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.best_val_miou.to_bits(), b.best_val_miou.to_bits());
        assert!(!path.with_extension("tmp").exists());
    }

    #[test]
    fn corruption_is_detected() {
        let b = bundle();
        let p = Path::new("x.ckpt");
        let bytes = b.to_bytes();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(CheckpointBundle::from_bytes(&bad_magic, p), Err(Error::Integrity { .. })));

        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 0x10;
        assert!(matches!(CheckpointBundle::from_bytes(&flipped, p), Err(Error::Integrity { .. })));

        let truncated = &bytes[..bytes.len() - 5];
        assert!(matches!(CheckpointBundle::from_bytes(truncated, p), Err(Error::Integrity { .. })));
        assert!(matches!(CheckpointBundle::from_bytes(b"", p), Err(Error::Integrity { .. })));
    }

    #[test]
    fn version_mismatch_is_incompatible() {
        let mut bytes = bundle().to_bytes();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        // re-seal so only the version differs
        let n = bytes.len() - DIGEST;
        let digest = Sha256::digest(&bytes[..n]);
        bytes[n..].copy_from_slice(&digest);
        match CheckpointBundle::from_bytes(&bytes, Path::new("v.ckpt")) {
            Err(Error::Incompatible { found: 2, expected: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn spec_check() {
        let b = bundle();
        assert!(b.check_spec(&b.spec.clone(), Path::new("a")).is_ok());
        let mut other = b.spec.clone();
        other.num_classes = 4;
        assert!(b.check_spec(&other, Path::new("a")).is_err());
    }
}
