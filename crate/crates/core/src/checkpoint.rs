//! Versioned, checksummed stage archives and the run directory layout.
//!
//! An archive is `ULDK`, a little-endian `u16` version, two reserved bytes,
//! a `u64` payload length, the JSON payload, and a SHA-256 digest of
//! everything before it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::{save_cluster_model, TrainingSet};
use crate::error::{Result, UldError};
use crate::model::LandmarkModel;
use crate::pose_proxy::Vae;
use crate::selftrain::{Optimizers, Snapshot, Stage};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ULDK";
pub const CHECKPOINT_VERSION: u16 = 1;
const HEADER: usize = 16;
const DIGEST: usize = 32;

pub const CHECKPOINT_FILE: &str = "checkpoint.uldk";
pub const LOSSES_FILE: &str = "losses.jsonl";
pub const REPORT_DIR: &str = "report";
pub const CLUSTERS_DIR: &str = "clusters";

/// Every stage draws iteration `i` from a generator derived from
/// `(seed, i)`, so the seed and the next iteration pin the random state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_iteration: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Completed iterations.
    pub iteration: usize,
    /// Set once the stage has run to its end.
    pub complete: bool,
    pub config_hash: String,
    pub rng: RngState,
    pub model: LandmarkModel,
    pub vae: Option<Vae>,
    pub optim: Optimizers,
    pub training_set: Option<TrainingSet>,
}

impl Checkpoint {
    pub fn from_snapshot(s: &Snapshot, complete: bool, config_hash: &str, seed: u64) -> Self {
        Checkpoint {
            stage: s.stage,
            iteration: s.iteration,
            complete,
            config_hash: config_hash.to_string(),
            rng: RngState {
                seed,
                next_iteration: s.iteration as u64,
            },
            model: s.model.clone(),
            vae: s.vae.cloned(),
            optim: s.optim.clone(),
            training_set: s.training_set.cloned(),
        }
    }
}

/// Lowercase hex SHA-256 of the JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn checkpoint_err(path: &Path, message: impl Into<String>) -> UldError {
    UldError::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Writes through a temporary file so a crash never leaves a torn archive.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| UldError::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| UldError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| UldError::io(path, e))
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    if !checkpoint.model.aggregator.store.is_finite() || !checkpoint.model.heads.store.is_finite() {
        return Err(checkpoint_err(path, "refusing to archive non-finite parameters"));
    }
    let payload = serde_json::to_vec(checkpoint)?;
    let mut buf = Vec::with_capacity(HEADER + payload.len() + DIGEST);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&[0, 0]);
    buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    buf.extend_from_slice(&payload);
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    write_atomic(path, &buf)
}

/// Reads an archive, verifying magic, version and checksum. With
/// `expected_hash` set, a different stored config hash is refused unless
/// `force` holds.
pub fn load_checkpoint(path: &Path, expected_hash: Option<&str>, force: bool) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| UldError::io(path, e))?;
    if bytes.len() < HEADER + DIGEST {
        return Err(checkpoint_err(path, "archive is truncated"));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(checkpoint_err(path, "not a checkpoint archive"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(checkpoint_err(path, format!("unsupported archive version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() != HEADER + len + DIGEST {
        return Err(checkpoint_err(path, "payload length does not match file size"));
    }
    let (body, digest) = bytes.split_at(HEADER + len);
    if Sha256::digest(body).as_slice() != digest {
        return Err(checkpoint_err(path, "checksum mismatch"));
    }
    let ck: Checkpoint = serde_json::from_slice(&body[HEADER..])
        .map_err(|e| checkpoint_err(path, format!("malformed payload: {e}")))?;
    if let Some(expected) = expected_hash {
        if ck.config_hash != expected {
            if force {
                log::warn!("{}: config hash differs, loading anyway", path.display());
            } else {
                return Err(UldError::ConfigHashMismatch {
                    stored: ck.config_hash,
                    current: expected.to_string(),
                });
            }
        }
    }
    Ok(ck)
}

/// `root/run_id/stage/{checkpoint.uldk, losses.jsonl, report/, clusters/}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path, run_id: &str) -> Self {
        RunDir { path: root.join(run_id) }
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.path.join(stage)
    }

    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.stage_dir(stage.as_str()).join(CHECKPOINT_FILE)
    }

    pub fn losses(&self, stage: Stage) -> PathBuf {
        self.stage_dir(stage.as_str()).join(LOSSES_FILE)
    }

    pub fn report(&self, stage: &str) -> PathBuf {
        self.stage_dir(stage).join(REPORT_DIR)
    }

    pub fn clusters(&self, stage: &str) -> PathBuf {
        self.stage_dir(stage).join(CLUSTERS_DIR)
    }

    pub fn has_checkpoint(&self, stage: Stage) -> bool {
        self.checkpoint(stage).is_file()
    }

    /// Stores every centroid set of `set` under the stage's cluster
    /// directory, one file per model and epoch.
    pub fn save_clusters(&self, stage: &str, set: &TrainingSet) -> Result<()> {
        let dir = self.clusters(stage);
        let e = set.epoch;
        let c = &set.clusters;
        if let Some(m) = &c.flat {
            save_cluster_model(m, &dir.join(format!("epoch-{e:04}-flat.uldc")))?;
        }
        if let Some(m) = &c.pose {
            save_cluster_model(m, &dir.join(format!("epoch-{e:04}-pose.uldc")))?;
        }
        for (u, m) in c.keypoint.iter().enumerate() {
            if let Some(m) = m {
                save_cluster_model(m, &dir.join(format!("epoch-{e:04}-pose{u:02}.uldc")))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::RawLayout;
    use crate::model::ModelConfig;
    use crate::nn::AdamConfig;

    fn sample_checkpoint() -> Checkpoint {
        let layout = [RawLayout { layer: 0, step: 0, height: 8, width: 8, channels: 4 }];
        let model = LandmarkModel::new(&layout, 8, 8, &ModelConfig { aggregate_channels: 4, head_hidden: 4, descriptor_dim: 4, seed: 2 }).unwrap();
        let optim = Optimizers::new(&model, AdamConfig::default());
        Checkpoint::from_snapshot(&Snapshot::new(Stage::Bootstrap, 7, &model, None, &optim, None), false, "abc", 3)
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.uldk");
        let ck = sample_checkpoint();
        save_checkpoint(&ck, &p).unwrap();
        assert_eq!(load_checkpoint(&p, Some("abc"), false).unwrap(), ck);
    }

    #[test]
    fn tampering_and_hash_changes_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.uldk");
        save_checkpoint(&sample_checkpoint(), &p).unwrap();
        assert!(matches!(load_checkpoint(&p, Some("xyz"), false), Err(UldError::ConfigHashMismatch { .. })));
        assert!(load_checkpoint(&p, Some("xyz"), true).is_ok());
        let mut bytes = fs::read(&p).unwrap();
        bytes[HEADER + 10] ^= 1;
        fs::write(&p, bytes).unwrap();
        let err = load_checkpoint(&p, None, false).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");
    }
}
