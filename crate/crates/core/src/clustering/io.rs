//! Versioned binary form of a [`ClusterModel`].
//!
//! ```text
//! offset  size  field
//!      0     4  magic "ULDC"
//!      4     2  version (1)
//!      6     1  stage: 0 flat, 1 pose, 2 keypoint stage 2
//!      7     1  has parent pose label
//!      8     4  parent pose label
//!     12     4  cluster count
//!     16     4  dimension
//!     20     *  centroids, row-major f64 little-endian
//! ```

use std::fs;
use std::path::Path;

use super::{ClusterModel, ClusterStage};
use crate::error::{Result, UldError};
use crate::tape::Mat;

pub const CLUSTER_MAGIC: &[u8; 4] = b"ULDC";
const VERSION: u16 = 1;
const HEADER: usize = 20;

fn stage_code(s: ClusterStage) -> u8 {
    match s {
        ClusterStage::FlatKeypoint => 0,
        ClusterStage::PoseStage1 => 1,
        ClusterStage::KeypointStage2 => 2,
    }
}

pub fn save_cluster_model(model: &ClusterModel, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER + model.centroids.len() * 8);
    buf.extend_from_slice(CLUSTER_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(stage_code(model.stage));
    buf.push(model.parent_pose_label.is_some() as u8);
    buf.extend_from_slice(&(model.parent_pose_label.unwrap_or(0) as u32).to_le_bytes());
    buf.extend_from_slice(&(model.k() as u32).to_le_bytes());
    buf.extend_from_slice(&(model.dim() as u32).to_le_bytes());
    for v in model.centroids.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| UldError::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| UldError::io(path, e))
}

pub fn load_cluster_model(path: &Path) -> Result<ClusterModel> {
    let bytes = fs::read(path).map_err(|e| UldError::io(path, e))?;
    let err = |offset: usize, message: &str| UldError::CacheFormat {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    };
    if bytes.len() < HEADER {
        return Err(err(bytes.len(), "truncated header"));
    }
    if &bytes[0..4] != CLUSTER_MAGIC {
        return Err(err(0, "bad magic"));
    }
    if u16::from_le_bytes([bytes[4], bytes[5]]) != VERSION {
        return Err(err(4, "unsupported version"));
    }
    let stage = match bytes[6] {
        0 => ClusterStage::FlatKeypoint,
        1 => ClusterStage::PoseStage1,
        2 => ClusterStage::KeypointStage2,
        _ => return Err(err(6, "unknown stage")),
    };
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let parent = (bytes[7] != 0).then(|| u32_at(8));
    let (k, d) = (u32_at(12), u32_at(16));
    let need = HEADER + k * d * 8;
    if bytes.len() != need {
        return Err(err(bytes.len().min(need), "payload length does not match header"));
    }
    let values: Vec<f64> = bytes[HEADER..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let centroids = Mat::from_shape_vec((k, d), values).map_err(|e| err(HEADER, &e.to_string()))?;
    ClusterModel::new(centroids, stage, parent)
}
