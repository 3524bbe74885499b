//! Binary feature cache.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//!      0     4  magic "ULDF"
//!      4     2  version (1)
//!      6     2  dtype: 1 = f32, 2 = f64
//!      8     4  height
//!     12     4  width
//!     16     4  channels
//!     20     8  seed
//!     28     4  provenance length in bytes
//!     32     n  provenance (UTF-8)
//!   32+n     *  values, row-major H x W x D, little-endian
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array3;

use super::FeatureMap;
use crate::error::{Result, UldError};

pub const CACHE_MAGIC: &[u8; 4] = b"ULDF";
pub const CACHE_HEADER_LEN: usize = 32;
const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureDtype {
    F32,
    F64,
}

impl FeatureDtype {
    fn code(self) -> u16 {
        match self {
            FeatureDtype::F32 => 1,
            FeatureDtype::F64 => 2,
        }
    }

    fn width(self) -> usize {
        match self {
            FeatureDtype::F32 => 4,
            FeatureDtype::F64 => 8,
        }
    }
}

pub fn cache_features(map: &FeatureMap, path: &Path, dtype: FeatureDtype, seed: u64) -> Result<()> {
    let (h, w, d) = map.grid.dim();
    let prov = map.provenance.as_bytes();
    let mut buf = Vec::with_capacity(CACHE_HEADER_LEN + prov.len() + h * w * d * dtype.width());
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&dtype.code().to_le_bytes());
    for v in [h, w, d] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&seed.to_le_bytes());
    buf.extend_from_slice(&(prov.len() as u32).to_le_bytes());
    buf.extend_from_slice(prov);
    for &v in map.grid.iter() {
        match dtype {
            FeatureDtype::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
            FeatureDtype::F64 => buf.extend_from_slice(&v.to_le_bytes()),
        }
    }
    fs::write(path, buf).map_err(|e| UldError::io(path, e))
}

pub fn load_features(path: &Path) -> Result<FeatureMap> {
    let bytes = fs::read(path).map_err(|e| UldError::io(path, e))?;
    let err = |offset: usize, message: String| UldError::CacheFormat {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < CACHE_HEADER_LEN {
        return Err(err(bytes.len(), format!("file is {} bytes, shorter than the header", bytes.len())));
    }
    if &bytes[0..4] != CACHE_MAGIC {
        return Err(err(0, "bad magic".into()));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let version = u16_at(4);
    if version != VERSION {
        return Err(err(4, format!("unsupported version {version}")));
    }
    let dtype = match u16_at(6) {
        1 => FeatureDtype::F32,
        2 => FeatureDtype::F64,
        other => return Err(err(6, format!("unknown dtype code {other}"))),
    };
    let (h, w, d) = (u32_at(8), u32_at(12), u32_at(16));
    if h == 0 || w == 0 || d == 0 {
        return Err(err(8, format!("empty grid {h}x{w}x{d}")));
    }
    let plen = u32_at(28);
    let data_start = CACHE_HEADER_LEN + plen;
    if bytes.len() < data_start {
        return Err(err(CACHE_HEADER_LEN, "provenance runs past end of file".into()));
    }
    let provenance = String::from_utf8(bytes[CACHE_HEADER_LEN..data_start].to_vec())
        .map_err(|_| err(CACHE_HEADER_LEN, "provenance is not UTF-8".into()))?;
    let expected = h * w * d * dtype.width();
    let payload = &bytes[data_start..];
    if payload.len() != expected {
        return Err(err(
            data_start + payload.len().min(expected),
            format!("expected {expected} data bytes, found {}", payload.len()),
        ));
    }
    let values: Vec<f64> = match dtype {
        FeatureDtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        FeatureDtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    let grid = Array3::from_shape_vec((h, w, d), values).expect("checked length");
    Ok(FeatureMap::new(grid, provenance))
}
