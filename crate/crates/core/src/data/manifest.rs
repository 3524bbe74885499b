//! Line-delimited JSON annotation format and dataset ingestion.
//!
//! `annotations.jsonl` holds one record per image:
//!
//! ```text
//! {"id":"img_0001","path":"images/img_0001.png","landmarks":[x0,y0,x1,y1,...],
//!  "visible":[true,...],"yaw":-12.5,"roi":[x_min,y_min,x_max,y_max],
//!  "d_iod":41.2,"split":"train"}
//! ```
//!
//! Every field except `id` and `path` is optional. Synthetic datasets also
//! carry the generating `scene`.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UldError};

use super::synthetic::SyntheticScene;

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visible: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub yaw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_iod: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SyntheticScene>,
}

impl ManifestEntry {
    pub fn num_landmarks(&self) -> Option<usize> {
        self.landmarks.as_ref().map(|l| l.len() / 2)
    }

    pub fn landmark_points(&self) -> Option<Vec<[f64; 2]>> {
        self.landmarks
            .as_ref()
            .map(|l| l.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
    }

    pub fn is_split(&self, split: &str) -> bool {
        self.split.as_deref() == Some(split)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub landmark_count: Option<usize>,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatId {
    GenericJsonLines,
    Synthetic,
}

impl FormatId {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "generic_json_lines" => Ok(FormatId::GenericJsonLines),
            "synthetic" => Ok(FormatId::Synthetic),
            other => Err(UldError::InvalidArgument(format!(
                "unknown dataset format '{other}' (expected generic_json_lines or synthetic)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FormatId::GenericJsonLines => "generic_json_lines",
            FormatId::Synthetic => "synthetic",
        }
    }
}

/// Outcome of [`ingest_dataset`]: the validated manifest plus anything that
/// was dropped or worth flagging.
#[derive(Debug, Clone, PartialEq)]
pub struct IngestReport {
    pub manifest: DatasetManifest,
    pub missing_images: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

impl DatasetManifest {
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, root: &Path) -> Result<PathBuf> {
        fs::create_dir_all(root).map_err(|e| UldError::io(root, e))?;
        let path = root.join(ANNOTATIONS_FILE);
        fs::write(&path, self.to_json_lines()?).map_err(|e| UldError::io(&path, e))?;
        Ok(path)
    }

    pub fn split(&self, name: &str) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.is_split(name)).collect()
    }
}

/// Parses and validates annotation lines without touching the filesystem.
pub fn parse_annotations(text: &str, format: FormatId) -> Result<DatasetManifest> {
    let mut entries = Vec::new();
    let mut ids = HashSet::new();
    let mut landmark_count: Option<usize> = None;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| UldError::Manifest {
            line: lineno,
            message: e.to_string(),
        })?;
        let fail = |message: String| UldError::Manifest {
            line: lineno,
            message,
        };
        if !ids.insert(entry.id.clone()) {
            return Err(fail(format!("duplicate image id '{}'", entry.id)));
        }
        if let Some(l) = &entry.landmarks {
            if l.len() % 2 != 0 {
                return Err(fail("landmark list has an odd number of coordinates".into()));
            }
            if l.iter().any(|v| !v.is_finite()) {
                return Err(fail("non-finite landmark coordinate".into()));
            }
            let n = l.len() / 2;
            match landmark_count {
                None => landmark_count = Some(n),
                Some(expected) if expected != n => {
                    return Err(fail(format!(
                        "entry has {n} landmarks but the dataset has {expected}"
                    )));
                }
                _ => {}
            }
            if let Some(v) = &entry.visible {
                if v.len() != n {
                    return Err(fail(format!("{} visibility flags for {n} landmarks", v.len())));
                }
            }
        }
        if let Some(r) = entry.roi {
            if !(r[0] < r[2] && r[1] < r[3]) {
                return Err(fail(format!("degenerate roi {r:?}")));
            }
        }
        if let Some(d) = entry.d_iod {
            if !(d > 0.0) {
                return Err(fail(format!("d_iod must be positive, got {d}")));
            }
        }
        if format == FormatId::Synthetic && entry.scene.is_none() {
            return Err(fail("synthetic format requires a scene".into()));
        }
        entries.push(entry);
    }
    Ok(DatasetManifest {
        format: format.as_str().to_string(),
        landmark_count,
        entries,
    })
}

/// Reads `root/annotations.jsonl`, validates it and drops entries whose
/// image file is missing.
pub fn ingest_dataset(root: &Path, format_id: &str) -> Result<IngestReport> {
    let format = FormatId::parse(format_id)?;
    let path = root.join(ANNOTATIONS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| UldError::io(&path, e))?;
    let mut manifest = parse_annotations(&text, format)?;
    let mut warnings = Vec::new();
    if manifest.entries.is_empty() {
        let msg = format!("{} contains no entries", path.display());
        warn!("{msg}");
        warnings.push(msg);
    }
    let mut missing = Vec::new();
    manifest.entries.retain(|e| {
        let p = root.join(&e.path);
        if p.is_file() {
            true
        } else {
            missing.push(p);
            false
        }
    });
    for p in &missing {
        let msg = format!("image {} is missing; entry excluded", p.display());
        warn!("{msg}");
        warnings.push(msg);
    }
    Ok(IngestReport {
        manifest,
        missing_images: missing,
        warnings,
    })
}
