//! Datasets: annotation manifests, synthetic scene generation and the
//! in-memory sample collection consumed by the pipeline.

pub mod manifest;
pub mod synthetic;

use std::path::Path;

use crate::error::{Result, UldError};
use crate::image::Image;

pub use manifest::{ingest_dataset, DatasetManifest, FormatId, IngestReport, ManifestEntry};
pub use synthetic::{
    generate_synthetic_dataset, Deformation, PoseDistribution, SyntheticConfig, SyntheticScene,
};

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub landmarks: Option<Vec<[f64; 2]>>,
    pub visible: Option<Vec<bool>>,
    pub yaw: Option<f64>,
    pub roi: Option<[f64; 4]>,
    pub d_iod: Option<f64>,
    pub split: Option<String>,
    pub scene: Option<SyntheticScene>,
}

impl Sample {
    fn from_entry(entry: &ManifestEntry, image: Image) -> Self {
        Sample {
            id: entry.id.clone(),
            image,
            landmarks: entry.landmark_points(),
            visible: entry.visible.clone(),
            yaw: entry.yaw,
            roi: entry.roi,
            d_iod: entry.d_iod,
            split: entry.split.clone(),
            scene: entry.scene.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

/// Renders a synthetic dataset into `root`: PNG images under `images/`
/// plus the annotation file.
pub fn write_synthetic_dataset(config: &SyntheticConfig, root: &Path) -> Result<DatasetManifest> {
    let (samples, manifest) = generate_synthetic_dataset(config)?;
    let dir = root.join("images");
    std::fs::create_dir_all(&dir).map_err(|e| UldError::io(&dir, e))?;
    for (s, e) in samples.iter().zip(&manifest.entries) {
        s.image.save_png(&root.join(&e.path))?;
    }
    manifest.write(root)?;
    Ok(manifest)
}

impl Dataset {
    pub fn from_synthetic(samples: Vec<synthetic::SyntheticSample>, manifest: &DatasetManifest) -> Self {
        let samples = samples
            .into_iter()
            .zip(&manifest.entries)
            .map(|(s, e)| Sample::from_entry(e, s.image))
            .collect();
        Dataset { samples }
    }

    pub fn synthetic(config: &SyntheticConfig) -> Result<Self> {
        let (samples, manifest) = generate_synthetic_dataset(config)?;
        Ok(Dataset::from_synthetic(samples, &manifest))
    }

    /// Loads every image referenced by `manifest`, relative to `root`.
    pub fn load(root: &Path, manifest: &DatasetManifest) -> Result<Self> {
        let samples = manifest
            .entries
            .iter()
            .map(|e| Ok(Sample::from_entry(e, Image::load_png(&root.join(&e.path))?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Indices tagged with `split`; untagged datasets put everything in
    /// `train`.
    pub fn split_indices(&self, split: &str) -> Vec<usize> {
        let tagged = self.samples.iter().any(|s| s.split.is_some());
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| match &s.split {
                Some(name) => name == split,
                None => !tagged && split == "train",
            })
            .map(|(i, _)| i)
            .collect()
    }

    pub fn image_size(&self) -> Result<(usize, usize)> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| UldError::InvalidArgument("dataset is empty".into()))?;
        let (h, w) = (first.image.height(), first.image.width());
        if let Some(bad) = self
            .samples
            .iter()
            .find(|s| s.image.height() != h || s.image.width() != w)
        {
            return Err(UldError::shape("dataset image size", format!("{h}x{w}"), format!(
                "{}x{} ({})",
                bad.image.height(),
                bad.image.width(),
                bad.id
            )));
        }
        Ok((h, w))
    }
}
