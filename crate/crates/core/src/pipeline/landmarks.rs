use crate::backbone::{upscale_stack, GroundTruthBoxRoi, FullImageRoi, RoiProvider, RoiRegion, SceneSupportRoi, UpscaledStack};
use crate::clustering::{assign, exemplar_assign, ClusterModel, ImageRecord, LabelledKeypoint};
use crate::data::Sample;
use crate::error::Result;
use crate::eval::{LabelledLandmarks, LandmarkDetector};
use crate::geometry::SimilarityTransform;
use crate::heads::{l2_normalize, Keypoint};
use crate::model::{FeatureSource, LandmarkModel, NmsConfig};

use super::config::RoiKind;

/// `(label, position)` pairs.
pub type LabelledPoints = Vec<(usize, [f64; 2])>;

pub fn to_labelled(points: &[(usize, [f64; 2])], k: usize) -> LabelledLandmarks {
    let mut out = vec![None; k];
    for &(l, p) in points {
        if l < k {
            out[l] = Some(p);
        }
    }
    out
}

fn exemplars(keypoints: Vec<Keypoint>, descriptors: Vec<Vec<f64>>, clusters: &ClusterModel) -> Result<LabelledPoints> {
    if keypoints.is_empty() {
        return Ok(Vec::new());
    }
    let (labels, _) = assign(&descriptors, clusters)?;
    let items: Vec<LabelledKeypoint> = keypoints
        .into_iter()
        .zip(descriptors)
        .zip(labels)
        .map(|((keypoint, descriptor), label)| LabelledKeypoint { keypoint, descriptor, label })
        .collect();
    Ok(exemplar_assign(&items, clusters)?
        .into_iter()
        .map(|e| (e.label, [e.keypoint.x, e.keypoint.y]))
        .collect())
}

/// Exemplar keypoints of an already labelled training record.
pub fn record_points(record: &ImageRecord) -> LabelledPoints {
    record
        .keypoints
        .iter()
        .zip(&record.labels)
        .map(|(k, l)| (l.cluster, [k.x, k.y]))
        .collect()
}

/// Trained model plus a flat centroid set naming its keypoints.
pub struct ModelDetector<'a> {
    pub model: &'a LandmarkModel,
    pub source: &'a FeatureSource,
    pub clusters: &'a ClusterModel,
    pub nms: NmsConfig,
}

impl ModelDetector<'_> {
    pub fn detect_stack(&self, stack: &UpscaledStack) -> Result<LabelledPoints> {
        let d = self.model.detect_keypoints(stack, &self.nms)?;
        exemplars(d.keypoints, d.descriptors, self.clusters)
    }
}

impl LandmarkDetector for ModelDetector<'_> {
    fn detect_labelled(&self, sample: &Sample, transform: &SimilarityTransform) -> Result<LabelledPoints> {
        let raw = self.source.raw_transformed(sample, transform)?;
        self.detect_stack(&upscale_stack(&raw, self.model.height(), self.model.width()))
    }
}

pub fn roi_provider(kind: RoiKind) -> Box<dyn RoiProvider> {
    match kind {
        RoiKind::FullImage => Box::new(FullImageRoi),
        RoiKind::GroundTruthBox => Box::new(GroundTruthBoxRoi),
        RoiKind::SceneSupport => Box::new(SceneSupportRoi),
    }
}

fn member(region: &RoiRegion, x: usize, y: usize) -> bool {
    region.roi.contains(x, y) && region.mask.as_ref().is_none_or(|m| m[y * region.image_width + x])
}

/// Pixels of the transformed image whose nearest preimage pixel lies in
/// the sample's region.
pub fn transformed_region_pixels(region: &RoiRegion, transform: &SimilarityTransform, width: usize, height: usize) -> Vec<(usize, usize)> {
    if transform.is_identity() {
        return region.pixels();
    }
    let mut out = Vec::new();
    for y in 0..height {
        for x in 0..width {
            let (sx, sy) = transform.apply_inverse(x as f64, y as f64);
            let (rx, ry) = (sx.round(), sy.round());
            if rx < 0.0 || ry < 0.0 || rx >= width as f64 || ry >= height as f64 {
                continue;
            }
            if member(region, rx as usize, ry as usize) {
                out.push((x, y));
            }
        }
    }
    out
}

/// Dense parameter-free descriptors labelled by nearest centroid, one
/// exemplar pixel per label.
pub struct ZeroShotDetector<'a> {
    pub source: &'a FeatureSource,
    pub clusters: &'a ClusterModel,
    pub roi: RoiKind,
}

impl LandmarkDetector for ZeroShotDetector<'_> {
    fn detect_labelled(&self, sample: &Sample, transform: &SimilarityTransform) -> Result<LabelledPoints> {
        let (w, h) = (sample.image.width(), sample.image.height());
        let features = if transform.is_identity() {
            self.source.plain_features(sample)?
        } else {
            self.source.plain_features_transformed(sample, transform)?
        };
        let region = roi_provider(self.roi).region(sample)?;
        let pixels = transformed_region_pixels(&region, transform, w, h);
        let keypoints: Vec<Keypoint> = pixels
            .iter()
            .map(|&(x, y)| Keypoint { x: x as f64, y: y as f64, score: 1.0 })
            .collect();
        let descriptors: Vec<Vec<f64>> = pixels
            .iter()
            .map(|&(x, y)| l2_normalize(&features.grid.slice(ndarray::s![y, x, ..]).to_vec()))
            .collect();
        exemplars(keypoints, descriptors, self.clusters)
    }
}

/// Share of discovered landmarks lying on the true identity that their
/// label most often lies on. Landmarks off every identity never count.
/// `None` without synthetic scenes.
pub fn purity(samples: &[&Sample], points: &[LabelledPoints]) -> Option<f64> {
    let mut counts: std::collections::BTreeMap<usize, std::collections::BTreeMap<usize, usize>> = Default::default();
    let mut total = 0usize;
    for (s, pts) in samples.iter().zip(points) {
        let scene = s.scene.as_ref()?;
        for &(label, p) in pts {
            total += 1;
            let (x, y) = (p[0].round(), p[1].round());
            if x < 0.0 || y < 0.0 {
                continue;
            }
            if let Some(id) = scene.identity_at(x as usize, y as usize) {
                *counts.entry(label).or_default().entry(id).or_default() += 1;
            }
        }
    }
    if total == 0 {
        return None;
    }
    let hits: usize = counts.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    Some(100.0 * hits as f64 / total as f64)
}
