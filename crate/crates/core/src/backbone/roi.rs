use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Result, UldError};

/// Integer pixel box; `x_max` and `y_max` are exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoI {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl RoI {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Result<Self> {
        if x_min >= x_max || y_min >= y_max {
            return Err(UldError::InvalidArgument(format!(
                "degenerate roi ({x_min}, {y_min}, {x_max}, {y_max})"
            )));
        }
        Ok(RoI { x_min, y_min, x_max, y_max })
    }

    pub fn full(width: usize, height: usize) -> Self {
        RoI { x_min: 0, y_min: 0, x_max: width, y_max: height }
    }

    /// Pixel box covering the real-valued `[x_min, y_min, x_max, y_max]`,
    /// clamped to a `width x height` image.
    pub fn from_box(b: [f64; 4], width: usize, height: usize) -> Self {
        let clamp = |v: f64, hi: usize| (v.floor().max(0.0) as usize).min(hi - 1);
        let x_min = clamp(b[0], width);
        let y_min = clamp(b[1], height);
        let x_max = (clamp(b[2], width) + 1).max(x_min + 1);
        let y_max = (clamp(b[3], height) + 1).max(y_min + 1);
        RoI { x_min, y_min, x_max, y_max }
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x_min..self.x_max).contains(&x) && (self.y_min..self.y_max).contains(&y)
    }
}

/// A box plus an optional row-major mask over the whole image restricting
/// which pixels inside the box count.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiRegion {
    pub roi: RoI,
    pub image_width: usize,
    pub mask: Option<Vec<bool>>,
}

impl RoiRegion {
    /// Member pixels as `(x, y)` in raster order.
    pub fn pixels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.roi.area());
        for y in self.roi.y_min..self.roi.y_max {
            for x in self.roi.x_min..self.roi.x_max {
                if self.mask.as_ref().is_none_or(|m| m[y * self.image_width + x]) {
                    out.push((x, y));
                }
            }
        }
        out
    }
}

/// Source of the region from which descriptors are sampled.
pub trait RoiProvider: Send + Sync {
    fn name(&self) -> &str;
    fn region(&self, sample: &Sample) -> Result<RoiRegion>;
}

fn full_region(sample: &Sample) -> RoiRegion {
    let (w, h) = (sample.image.width(), sample.image.height());
    RoiRegion { roi: RoI::full(w, h), image_width: w, mask: None }
}

fn box_region(sample: &Sample) -> RoiRegion {
    let (w, h) = (sample.image.width(), sample.image.height());
    let b = sample.roi.or_else(|| {
        sample.landmarks.as_ref().filter(|l| !l.is_empty()).map(|l| {
            let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
            for p in l {
                b = [b[0].min(p[0]), b[1].min(p[1]), b[2].max(p[0]), b[3].max(p[1])];
            }
            b
        })
    });
    match b {
        Some(b) => RoiRegion { roi: RoI::from_box(b, w, h), image_width: w, mask: None },
        None => full_region(sample),
    }
}

/// Whole image.
#[derive(Debug, Clone, Copy, Default)]
pub struct FullImageRoi;

impl RoiProvider for FullImageRoi {
    fn name(&self) -> &str {
        "full_image"
    }

    fn region(&self, sample: &Sample) -> Result<RoiRegion> {
        Ok(full_region(sample))
    }
}

/// Annotated box, else the landmark bounding box, else the whole image.
#[derive(Debug, Clone, Copy, Default)]
pub struct GroundTruthBoxRoi;

impl RoiProvider for GroundTruthBoxRoi {
    fn name(&self) -> &str {
        "ground_truth_box"
    }

    fn region(&self, sample: &Sample) -> Result<RoiRegion> {
        Ok(box_region(sample))
    }
}

/// Object support of a synthetic scene: the union of landmark discs.
/// Samples without a scene fall back to the ground-truth box.
#[derive(Debug, Clone, Copy, Default)]
pub struct SceneSupportRoi;

impl RoiProvider for SceneSupportRoi {
    fn name(&self) -> &str {
        "scene_support"
    }

    fn region(&self, sample: &Sample) -> Result<RoiRegion> {
        let Some(scene) = &sample.scene else {
            return Ok(box_region(sample));
        };
        let mask: Vec<bool> = scene.identity_map().iter().map(Option::is_some).collect();
        if !mask.iter().any(|&m| m) {
            return Ok(box_region(sample));
        }
        let roi = RoI::from_box(scene.support_box(), scene.width, scene.height);
        Ok(RoiRegion { roi, image_width: scene.width, mask: Some(mask) })
    }
}

fn draw(pool: Vec<(usize, usize)>, n: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if n == 0 {
        return Err(UldError::InvalidArgument("must sample at least one pixel".into()));
    }
    if n > pool.len() {
        return Err(UldError::InvalidArgument(format!(
            "cannot sample {n} distinct pixels from a region of {}",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(index::sample(&mut rng, pool.len(), n).into_iter().map(|i| pool[i]).collect())
}

/// `n` distinct `(x, y)` pixels drawn uniformly from `roi`.
pub fn sample_roi_pixels(roi: &RoI, n: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let region = RoiRegion { roi: *roi, image_width: roi.x_max, mask: None };
    draw(region.pixels(), n, seed)
}

/// `n` distinct pixels drawn uniformly from a (possibly masked) region.
pub fn sample_region_pixels(region: &RoiRegion, n: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    draw(region.pixels(), n, seed)
}
