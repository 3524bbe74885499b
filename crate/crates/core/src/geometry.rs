//! Similarity transforms about the image centre and resampling helpers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::tape::{Mat, RowMix};

/// `p' = R(angle) * scale * F(p - c) + c + t`, where `c` is the image
/// centre and `F` mirrors the x axis when `flip` is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub angle: f64,
    pub flip: bool,
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
    pub cx: f64,
    pub cy: f64,
}

impl SimilarityTransform {
    pub fn identity(width: usize, height: usize) -> Self {
        SimilarityTransform {
            angle: 0.0,
            flip: false,
            scale: 1.0,
            tx: 0.0,
            ty: 0.0,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.angle == 0.0 && !self.flip && self.scale == 1.0 && self.tx == 0.0 && self.ty == 0.0
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        if self.is_identity() {
            return (x, y);
        }
        let mut dx = x - self.cx;
        let dy = y - self.cy;
        if self.flip {
            dx = -dx;
        }
        let (s, c) = self.angle.sin_cos();
        (
            self.scale * (c * dx - s * dy) + self.cx + self.tx,
            self.scale * (s * dx + c * dy) + self.cy + self.ty,
        )
    }

    pub fn apply_inverse(&self, x: f64, y: f64) -> (f64, f64) {
        if self.is_identity() {
            return (x, y);
        }
        let dx = (x - self.cx - self.tx) / self.scale;
        let dy = (y - self.cy - self.ty) / self.scale;
        let (s, c) = self.angle.sin_cos();
        let mut ux = c * dx + s * dy;
        let uy = -s * dx + c * dy;
        if self.flip {
            ux = -ux;
        }
        (ux + self.cx, uy + self.cy)
    }

    pub fn inverse(&self) -> InverseTransform {
        InverseTransform(*self)
    }
}

/// View of a transform that maps in the opposite direction.
#[derive(Debug, Clone, Copy)]
pub struct InverseTransform(SimilarityTransform);

/// Anything that maps image coordinates to image coordinates.
pub trait PointMap {
    fn map(&self, x: f64, y: f64) -> (f64, f64);
    fn unmap(&self, x: f64, y: f64) -> (f64, f64);
}

impl PointMap for SimilarityTransform {
    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        self.apply(x, y)
    }

    fn unmap(&self, x: f64, y: f64) -> (f64, f64) {
        self.apply_inverse(x, y)
    }
}

impl PointMap for InverseTransform {
    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        self.0.apply_inverse(x, y)
    }

    fn unmap(&self, x: f64, y: f64) -> (f64, f64) {
        self.0.apply(x, y)
    }
}

/// Bounds for random augmentations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub max_angle_deg: f64,
    pub flip_prob: f64,
    pub scale_range: (f64, f64),
    pub max_shift: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_angle_deg: 30.0,
            flip_prob: 0.5,
            scale_range: (1.0, 1.0),
            max_shift: 0.0,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            max_angle_deg: 0.0,
            flip_prob: 0.0,
            scale_range: (1.0, 1.0),
            max_shift: 0.0,
        }
    }

    pub fn sample<R: Rng>(&self, width: usize, height: usize, rng: &mut R) -> SimilarityTransform {
        let mut t = SimilarityTransform::identity(width, height);
        if self.max_angle_deg > 0.0 {
            t.angle = rng.random_range(-self.max_angle_deg..=self.max_angle_deg).to_radians();
        }
        if self.flip_prob > 0.0 {
            t.flip = rng.random_bool(self.flip_prob.min(1.0));
        }
        if self.scale_range.0 < self.scale_range.1 {
            t.scale = rng.random_range(self.scale_range.0..=self.scale_range.1);
        } else {
            t.scale = self.scale_range.0;
        }
        if self.max_shift > 0.0 {
            t.tx = rng.random_range(-self.max_shift..=self.max_shift);
            t.ty = rng.random_range(-self.max_shift..=self.max_shift);
        }
        t
    }
}

fn inside(x: f64, y: f64, width: usize, height: usize) -> bool {
    x >= 0.0 && y >= 0.0 && x <= (width - 1) as f64 && y <= (height - 1) as f64
}

/// Resampling operator for `warped(q) = source(map^-1(q))` with bilinear
/// interpolation, plus the mask of output pixels whose preimage lies inside
/// the source. Pixels outside get zero.
pub fn warp_mix(map: &dyn PointMap, width: usize, height: usize) -> (RowMix, Vec<bool>) {
    let mut rows = Vec::with_capacity(width * height);
    let mut mask = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let (sx, sy) = map.unmap(x as f64, y as f64);
            let ok = inside(sx, sy, width, height);
            mask.push(ok);
            let mut row = Vec::new();
            if ok {
                let x0 = (sx.floor() as usize).min(width - 1);
                let y0 = (sy.floor() as usize).min(height - 1);
                let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                let x1 = (x0 + 1).min(width - 1);
                let y1 = (y0 + 1).min(height - 1);
                for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                    for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                        let w = wx * wy;
                        if w != 0.0 {
                            let idx = yy * width + xx;
                            match row.iter_mut().find(|(j, _): &&mut (usize, f64)| *j == idx) {
                                Some(e) => e.1 += w,
                                None => row.push((idx, w)),
                            }
                        }
                    }
                }
            }
            rows.push(row);
        }
    }
    (RowMix { n_in: width * height, rows }, mask)
}

/// Mask of source pixels whose image under `map` lands inside the canvas.
pub fn forward_mask(map: &dyn PointMap, width: usize, height: usize) -> Vec<bool> {
    let mut mask = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let (tx, ty) = map.map(x as f64, y as f64);
            mask.push(inside(tx, ty, width, height));
        }
    }
    mask
}

/// Applies `map` to an image (zero fill outside). Identity maps return an
/// exact copy.
pub fn warp_image(image: &Image, map: &dyn PointMap) -> Image {
    let (h, w, c) = image.data.dim();
    let (mix, _) = warp_mix(map, w, h);
    let flat = Mat::from_shape_vec((h * w, c), image.data.iter().copied().collect()).expect("contiguous");
    let out = mix.apply(&flat);
    Image::new(ndarray::Array3::from_shape_vec((h, w, c), out.into_iter().collect()).expect("row-major"))
}
