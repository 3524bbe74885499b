//! RGB images as `H x W x 3` float arrays in `[0, 1]`.

use std::path::Path;

use ndarray::Array3;

use crate::error::{Result, UldError};

/// Pixel-centre coordinates: `(x, y)` with pixel `(i, j)` centred on
/// `x = j`, `y = i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub data: Array3<f64>,
}

impl Image {
    pub fn new(data: Array3<f64>) -> Self {
        Image { data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            data: Array3::zeros((height, width, 3)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    /// Bilinear sample with zero outside the image.
    pub fn sample(&self, x: f64, y: f64, c: usize) -> f64 {
        let (h, w) = (self.height() as isize, self.width() as isize);
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (x0, y0) = (x0 as isize, y0 as isize);
        let mut acc = 0.0;
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                let weight = wx * wy;
                if weight == 0.0 {
                    continue;
                }
                let (yy, xx) = (y0 + dy, x0 + dx);
                if yy >= 0 && yy < h && xx >= 0 && xx < w {
                    acc += weight * self.data[[yy as usize, xx as usize, c]];
                }
            }
        }
        acc
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width * 3 {
            return Err(UldError::shape(
                "rgb8 buffer",
                height * width * 3,
                bytes.len(),
            ));
        }
        let data = Array3::from_shape_vec(
            (height, width, 3),
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
        .expect("checked length");
        Ok(Image { data })
    }

    /// Content digest used to derive per-image noise seeds.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.data.iter() {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width() as u32, self.height() as u32, self.to_rgb8())
            .expect("buffer sized from image");
        buf.save(path).map_err(|e| UldError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| UldError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        Image::from_rgb8(rgb.height() as usize, rgb.width() as usize, rgb.as_raw())
    }
}

/// Rounds to the nearest 8-bit level so PNG round trips are exact.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}
