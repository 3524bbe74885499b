//! Detector and descriptor heads, peak extraction and Gaussian heatmap
//! rendering.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{Result, UldError};
use crate::nn::{Activation, Conv, ParamStore};
use crate::tape::{Mat, RowMix, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeatmapSource {
    DetectorOutput,
    PseudoGt,
}

/// Single-channel `H x W` map with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub grid: Array2<f64>,
    pub source: HeatmapSource,
}

impl Heatmap {
    pub fn new(grid: Array2<f64>, source: HeatmapSource) -> Self {
        Heatmap { grid, source }
    }

    pub fn height(&self) -> usize {
        self.grid.nrows()
    }

    pub fn width(&self) -> usize {
        self.grid.ncols()
    }

    /// Raster-order `(H*W) x 1` column.
    pub fn to_rows(&self) -> Mat {
        Mat::from_shape_vec((self.grid.len(), 1), self.grid.iter().copied().collect()).expect("contiguous")
    }

    pub fn from_rows(rows: &Mat, height: usize, width: usize, source: HeatmapSource) -> Self {
        let grid = Array2::from_shape_vec((height, width), rows.iter().copied().collect()).expect("row-major");
        Heatmap { grid, source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64) -> Self {
        Keypoint { x, y, score: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub f: Vec<f64>,
    pub normalized: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub in_channels: usize,
    pub hidden: usize,
    pub descriptor_dim: usize,
}

/// Parameters of both heads. Detector tensors are named `det.*`, descriptor
/// tensors `desc.*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub store: ParamStore,
    pub config: HeadConfig,
    pub detector: Vec<Conv>,
    pub descriptor: Vec<Conv>,
}

pub const DETECTOR_PREFIX: &str = "det.";
pub const DESCRIPTOR_PREFIX: &str = "desc.";

fn stack(store: &mut ParamStore, prefix: &str, c_in: usize, hidden: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Vec<Conv> {
    vec![
        Conv::new(store, &format!("{prefix}conv1"), 3, 1, c_in, hidden, Activation::Silu, rng),
        Conv::new(store, &format!("{prefix}conv2"), 3, 1, hidden, hidden, Activation::Silu, rng),
        Conv::new(store, &format!("{prefix}out"), 1, 1, hidden, c_out, Activation::Identity, rng),
    ]
}

fn run(convs: &[Conv], store: &ParamStore, tape: &mut Tape, mut x: Var, h: usize, w: usize) -> Var {
    for c in convs {
        x = c.forward(tape, store, x, h, w);
    }
    x
}

impl HeadParams {
    pub fn new(config: HeadConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let detector = stack(&mut store, "det.", config.in_channels, config.hidden, 1, &mut rng);
        let descriptor = stack(
            &mut store,
            "desc.",
            config.in_channels,
            config.hidden,
            config.descriptor_dim,
            &mut rng,
        );
        HeadParams {
            store,
            config,
            detector,
            descriptor,
        }
    }

    /// Pre-sigmoid detector output, `(H*W) x 1`.
    pub fn detector_logits(&self, tape: &mut Tape, x: Var, h: usize, w: usize) -> Var {
        run(&self.detector, &self.store, tape, x, h, w)
    }

    /// Detector heatmap in `[0, 1]`, `(H*W) x 1`.
    pub fn detect_var(&self, tape: &mut Tape, x: Var, h: usize, w: usize) -> Var {
        let z = self.detector_logits(tape, x, h, w);
        tape.sigmoid(z)
    }

    /// Unnormalised descriptor volume, `(H*W) x D`.
    pub fn describe_var(&self, tape: &mut Tape, x: Var, h: usize, w: usize) -> Var {
        run(&self.descriptor, &self.store, tape, x, h, w)
    }

    fn check_channels(&self, fmap: &FeatureMap) -> Result<()> {
        if fmap.channels() != self.config.in_channels {
            return Err(UldError::shape(
                "head input channels",
                self.config.in_channels,
                fmap.channels(),
            ));
        }
        Ok(())
    }
}

pub fn detect(fmap: &FeatureMap, params: &HeadParams) -> Result<Heatmap> {
    params.check_channels(fmap)?;
    let (h, w) = (fmap.height(), fmap.width());
    let mut tape = Tape::new();
    let x = tape.constant(fmap.to_rows());
    let y = params.detect_var(&mut tape, x, h, w);
    Ok(Heatmap::from_rows(tape.value(y), h, w, HeatmapSource::DetectorOutput))
}

pub fn describe(fmap: &FeatureMap, params: &HeadParams) -> Result<FeatureMap> {
    params.check_channels(fmap)?;
    let (h, w) = (fmap.height(), fmap.width());
    let mut tape = Tape::new();
    let x = tape.constant(fmap.to_rows());
    let y = params.describe_var(&mut tape, x, h, w);
    Ok(FeatureMap::from_rows(tape.value(y), h, w, "descriptor-head"))
}

/// Strict local maxima of `h` over a `window x window` neighbourhood
/// (clipped at the border) with score at least `threshold`, strongest first.
/// Equal scores keep raster order.
pub fn nms_extract(h: &Heatmap, window: usize, threshold: f64, max_n: usize) -> Vec<Keypoint> {
    assert!(window >= 3 && window % 2 == 1, "window must be odd and >= 3");
    let r = window / 2;
    let (hh, ww) = h.grid.dim();
    let mut out = Vec::new();
    for y in 0..hh {
        for x in 0..ww {
            let v = h.grid[[y, x]];
            if v < threshold {
                continue;
            }
            let mut strict = true;
            'scan: for yy in y.saturating_sub(r)..(y + r + 1).min(hh) {
                for xx in x.saturating_sub(r)..(x + r + 1).min(ww) {
                    if (yy, xx) != (y, x) && h.grid[[yy, xx]] >= v {
                        strict = false;
                        break 'scan;
                    }
                }
            }
            if strict {
                out.push(Keypoint {
                    x: x as f64,
                    y: y as f64,
                    score: v,
                });
            }
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(max_n);
    out
}

/// Bilinear weights of each point over a raster `height x width` grid.
/// Points must lie inside `[0, width-1] x [0, height-1]`.
pub fn bilinear_point_mix(points: &[(f64, f64)], height: usize, width: usize) -> Result<RowMix> {
    let mut rows = Vec::with_capacity(points.len());
    for &(x, y) in points {
        if !(x >= 0.0 && y >= 0.0 && x <= (width - 1) as f64 && y <= (height - 1) as f64) {
            return Err(UldError::InvalidArgument(format!(
                "point ({x}, {y}) outside a {width}x{height} grid"
            )));
        }
        let x0 = (x.floor() as usize).min(width - 1);
        let y0 = (y.floor() as usize).min(height - 1);
        let x1 = (x0 + 1).min(width - 1);
        let y1 = (y0 + 1).min(height - 1);
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let mut row: Vec<(usize, f64)> = Vec::with_capacity(4);
        for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
            for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                let wgt = wy * wx;
                if wgt == 0.0 {
                    continue;
                }
                let idx = yy * width + xx;
                match row.iter_mut().find(|(j, _)| *j == idx) {
                    Some(e) => e.1 += wgt,
                    None => row.push((idx, wgt)),
                }
            }
        }
        rows.push(row);
    }
    Ok(RowMix {
        n_in: height * width,
        rows,
    })
}

/// Bilinearly interpolated, L2-normalised descriptor at `p`.
pub fn sample_descriptor(vol: &FeatureMap, p: &Keypoint) -> Result<Descriptor> {
    let mix = bilinear_point_mix(&[(p.x, p.y)], vol.height(), vol.width())?;
    let d = vol.channels();
    let mut f = vec![0.0; d];
    for &(idx, wgt) in &mix.rows[0] {
        let (y, x) = (idx / vol.width(), idx % vol.width());
        for (c, fc) in f.iter_mut().enumerate() {
            *fc += wgt * vol.grid[[y, x, c]];
        }
    }
    Ok(Descriptor {
        f: l2_normalize(&f),
        normalized: true,
    })
}

pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

/// Pixel-wise maximum of unit-peak Gaussians centred on `points`.
pub fn render_gaussians(points: &[Keypoint], sigma: f64, height: usize, width: usize) -> Heatmap {
    assert!(sigma > 0.0, "sigma must be positive");
    let mut grid = Array2::zeros((height, width));
    let inv = 1.0 / (2.0 * sigma * sigma);
    for y in 0..height {
        for x in 0..width {
            let mut best: f64 = 0.0;
            for p in points {
                let d2 = (x as f64 - p.x).powi(2) + (y as f64 - p.y).powi(2);
                best = best.max((-d2 * inv).exp());
            }
            grid[[y, x]] = best;
        }
    }
    Heatmap::new(grid, HeatmapSource::PseudoGt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn heat(vals: &[&[f64]]) -> Heatmap {
        let h = vals.len();
        let w = vals[0].len();
        let grid = Array2::from_shape_fn((h, w), |(y, x)| vals[y][x]);
        Heatmap::new(grid, HeatmapSource::DetectorOutput)
    }

    #[test]
    fn zero_features_give_half_everywhere() {
        let p = HeadParams::new(HeadConfig { in_channels: 3, hidden: 4, descriptor_dim: 5 }, 1);
        let f = FeatureMap::new(Array3::zeros((6, 5, 3)), "zero");
        let h = detect(&f, &p).unwrap();
        assert!(h.grid.iter().all(|&v| v == 0.5));
        let d = describe(&f, &p).unwrap();
        assert_eq!(d.channels(), 5);
        assert!(d.grid.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let p = HeadParams::new(HeadConfig { in_channels: 3, hidden: 4, descriptor_dim: 5 }, 1);
        let f = FeatureMap::new(Array3::zeros((4, 4, 2)), "x");
        assert!(matches!(detect(&f, &p), Err(UldError::ShapeMismatch { .. })));
    }

    #[test]
    fn isolated_peak_is_found() {
        let h = heat(&[&[0.0, 0.0, 0.0], &[0.0, 0.9, 0.0], &[0.0, 0.0, 0.0]]);
        let k = nms_extract(&h, 3, 0.1, 10);
        assert_eq!(k, vec![Keypoint { x: 1.0, y: 1.0, score: 0.9 }]);
    }

    #[test]
    fn adjacent_peaks_keep_the_higher() {
        let h = heat(&[&[0.0, 0.0, 0.0, 0.0], &[0.0, 0.7, 0.8, 0.0], &[0.0, 0.0, 0.0, 0.0]]);
        let k = nms_extract(&h, 3, 0.0, 10);
        assert_eq!(k.len(), 1);
        assert_eq!((k[0].x, k[0].y), (2.0, 1.0));
    }

    #[test]
    fn constant_map_has_no_maxima() {
        let h = Heatmap::new(Array2::from_elem((5, 5), 0.4), HeatmapSource::DetectorOutput);
        assert!(nms_extract(&h, 3, 0.0, 10).is_empty());
    }

    #[test]
    fn midpoint_descriptor_averages_neighbours() {
        let mut grid = Array3::zeros((1, 2, 2));
        grid[[0, 0, 0]] = 1.0;
        grid[[0, 1, 1]] = 3.0;
        let vol = FeatureMap::new(grid, "t");
        let d = sample_descriptor(&vol, &Keypoint::new(0.5, 0.0)).unwrap();
        let n = (0.5f64.powi(2) + 1.5f64.powi(2)).sqrt();
        assert!((d.f[0] - 0.5 / n).abs() < 1e-12);
        assert!((d.f[1] - 1.5 / n).abs() < 1e-12);
        assert!(sample_descriptor(&vol, &Keypoint::new(1.5, 0.0)).is_err());
    }

    #[test]
    fn gaussian_values() {
        let h = render_gaussians(&[Keypoint::new(5.0, 5.0)], 2.0, 12, 12);
        assert_eq!(h.grid[[5, 5]], 1.0);
        assert!((h.grid[[5, 7]] - (-0.5f64).exp()).abs() < 1e-12);
    }
}
