use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::cache::{cache_features, load_features};
use super::{BackboneAdapter, FeatureMap, RawFeature, RawFeatureStack, RawLayout};
use crate::error::{Result, UldError};
use crate::image::Image;
use crate::tape::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleLayer {
    /// Average-pooling factor relative to the input image.
    pub stride: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleAdapterConfig {
    pub height: usize,
    pub width: usize,
    pub layers: Vec<OracleLayer>,
    pub timesteps: usize,
    /// Noise at the last timestep; step `t` uses `noise_sigma * (t+1) / T`.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for OracleAdapterConfig {
    fn default() -> Self {
        OracleAdapterConfig {
            height: 32,
            width: 32,
            layers: vec![
                OracleLayer {
                    stride: 1,
                    channels: 8,
                },
                OracleLayer {
                    stride: 2,
                    channels: 8,
                },
            ],
            timesteps: 2,
            noise_sigma: 0.02,
            seed: 11,
        }
    }
}

/// Desk-scale stand-in for a diffusion backbone: every `(layer, step)` grid
/// is an average-pooled linear lift of the RGB image plus step-dependent
/// Gaussian noise. The lift has orthonormal rows, so colour distances are
/// preserved in feature space.
#[derive(Debug, Clone)]
pub struct OracleAdapter {
    config: OracleAdapterConfig,
    projections: Vec<Mat>,
}

pub(crate) fn orthonormal_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    assert!(rows <= cols, "cannot build {rows} orthonormal rows in {cols} dims");
    let mut m = Mat::zeros((rows, cols));
    for r in 0..rows {
        loop {
            let mut v: Vec<f64> = (0..cols).map(|_| StandardNormal.sample(rng)).collect();
            for q in 0..r {
                let dot: f64 = v.iter().zip(m.row(q)).map(|(a, b)| a * b).sum();
                for (x, b) in v.iter_mut().zip(m.row(q)) {
                    *x -= dot * b;
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                for (dst, x) in m.row_mut(r).iter_mut().zip(&v) {
                    *dst = x / n;
                }
                break;
            }
        }
    }
    m
}


impl OracleAdapter {
    pub fn new(config: OracleAdapterConfig) -> Result<Self> {
        if config.layers.is_empty() || config.timesteps == 0 {
            return Err(UldError::Config("oracle adapter needs L >= 1 and T >= 1".into()));
        }
        for l in &config.layers {
            if l.stride == 0 || !config.height.is_multiple_of(l.stride) || !config.width.is_multiple_of(l.stride) {
                return Err(UldError::Config(format!(
                    "layer stride {} does not divide {}x{}",
                    l.stride, config.height, config.width
                )));
            }
            if l.channels < 3 {
                return Err(UldError::Config("oracle layers need at least 3 channels".into()));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let projections = config
            .layers
            .iter()
            .map(|l| orthonormal_rows(3, l.channels, &mut rng))
            .collect();
        Ok(OracleAdapter {
            config,
            projections,
        })
    }

    pub fn config(&self) -> &OracleAdapterConfig {
        &self.config
    }
}

impl BackboneAdapter for OracleAdapter {
    fn name(&self) -> &str {
        "oracle"
    }

    fn input_size(&self) -> (usize, usize) {
        (self.config.height, self.config.width)
    }

    fn layout(&self) -> Vec<RawLayout> {
        let mut out = Vec::new();
        for (l, layer) in self.config.layers.iter().enumerate() {
            for t in 0..self.config.timesteps {
                out.push(RawLayout {
                    layer: l,
                    step: t,
                    height: self.config.height / layer.stride,
                    width: self.config.width / layer.stride,
                    channels: layer.channels,
                });
            }
        }
        out
    }

    fn extract_raw(&self, image: &Image) -> Result<RawFeatureStack> {
        let digest = image.digest();
        let mut maps = Vec::new();
        for (l, layer) in self.config.layers.iter().enumerate() {
            let s = layer.stride;
            let (h, w) = (self.config.height / s, self.config.width / s);
            let mut pooled = Mat::zeros((h * w, 3));
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        let mut acc = 0.0;
                        for dy in 0..s {
                            for dx in 0..s {
                                acc += image.data[[y * s + dy, x * s + dx, c]];
                            }
                        }
                        pooled[[y * w + x, c]] = acc / (s * s) as f64;
                    }
                }
            }
            let lifted = pooled.dot(&self.projections[l]);
            for t in 0..self.config.timesteps {
                let sigma = self.config.noise_sigma * (t + 1) as f64 / self.config.timesteps as f64;
                let mut grid = lifted.clone();
                if sigma > 0.0 {
                    let seed = self.config.seed
                        ^ digest.rotate_left(17)
                        ^ ((l as u64) << 40)
                        ^ ((t as u64) << 52);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    grid.mapv_inplace(|v| {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        v + sigma * n
                    });
                }
                let grid = Array3::from_shape_vec((h, w, layer.channels), grid.into_iter().collect())
                    .expect("row-major");
                maps.push(RawFeature {
                    layer: l,
                    step: t,
                    grid,
                });
            }
        }
        Ok(RawFeatureStack { maps })
    }
}

/// Adapter over features precomputed by an external backbone (for example
/// a diffusion model run offline). Grids live under
/// `<dir>/<image digest>/l<layer>_t<step>.ulf`.
#[derive(Debug, Clone)]
pub struct CachedAdapter {
    name: String,
    dir: PathBuf,
    size: (usize, usize),
    layout: Vec<RawLayout>,
}

impl CachedAdapter {
    pub fn new(name: impl Into<String>, dir: impl Into<PathBuf>, size: (usize, usize), layout: Vec<RawLayout>) -> Result<Self> {
        let name = name.into();
        let dir = dir.into();
        if !dir.is_dir() {
            return Err(UldError::AdapterUnavailable {
                name,
                reason: format!("feature directory {} does not exist", dir.display()),
            });
        }
        Ok(CachedAdapter {
            name,
            dir,
            size,
            layout,
        })
    }

    fn grid_path(&self, image: &Image, layer: usize, step: usize) -> PathBuf {
        self.dir
            .join(format!("{:016x}", image.digest()))
            .join(format!("l{layer}_t{step}.ulf"))
    }

    /// Writes a stack so that later `extract_raw` calls on `image` find it.
    pub fn store(&self, image: &Image, stack: &RawFeatureStack) -> Result<()> {
        for m in &stack.maps {
            let path = self.grid_path(image, m.layer, m.step);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| UldError::io(parent, e))?;
            }
            let fmap = FeatureMap::new(m.grid.clone(), format!("{}:l{}t{}", self.name, m.layer, m.step));
            cache_features(&fmap, &path, super::FeatureDtype::F64, 0)?;
        }
        Ok(())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl BackboneAdapter for CachedAdapter {
    fn name(&self) -> &str {
        &self.name
    }

    fn input_size(&self) -> (usize, usize) {
        self.size
    }

    fn layout(&self) -> Vec<RawLayout> {
        self.layout.clone()
    }

    fn extract_raw(&self, image: &Image) -> Result<RawFeatureStack> {
        let mut maps = Vec::with_capacity(self.layout.len());
        for l in &self.layout {
            let path = self.grid_path(image, l.layer, l.step);
            if !path.is_file() {
                return Err(UldError::AdapterUnavailable {
                    name: self.name.clone(),
                    reason: format!("no cached features at {}", path.display()),
                });
            }
            let fmap = load_features(&path)?;
            if fmap.grid.dim() != (l.height, l.width, l.channels) {
                return Err(UldError::shape(
                    "cached feature grid",
                    format!("{}x{}x{}", l.height, l.width, l.channels),
                    format!("{:?}", fmap.grid.dim()),
                ));
            }
            maps.push(RawFeature {
                layer: l.layer,
                step: l.step,
                grid: fmap.grid,
            });
        }
        Ok(RawFeatureStack { maps })
    }
}

/// Resolves an adapter by name. Only the oracle runs in-process; a real
/// diffusion backbone must be supplied through a [`CachedAdapter`].
pub fn adapter_by_name(name: &str, oracle: &OracleAdapterConfig) -> Result<Box<dyn BackboneAdapter>> {
    match name {
        "oracle" => Ok(Box::new(OracleAdapter::new(oracle.clone())?)),
        other => Err(UldError::AdapterUnavailable {
            name: other.to_string(),
            reason: "no in-process runtime for this backbone; precompute its features and use a cached adapter".into(),
        }),
    }
}
