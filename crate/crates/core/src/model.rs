//! The landmark network: a frozen feature source, the learnable aggregator
//! and the two heads, plus per-image feature preparation.

use std::path::PathBuf;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{
    extract_raw, oracle_backbone, upscale_stack, AggregatorParams, BackboneAdapter, CachedAdapter,
    EmbeddingTable, FeatureMap, OracleAdapter, OracleAdapterConfig, RawFeature, RawFeatureStack,
    RawLayout, UpscaledStack,
};
use crate::data::Sample;
use crate::error::{Result, UldError};
use crate::geometry::{warp_image, warp_mix, PointMap};
use crate::heads::{
    bilinear_point_mix, l2_normalize, nms_extract, HeadConfig, HeadParams, Heatmap, HeatmapSource,
    Keypoint,
};
use crate::nn::Activation;
use crate::tape::{Mat, Tape, Var};

/// Where raw features come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSourceConfig {
    /// Image-driven oracle adapter.
    Oracle(OracleAdapterConfig),
    /// Scene-driven oracle: per-identity embeddings plus noise.
    Scene {
        dim: usize,
        identities: usize,
        noise_sigma: f64,
        seed: u64,
    },
    /// Precomputed features of an external backbone.
    Cached {
        name: String,
        dir: PathBuf,
        height: usize,
        width: usize,
        layers: Vec<(usize, usize, usize)>,
        steps: usize,
    },
}

pub enum FeatureSource {
    Adapter(Box<dyn BackboneAdapter>),
    Scene {
        table: EmbeddingTable,
        noise_sigma: f64,
        seed: u64,
        height: usize,
        width: usize,
    },
}

impl std::fmt::Debug for FeatureSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FeatureSource::Adapter(a) => write!(f, "FeatureSource::Adapter({})", a.name()),
            FeatureSource::Scene { noise_sigma, .. } => write!(f, "FeatureSource::Scene(sigma={noise_sigma})"),
        }
    }
}

impl FeatureSource {
    pub fn from_config(config: &FeatureSourceConfig, height: usize, width: usize) -> Result<Self> {
        Ok(match config {
            FeatureSourceConfig::Oracle(c) => {
                let mut c = c.clone();
                c.height = height;
                c.width = width;
                FeatureSource::Adapter(Box::new(OracleAdapter::new(c)?))
            }
            FeatureSourceConfig::Scene {
                dim,
                identities,
                noise_sigma,
                seed,
            } => FeatureSource::Scene {
                table: EmbeddingTable::new(*identities, *dim, *seed)?,
                noise_sigma: *noise_sigma,
                seed: *seed,
                height,
                width,
            },
            FeatureSourceConfig::Cached {
                name,
                dir,
                height: fh,
                width: fw,
                layers,
                steps,
            } => {
                if (*fh, *fw) != (height, width) {
                    return Err(UldError::shape(
                        "cached feature input size",
                        format!("{height}x{width}"),
                        format!("{fh}x{fw}"),
                    ));
                }
                let mut layout = Vec::new();
                for (l, &(h, w, c)) in layers.iter().enumerate() {
                    for t in 0..*steps {
                        layout.push(RawLayout { layer: l, step: t, height: h, width: w, channels: c });
                    }
                }
                FeatureSource::Adapter(Box::new(CachedAdapter::new(name.clone(), dir.clone(), (height, width), layout)?))
            }
        })
    }

    pub fn layout(&self) -> Vec<RawLayout> {
        match self {
            FeatureSource::Adapter(a) => a.layout(),
            FeatureSource::Scene { table, height, width, .. } => vec![RawLayout {
                layer: 0,
                step: 0,
                height: *height,
                width: *width,
                channels: table.dim(),
            }],
        }
    }

    pub fn name(&self) -> &str {
        match self {
            FeatureSource::Adapter(a) => a.name(),
            FeatureSource::Scene { .. } => "oracle-scene",
        }
    }

    pub fn raw(&self, sample: &Sample) -> Result<RawFeatureStack> {
        match self {
            FeatureSource::Adapter(a) => extract_raw(&sample.image, a.as_ref()),
            FeatureSource::Scene { table, noise_sigma, seed, .. } => {
                let scene = sample.scene.as_ref().ok_or_else(|| UldError::AdapterUnavailable {
                    name: "oracle-scene".into(),
                    reason: format!("sample '{}' carries no synthetic scene", sample.id),
                })?;
                let f = oracle_backbone(scene, table, *noise_sigma, *seed)?;
                Ok(RawFeatureStack { maps: vec![RawFeature { layer: 0, step: 0, grid: f.grid }] })
            }
        }
    }

    /// Features of the sample after applying `map`. Image adapters see the
    /// warped image. The scene oracle warps its noise-free grid and draws
    /// fresh noise for the new view, seeded by the map.
    pub fn raw_transformed(&self, sample: &Sample, map: &dyn PointMap) -> Result<RawFeatureStack> {
        match self {
            FeatureSource::Adapter(a) => extract_raw(&warp_image(&sample.image, map), a.as_ref()),
            FeatureSource::Scene { table, noise_sigma, seed, .. } => {
                let probes = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)];
                let mapped: Vec<(f64, f64)> = probes.iter().map(|&(x, y)| map.map(x, y)).collect();
                if mapped == probes {
                    return self.raw(sample);
                }
                let scene = sample.scene.as_ref().ok_or_else(|| UldError::AdapterUnavailable {
                    name: "oracle-scene".into(),
                    reason: format!("sample '{}' carries no synthetic scene", sample.id),
                })?;
                let clean = oracle_backbone(scene, table, 0.0, *seed)?.grid;
                let (h, w, d) = clean.dim();
                let (mix, _) = warp_mix(map, w, h);
                let rows = Mat::from_shape_vec((h * w, d), clean.iter().copied().collect()).expect("contiguous");
                let mut out = mix.apply(&rows);
                if *noise_sigma > 0.0 {
                    let view = mapped.iter().fold(scene.appearance_seed ^ seed, |acc, &(x, y)| {
                        (acc ^ x.to_bits()).rotate_left(17) ^ y.to_bits().wrapping_mul(0x9e37_79b9_7f4a_7c15)
                    });
                    let mut rng = ChaCha8Rng::seed_from_u64(view);
                    out.mapv_inplace(|v| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        v + noise_sigma * z
                    });
                }
                let grid = Array3::from_shape_vec((h, w, d), out.into_iter().collect()).expect("row-major");
                Ok(RawFeatureStack { maps: vec![RawFeature { layer: 0, step: 0, grid }] })
            }
        }
    }

    /// Parameter-free dense descriptors: every upscaled grid concatenated
    /// along channels, in `(layer, step)` order.
    pub fn plain_features(&self, sample: &Sample) -> Result<FeatureMap> {
        Ok(self.concat(&self.raw(sample)?, sample))
    }

    /// [`FeatureSource::plain_features`] of the sample seen through `map`.
    pub fn plain_features_transformed(&self, sample: &Sample, map: &dyn PointMap) -> Result<FeatureMap> {
        Ok(self.concat(&self.raw_transformed(sample, map)?, sample))
    }

    fn concat(&self, raw: &RawFeatureStack, sample: &Sample) -> FeatureMap {
        let (h, w) = (sample.image.height(), sample.image.width());
        let up = upscale_stack(raw, h, w);
        let d: usize = up.maps.values().map(Mat::ncols).sum();
        let mut grid = Array3::zeros((h, w, d));
        let mut off = 0;
        for m in up.maps.values() {
            for (i, row) in m.outer_iter().enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    grid[[i / w, i % w, off + c]] = v;
                }
            }
            off += m.ncols();
        }
        FeatureMap::new(grid, self.name().to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub aggregate_channels: usize,
    pub head_hidden: usize,
    pub descriptor_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            aggregate_channels: 16,
            head_hidden: 16,
            descriptor_dim: 16,
            seed: 1,
        }
    }
}

/// Aggregator plus detector and descriptor heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkModel {
    pub aggregator: AggregatorParams,
    pub heads: HeadParams,
}

/// Per-pass outputs recorded on a tape, all `(H*W)` rows.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub features: Var,
    pub logits: Var,
    pub heatmap: Var,
    pub descriptors: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmsConfig {
    pub window: usize,
    pub threshold: f64,
    pub max_n: usize,
}

/// Keypoints and unit descriptors detected in one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Detections {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Vec<f64>>,
}

impl LandmarkModel {
    pub fn new(layout: &[RawLayout], height: usize, width: usize, config: &ModelConfig) -> Result<Self> {
        let aggregator = AggregatorParams::new(
            layout,
            height,
            width,
            config.aggregate_channels,
            Activation::Silu,
            config.seed,
        )?;
        let heads = HeadParams::new(
            HeadConfig {
                in_channels: config.aggregate_channels,
                hidden: config.head_hidden,
                descriptor_dim: config.descriptor_dim,
            },
            config.seed.wrapping_add(1),
        );
        Ok(LandmarkModel { aggregator, heads })
    }

    pub fn height(&self) -> usize {
        self.aggregator.height
    }

    pub fn width(&self) -> usize {
        self.aggregator.width
    }

    pub fn forward(&self, tape: &mut Tape, up: &UpscaledStack) -> Result<ForwardVars> {
        let (h, w) = (self.height(), self.width());
        let features = self.aggregator.forward(tape, up)?;
        let logits = self.heads.detector_logits(tape, features, h, w);
        let heatmap = tape.sigmoid(logits);
        let descriptors = self.heads.describe_var(tape, features, h, w);
        Ok(ForwardVars { features, logits, heatmap, descriptors })
    }

    /// Detector heatmap and raw descriptor volume without gradients.
    pub fn infer(&self, up: &UpscaledStack) -> Result<(Heatmap, FeatureMap)> {
        let mut tape = Tape::new();
        let v = self.forward(&mut tape, up)?;
        let (h, w) = (self.height(), self.width());
        Ok((
            Heatmap::from_rows(tape.value(v.heatmap), h, w, HeatmapSource::DetectorOutput),
            FeatureMap::from_rows(tape.value(v.descriptors), h, w, "descriptor-head"),
        ))
    }

    /// Detector heatmap only, skipping the descriptor head.
    pub fn heatmap(&self, up: &UpscaledStack) -> Result<Heatmap> {
        let mut tape = Tape::new();
        let x = self.aggregator.forward(&mut tape, up)?;
        let (h, w) = (self.height(), self.width());
        let y = self.heads.detect_var(&mut tape, x, h, w);
        Ok(Heatmap::from_rows(tape.value(y), h, w, HeatmapSource::DetectorOutput))
    }

    /// NMS keypoints with L2-normalised descriptors sampled at each.
    pub fn detect_keypoints(&self, up: &UpscaledStack, nms: &NmsConfig) -> Result<Detections> {
        let (heat, vol) = self.infer(up)?;
        let keypoints = nms_extract(&heat, nms.window, nms.threshold, nms.max_n);
        let descriptors = sample_rows(&vol, &keypoints)?;
        Ok(Detections { keypoints, descriptors })
    }
}

/// L2-normalised bilinear samples of `vol` at each keypoint.
pub fn sample_rows(vol: &FeatureMap, keypoints: &[Keypoint]) -> Result<Vec<Vec<f64>>> {
    if keypoints.is_empty() {
        return Ok(Vec::new());
    }
    let pts: Vec<(f64, f64)> = keypoints.iter().map(|k| (k.x, k.y)).collect();
    let mix = bilinear_point_mix(&pts, vol.height(), vol.width())?;
    let rows = mix.apply(&vol.to_rows());
    Ok(rows.outer_iter().map(|r| l2_normalize(r.as_slice().expect("contiguous"))).collect())
}

/// Upscaled raw features for every sample, computed once.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    pub stacks: Vec<UpscaledStack>,
}

impl FeatureBank {
    pub fn build(source: &FeatureSource, samples: &[Sample], height: usize, width: usize) -> Result<Self> {
        let stacks = samples
            .iter()
            .map(|s| Ok(upscale_stack(&source.raw(s)?, height, width)))
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureBank { stacks })
    }

    pub fn len(&self) -> usize {
        self.stacks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stacks.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, SyntheticConfig};

    fn data() -> Dataset {
        Dataset::synthetic(&SyntheticConfig { n_images: 3, n_test: 0, ..Default::default() }).unwrap()
    }

    #[test]
    fn plain_features_concatenate_layers() {
        let ds = data();
        let src = FeatureSource::from_config(&FeatureSourceConfig::Oracle(OracleAdapterConfig::default()), 32, 32).unwrap();
        let f = src.plain_features(&ds.samples[0]).unwrap();
        assert_eq!(f.channels(), 32);
    }

    #[test]
    fn scene_source_needs_a_scene() {
        let mut ds = data();
        ds.samples[0].scene = None;
        let src = FeatureSource::from_config(
            &FeatureSourceConfig::Scene { dim: 8, identities: 6, noise_sigma: 0.0, seed: 1 },
            32,
            32,
        )
        .unwrap();
        assert!(matches!(src.raw(&ds.samples[0]), Err(UldError::AdapterUnavailable { .. })));
    }

    #[test]
    fn detections_have_unit_descriptors() {
        let ds = data();
        let src = FeatureSource::from_config(&FeatureSourceConfig::Oracle(OracleAdapterConfig::default()), 32, 32).unwrap();
        let bank = FeatureBank::build(&src, &ds.samples, 32, 32).unwrap();
        let m = LandmarkModel::new(&src.layout(), 32, 32, &ModelConfig::default()).unwrap();
        let d = m.detect_keypoints(&bank.stacks[0], &NmsConfig { window: 3, threshold: 0.0, max_n: 18 }).unwrap();
        assert!(!d.keypoints.is_empty() && d.keypoints.len() <= 18);
        for f in &d.descriptors {
            let n: f64 = f.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }
}
