//! Dense feature extraction: backbone adapters, the layer/timestep feature
//! aggregator, a synthetic oracle backbone and an on-disk feature cache.

mod adapter;
mod aggregate;
mod cache;
mod oracle;
mod roi;

use ndarray::Array3;

use crate::error::{Result, UldError};
use crate::image::Image;
use crate::tape::Mat;

pub use adapter::{adapter_by_name, CachedAdapter, OracleAdapter, OracleAdapterConfig, OracleLayer};
pub use aggregate::{aggregate, bilinear_resize_mix, upscale_stack, AggregatorParams, UpscaledStack};
pub use cache::{cache_features, load_features, FeatureDtype, CACHE_HEADER_LEN, CACHE_MAGIC};
pub use oracle::{oracle_backbone, EmbeddingTable};
pub use roi::{
    sample_region_pixels, sample_roi_pixels, FullImageRoi, GroundTruthBoxRoi, RoI, RoiProvider,
    RoiRegion, SceneSupportRoi,
};

/// Dense `H x W x D` descriptor grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub grid: Array3<f64>,
    pub provenance: String,
}

impl FeatureMap {
    pub fn new(grid: Array3<f64>, provenance: impl Into<String>) -> Self {
        FeatureMap {
            grid,
            provenance: provenance.into(),
        }
    }

    pub fn height(&self) -> usize {
        self.grid.dim().0
    }

    pub fn width(&self) -> usize {
        self.grid.dim().1
    }

    pub fn channels(&self) -> usize {
        self.grid.dim().2
    }

    /// Raster-order `(H*W) x D` view used by the tape.
    pub fn to_rows(&self) -> Mat {
        let (h, w, d) = self.grid.dim();
        Mat::from_shape_vec((h * w, d), self.grid.iter().copied().collect()).expect("contiguous")
    }

    pub fn from_rows(rows: &Mat, height: usize, width: usize, provenance: impl Into<String>) -> Self {
        assert_eq!(rows.nrows(), height * width, "row count");
        let grid = Array3::from_shape_vec((height, width, rows.ncols()), rows.iter().copied().collect())
            .expect("row-major layout");
        FeatureMap::new(grid, provenance)
    }

    pub fn pixel(&self, x: usize, y: usize) -> Vec<f64> {
        self.grid.slice(ndarray::s![y, x, ..]).to_vec()
    }

    pub fn is_finite(&self) -> bool {
        self.grid.iter().all(|v| v.is_finite())
    }
}

/// One backbone feature grid at layer `layer`, timestep `step`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFeature {
    pub layer: usize,
    pub step: usize,
    pub grid: Array3<f64>,
}

/// Declared shape of one `(layer, step)` output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawLayout {
    pub layer: usize,
    pub step: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawFeatureStack {
    pub maps: Vec<RawFeature>,
}

impl RawFeatureStack {
    /// Checks the stack invariants: non-empty, distinct `(layer, step)`
    /// pairs and finite values.
    pub fn validate(&self) -> Result<()> {
        if self.maps.is_empty() {
            return Err(UldError::InvalidArgument("empty feature stack".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for m in &self.maps {
            if !seen.insert((m.layer, m.step)) {
                return Err(UldError::InvalidArgument(format!(
                    "duplicate feature grid for layer {} step {}",
                    m.layer, m.step
                )));
            }
            if m.grid.iter().any(|v| !v.is_finite()) {
                return Err(UldError::InvalidArgument(format!(
                    "non-finite values in layer {} step {}",
                    m.layer, m.step
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, layer: usize, step: usize) -> Option<&RawFeature> {
        self.maps.iter().find(|m| m.layer == layer && m.step == step)
    }
}

/// Contract for anything that turns an image into layer/timestep features.
pub trait BackboneAdapter: Send + Sync {
    fn name(&self) -> &str;

    /// Required `(height, width)` of input images.
    fn input_size(&self) -> (usize, usize);

    /// The `(layer, step)` grids this adapter produces, in output order.
    fn layout(&self) -> Vec<RawLayout>;

    fn extract_raw(&self, image: &Image) -> Result<RawFeatureStack>;
}

/// Runs `adapter` on `image` after checking the declared input size.
pub fn extract_raw(image: &Image, adapter: &dyn BackboneAdapter) -> Result<RawFeatureStack> {
    let (h, w) = adapter.input_size();
    if image.height() != h || image.width() != w || image.channels() != 3 {
        return Err(UldError::shape(
            "backbone input",
            format!("{h}x{w}x3 for adapter '{}'", adapter.name()),
            format!("{}x{}x{}", image.height(), image.width(), image.channels()),
        ));
    }
    let stack = adapter.extract_raw(image)?;
    stack.validate()?;
    Ok(stack)
}
