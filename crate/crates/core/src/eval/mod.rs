//! Scoring discovered landmarks against ground truth.
//!
//! Landmarks are compared through linear regressors fitted on training
//! images: forward maps discovered landmarks to annotations, backward maps
//! annotations to discovered landmarks. Errors are normalised per image and
//! reported in percent.

mod consistency;
mod hungarian;
mod metrics;
mod regress;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use consistency::{consistency_error, consistency_summary, Consistency, ConsistencySummary, LandmarkDetector};
pub use hungarian::{assignment_cost, hungarian, hungarian_accuracy, MatchingAccuracy};
pub use metrics::{
    ced, clustering_accuracy, nme, per_image_nme, threshold_grid, yaw_bin, yaw_binned_nme, CedCurve,
    ClusteringAccuracy, YAW_EDGES,
};
pub use regress::{fit_regressor, Direction, Regressor, RIDGE_LAMBDA};

use crate::data::Sample;
use crate::geometry::AugmentConfig;
use crate::error::{Result, UldError};

/// Per-image error normaliser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalizer {
    /// The sample's interocular distance.
    InterOcular,
    /// Diagonal of the sample's box, or of its landmark bounding box.
    BoxDiagonal,
    /// Diagonal of the image canvas.
    CanvasDiagonal,
}

pub fn normalizer_for(sample: &Sample, kind: Normalizer) -> Result<f64> {
    let d = match kind {
        Normalizer::InterOcular => sample
            .d_iod
            .ok_or_else(|| UldError::InvalidArgument(format!("sample {} has no interocular distance", sample.id)))?,
        Normalizer::BoxDiagonal => {
            let b = match (sample.roi, &sample.landmarks) {
                (Some(b), _) => b,
                (None, Some(l)) if !l.is_empty() => {
                    let xs = l.iter().map(|p| p[0]);
                    let ys = l.iter().map(|p| p[1]);
                    [
                        xs.clone().fold(f64::INFINITY, f64::min),
                        ys.clone().fold(f64::INFINITY, f64::min),
                        xs.fold(f64::NEG_INFINITY, f64::max),
                        ys.fold(f64::NEG_INFINITY, f64::max),
                    ]
                }
                _ => {
                    return Err(UldError::InvalidArgument(format!(
                        "sample {} has neither a box nor landmarks",
                        sample.id
                    )))
                }
            };
            ((b[2] - b[0]).powi(2) + (b[3] - b[1]).powi(2)).sqrt()
        }
        Normalizer::CanvasDiagonal => {
            let (w, h) = (sample.image.width() as f64, sample.image.height() as f64);
            (w * w + h * h).sqrt()
        }
    };
    if !(d > 0.0) {
        return Err(UldError::InvalidArgument(format!("sample {} has normalizer {d}", sample.id)));
    }
    Ok(d)
}

/// Discovered landmarks of one image indexed by label; `None` where the
/// label was not found.
pub type LabelledLandmarks = Vec<Option<[f64; 2]>>;

/// Mean position of every label over the images that have it.
pub fn label_means(preds: &[LabelledLandmarks]) -> Result<Vec<[f64; 2]>> {
    let k = preds.first().map_or(0, Vec::len);
    let mut fallback = [0.0, 0.0];
    let mut n_all = 0usize;
    let mut sums = vec![[0.0, 0.0]; k];
    let mut counts = vec![0usize; k];
    for p in preds {
        if p.len() != k {
            return Err(UldError::shape("labelled landmarks", k, p.len()));
        }
        for (l, q) in p.iter().enumerate() {
            if let Some(q) = q {
                sums[l][0] += q[0];
                sums[l][1] += q[1];
                counts[l] += 1;
                fallback[0] += q[0];
                fallback[1] += q[1];
                n_all += 1;
            }
        }
    }
    if n_all == 0 {
        return Err(UldError::InvalidArgument("no landmarks were discovered in any image".into()));
    }
    let fallback = [fallback[0] / n_all as f64, fallback[1] / n_all as f64];
    Ok((0..k)
        .map(|l| {
            if counts[l] > 0 {
                [sums[l][0] / counts[l] as f64, sums[l][1] / counts[l] as f64]
            } else {
                fallback
            }
        })
        .collect())
}

/// Fills missing labels with `means`; returns the filled sets and the
/// number of filled entries.
pub fn impute(preds: &[LabelledLandmarks], means: &[[f64; 2]]) -> (Vec<Vec<[f64; 2]>>, usize) {
    let mut filled = 0;
    let out = preds
        .iter()
        .map(|p| {
            p.iter()
                .zip(means)
                .map(|(q, m)| {
                    q.unwrap_or_else(|| {
                        filled += 1;
                        *m
                    })
                })
                .collect()
        })
        .collect();
    (out, filled)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub normalizer: Normalizer,
    /// Training images used to fit the regressors; `None` uses all.
    pub regressor_subset: Option<usize>,
    pub seed: u64,
    /// Largest CED threshold, in percent.
    pub ced_max: f64,
    pub ced_steps: usize,
    pub matching_factor: f64,
    pub yaw_edges: Vec<f64>,
    /// Edges of the pose ranges that pose clusters are scored against.
    pub pose_range_edges: Vec<f64>,
    /// Random transforms for the consistency error.
    pub consistency: AugmentConfig,
    /// Test images scored for consistency; 0 disables it.
    pub consistency_images: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            normalizer: Normalizer::BoxDiagonal,
            regressor_subset: None,
            seed: 0,
            ced_max: 20.0,
            ced_steps: 40,
            matching_factor: 0.2,
            yaw_edges: YAW_EDGES.to_vec(),
            pose_range_edges: YAW_EDGES.to_vec(),
            consistency: AugmentConfig {
                max_angle_deg: 15.0,
                flip_prob: 0.0,
                scale_range: (0.9, 1.1),
                max_shift: 2.0,
            },
            consistency_images: 10,
        }
    }
}

/// Every metric of one evaluation. Optional parts are `null` when their
/// inputs were unavailable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub stage: String,
    pub normalizer: Normalizer,
    pub n_train: usize,
    pub n_test: usize,
    pub discovered_landmarks: usize,
    pub imputed_landmarks: usize,
    pub forward_nme: f64,
    pub backward_nme: f64,
    pub ced: CedCurve,
    pub matching: Option<MatchingAccuracy>,
    pub consistency: Option<ConsistencySummary>,
    pub silhouette: Option<f64>,
    pub calinski_harabasz: Option<f64>,
    pub yaw_edges: Vec<f64>,
    pub yaw_binned_nme: Option<Vec<Option<f64>>>,
    pub clustering_accuracy: Option<ClusteringAccuracy>,
    /// Share of discovered test landmarks whose label agrees with the
    /// majority ground-truth identity of that label (synthetic data only).
    pub purity: Option<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plain report");
        s.push('\n');
        s
    }

    /// Writes `report.json` and `ced.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| UldError::io(dir, e))?;
        let r = dir.join("report.json");
        std::fs::write(&r, self.to_json()).map_err(|e| UldError::io(&r, e))?;
        let c = dir.join("ced.csv");
        std::fs::write(&c, self.ced.to_csv()).map_err(|e| UldError::io(&c, e))
    }
}

/// Regression-based scores of discovered landmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionScores {
    pub forward_nme: f64,
    pub backward_nme: f64,
    /// Forward error of each test image.
    pub forward_per_image: Vec<f64>,
    pub imputed: usize,
    /// Test predictions with missing labels filled.
    pub test_filled: Vec<Vec<[f64; 2]>>,
}

/// Forward and backward NME of the test images with regressors fitted on
/// the training images. Missing labels are filled with per-label means
/// of the training predictions.
pub fn regression_scores(
    train_pred: &[LabelledLandmarks],
    train_gt: &[Vec<[f64; 2]>],
    test_pred: &[LabelledLandmarks],
    test_gt: &[Vec<[f64; 2]>],
    test_norm: &[f64],
    options: &EvalOptions,
) -> Result<RegressionScores> {
    let means = label_means(train_pred)?;
    let (train_filled, a) = impute(train_pred, &means);
    let (test_filled, b) = impute(test_pred, &means);
    let subset = options.regressor_subset.unwrap_or(train_filled.len()).min(train_filled.len());
    let fwd = fit_regressor(&train_filled, train_gt, subset, Direction::Forward, options.seed)?;
    let bwd = fit_regressor(&train_filled, train_gt, subset, Direction::Backward, options.seed)?;
    let mapped = fwd.predict_all(&test_filled)?;
    let forward_per_image = per_image_nme(&mapped, test_gt, test_norm)?;
    let back = bwd.predict_all(test_gt)?;
    let backward_nme = nme(&back, &test_filled, test_norm)?;
    Ok(RegressionScores {
        forward_nme: forward_per_image.iter().sum::<f64>() / forward_per_image.len() as f64,
        backward_nme,
        forward_per_image,
        imputed: a + b,
        test_filled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn imputation_uses_label_means() {
        let preds = vec![vec![Some([1.0, 1.0]), None], vec![Some([3.0, 1.0]), Some([5.0, 5.0])]];
        let m = label_means(&preds).unwrap();
        assert_eq!(m, vec![[2.0, 1.0], [5.0, 5.0]]);
        let (f, n) = impute(&preds, &m);
        assert_eq!(n, 1);
        assert_eq!(f[0][1], [5.0, 5.0]);
    }

    #[test]
    fn ground_truth_against_itself_scores_zero() {
        let gt: Vec<Vec<[f64; 2]>> = (0..8)
            .map(|i| vec![[i as f64, (i * i) as f64 * 0.3], [(i % 3) as f64, (i * i * i) as f64 * 0.01]])
            .collect();
        let preds: Vec<LabelledLandmarks> = gt.iter().map(|g| g.iter().map(|&p| Some(p)).collect()).collect();
        let s = regression_scores(&preds, &gt, &preds, &gt, &[10.0; 8], &EvalOptions::default()).unwrap();
        assert!(s.forward_nme < 1e-6 && s.backward_nme < 1e-6);
    }
}
