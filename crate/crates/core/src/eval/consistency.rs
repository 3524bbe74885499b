use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::Result;
use crate::geometry::SimilarityTransform;

/// Anything that finds labelled landmarks in a sample seen through a
/// similarity transform.
pub trait LandmarkDetector {
    /// `(label, position)` pairs with at most one entry per label, in the
    /// coordinates of the transformed image.
    fn detect_labelled(&self, sample: &Sample, transform: &SimilarityTransform) -> Result<Vec<(usize, [f64; 2])>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Consistency {
    /// Mean distance over labels found in both views.
    pub mean_error: f64,
    pub matched: usize,
    /// Labels found in only one of the two views.
    pub unmatched: usize,
}

/// Distance between landmarks detected on `A(x)` and `A` applied to the
/// landmarks detected on `x`, matched by label. `None` when either view
/// yields no detections or no label is shared.
pub fn consistency_error(
    detector: &dyn LandmarkDetector,
    sample: &Sample,
    transform: &SimilarityTransform,
) -> Result<Option<Consistency>> {
    let (w, h) = (sample.image.width(), sample.image.height());
    let plain = detector.detect_labelled(sample, &SimilarityTransform::identity(w, h))?;
    let moved = detector.detect_labelled(sample, transform)?;
    if plain.is_empty() || moved.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    let mut matched = 0;
    for &(label, p) in &plain {
        if let Some(&(_, q)) = moved.iter().find(|(l, _)| *l == label) {
            let (tx, ty) = transform.apply(p[0], p[1]);
            total += ((q[0] - tx).powi(2) + (q[1] - ty).powi(2)).sqrt();
            matched += 1;
        }
    }
    if matched == 0 {
        return Ok(None);
    }
    let unmatched = plain.len() + moved.len() - 2 * matched;
    Ok(Some(Consistency {
        mean_error: total / matched as f64,
        matched,
        unmatched,
    }))
}

/// Consistency over a set of samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencySummary {
    pub mean_error: Option<f64>,
    pub evaluated: usize,
    pub skipped: usize,
    pub unmatched: usize,
}

pub fn consistency_summary(
    detector: &dyn LandmarkDetector,
    samples: &[&Sample],
    transforms: &[SimilarityTransform],
) -> Result<ConsistencySummary> {
    let mut sum = 0.0;
    let mut evaluated = 0;
    let mut skipped = 0;
    let mut unmatched = 0;
    for (s, t) in samples.iter().zip(transforms) {
        match consistency_error(detector, s, t)? {
            Some(c) => {
                sum += c.mean_error;
                evaluated += 1;
                unmatched += c.unmatched;
            }
            None => skipped += 1,
        }
    }
    Ok(ConsistencySummary {
        mean_error: (evaluated > 0).then(|| sum / evaluated as f64),
        evaluated,
        skipped,
        unmatched,
    })
}
