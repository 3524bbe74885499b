use nalgebra::DMatrix;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UldError};

/// Ridge strength used when the design matrix is rank deficient.
pub const RIDGE_LAMBDA: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Discovered landmarks to ground truth.
    Forward,
    /// Ground truth to discovered landmarks.
    Backward,
}

/// Linear map with bias from stacked source coordinates to stacked target
/// coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regressor {
    /// `(2 * n_src + 1) x (2 * n_dst)`, bias in the last row.
    pub coefficients: Vec<Vec<f64>>,
    pub n_src: usize,
    pub n_dst: usize,
    pub direction: Direction,
    pub subset_size: usize,
    pub seed: u64,
    pub ridge_fallback: bool,
}

fn features(points: &[[f64; 2]]) -> Vec<f64> {
    let mut f: Vec<f64> = points.iter().flat_map(|p| [p[0], p[1]]).collect();
    f.push(1.0);
    f
}

impl Regressor {
    pub fn predict(&self, source: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
        if source.len() != self.n_src {
            return Err(UldError::shape("regressor input landmarks", self.n_src, source.len()));
        }
        let f = features(source);
        Ok((0..self.n_dst)
            .map(|l| {
                let mut out = [0.0; 2];
                for (c, o) in out.iter_mut().enumerate() {
                    *o = f.iter().zip(&self.coefficients).map(|(x, row)| x * row[2 * l + c]).sum();
                }
                out
            })
            .collect())
    }

    pub fn predict_all(&self, sources: &[Vec<[f64; 2]>]) -> Result<Vec<Vec<[f64; 2]>>> {
        sources.iter().map(|s| self.predict(s)).collect()
    }
}

/// Least-squares fit on a seeded random subset of `subset_size` images.
///
/// Forward maps `pred -> gt`, backward maps `gt -> pred`. A rank-deficient
/// design falls back to ridge regression and sets `ridge_fallback`.
pub fn fit_regressor(
    pred: &[Vec<[f64; 2]>],
    gt: &[Vec<[f64; 2]>],
    subset_size: usize,
    direction: Direction,
    seed: u64,
) -> Result<Regressor> {
    let m = pred.len();
    if gt.len() != m {
        return Err(UldError::shape("regression images", m, gt.len()));
    }
    if subset_size == 0 || subset_size > m {
        return Err(UldError::InvalidArgument(format!(
            "subset size {subset_size} must be in 1..={m}"
        )));
    }
    let (src, dst) = match direction {
        Direction::Forward => (pred, gt),
        Direction::Backward => (gt, pred),
    };
    let n_src = src[0].len();
    let n_dst = dst[0].len();
    if src.iter().any(|s| s.len() != n_src) || dst.iter().any(|d| d.len() != n_dst) {
        return Err(UldError::InvalidArgument("landmark counts differ between images".into()));
    }
    let rows: Vec<usize> = if subset_size == m {
        (0..m).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = index::sample(&mut rng, m, subset_size).into_vec();
        r.sort_unstable();
        r
    };
    let p = 2 * n_src + 1;
    let x = DMatrix::from_fn(rows.len(), p, |i, j| features(&src[rows[i]])[j]);
    let y = DMatrix::from_fn(rows.len(), 2 * n_dst, |i, j| dst[rows[i]][j / 2][j % 2]);

    let svd = x.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let tol = max_sv * (rows.len().max(p) as f64) * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let (coef, ridge) = if rank == p {
        let c = svd
            .solve(&y, tol)
            .map_err(|e| UldError::InvalidArgument(format!("least squares failed: {e}")))?;
        (c, false)
    } else {
        let xt = x.transpose();
        let a = &xt * &x + DMatrix::identity(p, p) * RIDGE_LAMBDA;
        let b = &xt * &y;
        let c = a
            .cholesky()
            .ok_or_else(|| UldError::InvalidArgument("ridge system is not positive definite".into()))?
            .solve(&b);
        (c, true)
    };
    if coef.iter().any(|v| !v.is_finite()) {
        return Err(UldError::InvalidArgument("regression produced non-finite coefficients".into()));
    }
    Ok(Regressor {
        coefficients: (0..p).map(|i| (0..2 * n_dst).map(|j| coef[(i, j)]).collect()).collect(),
        n_src,
        n_dst,
        direction,
        subset_size: rows.len(),
        seed,
        ridge_fallback: ridge,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_sets(m: usize, k: usize, seed: u64) -> Vec<Vec<[f64; 2]>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m)
            .map(|_| (0..k).map(|_| [rng.random_range(0.0..30.0), rng.random_range(0.0..30.0)]).collect())
            .collect()
    }

    #[test]
    fn exact_affine_map_is_recovered() {
        let gt = random_sets(20, 3, 1);
        let pred: Vec<Vec<[f64; 2]>> = gt
            .iter()
            .map(|s| s.iter().map(|p| [0.5 * p[0] - 0.2 * p[1] + 3.0, 0.1 * p[0] + 1.5 * p[1] - 1.0]).collect())
            .collect();
        let r = fit_regressor(&pred, &gt, 20, Direction::Forward, 0).unwrap();
        assert!(!r.ridge_fallback);
        for (p, g) in pred.iter().zip(&gt) {
            for (a, b) in r.predict(p).unwrap().iter().zip(g) {
                assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn degenerate_design_uses_ridge() {
        let gt = random_sets(10, 2, 2);
        let pred: Vec<Vec<[f64; 2]>> = (0..10).map(|_| vec![[1.0, 1.0], [2.0, 2.0]]).collect();
        let r = fit_regressor(&pred, &gt, 10, Direction::Forward, 0).unwrap();
        assert!(r.ridge_fallback);
    }

    #[test]
    fn subset_selection_is_seeded() {
        let gt = random_sets(30, 2, 3);
        let pred = random_sets(30, 2, 4);
        let a = fit_regressor(&pred, &gt, 12, Direction::Backward, 7).unwrap();
        let b = fit_regressor(&pred, &gt, 12, Direction::Backward, 7).unwrap();
        assert_eq!(a, b);
        assert!(fit_regressor(&pred, &gt, 31, Direction::Forward, 7).is_err());
    }
}
