use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClusterModel, ClusterStage};
use crate::error::{Result, UldError};
use crate::tape::Mat;

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            max_iter: 100,
            tol: 1e-8,
        }
    }
}

/// Full k-means output.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub model: ClusterModel,
    pub labels: Vec<usize>,
    /// Inertia after every assignment step.
    pub inertia: Vec<f64>,
    pub iterations: usize,
}

fn check_dims(points: &[Vec<f64>]) -> Result<usize> {
    let d = points.first().map(Vec::len).unwrap_or(0);
    if d == 0 {
        return Err(UldError::InvalidArgument("k-means needs non-empty vectors".into()));
    }
    if points.iter().any(|p| p.len() != d) {
        return Err(UldError::InvalidArgument("k-means input rows differ in length".into()));
    }
    Ok(d)
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_dist(p, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding. Empty clusters are re-seeded
/// with the point farthest from its current centroid.
pub fn kmeans_fit(points: &[Vec<f64>], k: usize, seed: u64, config: &KMeansConfig) -> Result<KMeansFit> {
    if k == 0 {
        return Err(UldError::InvalidArgument("k must be at least 1".into()));
    }
    if points.len() < k {
        return Err(UldError::InvalidArgument(format!(
            "k-means needs at least k = {k} points, got {}",
            points.len()
        )));
    }
    let d = check_dims(points)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut labels = vec![0usize; points.len()];
    let mut inertia = Vec::new();
    let mut iterations = 0;
    for it in 0..config.max_iter.max(1) {
        iterations = it + 1;
        let mut total = 0.0;
        let mut dists = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let (c, dd) = nearest(p, &centroids);
            labels[i] = c;
            dists[i] = dd;
            total += dd;
        }
        inertia.push(total);

        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut new = centroids.clone();
        for c in 0..k {
            if counts[c] > 0 {
                new[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // farthest point from its own centroid, lowest index on ties
                let mut far = (0, f64::NEG_INFINITY);
                for (i, &dd) in dists.iter().enumerate() {
                    if dd > far.1 {
                        far = (i, dd);
                    }
                }
                new[c] = points[far.0].clone();
                dists[far.0] = 0.0;
            }
        }
        let shift = centroids
            .iter()
            .zip(&new)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = new;
        if shift < config.tol {
            break;
        }
    }
    // final labels against the final centroids
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let (c, dd) = nearest(p, &centroids);
        labels[i] = c;
        total += dd;
    }
    inertia.push(total);
    let model = ClusterModel::new(
        Mat::from_shape_vec((k, d), centroids.into_iter().flatten().collect()).expect("k x d"),
        ClusterStage::FlatKeypoint,
        None,
    )?;
    Ok(KMeansFit {
        model,
        labels,
        inertia,
        iterations,
    })
}

pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<ClusterModel> {
    Ok(kmeans_fit(points, k, seed, &KMeansConfig { max_iter, tol })?.model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centres = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for (b, c) in centres.iter().enumerate() {
            for _ in 0..20 {
                pts.push(vec![c[0] + rng.random_range(-0.5..0.5), c[1] + rng.random_range(-0.5..0.5)]);
                truth.push(b);
            }
        }
        (pts, truth)
    }

    #[test]
    fn one_point_per_cluster_has_zero_inertia() {
        let pts = vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![5.0, -1.0]];
        let fit = kmeans_fit(&pts, 3, 4, &KMeansConfig::default()).unwrap();
        assert_eq!(*fit.inertia.last().unwrap(), 0.0);
        let mut seen = fit.labels.clone();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2]);
    }

    #[test]
    fn too_few_points_rejected() {
        assert!(kmeans(&[vec![1.0]], 2, 0, 10, 1e-6).is_err());
    }

    #[test]
    fn separated_blobs_are_recovered() {
        let (pts, truth) = blobs(1);
        let fit = kmeans_fit(&pts, 3, 9, &KMeansConfig::default()).unwrap();
        for b in 0..3 {
            let l = fit.labels[b * 20];
            assert!((b * 20..b * 20 + 20).all(|i| fit.labels[i] == l));
            assert!(truth.iter().zip(&fit.labels).filter(|(&t, _)| t != b).all(|(_, &x)| x != l));
        }
    }

    #[test]
    fn duplicated_points_keep_centroids() {
        let (pts, _) = blobs(2);
        let doubled: Vec<Vec<f64>> = pts.iter().chain(pts.iter()).cloned().collect();
        let a = kmeans(&pts, 3, 5, 100, 1e-10).unwrap();
        let b = kmeans(&doubled, 3, 5, 100, 1e-10).unwrap();
        for ca in a.centroids.outer_iter() {
            let best = b
                .centroids
                .outer_iter()
                .map(|cb| sq_dist(ca.as_slice().unwrap(), cb.as_slice().unwrap()))
                .fold(f64::INFINITY, f64::min);
            assert!(best < 1e-18);
        }
    }

    #[test]
    fn identical_points_with_spare_clusters() {
        let pts = vec![vec![1.0, 1.0]; 5];
        let fit = kmeans_fit(&pts, 3, 0, &KMeansConfig::default()).unwrap();
        assert_eq!(*fit.inertia.last().unwrap(), 0.0);
    }
}
