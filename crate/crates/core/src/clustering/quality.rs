use std::collections::BTreeMap;

use super::kmeans::sq_dist;
use crate::error::{Result, UldError};

/// Mean silhouette coefficient and Calinski-Harabasz index.
///
/// Points in singleton clusters score a silhouette of 0. When the
/// within-cluster dispersion is zero the CH index is reported as 1.
pub fn cluster_quality(points: &[Vec<f64>], labels: &[usize]) -> Result<(f64, f64)> {
    if points.len() != labels.len() {
        return Err(UldError::shape("cluster quality labels", points.len(), labels.len()));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(UldError::InvalidArgument("cluster quality needs at least two clusters".into()));
    }
    Ok((silhouette(points, labels, &groups), calinski_harabasz(points, &groups)))
}

fn silhouette(points: &[Vec<f64>], labels: &[usize], groups: &BTreeMap<usize, Vec<usize>>) -> f64 {
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        let own = &groups[&labels[i]];
        if own.len() < 2 {
            continue;
        }
        let mean_to = |members: &[usize]| -> f64 {
            let s: f64 = members
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| sq_dist(&points[i], &points[j]).sqrt())
                .sum();
            let count = members.iter().filter(|&&j| j != i).count();
            s / count as f64
        };
        let a = mean_to(own);
        let b = groups
            .iter()
            .filter(|(&l, _)| l != labels[i])
            .map(|(_, m)| mean_to(m))
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    total / n as f64
}

fn calinski_harabasz(points: &[Vec<f64>], groups: &BTreeMap<usize, Vec<usize>>) -> f64 {
    let n = points.len();
    let k = groups.len();
    let d = points[0].len();
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n as f64;
        }
    }
    let mut between = 0.0;
    let mut within = 0.0;
    for members in groups.values() {
        let mut c = vec![0.0; d];
        for &j in members {
            for (cv, v) in c.iter_mut().zip(&points[j]) {
                *cv += v / members.len() as f64;
            }
        }
        between += members.len() as f64 * sq_dist(&c, &mean);
        within += members.iter().map(|&j| sq_dist(&points[j], &c)).sum::<f64>();
    }
    if within == 0.0 {
        return 1.0;
    }
    (between / (k - 1) as f64) / (within / (n - k) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singletons_score_zero_silhouette() {
        let (s, ch) = cluster_quality(&[vec![0.0], vec![3.0]], &[0, 1]).unwrap();
        assert_eq!(s, 0.0);
        assert!(ch.is_finite());
    }

    #[test]
    fn one_cluster_is_an_error() {
        assert!(cluster_quality(&[vec![0.0], vec![1.0]], &[4, 4]).is_err());
    }

    #[test]
    fn tight_blobs_score_high() {
        let pts = vec![vec![0.0], vec![0.1], vec![10.0], vec![10.1]];
        let (s, _) = cluster_quality(&pts, &[0, 0, 1, 1]).unwrap();
        assert!(s > 0.9);
    }
}
