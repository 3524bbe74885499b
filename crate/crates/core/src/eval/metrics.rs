use serde::{Deserialize, Serialize};

use crate::error::{Result, UldError};

fn check_pair(mapped: &[Vec<[f64; 2]>], target: &[Vec<[f64; 2]>], normalizers: &[f64]) -> Result<()> {
    if mapped.len() != target.len() || mapped.len() != normalizers.len() {
        return Err(UldError::shape(
            "NME images",
            target.len(),
            format!("{} mapped, {} normalizers", mapped.len(), normalizers.len()),
        ));
    }
    for (i, (m, t)) in mapped.iter().zip(target).enumerate() {
        if m.len() != t.len() || t.is_empty() {
            return Err(UldError::shape("NME landmarks", t.len(), m.len()));
        }
        if !(normalizers[i] > 0.0) {
            return Err(UldError::InvalidArgument(format!("image {i} has normalizer {}", normalizers[i])));
        }
    }
    Ok(())
}

/// Mean Euclidean landmark error of each image divided by its normalizer,
/// in percent.
pub fn per_image_nme(mapped: &[Vec<[f64; 2]>], target: &[Vec<[f64; 2]>], normalizers: &[f64]) -> Result<Vec<f64>> {
    check_pair(mapped, target, normalizers)?;
    Ok(mapped
        .iter()
        .zip(target)
        .zip(normalizers)
        .map(|((m, t), &d)| {
            let e: f64 = m
                .iter()
                .zip(t)
                .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
                .sum();
            100.0 * e / (t.len() as f64 * d)
        })
        .collect())
}

/// Mean over images and landmarks of normalised error, in percent.
pub fn nme(mapped: &[Vec<[f64; 2]>], target: &[Vec<[f64; 2]>], normalizers: &[f64]) -> Result<f64> {
    let per = per_image_nme(mapped, target, normalizers)?;
    if per.is_empty() {
        return Err(UldError::InvalidArgument("NME of an empty set".into()));
    }
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Cumulative error distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CedCurve {
    pub thresholds: Vec<f64>,
    /// Fraction of images with error at most each threshold.
    pub fractions: Vec<f64>,
    /// Trapezoid area under the curve divided by the threshold range.
    pub auc: f64,
}

impl CedCurve {
    /// Two-column CSV with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,fraction\n");
        for (t, f) in self.thresholds.iter().zip(&self.fractions) {
            s.push_str(&format!("{t},{f}\n"));
        }
        s
    }
}

pub fn ced(errors: &[f64], thresholds: &[f64]) -> Result<CedCurve> {
    if errors.iter().any(|&e| !(e >= 0.0)) {
        return Err(UldError::InvalidArgument("CED errors must be non-negative".into()));
    }
    if thresholds.windows(2).any(|w| w[1] < w[0]) {
        return Err(UldError::InvalidArgument("CED thresholds must be sorted".into()));
    }
    let n = errors.len().max(1) as f64;
    let fractions: Vec<f64> = thresholds
        .iter()
        .map(|&t| errors.iter().filter(|&&e| e <= t).count() as f64 / n)
        .collect();
    let mut area = 0.0;
    for i in 1..thresholds.len() {
        area += 0.5 * (fractions[i] + fractions[i - 1]) * (thresholds[i] - thresholds[i - 1]);
    }
    let range = match (thresholds.first(), thresholds.last()) {
        (Some(a), Some(b)) if b > a => b - a,
        _ => 0.0,
    };
    let auc = if range > 0.0 { area / range } else { fractions.first().copied().unwrap_or(0.0) };
    Ok(CedCurve {
        thresholds: thresholds.to_vec(),
        fractions,
        auc,
    })
}

/// Evenly spaced thresholds `0, step, ..., max`.
pub fn threshold_grid(max: f64, steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| max * i as f64 / steps.max(1) as f64).collect()
}

/// Default yaw bin edges giving five ranges.
pub const YAW_EDGES: [f64; 6] = [-90.0, -60.0, -30.0, 30.0, 60.0, 90.0];

/// Bin of `yaw` for `edges`: left-closed, right-open, except the last bin
/// which also holds the final edge.
pub fn yaw_bin(yaw: f64, edges: &[f64]) -> Option<usize> {
    let last = edges.len().checked_sub(2)?;
    (0..=last).find(|&b| yaw >= edges[b] && (yaw < edges[b + 1] || (b == last && yaw == edges[b + 1])))
}

/// Mean error per yaw bin; bins without images are `None`.
pub fn yaw_binned_nme(errors: &[f64], yaws: &[f64], edges: &[f64]) -> Result<Vec<Option<f64>>> {
    if errors.len() != yaws.len() {
        return Err(UldError::shape("yaw angles", errors.len(), yaws.len()));
    }
    if edges.len() < 2 || edges.windows(2).any(|w| w[1] <= w[0]) {
        return Err(UldError::InvalidArgument("yaw edges must be strictly increasing".into()));
    }
    let nb = edges.len() - 1;
    let mut sum = vec![0.0; nb];
    let mut count = vec![0usize; nb];
    for (&e, &y) in errors.iter().zip(yaws) {
        let b = yaw_bin(y, edges)
            .ok_or_else(|| UldError::InvalidArgument(format!("yaw {y} outside [{}, {}]", edges[0], edges[nb])))?;
        sum[b] += e;
        count[b] += 1;
    }
    Ok(sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringAccuracy {
    pub percent: f64,
    /// Range assigned to each cluster (`None` for empty clusters).
    pub mapping: Vec<Option<usize>>,
    /// Clusters whose majority range was decided by the tie rule.
    pub ties: Vec<usize>,
}

/// Maps each cluster to its majority range (lowest range index on ties)
/// and reports the percentage of items whose range matches their
/// cluster's range.
pub fn clustering_accuracy(labels: &[usize], ranges: &[usize], q: usize) -> Result<ClusteringAccuracy> {
    if labels.len() != ranges.len() {
        return Err(UldError::shape("range labels", labels.len(), ranges.len()));
    }
    if labels.is_empty() {
        return Err(UldError::InvalidArgument("clustering accuracy of an empty set".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= q) {
        return Err(UldError::InvalidArgument(format!("cluster label {bad} outside [0, {q})")));
    }
    let n_ranges = ranges.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![vec![0usize; n_ranges]; q];
    for (&l, &r) in labels.iter().zip(ranges) {
        counts[l][r] += 1;
    }
    let mut mapping = Vec::with_capacity(q);
    let mut ties = Vec::new();
    let mut correct = 0;
    for (c, row) in counts.iter().enumerate() {
        let best = row.iter().copied().max().unwrap_or(0);
        if best == 0 {
            mapping.push(None);
            continue;
        }
        let winners: Vec<usize> = (0..n_ranges).filter(|&r| row[r] == best).collect();
        if winners.len() > 1 {
            ties.push(c);
        }
        mapping.push(Some(winners[0]));
        correct += best;
    }
    Ok(ClusteringAccuracy {
        percent: 100.0 * correct as f64 / labels.len() as f64,
        mapping,
        ties,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_landmark_off_by_the_normalizer() {
        let v = nme(&[vec![[3.0, 4.0]]], &[vec![[0.0, 0.0]]], &[5.0]).unwrap();
        assert!((v - 100.0).abs() < 1e-12);
        assert!(nme(&[vec![[3.0, 4.0]]], &[vec![[0.0, 0.0]]], &[0.0]).is_err());
    }

    #[test]
    fn ced_counts() {
        let c = ced(&[1.0, 2.0, 3.0], &[2.0]).unwrap();
        assert!((c.fractions[0] - 2.0 / 3.0).abs() < 1e-12);
        let z = ced(&[0.0, 0.0], &threshold_grid(1.0, 4)).unwrap();
        assert!(z.fractions.iter().all(|&f| f == 1.0));
        assert!((z.auc - 1.0).abs() < 1e-12);
    }

    #[test]
    fn yaw_edges_are_left_closed() {
        assert_eq!(yaw_bin(-30.0, &YAW_EDGES), Some(2));
        assert_eq!(yaw_bin(30.0, &YAW_EDGES), Some(3));
        assert_eq!(yaw_bin(90.0, &YAW_EDGES), Some(4));
        assert_eq!(yaw_bin(91.0, &YAW_EDGES), None);
        let b = yaw_binned_nme(&[1.0, 3.0], &[0.0, 70.0], &YAW_EDGES).unwrap();
        assert_eq!(b, vec![None, None, Some(1.0), None, Some(3.0)]);
    }

    #[test]
    fn tie_goes_to_lowest_range() {
        let a = clustering_accuracy(&[0, 0, 1, 1], &[1, 0, 1, 1], 2).unwrap();
        assert_eq!(a.mapping, vec![Some(0), Some(1)]);
        assert_eq!(a.ties, vec![0]);
        assert!((a.percent - 75.0).abs() < 1e-12);
    }
}
