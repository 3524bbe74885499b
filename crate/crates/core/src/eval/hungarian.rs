use serde::{Deserialize, Serialize};

use crate::error::{Result, UldError};

/// Minimum-cost assignment of every row to a distinct column of an
/// `n x m` cost matrix with `n <= m` (Kuhn-Munkres with potentials).
/// Returns the column of each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = cost[0].len();
    if cost.iter().any(|r| r.len() != m) {
        return Err(UldError::InvalidArgument("ragged cost matrix".into()));
    }
    if n > m {
        return Err(UldError::InvalidArgument(format!("{n} rows cannot be matched to {m} columns")));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(UldError::InvalidArgument("cost matrix must be finite".into()));
    }
    // 1-based arrays; column 0 is the virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    Ok(out)
}

pub fn assignment_cost(cost: &[Vec<f64>], assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
}

/// Per ground-truth landmark matching accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingAccuracy {
    /// Discovered landmark matched to each ground-truth landmark.
    pub matched: Vec<Option<usize>>,
    /// Percentage of images within the threshold, per ground-truth landmark.
    pub accuracy: Vec<Option<f64>>,
}

/// One global assignment between discovered (`M x K`) and ground-truth
/// (`M x N`) landmarks minimising the dataset-mean normalised distance,
/// then per ground-truth landmark the percentage of images where its match
/// lies within `factor * normalizer`.
pub fn hungarian_accuracy(
    unsup: &[Vec<[f64; 2]>],
    gt: &[Vec<[f64; 2]>],
    normalizers: &[f64],
    factor: f64,
) -> Result<MatchingAccuracy> {
    let m = unsup.len();
    if gt.len() != m || normalizers.len() != m || m == 0 {
        return Err(UldError::shape("matching images", m, format!("{} / {}", gt.len(), normalizers.len())));
    }
    let k = unsup[0].len();
    let n = gt[0].len();
    if k == 0 {
        return Err(UldError::InvalidArgument("no discovered landmarks to match".into()));
    }
    if unsup.iter().any(|u| u.len() != k) || gt.iter().any(|g| g.len() != n) {
        return Err(UldError::InvalidArgument("landmark counts differ between images".into()));
    }
    if normalizers.iter().any(|&d| !(d > 0.0)) {
        return Err(UldError::InvalidArgument("normalizers must be positive".into()));
    }
    let dist = |img: usize, a: usize, b: usize| {
        let (p, q) = (unsup[img][a], gt[img][b]);
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt() / normalizers[img]
    };
    let cost: Vec<Vec<f64>> = (0..k)
        .map(|a| (0..n).map(|b| (0..m).map(|i| dist(i, a, b)).sum::<f64>() / m as f64).collect())
        .collect();
    let mut matched = vec![None; n];
    if k <= n {
        for (a, b) in hungarian(&cost)?.into_iter().enumerate() {
            matched[b] = Some(a);
        }
    } else {
        let t: Vec<Vec<f64>> = (0..n).map(|b| (0..k).map(|a| cost[a][b]).collect()).collect();
        for (b, a) in hungarian(&t)?.into_iter().enumerate() {
            matched[b] = Some(a);
        }
    }
    let accuracy = matched
        .iter()
        .enumerate()
        .map(|(b, a)| {
            a.map(|a| 100.0 * (0..m).filter(|&i| dist(i, a, b) <= factor).count() as f64 / m as f64)
        })
        .collect();
    Ok(MatchingAccuracy { matched, accuracy })
}
