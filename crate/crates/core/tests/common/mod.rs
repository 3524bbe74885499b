//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod grad;

use uld_core::tape::Mat;

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by exhaustive scan, lowest index on ties.
pub fn brute_nearest(points: &[Vec<f64>], centroids: &Mat) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (c, row) in centroids.rows().into_iter().enumerate() {
                let d = sq_dist(p, &row.to_vec());
                if d < best.1 {
                    best = (c, d);
                }
            }
            best.0
        })
        .collect()
}

/// Minimum total cost over every injective row-to-column map.
pub fn brute_assignment_min(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
        if row == cost.len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                best = best.min(cost[row][c] + go(cost, row + 1, used));
                used[c] = false;
            }
        }
        best
    }
    let m = cost.first().map_or(0, Vec::len);
    go(cost, 0, &mut vec![false; m])
}

/// Relabels by order of first appearance so partitions compare directly.
pub fn canonical(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

/// Central difference of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &Mat, h: f64, mut f: impl FnMut(&Mat) -> f64) -> Mat {
    let mut g = Mat::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + h;
        let up = f(&probe);
        probe[[r, c]] = orig - h;
        let down = f(&probe);
        probe[[r, c]] = orig;
        g[[r, c]] = (up - down) / (2.0 * h);
    }
    g
}

/// Largest entry-wise error relative to the larger gradient norm.
pub fn relative_error(analytic: &Mat, numeric: &Mat) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-8);
    analytic
        .iter()
        .zip(numeric.iter())
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median of the first and last tenth of a series.
pub fn decile_medians(series: &[f64]) -> (f64, f64) {
    let n = (series.len() / 10).max(1);
    (median(&series[..n]), median(&series[series.len() - n..]))
}

/// `E_q[log q(z) - log p(z)]` by sampling.
pub fn kl_monte_carlo(mu: &[f64], log_var: &[f64], n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    let mut total = 0.0;
    for _ in 0..n {
        for (&m, &lv) in mu.iter().zip(log_var) {
            let e: f64 = rand::Rng::sample(rng, rand_distr::StandardNormal);
            let s = (0.5 * lv).exp();
            let z = m + s * e;
            let log_q = -0.5 * e * e - 0.5 * lv;
            let log_p = -0.5 * z * z;
            total += log_q - log_p;
        }
    }
    total / n as f64
}

/// Desk profile shrunk to a few seconds per stage.
pub fn small_config(run_id: &str) -> uld_core::pipeline::PipelineConfig {
    use uld_core::pipeline::{DatasetConfig, PipelineConfig};
    let mut c = PipelineConfig::desk();
    c.run_id = run_id.into();
    if let DatasetConfig::Synthetic(s) = &mut c.dataset {
        s.n_images = 24;
        s.n_test = 6;
    }
    c.k = 6;
    c.bootstrap.iterations = 40;
    c.bootstrap.checkpoint_every = 20;
    c.duld.schedule.total_iterations = 40;
    c.duld.schedule.recluster_every = Some(20);
    c.proxy.schedule.total_iterations = 20;
    c.proxy.checkpoint_every = 10;
    c.duldpp.schedule.total_iterations = 40;
    c.duldpp.schedule.recluster_every = Some(20);
    c.eval.consistency_images = 3;
    c
}
