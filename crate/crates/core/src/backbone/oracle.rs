use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::adapter::orthonormal_rows;
use super::FeatureMap;
use crate::data::SyntheticScene;
use crate::error::{Result, UldError};

/// Unit embeddings for `k` landmark identities plus one background row
/// (the last). Rows are mutually orthonormal, so any two are `sqrt(2)` apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub rows: Vec<Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(k: usize, dim: usize, seed: u64) -> Result<Self> {
        if k == 0 || dim < k + 1 {
            return Err(UldError::Config(format!(
                "oracle embeddings need dim >= k + 1 (k = {k}, dim = {dim})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = orthonormal_rows(k + 1, dim, &mut rng);
        Ok(EmbeddingTable {
            rows: m.outer_iter().map(|r| r.to_vec()).collect(),
        })
    }

    pub fn num_identities(&self) -> usize {
        self.rows.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    pub fn identity(&self, k: usize) -> &[f64] {
        &self.rows[k]
    }

    pub fn background(&self) -> &[f64] {
        &self.rows[self.rows.len() - 1]
    }

    /// Index of the nearest row; the background maps to `num_identities()`.
    pub fn classify(&self, v: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, row) in self.rows.iter().enumerate() {
            let d: f64 = row.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    /// Smallest pairwise Euclidean distance between rows.
    pub fn min_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.rows.len() {
            for j in i + 1..self.rows.len() {
                let d: f64 = self.rows[i]
                    .iter()
                    .zip(&self.rows[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                best = best.min(d);
            }
        }
        best
    }
}

/// Scene-level oracle features: pixels within the landmark radius carry the
/// landmark's embedding, everything else the background embedding, each with
/// isotropic Gaussian noise of standard deviation `noise_sigma`.
pub fn oracle_backbone(
    scene: &SyntheticScene,
    table: &EmbeddingTable,
    noise_sigma: f64,
    seed: u64,
) -> Result<FeatureMap> {
    if scene.num_landmarks() > table.num_identities() {
        return Err(UldError::Config(format!(
            "scene has {} identities but the embedding table only {}",
            scene.num_landmarks(),
            table.num_identities()
        )));
    }
    let (h, w, d) = (scene.height, scene.width, table.dim());
    let ids = scene.identity_map();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ scene.appearance_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut grid = Array3::zeros((h, w, d));
    for y in 0..h {
        for x in 0..w {
            let e = match ids[y * w + x] {
                Some(k) => table.identity(k),
                None => table.background(),
            };
            for c in 0..d {
                let n = if noise_sigma > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    noise_sigma * z
                } else {
                    0.0
                };
                grid[[y, x, c]] = e[c] + n;
            }
        }
    }
    Ok(FeatureMap::new(grid, "oracle-scene"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, SyntheticConfig};

    fn scene() -> SyntheticScene {
        let cfg = SyntheticConfig {
            n_images: 1,
            n_test: 0,
            ..SyntheticConfig::default()
        };
        Dataset::synthetic(&cfg).unwrap().samples[0].scene.clone().unwrap()
    }

    #[test]
    fn table_rows_are_orthonormal() {
        let t = EmbeddingTable::new(6, 16, 3).unwrap();
        for i in 0..t.rows.len() {
            for j in 0..t.rows.len() {
                let dot: f64 = t.rows[i].iter().zip(&t.rows[j]).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
        assert!((t.min_separation() - 2f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn noiseless_landmark_pixels_carry_their_embedding() {
        let s = scene();
        let t = EmbeddingTable::new(s.num_landmarks(), 12, 1).unwrap();
        let f = oracle_backbone(&s, &t, 0.0, 9).unwrap();
        let vis = s.visibility();
        for (k, p) in s.landmarks().iter().enumerate() {
            if !vis[k] {
                continue;
            }
            let (x, y) = (p[0].round() as usize, p[1].round() as usize);
            if s.identity_at(x, y) == Some(k) {
                assert_eq!(f.pixel(x, y), t.identity(k));
            }
        }
    }

    #[test]
    fn too_small_dimension_rejected() {
        assert!(EmbeddingTable::new(6, 6, 0).is_err());
    }
}
