mod common;

use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uld_core::backbone::{aggregate, oracle_backbone, AggregatorParams, EmbeddingTable, RawFeature, RawFeatureStack, RawLayout};
use uld_core::bootstrap::make_pair;
use uld_core::clustering::{
    assign, cluster_quality, exemplar_assign, kmeans_fit, two_stage_cluster, ClusterModel, ClusterStage, KMeansConfig,
    LabelledKeypoint,
};
use uld_core::data::{Dataset, SyntheticConfig};
use uld_core::eval::{assignment_cost, ced, consistency_error, hungarian, nme, LandmarkDetector};
use uld_core::geometry::{AugmentConfig, SimilarityTransform};
use uld_core::heads::{nms_extract, render_gaussians, Heatmap, HeatmapSource, Keypoint};
use uld_core::image::Image;
use uld_core::nn::Activation;
use uld_core::pose_proxy::latent_contrastive;
use uld_core::selftrain::descriptor_contrastive;
use uld_core::tape::Mat;

use common::{brute_assignment_min, brute_nearest, canonical, sq_dist};

fn config() -> ProptestConfig {
    ProptestConfig { cases: 48, ..ProptestConfig::default() }
}

fn random_stack(seed: u64, layers: usize, steps: usize) -> RawFeatureStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut maps = Vec::new();
    for l in 0..layers {
        let side = 2 + 2 * l;
        for t in 0..steps {
            let grid = Array3::from_shape_simple_fn((side, side, 3), || rng.random_range(-1.0..1.0));
            maps.push(RawFeature { layer: l, step: t, grid });
        }
    }
    RawFeatureStack { maps }
}

fn layout_of(stack: &RawFeatureStack) -> Vec<RawLayout> {
    stack
        .maps
        .iter()
        .map(|m| {
            let (height, width, channels) = m.grid.dim();
            RawLayout { layer: m.layer, step: m.step, height, width, channels }
        })
        .collect()
}

fn points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn aggregation_is_linear_in_the_mixing_weights(seed in any::<u64>(), w in prop::collection::vec(-2.0f64..2.0, 4), v in prop::collection::vec(-2.0f64..2.0, 4)) {
        let stack = random_stack(seed, 2, 2);
        let base = AggregatorParams::new(&layout_of(&stack), 6, 6, 4, Activation::Silu, seed ^ 1).unwrap();
        let with = |ws: &[f64]| {
            let mut p = base.clone();
            for (i, &(l, t)) in base.combos.iter().enumerate() {
                p.set_weight(l, t, ws[i]).unwrap();
            }
            aggregate(&stack, &p).unwrap().grid
        };
        let sum: Vec<f64> = w.iter().zip(&v).map(|(a, b)| a + b).collect();
        let lhs = with(&sum);
        let rhs = with(&w) + with(&v);
        for (a, b) in lhs.iter().zip(rhs.iter()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn aggregation_ignores_map_order(seed in any::<u64>(), rot in 0usize..6) {
        let stack = random_stack(seed, 2, 3);
        let p = AggregatorParams::new(&layout_of(&stack), 6, 6, 4, Activation::Silu, seed).unwrap();
        let mut shuffled = stack.clone();
        shuffled.maps.rotate_left(rot);
        shuffled.maps.reverse();
        prop_assert_eq!(aggregate(&stack, &p).unwrap().grid, aggregate(&shuffled, &p).unwrap().grid);
    }

    #[test]
    fn noiseless_oracle_reproduces_table_distances(seed in 0u64..500) {
        let cfg = SyntheticConfig { n_images: 1, n_test: 0, seed, ..SyntheticConfig::default() };
        let scene = Dataset::synthetic(&cfg).unwrap().samples[0].scene.clone().unwrap();
        let table = EmbeddingTable::new(cfg.k_true, 12, seed).unwrap();
        let fmap = oracle_backbone(&scene, &table, 0.0, seed).unwrap();
        let ids = scene.identity_map();
        let row = |id: Option<usize>| id.map_or(table.background(), |k| table.identity(k)).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..200 {
            let (a, b) = (rng.random_range(0..ids.len()), rng.random_range(0..ids.len()));
            let (w, _) = (scene.width, scene.height);
            let fa = fmap.pixel(a % w, a / w);
            let fb = fmap.pixel(b % w, b / w);
            prop_assert_eq!(sq_dist(&fa, &fb), sq_dist(&row(ids[a]), &row(ids[b])));
        }
    }

    #[test]
    fn nms_respects_cap_and_window(seed in any::<u64>(), window in prop::sample::select(vec![3usize, 5, 7]), max_n in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = Array2::from_shape_simple_fn((16, 16), || (rng.random_range(0..8) as f64) / 8.0);
        let kps = nms_extract(&Heatmap::new(grid, HeatmapSource::DetectorOutput), window, 0.0, max_n);
        prop_assert!(kps.len() <= max_n);
        let r = (window / 2) as f64;
        for (i, a) in kps.iter().enumerate() {
            for b in &kps[i + 1..] {
                prop_assert!((a.x - b.x).abs() > r || (a.y - b.y).abs() > r);
            }
        }
    }

    #[test]
    fn gaussian_rendering_is_translation_equivariant(xs in prop::collection::vec((8.0f64..16.0, 8.0f64..16.0), 1..5), dx in -4i32..5, dy in -4i32..5, sigma in 0.5f64..3.0) {
        let pts: Vec<Keypoint> = xs.iter().map(|&(x, y)| Keypoint::new(x, y)).collect();
        let moved: Vec<Keypoint> = pts.iter().map(|p| Keypoint::new(p.x + dx as f64, p.y + dy as f64)).collect();
        let a = render_gaussians(&pts, sigma, 28, 28);
        let b = render_gaussians(&moved, sigma, 28, 28);
        for y in 4..24i32 {
            for x in 4..24i32 {
                let v = a.grid[[y as usize, x as usize]];
                let w = b.grid[[(y + dy) as usize, (x + dx) as usize]];
                prop_assert!((v - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pair_masks_round_trip(seed in any::<u64>()) {
        let image = Image::new(Array3::from_elem((20, 24, 3), 0.5));
        let pair = make_pair(&image, seed, &AugmentConfig::default());
        let g = &pair.geometry;
        for q in 0..g.width * g.height {
            if !g.mask[q] {
                continue;
            }
            let (x, y) = ((q % g.width) as f64, (q / g.width) as f64);
            let (tx, ty) = g.transform.apply(x, y);
            let (bx, by) = g.transform.apply_inverse(tx, ty);
            prop_assert!((bx - x).abs() <= 0.5 && (by - y).abs() <= 0.5);
            let t = g.target_of(q).expect("masked pixels land inside");
            if !g.mask_aug[t] {
                continue;
            }
            let back = g.source_of(t).expect("preimage inside");
            prop_assert!(((back % g.width) as f64 - x).abs() <= 1.0 && ((back / g.width) as f64 - y).abs() <= 1.0);
        }
    }

    #[test]
    fn kmeans_inertia_never_increases(seed in any::<u64>(), n in 12usize..60, k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = points(&mut rng, n, 3);
        let fit = kmeans_fit(&pts, k, seed, &KMeansConfig::default()).unwrap();
        for w in fit.inertia.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn assignment_is_idempotent_and_nearest(seed in any::<u64>(), k in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = points(&mut rng, 50, 4);
        let model = kmeans_fit(&pts, k, seed, &KMeansConfig::default()).unwrap().model;
        let (labels, _) = assign(&pts, &model).unwrap();
        prop_assert_eq!(&labels, &brute_nearest(&pts, &model.centroids));
        let snapped: Vec<Vec<f64>> = labels.iter().map(|&l| model.centroids.row(l).to_vec()).collect();
        let (again, d) = assign(&snapped, &model).unwrap();
        prop_assert_eq!(again, labels);
        prop_assert!(d.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn exemplars_carry_distinct_labels(seed in any::<u64>(), n in 1usize..40, k in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = ClusterModel::new(Mat::from_shape_simple_fn((k, 3), || rng.random_range(-1.0..1.0)), ClusterStage::FlatKeypoint, None).unwrap();
        let descs = points(&mut rng, n, 3);
        let (labels, _) = assign(&descs, &model).unwrap();
        let items: Vec<LabelledKeypoint> = descs
            .into_iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (descriptor, label))| LabelledKeypoint { keypoint: Keypoint::new(i as f64, 0.0), descriptor, label })
            .collect();
        let out = exemplar_assign(&items, &model).unwrap();
        prop_assert!(out.len() <= k);
        let mut seen = std::collections::BTreeSet::new();
        prop_assert!(out.iter().all(|e| seen.insert(e.label)));
    }

    #[test]
    fn one_pose_group_is_flat_clustering(seed in any::<u64>(), k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let descriptors: Vec<Vec<Vec<f64>>> = (0..6).map(|_| points(&mut rng, 5, 3)).collect();
        let latents = points(&mut rng, 6, 2);
        let cfg = KMeansConfig::default();
        let two = two_stage_cluster(&latents, &descriptors, 1, k, seed, &cfg).unwrap();
        let flat_pool: Vec<Vec<f64>> = descriptors.iter().flatten().cloned().collect();
        let flat = kmeans_fit(&flat_pool, k, seed, &cfg).unwrap();
        let two_labels: Vec<usize> = two.labels.iter().flatten().map(|l| l.cluster).collect();
        prop_assert_eq!(canonical(&two_labels), canonical(&flat.labels));
        prop_assert!(two.labels.iter().flatten().all(|l| l.index(k) < k));
    }

    #[test]
    fn two_stage_label_space_is_bounded(seed in any::<u64>(), q in 1usize..4, k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let descriptors: Vec<Vec<Vec<f64>>> = (0..8).map(|_| points(&mut rng, 4, 3)).collect();
        let latents = points(&mut rng, 8, 2);
        let two = two_stage_cluster(&latents, &descriptors, q, k, seed, &KMeansConfig::default()).unwrap();
        let distinct: std::collections::BTreeSet<_> = two.labels.iter().flatten().collect();
        prop_assert!(distinct.len() <= q * k);
        prop_assert!(distinct.iter().all(|l| l.index(k) < q * k));
    }

    #[test]
    fn cluster_quality_ignores_label_names(seed in any::<u64>(), k in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = points(&mut rng, 30, 3);
        let labels: Vec<usize> = (0..30).map(|i| i % k).collect();
        let mut names: Vec<usize> = (0..k).map(|i| 100 + 7 * i).collect();
        names.reverse();
        let renamed: Vec<usize> = labels.iter().map(|&l| names[l]).collect();
        let (s1, c1) = cluster_quality(&pts, &labels).unwrap();
        let (s2, c2) = cluster_quality(&pts, &renamed).unwrap();
        prop_assert!((s1 - s2).abs() < 1e-12 && (c1 - c2).abs() <= 1e-12 * c1.abs().max(1.0));
    }

    #[test]
    fn latent_contrastive_is_nonnegative(seed in any::<u64>(), margin in 0.1f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = points(&mut rng, 3, 5);
        let loss = latent_contrastive(&v[0], &v[1], &v[2], 0, 0, 1, margin).unwrap();
        prop_assert!(loss >= 0.0);
        let d_neg = sq_dist(&v[0], &v[2]).sqrt();
        let zero = latent_contrastive(&v[0], &v[0], &v[2], 0, 0, 1, margin).unwrap();
        prop_assert_eq!(zero == 0.0, d_neg >= margin);
        let f = descriptor_contrastive(&v[0], &v[1], &v[2], &3, &3, &4, margin).unwrap();
        prop_assert!(f >= 0.0);
    }

    #[test]
    fn hungarian_matches_exhaustive_search(seed in any::<u64>(), n in 1usize..8, extra in 0usize..3) {
        let m = (n + extra).min(7);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
        let a = hungarian(&cost).unwrap();
        let mut cols = a.clone();
        cols.sort_unstable();
        cols.dedup();
        prop_assert_eq!(cols.len(), n);
        prop_assert!((assignment_cost(&cost, &a) - brute_assignment_min(&cost)).abs() < 1e-9);
    }

    #[test]
    fn ced_is_monotone_and_saturates(errors in prop::collection::vec(0.0f64..30.0, 1..40)) {
        let max = errors.iter().cloned().fold(0.0, f64::max);
        let thresholds: Vec<f64> = (0..=20).map(|i| max * 1.1 * i as f64 / 20.0).collect();
        let c = ced(&errors, &thresholds).unwrap();
        prop_assert!(c.fractions.windows(2).all(|w| w[1] >= w[0]));
        prop_assert_eq!(*c.fractions.last().unwrap(), 1.0);
        prop_assert!((0.0..=1.0).contains(&c.auc));
    }

    #[test]
    fn nme_is_scale_invariant(seed in any::<u64>(), scale in 0.1f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = || -> Vec<Vec<[f64; 2]>> { (0..4).map(|_| (0..5).map(|_| [rng.random_range(0.0..30.0), rng.random_range(0.0..30.0)]).collect()).collect() };
        let (a, b) = (set(), set());
        let norms = vec![10.0, 12.0, 8.0, 5.0];
        let s = |v: &Vec<Vec<[f64; 2]>>| -> Vec<Vec<[f64; 2]>> { v.iter().map(|r| r.iter().map(|p| [p[0] * scale, p[1] * scale]).collect()).collect() };
        let scaled_norms: Vec<f64> = norms.iter().map(|n| n * scale).collect();
        let base = nme(&a, &b, &norms).unwrap();
        let scaled = nme(&s(&a), &s(&b), &scaled_norms).unwrap();
        prop_assert!((base - scaled).abs() <= 1e-9 * base.max(1.0));
    }
}

/// Reports the ground-truth landmarks, moved by the transform.
struct TruthDetector;

impl LandmarkDetector for TruthDetector {
    fn detect_labelled(&self, sample: &uld_core::data::Sample, t: &SimilarityTransform) -> uld_core::Result<Vec<(usize, [f64; 2])>> {
        Ok(sample
            .landmarks
            .as_ref()
            .unwrap()
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let (x, y) = t.apply(p[0], p[1]);
                (i, [x, y])
            })
            .collect())
    }
}

#[test]
fn identity_consistency_is_exactly_zero() {
    let data = Dataset::synthetic(&SyntheticConfig { n_images: 5, n_test: 0, ..SyntheticConfig::default() }).unwrap();
    for s in &data.samples {
        let id = SimilarityTransform::identity(s.image.width(), s.image.height());
        let c = consistency_error(&TruthDetector, s, &id).unwrap().unwrap();
        assert_eq!(c.mean_error, 0.0);
        assert_eq!(c.unmatched, 0);
    }
}

#[test]
fn equivariant_detector_under_translation_is_consistent() {
    let data = Dataset::synthetic(&SyntheticConfig { n_images: 3, n_test: 0, ..SyntheticConfig::default() }).unwrap();
    for s in &data.samples {
        let mut t = SimilarityTransform::identity(s.image.width(), s.image.height());
        t.tx = 2.0;
        t.ty = -1.0;
        let c = consistency_error(&TruthDetector, s, &t).unwrap().unwrap();
        assert!(c.mean_error < 0.5);
    }
}
