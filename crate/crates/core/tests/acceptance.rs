//! Acceptance gate. Every test prints one `PASS` or `FAIL` line with the
//! measured value next to its pinned threshold, then asserts it.
//!
//! The lines go straight to stdout so they survive output capture.

mod common;

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uld_core::checkpoint::Checkpoint;
use uld_core::clustering::{
    assign, cluster_quality, exemplar_assign, kmeans_fit, two_stage_cluster, ClusterModel, ClusterStage, KMeansConfig,
    LabelledKeypoint,
};
use uld_core::data::{Dataset, Sample, SyntheticConfig};
use uld_core::eval::{assignment_cost, ced, consistency_error, hungarian, nme, LandmarkDetector, Normalizer};
use uld_core::geometry::SimilarityTransform;
use uld_core::heads::{Keypoint, DESCRIPTOR_PREFIX};
use uld_core::model::FeatureSource;
use uld_core::pipeline::{DatasetConfig, Pipeline, PipelineConfig};
use uld_core::pose_proxy::{kl_divergence, latent_contrastive, DECODER_PREFIX};
use uld_core::selftrain::{descriptor_contrastive, Stage};
use uld_core::tape::Mat;

use common::{brute_assignment_min, brute_nearest, canonical, grad, kl_monte_carlo};

const ZEROSHOT_PURITY_MIN: f64 = 95.0;
const ZEROSHOT_NME_MAX: f64 = 5.0;
const ZEROSHOT_SECONDS_MAX: f64 = 120.0;
const SEPARATION_SIGMAS: f64 = 4.0;
const DULD_RATIO_MAX: f64 = 0.8;
const DULD_SECONDS_MAX: f64 = 600.0;
const POSE_ACCURACY_MIN: f64 = 80.0;
const DULDPP_SECONDS_MAX: f64 = 900.0;
const WORKED_EXAMPLE_TOLERANCE: f64 = 1e-9;
const KL_RELATIVE_TOLERANCE: f64 = 0.01;
const MARGIN: f64 = 0.8;

fn verdict(n: usize, title: &str, pass: bool, detail: &str) {
    let line = format!("{} [{n}] {title}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(pass, "{}", line.trim_end());
}

fn points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

#[test]
fn c1_zeroshot_on_separable_oracle_features() {
    let start = Instant::now();
    let mut c = PipelineConfig::desk();
    c.k = 6;
    c.zeroshot.k = 6;
    c.eval.normalizer = Normalizer::CanvasDiagonal;
    let DatasetConfig::Synthetic(s) = &c.dataset else { unreachable!() };
    assert_eq!((s.n_images - s.n_test, s.n_test, s.k_true), (60, 20, 6));
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(&c, dir.path()).unwrap();
    let FeatureSource::Scene { table, noise_sigma, .. } = &p.source else {
        panic!("desk profile uses the scene oracle")
    };
    assert_eq!(*noise_sigma, 0.05);
    let needed = SEPARATION_SIGMAS * noise_sigma * (table.dim() as f64).sqrt();
    let separation = table.min_separation();

    // nearest-embedding classification of every pixel of every image
    let (mut right, mut total) = (0usize, 0usize);
    for sample in &p.dataset.samples {
        let scene = sample.scene.as_ref().unwrap();
        let f = p.source.plain_features(sample).unwrap();
        let width = sample.image.width();
        for (i, truth) in scene.identity_map().into_iter().enumerate() {
            let want = truth.unwrap_or(table.num_identities());
            right += usize::from(table.classify(&f.pixel(i % width, i / width)) == want);
            total += 1;
        }
    }
    let oracle = 100.0 * right as f64 / total as f64;

    let out = p.run_zeroshot().unwrap();
    let secs = start.elapsed().as_secs_f64();
    let purity = out.report.purity.unwrap_or(0.0);
    let nme = out.report.forward_nme;
    let pass = separation >= needed
        && oracle == 100.0
        && purity >= ZEROSHOT_PURITY_MIN
        && nme <= ZEROSHOT_NME_MAX
        && secs <= ZEROSHOT_SECONDS_MAX;
    verdict(
        1,
        "zero-shot clustering of oracle features",
        pass,
        &format!(
            "separation {separation:.3} (>= {needed:.3}), oracle {oracle:.1}% (= 100), purity {purity:.1}% (>= {ZEROSHOT_PURITY_MIN}), \
             forward NME {nme:.2}% (<= {ZEROSHOT_NME_MAX}), {secs:.1}s (<= {ZEROSHOT_SECONDS_MAX})"
        ),
    );
}

/// One full desk run, shared by the criteria that need trained stages.
struct DeskRun {
    reports: Vec<String>,
    report_files: Vec<Vec<u8>>,
    duld_initial_nme: f64,
    duld_final_nme: f64,
    duld_seconds: f64,
    duldpp_seconds: f64,
    pose_accuracy: Option<f64>,
    descriptor_checksums: [String; 3],
    decoder_checksums: [String; 2],
    proxy_kept_model: bool,
    decoder_updates: u64,
    encoder_updates: u64,
}

const STAGES: [&str; 5] = ["zeroshot", "bootstrap", "duld", "proxy", "duldpp"];

fn report_files(p: &Pipeline) -> Vec<Vec<u8>> {
    STAGES.iter().map(|s| std::fs::read(p.run.report(s).join("report.json")).unwrap()).collect()
}

fn desk_run() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(&PipelineConfig::desk(), dir.path()).unwrap();
        let start = Instant::now();
        let mut reports = vec![p.run_zeroshot().unwrap().report.to_json()];
        let boot = p.run_stage(Stage::Bootstrap).unwrap();
        reports.push(boot.report.to_json());

        let mut initial = None;
        let duld = p
            .run_stage_with(Stage::Duld, &mut |s| {
                if s.iteration == 0 && s.training_set.is_some() && initial.is_none() {
                    let ck = Checkpoint::from_snapshot(s, false, "", 0);
                    initial = Some(p.evaluate_checkpoint(&ck)?.forward_nme);
                }
                Ok(())
            })
            .unwrap();
        let duld_seconds = start.elapsed().as_secs_f64();
        reports.push(duld.report.to_json());
        let proxy = p.run_stage(Stage::Proxy).unwrap();
        reports.push(proxy.report.to_json());
        let duldpp = p.run_stage(Stage::Duldpp).unwrap();
        let duldpp_seconds = start.elapsed().as_secs_f64();
        reports.push(duldpp.report.to_json());

        let vae_proxy = proxy.checkpoint.vae.as_ref().unwrap();
        let ck = &duldpp.checkpoint;
        let vae = ck.vae.as_ref().unwrap();
        let adam = ck.optim.vae.as_ref().unwrap();
        let (mut decoder_updates, mut encoder_updates) = (0, 0);
        for (i, (name, _)) in vae.store.iter().enumerate() {
            if name.starts_with(DECODER_PREFIX) {
                decoder_updates += adam.updates[i];
            } else {
                encoder_updates += adam.updates[i];
            }
        }
        let desc = |c: &Checkpoint| c.model.heads.store.checksum(DESCRIPTOR_PREFIX);
        DeskRun {
            report_files: report_files(&p),
            reports,
            duld_initial_nme: initial.expect("hook saw the first clustering"),
            duld_final_nme: duld.report.forward_nme,
            duld_seconds,
            duldpp_seconds,
            pose_accuracy: duldpp.report.clustering_accuracy.as_ref().map(|a| a.percent),
            descriptor_checksums: [desc(&duld.checkpoint), desc(&proxy.checkpoint), desc(ck)],
            decoder_checksums: [vae_proxy.store.checksum(DECODER_PREFIX), vae.store.checksum(DECODER_PREFIX)],
            proxy_kept_model: proxy.checkpoint.model == duld.checkpoint.model,
            decoder_updates,
            encoder_updates,
        }
    })
}

#[test]
fn c2_self_training_improves_on_its_start() {
    let r = desk_run();
    let ratio = r.duld_final_nme / r.duld_initial_nme;
    let pass = r.duld_final_nme < r.duld_initial_nme && ratio <= DULD_RATIO_MAX && r.duld_seconds <= DULD_SECONDS_MAX;
    verdict(
        2,
        "D-ULD lowers forward NME",
        pass,
        &format!(
            "forward NME {:.3}% -> {:.3}%, ratio {ratio:.3} (<= {DULD_RATIO_MAX}), {:.0}s (<= {DULD_SECONDS_MAX})",
            r.duld_initial_nme, r.duld_final_nme, r.duld_seconds
        ),
    );
}

#[test]
fn c3_pose_clusters_follow_pose_ranges() {
    let r = desk_run();
    let acc = r.pose_accuracy.unwrap_or(0.0);
    let pass = acc >= POSE_ACCURACY_MIN && r.duldpp_seconds <= DULDPP_SECONDS_MAX;
    verdict(
        3,
        "two-stage clustering accuracy with two pose clusters",
        pass,
        &format!("{acc:.1}% (>= {POSE_ACCURACY_MIN}), {:.0}s (<= {DULDPP_SECONDS_MAX})", r.duldpp_seconds),
    );
}

#[test]
fn c4_loss_formulas_match_hand_values() {
    let o = [0.0, 0.0];
    let descriptor = [
        // identical positive, negative beyond the margin
        (descriptor_contrastive(&o, &o, &[0.6, 0.6], &1, &1, &2, MARGIN).unwrap(), 0.0),
        // 0.2 to the positive, 0.5 to the negative: 0.2 + (0.8 - 0.5)
        (descriptor_contrastive(&o, &[0.2, 0.0], &[0.0, 0.5], &1, &1, &2, MARGIN).unwrap(), 0.5),
        // 0.6 to the positive, negative at 1.0: 0.6 + 0
        (descriptor_contrastive(&o, &[0.0, 0.6], &[0.6, 0.8], &1, &1, &2, MARGIN).unwrap(), 0.6),
    ];
    let z = [0.0, 0.0, 0.0];
    let latent = [
        (latent_contrastive(&z, &z, &[0.0, 0.9, 0.0], 0, 0, 1, MARGIN).unwrap(), 0.0),
        (latent_contrastive(&z, &[0.3, 0.0, 0.0], &[0.0, 1.0, 0.0], 0, 0, 1, MARGIN).unwrap(), 0.3),
        (latent_contrastive(&z, &z, &[0.0, 0.0, 0.5], 0, 0, 1, MARGIN).unwrap(), 0.3),
    ];
    let worst = descriptor.iter().chain(&latent).fold(0.0f64, |m, (got, want)| m.max((got - want).abs()));

    let closed = (kl_divergence(&[1.0; 64], &[0.0; 64]) - 32.0).abs();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut kl_worst = 0.0f64;
    for _ in 0..3 {
        let mu: Vec<f64> = (0..6).map(|_| rng.random_range(-1.5..1.5)).collect();
        let log_var: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let exact = kl_divergence(&mu, &log_var);
        let sampled = kl_monte_carlo(&mu, &log_var, 100_000, &mut rng);
        kl_worst = kl_worst.max((sampled - exact).abs() / exact);
    }
    let pass = worst <= WORKED_EXAMPLE_TOLERANCE && closed <= WORKED_EXAMPLE_TOLERANCE && kl_worst <= KL_RELATIVE_TOLERANCE;
    verdict(
        4,
        "contrastive and KL formulas",
        pass,
        &format!(
            "worked examples off by {worst:.1e}, closed-form KL off by {closed:.1e} (<= {WORKED_EXAMPLE_TOLERANCE:.0e}), \
             KL vs sampling {:.3}% (<= {}%)",
            100.0 * kl_worst,
            100.0 * KL_RELATIVE_TOLERANCE
        ),
    );
}

#[test]
fn c5_gradients_match_finite_differences() {
    let checks = [
        ("detector", grad::detector()),
        ("descriptor", grad::descriptor()),
        ("encoder", grad::encoder()),
        ("decoder", grad::decoder()),
    ];
    let small = grad::head_scalars() <= 1000 && grad::vae_scalars() <= 1000;
    let probed = checks.iter().all(|(_, c)| c.scalars > 0);
    let worst = checks.iter().fold(0.0f64, |m, (_, c)| m.max(c.error));
    let detail: Vec<String> = checks.iter().map(|(n, c)| format!("{n} {:.1e}", c.error)).collect();
    verdict(
        5,
        "gradients vs central differences",
        small && probed && worst < grad::TOLERANCE,
        &format!("{} (< {:.0e})", detail.join(", "), grad::TOLERANCE),
    );
}

#[test]
fn c6_clustering_contracts() {
    let cfg = KMeansConfig::default();
    let mut failures = Vec::new();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 1 + (seed as usize % 7);
        let pts = points(&mut rng, 200, 4);
        let fit = kmeans_fit(&pts, k, seed, &cfg).unwrap();
        if fit.inertia.windows(2).any(|w| w[1] > w[0] + 1e-12) {
            failures.push(format!("inertia rose (seed {seed})"));
        }
        let (labels, _) = assign(&pts, &fit.model).unwrap();
        if labels != brute_nearest(&pts, &fit.model.centroids) {
            failures.push(format!("assignment differs from brute force (seed {seed})"));
        }

        // per image: at most K exemplars, each label once
        let model = ClusterModel::new(Mat::from_shape_simple_fn((k, 3), || rng.random_range(-1.0..1.0)), ClusterStage::FlatKeypoint, None)
            .unwrap();
        for _ in 0..5 {
            let n = rng.random_range(1..40);
            let descs = points(&mut rng, n, 3);
            let (labels, _) = assign(&descs, &model).unwrap();
            let items: Vec<LabelledKeypoint> = descs
                .into_iter()
                .zip(labels)
                .enumerate()
                .map(|(i, (descriptor, label))| LabelledKeypoint { keypoint: Keypoint::new(i as f64, 0.0), descriptor, label })
                .collect();
            let out = exemplar_assign(&items, &model).unwrap();
            let mut seen = std::collections::BTreeSet::new();
            if out.len() > k || !out.iter().all(|e| seen.insert(e.label)) {
                failures.push(format!("exemplar labels repeat or exceed K (seed {seed})"));
            }
        }

        let q = 1 + (seed as usize % 3);
        let descriptors: Vec<Vec<Vec<f64>>> = (0..8).map(|_| points(&mut rng, 5, 3)).collect();
        let latents = points(&mut rng, 8, 2);
        let two = two_stage_cluster(&latents, &descriptors, q, k.min(5), seed, &cfg).unwrap();
        let distinct: std::collections::BTreeSet<_> = two.labels.iter().flatten().map(|l| l.index(k.min(5))).collect();
        if distinct.len() > q * k.min(5) || distinct.iter().any(|&i| i >= q * k.min(5)) {
            failures.push(format!("two-stage labels exceed Q x K (seed {seed})"));
        }
        let one = two_stage_cluster(&latents, &descriptors, 1, k.min(5), seed, &cfg).unwrap();
        let pool: Vec<Vec<f64>> = descriptors.iter().flatten().cloned().collect();
        let flat = kmeans_fit(&pool, k.min(5), seed, &cfg).unwrap();
        let one_labels: Vec<usize> = one.labels.iter().flatten().map(|l| l.cluster).collect();
        if canonical(&one_labels) != canonical(&flat.labels) {
            failures.push(format!("one pose group differs from flat clustering (seed {seed})"));
        }
    }
    verdict(
        6,
        "clustering contracts over 20 seeds",
        failures.is_empty(),
        &if failures.is_empty() { "inertia, nearest assignment, exemplars, two-stage bounds, Q=1 all hold".into() } else { failures.join("; ") },
    );
}

/// Reports the ground-truth landmarks, moved by the transform.
struct TruthDetector;

impl LandmarkDetector for TruthDetector {
    fn detect_labelled(&self, sample: &Sample, t: &SimilarityTransform) -> uld_core::Result<Vec<(usize, [f64; 2])>> {
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
fn c7_metric_contracts() {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for n in 1..=7 {
        for m in n..=7 {
            for _ in 0..3 {
                let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
                let a = hungarian(&cost).unwrap();
                if (assignment_cost(&cost, &a) - brute_assignment_min(&cost)).abs() > 1e-9 {
                    failures.push(format!("hungarian above exhaustive minimum at {n}x{m}"));
                }
            }
        }
    }

    for scale in [0.1, 0.5, 3.0, 17.0] {
        let mut set = || -> Vec<Vec<[f64; 2]>> {
            (0..4).map(|_| (0..5).map(|_| [rng.random_range(0.0..30.0), rng.random_range(0.0..30.0)]).collect()).collect()
        };
        let (a, b) = (set(), set());
        let norms = [10.0, 12.0, 8.0, 5.0];
        let scaled = |v: &Vec<Vec<[f64; 2]>>| -> Vec<Vec<[f64; 2]>> {
            v.iter().map(|r| r.iter().map(|p| [p[0] * scale, p[1] * scale]).collect()).collect()
        };
        let base = nme(&a, &b, &norms).unwrap();
        let moved = nme(&scaled(&a), &scaled(&b), &norms.map(|n| n * scale)).unwrap();
        if (base - moved).abs() > 1e-9 * base.max(1.0) {
            failures.push(format!("NME changed under scale {scale}"));
        }
    }

    let errors: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..30.0)).collect();
    let thresholds: Vec<f64> = (0..=30).map(|i| i as f64 * 1.1).collect();
    let curve = ced(&errors, &thresholds).unwrap();
    if curve.fractions.windows(2).any(|w| w[1] < w[0]) || *curve.fractions.last().unwrap() != 1.0 {
        failures.push("CED not monotone or short of 1".into());
    }

    let data = Dataset::synthetic(&SyntheticConfig { n_images: 5, n_test: 0, ..SyntheticConfig::default() }).unwrap();
    for s in &data.samples {
        let id = SimilarityTransform::identity(s.image.width(), s.image.height());
        let c = consistency_error(&TruthDetector, s, &id).unwrap().unwrap();
        if c.mean_error != 0.0 {
            failures.push(format!("identity consistency {} on {}", c.mean_error, s.id));
        }
    }

    for k in 2..5 {
        let pts = points(&mut rng, 30, 3);
        let labels: Vec<usize> = (0..30).map(|i| i % k).collect();
        let renamed: Vec<usize> = labels.iter().map(|&l| 100 + 7 * (k - 1 - l)).collect();
        let (s1, c1) = cluster_quality(&pts, &labels).unwrap();
        let (s2, c2) = cluster_quality(&pts, &renamed).unwrap();
        if (s1 - s2).abs() > 1e-12 || (c1 - c2).abs() > 1e-12 * c1.abs().max(1.0) {
            failures.push(format!("silhouette or CH changed under relabelling (K={k})"));
        }
    }
    verdict(
        7,
        "metric contracts",
        failures.is_empty(),
        &if failures.is_empty() {
            "hungarian = exhaustive up to 7x7, NME scale-free, CED monotone, identity consistency 0, quality label-free".into()
        } else {
            failures.join("; ")
        },
    );
}

#[test]
fn c8_frozen_parameters_stay_frozen() {
    let r = desk_run();
    let [duld, proxy, duldpp] = &r.descriptor_checksums;
    let descriptor_fixed = duld == proxy && proxy == duldpp;
    let decoder_fixed = r.decoder_checksums[0] == r.decoder_checksums[1];
    let pass = descriptor_fixed && r.proxy_kept_model && decoder_fixed && r.decoder_updates == 0 && r.encoder_updates > 0;
    verdict(
        8,
        "frozen parts during pose training",
        pass,
        &format!(
            "descriptor checksum fixed {descriptor_fixed}, proxy kept the landmark model {}, decoder checksum fixed {decoder_fixed}, \
             decoder updates {} (= 0), encoder updates {} (> 0)",
            r.proxy_kept_model, r.decoder_updates, r.encoder_updates
        ),
    );
}

#[test]
fn c9_clean_runs_are_byte_identical() {
    let first = desk_run();
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(&PipelineConfig::desk(), dir.path()).unwrap();
    let second: Vec<String> = p.run_all().unwrap().iter().map(|r| r.to_json()).collect();
    let files = report_files(&p);
    let differing: Vec<&str> = STAGES
        .iter()
        .enumerate()
        .filter(|&(i, _)| first.reports[i] != second[i] || first.report_files[i] != files[i])
        .map(|(_, s)| *s)
        .collect();
    verdict(
        9,
        "reproducible desk pipeline",
        differing.is_empty() && second.len() == STAGES.len(),
        &if differing.is_empty() {
            format!("{} reports byte-identical across two clean runs", STAGES.len())
        } else {
            format!("reports differ for {}", differing.join(", "))
        },
    );
}
