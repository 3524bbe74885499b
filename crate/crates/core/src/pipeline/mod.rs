//! Orchestration of a whole run: data and feature preparation, the
//! zero-shot baseline, the four training stages with checkpointing and
//! resumption, and per-stage evaluation reports.
//!
//! Artifacts live under `root/run_id/stage/`. A stage only ever writes into
//! its own directory and reads the checkpoint of its prerequisite.

mod config;
mod landmarks;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{DatasetConfig, PipelineConfig, Profile, RoiKind, ZeroShotConfig};
pub use landmarks::{
    purity, record_points, roi_provider, to_labelled, transformed_region_pixels, LabelledPoints, ModelDetector,
    ZeroShotDetector,
};

use crate::backbone::sample_region_pixels;
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RunDir};
use crate::clustering::{
    cluster_quality, kmeans_fit, save_cluster_model, update_training_set, ClusterMode, ClusterModel, TrainingSet,
    UpdateConfig,
};
use crate::data::{ingest_dataset, Dataset, Sample};
use crate::error::{Result, UldError};
use crate::eval::{
    ced, clustering_accuracy, consistency_summary, hungarian_accuracy, normalizer_for, regression_scores,
    threshold_grid, yaw_bin, yaw_binned_nme, ClusteringAccuracy, EvalReport, LabelledLandmarks, LandmarkDetector,
};
use crate::heads::l2_normalize;
use crate::model::{FeatureBank, FeatureSource, LandmarkModel, NmsConfig};
use crate::nn::AdamConfig;
use crate::pose_proxy::Vae;
use crate::selftrain::{
    train_duld, train_duldpp, train_proxy, LossReport, Optimizers, Snapshot, Stage, TrainContext,
};

/// Environment variable overriding the run root.
pub const RUN_ROOT_ENV: &str = "ULD_RUN_ROOT";
pub const ZEROSHOT_DIR: &str = "zeroshot";

/// Run root: `ULD_RUN_ROOT` when set, else the configured one.
pub fn run_root(config: &PipelineConfig) -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| config.run_root.clone())
}

pub fn load_dataset(config: &DatasetConfig) -> Result<Dataset> {
    match config {
        DatasetConfig::Synthetic(c) => Dataset::synthetic(c),
        DatasetConfig::Manifest { root, format } => {
            let report = ingest_dataset(root, format)?;
            for w in &report.warnings {
                log::warn!("{w}");
            }
            Dataset::load(root, &report.manifest)
        }
    }
}

/// Discovered landmarks and scores of the zero-shot baseline.
#[derive(Debug, Clone)]
pub struct ZeroShotOutcome {
    pub centroids: ClusterModel,
    pub train_points: Vec<LabelledPoints>,
    pub test_points: Vec<LabelledPoints>,
    pub report: EvalReport,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub checkpoint: Checkpoint,
    pub report: EvalReport,
    /// Iteration training resumed from, when a partial checkpoint existed.
    pub resumed_from: Option<usize>,
    pub losses: LossReport,
}

/// Model, VAE, optimiser state and training set carried between stages.
struct State {
    model: LandmarkModel,
    vae: Option<Vae>,
    optim: Optimizers,
    set: Option<TrainingSet>,
}

pub struct Pipeline {
    /// Resolved configuration.
    pub config: PipelineConfig,
    pub dataset: Dataset,
    pub source: FeatureSource,
    pub bank: FeatureBank,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub run: RunDir,
    /// Load checkpoints whose config hash differs.
    pub force: bool,
}

impl Pipeline {
    pub fn new(config: &PipelineConfig, root: &Path) -> Result<Self> {
        let dataset = load_dataset(&config.dataset)?;
        Pipeline::with_dataset(config, dataset, root)
    }

    pub fn with_dataset(config: &PipelineConfig, dataset: Dataset, root: &Path) -> Result<Self> {
        config.validate()?;
        let mut config = config.resolved();
        let (h, w) = dataset.image_size()?;
        config.vae.height = h;
        config.vae.width = w;
        let source = FeatureSource::from_config(&config.features, h, w)?;
        let bank = FeatureBank::build(&source, &dataset.samples, h, w)?;
        let train = dataset.split_indices("train");
        if train.is_empty() {
            return Err(UldError::InvalidArgument("dataset has no training images".into()));
        }
        let mut test = dataset.split_indices("test");
        if test.is_empty() {
            log::warn!("dataset has no test split; scoring on the training images");
            test = train.clone();
        }
        let run = RunDir::new(root, &config.run_id);
        Ok(Pipeline { config, dataset, source, bank, train, test, run, force: false })
    }

    pub fn context(&self) -> TrainContext<'_> {
        TrainContext {
            samples: &self.dataset.samples,
            train: &self.train,
            source: &self.source,
            bank: &self.bank,
        }
    }

    fn samples(&self, idx: &[usize]) -> Vec<&Sample> {
        idx.iter().map(|&j| &self.dataset.samples[j]).collect()
    }

    fn nms_for(&self, stage: Stage) -> NmsConfig {
        match stage {
            Stage::Bootstrap => self.config.bootstrap.nms,
            Stage::Duld => self.config.duld.nms,
            Stage::Proxy | Stage::Duldpp => self.config.duldpp.nms,
        }
    }

    fn total_iterations(&self, stage: Stage) -> usize {
        match stage {
            Stage::Bootstrap => self.config.bootstrap.iterations,
            Stage::Duld => self.config.duld.schedule.total_iterations,
            Stage::Proxy => self.config.proxy.schedule.total_iterations,
            Stage::Duldpp => self.config.duldpp.schedule.total_iterations,
        }
    }

    fn stage_seed(&self, stage: Stage) -> u64 {
        match stage {
            Stage::Bootstrap => self.config.bootstrap.seed,
            Stage::Duld => self.config.duld.seed,
            Stage::Proxy => self.config.proxy.seed,
            Stage::Duldpp => self.config.duldpp.seed,
        }
    }

    /// Dataset-level pixel sampling, K-means on the parameter-free
    /// descriptors, then exemplar landmarks on every image.
    pub fn zeroshot(&self) -> Result<ZeroShotOutcome> {
        let cfg = &self.config.zeroshot;
        let provider = roi_provider(cfg.roi);
        let mut pool = Vec::new();
        for &j in &self.train {
            let s = &self.dataset.samples[j];
            let region = provider.region(s)?;
            let available = region.pixels().len();
            if available == 0 {
                continue;
            }
            let take = cfg.pixels_per_image.min(available);
            let pixels = sample_region_pixels(&region, take, cfg.seed.wrapping_add(j as u64))?;
            let f = self.source.plain_features(s)?;
            pool.extend(
                pixels
                    .iter()
                    .map(|&(x, y)| l2_normalize(&f.grid.slice(ndarray::s![y, x, ..]).to_vec())),
            );
        }
        let fit = kmeans_fit(&pool, cfg.k, cfg.seed, &cfg.kmeans)?;
        let quality = cluster_quality(&pool, &fit.labels).ok();
        let det = ZeroShotDetector {
            source: &self.source,
            clusters: &fit.model,
            roi: cfg.roi,
        };
        let detect = |idx: &[usize]| -> Result<Vec<LabelledPoints>> {
            idx.iter()
                .map(|&j| {
                    let s = &self.dataset.samples[j];
                    det.detect_labelled(s, &crate::geometry::SimilarityTransform::identity(s.image.width(), s.image.height()))
                })
                .collect()
        };
        let train_points = detect(&self.train)?;
        let test_points = detect(&self.test)?;
        let report = self.score(ZEROSHOT_DIR, &det, &train_points, &test_points, quality, None)?;
        Ok(ZeroShotOutcome { centroids: fit.model, train_points, test_points, report })
    }

    /// [`Pipeline::zeroshot`] plus its centroids and report on disk.
    pub fn run_zeroshot(&self) -> Result<ZeroShotOutcome> {
        let out = self.zeroshot()?;
        save_cluster_model(&out.centroids, &self.run.clusters(ZEROSHOT_DIR).join("centroids.uldc"))?;
        out.report.write(&self.run.report(ZEROSHOT_DIR))?;
        Ok(out)
    }

    fn load_prerequisite(&self, stage: Stage) -> Result<Checkpoint> {
        let pre = stage.prerequisite().expect("stage has a prerequisite");
        let missing = || UldError::MissingPrerequisite {
            stage: stage.as_str().into(),
            missing: pre.as_str().into(),
            run_dir: self.run.path.clone(),
        };
        let path = self.run.checkpoint(pre);
        if !path.is_file() {
            return Err(missing());
        }
        let ck = load_checkpoint(&path, Some(&self.config.stage_hash(pre)?), self.force)?;
        if !ck.complete {
            return Err(missing());
        }
        Ok(ck)
    }

    fn initial_state(&self, stage: Stage) -> Result<State> {
        if stage == Stage::Bootstrap {
            let (h, w) = self.dataset.image_size()?;
            let model = LandmarkModel::new(&self.source.layout(), h, w, &self.config.model)?;
            let optim = Optimizers::new(
                &model,
                AdamConfig { lr: self.config.bootstrap.learning_rate, ..AdamConfig::default() },
            );
            return Ok(State { model, vae: None, optim, set: None });
        }
        let ck = self.load_prerequisite(stage)?;
        let set = ck
            .training_set
            .ok_or_else(|| UldError::Checkpoint { path: self.run.checkpoint(stage), message: "prerequisite has no training set".into() })?;
        let vae = match stage {
            Stage::Proxy => Some(Vae::new(self.config.vae.clone())?),
            Stage::Duldpp => Some(ck.vae.ok_or_else(|| UldError::Checkpoint {
                path: self.run.checkpoint(Stage::Proxy),
                message: "proxy checkpoint holds no VAE".into(),
            })?),
            _ => None,
        };
        let adam = match stage {
            Stage::Duld => self.config.duld.schedule.adam(),
            Stage::Proxy => self.config.proxy.schedule.adam(),
            _ => self.config.duldpp.schedule.adam(),
        };
        let mut optim = ck.optim;
        optim.reset(&ck.model, vae.as_ref(), adam);
        Ok(State { model: ck.model, vae, optim, set: Some(set) })
    }

    /// Trains `stage` (resuming a partial checkpoint of it), then scores
    /// the result. A completed stage is only re-scored.
    pub fn run_stage(&self, stage: Stage) -> Result<StageOutcome> {
        self.run_stage_with(stage, &mut |_| Ok(()))
    }

    /// [`Pipeline::run_stage`] with `hook` called after every checkpoint is
    /// written; an error from `hook` stops the stage there.
    pub fn run_stage_with(&self, stage: Stage, hook: &mut dyn FnMut(&Snapshot) -> Result<()>) -> Result<StageOutcome> {
        let hash = self.config.stage_hash(stage)?;
        let ck_path = self.run.checkpoint(stage);
        let losses_path = self.run.losses(stage);
        let total = self.total_iterations(stage);
        let seed = self.stage_seed(stage);

        let mut losses = LossReport::default();
        let mut resumed_from = None;
        let (mut state, start) = if ck_path.is_file() {
            let ck = load_checkpoint(&ck_path, Some(&hash), self.force)?;
            if losses_path.is_file() {
                let text = std::fs::read_to_string(&losses_path).map_err(|e| UldError::io(&losses_path, e))?;
                losses = LossReport::from_jsonl(&text)?;
            }
            if ck.complete {
                let report = self.evaluate_checkpoint(&ck)?;
                report.write(&self.run.report(stage.as_str()))?;
                return Ok(StageOutcome { checkpoint: ck, report, resumed_from: None, losses });
            }
            losses.truncate(stage, ck.iteration);
            resumed_from = Some(ck.iteration);
            log::info!("resuming {} at iteration {}", stage.as_str(), ck.iteration);
            let it = ck.iteration;
            (State { model: ck.model, vae: ck.vae, optim: ck.optim, set: ck.training_set }, it)
        } else {
            (self.initial_state(stage)?, 0)
        };

        let mut last_set = state.set.clone();
        let result = {
            let run = &self.run;
            let mut on_checkpoint = |s: &Snapshot| -> Result<()> {
                let ck = Checkpoint::from_snapshot(s, s.iteration == total, &hash, seed);
                save_checkpoint(&ck, &ck_path)?;
                if let Some(l) = s.losses {
                    l.write_jsonl(&losses_path)?;
                }
                if let Some(set) = s.training_set {
                    if set.mode.is_some() {
                        run.save_clusters(stage.as_str(), set)?;
                    }
                    last_set = Some(set.clone());
                }
                hook(s)
            };
            let ctx = self.context();
            let State { model, vae, optim, set } = &mut state;
            let need_set = || {
                set.clone().ok_or_else(|| UldError::Checkpoint {
                    path: ck_path.clone(),
                    message: format!("{} needs a training set", stage.as_str()),
                })
            };
            match stage {
                Stage::Bootstrap => crate::bootstrap::bootstrap_train(
                    &ctx,
                    model,
                    optim,
                    &self.config.bootstrap,
                    start,
                    &mut losses,
                    &mut on_checkpoint,
                )
                .map(|_| ()),
                Stage::Duld => {
                    let s = need_set()?;
                    train_duld(&ctx, model, optim, s, &self.config.duld, start, &mut losses, &mut on_checkpoint).map(|_| ())
                }
                Stage::Proxy => {
                    let s = need_set()?;
                    let v = vae.as_mut().expect("proxy state holds a VAE");
                    train_proxy(&ctx, model, v, optim, &s, &self.config.proxy, start, &mut losses, &mut on_checkpoint)
                }
                Stage::Duldpp => {
                    let s = need_set()?;
                    let v = vae.as_mut().expect("duldpp state holds a VAE");
                    train_duldpp(&ctx, model, v, optim, s, &self.config.duldpp, start, &mut losses, &mut on_checkpoint)
                        .map(|_| ())
                }
            }
        };
        if let Err(e) = result {
            if let UldError::Diverged { iteration, .. } = &e {
                let snap = Snapshot::new(stage, *iteration, &state.model, state.vae.as_ref(), &state.optim, last_set.as_ref());
                save_checkpoint(&Checkpoint::from_snapshot(&snap, false, &hash, seed), &ck_path)?;
                losses.write_jsonl(&losses_path)?;
                log::error!("{e}; last finite state saved to {}", ck_path.display());
            }
            return Err(e);
        }
        losses.write_jsonl(&losses_path)?;
        let ck = load_checkpoint(&ck_path, Some(&hash), self.force)?;
        let report = self.evaluate_checkpoint(&ck)?;
        report.write(&self.run.report(stage.as_str()))?;
        Ok(StageOutcome { checkpoint: ck, report, resumed_from, losses })
    }

    /// Zero-shot baseline followed by every training stage in order.
    pub fn run_all(&self) -> Result<Vec<EvalReport>> {
        let mut reports = vec![self.run_zeroshot()?.report];
        for stage in Stage::ALL {
            reports.push(self.run_stage(stage)?.report);
        }
        Ok(reports)
    }

    /// Scores the stored checkpoint of `stage` without writing anything.
    pub fn evaluate_stage(&self, stage: Stage) -> Result<EvalReport> {
        let ck = load_checkpoint(&self.run.checkpoint(stage), Some(&self.config.stage_hash(stage)?), self.force)?;
        self.evaluate_checkpoint(&ck)
    }

    /// Flat centroids fitted to the current keypoints of the training
    /// images, which name the landmarks of every stage alike.
    pub fn landmark_clusters(&self, model: &LandmarkModel, stage: Stage) -> Result<TrainingSet> {
        let update = UpdateConfig {
            mode: ClusterMode::Flat { k: self.config.k },
            nms: self.nms_for(stage),
            seed: self.config.eval.seed,
            kmeans: self.config.duld.kmeans,
        };
        update_training_set(model, &self.bank, &self.train, None, &update, 0)
    }

    pub fn evaluate_checkpoint(&self, ck: &Checkpoint) -> Result<EvalReport> {
        let eval_set = self.landmark_clusters(&ck.model, ck.stage)?;
        let flat = eval_set.clusters.flat.clone().expect("flat clustering keeps its centroids");
        let det = ModelDetector {
            model: &ck.model,
            source: &self.source,
            clusters: &flat,
            nms: self.nms_for(ck.stage),
        };
        let train_points: Vec<LabelledPoints> = eval_set.images.iter().map(record_points).collect();
        let test_points = self
            .test
            .iter()
            .map(|&j| det.detect_stack(&self.bank.stacks[j]))
            .collect::<Result<Vec<_>>>()?;
        let labelled = ck.training_set.as_ref().filter(|s| s.mode.is_some()).unwrap_or(&eval_set);
        let k = labelled.mode.map_or(self.config.k, |m| m.k());
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for r in &labelled.images {
            for (d, l) in r.descriptors.iter().zip(&r.labels) {
                points.push(d.clone());
                labels.push(l.index(k));
            }
        }
        let quality = cluster_quality(&points, &labels).ok();
        let pose_accuracy = match ck.training_set.as_ref().and_then(|s| s.mode) {
            Some(ClusterMode::TwoStage { q, .. }) => self.pose_accuracy(ck.training_set.as_ref().expect("set"), q)?,
            _ => None,
        };
        self.score(ck.stage.as_str(), &det, &train_points, &test_points, quality, pose_accuracy)
    }

    /// Pose clusters of the training images against their pose ranges.
    pub fn pose_accuracy(&self, set: &TrainingSet, q: usize) -> Result<Option<ClusteringAccuracy>> {
        let edges = &self.config.eval.pose_range_edges;
        let mut labels = Vec::new();
        let mut ranges = Vec::new();
        for r in &set.images {
            let (Some(u), Some(yaw)) = (r.pose_label, self.dataset.samples[r.sample].yaw) else {
                continue;
            };
            if let Some(b) = yaw_bin(yaw, edges) {
                labels.push(u);
                ranges.push(b);
            }
        }
        if labels.is_empty() {
            return Ok(None);
        }
        clustering_accuracy(&labels, &ranges, q).map(Some)
    }

    fn score(
        &self,
        stage: &str,
        detector: &dyn LandmarkDetector,
        train_points: &[LabelledPoints],
        test_points: &[LabelledPoints],
        quality: Option<(f64, f64)>,
        pose_accuracy: Option<ClusteringAccuracy>,
    ) -> Result<EvalReport> {
        let opts = &self.config.eval;
        let k = self.config.k;
        let gt = |idx: &[usize]| -> Result<Vec<Vec<[f64; 2]>>> {
            idx.iter()
                .map(|&j| {
                    let s = &self.dataset.samples[j];
                    s.landmarks
                        .clone()
                        .ok_or_else(|| UldError::InvalidArgument(format!("sample {} has no ground-truth landmarks", s.id)))
                })
                .collect()
        };
        let train_gt = gt(&self.train)?;
        let test_gt = gt(&self.test)?;
        let test_samples = self.samples(&self.test);
        let norms = test_samples
            .iter()
            .map(|s| normalizer_for(s, opts.normalizer))
            .collect::<Result<Vec<_>>>()?;
        let train_pred: Vec<LabelledLandmarks> = train_points.iter().map(|p| to_labelled(p, k)).collect();
        let test_pred: Vec<LabelledLandmarks> = test_points.iter().map(|p| to_labelled(p, k)).collect();
        let scores = regression_scores(&train_pred, &train_gt, &test_pred, &test_gt, &norms, opts)?;
        let curve = ced(&scores.forward_per_image, &threshold_grid(opts.ced_max, opts.ced_steps))?;

        let iod: Vec<f64> = match test_samples.iter().map(|s| s.d_iod).collect::<Option<Vec<f64>>>() {
            Some(d) if d.iter().all(|&v| v > 0.0) => d,
            _ => norms.clone(),
        };
        let matching = hungarian_accuracy(&scores.test_filled, &test_gt, &iod, opts.matching_factor).ok();

        let consistency = if opts.consistency_images > 0 {
            let n = opts.consistency_images.min(test_samples.len());
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let transforms: Vec<_> = test_samples[..n]
                .iter()
                .map(|s| opts.consistency.sample(s.image.width(), s.image.height(), &mut rng))
                .collect();
            Some(consistency_summary(detector, &test_samples[..n], &transforms)?)
        } else {
            None
        };

        let yaws: Option<Vec<f64>> = test_samples.iter().map(|s| s.yaw).collect();
        let yaw_binned = match yaws {
            Some(y) => Some(yaw_binned_nme(&scores.forward_per_image, &y, &opts.yaw_edges)?),
            None => None,
        };

        Ok(EvalReport {
            stage: stage.to_string(),
            normalizer: opts.normalizer,
            n_train: self.train.len(),
            n_test: self.test.len(),
            discovered_landmarks: test_pred.iter().flatten().filter(|p| p.is_some()).count(),
            imputed_landmarks: scores.imputed,
            forward_nme: scores.forward_nme,
            backward_nme: scores.backward_nme,
            ced: curve,
            matching,
            consistency,
            silhouette: quality.map(|q| q.0),
            calinski_harabasz: quality.map(|q| q.1),
            yaw_edges: opts.yaw_edges.clone(),
            yaw_binned_nme: yaw_binned,
            clustering_accuracy: pose_accuracy,
            purity: purity(&test_samples, test_points),
        })
    }
}
