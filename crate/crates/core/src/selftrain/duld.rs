//! Clustering-driven self-training of detector and descriptor heads.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    batch_indices, check_finite, gather_rows, heatmap_mse_var, iteration_rng, sample_triples, LossReport,
    Optimizers, Schedule, Snapshot, Stage, TrainContext,
};
use crate::bootstrap::sum_vars;
use crate::clustering::{update_training_set, ClusterMode, KMeansConfig, PseudoLabel, TrainingSet, UpdateConfig};
use crate::error::{Result, UldError};
use crate::heads::{bilinear_point_mix, render_gaussians, Heatmap};
use crate::losses::{margin_contrastive_var, NORM_EPS};
use crate::model::{LandmarkModel, NmsConfig};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuldConfig {
    pub schedule: Schedule,
    pub k: usize,
    /// Standard deviation of the pseudo ground-truth Gaussians, in pixels.
    pub sigma: f64,
    pub nms: NmsConfig,
    pub mse_weight: f64,
    pub contrastive_weight: f64,
    /// Maximum contrastive triples per batch.
    pub triple_cap: usize,
    pub kmeans: KMeansConfig,
    pub seed: u64,
}

impl Default for DuldConfig {
    fn default() -> Self {
        DuldConfig {
            schedule: Schedule {
                total_iterations: 2000,
                recluster_every: Some(200),
                learning_rate: 1e-3,
                adam_betas: (0.9, 0.999),
                batch_size: 4,
                margin: 0.8,
                stage: Stage::Duld,
            },
            k: 10,
            sigma: 1.0,
            nms: NmsConfig {
                window: 5,
                threshold: 0.0,
                max_n: 18,
            },
            mse_weight: 1.0,
            contrastive_weight: 1.0,
            triple_cap: 64,
            kmeans: KMeansConfig::default(),
            seed: 5,
        }
    }
}

/// Pseudo ground-truth heatmaps rendered from one training-set epoch.
pub(crate) struct Targets {
    pub epoch: u64,
    pub heatmaps: Vec<Heatmap>,
}

impl Targets {
    pub fn render(set: &TrainingSet, sigma: f64, h: usize, w: usize) -> Self {
        Targets {
            epoch: set.epoch,
            heatmaps: set
                .images
                .iter()
                .map(|r| render_gaussians(&r.keypoints, sigma, h, w))
                .collect(),
        }
    }

    pub fn check(&self, set: &TrainingSet) -> Result<()> {
        if self.epoch != set.epoch {
            return Err(UldError::InvalidArgument(format!(
                "heatmap targets from epoch {} used with training set epoch {}",
                self.epoch, set.epoch
            )));
        }
        Ok(())
    }
}

pub(crate) fn descriptor_rows(tape: &mut Tape, descriptors: Var, points: &[(f64, f64)], h: usize, w: usize) -> Result<Var> {
    let mix = bilinear_point_mix(points, h, w)?;
    let rows = tape.mix(descriptors, Arc::new(mix));
    Ok(tape.normalize_rows(rows, NORM_EPS))
}

/// Self-training with flat K-means pseudo-labels.
///
/// A training set without labels (fresh from bootstrapping) is clustered
/// before the first step. Afterwards the set is rebuilt at every multiple
/// of `recluster_every`. `on_checkpoint` sees every re-clustered set and
/// the final state.
#[allow(clippy::too_many_arguments)]
pub fn train_duld(
    ctx: &TrainContext,
    model: &mut LandmarkModel,
    optim: &mut Optimizers,
    mut set: TrainingSet,
    config: &DuldConfig,
    start: usize,
    report: &mut LossReport,
    on_checkpoint: &mut dyn FnMut(&Snapshot) -> Result<()>,
) -> Result<TrainingSet> {
    let sch = &config.schedule;
    sch.validate()?;
    let mode = ClusterMode::Flat { k: config.k };
    mode.validate()?;
    optim.set_lr(sch.learning_rate);
    let (h, w) = (model.height(), model.width());
    let update = UpdateConfig {
        mode,
        nms: config.nms,
        seed: config.seed,
        kmeans: config.kmeans,
    };
    let mut targets = Targets::render(&set, config.sigma, h, w);
    for it in start..sch.total_iterations {
        let fresh = set.mode != Some(mode);
        if fresh || (it > start && sch.reclusters_at(it)) {
            set = update_training_set(model, ctx.bank, ctx.train, None, &update, set.epoch)?;
            targets = Targets::render(&set, config.sigma, h, w);
            report.recluster(Stage::Duld, it, set.epoch);
            on_checkpoint(&Snapshot::new(Stage::Duld, it, model, None, optim, Some(&set)).with_losses(report))?;
        }
        targets.check(&set)?;
        let mut rng = iteration_rng(config.seed, it as u64);
        let batch = batch_indices(set.images.len(), sch.batch_size, &mut rng);

        let mut tape = Tape::new();
        let mut mses = Vec::with_capacity(batch.len());
        let mut desc_rows = Vec::new();
        let mut labels: Vec<PseudoLabel> = Vec::new();
        for &b in &batch {
            let rec = &set.images[b];
            let fv = model.forward(&mut tape, &ctx.bank.stacks[rec.sample])?;
            mses.push(heatmap_mse_var(&mut tape, fv.heatmap, &targets.heatmaps[b]));
            if !rec.keypoints.is_empty() {
                let pts: Vec<(f64, f64)> = rec.keypoints.iter().map(|k| (k.x, k.y)).collect();
                desc_rows.push(descriptor_rows(&mut tape, fv.descriptors, &pts, h, w)?);
                labels.extend(rec.labels.iter().copied());
            }
        }
        let mse_sum = sum_vars(&mut tape, &mses);
        let mse = tape.scale(mse_sum, 1.0 / batch.len() as f64);
        let mut total = tape.scale(mse, config.mse_weight);
        let triples = sample_triples(&labels, config.triple_cap, &mut rng);
        let mut contrastive_value = 0.0;
        if !triples.is_empty() {
            let all = tape.concat_rows(&desc_rows);
            let a = gather_rows(&mut tape, all, &triples.iter().map(|t| t.0).collect::<Vec<_>>());
            let p = gather_rows(&mut tape, all, &triples.iter().map(|t| t.1).collect::<Vec<_>>());
            let n = gather_rows(&mut tape, all, &triples.iter().map(|t| t.2).collect::<Vec<_>>());
            let c = margin_contrastive_var(&mut tape, a, p, n, sch.margin);
            contrastive_value = tape.scalar(c);
            let cw = tape.scale(c, config.contrastive_weight);
            total = tape.add(total, cw);
        }
        let values = [
            ("mse", tape.scalar(mse)),
            ("contrastive", contrastive_value),
            ("total", tape.scalar(total)),
        ];
        check_finite(Stage::Duld, it, &values)?;
        for (name, v) in values {
            report.push(it, Stage::Duld, name, v);
        }
        let grads = tape.backward(total);
        optim.step_model(model, &tape, &grads, &|_| true, &|_| true);
    }
    on_checkpoint(&Snapshot::new(Stage::Duld, sch.total_iterations, model, None, optim, Some(&set)).with_losses(report))?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::ImageRecord;
    use crate::heads::Keypoint;

    #[test]
    fn targets_from_an_older_epoch_are_refused() {
        let mut set = TrainingSet::new(vec![ImageRecord::unlabelled(0, vec![Keypoint::new(3.0, 4.0)], vec![vec![1.0]])]);
        let targets = Targets::render(&set, 1.0, 8, 8);
        assert!(targets.check(&set).is_ok());
        set.epoch += 1;
        assert!(targets.check(&set).is_err());
    }
}
