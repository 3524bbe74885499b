//! Pose-aware self-training with two-stage pseudo-labels.
//!
//! The detector head learns the composite-label heatmaps while the VAE
//! encoder, fed by the detector output, is shaped by a margin loss on pose
//! clusters. The aggregator and descriptor head stay frozen and the decoder
//! never enters the graph unless the full-VAE variant is enabled.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::duld::{Targets};
use super::{
    batch_indices, check_finite, heatmap_mse_var, iteration_rng, sample_anchor_triples, LossReport, Optimizers,
    Schedule, Snapshot, Stage, TrainContext,
};
use crate::bootstrap::sum_vars;
use crate::clustering::{update_training_set, ClusterMode, KMeansConfig, TrainingSet, UpdateConfig};
use crate::error::{Result, UldError};
use crate::heads::{render_gaussians, DETECTOR_PREFIX};
use crate::losses::margin_contrastive_var;
use crate::model::{LandmarkModel, NmsConfig};
use crate::pose_proxy::{Vae, ENCODER_PREFIX};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuldppConfig {
    pub schedule: Schedule,
    pub q: usize,
    pub k: usize,
    pub sigma: f64,
    pub nms: NmsConfig,
    pub mse_weight: f64,
    pub latent_weight: f64,
    /// Also train the decoder on the ELBO in this stage.
    pub full_vae: bool,
    pub kmeans: KMeansConfig,
    pub seed: u64,
}

impl Default for DuldppConfig {
    fn default() -> Self {
        DuldppConfig {
            schedule: Schedule {
                total_iterations: 2000,
                recluster_every: Some(200),
                learning_rate: 1e-3,
                adam_betas: (0.9, 0.999),
                batch_size: 8,
                margin: 0.8,
                stage: Stage::Duldpp,
            },
            q: 2,
            k: 10,
            sigma: 1.0,
            nms: NmsConfig {
                window: 5,
                threshold: 0.0,
                max_n: 18,
            },
            mse_weight: 1.0,
            latent_weight: 1.0,
            full_vae: false,
            kmeans: KMeansConfig::default(),
            seed: 13,
        }
    }
}

fn is_detector(name: &str) -> bool {
    name.starts_with(DETECTOR_PREFIX)
}

/// Two-stage self-training. `set` is re-clustered before the first step
/// unless it already carries two-stage labels, then at every multiple of
/// `recluster_every`.
#[allow(clippy::too_many_arguments)]
pub fn train_duldpp(
    ctx: &TrainContext,
    model: &mut LandmarkModel,
    vae: &mut Vae,
    optim: &mut Optimizers,
    mut set: TrainingSet,
    config: &DuldppConfig,
    start: usize,
    report: &mut LossReport,
    on_checkpoint: &mut dyn FnMut(&Snapshot) -> Result<()>,
) -> Result<TrainingSet> {
    let sch = &config.schedule;
    sch.validate()?;
    let mode = ClusterMode::TwoStage {
        q: config.q,
        k: config.k,
    };
    mode.validate()?;
    if (vae.config.height, vae.config.width) != (model.height(), model.width()) {
        return Err(UldError::shape(
            "VAE input size",
            format!("{}x{}", model.height(), model.width()),
            format!("{}x{}", vae.config.height, vae.config.width),
        ));
    }
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
            set = update_training_set(model, ctx.bank, ctx.train, Some(&*vae), &update, set.epoch)?;
            targets = Targets::render(&set, config.sigma, h, w);
            report.recluster(Stage::Duldpp, it, set.epoch);
            on_checkpoint(&Snapshot::new(Stage::Duldpp, it, model, Some(vae), optim, Some(&set)).with_losses(report))?;
        }
        targets.check(&set)?;
        let mut rng = iteration_rng(config.seed, it as u64);
        let batch = batch_indices(set.images.len(), sch.batch_size, &mut rng);

        let mut tape = Tape::new();
        let mut mses = Vec::with_capacity(batch.len());
        let mut codes: Vec<Var> = Vec::with_capacity(batch.len());
        let mut elbos = Vec::new();
        let mut poses = Vec::with_capacity(batch.len());
        for &b in &batch {
            let rec = &set.images[b];
            let fv = model.forward(&mut tape, &ctx.bank.stacks[rec.sample])?;
            mses.push(heatmap_mse_var(&mut tape, fv.heatmap, &targets.heatmaps[b]));
            if config.full_vae {
                let eps: Vec<f64> = (0..vae.latent_dim()).map(|_| rng.sample(StandardNormal)).collect();
                let g = render_gaussians(&rec.keypoints, config.sigma, h, w);
                elbos.push(vae.elbo_var(&mut tape, fv.heatmap, &g, &eps)?);
            }
            let enc = vae.encode_var(&mut tape, fv.heatmap);
            codes.push(enc.mu);
            poses.push(rec.pose_label.ok_or_else(|| {
                UldError::InvalidArgument(format!("sample {} has no pose label", rec.sample))
            })?);
        }
        let mse_sum = sum_vars(&mut tape, &mses);
        let mse = tape.scale(mse_sum, 1.0 / batch.len() as f64);
        let mut total = tape.scale(mse, config.mse_weight);
        let triples = sample_anchor_triples(&poses, &mut rng);
        let mut latent_value = 0.0;
        if !triples.is_empty() {
            let pick = |tape: &mut Tape, sel: &dyn Fn(&(usize, usize, usize)) -> usize| {
                let rows: Vec<Var> = triples.iter().map(|t| codes[sel(t)]).collect();
                tape.concat_rows(&rows)
            };
            let a = pick(&mut tape, &|t| t.0);
            let p = pick(&mut tape, &|t| t.1);
            let n = pick(&mut tape, &|t| t.2);
            let l = margin_contrastive_var(&mut tape, a, p, n, sch.margin);
            latent_value = tape.scalar(l);
            let lw = tape.scale(l, config.latent_weight);
            total = tape.add(total, lw);
        }
        let mut values = vec![
            ("mse", tape.scalar(mse)),
            ("latent_contrastive", latent_value),
        ];
        if !elbos.is_empty() {
            let s = sum_vars(&mut tape, &elbos);
            let e = tape.scale(s, 1.0 / batch.len() as f64);
            values.push(("elbo", tape.scalar(e)));
            total = tape.add(total, e);
        }
        values.push(("total", tape.scalar(total)));
        check_finite(Stage::Duldpp, it, &values)?;
        for &(name, v) in &values {
            report.push(it, Stage::Duldpp, name, v);
        }
        let grads = tape.backward(total);
        optim.step_model(model, &tape, &grads, &|_| false, &is_detector);
        if config.full_vae {
            optim.step_vae(vae, &tape, &grads, &|_| true);
        } else {
            optim.step_vae(vae, &tape, &grads, &|n| n.starts_with(ENCODER_PREFIX));
        }
    }
    on_checkpoint(&Snapshot::new(Stage::Duldpp, sch.total_iterations, model, Some(vae), optim, Some(&set)).with_losses(report))?;
    Ok(set)
}
