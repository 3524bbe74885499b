//! VAE training on detector heatmaps with the landmark model frozen.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{batch_indices, check_finite, iteration_rng, LossReport, Optimizers, Schedule, Snapshot, Stage, TrainContext};
use crate::bootstrap::sum_vars;
use crate::clustering::TrainingSet;
use crate::error::{Result, UldError};
use crate::heads::{render_gaussians, Heatmap};
use crate::model::LandmarkModel;
use crate::pose_proxy::Vae;
use crate::tape::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyConfig {
    pub schedule: Schedule,
    /// Standard deviation of the reconstruction target Gaussians.
    pub sigma: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig {
            schedule: Schedule {
                total_iterations: 500,
                recluster_every: None,
                learning_rate: 1e-3,
                adam_betas: (0.9, 0.999),
                batch_size: 4,
                margin: 0.8,
                stage: Stage::Proxy,
            },
            sigma: 1.0,
            checkpoint_every: 250,
            seed: 9,
        }
    }
}

/// Detector heatmaps (inputs) and rendered keypoint maps (targets) for
/// every record of `set`.
pub fn proxy_pairs(
    ctx: &TrainContext,
    model: &LandmarkModel,
    set: &TrainingSet,
    sigma: f64,
) -> Result<Vec<(Heatmap, Heatmap)>> {
    let (h, w) = (model.height(), model.width());
    set.images
        .iter()
        .map(|r| {
            Ok((
                model.heatmap(&ctx.bank.stacks[r.sample])?,
                render_gaussians(&r.keypoints, sigma, h, w),
            ))
        })
        .collect()
}

/// Mean negative ELBO over `pairs` with the posterior mean as the code.
pub fn mean_elbo(vae: &Vae, pairs: &[(Heatmap, Heatmap)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(UldError::InvalidArgument("no heatmaps to score".into()));
    }
    let zeros = vec![0.0; vae.latent_dim()];
    let mut total = 0.0;
    for (x, g) in pairs {
        let mut tape = Tape::new();
        let input = tape.constant(x.to_rows());
        let l = vae.elbo_var(&mut tape, input, g, &zeros)?;
        total += tape.scalar(l);
    }
    Ok(total / pairs.len() as f64)
}

/// Fits the VAE to reconstruct each image's pseudo ground-truth map from
/// its detector heatmap. The landmark model is only read.
#[allow(clippy::too_many_arguments)]
pub fn train_proxy(
    ctx: &TrainContext,
    model: &LandmarkModel,
    vae: &mut Vae,
    optim: &mut Optimizers,
    set: &TrainingSet,
    config: &ProxyConfig,
    start: usize,
    report: &mut LossReport,
    on_checkpoint: &mut dyn FnMut(&Snapshot) -> Result<()>,
) -> Result<()> {
    let sch = &config.schedule;
    sch.validate()?;
    if set.images.is_empty() {
        return Err(UldError::InvalidArgument("proxy training needs a non-empty training set".into()));
    }
    optim.set_lr(sch.learning_rate);
    let pairs = proxy_pairs(ctx, model, set, config.sigma)?;
    for it in start..sch.total_iterations {
        let mut rng = iteration_rng(config.seed, it as u64);
        let batch = batch_indices(pairs.len(), sch.batch_size, &mut rng);
        let mut tape = Tape::new();
        let mut losses = Vec::with_capacity(batch.len());
        for &b in &batch {
            let (x, g) = &pairs[b];
            let eps: Vec<f64> = (0..vae.latent_dim()).map(|_| rng.sample(StandardNormal)).collect();
            let input = tape.constant(x.to_rows());
            losses.push(vae.elbo_var(&mut tape, input, g, &eps)?);
        }
        let s = sum_vars(&mut tape, &losses);
        let loss = tape.scale(s, 1.0 / batch.len() as f64);
        let v = tape.scalar(loss);
        check_finite(Stage::Proxy, it, &[("elbo", v)])?;
        report.push(it, Stage::Proxy, "elbo", v);
        let grads = tape.backward(loss);
        optim.step_vae(vae, &tape, &grads, &|_| true);
        let done = it + 1;
        if done % config.checkpoint_every.max(1) == 0 && done < sch.total_iterations {
            on_checkpoint(&Snapshot::new(Stage::Proxy, done, model, Some(vae), optim, Some(set)).with_losses(report))?;
        }
    }
    on_checkpoint(&Snapshot::new(Stage::Proxy, sch.total_iterations, model, Some(vae), optim, Some(set)).with_losses(report))?;
    Ok(())
}
