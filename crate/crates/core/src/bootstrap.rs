//! Self-supervised keypoint initialisation from image/augmentation pairs.
//!
//! Each training step warps an image with a random similarity transform and
//! asks the descriptor head to find every sampled pixel again in the other
//! view (a softmax over all positions), while the detector head learns to
//! fire where those matches are mutual and geometrically correct.

use std::sync::Arc;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::upscale_stack;
use crate::clustering::{ImageRecord, TrainingSet};
use crate::error::{Result, UldError};
use crate::geometry::{forward_mask, warp_image, warp_mix, AugmentConfig, SimilarityTransform};
use crate::heads::Heatmap;
use crate::image::Image;
use crate::model::{LandmarkModel, NmsConfig};
use crate::selftrain::{iteration_rng, LossReport, Optimizers, Snapshot, Stage, TrainContext};
use crate::tape::{Mat, RowMix, Tape, Var};

/// Transform plus validity masks of an image/augmentation pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGeometry {
    pub transform: SimilarityTransform,
    pub width: usize,
    pub height: usize,
    /// Source pixels whose image under the transform lies in the canvas.
    pub mask: Vec<bool>,
    /// Augmented pixels whose preimage lies in the source canvas.
    pub mask_aug: Vec<bool>,
}

impl PairGeometry {
    pub fn new(transform: SimilarityTransform, width: usize, height: usize) -> Self {
        PairGeometry {
            transform,
            width,
            height,
            mask: forward_mask(&transform, width, height),
            mask_aug: warp_mix(&transform, width, height).1,
        }
    }

    fn round_to_index(&self, (x, y): (f64, f64)) -> Option<usize> {
        let (rx, ry) = (x.round(), y.round());
        if rx < 0.0 || ry < 0.0 || rx > (self.width - 1) as f64 || ry > (self.height - 1) as f64 {
            return None;
        }
        Some(ry as usize * self.width + rx as usize)
    }

    /// Raster index of the augmented pixel nearest to the image of source
    /// pixel `q`, if it is inside the canvas.
    pub fn target_of(&self, q: usize) -> Option<usize> {
        let w = self.width;
        self.round_to_index(self.transform.apply((q % w) as f64, (q / w) as f64))
    }

    /// Raster index of the source pixel nearest to the preimage of
    /// augmented pixel `q`.
    pub fn source_of(&self, q: usize) -> Option<usize> {
        let w = self.width;
        self.round_to_index(self.transform.apply_inverse((q % w) as f64, (q / w) as f64))
    }
}

/// An image, its augmented copy and the pair geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondencePair {
    pub image: Image,
    pub augmented: Image,
    pub geometry: PairGeometry,
}

impl CorrespondencePair {
    pub fn from_transform(image: &Image, transform: SimilarityTransform) -> Self {
        CorrespondencePair {
            image: image.clone(),
            augmented: warp_image(image, &transform),
            geometry: PairGeometry::new(transform, image.width(), image.height()),
        }
    }
}

pub fn make_pair(image: &Image, rng_seed: u64, aug: &AugmentConfig) -> CorrespondencePair {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let t = aug.sample(image.width(), image.height(), &mut rng);
    CorrespondencePair::from_transform(image, t)
}

/// Binary cross-entropy of probability `p` against target `y`, with
/// `0 * log 0` taken as 0.
pub fn bce(p: f64, y: f64) -> f64 {
    const TINY: f64 = 1e-12;
    let mut l = 0.0;
    if y > 0.0 {
        l -= y * p.max(TINY).ln();
    }
    if y < 1.0 {
        l -= (1.0 - y) * (1.0 - p).max(TINY).ln();
    }
    l
}

/// Mean BCE over pixels where `mask` holds.
pub fn masked_bce(pred: &[f64], target: &[f64], mask: &[bool]) -> Result<f64> {
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(UldError::InvalidArgument("empty correspondence mask".into()));
    }
    let total: f64 = pred
        .iter()
        .zip(target)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&p, &y), _)| bce(p, y))
        .sum();
    Ok(total / n as f64)
}

/// Detector loss of a pair: average of the masked BCE on each side against
/// its correspondence targets.
pub fn detector_bce(
    h: &Heatmap,
    h_aug: &Heatmap,
    targets: &CorrespondenceTargets,
    pair: &PairGeometry,
) -> Result<f64> {
    if h.grid.dim() != h_aug.grid.dim() {
        return Err(UldError::shape("detector heatmaps", format!("{:?}", h.grid.dim()), format!("{:?}", h_aug.grid.dim())));
    }
    let a = masked_bce(h.grid.as_slice().expect("contiguous"), &targets.source, &pair.mask)?;
    let b = masked_bce(h_aug.grid.as_slice().expect("contiguous"), &targets.augmented, &pair.mask_aug)?;
    Ok(0.5 * (a + b))
}

/// Per-pixel detector targets on both sides of a pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceTargets {
    pub source: Vec<f64>,
    pub augmented: Vec<f64>,
}

fn nearest(row: ndarray::ArrayView1<f64>, others: &Mat, mask: &[bool]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, o) in others.outer_iter().enumerate() {
        if !mask[j] {
            continue;
        }
        let s = row.dot(&o);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((j, s));
        }
    }
    best.map(|(j, _)| j)
}

/// Positive targets at pixels whose descriptor is the mutual nearest
/// neighbour of a pixel in the other view lying within `tolerance` pixels
/// of the true correspondence. Descriptor rows must be unit length.
pub fn correspondence_targets(
    desc: &Mat,
    desc_aug: &Mat,
    pair: &PairGeometry,
    tolerance: f64,
) -> CorrespondenceTargets {
    let w = pair.width;
    let n = desc.nrows();
    let mut source = vec![0.0; n];
    let mut augmented = vec![0.0; n];
    let fwd: Vec<Option<usize>> = (0..n)
        .map(|q| if pair.mask[q] { nearest(desc.row(q), desc_aug, &pair.mask_aug) } else { None })
        .collect();
    let mut back_cache: Vec<Option<Option<usize>>> = vec![None; n];
    for q in 0..n {
        let Some(m) = fwd[q] else { continue };
        let back = *back_cache[m].get_or_insert_with(|| nearest(desc_aug.row(m), desc, &pair.mask));
        if back != Some(q) {
            continue;
        }
        let (tx, ty) = pair.transform.apply((q % w) as f64, (q / w) as f64);
        let (mx, my) = ((m % w) as f64, (m / w) as f64);
        if ((tx - mx).powi(2) + (ty - my).powi(2)).sqrt() <= tolerance {
            source[q] = 1.0;
            augmented[m] = 1.0;
        }
    }
    CorrespondenceTargets { source, augmented }
}

/// Mean negative log-likelihood of the true correspondence for each source
/// position in `positions`, under a softmax over all augmented positions
/// with logits `<f(q), f'(.)> / tau`.
pub fn correspondence_nll(
    desc: &Mat,
    desc_aug: &Mat,
    pair: &PairGeometry,
    tau: f64,
    positions: &[usize],
) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(UldError::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let mut total = 0.0;
    let mut count = 0;
    for &q in positions {
        let Some(t) = pair.target_of(q) else { continue };
        let logits: Vec<f64> = desc_aug.outer_iter().map(|r| r.dot(&desc.row(q)) / tau).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += lse - logits[t];
        count += 1;
    }
    if count == 0 {
        return Err(UldError::InvalidArgument("no valid correspondence positions".into()));
    }
    Ok(total / count as f64)
}

/// Tape form of the NLL for explicit `(row in a, target row in b)` pairs.
pub fn nll_var(tape: &mut Tape, a: Var, b: Var, matches: &[(usize, usize)], tau: f64) -> Var {
    let n_in = tape.value(a).nrows();
    let src: Vec<usize> = matches.iter().map(|m| m.0).collect();
    let tgt: Vec<usize> = matches.iter().map(|m| m.1).collect();
    let rows = tape.mix(a, Arc::new(RowMix::gather(n_in, &src)));
    let sims = tape.matmul_nt(rows, b);
    let logits = tape.scale(sims, 1.0 / tau);
    let lse = tape.log_sum_exp_rows(logits);
    let picked = tape.pick_cols(logits, tgt);
    let nll = tape.sub(lse, picked);
    tape.mean(nll)
}

/// Tape form of the masked BCE on logits: `mean_mask softplus(z) - y z`.
pub fn masked_bce_logits_var(tape: &mut Tape, logits: Var, target: &[f64], mask: &[bool]) -> Result<Var> {
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(UldError::InvalidArgument("empty correspondence mask".into()));
    }
    let rows = target.len();
    let y = tape.constant(Mat::from_shape_vec((rows, 1), target.to_vec()).expect("column"));
    let wts = Mat::from_shape_vec(
        (rows, 1),
        mask.iter().map(|&m| if m { 1.0 / n as f64 } else { 0.0 }).collect(),
    )
    .expect("column");
    let wv = tape.constant(wts);
    let sp = tape.softplus(logits);
    let yz = tape.mul(y, logits);
    let e = tape.sub(sp, yz);
    let we = tape.mul(e, wv);
    Ok(tape.sum(we))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    /// Sampled correspondences per direction and image.
    pub correspondences: usize,
    pub match_tolerance: f64,
    pub augment: AugmentConfig,
    pub nms: NmsConfig,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            iterations: 300,
            batch_size: 4,
            learning_rate: 1e-3,
            temperature: 0.1,
            correspondences: 64,
            match_tolerance: 1.0,
            augment: AugmentConfig::default(),
            nms: NmsConfig {
                window: 5,
                threshold: 0.0,
                max_n: 18,
            },
            checkpoint_every: 100,
            seed: 3,
        }
    }
}

fn sample_matches(
    valid: &[usize],
    map: impl Fn(usize) -> Option<usize>,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    let take = n.min(valid.len());
    index::sample(rng, valid.len(), take)
        .into_iter()
        .filter_map(|i| map(valid[i]).map(|t| (valid[i], t)))
        .collect()
}

/// Combined loss of one pair on `tape`; returns `(bce, nll)` variables.
fn pair_loss(
    ctx: &TrainContext,
    model: &LandmarkModel,
    tape: &mut Tape,
    sample_idx: usize,
    config: &BootstrapConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, Var)> {
    let sample = &ctx.samples[sample_idx];
    let (h, w) = (model.height(), model.width());
    let t = config.augment.sample(w, h, rng);
    let pair = PairGeometry::new(t, w, h);
    let up_aug = upscale_stack(&ctx.source.raw_transformed(sample, &t)?, h, w);
    let fa = model.forward(tape, &ctx.bank.stacks[sample_idx])?;
    let fb = model.forward(tape, &up_aug)?;
    let da = tape.normalize_rows(fa.descriptors, 1e-12);
    let db = tape.normalize_rows(fb.descriptors, 1e-12);

    let targets = correspondence_targets(tape.value(da), tape.value(db), &pair, config.match_tolerance);
    let la = masked_bce_logits_var(tape, fa.logits, &targets.source, &pair.mask)?;
    let lb = masked_bce_logits_var(tape, fb.logits, &targets.augmented, &pair.mask_aug)?;
    let sum = tape.add(la, lb);
    let bce_v = tape.scale(sum, 0.5);

    let valid_src: Vec<usize> = (0..w * h).filter(|&q| pair.mask[q]).collect();
    let valid_aug: Vec<usize> = (0..w * h).filter(|&q| pair.mask_aug[q]).collect();
    let fwd = sample_matches(&valid_src, |q| pair.target_of(q), config.correspondences, rng);
    let bwd = sample_matches(&valid_aug, |q| pair.source_of(q), config.correspondences, rng);
    if fwd.is_empty() || bwd.is_empty() {
        return Err(UldError::InvalidArgument("augmentation left no valid correspondences".into()));
    }
    let n1 = nll_var(tape, da, db, &fwd, config.temperature);
    let n2 = nll_var(tape, db, da, &bwd, config.temperature);
    let s = tape.add(n1, n2);
    let nll_v = tape.scale(s, 0.5);
    Ok((bce_v, nll_v))
}

/// Keypoints and descriptors for every training image, unlabelled.
pub fn extract_training_set(ctx: &TrainContext, model: &LandmarkModel, nms: &NmsConfig) -> Result<TrainingSet> {
    let mut images = Vec::with_capacity(ctx.train.len());
    for &j in ctx.train {
        let d = model.detect_keypoints(&ctx.bank.stacks[j], nms)?;
        images.push(ImageRecord::unlabelled(j, d.keypoints, d.descriptors));
    }
    Ok(TrainingSet::new(images))
}

/// Trains aggregator and heads on correspondence losses starting at
/// `start`, then extracts the initial training set.
///
/// `on_checkpoint` is called every `checkpoint_every` iterations and at the
/// end. A non-finite loss stops training before the offending update and
/// returns [`UldError::Diverged`], leaving `model` at its last finite state.
pub fn bootstrap_train(
    ctx: &TrainContext,
    model: &mut LandmarkModel,
    optim: &mut Optimizers,
    config: &BootstrapConfig,
    start: usize,
    report: &mut LossReport,
    on_checkpoint: &mut dyn FnMut(&Snapshot) -> Result<()>,
) -> Result<TrainingSet> {
    if ctx.train.is_empty() {
        return Err(UldError::InvalidArgument("bootstrap needs at least one training image".into()));
    }
    optim.set_lr(config.learning_rate);
    for it in start..config.iterations {
        let mut rng = iteration_rng(config.seed, it as u64);
        let take = config.batch_size.min(ctx.train.len());
        let batch: Vec<usize> = index::sample(&mut rng, ctx.train.len(), take)
            .into_iter()
            .map(|i| ctx.train[i])
            .collect();
        let mut tape = Tape::new();
        let mut bces = Vec::new();
        let mut nlls = Vec::new();
        for &j in &batch {
            let (b, n) = pair_loss(ctx, model, &mut tape, j, config, &mut rng)?;
            bces.push(b);
            nlls.push(n);
        }
        let bce_sum = sum_vars(&mut tape, &bces);
        let nll_sum = sum_vars(&mut tape, &nlls);
        let bce_mean = tape.scale(bce_sum, 1.0 / batch.len() as f64);
        let nll_mean = tape.scale(nll_sum, 1.0 / batch.len() as f64);
        let total = tape.add(bce_mean, nll_mean);
        let values = [
            ("bce", tape.scalar(bce_mean)),
            ("nll", tape.scalar(nll_mean)),
            ("total", tape.scalar(total)),
        ];
        for (name, v) in values {
            if !v.is_finite() {
                return Err(UldError::Diverged {
                    stage: Stage::Bootstrap.as_str().into(),
                    iteration: it,
                    term: name.into(),
                });
            }
        }
        for (name, v) in values {
            report.push(it, Stage::Bootstrap, name, v);
        }
        let grads = tape.backward(total);
        optim.step_model(model, &tape, &grads, &|_| true, &|_| true);
        let done = it + 1;
        if done % config.checkpoint_every.max(1) == 0 && done < config.iterations {
            on_checkpoint(&Snapshot::new(Stage::Bootstrap, done, model, None, optim, None).with_losses(report))?;
        }
    }
    let set = extract_training_set(ctx, model, &config.nms)?;
    on_checkpoint(&Snapshot::new(Stage::Bootstrap, config.iterations, model, None, optim, Some(&set)).with_losses(report))?;
    Ok(set)
}

pub(crate) fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Var {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v);
    }
    acc
}
