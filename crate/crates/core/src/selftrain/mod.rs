//! Training loops and the plumbing they share.
//!
//! Every stage draws its randomness from [`iteration_rng`], so a run resumed
//! from a checkpoint at iteration `i` replays exactly what an uninterrupted
//! run would have done from `i` on.

mod duld;
mod duldpp;
mod proxy;

use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use duld::{train_duld, DuldConfig};
pub use duldpp::{train_duldpp, DuldppConfig};
pub use proxy::{mean_elbo, proxy_pairs, train_proxy, ProxyConfig};

use crate::clustering::TrainingSet;
use crate::data::Sample;
use crate::error::{Result, UldError};
use crate::heads::Heatmap;
use crate::losses::{check_triple_labels, margin_contrastive};
use crate::model::{FeatureBank, FeatureSource, LandmarkModel};
use crate::nn::{Adam, AdamConfig, ParamStore};
use crate::pose_proxy::Vae;
use crate::tape::{Gradients, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Bootstrap,
    Duld,
    Proxy,
    Duldpp,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Bootstrap, Stage::Duld, Stage::Proxy, Stage::Duldpp];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Bootstrap => "bootstrap",
            Stage::Duld => "duld",
            Stage::Proxy => "proxy",
            Stage::Duldpp => "duldpp",
        }
    }

    /// Stage whose checkpoint must exist before this one can start.
    pub fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::Bootstrap => None,
            Stage::Duld => Some(Stage::Bootstrap),
            Stage::Proxy => Some(Stage::Duld),
            Stage::Duldpp => Some(Stage::Proxy),
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.as_str() == s)
    }
}

/// Iteration budget and optimiser settings of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub total_iterations: usize,
    /// Iterations between re-clustering events; `None` never re-clusters
    /// after the first labelling.
    pub recluster_every: Option<usize>,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub batch_size: usize,
    pub margin: f64,
    pub stage: Stage,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(UldError::Config(format!("{}: batch size must be positive", self.stage.as_str())));
        }
        if !(self.margin > 0.0) {
            return Err(UldError::Config(format!("{}: margin must be positive", self.stage.as_str())));
        }
        if self.recluster_every == Some(0) {
            return Err(UldError::Config(format!("{}: recluster interval must be positive", self.stage.as_str())));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(UldError::Config(format!("{}: learning rate must be non-negative", self.stage.as_str())));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.adam_betas.0,
            beta2: self.adam_betas.1,
            ..AdamConfig::default()
        }
    }

    pub(crate) fn reclusters_at(&self, it: usize) -> bool {
        self.recluster_every.is_some_and(|r| it.is_multiple_of(r))
    }
}

/// Deterministic generator for iteration `it` of a stage seeded `seed`.
pub fn iteration_rng(seed: u64, it: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(it);
    rng
}

/// One logged loss value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub stage: Stage,
    pub loss_name: String,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReclusterEvent {
    pub stage: Stage,
    pub iteration: usize,
    pub epoch: u64,
}

pub const RECLUSTER_RECORD: &str = "recluster_epoch";

/// Loss values of every iteration and the re-clustering events.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub records: Vec<LossRecord>,
    pub reclusters: Vec<ReclusterEvent>,
}

impl LossReport {
    pub fn push(&mut self, iteration: usize, stage: Stage, name: &str, value: f64) {
        self.records.push(LossRecord {
            iteration,
            stage,
            loss_name: name.to_string(),
            value,
        });
    }

    pub fn recluster(&mut self, stage: Stage, iteration: usize, epoch: u64) {
        self.reclusters.push(ReclusterEvent { stage, iteration, epoch });
    }

    /// Values of one loss term in iteration order.
    pub fn series(&self, stage: Stage, name: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.stage == stage && r.loss_name == name)
            .map(|r| r.value)
            .collect()
    }

    /// Drops records at or after `iteration` for `stage`, used on resume.
    /// Re-clusterings run before the step of their iteration, so those at
    /// `iteration` itself are kept.
    pub fn truncate(&mut self, stage: Stage, iteration: usize) {
        self.records.retain(|r| r.stage != stage || r.iteration < iteration);
        self.reclusters.retain(|r| r.stage != stage || r.iteration <= iteration);
    }

    /// One JSON object per loss record, followed by one record per
    /// re-clustering event named [`RECLUSTER_RECORD`] whose value is the
    /// new epoch.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let events = self.reclusters.iter().map(|e| LossRecord {
            iteration: e.iteration,
            stage: e.stage,
            loss_name: RECLUSTER_RECORD.into(),
            value: e.epoch as f64,
        });
        for r in self.records.iter().cloned().chain(events) {
            out.push_str(&serde_json::to_string(&r).expect("plain record"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut report = LossReport::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let r: LossRecord = serde_json::from_str(line)?;
            if r.loss_name == RECLUSTER_RECORD {
                report.recluster(r.stage, r.iteration, r.value as u64);
            } else {
                report.records.push(r);
            }
        }
        Ok(report)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| UldError::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| UldError::io(path, e))
    }
}

pub(crate) fn check_finite(stage: Stage, iteration: usize, values: &[(&str, f64)]) -> Result<()> {
    for &(name, v) in values {
        if !v.is_finite() {
            return Err(UldError::Diverged {
                stage: stage.as_str().into(),
                iteration,
                term: name.into(),
            });
        }
    }
    Ok(())
}

/// Adam state for every parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizers {
    pub aggregator: Adam,
    pub heads: Adam,
    pub vae: Option<Adam>,
}

impl Optimizers {
    pub fn new(model: &LandmarkModel, config: AdamConfig) -> Self {
        Optimizers {
            aggregator: Adam::new(config, &model.aggregator.store),
            heads: Adam::new(config, &model.heads.store),
            vae: None,
        }
    }

    /// Fresh moments for a new stage with new settings, keeping nothing.
    pub fn reset(&mut self, model: &LandmarkModel, vae: Option<&Vae>, config: AdamConfig) {
        *self = Optimizers::new(model, config);
        self.vae = vae.map(|v| Adam::new(config, &v.store));
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.aggregator.config.lr = lr;
        self.heads.config.lr = lr;
        if let Some(v) = &mut self.vae {
            v.config.lr = lr;
        }
    }

    pub fn step_model(
        &mut self,
        model: &mut LandmarkModel,
        tape: &Tape,
        grads: &Gradients,
        aggregator_trainable: &dyn Fn(&str) -> bool,
        heads_trainable: &dyn Fn(&str) -> bool,
    ) {
        step_store(&mut self.aggregator, &mut model.aggregator.store, tape, grads, aggregator_trainable);
        step_store(&mut self.heads, &mut model.heads.store, tape, grads, heads_trainable);
    }

    pub fn step_vae(&mut self, vae: &mut Vae, tape: &Tape, grads: &Gradients, trainable: &dyn Fn(&str) -> bool) {
        let lr = self.heads.config;
        let adam = self.vae.get_or_insert_with(|| Adam::new(lr, &vae.store));
        step_store(adam, &mut vae.store, tape, grads, trainable);
    }
}

fn step_store(adam: &mut Adam, store: &mut ParamStore, tape: &Tape, grads: &Gradients, trainable: &dyn Fn(&str) -> bool) {
    let g = store.collect_grads(tape, grads);
    if g.iter().any(Option::is_some) {
        adam.update(store, &g, trainable);
    }
}

/// State handed to checkpoint callbacks.
#[derive(Debug, Clone, Copy)]
pub struct Snapshot<'a> {
    pub stage: Stage,
    /// Completed iterations of `stage`.
    pub iteration: usize,
    pub model: &'a LandmarkModel,
    pub vae: Option<&'a Vae>,
    pub optim: &'a Optimizers,
    pub training_set: Option<&'a TrainingSet>,
    /// Losses logged so far, when the trainer keeps them.
    pub losses: Option<&'a LossReport>,
}

impl<'a> Snapshot<'a> {
    pub fn new(
        stage: Stage,
        iteration: usize,
        model: &'a LandmarkModel,
        vae: Option<&'a Vae>,
        optim: &'a Optimizers,
        training_set: Option<&'a TrainingSet>,
    ) -> Self {
        Snapshot {
            stage,
            iteration,
            model,
            vae,
            optim,
            training_set,
            losses: None,
        }
    }

    pub fn with_losses(mut self, losses: &'a LossReport) -> Self {
        self.losses = Some(losses);
        self
    }
}

/// Samples, the training split and their precomputed features.
#[derive(Debug, Clone, Copy)]
pub struct TrainContext<'a> {
    pub samples: &'a [Sample],
    pub train: &'a [usize],
    pub source: &'a FeatureSource,
    pub bank: &'a FeatureBank,
}

/// Mean squared error between two heatmaps of equal size.
pub fn heatmap_mse(h: &Heatmap, g: &Heatmap) -> Result<f64> {
    if h.grid.dim() != g.grid.dim() {
        return Err(UldError::shape(
            "heatmap",
            format!("{:?}", g.grid.dim()),
            format!("{:?}", h.grid.dim()),
        ));
    }
    Ok(h.grid.iter().zip(g.grid.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / h.grid.len() as f64)
}

/// Tape form: `pred` is an `(H*W) x 1` variable.
pub fn heatmap_mse_var(tape: &mut Tape, pred: Var, target: &Heatmap) -> Var {
    let g = tape.constant(target.to_rows());
    let d = tape.sub(pred, g);
    let sq = tape.square(d);
    tape.mean(sq)
}

/// Descriptor margin loss for a labelled triple.
#[allow(clippy::too_many_arguments)]
pub fn descriptor_contrastive<L: PartialEq + std::fmt::Debug>(
    f: &[f64],
    f_pos: &[f64],
    f_neg: &[f64],
    c: &L,
    c_pos: &L,
    c_neg: &L,
    margin: f64,
) -> Result<f64> {
    check_triple_labels(c, c_pos, c_neg)?;
    margin_contrastive(f, f_pos, f_neg, margin)
}

fn label_groups<L: PartialEq>(labels: &[L]) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let n = labels.len();
    let mut same = Vec::with_capacity(n);
    let mut diff = Vec::with_capacity(n);
    for a in 0..n {
        same.push((0..n).filter(|&b| b != a && labels[b] == labels[a]).collect());
        diff.push((0..n).filter(|&b| labels[b] != labels[a]).collect());
    }
    (same, diff)
}

/// Up to `cap` distinct `(anchor, positive, negative)` triples drawn
/// uniformly from all valid ones.
pub fn sample_triples<L: PartialEq, R: Rng>(labels: &[L], cap: usize, rng: &mut R) -> Vec<(usize, usize, usize)> {
    let (same, diff) = label_groups(labels);
    let mut offsets = Vec::with_capacity(labels.len() + 1);
    let mut total = 0usize;
    for a in 0..labels.len() {
        offsets.push(total);
        total += same[a].len() * diff[a].len();
    }
    offsets.push(total);
    if total == 0 || cap == 0 {
        return Vec::new();
    }
    let mut picks = index::sample(rng, total, cap.min(total)).into_vec();
    picks.sort_unstable();
    picks
        .into_iter()
        .map(|t| {
            let a = offsets.partition_point(|&o| o <= t) - 1;
            let r = t - offsets[a];
            let nd = diff[a].len();
            (a, same[a][r / nd], diff[a][r % nd])
        })
        .collect()
}

/// For every anchor with at least one same-label and one other-label item,
/// one uniformly drawn positive and negative.
pub fn sample_anchor_triples<L: PartialEq, R: Rng>(labels: &[L], rng: &mut R) -> Vec<(usize, usize, usize)> {
    let (same, diff) = label_groups(labels);
    (0..labels.len())
        .filter_map(|a| {
            if same[a].is_empty() || diff[a].is_empty() {
                return None;
            }
            let p = same[a][rng.random_range(0..same[a].len())];
            let n = diff[a][rng.random_range(0..diff[a].len())];
            Some((a, p, n))
        })
        .collect()
}

/// Row gather of `rows` at `idx` on a tape.
pub(crate) fn gather_rows(tape: &mut Tape, rows: Var, idx: &[usize]) -> Var {
    let n = tape.value(rows).nrows();
    tape.mix(rows, std::sync::Arc::new(crate::tape::RowMix::gather(n, idx)))
}

pub(crate) fn batch_indices(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    index::sample(rng, n, batch.min(n)).into_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triples_are_valid_and_capped() {
        let labels = [0, 1, 0, 2, 1, 0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = sample_triples(&labels, 64, &mut rng);
        // 3 anchors of label 0: 2 pos * 3 neg; 2 of label 1: 1 * 4; label 2: none
        assert_eq!(t.len(), 3 * 6 + 2 * 4);
        for &(a, p, n) in &t {
            assert!(a != p && labels[a] == labels[p] && labels[a] != labels[n]);
        }
        let mut dedup = t.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), t.len());
        assert_eq!(sample_triples(&labels, 5, &mut rng).len(), 5);
    }

    #[test]
    fn anchors_without_partners_are_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = sample_anchor_triples(&[0, 0, 1], &mut rng);
        assert_eq!(t.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn iteration_streams_differ() {
        let a: u64 = iteration_rng(3, 0).random();
        let b: u64 = iteration_rng(3, 1).random();
        assert_ne!(a, b);
        assert_eq!(a, iteration_rng(3, 0).random::<u64>());
    }

    #[test]
    fn mse_values() {
        let g = Heatmap::new(ndarray::Array2::from_elem((2, 3), 0.4), crate::heads::HeatmapSource::PseudoGt);
        let mut h = g.clone();
        assert_eq!(heatmap_mse(&h, &g).unwrap(), 0.0);
        h.grid.mapv_inplace(|v| v + 0.1);
        assert!((heatmap_mse(&h, &g).unwrap() - 0.01).abs() < 1e-12);
        assert_eq!(heatmap_mse(&h, &g).unwrap(), heatmap_mse(&g, &h).unwrap());
    }
}
