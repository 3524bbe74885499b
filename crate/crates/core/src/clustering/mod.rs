//! Pseudo-labelling by clustering keypoint descriptors.
//!
//! Flat mode clusters all descriptors into `K` groups. Two-stage mode first
//! clusters per-image latent pose codes into `Q` groups and then clusters
//! descriptors separately inside each pose group, giving composite labels
//! `(pose, cluster)` from a label space of size `Q * K`. In both modes each
//! image keeps at most one keypoint per label (exemplar assignment).

mod io;
mod kmeans;
mod quality;

use serde::{Deserialize, Serialize};

pub use io::{load_cluster_model, save_cluster_model, CLUSTER_MAGIC};
pub use kmeans::{kmeans, kmeans_fit, KMeansConfig, KMeansFit};
pub use quality::cluster_quality;

use crate::error::{Result, UldError};
use crate::heads::{nms_extract, Heatmap, Keypoint};
use crate::model::{sample_rows, FeatureBank, LandmarkModel, NmsConfig};
use crate::tape::Mat;
use kmeans::sq_dist;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterStage {
    FlatKeypoint,
    PoseStage1,
    KeypointStage2,
}

/// Centroids of one clustering run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub centroids: Mat,
    pub stage: ClusterStage,
    pub parent_pose_label: Option<usize>,
}

impl ClusterModel {
    pub fn new(centroids: Mat, stage: ClusterStage, parent_pose_label: Option<usize>) -> Result<Self> {
        if centroids.nrows() == 0 || centroids.ncols() == 0 {
            return Err(UldError::InvalidArgument("cluster model needs at least one centroid".into()));
        }
        if !centroids.iter().all(|v| v.is_finite()) {
            return Err(UldError::InvalidArgument("cluster centroids must be finite".into()));
        }
        if (stage == ClusterStage::KeypointStage2) != parent_pose_label.is_some() {
            return Err(UldError::InvalidArgument(
                "exactly the stage-2 models carry a parent pose label".into(),
            ));
        }
        Ok(ClusterModel {
            centroids,
            stage,
            parent_pose_label,
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    fn with_stage(mut self, stage: ClusterStage, parent: Option<usize>) -> Result<Self> {
        self.stage = stage;
        self.parent_pose_label = parent;
        ClusterModel::new(self.centroids, self.stage, self.parent_pose_label)
    }

    fn centroid(&self, c: usize) -> &[f64] {
        self.centroids.row(c).to_slice().expect("row-major centroids")
    }
}

/// A flat label, or a `(pose, cluster)` pair in two-stage mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub pose: Option<usize>,
    pub cluster: usize,
}

impl PseudoLabel {
    pub fn flat(cluster: usize) -> Self {
        PseudoLabel { pose: None, cluster }
    }

    pub fn composite(pose: usize, cluster: usize) -> Self {
        PseudoLabel {
            pose: Some(pose),
            cluster,
        }
    }

    /// Position in the label space `[Q] x [K]` (or `[K]` when flat).
    pub fn index(&self, k: usize) -> usize {
        self.pose.unwrap_or(0) * k + self.cluster
    }
}

/// How pseudo-labels are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClusterMode {
    Flat { k: usize },
    TwoStage { q: usize, k: usize },
}

impl ClusterMode {
    pub fn k(&self) -> usize {
        match *self {
            ClusterMode::Flat { k } | ClusterMode::TwoStage { k, .. } => k,
        }
    }

    /// Size of the label space.
    pub fn label_space(&self) -> usize {
        match *self {
            ClusterMode::Flat { k } => k,
            ClusterMode::TwoStage { q, k } => q * k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ClusterMode::Flat { k } => k >= 1,
            ClusterMode::TwoStage { q, k } => q >= 1 && k >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(UldError::Config(format!("cluster counts must be at least 1: {self:?}")))
        }
    }
}

/// Keypoints, descriptors and pseudo-labels of one training image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    /// Index of the sample in the dataset.
    pub sample: usize,
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Vec<f64>>,
    /// Empty until the image has been through exemplar assignment,
    /// afterwards aligned with `keypoints`.
    pub labels: Vec<PseudoLabel>,
    pub latent: Option<Vec<f64>>,
    pub pose_label: Option<usize>,
}

impl ImageRecord {
    pub fn unlabelled(sample: usize, keypoints: Vec<Keypoint>, descriptors: Vec<Vec<f64>>) -> Self {
        ImageRecord {
            sample,
            keypoints,
            descriptors,
            labels: Vec::new(),
            latent: None,
            pose_label: None,
        }
    }

    pub fn is_labelled(&self) -> bool {
        !self.labels.is_empty() || self.keypoints.is_empty()
    }

    /// Keypoints paired with their labels.
    pub fn labelled_keypoints(&self) -> impl Iterator<Item = (&Keypoint, &PseudoLabel)> {
        self.keypoints.iter().zip(&self.labels)
    }
}

/// Stage-2 `k` reduced because a pose cluster held too few descriptors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shrinkage {
    pub pose: usize,
    pub requested: usize,
    pub used: usize,
}

/// Every centroid set behind the current labels.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClusterState {
    pub flat: Option<ClusterModel>,
    pub pose: Option<ClusterModel>,
    /// One entry per pose cluster; `None` when the cluster had no
    /// descriptors at all.
    pub keypoint: Vec<Option<ClusterModel>>,
    pub shrinkage: Vec<Shrinkage>,
}

/// Pseudo-labelled training images at one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub images: Vec<ImageRecord>,
    pub epoch: u64,
    pub mode: Option<ClusterMode>,
    pub clusters: ClusterState,
    /// Samples with no detected keypoints at the last update.
    pub empty_images: Vec<usize>,
}

impl TrainingSet {
    pub fn new(images: Vec<ImageRecord>) -> Self {
        TrainingSet {
            images,
            epoch: 0,
            mode: None,
            clusters: ClusterState::default(),
            empty_images: Vec::new(),
        }
    }

    pub fn label_space(&self) -> Option<usize> {
        self.mode.map(|m| m.label_space())
    }

    /// Distinct labels used anywhere in the set.
    pub fn distinct_labels(&self) -> std::collections::BTreeSet<PseudoLabel> {
        self.images.iter().flat_map(|r| r.labels.iter().copied()).collect()
    }

    /// Checks the per-image alignment and exemplar invariants.
    pub fn validate(&self) -> Result<()> {
        for r in &self.images {
            if r.keypoints.len() != r.descriptors.len() {
                return Err(UldError::shape("record descriptors", r.keypoints.len(), r.descriptors.len()));
            }
            if !r.labels.is_empty() {
                if r.labels.len() != r.keypoints.len() {
                    return Err(UldError::shape("record labels", r.keypoints.len(), r.labels.len()));
                }
                let mut seen = std::collections::BTreeSet::new();
                if !r.labels.iter().all(|l| seen.insert(*l)) {
                    return Err(UldError::InvalidArgument(format!(
                        "image {} holds a label twice",
                        r.sample
                    )));
                }
            }
        }
        Ok(())
    }
}

fn check_dim(points: &[Vec<f64>], model: &ClusterModel) -> Result<()> {
    if let Some(p) = points.iter().find(|p| p.len() != model.dim()) {
        return Err(UldError::shape("descriptor dimension", model.dim(), p.len()));
    }
    Ok(())
}

/// Nearest centroid and Euclidean distance for each point. Ties go to the
/// lowest centroid index.
pub fn assign(points: &[Vec<f64>], model: &ClusterModel) -> Result<(Vec<usize>, Vec<f64>)> {
    check_dim(points, model)?;
    let mut labels = Vec::with_capacity(points.len());
    let mut dists = Vec::with_capacity(points.len());
    for p in points {
        let mut best = (0, f64::INFINITY);
        for c in 0..model.k() {
            let d = sq_dist(p, model.centroid(c));
            if d < best.1 {
                best = (c, d);
            }
        }
        labels.push(best.0);
        dists.push(best.1.sqrt());
    }
    Ok((labels, dists))
}

/// A keypoint with its descriptor and cluster label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelledKeypoint {
    pub keypoint: Keypoint,
    pub descriptor: Vec<f64>,
    pub label: usize,
}

/// Keeps, for every label present, the keypoint whose descriptor is
/// closest to that label's centroid. Output is ordered by label; ties keep
/// the earlier input.
pub fn exemplar_assign(items: &[LabelledKeypoint], model: &ClusterModel) -> Result<Vec<LabelledKeypoint>> {
    let mut best: Vec<Option<(usize, f64)>> = vec![None; model.k()];
    for (i, it) in items.iter().enumerate() {
        if it.label >= model.k() {
            return Err(UldError::InvalidArgument(format!(
                "label {} outside a model with {} clusters",
                it.label,
                model.k()
            )));
        }
        if it.descriptor.len() != model.dim() {
            return Err(UldError::shape("descriptor dimension", model.dim(), it.descriptor.len()));
        }
        let d = sq_dist(&it.descriptor, model.centroid(it.label));
        if best[it.label].is_none_or(|(_, b)| d < b) {
            best[it.label] = Some((i, d));
        }
    }
    Ok(best.into_iter().flatten().map(|(i, _)| items[i].clone()).collect())
}

/// Output of [`two_stage_cluster`].
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStageClustering {
    pub pose_model: ClusterModel,
    pub keypoint_models: Vec<Option<ClusterModel>>,
    pub pose_labels: Vec<usize>,
    /// Per image, per descriptor.
    pub labels: Vec<Vec<PseudoLabel>>,
    pub shrinkage: Vec<Shrinkage>,
}

/// Pose clustering of latent codes into `q` groups followed by descriptor
/// clustering into `k` groups inside each pose group. The stage-2 run of
/// pose group `u` is seeded with `seed + u`.
pub fn two_stage_cluster(
    latents: &[Vec<f64>],
    descriptors: &[Vec<Vec<f64>>],
    q: usize,
    k: usize,
    seed: u64,
    config: &KMeansConfig,
) -> Result<TwoStageClustering> {
    ClusterMode::TwoStage { q, k }.validate()?;
    if latents.len() != descriptors.len() {
        return Err(UldError::shape("latent codes per image", descriptors.len(), latents.len()));
    }
    let stage1 = kmeans_fit(latents, q, seed, config)?;
    let pose_model = stage1.model.with_stage(ClusterStage::PoseStage1, None)?;
    let pose_labels = stage1.labels;

    let mut keypoint_models = Vec::with_capacity(q);
    let mut shrinkage = Vec::new();
    let mut labels: Vec<Vec<PseudoLabel>> = descriptors.iter().map(|d| Vec::with_capacity(d.len())).collect();
    for u in 0..q {
        let members: Vec<usize> = (0..latents.len()).filter(|&j| pose_labels[j] == u).collect();
        let pool: Vec<Vec<f64>> = members.iter().flat_map(|&j| descriptors[j].iter().cloned()).collect();
        if pool.is_empty() {
            keypoint_models.push(None);
            if k > 0 {
                shrinkage.push(Shrinkage {
                    pose: u,
                    requested: k,
                    used: 0,
                });
            }
            continue;
        }
        let used = k.min(pool.len());
        if used < k {
            log::warn!("pose cluster {u} holds {} descriptors; using k = {used}", pool.len());
            shrinkage.push(Shrinkage {
                pose: u,
                requested: k,
                used,
            });
        }
        let fit = kmeans_fit(&pool, used, seed.wrapping_add(u as u64), config)?;
        let mut next = 0;
        for &j in &members {
            for _ in 0..descriptors[j].len() {
                labels[j].push(PseudoLabel::composite(u, fit.labels[next]));
                next += 1;
            }
        }
        keypoint_models.push(Some(fit.model.with_stage(ClusterStage::KeypointStage2, Some(u))?));
    }
    Ok(TwoStageClustering {
        pose_model,
        keypoint_models,
        pose_labels,
        labels,
        shrinkage,
    })
}

/// Maps a detector heatmap to a latent pose code.
pub trait LatentEncoder {
    fn latent(&self, heatmap: &Heatmap) -> Result<Vec<f64>>;
}

/// Settings for [`update_training_set`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateConfig {
    pub mode: ClusterMode,
    pub nms: NmsConfig,
    pub seed: u64,
    pub kmeans: KMeansConfig,
}

/// Rebuilds the pseudo-labelled training set from the current model.
///
/// Keypoints and unit descriptors are extracted for every image in
/// `train`. With an encoder the latent codes are computed from the same
/// heatmaps before clustering, since two-stage clustering needs them. The
/// result carries `previous_epoch + 1`.
pub fn update_training_set(
    model: &LandmarkModel,
    bank: &FeatureBank,
    train: &[usize],
    encoder: Option<&dyn LatentEncoder>,
    config: &UpdateConfig,
    previous_epoch: u64,
) -> Result<TrainingSet> {
    config.mode.validate()?;
    let mut records = Vec::with_capacity(train.len());
    let mut empty_images = Vec::new();
    for &j in train {
        let stack = bank
            .stacks
            .get(j)
            .ok_or_else(|| UldError::InvalidArgument(format!("sample {j} missing from the feature bank")))?;
        let (heat, vol) = model.infer(stack)?;
        let kps = nms_extract(&heat, config.nms.window, config.nms.threshold, config.nms.max_n);
        let descs = sample_rows(&vol, &kps)?;
        if kps.is_empty() {
            log::warn!("no keypoints detected in sample {j}");
            empty_images.push(j);
        }
        let mut r = ImageRecord::unlabelled(j, kps, descs);
        if let Some(enc) = encoder {
            r.latent = Some(enc.latent(&heat)?);
        }
        records.push(r);
    }
    let mut clusters = ClusterState::default();
    let kcfg = config.kmeans;
    match config.mode {
        ClusterMode::Flat { k } => {
            let pool: Vec<Vec<f64>> = records.iter().flat_map(|r| r.descriptors.iter().cloned()).collect();
            let fit = kmeans_fit(&pool, k, config.seed, &kcfg)?;
            let mut next = 0;
            for r in &mut records {
                let n = r.keypoints.len();
                let items: Vec<LabelledKeypoint> = (0..n)
                    .map(|i| LabelledKeypoint {
                        keypoint: r.keypoints[i],
                        descriptor: r.descriptors[i].clone(),
                        label: fit.labels[next + i],
                    })
                    .collect();
                next += n;
                apply_exemplars(r, exemplar_assign(&items, &fit.model)?, None);
            }
            clusters.flat = Some(fit.model);
        }
        ClusterMode::TwoStage { q, k } => {
            let latents: Vec<Vec<f64>> = records
                .iter()
                .map(|r| {
                    r.latent
                        .clone()
                        .ok_or_else(|| UldError::InvalidArgument("two-stage clustering needs an encoder".into()))
                })
                .collect::<Result<_>>()?;
            let descs: Vec<Vec<Vec<f64>>> = records.iter().map(|r| r.descriptors.clone()).collect();
            let ts = two_stage_cluster(&latents, &descs, q, k, config.seed, &kcfg)?;
            for (j, r) in records.iter_mut().enumerate() {
                let u = ts.pose_labels[j];
                r.pose_label = Some(u);
                let Some(m) = &ts.keypoint_models[u] else {
                    apply_exemplars(r, Vec::new(), Some(u));
                    continue;
                };
                let items: Vec<LabelledKeypoint> = (0..r.keypoints.len())
                    .map(|i| LabelledKeypoint {
                        keypoint: r.keypoints[i],
                        descriptor: r.descriptors[i].clone(),
                        label: ts.labels[j][i].cluster,
                    })
                    .collect();
                apply_exemplars(r, exemplar_assign(&items, m)?, Some(u));
            }
            clusters.pose = Some(ts.pose_model);
            clusters.keypoint = ts.keypoint_models;
            clusters.shrinkage = ts.shrinkage;
        }
    }
    let set = TrainingSet {
        images: records,
        epoch: previous_epoch + 1,
        mode: Some(config.mode),
        clusters,
        empty_images,
    };
    set.validate()?;
    Ok(set)
}

fn apply_exemplars(r: &mut ImageRecord, kept: Vec<LabelledKeypoint>, pose: Option<usize>) {
    r.keypoints = kept.iter().map(|e| e.keypoint).collect();
    r.labels = kept
        .iter()
        .map(|e| PseudoLabel {
            pose,
            cluster: e.label,
        })
        .collect();
    r.descriptors = kept.into_iter().map(|e| e.descriptor).collect();
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(rows: &[[f64; 2]]) -> ClusterModel {
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        ClusterModel::new(
            Mat::from_shape_vec((rows.len(), 2), data).unwrap(),
            ClusterStage::FlatKeypoint,
            None,
        )
        .unwrap()
    }

    #[test]
    fn point_on_centroid_gets_its_label() {
        let m = model(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let (l, d) = assign(&[vec![0.0, 1.0]], &m).unwrap();
        assert_eq!((l[0], d[0]), (2, 0.0));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let m = model(&[[9.0, 9.0], [1.0, 0.0], [5.0, 5.0], [-1.0, 0.0]]);
        let (l, _) = assign(&[vec![0.0, 0.0]], &m).unwrap();
        assert_eq!(l[0], 1);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let m = model(&[[0.0, 0.0]]);
        assert!(assign(&[vec![0.0, 0.0, 1.0]], &m).is_err());
    }

    #[test]
    fn stage_two_requires_a_parent() {
        let c = Mat::zeros((1, 2));
        assert!(ClusterModel::new(c.clone(), ClusterStage::KeypointStage2, None).is_err());
        assert!(ClusterModel::new(c, ClusterStage::KeypointStage2, Some(0)).is_ok());
    }

    #[test]
    fn exemplar_keeps_the_closest() {
        let m = model(&[[0.0, 0.0], [5.0, 5.0]]);
        let items = vec![
            LabelledKeypoint {
                keypoint: Keypoint::new(1.0, 1.0),
                descriptor: vec![0.5, 0.0],
                label: 0,
            },
            LabelledKeypoint {
                keypoint: Keypoint::new(2.0, 2.0),
                descriptor: vec![0.1, 0.0],
                label: 0,
            },
        ];
        let out = exemplar_assign(&items, &m).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].keypoint, Keypoint::new(2.0, 2.0));
    }

    #[test]
    fn label_space_sizes() {
        assert_eq!(ClusterMode::TwoStage { q: 2, k: 3 }.label_space(), 6);
        assert_eq!(ClusterMode::Flat { k: 10 }.label_space(), 10);
        assert_eq!(PseudoLabel::composite(1, 2).index(3), 5);
    }

    #[test]
    fn tiny_pose_cluster_shrinks() {
        let latents = vec![vec![0.0], vec![0.1], vec![10.0]];
        let descs = vec![
            vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.7, 0.7]],
            vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            vec![vec![1.0, 0.0]],
        ];
        let ts = two_stage_cluster(&latents, &descs, 2, 3, 0, &KMeansConfig::default()).unwrap();
        assert_eq!(ts.pose_labels[0], ts.pose_labels[1]);
        assert_ne!(ts.pose_labels[0], ts.pose_labels[2]);
        let lone = ts.pose_labels[2];
        assert_eq!(
            ts.shrinkage,
            vec![Shrinkage {
                pose: lone,
                requested: 3,
                used: 1
            }]
        );
        assert_eq!(ts.keypoint_models[lone].as_ref().unwrap().k(), 1);
    }
}
