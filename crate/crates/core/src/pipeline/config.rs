use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::bootstrap::BootstrapConfig;
use crate::checkpoint::config_hash;
use crate::clustering::KMeansConfig;
use crate::data::SyntheticConfig;
use crate::error::{Result, UldError};
use crate::eval::EvalOptions;
use crate::model::{FeatureSourceConfig, ModelConfig};
use crate::pose_proxy::VaeConfig;
use crate::selftrain::{DuldConfig, DuldppConfig, ProxyConfig, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Small schedules that finish in minutes on a CPU.
    Desk,
    /// The published training constants.
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic(SyntheticConfig),
    /// A dataset root holding an annotation file in `format`.
    Manifest { root: PathBuf, format: String },
}

/// Region from which zero-shot descriptors are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoiKind {
    FullImage,
    GroundTruthBox,
    SceneSupport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotConfig {
    pub k: usize,
    pub pixels_per_image: usize,
    pub roi: RoiKind,
    pub kmeans: KMeansConfig,
    pub seed: u64,
}

impl Default for ZeroShotConfig {
    fn default() -> Self {
        ZeroShotConfig {
            k: 10,
            pixels_per_image: 100,
            roi: RoiKind::SceneSupport,
            kmeans: KMeansConfig::default(),
            seed: 0,
        }
    }
}

/// Everything a run depends on. `k`, `q` and `seed` are authoritative:
/// [`PipelineConfig::resolved`] copies them into the stage sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub profile: Profile,
    /// Directory holding run directories; `ULD_RUN_ROOT` overrides it.
    pub run_root: PathBuf,
    pub run_id: String,
    pub seed: u64,
    pub k: usize,
    pub q: usize,
    pub dataset: DatasetConfig,
    pub features: FeatureSourceConfig,
    pub model: ModelConfig,
    pub zeroshot: ZeroShotConfig,
    pub bootstrap: BootstrapConfig,
    pub duld: DuldConfig,
    pub proxy: ProxyConfig,
    pub vae: VaeConfig,
    pub duldpp: DuldppConfig,
    pub eval: EvalOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig::desk()
    }
}

/// Seed offsets keep the stages' random streams apart.
const SEED_ZEROSHOT: u64 = 0;
const SEED_MODEL: u64 = 1;
const SEED_BOOTSTRAP: u64 = 2;
const SEED_DULD: u64 = 3;
const SEED_VAE: u64 = 4;
const SEED_PROXY: u64 = 5;
const SEED_DULDPP: u64 = 6;
const SEED_EVAL: u64 = 7;

impl PipelineConfig {
    pub fn desk() -> Self {
        let synthetic = SyntheticConfig::default();
        PipelineConfig {
            profile: Profile::Desk,
            run_root: PathBuf::from("runs"),
            run_id: "run".into(),
            seed: 0,
            k: 10,
            q: 2,
            features: FeatureSourceConfig::Scene {
                dim: 16,
                identities: synthetic.k_true,
                noise_sigma: 0.05,
                seed: 11,
            },
            dataset: DatasetConfig::Synthetic(synthetic),
            model: ModelConfig::default(),
            zeroshot: ZeroShotConfig::default(),
            bootstrap: BootstrapConfig::default(),
            duld: DuldConfig::default(),
            proxy: ProxyConfig::default(),
            vae: VaeConfig::default(),
            duldpp: DuldppConfig::default(),
            eval: EvalOptions {
                pose_range_edges: vec![-90.0, -30.0, 30.0, 90.0],
                ..EvalOptions::default()
            },
        }
    }

    pub fn paper() -> Self {
        let mut c = PipelineConfig::desk();
        c.profile = Profile::Paper;
        c.q = 10;
        c.bootstrap.iterations = 50_000;
        c.bootstrap.learning_rate = 1e-4;
        c.bootstrap.batch_size = 12;
        c.bootstrap.checkpoint_every = 5000;
        let s = &mut c.duld.schedule;
        s.total_iterations = 100_000;
        s.recluster_every = Some(5000);
        s.learning_rate = 1e-4;
        s.adam_betas = (0.9, 0.999);
        s.batch_size = 12;
        s.margin = 0.8;
        let s = &mut c.proxy.schedule;
        s.total_iterations = 50_000;
        s.learning_rate = 5e-5;
        s.adam_betas = (0.9, 0.999);
        s.batch_size = 12;
        c.proxy.checkpoint_every = 5000;
        let s = &mut c.duldpp.schedule;
        s.total_iterations = 100_000;
        s.recluster_every = Some(5000);
        s.learning_rate = 5e-4;
        s.adam_betas = (0.9, 0.999);
        s.batch_size = 12;
        s.margin = 0.8;
        c.model.aggregate_channels = 128;
        c.bootstrap.nms.max_n = 3 * c.k;
        c.duld.sigma = 2.5;
        c.duld.nms.max_n = 3 * c.k;
        c.proxy.sigma = 2.5;
        c.duldpp.sigma = 2.5;
        c.duldpp.nms.max_n = 3 * c.k;
        c.eval.regressor_subset = Some(300);
        c.eval.normalizer = crate::eval::Normalizer::InterOcular;
        c.eval.pose_range_edges = crate::eval::YAW_EDGES.to_vec();
        c
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => PipelineConfig::desk(),
            Profile::Paper => PipelineConfig::paper(),
        }
    }

    /// Parses TOML. Keys absent from the text keep the values of the
    /// profile named by `profile` (desk when absent).
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| UldError::Config(e.to_string()))?;
        let profile = match user.get("profile") {
            None => Profile::Desk,
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|e: toml::de::Error| UldError::Config(format!("profile: {e}")))?,
        };
        let base = toml::Table::try_from(PipelineConfig::for_profile(profile))
            .map_err(|e| UldError::Config(e.to_string()))?;
        let merged = merge(base, user);
        merged.try_into().map_err(|e: toml::de::Error| UldError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| UldError::Config(e.to_string()))
    }

    /// Copy with `k`, `q` and derived seeds written into every section.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.zeroshot.k = c.k;
        c.duld.k = c.k;
        c.duldpp.k = c.k;
        c.duldpp.q = c.q;
        c.zeroshot.seed = c.seed.wrapping_add(SEED_ZEROSHOT);
        c.model.seed = c.seed.wrapping_add(SEED_MODEL);
        c.bootstrap.seed = c.seed.wrapping_add(SEED_BOOTSTRAP);
        c.duld.seed = c.seed.wrapping_add(SEED_DULD);
        c.vae.seed = c.seed.wrapping_add(SEED_VAE);
        c.proxy.seed = c.seed.wrapping_add(SEED_PROXY);
        c.duldpp.seed = c.seed.wrapping_add(SEED_DULDPP);
        c.eval.seed = c.seed.wrapping_add(SEED_EVAL);
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(UldError::Config("k must be at least 1".into()));
        }
        if self.q == 0 {
            return Err(UldError::Config("q must be at least 1".into()));
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(UldError::Config(format!("run id '{}' is not a plain name", self.run_id)));
        }
        match &self.dataset {
            DatasetConfig::Manifest { root, .. } if !root.is_dir() => {
                return Err(UldError::Config(format!("dataset root {} does not exist", root.display())));
            }
            _ => {}
        }
        if let FeatureSourceConfig::Cached { dir, .. } = &self.features {
            if !dir.is_dir() {
                return Err(UldError::Config(format!("feature cache {} does not exist", dir.display())));
            }
        }
        if self.zeroshot.pixels_per_image == 0 {
            return Err(UldError::Config("zeroshot.pixels_per_image must be positive".into()));
        }
        self.duld.schedule.validate()?;
        self.proxy.schedule.validate()?;
        self.duldpp.schedule.validate()?;
        Ok(())
    }

    /// Hash of everything that shapes `stage` and the stages before it.
    /// Evaluation settings and the run name are excluded.
    pub fn stage_hash(&self, stage: Stage) -> Result<String> {
        #[derive(Serialize)]
        struct Scope<'a> {
            seed: u64,
            k: Option<usize>,
            q: Option<usize>,
            dataset: &'a DatasetConfig,
            features: &'a FeatureSourceConfig,
            model: &'a ModelConfig,
            bootstrap: &'a BootstrapConfig,
            duld: Option<&'a DuldConfig>,
            proxy: Option<(&'a ProxyConfig, &'a VaeConfig)>,
            duldpp: Option<&'a DuldppConfig>,
        }
        config_hash(&Scope {
            seed: self.seed,
            k: (stage >= Stage::Duld).then_some(self.k),
            q: (stage >= Stage::Duldpp).then_some(self.q),
            dataset: &self.dataset,
            features: &self.features,
            model: &self.model,
            bootstrap: &self.bootstrap,
            duld: (stage >= Stage::Duld).then_some(&self.duld),
            proxy: (stage >= Stage::Proxy).then_some((&self.proxy, &self.vae)),
            duldpp: (stage >= Stage::Duldpp).then_some(&self.duldpp),
        })
    }
}

fn merge(mut base: toml::Table, user: toml::Table) -> toml::Table {
    for (key, value) in user {
        match (base.remove(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => {
                // a differently tagged enum replaces the section wholesale
                if b.get("kind").is_some() && u.get("kind").is_some_and(|k| Some(k) != b.get("kind")) {
                    base.insert(key, toml::Value::Table(u));
                } else {
                    base.insert(key, toml::Value::Table(merge(b, u)));
                }
            }
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
    base
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_profile_constants() {
        let p = PipelineConfig::paper();
        assert_eq!(p.bootstrap.learning_rate, 1e-4);
        assert_eq!(p.proxy.schedule.learning_rate, 5e-5);
        assert_eq!(p.duldpp.schedule.learning_rate, 5e-4);
        assert_eq!(p.duld.schedule.recluster_every, Some(5000));
        assert_eq!(p.duld.schedule.margin, 0.8);
        assert_eq!(
            [p.bootstrap.iterations, p.duld.schedule.total_iterations, p.proxy.schedule.total_iterations, p.duldpp.schedule.total_iterations],
            [50_000, 100_000, 50_000, 100_000]
        );
        assert_eq!((p.duld.sigma, p.duld.nms.max_n), (2.5, 30));
    }

    #[test]
    fn toml_overrides_keep_profile_defaults() {
        let c = PipelineConfig::from_toml("profile = \"paper\"\nk = 6\n[duld.schedule]\nbatch_size = 3\n").unwrap();
        assert_eq!(c.k, 6);
        assert_eq!(c.duld.schedule.batch_size, 3);
        assert_eq!(c.duld.schedule.total_iterations, 100_000);
        let d = PipelineConfig::desk();
        assert_eq!(PipelineConfig::from_toml(&d.to_toml().unwrap()).unwrap(), d);
    }

    #[test]
    fn stage_hash_tracks_k() {
        let a = PipelineConfig::desk().resolved();
        let mut b = a.clone();
        b.k = 7;
        let b = b.resolved();
        assert_ne!(a.stage_hash(Stage::Duld).unwrap(), b.stage_hash(Stage::Duld).unwrap());
        let mut c = a.clone();
        c.duldpp.latent_weight = 2.0;
        assert_eq!(a.stage_hash(Stage::Duld).unwrap(), c.stage_hash(Stage::Duld).unwrap());
    }
}
