//! `uld`: command-line driver for the landmark discovery pipeline.
//!
//! Every flag has a config-file counterpart; flags win over the file and
//! the file wins over the profile defaults. Only the run root can also come
//! from the environment (`ULD_RUN_ROOT`).

mod plot;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use uld_core::data::{ingest_dataset, write_synthetic_dataset, SyntheticConfig};
use uld_core::eval::{EvalReport, Normalizer};
use uld_core::pipeline::{DatasetConfig, Pipeline, PipelineConfig, Profile, RoiKind, RUN_ROOT_ENV};
use uld_core::selftrain::{Schedule, Stage};

#[derive(Parser, Debug)]
#[command(name = "uld", version, about = "Unsupervised landmark discovery on dense feature backbones")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Profile supplying defaults for keys the config leaves out (`profile`).
    #[arg(long, global = true, value_enum)]
    profile: Option<ProfileArg>,
    /// Directory holding run directories (`run_root`).
    #[arg(long, global = true, env = RUN_ROOT_ENV)]
    run_root: Option<PathBuf>,
    /// Run name (`run_id`).
    #[arg(long, global = true)]
    run_id: Option<String>,
    /// Top-level seed (`seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of landmarks (`k`).
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Number of pose clusters (`q`).
    #[arg(long, global = true)]
    q: Option<usize>,
    /// Dataset root with an annotation file (`dataset.root`).
    #[arg(long, global = true)]
    dataset_root: Option<PathBuf>,
    /// Annotation format (`dataset.format`).
    #[arg(long, global = true, requires = "dataset_root")]
    dataset_format: Option<String>,
    /// Evaluation normaliser (`eval.normalizer`).
    #[arg(long, global = true, value_enum)]
    normalizer: Option<NormalizerArg>,
    /// Load checkpoints written under a different configuration.
    #[arg(long, global = true)]
    force: bool,
    /// More log output; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset (PNG images plus annotations) into OUT.
    SynthData {
        out: PathBuf,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Validate a dataset root and summarise its annotations.
    Ingest {
        root: PathBuf,
        #[arg(long, default_value = "generic_json_lines")]
        format: String,
    },
    /// Zero-shot baseline: cluster plain backbone descriptors.
    Zeroshot {
        /// Descriptors sampled per training image (`zeroshot.pixels_per_image`).
        #[arg(long)]
        pixels_per_image: Option<usize>,
        /// Sampling region (`zeroshot.roi`).
        #[arg(long, value_enum)]
        roi: Option<RoiArg>,
    },
    /// Keypoint bootstrapping on correspondence losses.
    Bootstrap {
        /// Iterations (`bootstrap.iterations`).
        #[arg(long)]
        iterations: Option<usize>,
        /// Learning rate (`bootstrap.learning_rate`).
        #[arg(long)]
        lr: Option<f64>,
        /// Images per batch (`bootstrap.batch_size`).
        #[arg(long)]
        batch_size: Option<usize>,
        /// Iterations between checkpoints (`bootstrap.checkpoint_every`).
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Self-training on flat pseudo-labels.
    TrainDuld(ScheduleArgs),
    /// VAE proxy task on detector heatmaps.
    TrainProxy {
        #[command(flatten)]
        schedule: ScheduleArgs,
        /// Iterations between checkpoints (`proxy.checkpoint_every`).
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Self-training on pose-aware two-stage pseudo-labels.
    TrainDuldpp(ScheduleArgs),
    /// Score a finished stage and print its report; writes nothing.
    Eval {
        #[arg(value_enum)]
        stage: EvalStage,
    },
    /// Render a CSV (first column x, other columns series) as SVG.
    Plot {
        input: PathBuf,
        output: PathBuf,
        #[arg(long)]
        title: Option<String>,
    },
}

#[derive(Args, Debug, Default)]
struct SynthArgs {
    /// Images to render (`dataset.n_images`).
    #[arg(long)]
    n_images: Option<usize>,
    /// Trailing images tagged as test (`dataset.n_test`).
    #[arg(long)]
    n_test: Option<usize>,
    /// Landmark identities per scene (`dataset.k_true`).
    #[arg(long)]
    k_true: Option<usize>,
    /// Square canvas side (`dataset.width`, `dataset.height`).
    #[arg(long)]
    size: Option<usize>,
    /// Generator seed (`dataset.seed`).
    #[arg(long)]
    data_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ScheduleArgs {
    /// Iterations (`<stage>.schedule.total_iterations`).
    #[arg(long)]
    iterations: Option<usize>,
    /// Learning rate (`<stage>.schedule.learning_rate`).
    #[arg(long)]
    lr: Option<f64>,
    /// Images per batch (`<stage>.schedule.batch_size`).
    #[arg(long)]
    batch_size: Option<usize>,
    /// Iterations between re-clustering (`<stage>.schedule.recluster_every`).
    #[arg(long)]
    recluster_every: Option<usize>,
    /// Contrastive margin (`<stage>.schedule.margin`).
    #[arg(long)]
    margin: Option<f64>,
}

impl ScheduleArgs {
    fn apply(&self, s: &mut Schedule) {
        set(&mut s.total_iterations, self.iterations);
        set(&mut s.learning_rate, self.lr);
        set(&mut s.batch_size, self.batch_size);
        set(&mut s.margin, self.margin);
        if self.recluster_every.is_some() {
            s.recluster_every = self.recluster_every;
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NormalizerArg {
    InterOcular,
    BoxDiagonal,
    CanvasDiagonal,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RoiArg {
    FullImage,
    GroundTruthBox,
    SceneSupport,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EvalStage {
    Zeroshot,
    Bootstrap,
    Duld,
    Proxy,
    Duldpp,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn load_config(g: &Global) -> Result<PipelineConfig> {
    let mut config = match &g.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut table: toml::Table =
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            if let Some(p) = g.profile {
                table.insert("profile".into(), toml::Value::String(profile_name(p).into()));
            }
            PipelineConfig::from_toml(&toml::to_string(&table)?)?
        }
        None => PipelineConfig::for_profile(match g.profile {
            Some(ProfileArg::Paper) => Profile::Paper,
            _ => Profile::Desk,
        }),
    };
    set(&mut config.run_root, g.run_root.clone());
    set(&mut config.run_id, g.run_id.clone());
    set(&mut config.seed, g.seed);
    set(&mut config.k, g.k);
    set(&mut config.q, g.q);
    if let Some(root) = &g.dataset_root {
        config.dataset = DatasetConfig::Manifest {
            root: root.clone(),
            format: g.dataset_format.clone().unwrap_or_else(|| "generic_json_lines".into()),
        };
    }
    if let Some(n) = g.normalizer {
        config.eval.normalizer = match n {
            NormalizerArg::InterOcular => Normalizer::InterOcular,
            NormalizerArg::BoxDiagonal => Normalizer::BoxDiagonal,
            NormalizerArg::CanvasDiagonal => Normalizer::CanvasDiagonal,
        };
    }
    Ok(config)
}

fn profile_name(p: ProfileArg) -> &'static str {
    match p {
        ProfileArg::Desk => "desk",
        ProfileArg::Paper => "paper",
    }
}

fn open_pipeline(config: &PipelineConfig, force: bool) -> Result<Pipeline> {
    let mut p = Pipeline::new(config, &config.run_root)?;
    p.force = force;
    info!("run directory {}", p.run.path.display());
    Ok(p)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn print_report(r: &EvalReport) {
    print!("{}", r.to_json());
}

fn train(config: &PipelineConfig, force: bool, stage: Stage) -> Result<()> {
    let p = open_pipeline(config, force)?;
    let out = p.run_stage(stage)?;
    if let Some(it) = out.resumed_from {
        info!("{} resumed from iteration {it}", stage.as_str());
    }
    info!(
        "{} done: forward NME {:.3}, backward NME {:.3}",
        stage.as_str(),
        out.report.forward_nme,
        out.report.backward_nme
    );
    print_report(&out.report);
    Ok(())
}

#[derive(Serialize)]
struct IngestSummary<'a> {
    format: &'a str,
    entries: usize,
    landmark_count: Option<usize>,
    train: usize,
    test: usize,
    missing_images: Vec<String>,
    warnings: &'a [String],
}

#[derive(Serialize)]
struct SynthSummary {
    root: PathBuf,
    images: usize,
    train: usize,
    test: usize,
    landmarks: usize,
}

fn synth_data(config: &PipelineConfig, out: &Path, a: &SynthArgs) -> Result<()> {
    let mut c = match &config.dataset {
        DatasetConfig::Synthetic(c) => c.clone(),
        DatasetConfig::Manifest { .. } => SyntheticConfig::default(),
    };
    set(&mut c.n_images, a.n_images);
    set(&mut c.n_test, a.n_test);
    set(&mut c.k_true, a.k_true);
    set(&mut c.seed, a.data_seed);
    if let Some(s) = a.size {
        c.width = s;
        c.height = s;
    }
    let manifest = write_synthetic_dataset(&c, out)?;
    print_json(&SynthSummary {
        root: out.to_path_buf(),
        images: manifest.entries.len(),
        train: manifest.split("train").len(),
        test: manifest.split("test").len(),
        landmarks: c.k_true,
    })
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let mut config = load_config(g)?;
    match cli.command {
        Command::SynthData { out, synth } => synth_data(&config, &out, &synth),
        Command::Ingest { root, format } => {
            let r = ingest_dataset(&root, &format)?;
            let m = &r.manifest;
            print_json(&IngestSummary {
                format: &m.format,
                entries: m.entries.len(),
                landmark_count: m.landmark_count,
                train: m.split("train").len(),
                test: m.split("test").len(),
                missing_images: r.missing_images.iter().map(|p| p.display().to_string()).collect(),
                warnings: &r.warnings,
            })
        }
        Command::Zeroshot { pixels_per_image, roi } => {
            set(&mut config.zeroshot.pixels_per_image, pixels_per_image);
            if let Some(r) = roi {
                config.zeroshot.roi = match r {
                    RoiArg::FullImage => RoiKind::FullImage,
                    RoiArg::GroundTruthBox => RoiKind::GroundTruthBox,
                    RoiArg::SceneSupport => RoiKind::SceneSupport,
                };
            }
            let p = open_pipeline(&config, g.force)?;
            let out = p.run_zeroshot()?;
            print_report(&out.report);
            Ok(())
        }
        Command::Bootstrap { iterations, lr, batch_size, checkpoint_every } => {
            let b = &mut config.bootstrap;
            set(&mut b.iterations, iterations);
            set(&mut b.learning_rate, lr);
            set(&mut b.batch_size, batch_size);
            set(&mut b.checkpoint_every, checkpoint_every);
            train(&config, g.force, Stage::Bootstrap)
        }
        Command::TrainDuld(s) => {
            s.apply(&mut config.duld.schedule);
            train(&config, g.force, Stage::Duld)
        }
        Command::TrainProxy { schedule, checkpoint_every } => {
            schedule.apply(&mut config.proxy.schedule);
            set(&mut config.proxy.checkpoint_every, checkpoint_every);
            train(&config, g.force, Stage::Proxy)
        }
        Command::TrainDuldpp(s) => {
            s.apply(&mut config.duldpp.schedule);
            train(&config, g.force, Stage::Duldpp)
        }
        Command::Eval { stage } => {
            let p = open_pipeline(&config, g.force)?;
            let report = match stage {
                EvalStage::Zeroshot => p.zeroshot()?.report,
                EvalStage::Bootstrap => p.evaluate_stage(Stage::Bootstrap)?,
                EvalStage::Duld => p.evaluate_stage(Stage::Duld)?,
                EvalStage::Proxy => p.evaluate_stage(Stage::Proxy)?,
                EvalStage::Duldpp => p.evaluate_stage(Stage::Duldpp)?,
            };
            print_report(&report);
            Ok(())
        }
        Command::Plot { input, output, title } => {
            let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let chart = plot::Chart::from_csv(&text)?;
            let title = title.unwrap_or_else(|| input.file_stem().map_or(String::new(), |s| s.to_string_lossy().into_owned()));
            if chart.series.is_empty() {
                bail!("{} has no data columns", input.display());
            }
            fs::write(&output, chart.to_svg(&title)).with_context(|| format!("writing {}", output.display()))?;
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
