//! `hifanet` — synthetic multi-view 3D semantic aggregation pipeline.
//!
//! Subcommands: `generate`, `train`, `evaluate`, `projection-study`,
//! `noise-sweep`. Every command is reproducible byte-for-byte given
//! identical flags including `--seed`. Exit codes: 0 success, 2 usage
//! error, 3 data error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hifanet_cli::commands::{
    cmd_evaluate, cmd_generate, cmd_noise_sweep, cmd_projection_study, cmd_train, EvaluateArgs,
    GenerateArgs, NoiseSweepArgs, ProjectionStudyArgs, TrainArgs,
};
use hifanet_cli::config::{self, pick};
use hifanet_cli::CliError;

use hifanet_core::attention::HiFANetConfig;
use hifanet_core::datagen::{GroupingMode, PoseNoise, SceneConfig};
use hifanet_core::training::TrainConfig;

#[derive(Parser)]
#[command(name = "hifanet", version, about = "Multi-view 3D semantics from pose-noisy 2D feature maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SceneFlags {
    /// Number of semantic classes (class 0 doubles as background).
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    points_per_class: Option<usize>,
    /// Depth span of the object band, meters.
    #[arg(long)]
    world_extent: Option<f64>,
    #[arg(long)]
    cameras: Option<usize>,
    #[arg(long)]
    camera_spacing: Option<f64>,
    /// Feature width of rendered maps (also the model width d).
    #[arg(long)]
    d: Option<usize>,
    /// Std of per-pixel Gaussian feature noise.
    #[arg(long)]
    feature_noise: Option<f64>,
    /// Per-pixel label corruption probability.
    #[arg(long)]
    corruption: Option<f64>,
    /// Pose noise: rotation std in degrees.
    #[arg(long)]
    sigma_rot: Option<f64>,
    /// Pose noise: translation std in meters.
    #[arg(long)]
    sigma_trans: Option<f64>,
    #[arg(long)]
    image_width: Option<usize>,
    #[arg(long)]
    image_height: Option<usize>,
    #[arg(long)]
    focal: Option<f64>,
}

impl SceneFlags {
    fn resolve(&self, file: &config::SceneSection, seed: Option<u64>) -> SceneConfig {
        let d = SceneConfig::default();
        SceneConfig {
            class_count: pick(self.classes, file.class_count, d.class_count),
            points_per_class: pick(self.points_per_class, file.points_per_class, d.points_per_class),
            world_extent: pick(self.world_extent, file.world_extent, d.world_extent),
            camera_count: pick(self.cameras, file.camera_count, d.camera_count),
            camera_spacing: pick(self.camera_spacing, file.camera_spacing, d.camera_spacing),
            feature_dim: pick(self.d, file.feature_dim, d.feature_dim),
            feature_noise_sigma: pick(self.feature_noise, file.feature_noise_sigma, d.feature_noise_sigma),
            label_corruption_rate: pick(self.corruption, file.label_corruption_rate, d.label_corruption_rate),
            pose_noise: PoseNoise::new(
                pick(self.sigma_rot, file.sigma_rot_deg, d.pose_noise.sigma_rot_deg),
                pick(self.sigma_trans, file.sigma_trans_m, d.pose_noise.sigma_trans_m),
            ),
            seed: pick(seed, file.seed, d.seed),
            image_width: pick(self.image_width, file.image_width, d.image_width),
            image_height: pick(self.image_height, file.image_height, d.image_height),
            focal_px: pick(self.focal, file.focal_px, d.focal_px),
        }
    }
}

#[derive(Args)]
struct ModelFlags {
    /// Points per group.
    #[arg(long)]
    m: Option<usize>,
    /// Bag-of-frames size.
    #[arg(long)]
    n: Option<usize>,
    /// Patch side (odd).
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d1: Option<usize>,
    #[arg(long)]
    d2: Option<usize>,
    #[arg(long)]
    ffn_width: Option<usize>,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    decay_factor: Option<f64>,
    #[arg(long)]
    decay_every: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

impl TrainFlags {
    fn resolve(&self, file: &config::TrainSection, seed: Option<u64>) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            lr0: pick(self.lr0, file.lr0, d.lr0),
            decay_factor: pick(self.decay_factor, file.decay_factor, d.decay_factor),
            decay_every: pick(self.decay_every, file.decay_every, d.decay_every),
            epochs: pick(self.epochs, file.epochs, d.epochs),
            batch_size: pick(self.batch_size, file.batch_size, d.batch_size),
            seed: pick(seed, file.seed, d.seed),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene and write an observation dataset.
    Generate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scene: SceneFlags,
        #[command(flatten)]
        model: ModelFlags,
        /// Point grouping: spatial (nearest-neighbor chains) or sequential.
        #[arg(long, default_value = "spatial")]
        grouping: String,
    },
    /// Train a model variant on a dataset file.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset file produced by `generate`.
        #[arg(long)]
        dataset: PathBuf,
        /// hifanet | hifanet_noPA | hifanet_noSP | avgpool_fc
        #[arg(long, default_value = "hifanet")]
        variant: String,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Evaluate a trained checkpoint or the majority-vote baseline.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// hifanet | hifanet_noPA | hifanet_noSP | avgpool_fc | majority_vote
        #[arg(long, default_value = "hifanet")]
        variant: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Model config JSON written by `train`.
        #[arg(long)]
        model_config: Option<PathBuf>,
        /// Vote window side (majority_vote only).
        #[arg(long)]
        patch_size: Option<usize>,
        /// Frames per vote (majority_vote only).
        #[arg(long)]
        bof: Option<usize>,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Monte-Carlo study of projection error under pose noise.
    ProjectionStudy {
        #[command(flatten)]
        common: Common,
        /// Comma-separated distances in meters.
        #[arg(long, value_delimiter = ',', default_value = "5,10,20")]
        distances: Vec<f64>,
        /// Comma-separated rotation-noise stds in degrees.
        #[arg(long, value_delimiter = ',', default_value = "1")]
        sigma_rot: Vec<f64>,
        /// Comma-separated translation-noise stds in meters.
        #[arg(long, value_delimiter = ',', default_value = "0.05,0.1")]
        sigma_trans: Vec<f64>,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 500.0)]
        fx: f64,
        #[arg(long, default_value_t = 1024)]
        width: usize,
        #[arg(long, default_value_t = 512)]
        height: usize,
    },
    /// Train at zero noise, evaluate across a pose-noise ramp.
    NoiseSweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        scene: SceneFlags,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
        /// Largest noise level (degrees of rotation; meters scale by 0.1).
        #[arg(long, default_value_t = 0.3)]
        noise_max: f64,
        /// Number of noise levels including zero.
        #[arg(long, default_value_t = 4)]
        noise_steps: usize,
        /// Number of seeds averaged per level.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
}

fn model_cfg_for_generate(flags: &ModelFlags, file: &config::ModelSection, scene: &SceneConfig) -> HiFANetConfig {
    let heads = pick(flags.heads, file.heads, 4);
    let per_head = (scene.feature_dim / heads.max(1)).min(64).max(1);
    HiFANetConfig {
        m: pick(flags.m, file.m, 10),
        n: pick(flags.n, file.n, 5),
        k: pick(flags.k, file.k, 5),
        d: scene.feature_dim,
        d1: pick(flags.d1, file.d1, per_head),
        heads,
        d2: pick(flags.d2, file.d2, per_head),
        class_count: scene.class_count,
        ffn_width: pick(flags.ffn_width, file.ffn_width, scene.feature_dim),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { common, scene, model, grouping } => {
            let file = config::load(common.config.as_deref())?;
            let scene_cfg = scene.resolve(&file.scene, common.seed);
            let model_cfg = model_cfg_for_generate(&model, &file.model, &scene_cfg);
            let grouping = match grouping.as_str() {
                "spatial" => GroupingMode::Spatial,
                "sequential" => GroupingMode::Sequential,
                other => {
                    return Err(CliError::Usage(format!(
                        "unknown grouping {other:?}; expected spatial or sequential"
                    )))
                }
            };
            cmd_generate(&GenerateArgs {
                scene: scene_cfg,
                model: model_cfg,
                grouping,
                out: common.out,
            })?;
            Ok(())
        }
        Command::Train { common, dataset, variant, model, train } => {
            let file = config::load(common.config.as_deref())?;
            let train_cfg = train.resolve(&file.train, common.seed);
            cmd_train(&TrainArgs {
                dataset,
                variant,
                train: train_cfg,
                heads: pick(model.heads, file.model.heads, 4),
                d1: model.d1.or(file.model.d1),
                d2: model.d2.or(file.model.d2),
                ffn_width: model.ffn_width.or(file.model.ffn_width),
                out: common.out,
            })
        }
        Command::Evaluate { common, dataset, variant, checkpoint, model_config, patch_size, bof, model } => {
            let file = config::load(common.config.as_deref())?;
            cmd_evaluate(&EvaluateArgs {
                dataset,
                variant,
                checkpoint,
                model_config,
                heads: pick(model.heads, file.model.heads, 4),
                patch_size,
                bof,
                out: common.out,
            })?;
            Ok(())
        }
        Command::ProjectionStudy { common, distances, sigma_rot, sigma_trans, trials, fx, width, height } => {
            cmd_projection_study(&ProjectionStudyArgs {
                distances,
                sigma_rots: sigma_rot,
                sigma_transes: sigma_trans,
                trials,
                seed: common.seed.unwrap_or(42),
                fx,
                width,
                height,
                out: common.out,
            })?;
            Ok(())
        }
        Command::NoiseSweep { common, scene, model, train, noise_max, noise_steps, seeds } => {
            let file = config::load(common.config.as_deref())?;
            let mut scene_cfg = scene.resolve(&file.scene, common.seed);
            // The sweep controls pose noise itself.
            scene_cfg.pose_noise = PoseNoise::NONE;
            let train_cfg = train.resolve(&file.train, common.seed);
            cmd_noise_sweep(&NoiseSweepArgs {
                scene: scene_cfg,
                heads: pick(model.heads, file.model.heads, 4),
                epochs: train_cfg.epochs,
                batch_size: train_cfg.batch_size,
                lr0: train_cfg.lr0,
                model_m: pick(model.m, file.model.m, 10),
                model_n: pick(model.n, file.model.n, 5),
                model_k: pick(model.k, file.model.k, 5),
                noise_max,
                noise_steps,
                seeds,
                out: common.out,
            })?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
