//! Command implementations behind the `hifanet` binary. Each command is a
//! plain function so the integration tests drive the same code paths.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use hifanet_core::attention::HiFANetConfig;
use hifanet_core::baselines::{majority_vote, Model, Variant};
use hifanet_core::datagen::{
    build_observation_tensors, build_observation_tensors_grouped, generate_scene, GroupingMode,
    ObservationTensor, PoseNoise, SceneConfig,
};
use hifanet_core::geometry::{projection_error_study, CameraIntrinsics};
use hifanet_core::training::{evaluate, evaluate_predictions, train, MetricsReport, TrainConfig};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::dataset::{export_dataset, import_dataset, DatasetFile};
use crate::CliError;

/// Meters of translation noise per unit of sweep noise level; the rotation
/// part is the level itself in degrees.
pub const SWEEP_TRANS_PER_UNIT: f64 = 0.1;

/// Seed stream tags so each pipeline stage draws independent noise.
const BUILD_SEED_TAG: u64 = 0x6f62_7365;
const SWEEP_LEVEL_TAG: u64 = 0x6c76;

fn ensure_out_dir(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text)?;
    Ok(())
}

/// JSON document mirroring [`HiFANetConfig`]; written next to checkpoints
/// and accepted back by `evaluate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfigJson {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub d1: usize,
    pub heads: usize,
    pub d2: usize,
    pub class_count: usize,
    pub ffn_width: usize,
}

impl From<HiFANetConfig> for ModelConfigJson {
    fn from(c: HiFANetConfig) -> Self {
        ModelConfigJson {
            m: c.m,
            n: c.n,
            k: c.k,
            d: c.d,
            d1: c.d1,
            heads: c.heads,
            d2: c.d2,
            class_count: c.class_count,
            ffn_width: c.ffn_width,
        }
    }
}

impl From<ModelConfigJson> for HiFANetConfig {
    fn from(c: ModelConfigJson) -> Self {
        HiFANetConfig {
            m: c.m,
            n: c.n,
            k: c.k,
            d: c.d,
            d1: c.d1,
            heads: c.heads,
            d2: c.d2,
            class_count: c.class_count,
            ffn_width: c.ffn_width,
        }
    }
}

/// Fills the model dimensions from a dataset header; per-head widths default
/// to `min(64, d / heads)` and the feed-forward width to `d`.
pub fn model_config_for(
    file: &DatasetFile,
    heads: usize,
    d1: Option<usize>,
    d2: Option<usize>,
    ffn_width: Option<usize>,
) -> Result<HiFANetConfig, CliError> {
    let g = file
        .groups
        .first()
        .ok_or_else(|| CliError::Data("dataset holds no groups".into()))?;
    let per_head = (g.d / heads.max(1)).min(64).max(1);
    let cfg = HiFANetConfig {
        m: g.m,
        n: g.n,
        k: g.k,
        d: g.d,
        d1: d1.unwrap_or(per_head),
        heads,
        d2: d2.unwrap_or(per_head),
        class_count: file.class_count,
        ffn_width: ffn_width.unwrap_or(g.d),
    };
    cfg.validate().map_err(CliError::Usage)?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// projection-study

pub struct ProjectionStudyArgs {
    pub distances: Vec<f64>,
    pub sigma_rots: Vec<f64>,
    pub sigma_transes: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub fx: f64,
    pub width: usize,
    pub height: usize,
    pub out: PathBuf,
}

/// Sweeps the projection-error study over the grid of noise levels and
/// writes `projection_study.csv`.
pub fn cmd_projection_study(args: &ProjectionStudyArgs) -> Result<PathBuf, CliError> {
    if args.distances.is_empty() || args.sigma_rots.is_empty() || args.sigma_transes.is_empty() {
        return Err(CliError::Usage("distances and sigma lists must be non-empty".into()));
    }
    if args.trials < 100 {
        return Err(CliError::Usage("at least 100 trials are required".into()));
    }
    let intr = CameraIntrinsics::new(
        args.fx,
        args.fx,
        args.width as f64 / 2.0,
        args.height as f64 / 2.0,
        args.width,
        args.height,
    )
    .map_err(|e| CliError::Usage(e.to_string()))?;

    ensure_out_dir(&args.out)?;
    let mut csv = String::from("distance_m,sigma_rot_deg,sigma_trans_m,mean_err_px,p95_err_px\n");
    let mut combo = 0u64;
    for &sr in &args.sigma_rots {
        for &st in &args.sigma_transes {
            let rows = projection_error_study(
                &args.distances,
                sr,
                st,
                &intr,
                args.trials,
                args.seed.wrapping_add(combo),
            );
            for row in rows {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{}",
                    row.distance_m, sr, st, row.mean_error_px, row.p95_error_px
                );
            }
            combo += 1;
        }
    }
    let path = args.out.join("projection_study.csv");
    write_text(&path, &csv)?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// generate

pub struct GenerateArgs {
    pub scene: SceneConfig,
    pub model: HiFANetConfig,
    pub grouping: GroupingMode,
    pub out: PathBuf,
}

/// Generates a scene, builds observation tensors under the scene's pose
/// noise and writes `dataset.hifa`. Prints coverage statistics.
pub fn cmd_generate(args: &GenerateArgs) -> Result<PathBuf, CliError> {
    args.model.validate().map_err(CliError::Usage)?;
    let scene = generate_scene(&args.scene).map_err(|e| CliError::Usage(e.to_string()))?;
    let (groups, stats) = build_observation_tensors_grouped(
        &scene,
        &args.model,
        &args.scene.pose_noise,
        args.scene.seed ^ BUILD_SEED_TAG,
        args.grouping,
    )
    .map_err(|e| CliError::Usage(e.to_string()))?;
    ensure_out_dir(&args.out)?;
    let path = args.out.join("dataset.hifa");
    export_dataset(&path, &groups, args.scene.class_count)?;
    println!(
        "points {} retained {} ({:.1}%) groups {} -> {}",
        stats.total_points,
        stats.retained_points,
        100.0 * stats.retained_points as f64 / stats.total_points.max(1) as f64,
        stats.groups,
        path.display()
    );
    Ok(path)
}

// ---------------------------------------------------------------------------
// train

pub struct TrainArgs {
    pub dataset: PathBuf,
    pub variant: String,
    pub train: TrainConfig,
    pub heads: usize,
    pub d1: Option<usize>,
    pub d2: Option<usize>,
    pub ffn_width: Option<usize>,
    pub out: PathBuf,
}

pub fn history_csv(history: &[hifanet_core::training::EpochRecord]) -> String {
    let mut csv = String::from("epoch,lr,loss,miou,avg_accuracy\n");
    for r in history {
        let _ = writeln!(csv, "{},{},{},{},{}", r.epoch, r.lr, r.loss, r.miou, r.avg_accuracy);
    }
    csv
}

/// Trains a variant on a dataset file; writes `history.csv`, `model.ckpt`
/// and `hifanet_config.json` into the output directory.
pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let file = import_dataset(&args.dataset)?;
    let cfg = model_config_for(&file, args.heads, args.d1, args.d2, args.ffn_width)?;
    let model = hifanet_core::baselines::build_variant(&args.variant, cfg)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let mut params = model.init_params(args.train.seed);
    let history = train(&model, &mut params, &file.groups, &args.train)
        .map_err(|e| CliError::Data(e.to_string()))?;

    ensure_out_dir(&args.out)?;
    write_text(&args.out.join("history.csv"), &history_csv(&history))?;
    save_checkpoint(&args.out.join("model.ckpt"), &params)?;
    let json = serde_json::to_string_pretty(&ModelConfigJson::from(cfg))
        .expect("config serialization cannot fail");
    write_text(&args.out.join("hifanet_config.json"), &json)?;
    if let Some(last) = history.last() {
        println!(
            "trained {} for {} epochs: loss {:.4} miou {:.4} avg_acc {:.4}",
            model.variant.name(),
            history.len(),
            last.loss,
            last.miou,
            last.avg_accuracy
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

pub struct EvaluateArgs {
    pub dataset: PathBuf,
    pub variant: String,
    pub checkpoint: Option<PathBuf>,
    pub model_config: Option<PathBuf>,
    pub heads: usize,
    pub patch_size: Option<usize>,
    pub bof: Option<usize>,
    pub out: PathBuf,
}

pub fn metrics_csv(report: &MetricsReport) -> String {
    let mut csv = String::from("metric,value\n");
    let _ = writeln!(csv, "miou,{}", report.miou);
    let _ = writeln!(csv, "avg_accuracy,{}", report.avg_accuracy);
    let _ = writeln!(csv, "overall_accuracy,{}", report.overall_accuracy());
    for (c, iou) in report.per_class_iou.iter().enumerate() {
        let _ = writeln!(csv, "class_{c}_iou,{iou}");
    }
    csv
}

/// Runs majority voting over stored label patches.
pub fn vote_metrics(
    file: &DatasetFile,
    patch_size: usize,
    bof: usize,
) -> Result<MetricsReport, CliError> {
    let g = file
        .groups
        .first()
        .ok_or_else(|| CliError::Data("dataset holds no groups".into()))?;
    if patch_size % 2 == 0 || patch_size > g.k || bof == 0 || bof > g.n {
        return Err(CliError::Usage(format!(
            "vote window {patch_size} and bag {bof} must fit the stored patches ({}x{}, {} frames)",
            g.k, g.k, g.n
        )));
    }
    let pairs = file.groups.iter().flat_map(|obs| {
        let votes = majority_vote(obs, patch_size, bof);
        obs.labels.clone().into_iter().zip(votes)
    });
    Ok(evaluate_predictions(pairs, file.class_count))
}

/// Evaluates a trained variant or the deterministic voting baseline on a
/// dataset file; writes `metrics.csv`.
pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<MetricsReport, CliError> {
    let file = import_dataset(&args.dataset)?;
    let report = if args.variant == "majority_vote" || args.variant == "majority-vote" {
        let g = file
            .groups
            .first()
            .ok_or_else(|| CliError::Data("dataset holds no groups".into()))?;
        vote_metrics(&file, args.patch_size.unwrap_or(1), args.bof.unwrap_or(g.n))?
    } else {
        let ckpt_path = args
            .checkpoint
            .as_ref()
            .ok_or_else(|| CliError::Usage("learned variants need --checkpoint".into()))?;
        let params = load_checkpoint(ckpt_path)?;
        let cfg = match &args.model_config {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Data(format!("cannot read {}: {e}", p.display())))?;
                let json: ModelConfigJson = serde_json::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("bad model config: {e}")))?;
                HiFANetConfig::from(json)
            }
            None => model_config_for(&file, args.heads, None, None, None)?,
        };
        let model = hifanet_core::baselines::build_variant(&args.variant, cfg)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        evaluate(&model, &params, &file.groups).map_err(|e| CliError::Data(e.to_string()))?
    };

    ensure_out_dir(&args.out)?;
    write_text(&args.out.join("metrics.csv"), &metrics_csv(&report))?;
    println!(
        "{}: miou {:.4} avg_acc {:.4} overall {:.4}",
        args.variant,
        report.miou,
        report.avg_accuracy,
        report.overall_accuracy()
    );
    Ok(report)
}

// ---------------------------------------------------------------------------
// noise-sweep

pub struct NoiseSweepArgs {
    pub scene: SceneConfig,
    pub heads: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub model_m: usize,
    pub model_n: usize,
    pub model_k: usize,
    pub noise_max: f64,
    pub noise_steps: usize,
    pub seeds: u64,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub sigma: f64,
    pub method: &'static str,
    pub miou: f64,
    pub avg_accuracy: f64,
}

pub const SWEEP_METHODS: [&str; 3] = ["hifanet", "majority_vote_k1", "majority_vote_k5"];

/// Splits groups into train and held-out test sets by stride: every fifth
/// group is test. Groups leave the builder ordered by object, so a
/// contiguous split would starve whole classes.
fn split_groups(groups: &[ObservationTensor]) -> (Vec<ObservationTensor>, Vec<ObservationTensor>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, g) in groups.iter().enumerate() {
        if i % 5 == 4 {
            test.push(g.clone());
        } else {
            train.push(g.clone());
        }
    }
    if test.is_empty() && !train.is_empty() {
        test.push(train.pop().unwrap());
    }
    (train, test)
}

/// Trains once per seed at zero pose noise, then evaluates the frozen model
/// and the two voting baselines on observations rebuilt at each noise level.
/// A noise level `s` maps to `s` degrees of rotation noise and
/// `s * SWEEP_TRANS_PER_UNIT` meters of translation noise. Returned rows are
/// means over seeds.
pub fn run_noise_sweep(args: &NoiseSweepArgs) -> Result<Vec<SweepRow>, CliError> {
    if args.noise_steps < 2 {
        return Err(CliError::Usage("need at least two noise levels".into()));
    }
    if args.seeds == 0 {
        return Err(CliError::Usage("need at least one seed".into()));
    }
    let levels: Vec<f64> = (0..args.noise_steps)
        .map(|i| args.noise_max * i as f64 / (args.noise_steps - 1) as f64)
        .collect();
    // sums[level][method] = (miou, avg_accuracy)
    let mut sums = vec![[(0.0f64, 0.0f64); SWEEP_METHODS.len()]; levels.len()];

    for seed_offset in 0..args.seeds {
        let scene_cfg = SceneConfig { seed: args.scene.seed + seed_offset, ..args.scene };
        let scene = generate_scene(&scene_cfg).map_err(|e| CliError::Usage(e.to_string()))?;
        let model_cfg = HiFANetConfig {
            m: args.model_m,
            n: args.model_n,
            k: args.model_k,
            d: scene_cfg.feature_dim,
            d1: (scene_cfg.feature_dim / args.heads).min(64).max(1),
            heads: args.heads,
            d2: (scene_cfg.feature_dim / args.heads).min(64).max(1),
            class_count: scene_cfg.class_count,
            ffn_width: scene_cfg.feature_dim,
        };
        model_cfg.validate().map_err(CliError::Usage)?;

        let build_seed = scene_cfg.seed ^ BUILD_SEED_TAG;
        let (clean_groups, _) =
            build_observation_tensors(&scene, &model_cfg, &PoseNoise::NONE, build_seed)
                .map_err(|e| CliError::Usage(e.to_string()))?;
        if clean_groups.len() < 5 {
            return Err(CliError::Data("scene too small for a train/test split".into()));
        }
        let (train_groups, _) = split_groups(&clean_groups);

        let model = Model::new(Variant::HiFANet, model_cfg);
        let mut params = model.init_params(scene_cfg.seed);
        let train_cfg = TrainConfig {
            lr0: args.lr0,
            epochs: args.epochs,
            batch_size: args.batch_size,
            seed: scene_cfg.seed,
            ..TrainConfig::default()
        };
        train(&model, &mut params, &train_groups, &train_cfg)
            .map_err(|e| CliError::Data(e.to_string()))?;

        for (li, &level) in levels.iter().enumerate() {
            let noise = PoseNoise::new(level, level * SWEEP_TRANS_PER_UNIT);
            let level_seed = build_seed ^ (SWEEP_LEVEL_TAG.wrapping_add(li as u64) << 32);
            let (groups, _) = build_observation_tensors(&scene, &model_cfg, &noise, level_seed)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            let (_, test_groups) = split_groups(&groups);

            let reports = [
                evaluate(&model, &params, &test_groups)
                    .map_err(|e| CliError::Data(e.to_string()))?,
                vote_report(&test_groups, 1, model_cfg.n, model_cfg.class_count),
                vote_report(
                    &test_groups,
                    model_cfg.k.min(5),
                    model_cfg.n,
                    model_cfg.class_count,
                ),
            ];
            for (mi, report) in reports.iter().enumerate() {
                sums[li][mi].0 += report.miou;
                sums[li][mi].1 += report.avg_accuracy;
            }
        }
    }

    let mut rows = Vec::new();
    for (li, &level) in levels.iter().enumerate() {
        for (mi, &method) in SWEEP_METHODS.iter().enumerate() {
            rows.push(SweepRow {
                sigma: level,
                method,
                miou: sums[li][mi].0 / args.seeds as f64,
                avg_accuracy: sums[li][mi].1 / args.seeds as f64,
            });
        }
    }
    Ok(rows)
}

fn vote_report(groups: &[ObservationTensor], patch_size: usize, bof: usize, classes: usize) -> MetricsReport {
    let pairs = groups.iter().flat_map(|obs| {
        let votes = majority_vote(obs, patch_size, bof);
        obs.labels.clone().into_iter().zip(votes)
    });
    evaluate_predictions(pairs, classes)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut csv = String::from("sigma,method,miou,avg_accuracy\n");
    for r in rows {
        let _ = writeln!(csv, "{},{},{},{}", r.sigma, r.method, r.miou, r.avg_accuracy);
    }
    csv
}

/// Runs the sweep and writes `noise_sweep.csv`.
pub fn cmd_noise_sweep(args: &NoiseSweepArgs) -> Result<Vec<SweepRow>, CliError> {
    let rows = run_noise_sweep(args)?;
    ensure_out_dir(&args.out)?;
    write_text(&args.out.join("noise_sweep.csv"), &sweep_csv(&rows))?;
    for r in &rows {
        println!("sigma {:.3} {:<18} miou {:.4} avg_acc {:.4}", r.sigma, r.method, r.miou, r.avg_accuracy);
    }
    Ok(rows)
}
