//! Optional JSON run config. Every field mirrors one config struct field;
//! command-line flags override file values, file values override built-in
//! defaults.

use std::path::Path;

use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub scene: SceneSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSection {
    pub class_count: Option<usize>,
    pub points_per_class: Option<usize>,
    pub world_extent: Option<f64>,
    pub camera_count: Option<usize>,
    pub camera_spacing: Option<f64>,
    pub feature_dim: Option<usize>,
    pub feature_noise_sigma: Option<f64>,
    pub label_corruption_rate: Option<f64>,
    pub sigma_rot_deg: Option<f64>,
    pub sigma_trans_m: Option<f64>,
    pub seed: Option<u64>,
    pub image_width: Option<usize>,
    pub image_height: Option<usize>,
    pub focal_px: Option<f64>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub m: Option<usize>,
    pub n: Option<usize>,
    pub k: Option<usize>,
    pub d: Option<usize>,
    pub d1: Option<usize>,
    pub heads: Option<usize>,
    pub d2: Option<usize>,
    pub class_count: Option<usize>,
    pub ffn_width: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr0: Option<f64>,
    pub decay_factor: Option<f64>,
    pub decay_every: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
}

/// Loads the config file when a path is given, otherwise an empty config.
pub fn load(path: Option<&Path>) -> Result<FileConfig, CliError> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Data(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("bad config {}: {e}", p.display())))
        }
    }
}

/// Flag beats file beats default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}
