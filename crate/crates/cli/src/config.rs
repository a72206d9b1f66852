//! Run configuration: one JSON file, every field optional with the bundled
//! desk-scale defaults. Unknown keys are rejected by name; the first invalid
//! field fails with the file path and the expected domain.

use std::path::Path;

use serde::{Deserialize, Serialize};

use raymvs_core::coarse::CoarseConfig;
use raymvs_core::raynet::RayNetConfig;
use raymvs_core::scene::DatasetConfig;
use raymvs_core::train::{LossWeights, TrainConfig};

use crate::CliError;

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Directory holding (or receiving) the scene_<i> dataset directories.
    pub data_dir: String,
    pub scenes: usize,
    /// Views per scene (N).
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    pub ring_distance: f64,
    pub ring_span_deg: f64,
    pub ring_elevation_deg: f64,
    pub view_jitter: f64,
    /// Cost volume depth planes (D).
    pub planes: usize,
    /// Hypothesis samples per ray (K).
    pub samples_per_ray: usize,
    /// Hypothesis half-window in scene units.
    pub delta: f64,
    /// Per-view feature channels (C).
    pub feature_channels: usize,
    /// LSTM hidden width.
    pub hidden: usize,
    /// Epipolar transformer on/off (off degrades to raw fetched tokens).
    pub transformer: bool,
    /// Weights of the SDF, location, and consistency terms.
    pub loss_weights: [f64; 3],
    pub learning_rate: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub epochs_coarse: usize,
    pub epochs_ray: usize,
    pub rays_per_view: usize,
    pub ray_batch: usize,
    /// Phase 2 also tunes the coarse stage when set.
    pub joint_finetune: bool,
    /// Gaussian noise on the coarse depth during ray sampling, scene units.
    pub coarse_noise_std: f64,
    /// Extra numbered checkpoints every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Config {
        Config {
            data_dir: "data".into(),
            scenes: 3,
            views: 5,
            width: 64,
            height: 64,
            focal: 85.0,
            depth_min: 500.0,
            depth_max: 900.0,
            ring_distance: 700.0,
            ring_span_deg: 60.0,
            ring_elevation_deg: 12.0,
            view_jitter: 8.0,
            planes: 48,
            samples_per_ray: 16,
            delta: 20.0,
            feature_channels: 8,
            hidden: 50,
            transformer: true,
            loss_weights: [0.1, 0.8, 0.1],
            learning_rate: 0.0005,
            decay: 0.9,
            decay_every: 2,
            epochs_coarse: 12,
            epochs_ray: 24,
            rays_per_view: 128,
            ray_batch: 32,
            joint_finetune: false,
            coarse_noise_std: 0.0,
            checkpoint_every: 0,
            seed: 7,
        }
    }
}

impl Config {
    pub fn validate(&self, path: &Path) -> Result<(), CliError> {
        let at = |field: &str, domain: String| {
            Err(CliError::Usage(format!(
                "{}: {field}: {domain}",
                path.display()
            )))
        };
        if self.scenes == 0 {
            return at("scenes", "expected at least 1 scene, got 0".into());
        }
        if self.views < 2 {
            return at("views", format!("expected at least 2 views, got {}", self.views));
        }
        if self.width == 0 || self.width % 8 != 0 || self.height == 0 || self.height % 8 != 0 {
            return at(
                "width/height",
                format!(
                    "expected positive multiples of 8 (feature downsample 4, then one 3D halving), got {}x{}",
                    self.width, self.height
                ),
            );
        }
        if !(self.focal > 0.0) {
            return at("focal", format!("expected a positive focal length, got {}", self.focal));
        }
        if !(self.depth_min > 0.0 && self.depth_max > self.depth_min) {
            return at(
                "depth_min/depth_max",
                format!(
                    "expected 0 < depth_min < depth_max, got {} and {}",
                    self.depth_min, self.depth_max
                ),
            );
        }
        if !(self.ring_distance > 0.0) {
            return at("ring_distance", format!("expected a positive distance, got {}", self.ring_distance));
        }
        if !(self.view_jitter >= 0.0) {
            return at("view_jitter", format!("expected a nonnegative jitter, got {}", self.view_jitter));
        }
        if self.planes < 2 || self.planes % 2 != 0 {
            return at("planes", format!("expected an even D of at least 2, got {}", self.planes));
        }
        if self.samples_per_ray < 2 {
            return at(
                "samples_per_ray",
                format!("K ≥ 2 required (the window needs both ends), got {}", self.samples_per_ray),
            );
        }
        if !(self.delta > 0.0) {
            return at("delta", format!("expected a positive half-window, got {}", self.delta));
        }
        if self.feature_channels == 0 {
            return at("feature_channels", "expected at least 1 channel, got 0".into());
        }
        if self.hidden == 0 {
            return at("hidden", "expected a positive hidden width, got 0".into());
        }
        if self.loss_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return at(
                "loss_weights",
                format!("expected three finite nonnegative weights, got {:?}", self.loss_weights),
            );
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return at("learning_rate", format!("expected a positive rate, got {}", self.learning_rate));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return at("decay", format!("expected a factor in (0, 1], got {}", self.decay));
        }
        if self.decay_every == 0 {
            return at("decay_every", "expected at least 1 epoch, got 0".into());
        }
        if self.rays_per_view == 0 {
            return at("rays_per_view", "expected at least 1 ray, got 0".into());
        }
        if self.ray_batch == 0 {
            return at("ray_batch", "expected at least 1 ray per step, got 0".into());
        }
        if !(self.coarse_noise_std >= 0.0 && self.coarse_noise_std.is_finite()) {
            return at(
                "coarse_noise_std",
                format!("expected a finite nonnegative std, got {}", self.coarse_noise_std),
            );
        }
        Ok(())
    }

    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            scenes: self.scenes,
            views: self.views,
            width: self.width,
            height: self.height,
            focal: self.focal,
            ring_distance: self.ring_distance,
            ring_span_deg: self.ring_span_deg,
            ring_elevation_deg: self.ring_elevation_deg,
            depth_range: (self.depth_min, self.depth_max),
            delta: self.delta,
            jitter: self.view_jitter,
            seed: self.seed,
        }
    }

    pub fn coarse(&self) -> CoarseConfig {
        CoarseConfig {
            feature_channels: self.feature_channels,
            num_planes: self.planes,
            ..CoarseConfig::default()
        }
    }

    pub fn raynet(&self) -> RayNetConfig {
        RayNetConfig {
            feature_channels: self.feature_channels,
            volume_channels: self.feature_channels,
            hidden: self.hidden,
            use_transformer: self.transformer,
            ..RayNetConfig::default()
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            decay: self.decay,
            decay_every: self.decay_every,
            weights: LossWeights {
                sdf: self.loss_weights[0],
                location: self.loss_weights[1],
                consistency: self.loss_weights[2],
            },
            epochs_coarse: self.epochs_coarse,
            epochs_ray: self.epochs_ray,
            rays_per_view: self.rays_per_view,
            ray_batch: self.ray_batch,
            samples_per_ray: self.samples_per_ray,
            delta: self.delta,
            seed: self.seed,
            coarse_noise_std: self.coarse_noise_std,
            joint_finetune: self.joint_finetune,
            checkpoint_every: self.checkpoint_every,
        }
    }
}

/// Reads and validates a config file. An empty (or whitespace-only) file
/// yields the defaults.
pub fn parse_config(path: &Path) -> Result<Config, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let cfg: Config = if text.trim().is_empty() {
        Config::default()
    } else {
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
    };
    cfg.validate(path)?;
    Ok(cfg)
}
