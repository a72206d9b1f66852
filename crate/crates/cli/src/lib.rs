//! Command implementations for the `raymvs` binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use raymvs_core::coarse::CoarseConfig;
use raymvs_core::diff::{DiffError, Tensor};
use raymvs_core::raynet::{RayNetConfig, RayNetError};
use raymvs_core::train::TrainError;

pub mod commands;
pub mod config;

/// Errors carry their exit code: 2 usage, 3 data, 4 numeric.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::Data(e.to_string())
    }
}

impl From<raymvs_core::scene::SceneError> for CliError {
    fn from(e: raymvs_core::scene::SceneError) -> CliError {
        CliError::Data(e.to_string())
    }
}

impl From<raymvs_core::geometry::GeomError> for CliError {
    fn from(e: raymvs_core::geometry::GeomError) -> CliError {
        CliError::Data(e.to_string())
    }
}

impl From<raymvs_core::fusion::FusionError> for CliError {
    fn from(e: raymvs_core::fusion::FusionError) -> CliError {
        CliError::Data(e.to_string())
    }
}

impl From<raymvs_core::coarse::CoarseError> for CliError {
    fn from(e: raymvs_core::coarse::CoarseError) -> CliError {
        match e {
            raymvs_core::coarse::CoarseError::Diff(DiffError::NonFinite { .. }) => {
                CliError::Numeric(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<RayNetError> for CliError {
    fn from(e: RayNetError) -> CliError {
        match e {
            RayNetError::Diff(DiffError::NonFinite { .. }) => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<DiffError> for CliError {
    fn from(e: DiffError) -> CliError {
        match e {
            DiffError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> CliError {
        match e {
            TrainError::Diverged { .. } | TrainError::NonFiniteGrad(_) => {
                CliError::Numeric(e.to_string())
            }
            TrainError::Diff(DiffError::NonFinite { .. }) => CliError::Numeric(e.to_string()),
            TrainError::BadConfig(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

/// Files and directories a command has started writing. Everything still
/// tracked when the guard drops is removed, so failed runs leave no partial
/// artifacts; call `disarm` once the outputs are complete.
#[derive(Default)]
pub struct OutputGuard {
    paths: Vec<PathBuf>,
    disarmed: bool,
}

impl OutputGuard {
    pub fn track(&mut self, p: &Path) {
        self.paths.push(p.to_path_buf());
    }

    pub fn disarm(&mut self) {
        self.disarmed = true;
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if self.disarmed {
            return;
        }
        for p in &self.paths {
            if p.is_dir() {
                let _ = std::fs::remove_dir_all(p);
            } else {
                let _ = std::fs::remove_file(p);
            }
        }
    }
}

const META_VERSION: f64 = 1.0;

fn meta_scalar(v: f64) -> Tensor {
    Tensor::new(&[1], vec![v]).expect("scalar")
}

/// Embeds the model architecture and sampling constants into a checkpoint's
/// tensor map so inference needs no side config.
pub fn embed_meta(
    tensors: &mut BTreeMap<String, Tensor>,
    coarse: &CoarseConfig,
    ray: &RayNetConfig,
    samples_per_ray: usize,
    delta: f64,
) {
    let mut put = |k: &str, v: f64| {
        tensors.insert(format!("meta.{k}"), meta_scalar(v));
    };
    put("version", META_VERSION);
    put("feature_channels", coarse.feature_channels as f64);
    put("w2d0", coarse.widths2d[0] as f64);
    put("w2d1", coarse.widths2d[1] as f64);
    put("w2d2", coarse.widths2d[2] as f64);
    put("w3d0", coarse.widths3d[0] as f64);
    put("w3d1", coarse.widths3d[1] as f64);
    put("planes", coarse.num_planes as f64);
    put("volume_scale", coarse.volume_scale as f64);
    put("volume_channels", ray.volume_channels as f64);
    put("blocks", ray.blocks as f64);
    put("ff_mult", ray.ff_mult as f64);
    put("hidden", ray.hidden as f64);
    put("mlp0", ray.mlp_widths[0] as f64);
    put("mlp1", ray.mlp_widths[1] as f64);
    put("mlp2", ray.mlp_widths[2] as f64);
    put("transformer", f64::from(u8::from(ray.use_transformer)));
    put("k", samples_per_ray as f64);
    put("delta", delta);
}

/// The architecture a checkpoint was trained with, plus K and delta.
#[derive(Debug, Clone)]
pub struct CheckpointMeta {
    pub coarse: CoarseConfig,
    pub ray: RayNetConfig,
    pub samples_per_ray: usize,
    pub delta: f64,
}

pub fn read_meta(tensors: &BTreeMap<String, Tensor>) -> Result<CheckpointMeta, CliError> {
    let get = |k: &str| -> Result<f64, CliError> {
        tensors
            .get(&format!("meta.{k}"))
            .map(|t| t.data()[0])
            .ok_or_else(|| {
                CliError::Data(format!(
                    "checkpoint lacks model metadata (meta.{k}); it was not written by a completed train run"
                ))
            })
    };
    if get("version")? != META_VERSION {
        return Err(CliError::Data("unsupported checkpoint metadata version".into()));
    }
    let coarse = CoarseConfig {
        feature_channels: get("feature_channels")? as usize,
        widths2d: [get("w2d0")? as usize, get("w2d1")? as usize, get("w2d2")? as usize],
        widths3d: [get("w3d0")? as usize, get("w3d1")? as usize],
        num_planes: get("planes")? as usize,
        volume_scale: get("volume_scale")? as usize,
    };
    let ray = RayNetConfig {
        feature_channels: coarse.feature_channels,
        volume_channels: get("volume_channels")? as usize,
        blocks: get("blocks")? as usize,
        ff_mult: get("ff_mult")? as usize,
        hidden: get("hidden")? as usize,
        mlp_widths: [get("mlp0")? as usize, get("mlp1")? as usize, get("mlp2")? as usize],
        use_transformer: get("transformer")? != 0.0,
    };
    Ok(CheckpointMeta {
        coarse,
        ray,
        samples_per_ray: get("k")? as usize,
        delta: get("delta")?,
    })
}

/// Model tensors only: the checkpoint map without optimizer state and
/// metadata entries.
pub fn model_params(tensors: &BTreeMap<String, Tensor>) -> BTreeMap<String, Tensor> {
    tensors
        .iter()
        .filter(|(name, _)| !name.starts_with("adam.") && !name.starts_with("meta."))
        .map(|(name, t)| (name.clone(), t.clone()))
        .collect()
}
