//! Ray-based multi-view stereo at desk scale.
//!
//! The pipeline estimates a reference-view depth map from a handful of posed
//! RGB images: a plane-sweep cost volume produces a coarse depth map, then a
//! per-ray stage refines it by predicting a normalized 1D signed-distance
//! profile along each camera ray (epipolar transformer for cross-view feature
//! aggregation, LSTM over the ray samples, two MLP heads for the SDF sequence
//! and the zero-crossing location). Refined depth maps are filtered and fused
//! into point clouds and scored with distance metrics.
//!
//! Modules follow the data flow:
//!
//! - [`diff`]: dense tensors with reverse-mode gradients; everything learned
//!   is built from these primitives.
//! - [`geometry`]: pinhole cameras, rays, plane-sweep warps, epipolar lines,
//!   interpolation taps, ray-window normalizations.
//! - [`scene`]: synthetic SDF scenes with shaded renderings, exact depth via
//!   sphere tracing, per-ray SDF labels, dataset generation.
//! - [`coarse`]: 2D feature U-Net, variance cost volume, 3D regularization,
//!   soft-argmin depth.
//! - [`raynet`]: per-ray feature assembly, epipolar transformer, LSTM field,
//!   SDF / zero-crossing heads.
//! - [`train`]: losses, Adam, the two-phase training loop, checkpoints.
//! - [`fusion`]: depth-map filtering, point-cloud fusion, metrics, PLY I/O.

pub mod coarse;
pub mod diff;
pub mod fusion;
pub mod geometry;
pub mod raynet;
pub mod scene;
pub mod train;
