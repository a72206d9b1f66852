//! Coarse stage: per-view 2D features, a variance cost volume swept over
//! fronto-parallel planes of the reference camera, 3D regularization, and
//! soft-argmin depth regression.
//!
//! The cost volume lives at a reduced resolution (`volume_scale`) of the
//! reference image while feature maps stay full resolution; warping goes
//! through the downscaled reference camera so volume pixels and image pixels
//! share rays. The regularized feature volume is kept for the ray stage to
//! sample with trilinear taps.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::diff::{DiffError, GatherTable, Tape, Tensor, Var};
use crate::geometry::{bilinear_taps, homography_warp, Camera, GeomError};

#[derive(Debug, Error)]
pub enum CoarseError {
    #[error("missing parameter {0:?}")]
    MissingParam(String),
    #[error("coarse stage: {0}")]
    BadInput(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Architecture of the coarse stage. Channel widths are configuration, not
/// structure: the 2D net is always 6 conv + 6 deconv with two stride-2
/// stages, the 3D net 3 conv + 3 deconv with one.
#[derive(Debug, Clone)]
pub struct CoarseConfig {
    /// Feature channels C of the per-view maps and of the feature volume.
    pub feature_channels: usize,
    /// Encoder widths of the 2D U-Net, one per scale.
    pub widths2d: [usize; 3],
    /// Encoder widths of the 3D U-Net.
    pub widths3d: [usize; 2],
    /// Depth planes D of the cost volume.
    pub num_planes: usize,
    /// Image-to-volume downscale factor.
    pub volume_scale: usize,
}

impl Default for CoarseConfig {
    fn default() -> CoarseConfig {
        CoarseConfig {
            feature_channels: 8,
            widths2d: [8, 16, 32],
            widths3d: [8, 16],
            num_planes: 48,
            volume_scale: 4,
        }
    }
}

/// Total 2D downsampling factor: two stride-2 encoder stages.
pub const FEATURE_DOWNSAMPLE: usize = 4;

/// Name and shape of every learnable tensor in the coarse stage, in a fixed
/// order. Conv weights are `[out, in, k...]`, deconv weights `[in, out, k...]`.
pub fn param_specs(cfg: &CoarseConfig) -> Vec<(String, Vec<usize>)> {
    let c = cfg.feature_channels;
    let [w0, w1, w2] = cfg.widths2d;
    let [v0, v1] = cfg.widths3d;
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    let mut layer = |name: &str, shape: Vec<usize>| {
        let bias = match name.as_bytes()[name.len() - 2] {
            b'd' | b'q' => shape[1], // deconv weights are [in, out, k...]
            _ => shape[0],
        };
        out.push((format!("coarse.{name}.w"), shape));
        out.push((format!("coarse.{name}.b"), vec![bias]));
    };
    layer("feat.c1", vec![w0, 3, 3, 3]);
    layer("feat.c2", vec![w0, w0, 3, 3]);
    layer("feat.c3", vec![w1, w0, 3, 3]);
    layer("feat.c4", vec![w1, w1, 3, 3]);
    layer("feat.c5", vec![w2, w1, 3, 3]);
    layer("feat.c6", vec![w2, w2, 3, 3]);
    layer("feat.d1", vec![w2, w2, 3, 3]);
    layer("feat.d2", vec![w2, w1, 4, 4]);
    layer("feat.d3", vec![2 * w1, w1, 3, 3]);
    layer("feat.d4", vec![w1, w0, 4, 4]);
    layer("feat.d5", vec![2 * w0, w0, 3, 3]);
    layer("feat.d6", vec![w0, c, 3, 3]);
    layer("vol.r1", vec![v0, c, 3, 3, 3]);
    layer("vol.r2", vec![v1, v0, 3, 3, 3]);
    layer("vol.r3", vec![v1, v1, 3, 3, 3]);
    layer("vol.q1", vec![v1, v0, 4, 4, 4]);
    layer("vol.q2", vec![2 * v0, v0, 3, 3, 3]);
    layer("vol.q3", vec![v0, c + 1, 3, 3, 3]);
    out
}

pub fn lookup(params: &BTreeMap<String, Var>, name: &str) -> Result<Var, CoarseError> {
    params
        .get(name)
        .copied()
        .ok_or_else(|| CoarseError::MissingParam(name.to_string()))
}

fn conv2(
    tape: &mut Tape,
    params: &BTreeMap<String, Var>,
    name: &str,
    x: Var,
    stride: usize,
    relu: bool,
) -> Result<Var, CoarseError> {
    let w = lookup(params, &format!("coarse.{name}.w"))?;
    let b = lookup(params, &format!("coarse.{name}.b"))?;
    let y = tape.conv2d(x, w, b, stride, 1)?;
    Ok(if relu { tape.relu(y)? } else { y })
}

fn deconv2(
    tape: &mut Tape,
    params: &BTreeMap<String, Var>,
    name: &str,
    x: Var,
    stride: usize,
    relu: bool,
) -> Result<Var, CoarseError> {
    let w = lookup(params, &format!("coarse.{name}.w"))?;
    let b = lookup(params, &format!("coarse.{name}.b"))?;
    let y = tape.conv_transpose2d(x, w, b, stride, 1)?;
    Ok(if relu { tape.relu(y)? } else { y })
}

/// Runs the 2D U-Net over a batch of views `[V, 3, H, W]`, producing
/// full-resolution feature maps `[V, C, H, W]`. Skip connections concatenate
/// encoder activations at matching scales; the final layer is linear.
pub fn extract_features(
    tape: &mut Tape,
    params: &BTreeMap<String, Var>,
    images: Var,
) -> Result<Var, CoarseError> {
    let shape = tape.shape(images).to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(CoarseError::BadInput(format!(
            "expected image batch [V,3,H,W], got {shape:?}"
        )));
    }
    let (h, w) = (shape[2], shape[3]);
    if h % FEATURE_DOWNSAMPLE != 0 || w % FEATURE_DOWNSAMPLE != 0 {
        return Err(CoarseError::BadInput(format!(
            "image size {w}x{h}: width and height must be multiples of {FEATURE_DOWNSAMPLE}"
        )));
    }
    let a1 = conv2(tape, params, "feat.c1", images, 1, true)?;
    let a2 = conv2(tape, params, "feat.c2", a1, 1, true)?;
    let a3 = conv2(tape, params, "feat.c3", a2, 2, true)?;
    let a4 = conv2(tape, params, "feat.c4", a3, 1, true)?;
    let a5 = conv2(tape, params, "feat.c5", a4, 2, true)?;
    let a6 = conv2(tape, params, "feat.c6", a5, 1, true)?;
    let b1 = deconv2(tape, params, "feat.d1", a6, 1, true)?;
    let b2 = deconv2(tape, params, "feat.d2", b1, 2, true)?;
    let b2c = tape.concat(&[b2, a4], 1)?;
    let b3 = deconv2(tape, params, "feat.d3", b2c, 1, true)?;
    let b4 = deconv2(tape, params, "feat.d4", b3, 2, true)?;
    let b4c = tape.concat(&[b4, a2], 1)?;
    let b5 = deconv2(tape, params, "feat.d5", b4c, 1, true)?;
    deconv2(tape, params, "feat.d6", b5, 1, false)
}

/// Variance cost volume over the reference camera's fronto-parallel planes.
#[derive(Debug)]
pub struct CostVolume {
    /// `[1, C, D, Hv, Wv]` per-channel population variance across the views
    /// that observe each voxel; unobservable voxels carry the batch max.
    pub volume: Var,
    /// Strictly increasing plane depths, camera frame.
    pub plane_depths: Vec<f64>,
    /// Per voxel (`D*Hv*Wv`), true when at least two views observed it.
    pub valid: Vec<bool>,
    /// `(D, Hv, Wv)`.
    pub dims: (usize, usize, usize),
}

/// Builds the cost volume from full-resolution feature maps `[V, C, H, W]`.
/// Each voxel fetches every view's features where the voxel's plane point
/// projects, then takes the per-channel population variance over the views
/// that see it. Voxels observed by fewer than two views are flagged invalid
/// and filled with the batch-max variance so depth regression avoids them.
pub fn build_cost_volume(
    tape: &mut Tape,
    features: Var,
    cameras: &[Camera],
    reference: usize,
    depth_range: (f64, f64),
    cfg: &CoarseConfig,
) -> Result<CostVolume, CoarseError> {
    let shape = tape.shape(features).to_vec();
    if shape.len() != 4 {
        return Err(CoarseError::BadInput(format!(
            "expected feature batch [V,C,H,W], got {shape:?}"
        )));
    }
    let (views, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if cameras.len() != views {
        return Err(CoarseError::BadInput(format!(
            "{} cameras for {views} feature maps",
            cameras.len()
        )));
    }
    if views < 2 {
        return Err(CoarseError::BadInput(format!(
            "cost volume needs at least 2 views, got {views}"
        )));
    }
    if reference >= views {
        return Err(CoarseError::BadInput(format!(
            "reference index {reference} out of range for {views} views"
        )));
    }
    let d = cfg.num_planes;
    if d < 2 {
        return Err(CoarseError::BadInput(format!(
            "need at least 2 depth planes, got {d}"
        )));
    }
    let (dmin, dmax) = depth_range;
    if !(dmin > 0.0 && dmax > dmin) {
        return Err(CoarseError::BadInput(format!(
            "depth range ({dmin}, {dmax}) must be increasing and positive"
        )));
    }
    let ref_down = cameras[reference].downscaled(cfg.volume_scale)?;
    let (hv, wv) = (h / cfg.volume_scale, w / cfg.volume_scale);
    let plane_depths: Vec<f64> = (0..d)
        .map(|i| dmin + i as f64 * (dmax - dmin) / (d - 1) as f64)
        .collect();
    let spatial = d * hv * wv;

    let mut sampled = Vec::with_capacity(views);
    let mut masks: Vec<Vec<bool>> = Vec::with_capacity(views);
    for (v, cam) in cameras.iter().enumerate() {
        let mut taps: Vec<Vec<(u32, f64)>> = Vec::with_capacity(spatial);
        let mut mask = Vec::with_capacity(spatial);
        for depth in &plane_depths {
            for y in 0..hv {
                for x in 0..wv {
                    let warped = homography_warp(&ref_down, cam, *depth, (x as f64, y as f64))
                        .ok()
                        .and_then(|(u, vv)| bilinear_taps(w, h, u, vv));
                    match warped {
                        Some(t) => {
                            taps.push(t.to_vec());
                            mask.push(true);
                        }
                        None => {
                            taps.push(Vec::new());
                            mask.push(false);
                        }
                    }
                }
            }
        }
        let table = Arc::new(GatherTable::new(h * w, &taps));
        let view_features = tape.slice(features, 0, v, 1)?;
        sampled.push(tape.gather(view_features, table, &[1, c, d, hv, wv])?);
        masks.push(mask);
    }
    let masks = Arc::new(masks);
    let raw = tape.masked_variance(&sampled, masks.clone())?;

    let valid: Vec<bool> = (0..spatial)
        .map(|i| masks.iter().filter(|m| m[i]).count() >= 2)
        .collect();
    let volume = if valid.iter().all(|v| *v) {
        raw
    } else {
        // Unobservable voxels take the largest observed variance so the
        // soft-argmin never prefers them; the fill is a constant, so no
        // gradient flows through it.
        let vals = tape.value(raw).data().to_vec();
        let mut max_var = 0.0f64;
        for ch in 0..c {
            for (i, ok) in valid.iter().enumerate() {
                if *ok {
                    max_var = max_var.max(vals[ch * spatial + i]);
                }
            }
        }
        let mut keep = vec![0.0; c * spatial];
        let mut fill = vec![0.0; c * spatial];
        for ch in 0..c {
            for (i, ok) in valid.iter().enumerate() {
                if *ok {
                    keep[ch * spatial + i] = 1.0;
                } else {
                    fill[ch * spatial + i] = max_var;
                }
            }
        }
        let keep = tape.constant(Tensor::new(&[1, c, d, hv, wv], keep)?)?;
        let fill = tape.constant(Tensor::new(&[1, c, d, hv, wv], fill)?)?;
        let kept = tape.mul(raw, keep)?;
        tape.add(kept, fill)?
    };
    Ok(CostVolume {
        volume,
        plane_depths,
        valid,
        dims: (d, hv, wv),
    })
}

fn conv3(
    tape: &mut Tape,
    params: &BTreeMap<String, Var>,
    name: &str,
    x: Var,
    stride: usize,
    relu: bool,
) -> Result<Var, CoarseError> {
    let w = lookup(params, &format!("coarse.{name}.w"))?;
    let b = lookup(params, &format!("coarse.{name}.b"))?;
    let y = tape.conv3d(x, w, b, stride, 1)?;
    Ok(if relu { tape.relu(y)? } else { y })
}

fn deconv3(
    tape: &mut Tape,
    params: &BTreeMap<String, Var>,
    name: &str,
    x: Var,
    stride: usize,
    relu: bool,
) -> Result<Var, CoarseError> {
    let w = lookup(params, &format!("coarse.{name}.w"))?;
    let b = lookup(params, &format!("coarse.{name}.b"))?;
    let y = tape.conv_transpose3d(x, w, b, stride, 1)?;
    Ok(if relu { tape.relu(y)? } else { y })
}

/// Output of the 3D regularizer: a feature volume for later trilinear
/// sampling and a probability volume over the depth axis.
#[derive(Debug)]
pub struct RegularizedVolume {
    /// `[1, C, D, Hv, Wv]`.
    pub features: Var,
    /// `[1, 1, D, Hv, Wv]`, softmax over the depth axis: sums to 1 per pixel.
    pub prob: Var,
}

/// Runs the 3D U-Net (3 conv + 3 deconv, one stride-2 stage, concat skip)
/// over the cost volume. The head emits C+1 channels: C feature channels and
/// one score channel that a depth-axis softmax turns into probabilities.
pub fn regularize_volume(
    tape: &mut Tape,
    params: &BTreeMap<String, Var>,
    volume: Var,
) -> Result<RegularizedVolume, CoarseError> {
    let shape = tape.shape(volume).to_vec();
    if shape.len() != 5 || shape[0] != 1 {
        return Err(CoarseError::BadInput(format!(
            "expected cost volume [1,C,D,H,W], got {shape:?}"
        )));
    }
    let c = shape[1];
    if shape[2] % 2 != 0 || shape[3] % 2 != 0 || shape[4] % 2 != 0 {
        return Err(CoarseError::BadInput(format!(
            "volume dims {}x{}x{} must be multiples of 2",
            shape[2], shape[3], shape[4]
        )));
    }
    let r1 = conv3(tape, params, "vol.r1", volume, 1, true)?;
    let r2 = conv3(tape, params, "vol.r2", r1, 2, true)?;
    let r3 = conv3(tape, params, "vol.r3", r2, 1, true)?;
    let q1 = deconv3(tape, params, "vol.q1", r3, 2, true)?;
    let q1c = tape.concat(&[q1, r1], 1)?;
    let q2 = deconv3(tape, params, "vol.q2", q1c, 1, true)?;
    let out = deconv3(tape, params, "vol.q3", q2, 1, false)?;
    let features = tape.slice(out, 1, 0, c)?;
    let score = tape.slice(out, 1, c, 1)?;
    let prob = tape.softmax(score, 2)?;
    Ok(RegularizedVolume { features, prob })
}

/// Soft-argmin depth with a window-max confidence.
#[derive(Debug)]
pub struct CoarseDepth {
    /// `[Hv*Wv]`, expectation of plane depth under the probability volume.
    pub depth: Var,
    /// Per pixel, max probability over the 4 planes around the expectation.
    pub confidence: Vec<f64>,
    /// Per pixel, true when at least two planes of its column are valid.
    pub valid: Vec<bool>,
}

/// Regresses depth as the probability-weighted mean of plane depths. The
/// result is a convex combination, so it always lies within the depth range.
pub fn coarse_depth(
    tape: &mut Tape,
    reg: &RegularizedVolume,
    plane_depths: &[f64],
    voxel_valid: &[bool],
) -> Result<CoarseDepth, CoarseError> {
    let shape = tape.shape(reg.prob).to_vec();
    let (d, hv, wv) = (shape[2], shape[3], shape[4]);
    if d != plane_depths.len() {
        return Err(CoarseError::BadInput(format!(
            "{d} planes in volume, {} plane depths",
            plane_depths.len()
        )));
    }
    let px = hv * wv;
    let flat = tape.reshape(reg.prob, &[d, px])?;
    let cols = tape.transpose(flat)?;
    let depths = tape.constant(Tensor::new(&[d, 1], plane_depths.to_vec())?)?;
    let depth2 = tape.matmul(cols, depths)?;
    let depth = tape.reshape(depth2, &[px])?;

    let prob = tape.value(flat).data().to_vec();
    let exp = tape.value(depth).data().to_vec();
    let mut confidence = Vec::with_capacity(px);
    for i in 0..px {
        let nearest = plane_depths
            .iter()
            .enumerate()
            .min_by(|a, b| {
                (a.1 - exp[i]).abs().partial_cmp(&(b.1 - exp[i]).abs()).unwrap()
            })
            .unwrap()
            .0;
        let lo = nearest.saturating_sub(1).min(d.saturating_sub(4));
        let hi = (lo + 4).min(d);
        let mut m = 0.0f64;
        for (j, p) in prob.iter().enumerate().take(hi * px).skip(lo * px) {
            if j % px == i {
                m = m.max(*p);
            }
        }
        confidence.push(m);
    }
    let valid = (0..px)
        .map(|i| (0..d).filter(|k| voxel_valid[k * px + i]).count() >= 2)
        .collect();
    Ok(CoarseDepth {
        depth,
        confidence,
        valid,
    })
}

/// Complete coarse-stage result on plain tensors, for use when the stage is
/// frozen: ray-stage training precompute and inference.
#[derive(Debug)]
pub struct CoarseForward {
    /// `[V, C, H, W]` full-resolution per-view features.
    pub features: Tensor,
    /// `[1, C, D, Hv, Wv]` regularized feature volume.
    pub volume_features: Tensor,
    pub plane_depths: Vec<f64>,
    /// `(D, Hv, Wv)`.
    pub dims: (usize, usize, usize),
    /// Volume-resolution maps, `[Hv*Wv]`.
    pub depth_vol: Vec<f64>,
    pub confidence_vol: Vec<f64>,
    pub valid_vol: Vec<bool>,
    /// Image-resolution maps, `[H*W]`, nearest-upsampled.
    pub depth_full: Vec<f64>,
    pub confidence_full: Vec<f64>,
    pub valid_full: Vec<bool>,
}

/// Runs the whole coarse stage without gradients: features, cost volume,
/// regularization, depth regression, and upsampling to image resolution.
pub fn coarse_forward(
    param_values: &BTreeMap<String, Tensor>,
    cfg: &CoarseConfig,
    images: &Tensor,
    cameras: &[Camera],
    reference: usize,
    depth_range: (f64, f64),
) -> Result<CoarseForward, CoarseError> {
    let mut tape = Tape::new();
    let mut params = BTreeMap::new();
    for (name, t) in param_values {
        if name.starts_with("coarse.") {
            params.insert(name.clone(), tape.leaf(t.clone(), false)?);
        }
    }
    let imgs = tape.leaf(images.clone(), false)?;
    let feats = extract_features(&mut tape, &params, imgs)?;
    let cv = build_cost_volume(&mut tape, feats, cameras, reference, depth_range, cfg)?;
    let reg = regularize_volume(&mut tape, &params, cv.volume)?;
    let cd = coarse_depth(&mut tape, &reg, &cv.plane_depths, &cv.valid)?;
    let (_, hv, wv) = cv.dims;
    let depth_vol = tape.value(cd.depth).data().to_vec();
    let valid_as_f: Vec<f64> = cd.valid.iter().map(|b| f64::from(u8::from(*b))).collect();
    let s = cfg.volume_scale;
    Ok(CoarseForward {
        features: tape.value(feats).clone(),
        volume_features: tape.value(reg.features).clone(),
        plane_depths: cv.plane_depths,
        dims: cv.dims,
        depth_full: upsample_nearest(&depth_vol, hv, wv, s),
        confidence_full: upsample_nearest(&cd.confidence, hv, wv, s),
        valid_full: upsample_nearest(&valid_as_f, hv, wv, s)
            .iter()
            .map(|v| *v > 0.5)
            .collect(),
        depth_vol,
        confidence_vol: cd.confidence,
        valid_vol: cd.valid,
    })
}

/// Nearest-neighbor upsampling of a volume-resolution map to image
/// resolution. Nearest is deliberate: bilinear would blend foreground and
/// background depths across silhouettes.
pub fn upsample_nearest(vals: &[f64], hv: usize, wv: usize, scale: usize) -> Vec<f64> {
    let (h, w) = (hv * scale, wv * scale);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = vals[(y / scale) * wv + x / scale];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::finite_difference_grad;
    use crate::geometry::bilinear_fetch;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn seeded_params(
        tape: &mut Tape,
        cfg: &CoarseConfig,
        seed: u64,
        scale: f64,
    ) -> BTreeMap<String, Var> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut map = BTreeMap::new();
        for (name, shape) in param_specs(cfg) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
            let v = tape
                .leaf(Tensor::new(&shape, data).unwrap(), true)
                .unwrap();
            map.insert(name, v);
        }
        map
    }

    fn zero_params(tape: &mut Tape, cfg: &CoarseConfig) -> BTreeMap<String, Var> {
        let mut map = BTreeMap::new();
        for (name, shape) in param_specs(cfg) {
            let v = tape.leaf(Tensor::zeros(&shape), false).unwrap();
            map.insert(name, v);
        }
        map
    }

    fn small_cfg() -> CoarseConfig {
        CoarseConfig {
            feature_channels: 2,
            widths2d: [2, 3, 4],
            widths3d: [2, 3],
            num_planes: 4,
            volume_scale: 2,
        }
    }

    #[test]
    fn features_keep_image_resolution_with_c_channels() {
        // Full-size check of the published feature-map contract: 640x512
        // in, 640x512x8 out. Zero weights keep it cheap to verify shape.
        let mut tape = Tape::new();
        let cfg = CoarseConfig::default();
        let params = zero_params(&mut tape, &cfg);
        let img = tape
            .leaf(Tensor::zeros(&[1, 3, 512, 640]), false)
            .unwrap();
        let f = extract_features(&mut tape, &params, img).unwrap();
        assert_eq!(tape.shape(f), &[1, 8, 512, 640]);
    }

    #[test]
    fn identical_views_get_identical_features() {
        let mut tape = Tape::new();
        let cfg = small_cfg();
        let params = seeded_params(&mut tape, &cfg, 5, 0.3);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let one: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut two = one.clone();
        two.extend_from_slice(&one);
        let imgs = tape
            .leaf(Tensor::new(&[2, 3, 16, 16], two).unwrap(), false)
            .unwrap();
        let f = extract_features(&mut tape, &params, imgs).unwrap();
        let vals = tape.value(f).data();
        let per = vals.len() / 2;
        assert_eq!(vals[..per], vals[per..]);
    }

    #[test]
    fn zero_params_give_zero_features() {
        let mut tape = Tape::new();
        let cfg = small_cfg();
        let params = zero_params(&mut tape, &cfg);
        let img = tape
            .leaf(Tensor::full(&[1, 3, 8, 8], 0.7), false)
            .unwrap();
        let f = extract_features(&mut tape, &params, img).unwrap();
        assert!(tape.value(f).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn indivisible_image_names_the_required_multiple() {
        let mut tape = Tape::new();
        let cfg = small_cfg();
        let params = zero_params(&mut tape, &cfg);
        let img = tape
            .leaf(Tensor::zeros(&[1, 3, 10, 16]), false)
            .unwrap();
        let err = extract_features(&mut tape, &params, img).unwrap_err();
        assert!(err.to_string().contains("multiples of 4"), "{err}");
    }

    fn ring_cameras(n: usize, w: usize, h: usize) -> Vec<Camera> {
        let cfg = crate::scene::DatasetConfig {
            views: n,
            width: w,
            height: h,
            focal: w as f64 * 1.3,
            ..crate::scene::DatasetConfig::default()
        };
        crate::scene::camera_ring(&cfg).unwrap()
    }

    #[test]
    fn identical_views_have_zero_variance() {
        let mut tape = Tape::new();
        let cfg = small_cfg();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let per: Vec<f64> = (0..2 * 16 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut both = per.clone();
        both.extend_from_slice(&per);
        let feats = tape
            .leaf(Tensor::new(&[2, 2, 16, 16], both).unwrap(), false)
            .unwrap();
        // Same pose twice: every voxel fetches the same features.
        let cam = ring_cameras(3, 16, 16).remove(0);
        let cams = vec![cam.clone(), cam];
        let cv = build_cost_volume(&mut tape, feats, &cams, 0, (600.0, 800.0), &cfg).unwrap();
        for (i, v) in tape.value(cv.volume).data().iter().enumerate() {
            let voxel = i % (cv.dims.0 * cv.dims.1 * cv.dims.2);
            if cv.valid[voxel] {
                assert!(v.abs() < 1e-12, "voxel {i}: {v}");
            }
        }
    }

    #[test]
    fn opposite_features_have_squared_variance() {
        let mut tape = Tape::new();
        let cfg = small_cfg();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let f: Vec<f64> = (0..2 * 16 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut both = f.clone();
        both.extend(f.iter().map(|v| -v));
        let feats = tape
            .leaf(Tensor::new(&[2, 2, 16, 16], both).unwrap(), false)
            .unwrap();
        let cam = ring_cameras(3, 16, 16).remove(0);
        let cams = vec![cam.clone(), cam];
        let cv = build_cost_volume(&mut tape, feats, &cams, 0, (600.0, 800.0), &cfg).unwrap();
        // Volume pixel (x,y) at scale 2 warps to image pixel (2x,2y): the
        // fetch lands on an exact grid point of the identical pose.
        let (d, hv, wv) = cv.dims;
        let vals = tape.value(cv.volume).data();
        for plane in 0..d {
            for y in 0..hv {
                for x in 0..wv {
                    let voxel = (plane * hv + y) * wv + x;
                    if !cv.valid[voxel] {
                        continue;
                    }
                    for ch in 0..2 {
                        let fij = f[ch * 256 + (2 * y) * 16 + 2 * x];
                        let got = vals[ch * d * hv * wv + voxel];
                        assert!(
                            (got - fij * fij).abs() < 1e-12,
                            "ch {ch} voxel {voxel}: {got} vs {}",
                            fij * fij
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn variance_matches_straight_loop_oracle() {
        let mut tape = Tape::new();
        let cfg = small_cfg();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..3 * 2 * 16 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let feats = tape
            .leaf(Tensor::new(&[3, 2, 16, 16], data.clone()).unwrap(), false)
            .unwrap();
        let cams = ring_cameras(3, 16, 16);
        let cv = build_cost_volume(&mut tape, feats, &cams, 0, (620.0, 780.0), &cfg).unwrap();
        let (d, hv, wv) = cv.dims;
        let vals = tape.value(cv.volume).data();
        let ref_down = cams[0].downscaled(2).unwrap();
        for plane in 0..d {
            for y in 0..hv {
                for x in 0..wv {
                    let voxel = (plane * hv + y) * wv + x;
                    // Straight-line refetch: project, bilinear-fetch, take
                    // the population variance over in-view entries.
                    let mut got_views: Vec<Vec<f64>> = Vec::new();
                    for (v, cam) in cams.iter().enumerate() {
                        let Ok((u, vv)) = homography_warp(
                            &ref_down,
                            cam,
                            cv.plane_depths[plane],
                            (x as f64, y as f64),
                        ) else {
                            continue;
                        };
                        let plane_map = &data[v * 2 * 256..(v + 1) * 2 * 256];
                        let (f, inside) = bilinear_fetch(plane_map, 2, 16, 16, u, vv);
                        if inside {
                            got_views.push(f);
                        }
                    }
                    if got_views.len() < 2 {
                        assert!(!cv.valid[voxel]);
                        continue;
                    }
                    assert!(cv.valid[voxel]);
                    for ch in 0..2 {
                        let xs: Vec<f64> = got_views.iter().map(|f| f[ch]).collect();
                        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
                        let var =
                            xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / xs.len() as f64;
                        let got = vals[ch * d * hv * wv + voxel];
                        assert!((got - var).abs() < 1e-10, "voxel {voxel} ch {ch}");
                    }
                }
            }
        }
    }

    #[test]
    fn source_view_order_does_not_change_the_volume() {
        let cfg = small_cfg();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let data: Vec<f64> = (0..3 * 2 * 16 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cams = ring_cameras(3, 16, 16);
        let run = |order: [usize; 2], tape: &mut Tape| {
            let mut arranged = data[..2 * 256].to_vec();
            for v in order {
                arranged.extend_from_slice(&data[v * 2 * 256..(v + 1) * 2 * 256]);
            }
            let feats = tape
                .leaf(Tensor::new(&[3, 2, 16, 16], arranged).unwrap(), false)
                .unwrap();
            let cams_ord = vec![cams[0].clone(), cams[order[0]].clone(), cams[order[1]].clone()];
            let cv = build_cost_volume(tape, feats, &cams_ord, 0, (620.0, 780.0), &cfg).unwrap();
            tape.value(cv.volume).data().to_vec()
        };
        let mut t1 = Tape::new();
        let a = run([1, 2], &mut t1);
        let mut t2 = Tape::new();
        let b = run([2, 1], &mut t2);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn probabilities_sum_to_one_per_pixel() {
        let mut tape = Tape::new();
        let cfg = small_cfg();
        let params = seeded_params(&mut tape, &cfg, 7, 0.2);
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let vol: Vec<f64> = (0..2 * 4 * 4 * 4).map(|_| rng.gen_range(0.0..1.0)).collect();
        let v = tape
            .leaf(Tensor::new(&[1, 2, 4, 4, 4], vol).unwrap(), false)
            .unwrap();
        let reg = regularize_volume(&mut tape, &params, v).unwrap();
        assert_eq!(tape.shape(reg.features), &[1, 2, 4, 4, 4]);
        let p = tape.value(reg.prob).data();
        for px in 0..16 {
            let s: f64 = (0..4).map(|d| p[d * 16 + px]).sum();
            assert!((s - 1.0).abs() < 1e-5, "pixel {px}: {s}");
        }
    }

    #[test]
    fn zero_net_gives_uniform_probabilities() {
        let mut tape = Tape::new();
        let cfg = small_cfg();
        let params = zero_params(&mut tape, &cfg);
        let v = tape
            .leaf(Tensor::full(&[1, 2, 4, 4, 4], 0.3), false)
            .unwrap();
        let reg = regularize_volume(&mut tape, &params, v).unwrap();
        for p in tape.value(reg.prob).data() {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn regularizer_gradients_match_finite_differences() {
        let cfg = small_cfg();
        let specs = param_specs(&cfg);
        let vol_specs: Vec<(String, Vec<usize>)> = specs
            .into_iter()
            .filter(|(n, _)| n.starts_with("coarse.vol."))
            .collect();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let inputs: Vec<Tensor> = vol_specs
            .iter()
            .map(|(_, s)| {
                let n: usize = s.iter().product();
                Tensor::new(s, (0..n).map(|_| rng.gen_range(-0.4..0.4)).collect()).unwrap()
            })
            .collect();
        let volume: Vec<f64> = (0..2 * 4 * 4 * 4).map(|_| rng.gen_range(0.0..1.0)).collect();
        let pick_f: Vec<f64> = (0..2 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pick_p: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let build = |tensors: &[Tensor]| -> Result<(Tape, Var, Vec<Var>), DiffError> {
            let mut tape = Tape::new();
            let mut params = BTreeMap::new();
            let mut vars = Vec::new();
            for ((name, _), t) in vol_specs.iter().zip(tensors) {
                let v = tape.leaf(t.clone(), true)?;
                params.insert(name.clone(), v);
                vars.push(v);
            }
            let v = tape.leaf(Tensor::new(&[1, 2, 4, 4, 4], volume.clone())?, false)?;
            let reg = regularize_volume(&mut tape, &params, v).expect("forward");
            let cf = tape.constant(Tensor::new(&[1, 2, 4, 4, 4], pick_f.clone())?)?;
            let cp = tape.constant(Tensor::new(&[1, 1, 4, 4, 4], pick_p.clone())?)?;
            let a = tape.mul(reg.features, cf)?;
            let b = tape.mul(reg.prob, cp)?;
            let sa = tape.sum_all(a)?;
            let sb = tape.sum_all(b)?;
            let loss = tape.add(sa, sb)?;
            Ok((tape, loss, vars))
        };

        let (tape, loss, vars) = build(&inputs).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut f = |ts: &[Tensor]| -> Result<f64, DiffError> {
            let (tape, loss, _) = build(ts)?;
            Ok(tape.value(loss).item())
        };
        let numeric = finite_difference_grad(&mut f, &inputs, 1e-5).unwrap();
        for ((v, num), (name, _)) in vars.iter().zip(&numeric).zip(&vol_specs) {
            let ana = grads.tensor(*v);
            let err = crate::diff::max_rel_err(
                std::slice::from_ref(&ana),
                std::slice::from_ref(num),
            );
            assert!(err < 1e-4, "{name}: rel err {err}");
        }
    }

    #[test]
    fn soft_argmin_picks_the_one_hot_plane() {
        let mut tape = Tape::new();
        let mut p = vec![0.0; 4 * 4];
        for px in 0..4 {
            p[2 * 4 + px] = 1.0; // all mass on plane 2
        }
        let prob = tape
            .leaf(Tensor::new(&[1, 1, 4, 2, 2], p).unwrap(), false)
            .unwrap();
        let reg = RegularizedVolume {
            features: prob,
            prob,
        };
        let depths = [400.0, 550.0, 700.0, 850.0];
        let out = coarse_depth(&mut tape, &reg, &depths, &vec![true; 16]).unwrap();
        for d in tape.value(out.depth).data() {
            assert_eq!(*d, 700.0);
        }
        assert!(out.confidence.iter().all(|c| (c - 1.0).abs() < 1e-12));
    }

    #[test]
    fn uniform_probability_regresses_the_mean() {
        let mut tape = Tape::new();
        let d = 6;
        let prob = tape
            .leaf(Tensor::full(&[1, 1, d, 2, 2], 1.0 / d as f64), false)
            .unwrap();
        let reg = RegularizedVolume {
            features: prob,
            prob,
        };
        let depths: Vec<f64> = (0..d).map(|i| 400.0 + i as f64 * 100.0).collect();
        let out = coarse_depth(&mut tape, &reg, &depths, &vec![true; d * 4]).unwrap();
        for v in tape.value(out.depth).data() {
            assert!((v - 650.0).abs() < 1e-10);
        }
    }

    #[test]
    fn soft_argmin_matches_dot_product_oracle_and_stays_in_range() {
        let mut tape = Tape::new();
        let d = 5;
        let px = 9;
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let mut p = vec![0.0; d * px];
        for i in 0..px {
            let mut col: Vec<f64> = (0..d).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = col.iter().sum();
            col.iter_mut().for_each(|v| *v /= s);
            for (k, v) in col.iter().enumerate() {
                p[k * px + i] = *v;
            }
        }
        let prob = tape
            .leaf(Tensor::new(&[1, 1, d, 3, 3], p.clone()).unwrap(), false)
            .unwrap();
        let reg = RegularizedVolume {
            features: prob,
            prob,
        };
        let depths: Vec<f64> = (0..d).map(|i| 500.0 + i as f64 * 80.0).collect();
        let out = coarse_depth(&mut tape, &reg, &depths, &vec![true; d * px]).unwrap();
        let got = tape.value(out.depth).data();
        for i in 0..px {
            let want: f64 = (0..d).map(|k| p[k * px + i] * depths[k]).sum();
            assert!((got[i] - want).abs() < 1e-10);
            assert!(got[i] >= 500.0 && got[i] <= 820.0);
        }
    }

    #[test]
    fn upsample_nearest_replicates_blocks() {
        let vals = vec![1.0, 2.0, 3.0, 4.0];
        let up = upsample_nearest(&vals, 2, 2, 2);
        assert_eq!(up, vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]);
    }
}
