//! Training: the multi-task loss (SDF sequence, crossing location, sign
//! consistency), Adam with a stepped learning-rate decay, named-tensor
//! checkpoints, parameter initialization, and the two-phase loop (coarse
//! depth first, then the ray stage against the frozen coarse outputs).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::coarse::{self, CoarseConfig};
use crate::diff::{DiffError, Tape, Tensor, Var};
use crate::geometry::{pixel_ray, sample_hypotheses, GeomError};
use crate::raynet::{self, RayNetConfig, RaySpec};
use crate::scene::{gt_ray_labels, LoadedScene, SceneError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training: {0}")]
    BadConfig(String),
    #[error("non-finite gradient in tensor {0:?}")]
    NonFiniteGrad(String),
    #[error("loss diverged (non-finite) in phase {phase}, epoch {epoch}")]
    Diverged { phase: u8, epoch: usize },
    #[error("checkpoint {path}: {msg} at byte {offset}")]
    BadCheckpoint {
        path: String,
        offset: u64,
        msg: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Coarse(#[from] coarse::CoarseError),
    #[error(transparent)]
    Ray(#[from] raynet::RayNetError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// Weights of the three loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub sdf: f64,
    pub location: f64,
    pub consistency: f64,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights {
            sdf: 0.1,
            location: 0.8,
            consistency: 0.1,
        }
    }
}

/// Evaluated loss terms of one batch or epoch. `consistency` is the hinge
/// surrogate that actually trains; `indicator` is the 0/1 sign-agreement
/// rate reported as the metric.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub sdf: f64,
    pub location: f64,
    pub consistency: f64,
    pub indicator: f64,
    pub total: f64,
}

/// SDF sequence loss: per ray the sum (not mean) of absolute differences
/// over the K samples, averaged over the rays of the batch. Inputs `[R, K]`.
pub fn loss_sdf(tape: &mut Tape, pred: Var, label: Var) -> Result<Var, TrainError> {
    let shape = tape.shape(pred).to_vec();
    if shape != tape.shape(label) {
        return Err(TrainError::BadConfig(format!(
            "sdf loss shapes differ: {:?} vs {:?}",
            shape,
            tape.shape(label)
        )));
    }
    let rays = shape[0];
    let d = tape.sub(pred, label)?;
    let a = tape.abs(d)?;
    let s = tape.sum_all(a)?;
    Ok(tape.scale(s, 1.0 / rays as f64)?)
}

/// Location loss: mean absolute difference over the rays selected by `mask`
/// (rays whose true surface lies inside the hypothesis window). Inputs `[R]`.
pub fn loss_loc(tape: &mut Tape, pred: Var, label: Var, mask: &[bool]) -> Result<Var, TrainError> {
    let rays = tape.shape(pred)[0];
    if rays != mask.len() {
        return Err(TrainError::BadConfig(format!(
            "location loss: {rays} predictions, {} mask entries",
            mask.len()
        )));
    }
    let count = mask.iter().filter(|m| **m).count().max(1);
    let mvals: Vec<f64> = mask.iter().map(|m| f64::from(u8::from(*m))).collect();
    let m = tape.constant(Tensor::new(&[rays], mvals)?)?;
    let d = tape.sub(pred, label)?;
    let a = tape.abs(d)?;
    let ma = tape.mul(a, m)?;
    let s = tape.sum_all(ma)?;
    Ok(tape.scale(s, 1.0 / count as f64)?)
}

/// The two sample indices (0-based) bracketing a predicted location l in
/// [0, 1] on a K-sample window.
pub fn bracket_indices(l: f64, k: usize) -> (usize, usize) {
    let pos = l.clamp(0.0, 1.0) * (k - 1) as f64;
    (pos.floor() as usize, pos.ceil() as usize)
}

/// Sign-consistency term at the predicted crossing. For each active ray the
/// two predicted SDFs bracketing its predicted location should straddle
/// zero. Returns the differentiable hinge surrogate mean(max(0, s_a*s_b))
/// and the 0/1 indicator rate (1 when the product is strictly positive),
/// both over the active rays. The bracketing index choice is made from
/// values and carries no gradient.
pub fn loss_consistency(
    tape: &mut Tape,
    sdf_pred: Var,
    locations: &[f64],
    active: &[bool],
) -> Result<(Var, f64), TrainError> {
    let shape = tape.shape(sdf_pred).to_vec();
    let (rays, k) = (shape[0], shape[1]);
    if rays != locations.len() || rays != active.len() {
        return Err(TrainError::BadConfig(format!(
            "consistency loss: {rays} rays, {} locations, {} flags",
            locations.len(),
            active.len()
        )));
    }
    let count = active.iter().filter(|m| **m).count();
    if count == 0 {
        let zero = tape.constant(Tensor::scalar(0.0))?;
        return Ok((zero, 0.0));
    }
    let mut sel_a = vec![0.0; rays * k];
    let mut sel_b = vec![0.0; rays * k];
    let vals = tape.value(sdf_pred).data().to_vec();
    let mut hits = 0usize;
    for r in 0..rays {
        if !active[r] {
            continue;
        }
        let (a, b) = bracket_indices(locations[r], k);
        sel_a[r * k + a] = 1.0;
        sel_b[r * k + b] = 1.0;
        if vals[r * k + a] * vals[r * k + b] > 0.0 {
            hits += 1;
        }
    }
    let sa = tape.constant(Tensor::new(&[rays, k], sel_a)?)?;
    let sb = tape.constant(Tensor::new(&[rays, k], sel_b)?)?;
    let pa0 = tape.mul(sdf_pred, sa)?;
    let pa = tape.reduce(pa0, 1, crate::diff::ReduceKind::Sum)?;
    let pb0 = tape.mul(sdf_pred, sb)?;
    let pb = tape.reduce(pb0, 1, crate::diff::ReduceKind::Sum)?;
    let prod = tape.mul(pa, pb)?;
    let hinge = tape.relu(prod)?;
    let s = tape.sum_all(hinge)?;
    let surrogate = tape.scale(s, 1.0 / count as f64)?;
    Ok((surrogate, hits as f64 / count as f64))
}

/// Weighted sum of the three terms.
pub fn total_loss(
    tape: &mut Tape,
    sdf: Var,
    location: Var,
    consistency: Var,
    w: &LossWeights,
) -> Result<Var, TrainError> {
    let a = tape.scale(sdf, w.sdf)?;
    let b = tape.scale(location, w.location)?;
    let c = tape.scale(consistency, w.consistency)?;
    let ab = tape.add(a, b)?;
    Ok(tape.add(ab, c)?)
}

/// Stepped decay: the rate is multiplied by `decay` once per `every` epochs,
/// with `epoch` counted from 0.
pub fn lr_at(base: f64, decay: f64, every: usize, epoch: usize) -> f64 {
    base * decay.powi((epoch / every.max(1)) as i32)
}

/// Adam with bias correction. Moments are tracked per named tensor; the step
/// count is shared. A non-finite gradient aborts the whole step (no tensor
/// is touched) and names the offender.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    t: u64,
}

impl Default for Adam {
    fn default() -> Adam {
        Adam::new()
    }
}

impl Adam {
    pub fn new() -> Adam {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Applies one update to every tensor named in `grads`.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<(), TrainError> {
        for (name, g) in grads {
            if !params.contains_key(name) {
                return Err(TrainError::BadConfig(format!(
                    "gradient for unknown tensor {name:?}"
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFiniteGrad(name.clone()));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let shape = p.shape().to_vec();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(&shape));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(&shape));
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * g[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Initializes one named tensor: LayerNorm gains at 1, biases at 0, weights
/// uniform in +-1/sqrt(fan_in). Each tensor gets its own generator seeded
/// from the run seed and its name, so the result does not depend on
/// initialization order.
pub fn init_tensor(name: &str, shape: &[usize], seed: u64) -> Tensor {
    if shape.len() == 1 {
        return if name.ends_with(".g") {
            Tensor::full(shape, 1.0)
        } else {
            Tensor::zeros(shape)
        };
    }
    let kernel: usize = shape[2..].iter().product::<usize>().max(1);
    // Deconv weights are [in, out, k...]; conv weights [out, in, k...]. The
    // layer letter before the trailing digit tells them apart ('d'/'q').
    let stem = name.strip_suffix(".w").unwrap_or(name);
    let letter = stem.as_bytes()[stem.len().saturating_sub(2)];
    let fan_in = match shape.len() {
        2 => shape[0],
        _ if letter == b'd' || letter == b'q' => shape[0] * kernel,
        _ => shape[1] * kernel,
    };
    let a = 1.0 / (fan_in as f64).sqrt();
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ fnv1a64(name));
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(shape, data).expect("init shape")
}

/// Initializes every tensor of both stages.
pub fn init_params(
    coarse_cfg: &CoarseConfig,
    ray_cfg: &RayNetConfig,
    seed: u64,
) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    for (name, shape) in coarse::param_specs(coarse_cfg)
        .into_iter()
        .chain(raynet::param_specs(ray_cfg))
    {
        out.insert(name.clone(), init_tensor(&name, &shape, seed));
    }
    out
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"RMVS";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes named tensors: magic "RMVS", version, entry count, then per entry
/// name length + UTF-8 name, rank, extents, float32 little-endian payload.
pub fn save_checkpoint(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<(), TrainError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for e in t.shape() {
            buf.extend_from_slice(&(*e as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Reads a checkpoint back. Malformed files name the byte offset at which
/// parsing failed.
pub fn load_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor>, TrainError> {
    let bytes = fs::read(path)?;
    let err = |offset: usize, msg: &str| TrainError::BadCheckpoint {
        path: path.display().to_string(),
        offset: offset as u64,
        msg: msg.to_string(),
    };
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8], TrainError> {
        if *at + n > bytes.len() {
            return Err(err(*at, "truncated"));
        }
        let s = &bytes[*at..*at + n];
        *at += n;
        Ok(s)
    };
    if take(&mut at, 4)? != CHECKPOINT_MAGIC {
        return Err(err(0, "bad magic, expected RMVS"));
    }
    let u32_at = |at: &mut usize| -> Result<u32, TrainError> {
        let b = take(at, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };
    let version = u32_at(&mut at)?;
    if version != CHECKPOINT_VERSION {
        return Err(err(4, "unsupported version"));
    }
    let count = u32_at(&mut at)? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = u32_at(&mut at)? as usize;
        let name_at = at;
        let name = std::str::from_utf8(take(&mut at, name_len)?)
            .map_err(|_| err(name_at, "name is not UTF-8"))?
            .to_string();
        let rank = u32_at(&mut at)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_at(&mut at)? as usize);
        }
        let n: usize = shape.iter().product();
        let payload_at = at;
        let payload = take(&mut at, n * 4)?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|_| err(payload_at, "bad tensor shape"))?;
        if out.insert(name.clone(), t).is_some() {
            return Err(err(name_at, "duplicate tensor name"));
        }
    }
    if at != bytes.len() {
        return Err(err(at, "trailing bytes"));
    }
    Ok(out)
}

/// Everything the optimizer owns: model tensors plus Adam state. Checkpoints
/// hold both, with moments stored under "adam.m."/"adam.v." prefixes and the
/// step count under "adam.step".
pub struct TrainState {
    pub params: BTreeMap<String, Tensor>,
    pub adam: Adam,
}

impl TrainState {
    pub fn new(coarse_cfg: &CoarseConfig, ray_cfg: &RayNetConfig, seed: u64) -> TrainState {
        TrainState {
            params: init_params(coarse_cfg, ray_cfg, seed),
            adam: Adam::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut all = self.params.clone();
        for (name, t) in &self.adam.m {
            all.insert(format!("adam.m.{name}"), t.clone());
        }
        for (name, t) in &self.adam.v {
            all.insert(format!("adam.v.{name}"), t.clone());
        }
        all.insert("adam.step".into(), Tensor::new(&[1], vec![self.adam.t as f64])?);
        save_checkpoint(path, &all)
    }

    pub fn load(path: &Path) -> Result<TrainState, TrainError> {
        let all = load_checkpoint(path)?;
        let mut params = BTreeMap::new();
        let mut adam = Adam::new();
        for (name, t) in all {
            if let Some(rest) = name.strip_prefix("adam.m.") {
                adam.m.insert(rest.to_string(), t);
            } else if let Some(rest) = name.strip_prefix("adam.v.") {
                adam.v.insert(rest.to_string(), t);
            } else if name == "adam.step" {
                adam.t = t.data()[0] as u64;
            } else {
                params.insert(name, t);
            }
        }
        Ok(TrainState { params, adam })
    }
}

/// Knobs of the two-phase loop.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplied into the rate once per `decay_every` epochs.
    pub decay: f64,
    pub decay_every: usize,
    pub weights: LossWeights,
    pub epochs_coarse: usize,
    pub epochs_ray: usize,
    /// Rays sampled per (scene, reference view) per epoch in phase 2.
    pub rays_per_view: usize,
    /// Rays per optimizer step.
    pub ray_batch: usize,
    /// Samples per ray window (K).
    pub samples_per_ray: usize,
    /// Hypothesis half-window in scene units.
    pub delta: f64,
    pub seed: u64,
    /// Gaussian noise added to the coarse depth before ray sampling, scene
    /// units; exercises robustness to a degraded coarse stage.
    pub coarse_noise_std: f64,
    /// When set, phase 2 also updates the coarse stage through the feature
    /// and volume paths instead of freezing it.
    pub joint_finetune: bool,
    /// Extra checkpoint files every this many epochs (0: only the rolling
    /// per-epoch checkpoint).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.0005,
            decay: 0.9,
            decay_every: 2,
            weights: LossWeights::default(),
            epochs_coarse: 24,
            epochs_ray: 48,
            rays_per_view: 256,
            ray_batch: 64,
            samples_per_ray: 16,
            delta: 20.0,
            seed: 1,
            coarse_noise_std: 0.0,
            joint_finetune: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::BadConfig(msg));
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("decay must be in (0, 1], got {}", self.decay));
        }
        if self.decay_every == 0 {
            return bad("decay_every must be at least 1".into());
        }
        if self.samples_per_ray < 2 {
            return bad(format!("samples_per_ray must be at least 2, got {}", self.samples_per_ray));
        }
        if !(self.delta > 0.0) {
            return bad(format!("delta must be positive, got {}", self.delta));
        }
        if self.rays_per_view == 0 || self.ray_batch == 0 {
            return bad("rays_per_view and ray_batch must be positive".into());
        }
        if !(self.coarse_noise_std >= 0.0 && self.coarse_noise_std.is_finite()) {
            return bad(format!("coarse_noise_std must be finite and nonnegative, got {}", self.coarse_noise_std));
        }
        Ok(())
    }
}

/// Result of a training run: the final state plus where the artifacts went.
pub struct TrainOutcome {
    pub state: TrainState,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    /// Mean coarse depth L1 of the last phase-1 epoch, scene units.
    pub coarse_l1: Option<f64>,
    /// Mean loss terms of the last phase-2 epoch.
    pub ray_terms: Option<LossTerms>,
}

fn randn(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn collect_grads(
    grads: &crate::diff::Gradients,
    vars: &BTreeMap<String, Var>,
    params: &BTreeMap<String, Tensor>,
) -> BTreeMap<String, Vec<f64>> {
    let mut out = BTreeMap::new();
    for (name, var) in vars {
        let g = grads
            .wrt(*var)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; params[name].data().len()]);
        out.insert(name.clone(), g);
    }
    out
}

fn images_tensor(scene: &LoadedScene) -> Result<Tensor, TrainError> {
    let (w, h) = scene.meta.image_size;
    let v = scene.meta.views;
    let mut data = Vec::with_capacity(v * 3 * h * w);
    for img in &scene.images {
        data.extend_from_slice(img);
    }
    Ok(Tensor::new(&[v, 3, h, w], data)?)
}

/// One phase-1 step: masked L1 between the regressed coarse depth and the
/// ground-truth depth point-sampled to volume resolution. Returns the loss.
fn coarse_step(
    scene: &LoadedScene,
    reference: usize,
    state: &mut TrainState,
    coarse_cfg: &CoarseConfig,
    lr: f64,
) -> Result<f64, TrainError> {
    let (w, _h) = scene.meta.image_size;
    let mut tape = Tape::new();
    let mut vars = BTreeMap::new();
    for (name, t) in &state.params {
        if name.starts_with("coarse.") {
            vars.insert(name.clone(), tape.leaf(t.clone(), true)?);
        }
    }
    let images = tape.leaf(images_tensor(scene)?, false)?;
    let feats = coarse::extract_features(&mut tape, &vars, images)?;
    let cv = coarse::build_cost_volume(
        &mut tape,
        feats,
        &scene.cameras,
        reference,
        scene.meta.depth_range,
        coarse_cfg,
    )?;
    let reg = coarse::regularize_volume(&mut tape, &vars, cv.volume)?;
    let cd = coarse::coarse_depth(&mut tape, &reg, &cv.plane_depths, &cv.valid)?;
    let (_, hv, wv) = cv.dims;
    let s = coarse_cfg.volume_scale;
    // Ground truth at volume resolution: mean of the hit depths inside each
    // s-by-s block, so sparse foreground still supervises its block.
    let gt_full = &scene.depths[reference];
    let mut gt = vec![0.0; hv * wv];
    let mut mask = vec![0.0; hv * wv];
    let mut count = 0usize;
    for y in 0..hv {
        for x in 0..wv {
            let mut sum = 0.0;
            let mut hits = 0usize;
            for dy in 0..s {
                for dx in 0..s {
                    let g = gt_full[(y * s + dy) * w + x * s + dx];
                    if g > 0.0 {
                        sum += g;
                        hits += 1;
                    }
                }
            }
            if hits > 0 && cd.valid[y * wv + x] {
                gt[y * wv + x] = sum / hits as f64;
                mask[y * wv + x] = 1.0;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(TrainError::BadConfig(format!(
            "view {reference}: no pixel has both ground truth and a valid volume column"
        )));
    }
    let gt_c = tape.constant(Tensor::new(&[hv * wv], gt)?)?;
    let m_c = tape.constant(Tensor::new(&[hv * wv], mask)?)?;
    let d = tape.sub(cd.depth, gt_c)?;
    let a = tape.abs(d)?;
    let ma = tape.mul(a, m_c)?;
    let sm = tape.sum_all(ma)?;
    let loss = tape.scale(sm, 1.0 / count as f64)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = tape.backward(loss)?;
    let gmap = collect_grads(&grads, &vars, &state.params);
    state.adam.step(&mut state.params, &gmap, lr)?;
    Ok(value)
}

struct RayBatchData {
    specs: Vec<RaySpec>,
    label_sdf: Tensor,
    label_loc: Tensor,
    in_range: Vec<bool>,
}

/// Samples a deterministic set of rays for one (scene, reference, epoch)
/// visit and evaluates their exact labels against the noisy coarse depth.
fn sample_ray_batches(
    scene: &LoadedScene,
    reference: usize,
    coarse_full: &[f64],
    valid_full: &[bool],
    cfg: &TrainConfig,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<RayBatchData>, TrainError> {
    let (w, _h) = scene.meta.image_size;
    let cam = &scene.cameras[reference];
    let k = cfg.samples_per_ray;
    let trace_cap = 4.0 * scene.meta.depth_range.1;
    let mut candidates: Vec<usize> = (0..coarse_full.len()).filter(|i| valid_full[*i]).collect();
    if candidates.is_empty() {
        return Err(TrainError::BadConfig(format!(
            "view {reference}: coarse stage left no valid pixel to sample rays from"
        )));
    }
    candidates.shuffle(rng);
    candidates.truncate(cfg.rays_per_view);
    let mut out = Vec::new();
    for chunk in candidates.chunks(cfg.ray_batch) {
        let mut specs = Vec::with_capacity(chunk.len());
        let mut sdf = Vec::with_capacity(chunk.len() * k);
        let mut loc = Vec::with_capacity(chunk.len());
        let mut in_range = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let pixel = ((i % w) as f64, (i / w) as f64);
            let noisy = coarse_full[i] + cfg.coarse_noise_std * randn(rng);
            let ray = pixel_ray(cam, pixel)?;
            let sampling = sample_hypotheses(&ray, noisy, cfg.delta, k)?;
            let labels = gt_ray_labels(&scene.meta.scene, &ray, &sampling, trace_cap)?;
            sdf.extend_from_slice(&labels.sdf);
            loc.push(labels.location);
            in_range.push(labels.in_range);
            specs.push(RaySpec { pixel, sampling });
        }
        let rays = specs.len();
        out.push(RayBatchData {
            specs,
            label_sdf: Tensor::new(&[rays, k], sdf)?,
            label_loc: Tensor::new(&[rays], loc)?,
            in_range,
        });
    }
    Ok(out)
}

/// One phase-2 step against precomputed frozen features. Returns the terms.
#[allow(clippy::too_many_arguments)]
fn ray_step_frozen(
    batch: &RayBatchData,
    frozen: &coarse::CoarseForward,
    scene: &LoadedScene,
    state: &mut TrainState,
    ray_cfg: &RayNetConfig,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<LossTerms, TrainError> {
    let (w, h) = scene.meta.image_size;
    let mut tape = Tape::new();
    let mut vars = BTreeMap::new();
    for (name, t) in &state.params {
        if name.starts_with("ray.") {
            vars.insert(name.clone(), tape.leaf(t.clone(), true)?);
        }
    }
    let features = tape.leaf(frozen.features.clone(), false)?;
    let volume = tape.leaf(frozen.volume_features.clone(), false)?;
    let geom = raynet::batch_geometry(
        &batch.specs,
        &scene.cameras,
        (h, w),
        frozen.dims,
        scene.meta.depth_range,
        4,
        ray_cfg.hidden,
    );
    // The volume is indexed by plane coordinate, so its scale/range must be
    // the cost volume's own.
    let geom = match geom {
        Ok(g) => g,
        Err(e) => return Err(e.into()),
    };
    let out = raynet::run_ray_batch(&mut tape, &vars, ray_cfg, features, volume, &geom)?;
    let label_sdf = tape.constant(batch.label_sdf.clone())?;
    let label_loc = tape.constant(batch.label_loc.clone())?;
    let ls = loss_sdf(&mut tape, out.sdf, label_sdf)?;
    let ll = loss_loc(&mut tape, out.location, label_loc, &batch.in_range)?;
    let loc_vals = tape.value(out.location).data().to_vec();
    let (lsl, indicator) = loss_consistency(&mut tape, out.sdf, &loc_vals, &batch.in_range)?;
    let total = total_loss(&mut tape, ls, ll, lsl, &cfg.weights)?;
    let terms = LossTerms {
        sdf: tape.value(ls).item(),
        location: tape.value(ll).item(),
        consistency: tape.value(lsl).item(),
        indicator,
        total: tape.value(total).item(),
    };
    if !terms.total.is_finite() {
        return Ok(terms);
    }
    let grads = tape.backward(total)?;
    let gmap = collect_grads(&grads, &vars, &state.params);
    state.adam.step(&mut state.params, &gmap, lr)?;
    Ok(terms)
}

/// One phase-2 step with the coarse stage on the same tape, so gradients
/// reach it through the feature maps and the feature volume. Ray sampling
/// still reads the current coarse depth as a plain value.
#[allow(clippy::too_many_arguments)]
fn ray_step_joint(
    scene: &LoadedScene,
    reference: usize,
    state: &mut TrainState,
    coarse_cfg: &CoarseConfig,
    ray_cfg: &RayNetConfig,
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut ChaCha20Rng,
) -> Result<LossTerms, TrainError> {
    let (w, h) = scene.meta.image_size;
    let mut tape = Tape::new();
    let mut vars = BTreeMap::new();
    for (name, t) in &state.params {
        vars.insert(name.clone(), tape.leaf(t.clone(), true)?);
    }
    let images = tape.leaf(images_tensor(scene)?, false)?;
    let feats = coarse::extract_features(&mut tape, &vars, images)?;
    let cv = coarse::build_cost_volume(
        &mut tape,
        feats,
        &scene.cameras,
        reference,
        scene.meta.depth_range,
        coarse_cfg,
    )?;
    let reg = coarse::regularize_volume(&mut tape, &vars, cv.volume)?;
    let cd = coarse::coarse_depth(&mut tape, &reg, &cv.plane_depths, &cv.valid)?;
    let (_, hv, wv) = cv.dims;
    let s = coarse_cfg.volume_scale;
    let depth_vol = tape.value(cd.depth).data().to_vec();
    let coarse_full = coarse::upsample_nearest(&depth_vol, hv, wv, s);
    let valid_vol: Vec<f64> = cd.valid.iter().map(|b| f64::from(u8::from(*b))).collect();
    let valid_full: Vec<bool> = coarse::upsample_nearest(&valid_vol, hv, wv, s)
        .iter()
        .map(|v| *v > 0.5)
        .collect();
    let mut batches = sample_ray_batches(scene, reference, &coarse_full, &valid_full, cfg, rng)?;
    batches.truncate(1);
    let batch = &batches[0];
    let geom = raynet::batch_geometry(
        &batch.specs,
        &scene.cameras,
        (h, w),
        cv.dims,
        scene.meta.depth_range,
        coarse_cfg.volume_scale,
        ray_cfg.hidden,
    )?;
    let out = raynet::run_ray_batch(&mut tape, &vars, ray_cfg, feats, reg.features, &geom)?;
    let label_sdf = tape.constant(batch.label_sdf.clone())?;
    let label_loc = tape.constant(batch.label_loc.clone())?;
    let ls = loss_sdf(&mut tape, out.sdf, label_sdf)?;
    let ll = loss_loc(&mut tape, out.location, label_loc, &batch.in_range)?;
    let loc_vals = tape.value(out.location).data().to_vec();
    let (lsl, indicator) = loss_consistency(&mut tape, out.sdf, &loc_vals, &batch.in_range)?;
    let total = total_loss(&mut tape, ls, ll, lsl, &cfg.weights)?;
    let terms = LossTerms {
        sdf: tape.value(ls).item(),
        location: tape.value(ll).item(),
        consistency: tape.value(lsl).item(),
        indicator,
        total: tape.value(total).item(),
    };
    if !terms.total.is_finite() {
        return Ok(terms);
    }
    let grads = tape.backward(total)?;
    let gmap = collect_grads(&grads, &vars, &state.params);
    state.adam.step(&mut state.params, &gmap, lr)?;
    Ok(terms)
}

fn stream_seed(base: u64, tag: &str, parts: &[usize]) -> u64 {
    let mut s = format!("{tag}:{base}");
    for p in parts {
        let _ = write!(s, ":{p}");
    }
    fnv1a64(&s)
}

/// Two-phase training over a set of scenes. Phase 1 fits the coarse stage
/// with a masked depth L1; phase 2 trains the ray stage on rays sampled
/// around the (frozen or jointly tuned) coarse depth. Writes a rolling
/// checkpoint after every epoch and one metrics line per epoch; halts with
/// the previous checkpoint intact if the loss stops being finite.
pub fn train(
    scenes: &[LoadedScene],
    coarse_cfg: &CoarseConfig,
    ray_cfg: &RayNetConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(TrainError::BadConfig("no scenes to train on".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut state = match resume {
        Some(p) => TrainState::load(p)?,
        None => TrainState::new(coarse_cfg, ray_cfg, cfg.seed),
    };
    let ckpt = out_dir.join("checkpoint.rmvs");
    let log_path = out_dir.join("metrics.log");
    let mut log = fs::File::create(&log_path)?;
    state.save(&ckpt)?;

    let mut coarse_l1 = None;
    for epoch in 0..cfg.epochs_coarse {
        let lr = lr_at(cfg.learning_rate, cfg.decay, cfg.decay_every, epoch);
        let mut sum = 0.0;
        let mut steps = 0usize;
        for scene in scenes {
            for reference in 0..scene.meta.views {
                match classify_step(coarse_step(scene, reference, &mut state, coarse_cfg, lr))? {
                    StepOutcome::Keep(l1) if l1.is_finite() => {
                        sum += l1;
                        steps += 1;
                    }
                    StepOutcome::Keep(_) | StepOutcome::Diverged => {
                        return Err(TrainError::Diverged { phase: 1, epoch });
                    }
                    StepOutcome::Skipped(name) => {
                        writeln!(log, "phase=1 epoch={} skipped_step tensor={name}", epoch + 1)?;
                    }
                }
            }
        }
        let mean = sum / steps.max(1) as f64;
        coarse_l1 = Some(mean);
        writeln!(
            log,
            "phase=1 epoch={} lr={:.9} L_s=0.000000 L_l=0.000000 L_sl=0.000000 total={mean:.6}",
            epoch + 1,
            lr
        )?;
        state.save(&ckpt)?;
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            state.save(&out_dir.join(format!("checkpoint_p1_e{}.rmvs", epoch + 1)))?;
        }
    }

    // Frozen coarse outputs, one per (scene, reference view).
    let mut frozen: Vec<Vec<coarse::CoarseForward>> = Vec::new();
    if cfg.epochs_ray > 0 && !cfg.joint_finetune {
        for scene in scenes {
            let images = images_tensor(scene)?;
            let mut per_view = Vec::with_capacity(scene.meta.views);
            for reference in 0..scene.meta.views {
                per_view.push(coarse::coarse_forward(
                    &state.params,
                    coarse_cfg,
                    &images,
                    &scene.cameras,
                    reference,
                    scene.meta.depth_range,
                )?);
            }
            frozen.push(per_view);
        }
    }

    let mut ray_terms = None;
    for epoch in 0..cfg.epochs_ray {
        let lr = lr_at(cfg.learning_rate, cfg.decay, cfg.decay_every, epoch);
        let mut acc = LossTerms::default();
        let mut steps = 0usize;
        for (si, scene) in scenes.iter().enumerate() {
            for reference in 0..scene.meta.views {
                let mut rng = ChaCha20Rng::seed_from_u64(stream_seed(
                    cfg.seed,
                    "rays",
                    &[si, reference, epoch],
                ));
                if cfg.joint_finetune {
                    let r = ray_step_joint(
                        scene, reference, &mut state, coarse_cfg, ray_cfg, cfg, lr, &mut rng,
                    );
                    match classify_step(r)? {
                        StepOutcome::Keep(terms) if terms.total.is_finite() => {
                            acc = add_terms(acc, terms);
                            steps += 1;
                        }
                        StepOutcome::Keep(_) | StepOutcome::Diverged => {
                            return Err(TrainError::Diverged { phase: 2, epoch });
                        }
                        StepOutcome::Skipped(name) => {
                            writeln!(
                                log,
                                "phase=2 epoch={} skipped_step tensor={name}",
                                epoch + 1
                            )?;
                        }
                    }
                } else {
                    let fz = &frozen[si][reference];
                    let batches = sample_ray_batches(
                        scene,
                        reference,
                        &fz.depth_full,
                        &fz.valid_full,
                        cfg,
                        &mut rng,
                    )?;
                    for batch in &batches {
                        let r = ray_step_frozen(batch, fz, scene, &mut state, ray_cfg, cfg, lr);
                        match classify_step(r)? {
                            StepOutcome::Keep(terms) if terms.total.is_finite() => {
                                acc = add_terms(acc, terms);
                                steps += 1;
                            }
                            StepOutcome::Keep(_) | StepOutcome::Diverged => {
                                return Err(TrainError::Diverged { phase: 2, epoch });
                            }
                            StepOutcome::Skipped(name) => {
                                writeln!(
                                    log,
                                    "phase=2 epoch={} skipped_step tensor={name}",
                                    epoch + 1
                                )?;
                            }
                        }
                    }
                }
            }
        }
        let mean = scale_terms(acc, 1.0 / steps.max(1) as f64);
        ray_terms = Some(mean);
        writeln!(
            log,
            "phase=2 epoch={} lr={:.9} L_s={:.6} L_l={:.6} L_sl={:.6} total={:.6}",
            epoch + 1,
            lr,
            mean.sdf,
            mean.location,
            mean.indicator,
            mean.total
        )?;
        state.save(&ckpt)?;
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            state.save(&out_dir.join(format!("checkpoint_p2_e{}.rmvs", epoch + 1)))?;
        }
    }
    log.flush()?;
    Ok(TrainOutcome {
        state,
        checkpoint_path: ckpt,
        log_path,
        coarse_l1,
        ray_terms,
    })
}

/// Sorts a step result into: value to keep, divergence halt, skipped step
/// (non-finite gradient, logged by tensor name), or hard error. The tape
/// rejects non-finite values at every op, so numeric overflow in a forward
/// pass arrives here as an error rather than as a NaN loss.
enum StepOutcome<T> {
    Keep(T),
    Diverged,
    Skipped(String),
}

fn classify_step<T>(r: Result<T, TrainError>) -> Result<StepOutcome<T>, TrainError> {
    match r {
        Ok(v) => Ok(StepOutcome::Keep(v)),
        Err(TrainError::Diff(DiffError::NonFinite { .. }))
        | Err(TrainError::Coarse(coarse::CoarseError::Diff(DiffError::NonFinite { .. })))
        | Err(TrainError::Ray(raynet::RayNetError::Diff(DiffError::NonFinite { .. }))) => {
            Ok(StepOutcome::Diverged)
        }
        Err(TrainError::NonFiniteGrad(name)) => Ok(StepOutcome::Skipped(name)),
        Err(e) => Err(e),
    }
}

fn add_terms(a: LossTerms, b: LossTerms) -> LossTerms {
    LossTerms {
        sdf: a.sdf + b.sdf,
        location: a.location + b.location,
        consistency: a.consistency + b.consistency,
        indicator: a.indicator + b.indicator,
        total: a.total + b.total,
    }
}

fn scale_terms(a: LossTerms, s: f64) -> LossTerms {
    LossTerms {
        sdf: a.sdf * s,
        location: a.location * s,
        consistency: a.consistency * s,
        indicator: a.indicator * s,
        total: a.total * s,
    }
}
