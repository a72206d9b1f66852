//! Ray refinement stage: turns a coarse depth into a 1D implicit field per
//! ray. For each hypothesized point on a ray the stage fetches per-view
//! features, relates them with a small self-attention stack over the views
//! (tokens of one point lie on corresponding epipolar lines, which is what
//! the attention ends up correlating), aggregates them with a volume
//! feature, then runs an LSTM along the ray to predict normalized SDF values
//! per sample and the zero-crossing location.
//!
//! Everything here is expressed on the gradient tape. Rays are processed in
//! batches: points are laid out sample-major (`p = k*R + r`) so each LSTM
//! step slices a contiguous block of rows.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use thiserror::Error;

use crate::diff::{DiffError, GatherTable, ReduceKind, Tape, Tensor, Var};
use crate::geometry::{
    bilinear_taps, pixel_ray, project, trilinear_taps, Camera, GeomError, RaySampling, Vec3,
};

#[derive(Debug, Error)]
pub enum RayNetError {
    #[error("missing parameter {0:?}")]
    MissingParam(String),
    #[error("ray stage: {0}")]
    BadInput(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Architecture of the ray stage.
#[derive(Debug, Clone)]
pub struct RayNetConfig {
    /// Per-view feature channels C.
    pub feature_channels: usize,
    /// Volume feature channels C_v.
    pub volume_channels: usize,
    /// Attention blocks in the view transformer.
    pub blocks: usize,
    /// Feed-forward expansion factor (C -> ff_mult*C -> C).
    pub ff_mult: usize,
    /// LSTM hidden/cell width.
    pub hidden: usize,
    /// Hidden widths of both output heads; the final layer maps to 1.
    pub mlp_widths: [usize; 3],
    /// When false the transformer is skipped and raw fetched tokens feed the
    /// aggregation directly (the ablation path).
    pub use_transformer: bool,
}

impl Default for RayNetConfig {
    fn default() -> RayNetConfig {
        RayNetConfig {
            feature_channels: 8,
            volume_channels: 8,
            blocks: 4,
            ff_mult: 4,
            hidden: 50,
            mlp_widths: [64, 64, 32],
            use_transformer: true,
        }
    }
}

impl RayNetConfig {
    /// Aggregated per-point feature width: mean, variance, reference token,
    /// volume feature.
    pub fn point_feature_len(&self) -> usize {
        3 * self.feature_channels + self.volume_channels
    }
}

/// Name and shape of every learnable tensor of the ray stage. Matmul weights
/// are stored input-major `[in, out]`.
pub fn param_specs(cfg: &RayNetConfig) -> Vec<(String, Vec<usize>)> {
    let c = cfg.feature_channels;
    let ff = cfg.ff_mult * c;
    let f = cfg.point_feature_len();
    let h = cfg.hidden;
    let mut out = Vec::new();
    for b in 1..=cfg.blocks {
        for w in ["wq", "wk", "wv"] {
            out.push((format!("ray.tf{b}.{w}"), vec![c, c]));
        }
        out.push((format!("ray.tf{b}.ln1.g"), vec![c]));
        out.push((format!("ray.tf{b}.ln1.b"), vec![c]));
        out.push((format!("ray.tf{b}.ff1.w"), vec![c, ff]));
        out.push((format!("ray.tf{b}.ff1.b"), vec![ff]));
        out.push((format!("ray.tf{b}.ff2.w"), vec![ff, c]));
        out.push((format!("ray.tf{b}.ff2.b"), vec![c]));
        out.push((format!("ray.tf{b}.ln2.g"), vec![c]));
        out.push((format!("ray.tf{b}.ln2.b"), vec![c]));
    }
    for gate in ["z", "f", "u", "o"] {
        out.push((format!("ray.lstm.w{gate}"), vec![f + h, h]));
        out.push((format!("ray.lstm.b{gate}"), vec![h]));
    }
    let [m1, m2, m3] = cfg.mlp_widths;
    for (head, d_in) in [("mlps", h + f + 1), ("mlpl", h)] {
        for (i, (a, b)) in [(d_in, m1), (m1, m2), (m2, m3), (m3, 1)].iter().enumerate() {
            out.push((format!("ray.{head}.l{}.w", i + 1), vec![*a, *b]));
            out.push((format!("ray.{head}.l{}.b", i + 1), vec![*b]));
        }
    }
    out
}

fn look(params: &BTreeMap<String, Var>, name: &str) -> Result<Var, RayNetError> {
    params
        .get(name)
        .copied()
        .ok_or_else(|| RayNetError::MissingParam(name.to_string()))
}

/// One ray to refine: its reference pixel and the hypothesis window.
#[derive(Debug, Clone)]
pub struct RaySpec {
    pub pixel: (f64, f64),
    pub sampling: RaySampling,
}

/// Precomputed fetch structure for a batch of rays: gather tables for every
/// view and for the feature volume, in-view flags, and the repeat table that
/// broadcasts the final ray feature to every sample row.
pub struct BatchGeometry {
    pub rays: usize,
    pub samples: usize,
    pub views: usize,
    view_tables: Vec<Arc<GatherTable>>,
    volume_table: Arc<GatherTable>,
    rep_table: Arc<GatherTable>,
    /// `flags[view][p]`: the point projects inside that view.
    pub flags: Vec<Vec<bool>>,
    /// Normalized sample coordinates k/K shared by all rays.
    pub dbar: Vec<f64>,
}

/// Builds the batch fetch structure. Points are indexed `p = k*rays + r`.
/// Out-of-view or behind-camera projections get empty tap lists (their
/// tokens read as zero) and a cleared flag.
#[allow(clippy::too_many_arguments)]
pub fn batch_geometry(
    specs: &[RaySpec],
    cameras: &[Camera],
    image_size: (usize, usize),
    volume_dims: (usize, usize, usize),
    depth_range: (f64, f64),
    volume_scale: usize,
    hidden: usize,
) -> Result<BatchGeometry, RayNetError> {
    let r = specs.len();
    if r == 0 {
        return Err(RayNetError::BadInput("empty ray batch".into()));
    }
    let k = specs[0].sampling.count;
    if specs.iter().any(|s| s.sampling.count != k) {
        return Err(RayNetError::BadInput(
            "all rays in a batch share one sample count".into(),
        ));
    }
    let n = cameras.len();
    if n < 2 {
        return Err(RayNetError::BadInput(format!(
            "need at least 2 views, got {n}"
        )));
    }
    let (h, w) = image_size;
    let (d, hv, wv) = volume_dims;
    let p_total = k * r;
    let mut view_tables = Vec::with_capacity(n);
    let mut flags = Vec::with_capacity(n);
    for cam in cameras {
        let mut taps: Vec<Vec<(u32, f64)>> = Vec::with_capacity(p_total);
        let mut flag = Vec::with_capacity(p_total);
        for kk in 0..k {
            for spec in specs {
                let point = spec.sampling.points[kk];
                let hit = project(cam, point)
                    .ok()
                    .and_then(|((u, v), _)| bilinear_taps(w, h, u, v));
                match hit {
                    Some(t) => {
                        taps.push(t.to_vec());
                        flag.push(true);
                    }
                    None => {
                        taps.push(Vec::new());
                        flag.push(false);
                    }
                }
            }
        }
        view_tables.push(Arc::new(GatherTable::new(h * w, &taps)));
        flags.push(flag);
    }
    let (dmin, dmax) = depth_range;
    let mut vtaps: Vec<Vec<(u32, f64)>> = Vec::with_capacity(p_total);
    for kk in 0..k {
        for spec in specs {
            let depth = spec.sampling.depths[kk];
            let z = (depth - dmin) / (dmax - dmin) * (d - 1) as f64;
            let x = spec.pixel.0 / volume_scale as f64;
            let y = spec.pixel.1 / volume_scale as f64;
            match trilinear_taps(wv, hv, d, x, y, z) {
                Some(t) => vtaps.push(t.to_vec()),
                None => vtaps.push(Vec::new()),
            }
        }
    }
    let volume_table = Arc::new(GatherTable::new(d * hv * wv, &vtaps));
    let mut rep: Vec<Vec<(u32, f64)>> = Vec::with_capacity(p_total * hidden);
    for kk in 0..k {
        let _ = kk;
        for rr in 0..r {
            for j in 0..hidden {
                rep.push(vec![((rr * hidden + j) as u32, 1.0)]);
            }
        }
    }
    let rep_table = Arc::new(GatherTable::new(r * hidden, &rep));
    Ok(BatchGeometry {
        rays: r,
        samples: k,
        views: n,
        view_tables,
        volume_table,
        rep_table,
        flags,
        dbar: specs[0].sampling.normalized.clone(),
    })
}

/// Plain (tape-free) token fetch for one point: per view, the bilinearly
/// interpolated feature vector at the point's projection, zeros with a
/// cleared flag when the projection is behind the camera or out of view.
pub fn fetch_point_tokens(
    point: Vec3,
    features: &Tensor,
    cameras: &[Camera],
) -> (Vec<Vec<f64>>, Vec<bool>) {
    let shape = features.shape();
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let mut tokens = Vec::with_capacity(cameras.len());
    let mut flags = Vec::with_capacity(cameras.len());
    for (i, cam) in cameras.iter().enumerate() {
        let plane = &features.data()[i * c * h * w..(i + 1) * c * h * w];
        match project(cam, point) {
            Ok(((u, v), _)) => {
                let (f, inside) = crate::geometry::bilinear_fetch(plane, c, h, w, u, v);
                if inside {
                    tokens.push(f);
                    flags.push(true);
                } else {
                    tokens.push(vec![0.0; c]);
                    flags.push(false);
                }
            }
            Err(_) => {
                tokens.push(vec![0.0; c]);
                flags.push(false);
            }
        }
    }
    (tokens, flags)
}

/// Fetches the token matrix for a batch: `[P*N, C]` with row `p*N + i`
/// holding view i's feature at point p.
pub fn fetch_tokens(
    tape: &mut Tape,
    features: Var,
    geom: &BatchGeometry,
) -> Result<Var, RayNetError> {
    let shape = tape.shape(features).to_vec();
    let c = shape[1];
    let p = geom.rays * geom.samples;
    let mut per_view = Vec::with_capacity(geom.views);
    for (v, table) in geom.view_tables.iter().enumerate() {
        let view = tape.slice(features, 0, v, 1)?;
        let g = tape.gather(view, table.clone(), &[1, c, p])?;
        let flat = tape.reshape(g, &[c, p])?;
        per_view.push(tape.transpose(flat)?);
    }
    let wide = tape.concat(&per_view, 1)?;
    Ok(tape.reshape(wide, &[p * geom.views, c])?)
}

/// Output of the transformer: refined tokens plus the attention matrices of
/// each block (`[P, N, N]`, rows summing to 1).
pub struct TransformerOutput {
    pub tokens: Var,
    pub attention: Vec<Var>,
}

/// Self-attention over the N view tokens of each point, applied to all
/// points of the batch at once. Each block: S = softmax(QKᵀ)V, an AddNorm,
/// a feed-forward C -> ff·C -> C, and a second AddNorm.
pub fn epipolar_transformer(
    tape: &mut Tape,
    params: &BTreeMap<String, Var>,
    cfg: &RayNetConfig,
    tokens: Var,
    points: usize,
    views: usize,
) -> Result<TransformerOutput, RayNetError> {
    let c = cfg.feature_channels;
    if views < 2 {
        return Err(RayNetError::BadInput(format!(
            "attention needs at least 2 views, got {views}"
        )));
    }
    let mut x = tokens;
    let mut attention = Vec::with_capacity(cfg.blocks);
    for b in 1..=cfg.blocks {
        let wq = look(params, &format!("ray.tf{b}.wq"))?;
        let wk = look(params, &format!("ray.tf{b}.wk"))?;
        let wv = look(params, &format!("ray.tf{b}.wv"))?;
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let q3 = tape.reshape(q, &[points, views, c])?;
        let k3 = tape.reshape(k, &[points, views, c])?;
        let v3 = tape.reshape(v, &[points, views, c])?;
        let logits = tape.bmm(q3, k3, true)?;
        let attn = tape.softmax(logits, 2)?;
        attention.push(attn);
        let s3 = tape.bmm(attn, v3, false)?;
        let s = tape.reshape(s3, &[points * views, c])?;
        let xs = tape.add(x, s)?;
        let g1 = look(params, &format!("ray.tf{b}.ln1.g"))?;
        let b1 = look(params, &format!("ray.tf{b}.ln1.b"))?;
        let z = tape.layernorm(xs, g1, b1, 1e-5)?;
        let f1w = look(params, &format!("ray.tf{b}.ff1.w"))?;
        let f1b = look(params, &format!("ray.tf{b}.ff1.b"))?;
        let f2w = look(params, &format!("ray.tf{b}.ff2.w"))?;
        let f2b = look(params, &format!("ray.tf{b}.ff2.b"))?;
        let m1 = tape.matmul(z, f1w)?;
        let m1b = tape.add_row(m1, f1b)?;
        let m1r = tape.relu(m1b)?;
        let m2 = tape.matmul(m1r, f2w)?;
        let ff = tape.add_row(m2, f2b)?;
        let zf = tape.add(z, ff)?;
        let g2 = look(params, &format!("ray.tf{b}.ln2.g"))?;
        let b2 = look(params, &format!("ray.tf{b}.ln2.b"))?;
        x = tape.layernorm(zf, g2, b2, 1e-5)?;
    }
    Ok(TransformerOutput {
        tokens: x,
        attention,
    })
}

/// Per-point aggregation: `[mean | population variance | reference token |
/// volume feature]`, shape `[P, 3C + C_v]`. Mean and variance run over all N
/// view tokens.
pub fn aggregate_point_features(
    tape: &mut Tape,
    tokens: Var,
    volume_features: Var,
    geom: &BatchGeometry,
) -> Result<Var, RayNetError> {
    let c = tape.shape(tokens)[1];
    let p = geom.rays * geom.samples;
    let n = geom.views;
    let t3 = tape.reshape(tokens, &[p, n, c])?;
    let mean3 = tape.reduce(t3, 1, ReduceKind::Mean)?;
    let mean = tape.reshape(mean3, &[p, c])?;
    let var3 = tape.reduce(t3, 1, ReduceKind::Var)?;
    let var = tape.reshape(var3, &[p, c])?;
    let ref3 = tape.slice(t3, 1, 0, 1)?;
    let reference = tape.reshape(ref3, &[p, c])?;
    let cv = tape.shape(volume_features)[1];
    let vg = tape.gather(volume_features, geom.volume_table.clone(), &[1, cv, p])?;
    let vflat = tape.reshape(vg, &[cv, p])?;
    let vol = tape.transpose(vflat)?;
    Ok(tape.concat(&[mean, var, reference, vol], 1)?)
}

/// One LSTM step over a row batch: gates from `[x, h_prev]`, candidate via
/// tanh, cell and hidden update. Weights are `[in, out]`, applied as
/// `x_cat · W + b`.
pub fn lstm_step(
    tape: &mut Tape,
    params: &BTreeMap<String, Var>,
    x: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var), RayNetError> {
    let cat = tape.concat(&[x, h_prev], 1)?;
    let gate = |tape: &mut Tape, name: &str| -> Result<Var, RayNetError> {
        let w = look(params, &format!("ray.lstm.w{name}"))?;
        let b = look(params, &format!("ray.lstm.b{name}"))?;
        let m = tape.matmul(cat, w)?;
        Ok(tape.add_row(m, b)?)
    };
    let z_pre = gate(tape, "z")?;
    let z = tape.tanh(z_pre)?;
    let f_pre = gate(tape, "f")?;
    let zf = tape.sigmoid(f_pre)?;
    let u_pre = gate(tape, "u")?;
    let zu = tape.sigmoid(u_pre)?;
    let o_pre = gate(tape, "o")?;
    let zo = tape.sigmoid(o_pre)?;
    let keep = tape.mul(zf, c_prev)?;
    let write = tape.mul(zu, z)?;
    let c = tape.add(keep, write)?;
    let ct = tape.tanh(c)?;
    let h = tape.mul(zo, ct)?;
    Ok((h, c))
}

fn mlp(
    tape: &mut Tape,
    params: &BTreeMap<String, Var>,
    prefix: &str,
    x: Var,
) -> Result<Var, RayNetError> {
    let mut h = x;
    for layer in 1..=4 {
        let w = look(params, &format!("{prefix}.l{layer}.w"))?;
        let b = look(params, &format!("{prefix}.l{layer}.b"))?;
        let m = tape.matmul(h, w)?;
        h = tape.add_row(m, b)?;
        if layer < 4 {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// Predictions for a batch of rays.
pub struct RayBatchOutput {
    /// `[R, K]` normalized SDF per sample, tanh-bounded.
    pub sdf: Var,
    /// `[R]` zero-crossing location, sigmoid-bounded.
    pub location: Var,
    /// `[R, hidden]` final cell state (the ray feature).
    pub ray_feature: Var,
    /// Aggregated `[P, 3C+C_v]` point features (sample-major rows).
    pub point_features: Var,
    /// Attention matrices per block, empty when the transformer is off.
    pub attention: Vec<Var>,
}

/// Runs LSTM and both heads on aggregated point features. `features` is
/// `[K*R, F]` sample-major; `dbar` has length K.
pub fn heads_from_features(
    tape: &mut Tape,
    params: &BTreeMap<String, Var>,
    cfg: &RayNetConfig,
    features: Var,
    rep_table: Arc<GatherTable>,
    dbar: &[f64],
    rays: usize,
) -> Result<(Var, Var, Var), RayNetError> {
    let k = dbar.len();
    let p = rays * k;
    let h0 = tape.constant(Tensor::zeros(&[rays, cfg.hidden]))?;
    let c0 = tape.constant(Tensor::zeros(&[rays, cfg.hidden]))?;
    let (mut h, mut c) = (h0, c0);
    for kk in 0..k {
        let xk = tape.slice(features, 0, kk * rays, rays)?;
        let (hn, cn) = lstm_step(tape, params, xk, h, c)?;
        h = hn;
        c = cn;
    }
    let ck = c;

    let ck_flat = tape.reshape(ck, &[1, 1, rays * cfg.hidden])?;
    let rep = tape.gather(ck_flat, rep_table, &[1, 1, p * cfg.hidden])?;
    let ck_rep = tape.reshape(rep, &[p, cfg.hidden])?;
    let mut dcol = vec![0.0; p];
    for kk in 0..k {
        for r in 0..rays {
            dcol[kk * rays + r] = dbar[kk];
        }
    }
    let dvar = tape.constant(Tensor::new(&[p, 1], dcol)?)?;
    let s_in = tape.concat(&[ck_rep, features, dvar], 1)?;
    let s_raw = mlp(tape, params, "ray.mlps", s_in)?;
    let s_tanh = tape.tanh(s_raw)?;
    let s_km = tape.reshape(s_tanh, &[k, rays])?;
    let sdf = tape.transpose(s_km)?;

    let l_raw = mlp(tape, params, "ray.mlpl", ck)?;
    let l_sig = tape.sigmoid(l_raw)?;
    let location = tape.reshape(l_sig, &[rays])?;
    Ok((sdf, location, ck))
}

/// Full ray-stage forward for one batch: fetch tokens, relate views, fetch
/// volume features, aggregate, and run the recurrent heads.
pub fn run_ray_batch(
    tape: &mut Tape,
    params: &BTreeMap<String, Var>,
    cfg: &RayNetConfig,
    features: Var,
    volume_features: Var,
    geom: &BatchGeometry,
) -> Result<RayBatchOutput, RayNetError> {
    let tokens = fetch_tokens(tape, features, geom)?;
    let p = geom.rays * geom.samples;
    let (refined, attention) = if cfg.use_transformer {
        let out = epipolar_transformer(tape, params, cfg, tokens, p, geom.views)?;
        (out.tokens, out.attention)
    } else {
        (tokens, Vec::new())
    };
    let point_features = aggregate_point_features(tape, refined, volume_features, geom)?;
    let (sdf, location, ray_feature) = heads_from_features(
        tape,
        params,
        cfg,
        point_features,
        geom.rep_table.clone(),
        &geom.dbar,
        geom.rays,
    )?;
    Ok(RayBatchOutput {
        sdf,
        location,
        ray_feature,
        point_features,
        attention,
    })
}

/// Everything the ray stage needs about one scene after the coarse stage has
/// run and been frozen: plain tensors, no tape attached.
pub struct FrozenScene<'a> {
    /// `[V, C, H, W]` per-view features.
    pub features: &'a Tensor,
    /// `[1, C_v, D, Hv, Wv]` regularized feature volume.
    pub volume_features: &'a Tensor,
    pub plane_depths: &'a [f64],
    pub volume_scale: usize,
    pub cameras: &'a [Camera],
    pub reference: usize,
}

/// Per-pixel refinement record kept for debugging and the trace dumps.
#[derive(Debug, Clone)]
pub struct RayRecord {
    pub pixel: (usize, usize),
    pub coarse_depth: f64,
    /// Metric sample depths of the hypothesis window.
    pub sample_depths: Vec<f64>,
    /// Predicted normalized SDF per sample.
    pub sdf: Vec<f64>,
    /// Predicted zero-crossing location in [0,1].
    pub location: f64,
    pub refined_depth: f64,
}

/// A refined depth map plus the per-ray predictions that produced it.
pub struct RefinedDepth {
    pub depth: Vec<f64>,
    pub confidence: Vec<f64>,
    pub valid: Vec<bool>,
    pub records: Vec<Option<RayRecord>>,
}

/// Refines a full-resolution coarse depth map ray by ray. Valid pixels run
/// the complete fine stage in batches on throwaway tapes (no gradients);
/// invalid pixels keep the coarse depth with zero confidence.
#[allow(clippy::too_many_arguments)]
pub fn predict_depth_map(
    frozen: &FrozenScene,
    param_values: &BTreeMap<String, Tensor>,
    cfg: &RayNetConfig,
    coarse_depth: &[f64],
    coarse_confidence: &[f64],
    coarse_valid: &[bool],
    delta: f64,
    samples_per_ray: usize,
    batch_size: usize,
) -> Result<RefinedDepth, RayNetError> {
    let ref_cam = &frozen.cameras[frozen.reference];
    let (w, h) = (ref_cam.width(), ref_cam.height());
    if coarse_depth.len() != w * h {
        return Err(RayNetError::BadInput(format!(
            "coarse depth has {} pixels for a {w}x{h} view",
            coarse_depth.len()
        )));
    }
    let fshape = frozen.volume_features.shape().to_vec();
    let volume_dims = (fshape[2], fshape[3], fshape[4]);
    let depth_range = (
        frozen.plane_depths[0],
        *frozen.plane_depths.last().expect("planes"),
    );
    let mut depth = coarse_depth.to_vec();
    let mut confidence = vec![0.0; w * h];
    let mut valid = vec![false; w * h];
    let mut records: Vec<Option<RayRecord>> = vec![None; w * h];

    let todo: Vec<usize> = (0..w * h).filter(|i| coarse_valid[*i]).collect();
    for chunk in todo.chunks(batch_size.max(1)) {
        let mut specs = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let pixel = ((i % w) as f64, (i / w) as f64);
            let ray = pixel_ray(ref_cam, pixel)?;
            let sampling =
                crate::geometry::sample_hypotheses(&ray, coarse_depth[i], delta, samples_per_ray)?;
            specs.push(RaySpec {
                pixel,
                sampling,
            });
        }
        let geom = batch_geometry(
            &specs,
            frozen.cameras,
            (h, w),
            volume_dims,
            depth_range,
            frozen.volume_scale,
            cfg.hidden,
        )?;
        let mut tape = Tape::new();
        let mut params = BTreeMap::new();
        for (name, t) in param_values {
            params.insert(name.clone(), tape.leaf(t.clone(), false)?);
        }
        let features = tape.leaf(frozen.features.clone(), false)?;
        let volume = tape.leaf(frozen.volume_features.clone(), false)?;
        let out = run_ray_batch(&mut tape, &params, cfg, features, volume, &geom)?;
        let sdf = tape.value(out.sdf).data().to_vec();
        let loc = tape.value(out.location).data().to_vec();
        for (bi, &i) in chunk.iter().enumerate() {
            let d = crate::geometry::location_to_depth(loc[bi], coarse_depth[i], delta);
            depth[i] = d;
            confidence[i] = coarse_confidence[i];
            valid[i] = true;
            records[i] = Some(RayRecord {
                pixel: (i % w, i / w),
                coarse_depth: coarse_depth[i],
                sample_depths: specs[bi].sampling.depths.clone(),
                sdf: sdf[bi * samples_per_ray..(bi + 1) * samples_per_ray].to_vec(),
                location: loc[bi],
                refined_depth: d,
            });
        }
    }
    Ok(RefinedDepth {
        depth,
        confidence,
        valid,
        records,
    })
}

/// Text table of one refined ray: per sample k, the metric depth, the
/// normalized coordinate, the predicted and (when known) label SDF; then the
/// predicted and label crossing locations.
pub fn profile_text(
    record: &RayRecord,
    dbar: &[f64],
    label_sdf: Option<&[f64]>,
    label_location: Option<f64>,
) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "pixel {} {}", record.pixel.0, record.pixel.1);
    let _ = writeln!(s, "coarse_depth {:.6}", record.coarse_depth);
    let _ = writeln!(s, "k depth dbar sdf_pred sdf_label");
    for k in 0..record.sdf.len() {
        let lab = label_sdf
            .map(|l| format!("{:.6}", l[k]))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{} {:.6} {:.6} {:.6} {}",
            k + 1,
            record.sample_depths[k],
            dbar[k],
            record.sdf[k],
            lab
        );
    }
    let _ = writeln!(s, "location_pred {:.6}", record.location);
    match label_location {
        Some(l) => {
            let _ = writeln!(s, "location_label {l:.6}");
        }
        None => {
            let _ = writeln!(s, "location_label -");
        }
    }
    let _ = writeln!(s, "depth_pred {:.6}", record.refined_depth);
    s
}

/// Text grid of the attention matrices of one ray: one `N x N` block per
/// (transformer block, sample) pair.
pub fn attention_text(
    attention_values: &[Vec<f64>],
    ray_index: usize,
    rays: usize,
    samples: usize,
    views: usize,
) -> String {
    let mut s = String::new();
    for (b, block) in attention_values.iter().enumerate() {
        for k in 0..samples {
            let p = k * rays + ray_index;
            let _ = writeln!(s, "block {} sample {}", b + 1, k + 1);
            for i in 0..views {
                let row: Vec<String> = (0..views)
                    .map(|j| format!("{:.6}", block[(p * views + i) * views + j]))
                    .collect();
                let _ = writeln!(s, "{}", row.join(" "));
            }
        }
    }
    s
}
