//! One function per subcommand, plus the shared ray-evaluation helper the
//! noise test and the acceptance suite both use.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use raymvs_core::coarse::{coarse_forward, CoarseForward};
use raymvs_core::diff::{Tape, Tensor};
use raymvs_core::fusion::{
    self, depth_error_curve, eval_acc_comp, fuse, geometric_filter, gt_surface_cloud,
    photometric_filter, read_ply, write_ply, GeoFilterParams,
};
use raymvs_core::geometry::{
    location_to_depth, pixel_ray, project, sample_hypotheses, Camera,
};
use raymvs_core::raynet::{
    attention_text, batch_geometry, profile_text, run_ray_batch, FrozenScene, RayRecord, RaySpec,
};
use raymvs_core::scene::{
    gt_ray_labels, list_scene_dirs, load_scene_dir, make_dataset, read_depth_file,
    write_depth_file, write_png, LoadedScene,
};
use raymvs_core::train::{load_checkpoint, save_checkpoint, train, LossTerms};

use crate::config::parse_config;
use crate::{embed_meta, model_params, read_meta, CheckpointMeta, CliError, OutputGuard};

fn images_tensor(scene: &LoadedScene) -> Result<Tensor, CliError> {
    let (w, h) = scene.meta.image_size;
    let mut data = Vec::with_capacity(scene.meta.views * 3 * h * w);
    for img in &scene.images {
        data.extend_from_slice(img);
    }
    Tensor::new(&[scene.meta.views, 3, h, w], data).map_err(CliError::from)
}

fn randn(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn load_scene(dir: &Path) -> Result<LoadedScene, CliError> {
    load_scene_dir(dir).map_err(|e| match e {
        raymvs_core::scene::SceneError::Io(io) => {
            CliError::Data(format!("{}: {io}", dir.display()))
        }
        other => other.into(),
    })
}

fn check_reference(scene: &LoadedScene, reference: usize) -> Result<(), CliError> {
    if reference >= scene.meta.views {
        return Err(CliError::Usage(format!(
            "--ref {reference} out of range: scene has {} views",
            scene.meta.views
        )));
    }
    Ok(())
}

struct LoadedCheckpoint {
    params: BTreeMap<String, Tensor>,
    meta: CheckpointMeta,
}

fn load_model(ckpt: &Path) -> Result<LoadedCheckpoint, CliError> {
    let tensors = load_checkpoint(ckpt).map_err(|e| match e {
        raymvs_core::train::TrainError::Io(io) => {
            CliError::Data(format!("{}: {io}", ckpt.display()))
        }
        other => other.into(),
    })?;
    let meta = read_meta(&tensors)?;
    Ok(LoadedCheckpoint {
        params: model_params(&tensors),
        meta,
    })
}

fn trace_cap(scene: &LoadedScene) -> f64 {
    4.0 * scene.meta.depth_range.1
}

pub fn gen_data(config_path: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = parse_config(config_path)?;
    let mut guard = OutputGuard::default();
    if !out.exists() {
        guard.track(out);
        std::fs::create_dir_all(out)?;
    } else {
        for i in 0..cfg.scenes {
            guard.track(&out.join(format!("scene_{i}")));
        }
    }
    let dirs = make_dataset(&cfg.dataset(), out)?;
    for dir in &dirs {
        let scene = load_scene_dir(dir)?;
        let cloud = gt_surface_cloud(&scene.meta.scene, &scene.cameras, trace_cap(&scene))?;
        write_ply(&cloud, &dir.join("gt.ply"))?;
        println!("{}", dir.display());
    }
    guard.disarm();
    Ok(())
}

pub fn train_cmd(config_path: &Path, out: &Path, resume: Option<&Path>) -> Result<(), CliError> {
    let cfg = parse_config(config_path)?;
    if let Some(r) = resume {
        if !r.exists() {
            return Err(CliError::Data(format!(
                "{}: resume checkpoint not found",
                r.display()
            )));
        }
    }
    let scene_dirs = list_scene_dirs(Path::new(&cfg.data_dir))?;
    if scene_dirs.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no scene_<i> directories; run gen-data first",
            cfg.data_dir
        )));
    }
    let mut scenes = Vec::with_capacity(scene_dirs.len());
    for dir in &scene_dirs {
        scenes.push(load_scene_dir(dir)?);
    }
    let mut guard = OutputGuard::default();
    if !out.exists() {
        guard.track(out);
    } else {
        guard.track(&out.join("metrics.log"));
        guard.track(&out.join("checkpoint.rmvs"));
    }
    let coarse_cfg = cfg.coarse();
    let ray_cfg = cfg.raynet();
    let outcome = match train(&scenes, &coarse_cfg, &ray_cfg, &cfg.train(), out, resume) {
        Ok(o) => o,
        Err(e @ raymvs_core::train::TrainError::Diverged { .. }) => {
            // The halt contract keeps the last good checkpoint and the log.
            guard.disarm();
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    let mut tensors = load_checkpoint(&outcome.checkpoint_path)?;
    embed_meta(
        &mut tensors,
        &coarse_cfg,
        &ray_cfg,
        cfg.samples_per_ray,
        cfg.delta,
    );
    save_checkpoint(&outcome.checkpoint_path, &tensors)?;
    guard.disarm();
    if let Some(l1) = outcome.coarse_l1 {
        println!("coarse_l1={l1:.6}");
    }
    if let Some(LossTerms { total, .. }) = outcome.ray_terms {
        println!("ray_total={total:.6}");
    }
    println!("checkpoint={}", outcome.checkpoint_path.display());
    println!("log={}", outcome.log_path.display());
    Ok(())
}

/// Runs the frozen coarse stage for one reference view.
fn run_coarse(
    scene: &LoadedScene,
    model: &LoadedCheckpoint,
    reference: usize,
) -> Result<CoarseForward, CliError> {
    let images = images_tensor(scene)?;
    coarse_forward(
        &model.params,
        &model.meta.coarse,
        &images,
        &scene.cameras,
        reference,
        scene.meta.depth_range,
    )
    .map_err(CliError::from)
}

pub fn infer(ckpt: &Path, scene_dir: &Path, reference: usize, out: &Path) -> Result<(), CliError> {
    let scene = load_scene(scene_dir)?;
    check_reference(&scene, reference)?;
    let model = load_model(ckpt)?;
    let fwd = run_coarse(&scene, &model, reference)?;
    let frozen = FrozenScene {
        features: &fwd.features,
        volume_features: &fwd.volume_features,
        plane_depths: &fwd.plane_depths,
        volume_scale: model.meta.coarse.volume_scale,
        cameras: &scene.cameras,
        reference,
    };
    let refined = raymvs_core::raynet::predict_depth_map(
        &frozen,
        &model.params,
        &model.meta.ray,
        &fwd.depth_full,
        &fwd.confidence_full,
        &fwd.valid_full,
        model.meta.delta,
        model.meta.samples_per_ray,
        128,
    )?;
    let mut guard = OutputGuard::default();
    if !out.exists() {
        guard.track(out);
        std::fs::create_dir_all(out)?;
    }
    let (w, h) = scene.meta.image_size;
    let files = [
        (out.join(format!("refined_{reference}.depth")), &refined.depth),
        (out.join(format!("coarse_{reference}.depth")), &fwd.depth_full),
        (
            out.join(format!("confidence_{reference}.depth")),
            &refined.confidence,
        ),
    ];
    for (path, data) in &files {
        guard.track(path);
        write_depth_file(path, w, h, data)?;
        println!("{}", path.display());
    }
    guard.disarm();
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn fuse_cmd(
    scene_dir: &Path,
    depths_dir: &Path,
    out: &Path,
    conf_threshold: f64,
    merge_radius: f64,
    reproj_tol: f64,
    depth_tol: f64,
    min_views: usize,
) -> Result<(), CliError> {
    let scene = load_scene(scene_dir)?;
    let (w, h) = scene.meta.image_size;
    let mut depths = Vec::new();
    let mut confidences = Vec::new();
    let mut cameras = Vec::new();
    let mut images = Vec::new();
    for j in 0..scene.meta.views {
        let dpath = depths_dir.join(format!("refined_{j}.depth"));
        let cpath = depths_dir.join(format!("confidence_{j}.depth"));
        if !dpath.exists() {
            continue;
        }
        let (dw, dh, d) = read_depth_file(&dpath)?;
        let (cw, ch, c) = read_depth_file(&cpath)?;
        if (dw, dh) != (w, h) || (cw, ch) != (w, h) {
            return Err(CliError::Data(format!(
                "{}: depth map is {dw}x{dh}, scene views are {w}x{h}",
                dpath.display()
            )));
        }
        depths.push(d);
        confidences.push(c);
        cameras.push(scene.cameras[j].clone());
        images.push(scene.images[j].clone());
    }
    if depths.len() < 2 {
        return Err(CliError::Data(format!(
            "{}: found refined depth maps for {} views, need at least 2",
            depths_dir.display(),
            depths.len()
        )));
    }
    let geo = GeoFilterParams {
        reproj_px: reproj_tol,
        depth_rel: depth_tol,
        min_views,
    };
    let mut masks = Vec::with_capacity(depths.len());
    for j in 0..depths.len() {
        let valid: Vec<bool> = depths[j].iter().map(|d| *d > 0.0).collect();
        let photo = photometric_filter(&confidences[j], &valid, conf_threshold)?;
        let geom = geometric_filter(&depths, &cameras, j, &geo)?;
        masks.push(photo.iter().zip(&geom).map(|(p, g)| *p && *g).collect::<Vec<bool>>());
    }
    let cloud = fuse(&depths, &masks, &cameras, merge_radius, Some(&images))?;
    if cloud.points.is_empty() {
        eprintln!("warning: fused cloud is empty (filters removed every pixel)");
    }
    let mut guard = OutputGuard::default();
    guard.track(out);
    write_ply(&cloud, out)?;
    guard.disarm();
    println!("points={}", cloud.points.len());
    println!("{}", out.display());
    Ok(())
}

pub fn eval(pred: &Path, gt: &Path, report: &Path, clamp: f64) -> Result<(), CliError> {
    let pred_cloud = read_ply(pred)?;
    let gt_cloud = read_ply(gt)?;
    let metrics = eval_acc_comp(&pred_cloud, &gt_cloud, clamp)?;
    let mut guard = OutputGuard::default();
    guard.track(report);
    std::fs::write(report, metrics.to_text())?;
    guard.disarm();
    println!("overall={:.6}", metrics.overall);
    Ok(())
}

pub fn eval_depth(
    pred: &Path,
    gt: &Path,
    report: &Path,
    thresholds: &[f64],
) -> Result<(), CliError> {
    let (pw, ph, pd) = read_depth_file(pred)?;
    let (gw, gh, gd) = read_depth_file(gt)?;
    if (pw, ph) != (gw, gh) {
        return Err(CliError::Data(format!(
            "depth maps disagree: {} is {pw}x{ph}, {} is {gw}x{gh}",
            pred.display(),
            gt.display()
        )));
    }
    let mask: Vec<bool> = gd.iter().map(|d| *d > 0.0).collect();
    let curve = depth_error_curve(&pd, &gd, &mask, thresholds)?;
    let n = mask.iter().filter(|m| **m).count();
    let mae = mask
        .iter()
        .zip(pd.iter().zip(&gd))
        .filter(|(m, _)| **m)
        .map(|(_, (p, g))| (p - g).abs())
        .sum::<f64>()
        / n as f64;
    let mut text = String::new();
    let _ = writeln!(text, "mae={mae:.6}");
    let _ = writeln!(text, "count={n}");
    for (t, f) in &curve {
        let _ = writeln!(text, "curve threshold={t:.6} fraction={f:.6}");
    }
    let mut guard = OutputGuard::default();
    guard.track(report);
    std::fs::write(report, text)?;
    guard.disarm();
    println!("mae={mae:.6}");
    Ok(())
}

struct SingleRay {
    record: RayRecord,
    dbar: Vec<f64>,
    label_sdf: Vec<f64>,
    label_location: f64,
    attention: Vec<Vec<f64>>,
    sample_points: Vec<[f64; 3]>,
}

/// Runs the fine stage on one pixel of one reference view and returns the
/// prediction next to its exact labels.
fn run_single_ray(
    scene: &LoadedScene,
    model: &LoadedCheckpoint,
    fwd: &CoarseForward,
    reference: usize,
    pixel: (f64, f64),
) -> Result<SingleRay, CliError> {
    let (w, h) = scene.meta.image_size;
    let (px, py) = (pixel.0.round() as usize, pixel.1.round() as usize);
    if pixel.0 < 0.0 || pixel.1 < 0.0 || px >= w || py >= h {
        return Err(CliError::Usage(format!(
            "--pixel {},{} out of the {w}x{h} image",
            pixel.0, pixel.1
        )));
    }
    let i = py * w + px;
    if !fwd.valid_full[i] {
        return Err(CliError::Data(format!(
            "pixel {px},{py}: the coarse stage has no valid depth there"
        )));
    }
    let coarse = fwd.depth_full[i];
    let cam = &scene.cameras[reference];
    let ray = pixel_ray(cam, (px as f64, py as f64))?;
    let sampling = sample_hypotheses(&ray, coarse, model.meta.delta, model.meta.samples_per_ray)?;
    let labels = gt_ray_labels(&scene.meta.scene, &ray, &sampling, trace_cap(scene))?;
    let spec = RaySpec {
        pixel: (px as f64, py as f64),
        sampling: sampling.clone(),
    };
    let geom = batch_geometry(
        std::slice::from_ref(&spec),
        &scene.cameras,
        (h, w),
        fwd.dims,
        scene.meta.depth_range,
        model.meta.coarse.volume_scale,
        model.meta.ray.hidden,
    )?;
    let mut tape = Tape::new();
    let mut vars = BTreeMap::new();
    for (name, t) in &model.params {
        vars.insert(name.clone(), tape.leaf(t.clone(), false)?);
    }
    let features = tape.leaf(fwd.features.clone(), false)?;
    let volume = tape.leaf(fwd.volume_features.clone(), false)?;
    let out = run_ray_batch(&mut tape, &vars, &model.meta.ray, features, volume, &geom)?;
    let sdf = tape.value(out.sdf).data().to_vec();
    let location = tape.value(out.location).data()[0];
    let attention: Vec<Vec<f64>> = out
        .attention
        .iter()
        .map(|a| tape.value(*a).data().to_vec())
        .collect();
    Ok(SingleRay {
        record: RayRecord {
            pixel: (px, py),
            coarse_depth: coarse,
            sample_depths: sampling.depths.clone(),
            sdf,
            location,
            refined_depth: location_to_depth(location, coarse, model.meta.delta),
        },
        dbar: sampling.normalized.clone(),
        label_sdf: labels.sdf,
        label_location: labels.location,
        attention,
        sample_points: sampling.points.clone(),
    })
}

pub fn trace_ray(
    ckpt: &Path,
    scene_dir: &Path,
    reference: usize,
    pixel: (f64, f64),
    out: &Path,
) -> Result<(), CliError> {
    let scene = load_scene(scene_dir)?;
    check_reference(&scene, reference)?;
    let model = load_model(ckpt)?;
    let fwd = run_coarse(&scene, &model, reference)?;
    let ray = run_single_ray(&scene, &model, &fwd, reference, pixel)?;
    let text = profile_text(
        &ray.record,
        &ray.dbar,
        Some(&ray.label_sdf),
        Some(ray.label_location),
    );
    let mut guard = OutputGuard::default();
    guard.track(out);
    std::fs::write(out, text)?;
    guard.disarm();
    println!("{}", out.display());
    Ok(())
}

pub fn viz_epipolar(
    ckpt: &Path,
    scene_dir: &Path,
    reference: usize,
    pixel: (f64, f64),
    src: usize,
    out: &Path,
) -> Result<(), CliError> {
    let scene = load_scene(scene_dir)?;
    check_reference(&scene, reference)?;
    if src >= scene.meta.views || src == reference {
        return Err(CliError::Usage(format!(
            "--src {src} must name a view other than the reference in 0..{}",
            scene.meta.views
        )));
    }
    let model = load_model(ckpt)?;
    if !model.meta.ray.use_transformer {
        return Err(CliError::Data(
            "this checkpoint was trained with the transformer disabled; no attention to plot".into(),
        ));
    }
    let fwd = run_coarse(&scene, &model, reference)?;
    let ray = run_single_ray(&scene, &model, &fwd, reference, pixel)?;
    let views = scene.meta.views;
    let k = model.meta.samples_per_ray;
    let text = attention_text(&ray.attention, 0, 1, k, views);

    // Raster: the source view dimmed to luminance, with each hypothesis
    // splatted at its projection, brightness proportional to the attention
    // the reference token pays that view (last block).
    let (w, h) = scene.meta.image_size;
    let img = &scene.images[src];
    let mut gray: Vec<f64> = (0..w * h)
        .map(|i| {
            0.3 * (0.2126 * img[i] + 0.7152 * img[w * h + i] + 0.0722 * img[2 * w * h + i])
        })
        .collect();
    let last = ray.attention.last().expect("transformer on");
    let weight_of = |kk: usize| last[(kk * views + reference) * views + src];
    let peak = (0..k).map(weight_of).fold(0.0f64, f64::max).max(1e-12);
    let cam = &scene.cameras[src];
    for (kk, point) in ray.sample_points.iter().enumerate() {
        let Ok(((u, v), depth)) = project(cam, *point) else {
            continue;
        };
        if depth <= 0.0 {
            continue;
        }
        let value = weight_of(kk) / peak;
        let (x0, y0) = (u.floor() as i64, v.floor() as i64);
        for (dx, dy) in [(0i64, 0i64), (1, 0), (0, 1), (1, 1)] {
            let (x, y) = (x0 + dx, y0 + dy);
            if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                continue;
            }
            let wx = 1.0 - (u - x as f64).abs();
            let wy = 1.0 - (v - y as f64).abs();
            let g = &mut gray[y as usize * w + x as usize];
            *g = g.max(value * wx.max(0.0) * wy.max(0.0));
        }
    }
    let mut planes = Vec::with_capacity(3 * w * h);
    for _ in 0..3 {
        planes.extend_from_slice(&gray);
    }
    let png_path = PathBuf::from(format!("{}.png", out.display()));
    let mut guard = OutputGuard::default();
    guard.track(out);
    guard.track(&png_path);
    std::fs::write(out, text)?;
    write_png(&png_path, w, h, &planes)?;
    guard.disarm();
    println!("{}", out.display());
    println!("{}", png_path.display());
    Ok(())
}

/// Location and depth quality of a sampled set of rays under coarse-depth
/// noise. The acceptance suite reuses this for the overfit and noise
/// criteria.
#[derive(Debug, Clone, Copy, Default)]
pub struct RayStats {
    /// Rays evaluated.
    pub rays: usize,
    /// Rays whose true surface lies inside the hypothesis window.
    pub in_range: usize,
    /// In-range rays with |predicted l - label l| < 1/K.
    pub location_hits: usize,
    /// Rays whose ray actually hits the surface (any depth).
    pub surface_rays: usize,
    /// Mean |coarse - true| over surface rays, scene units.
    pub mae_coarse: f64,
    /// Mean |refined - true| over surface rays.
    pub mae_refined: f64,
}

impl RayStats {
    pub fn location_hit_rate(&self) -> f64 {
        if self.in_range == 0 {
            0.0
        } else {
            self.location_hits as f64 / self.in_range as f64
        }
    }
}

/// Evaluates up to `max_rays` coarse-valid rays of one reference view, with
/// Gaussian noise of the given std added to the coarse depth before the
/// window is placed (the labels are recomputed against the noisy window, as
/// in training).
pub fn evaluate_rays(
    scene: &LoadedScene,
    model_params: &BTreeMap<String, Tensor>,
    meta: &CheckpointMeta,
    fwd: &CoarseForward,
    reference: usize,
    noise_std: f64,
    max_rays: usize,
    seed: u64,
) -> Result<RayStats, CliError> {
    let (w, h) = scene.meta.image_size;
    let cam = &scene.cameras[reference];
    let k = meta.samples_per_ray;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut candidates: Vec<usize> = (0..w * h).filter(|i| fwd.valid_full[*i]).collect();
    if candidates.is_empty() {
        return Err(CliError::Data(
            "coarse stage left no valid pixel to evaluate".into(),
        ));
    }
    candidates.shuffle(&mut rng);
    candidates.truncate(max_rays);
    let mut stats = RayStats::default();
    let mut mae_c = 0.0;
    let mut mae_r = 0.0;
    for chunk in candidates.chunks(64) {
        let mut specs = Vec::with_capacity(chunk.len());
        let mut labels = Vec::with_capacity(chunk.len());
        let mut coarse_clean = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let pixel = ((i % w) as f64, (i / w) as f64);
            let noisy = fwd.depth_full[i] + noise_std * randn(&mut rng);
            let ray = pixel_ray(cam, pixel)?;
            let sampling = sample_hypotheses(&ray, noisy, meta.delta, k)?;
            let lab = gt_ray_labels(&scene.meta.scene, &ray, &sampling, trace_cap(scene))?;
            specs.push(RaySpec { pixel, sampling });
            labels.push(lab);
            coarse_clean.push(fwd.depth_full[i]);
        }
        let geom = batch_geometry(
            &specs,
            &scene.cameras,
            (h, w),
            fwd.dims,
            scene.meta.depth_range,
            meta.coarse.volume_scale,
            meta.ray.hidden,
        )?;
        let mut tape = Tape::new();
        let mut vars = BTreeMap::new();
        for (name, t) in model_params {
            vars.insert(name.clone(), tape.leaf(t.clone(), false)?);
        }
        let features = tape.leaf(fwd.features.clone(), false)?;
        let volume = tape.leaf(fwd.volume_features.clone(), false)?;
        let out = run_ray_batch(&mut tape, &vars, &meta.ray, features, volume, &geom)?;
        let loc = tape.value(out.location).data().to_vec();
        for (bi, lab) in labels.iter().enumerate() {
            stats.rays += 1;
            if lab.in_range {
                stats.in_range += 1;
                if (loc[bi] - lab.location).abs() < 1.0 / k as f64 {
                    stats.location_hits += 1;
                }
            }
            if let Some(true_depth) = lab.hit_depth {
                stats.surface_rays += 1;
                let refined = location_to_depth(
                    loc[bi],
                    specs[bi].sampling.coarse_depth,
                    meta.delta,
                );
                mae_c += (coarse_clean[bi] - true_depth).abs();
                mae_r += (refined - true_depth).abs();
            }
        }
    }
    if stats.surface_rays > 0 {
        stats.mae_coarse = mae_c / stats.surface_rays as f64;
        stats.mae_refined = mae_r / stats.surface_rays as f64;
    }
    Ok(stats)
}

#[allow(clippy::too_many_arguments)]
pub fn noise_test(
    ckpt: &Path,
    scene_dir: &Path,
    stds: &[f64],
    report: &Path,
    rays: usize,
    seed: u64,
    reference: Option<usize>,
) -> Result<(), CliError> {
    if stds.is_empty() {
        return Err(CliError::Usage("--stds needs at least one value".into()));
    }
    if let Some(bad) = stds.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(CliError::Usage(format!(
            "--stds values must be finite and nonnegative, got {bad}"
        )));
    }
    let scene = load_scene(scene_dir)?;
    let model = load_model(ckpt)?;
    let refs: Vec<usize> = match reference {
        Some(r) => {
            check_reference(&scene, r)?;
            vec![r]
        }
        None => (0..scene.meta.views).collect(),
    };
    let mut forwards = Vec::with_capacity(refs.len());
    for &r in &refs {
        forwards.push(run_coarse(&scene, &model, r)?);
    }
    let mut text = String::new();
    for (si, std) in stds.iter().enumerate() {
        let mut agg = RayStats::default();
        let mut mae_c = 0.0;
        let mut mae_r = 0.0;
        for (ri, &r) in refs.iter().enumerate() {
            let s = evaluate_rays(
                &scene,
                &model.params,
                &model.meta,
                &forwards[ri],
                r,
                *std,
                rays,
                seed ^ ((si as u64) << 32) ^ ri as u64,
            )?;
            agg.rays += s.rays;
            agg.in_range += s.in_range;
            agg.location_hits += s.location_hits;
            agg.surface_rays += s.surface_rays;
            mae_c += s.mae_coarse * s.surface_rays as f64;
            mae_r += s.mae_refined * s.surface_rays as f64;
        }
        if agg.surface_rays > 0 {
            agg.mae_coarse = mae_c / agg.surface_rays as f64;
            agg.mae_refined = mae_r / agg.surface_rays as f64;
        }
        let line = format!(
            "std={:.6} rays={} in_range={} location_hit_rate={:.6} mae_coarse={:.6} mae_refined={:.6}",
            std,
            agg.rays,
            agg.in_range,
            agg.location_hit_rate(),
            agg.mae_coarse,
            agg.mae_refined
        );
        println!("{line}");
        let _ = writeln!(text, "{line}");
    }
    let mut guard = OutputGuard::default();
    guard.track(report);
    std::fs::write(report, text)?;
    guard.disarm();
    Ok(())
}

/// Parses "A,B,..." into floats.
pub fn parse_float_list(s: &str, flag: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("{flag}: {p:?} is not a number")))
        })
        .collect()
}

/// Parses "X,Y" into a pixel pair.
pub fn parse_pixel(s: &str) -> Result<(f64, f64), CliError> {
    let parts = parse_float_list(s, "--pixel")?;
    if parts.len() != 2 {
        return Err(CliError::Usage(format!(
            "--pixel expects X,Y, got {} values",
            parts.len()
        )));
    }
    Ok((parts[0], parts[1]))
}

/// Convenience used by tests: loads a checkpoint with its metadata.
pub fn load_model_for_tests(
    ckpt: &Path,
) -> Result<(BTreeMap<String, Tensor>, CheckpointMeta), CliError> {
    let m = load_model(ckpt)?;
    Ok((m.params, m.meta))
}

/// Convenience used by tests: frozen coarse pass for one reference view.
pub fn coarse_forward_for_tests(
    scene: &LoadedScene,
    params: &BTreeMap<String, Tensor>,
    meta: &CheckpointMeta,
    reference: usize,
) -> Result<CoarseForward, CliError> {
    let images = images_tensor(scene)?;
    coarse_forward(
        params,
        &meta.coarse,
        &images,
        &scene.cameras,
        reference,
        scene.meta.depth_range,
    )
    .map_err(CliError::from)
}

/// The camera list helper keeps fuse tests honest about view mapping.
pub fn scene_cameras(scene: &LoadedScene) -> &[Camera] {
    &scene.cameras
}

/// Report text for a cloud comparison, shared by `eval` and tests.
pub fn cloud_report(pred: &Path, gt: &Path, clamp: f64) -> Result<fusion::MetricsReport, CliError> {
    let p = read_ply(pred)?;
    let g = read_ply(gt)?;
    eval_acc_comp(&p, &g, clamp).map_err(CliError::from)
}
