//! Synthetic SDF scenes: the supervision source for the whole pipeline.
//!
//! Scenes are unions of exact signed-distance primitives, so every quantity
//! the models learn (depth, per-sample SDF, zero-crossing location) has an
//! analytic ground truth. Rendering is sphere tracing with Lambert plus an
//! optional Blinn specular lobe; per-view lighting varies to exercise the
//! non-Lambertian failure cases cost-volume methods struggle with.
//!
//! A dataset is a directory of scenes, each holding PNG views, camera text
//! files, raw float32 depth maps, and a manifest that also embeds the scene
//! primitives so training can evaluate exact SDF labels.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::geometry::{
    pixel_ray, v_add, v_dot, v_norm, v_normalize, v_scale, v_sub, Camera, GeomError, Mat3, Ray,
    RaySampling, Vec3,
};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("labels: all K sampled SDFs are zero (degenerate ray)")]
    DegenerateLabels,
    #[error("dataset config: {0}")]
    BadConfig(String),
    #[error("manifest {path}: {msg}")]
    Manifest { path: String, msg: String },
    #[error("depth file {path}: {msg}")]
    DepthFile { path: String, msg: String },
    #[error("image {path}: {msg}")]
    Image { path: String, msg: String },
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An exact signed-distance primitive.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    Box { center: Vec3, half: Vec3 },
    /// Half-space below the plane `dot(normal, p) = offset`, unit normal.
    Plane { normal: Vec3, offset: f64 },
}

impl Shape {
    pub fn sdf(&self, p: Vec3) -> f64 {
        match self {
            Shape::Sphere { center, radius } => v_norm(v_sub(p, *center)) - radius,
            Shape::Box { center, half } => {
                let d = v_sub(p, *center);
                let q = [
                    d[0].abs() - half[0],
                    d[1].abs() - half[1],
                    d[2].abs() - half[2],
                ];
                let outside = [q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)];
                let inside = q[0].max(q[1]).max(q[2]).min(0.0);
                v_norm(outside) + inside
            }
            Shape::Plane { normal, offset } => v_dot(*normal, p) - offset,
        }
    }
}

/// One shaded object: a primitive with its material.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub albedo: [f64; 3],
    /// Blinn specular strength; 0 disables the lobe.
    pub specular: f64,
    pub shininess: f64,
}

/// Union (pointwise min) of exact SDF objects. Lipschitz constant ≤ 1.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
}

impl Scene {
    /// Signed distance of the union: negative inside, zero on the surface.
    pub fn sdf(&self, p: Vec3) -> f64 {
        self.objects
            .iter()
            .map(|o| o.shape.sdf(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Distance plus the index of the closest object (for shading).
    pub fn sdf_and_object(&self, p: Vec3) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for (i, o) in self.objects.iter().enumerate() {
            let d = o.shape.sdf(p);
            if d < best.0 {
                best = (d, i);
            }
        }
        best
    }

    /// Outward surface normal from the SDF gradient (central differences).
    pub fn normal(&self, p: Vec3) -> Vec3 {
        let h = 1e-5;
        let mut g = [0.0; 3];
        for (i, gi) in g.iter_mut().enumerate() {
            let mut a = p;
            let mut b = p;
            a[i] += h;
            b[i] -= h;
            *gi = (self.sdf(a) - self.sdf(b)) / (2.0 * h);
        }
        v_normalize(g)
    }

    /// The two-object demonstration scene every end-to-end test runs on: a
    /// warm sphere and a cool box, surfaces separated by well over twice the
    /// refinement half-range so a ±δ window around either surface never sees
    /// the other object.
    pub fn sphere_and_box() -> Scene {
        Scene {
            objects: vec![
                SceneObject {
                    shape: Shape::Sphere {
                        center: [110.0, 25.0, 35.0],
                        radius: 65.0,
                    },
                    albedo: [0.85, 0.35, 0.30],
                    specular: 0.4,
                    shininess: 32.0,
                },
                SceneObject {
                    shape: Shape::Box {
                        center: [-115.0, -30.0, -40.0],
                        half: [45.0, 50.0, 40.0],
                    },
                    albedo: [0.30, 0.50, 0.85],
                    specular: 0.0,
                    shininess: 1.0,
                },
            ],
        }
    }
}

/// March distance along the ray until the surface is within 1e-7 scene
/// units, or `None` past `max_depth`. The returned value is Euclidean arc
/// length from the origin and never overshoots the true intersection.
pub fn sphere_trace(scene: &Scene, origin: Vec3, direction: Vec3, max_depth: f64) -> Option<f64> {
    const TOL: f64 = 1e-7;
    const MAX_STEPS: usize = 4096;
    let mut t = 0.0;
    for _ in 0..MAX_STEPS {
        let d = scene.sdf(v_add(origin, v_scale(direction, t)));
        if d < TOL {
            return Some(t);
        }
        t += d;
        if t > max_depth {
            return None;
        }
    }
    None
}

/// Directional lighting for one rendered view.
#[derive(Debug, Clone)]
pub struct Lighting {
    /// Unit vector from the surface toward the light.
    pub to_light: Vec3,
    pub ambient: f64,
    pub intensity: f64,
    pub background: [f64; 3],
}

impl Default for Lighting {
    fn default() -> Lighting {
        Lighting {
            to_light: v_normalize([0.3, 0.8, -0.6]),
            ambient: 0.2,
            intensity: 0.85,
            background: [0.06, 0.07, 0.09],
        }
    }
}

/// One rendered view: image planes `[3, H, W]` in [0,1], camera-frame depth
/// per pixel (0 marks a miss), and the hit mask.
#[derive(Debug, Clone)]
pub struct RenderedView {
    pub image: Vec<f64>,
    pub depth: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Sphere-traces every pixel and shades hits with Lambert + optional Blinn
/// specular. Depth is camera-frame z; misses get the background color and a
/// zero depth.
pub fn render_view(scene: &Scene, camera: &Camera, lighting: &Lighting, max_depth: f64) -> RenderedView {
    let (w, h) = (camera.width(), camera.height());
    let mut image = vec![0.0; 3 * w * h];
    let mut depth = vec![0.0; w * h];
    let mut mask = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let ray = pixel_ray(camera, (x as f64, y as f64)).expect("pixel in bounds");
            let idx = y * w + x;
            let color = match sphere_trace(scene, ray.origin, ray.direction, max_depth) {
                None => lighting.background,
                Some(t) => {
                    let p = ray.point_at(t);
                    let (_, obj_idx) = scene.sdf_and_object(p);
                    let obj = &scene.objects[obj_idx];
                    let n = scene.normal(p);
                    let diff = v_dot(n, lighting.to_light).max(0.0);
                    let mut c = [0.0; 3];
                    let shade = lighting.ambient + lighting.intensity * diff;
                    for i in 0..3 {
                        c[i] = obj.albedo[i] * shade;
                    }
                    if obj.specular > 0.0 {
                        let view = v_scale(ray.direction, -1.0);
                        let half = v_normalize(v_add(lighting.to_light, view));
                        let s = obj.specular * v_dot(n, half).max(0.0).powf(obj.shininess);
                        for ci in c.iter_mut() {
                            *ci += s;
                        }
                    }
                    depth[idx] = t * ray.depth_rate();
                    mask[idx] = true;
                    [c[0].clamp(0.0, 1.0), c[1].clamp(0.0, 1.0), c[2].clamp(0.0, 1.0)]
                }
            };
            for ch in 0..3 {
                image[ch * w * h + idx] = color[ch];
            }
        }
    }
    RenderedView { image, depth, mask }
}

/// Ground-truth supervision for one ray's hypothesis window.
#[derive(Debug, Clone)]
pub struct RayLabels {
    /// Per-sample SDFs normalized by the window's max |SDF|; in [-1, 1] with
    /// the extreme attained.
    pub sdf: Vec<f64>,
    /// Normalized zero-crossing location in [0, 1] (clamped when the true
    /// surface lies outside the window).
    pub location: f64,
    /// True when the traced surface depth falls inside [d_1, d_K].
    pub in_range: bool,
    /// Traced camera-frame depth, `None` for a miss.
    pub hit_depth: Option<f64>,
}

/// Evaluates exact labels for a sampled ray window: normalized SDFs at the K
/// points and the zero-crossing location from the sphere-traced depth.
pub fn gt_ray_labels(
    scene: &Scene,
    ray: &Ray,
    sampling: &RaySampling,
    trace_max_depth: f64,
) -> Result<RayLabels, SceneError> {
    let raw: Vec<f64> = sampling.points.iter().map(|p| scene.sdf(*p)).collect();
    let s_max = raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if s_max == 0.0 {
        return Err(SceneError::DegenerateLabels);
    }
    let sdf: Vec<f64> = raw.iter().map(|v| v / s_max).collect();
    let hit = sphere_trace(scene, ray.origin, ray.direction, trace_max_depth)
        .map(|t| t * ray.depth_rate());
    let (location, in_range) = match hit {
        Some(z) => crate::geometry::depth_to_location(z, sampling.coarse_depth, sampling.delta),
        None => (1.0, false),
    };
    Ok(RayLabels {
        sdf,
        location,
        in_range,
        hit_depth: hit,
    })
}

// ---------------------------------------------------------------------------
// Raw depth-map files: 8-byte header (width, height as u32 LE), then
// float32 little-endian values row-major. Bit-exact across platforms.

pub fn write_depth_file(path: &Path, width: usize, height: usize, depth: &[f64]) -> Result<(), SceneError> {
    assert_eq!(depth.len(), width * height);
    let mut buf = Vec::with_capacity(8 + 4 * depth.len());
    buf.extend_from_slice(&(width as u32).to_le_bytes());
    buf.extend_from_slice(&(height as u32).to_le_bytes());
    for v in depth {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(std::fs::write(path, buf)?)
}

pub fn read_depth_file(path: &Path) -> Result<(usize, usize, Vec<f64>), SceneError> {
    let err = |msg: String| SceneError::DepthFile {
        path: path.display().to_string(),
        msg,
    };
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 {
        return Err(err(format!("only {} bytes, header needs 8", bytes.len())));
    }
    let width = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let want = 8 + 4 * width * height;
    if bytes.len() != want {
        return Err(err(format!(
            "{}x{} map needs {want} bytes, file has {}",
            width,
            height,
            bytes.len()
        )));
    }
    let depth = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((width, height, depth))
}

/// Writes `[3, H, W]` planes in [0,1] as an 8-bit RGB PNG.
pub fn write_png(path: &Path, width: usize, height: usize, planes: &[f64]) -> Result<(), SceneError> {
    assert_eq!(planes.len(), 3 * width * height);
    let mut buf = image::RgbImage::new(width as u32, height as u32);
    for y in 0..height {
        for x in 0..width {
            let idx = y * width + x;
            let px = [
                (planes[idx] * 255.0).round().clamp(0.0, 255.0) as u8,
                (planes[width * height + idx] * 255.0).round().clamp(0.0, 255.0) as u8,
                (planes[2 * width * height + idx] * 255.0).round().clamp(0.0, 255.0) as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|e| SceneError::Image {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

/// Reads an RGB PNG back into `[3, H, W]` planes in [0,1].
pub fn read_png(path: &Path) -> Result<(usize, usize, Vec<f64>), SceneError> {
    let img = image::open(path)
        .map_err(|e| SceneError::Image {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut planes = vec![0.0; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for ch in 0..3 {
                planes[ch * w * h + y * w + x] = px[ch] as f64 / 255.0;
            }
        }
    }
    Ok((w, h, planes))
}

// ---------------------------------------------------------------------------
// Dataset factory.

/// Parameters of a generated dataset.
#[derive(Debug, Clone)]
pub struct DatasetConfig {
    pub scenes: usize,
    pub views: usize,
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels (square pixels, centered principal point).
    pub focal: f64,
    /// Camera ring: distance from the scene origin, total azimuth arc, and
    /// base elevation, degrees.
    pub ring_distance: f64,
    pub ring_span_deg: f64,
    pub ring_elevation_deg: f64,
    pub depth_range: (f64, f64),
    pub delta: f64,
    /// Per-scene uniform jitter of object centers, scene units.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> DatasetConfig {
        DatasetConfig {
            scenes: 1,
            views: 5,
            width: 64,
            height: 64,
            focal: 85.0,
            ring_distance: 700.0,
            ring_span_deg: 60.0,
            ring_elevation_deg: 12.0,
            depth_range: (500.0, 900.0),
            delta: 20.0,
            jitter: 8.0,
            seed: 7,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |msg: String| Err(SceneError::BadConfig(msg));
        if self.scenes == 0 {
            return bad("scenes must be >= 1".into());
        }
        if self.views < 2 {
            return bad(format!("views must be >= 2, got {}", self.views));
        }
        if self.width < 16 || self.height < 16 {
            return bad(format!("image size {}x{} below 16x16", self.width, self.height));
        }
        if self.width % 4 != 0 || self.height % 4 != 0 {
            return bad(format!(
                "image size {}x{} must be divisible by 4 (feature net downsampling)",
                self.width, self.height
            ));
        }
        if self.focal <= 0.0 {
            return bad(format!("focal must be positive, got {}", self.focal));
        }
        if self.ring_distance <= 0.0 {
            return bad("ring distance must be positive".into());
        }
        if self.depth_range.0 <= 0.0 || self.depth_range.1 <= self.depth_range.0 {
            return bad(format!(
                "depth range ({}, {}) must be increasing and positive",
                self.depth_range.0, self.depth_range.1
            ));
        }
        if self.delta <= 0.0 {
            return bad(format!("delta must be positive, got {}", self.delta));
        }
        if self.jitter < 0.0 {
            return bad("jitter must be nonnegative".into());
        }
        Ok(())
    }
}

/// Per-scene metadata stored in (and parsed back from) the manifest.
#[derive(Debug, Clone)]
pub struct SceneMeta {
    pub views: usize,
    pub reference: usize,
    pub delta: f64,
    pub depth_range: (f64, f64),
    pub image_size: (usize, usize),
    pub scene: Scene,
}

/// The evenly spaced inward-looking camera arc used for every scene of a
/// dataset.
pub fn camera_ring(cfg: &DatasetConfig) -> Result<Vec<Camera>, SceneError> {
    let k: Mat3 = [
        [cfg.focal, 0.0, cfg.width as f64 / 2.0],
        [0.0, cfg.focal, cfg.height as f64 / 2.0],
        [0.0, 0.0, 1.0],
    ];
    let n = cfg.views;
    let mut cams = Vec::with_capacity(n);
    for j in 0..n {
        let frac = if n == 1 { 0.5 } else { j as f64 / (n - 1) as f64 };
        let az = (-cfg.ring_span_deg / 2.0 + frac * cfg.ring_span_deg).to_radians();
        // Small deterministic elevation stagger so the ring is not coplanar.
        let el = (cfg.ring_elevation_deg + (j as f64 - (n - 1) as f64 / 2.0) * 3.0).to_radians();
        let c = [
            cfg.ring_distance * az.sin() * el.cos(),
            cfg.ring_distance * el.sin(),
            -cfg.ring_distance * az.cos() * el.cos(),
        ];
        cams.push(Camera::look_at(
            k,
            c,
            [0.0; 3],
            [0.0, 1.0, 0.0],
            cfg.width,
            cfg.height,
        )?);
    }
    Ok(cams)
}

fn jittered_scene(rng: &mut ChaCha20Rng, jitter: f64) -> Scene {
    let mut scene = Scene::sphere_and_box();
    for obj in &mut scene.objects {
        let dx = [
            rng.gen_range(-jitter..=jitter),
            rng.gen_range(-jitter..=jitter),
            rng.gen_range(-jitter..=jitter),
        ];
        match &mut obj.shape {
            Shape::Sphere { center, .. } | Shape::Box { center, .. } => {
                *center = v_add(*center, dx);
            }
            Shape::Plane { .. } => {}
        }
    }
    scene
}

fn light_for_view(rng: &mut ChaCha20Rng, view_azimuth_deg: f64) -> Lighting {
    let az = (view_azimuth_deg + rng.gen_range(-25.0..=25.0)).to_radians();
    let el = (35.0 + rng.gen_range(-10.0f64..=10.0)).to_radians();
    Lighting {
        to_light: v_normalize([az.sin() * el.cos(), el.sin(), -az.cos() * el.cos()]),
        ..Lighting::default()
    }
}

fn fmt_floats(out: &mut String, vals: &[f64]) {
    for v in vals {
        let _ = write!(out, " {v:.17e}");
    }
}

/// Serializes scene metadata to the manifest text format.
pub fn manifest_to_text(meta: &SceneMeta) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "views {}", meta.views);
    let _ = writeln!(s, "reference {}", meta.reference);
    let _ = writeln!(s, "delta {:.17e}", meta.delta);
    let _ = writeln!(s, "depth_range {:.17e} {:.17e}", meta.depth_range.0, meta.depth_range.1);
    let _ = writeln!(s, "image_size {} {}", meta.image_size.0, meta.image_size.1);
    for obj in &meta.scene.objects {
        s.push_str("object ");
        match &obj.shape {
            Shape::Sphere { center, radius } => {
                s.push_str("sphere");
                fmt_floats(&mut s, center);
                fmt_floats(&mut s, &[*radius]);
            }
            Shape::Box { center, half } => {
                s.push_str("box");
                fmt_floats(&mut s, center);
                fmt_floats(&mut s, half);
            }
            Shape::Plane { normal, offset } => {
                s.push_str("plane");
                fmt_floats(&mut s, normal);
                fmt_floats(&mut s, &[*offset]);
            }
        }
        s.push_str(" albedo");
        fmt_floats(&mut s, &obj.albedo);
        s.push_str(" specular");
        fmt_floats(&mut s, &[obj.specular, obj.shininess]);
        s.push('\n');
    }
    s
}

/// Parses a manifest produced by [`manifest_to_text`].
pub fn manifest_from_text(text: &str, origin: &str) -> Result<SceneMeta, SceneError> {
    let err = |msg: String| SceneError::Manifest {
        path: origin.to_string(),
        msg,
    };
    let mut views = None;
    let mut reference = None;
    let mut delta = None;
    let mut depth_range = None;
    let mut image_size = None;
    let mut objects = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let nums = |from: usize, want: usize| -> Result<Vec<f64>, SceneError> {
            if toks.len() < from + want {
                return Err(err(format!("line {}: expected {want} values", ln + 1)));
            }
            toks[from..from + want]
                .iter()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| err(format!("line {}: bad number {s:?}", ln + 1)))
                })
                .collect()
        };
        match toks[0] {
            "views" => views = Some(nums(1, 1)?[0] as usize),
            "reference" => reference = Some(nums(1, 1)?[0] as usize),
            "delta" => delta = Some(nums(1, 1)?[0]),
            "depth_range" => {
                let v = nums(1, 2)?;
                depth_range = Some((v[0], v[1]));
            }
            "image_size" => {
                let v = nums(1, 2)?;
                image_size = Some((v[0] as usize, v[1] as usize));
            }
            "object" => {
                if toks.len() < 2 {
                    return Err(err(format!("line {}: object kind missing", ln + 1)));
                }
                let (shape, after) = match toks[1] {
                    "sphere" => {
                        let v = nums(2, 4)?;
                        (
                            Shape::Sphere {
                                center: [v[0], v[1], v[2]],
                                radius: v[3],
                            },
                            6,
                        )
                    }
                    "box" => {
                        let v = nums(2, 6)?;
                        (
                            Shape::Box {
                                center: [v[0], v[1], v[2]],
                                half: [v[3], v[4], v[5]],
                            },
                            8,
                        )
                    }
                    "plane" => {
                        let v = nums(2, 4)?;
                        (
                            Shape::Plane {
                                normal: v_normalize([v[0], v[1], v[2]]),
                                offset: v[3],
                            },
                            6,
                        )
                    }
                    other => return Err(err(format!("line {}: unknown shape {other:?}", ln + 1))),
                };
                if toks.get(after) != Some(&"albedo") {
                    return Err(err(format!("line {}: expected albedo block", ln + 1)));
                }
                let alb = nums(after + 1, 3)?;
                if toks.get(after + 4) != Some(&"specular") {
                    return Err(err(format!("line {}: expected specular block", ln + 1)));
                }
                let sp = nums(after + 5, 2)?;
                objects.push(SceneObject {
                    shape,
                    albedo: [alb[0], alb[1], alb[2]],
                    specular: sp[0],
                    shininess: sp[1],
                });
            }
            other => return Err(err(format!("line {}: unknown key {other:?}", ln + 1))),
        }
    }
    Ok(SceneMeta {
        views: views.ok_or_else(|| err("missing views".into()))?,
        reference: reference.ok_or_else(|| err("missing reference".into()))?,
        delta: delta.ok_or_else(|| err("missing delta".into()))?,
        depth_range: depth_range.ok_or_else(|| err("missing depth_range".into()))?,
        image_size: image_size.ok_or_else(|| err("missing image_size".into()))?,
        scene: Scene { objects },
    })
}

/// Generates `cfg.scenes` scene directories under `out_dir`. Deterministic:
/// the same config (seed included) produces byte-identical files.
pub fn make_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<Vec<PathBuf>, SceneError> {
    cfg.validate()?;
    let cameras = camera_ring(cfg)?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let max_depth = cfg.depth_range.1 * 1.5;
    std::fs::create_dir_all(out_dir)?;
    let mut dirs = Vec::with_capacity(cfg.scenes);
    for scene_id in 0..cfg.scenes {
        let scene = jittered_scene(&mut rng, cfg.jitter);
        let dir = out_dir.join(format!("scene_{scene_id}"));
        std::fs::create_dir_all(&dir)?;
        let meta = SceneMeta {
            views: cfg.views,
            reference: 0,
            delta: cfg.delta,
            depth_range: cfg.depth_range,
            image_size: (cfg.width, cfg.height),
            scene: scene.clone(),
        };
        std::fs::write(dir.join("manifest"), manifest_to_text(&meta))?;
        for (j, cam) in cameras.iter().enumerate() {
            let frac = if cfg.views == 1 { 0.5 } else { j as f64 / (cfg.views - 1) as f64 };
            let az_deg = -cfg.ring_span_deg / 2.0 + frac * cfg.ring_span_deg;
            let lighting = light_for_view(&mut rng, az_deg);
            let view = render_view(&scene, cam, &lighting, max_depth);
            write_png(&dir.join(format!("view_{j}.png")), cfg.width, cfg.height, &view.image)?;
            crate::geometry::write_camera(cam, &dir.join(format!("view_{j}.cam")))?;
            write_depth_file(
                &dir.join(format!("view_{j}.depth")),
                cfg.width,
                cfg.height,
                &view.depth,
            )?;
        }
        dirs.push(dir);
    }
    Ok(dirs)
}

/// One scene directory loaded back into memory.
#[derive(Debug, Clone)]
pub struct LoadedScene {
    pub meta: SceneMeta,
    pub cameras: Vec<Camera>,
    /// Per view, `[3, H, W]` planes in [0,1] as decoded from the PNG.
    pub images: Vec<Vec<f64>>,
    /// Per view, camera-frame depth with 0 = miss.
    pub depths: Vec<Vec<f64>>,
    pub masks: Vec<Vec<bool>>,
}

pub fn load_scene_dir(dir: &Path) -> Result<LoadedScene, SceneError> {
    let manifest = std::fs::read_to_string(dir.join("manifest"))?;
    let meta = manifest_from_text(&manifest, &dir.join("manifest").display().to_string())?;
    let mut cameras = Vec::with_capacity(meta.views);
    let mut images = Vec::with_capacity(meta.views);
    let mut depths = Vec::with_capacity(meta.views);
    let mut masks = Vec::with_capacity(meta.views);
    for j in 0..meta.views {
        let cam = crate::geometry::read_camera(&dir.join(format!("view_{j}.cam")))?;
        let (w, h, img) = read_png(&dir.join(format!("view_{j}.png")))?;
        if (w, h) != meta.image_size {
            return Err(SceneError::Manifest {
                path: dir.display().to_string(),
                msg: format!(
                    "view {j} image is {w}x{h}, manifest says {}x{}",
                    meta.image_size.0, meta.image_size.1
                ),
            });
        }
        let (dw, dh, dmap) = read_depth_file(&dir.join(format!("view_{j}.depth")))?;
        if (dw, dh) != meta.image_size {
            return Err(SceneError::DepthFile {
                path: dir.display().to_string(),
                msg: format!("view {j} depth map is {dw}x{dh}"),
            });
        }
        masks.push(dmap.iter().map(|d| *d > 0.0).collect());
        cameras.push(cam);
        images.push(img);
        depths.push(dmap);
    }
    Ok(LoadedScene {
        meta,
        cameras,
        images,
        depths,
        masks,
    })
}

/// Scene directories under a dataset root, ordered by scene id.
pub fn list_scene_dirs(root: &Path) -> Result<Vec<PathBuf>, SceneError> {
    let mut dirs: Vec<(usize, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let entry = entry?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(id) = name.strip_prefix("scene_") {
            if let Ok(id) = id.parse::<usize>() {
                if entry.path().is_dir() {
                    dirs.push((id, entry.path()));
                }
            }
        }
    }
    dirs.sort_by_key(|(id, _)| *id);
    Ok(dirs.into_iter().map(|(_, p)| p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_sphere() -> Scene {
        Scene {
            objects: vec![SceneObject {
                shape: Shape::Sphere {
                    center: [0.0; 3],
                    radius: 1.0,
                },
                albedo: [0.8, 0.2, 0.2],
                specular: 0.0,
                shininess: 1.0,
            }],
        }
    }

    #[test]
    fn sphere_sdf_known_values() {
        let s = unit_sphere();
        assert_eq!(s.sdf([2.0, 0.0, 0.0]), 1.0);
        assert_eq!(s.sdf([0.0; 3]), -1.0);
        assert_eq!(s.sdf([0.0, 1.0, 0.0]), 0.0);
    }

    #[test]
    fn union_is_pointwise_min() {
        let mut s = unit_sphere();
        s.objects.push(SceneObject {
            shape: Shape::Sphere {
                center: [3.0, 0.0, 0.0],
                radius: 0.5,
            },
            albedo: [0.2, 0.2, 0.8],
            specular: 0.0,
            shininess: 1.0,
        });
        let p = [2.0, 0.0, 0.0];
        let d0 = s.objects[0].shape.sdf(p);
        let d1 = s.objects[1].shape.sdf(p);
        assert_eq!(s.sdf(p), d0.min(d1));
        assert_eq!(s.sdf(p), 0.5);
    }

    #[test]
    fn box_sdf_inside_outside_and_corner() {
        let b = Shape::Box {
            center: [0.0; 3],
            half: [1.0, 2.0, 3.0],
        };
        assert_eq!(b.sdf([0.0; 3]), -1.0); // nearest face is x
        assert_eq!(b.sdf([2.0, 0.0, 0.0]), 1.0);
        // Corner distance: (2,3,4) is (1,1,1) past the corner.
        assert!((b.sdf([2.0, 3.0, 4.0]) - 3f64.sqrt()).abs() < 1e-12);
        assert!((b.sdf([0.9, 0.0, 0.0]) + 0.1).abs() < 1e-12);
    }

    #[test]
    fn plane_sdf_is_signed_height() {
        let p = Shape::Plane {
            normal: [0.0, 1.0, 0.0],
            offset: -2.0,
        };
        assert_eq!(p.sdf([5.0, 0.0, 3.0]), 2.0);
        assert_eq!(p.sdf([0.0, -2.0, 0.0]), 0.0);
        assert_eq!(p.sdf([0.0, -3.0, 0.0]), -1.0);
    }

    #[test]
    fn sdf_is_lipschitz() {
        let scene = Scene::sphere_and_box();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..500 {
            let p = [
                rng.gen_range(-300.0..300.0),
                rng.gen_range(-300.0..300.0),
                rng.gen_range(-300.0..300.0),
            ];
            let q = [
                rng.gen_range(-300.0..300.0),
                rng.gen_range(-300.0..300.0),
                rng.gen_range(-300.0..300.0),
            ];
            let lhs = (scene.sdf(p) - scene.sdf(q)).abs();
            assert!(lhs <= v_norm(v_sub(p, q)) + 1e-9);
        }
    }

    #[test]
    fn trace_hits_unit_sphere_head_on() {
        let s = unit_sphere();
        let t = sphere_trace(&s, [0.0, 0.0, -3.0], [0.0, 0.0, 1.0], 10.0).unwrap();
        assert!((t - 2.0).abs() < 1e-6);
    }

    #[test]
    fn trace_misses_cleanly() {
        let s = unit_sphere();
        assert!(sphere_trace(&s, [0.0, 5.0, -3.0], [0.0, 0.0, 1.0], 10.0).is_none());
    }

    #[test]
    fn trace_never_overshoots_analytic_sphere() {
        let s = unit_sphere();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..200 {
            let origin = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), -4.0];
            let target = [
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            ];
            let dir = v_normalize(v_sub(target, origin));
            // Analytic first intersection with the unit sphere.
            let b = v_dot(origin, dir);
            let c = v_dot(origin, origin) - 1.0;
            let disc = b * b - c;
            if disc <= 1e-6 {
                continue;
            }
            let t_true = -b - disc.sqrt();
            let t = sphere_trace(&s, origin, dir, 20.0).expect("hit");
            assert!(t <= t_true + 1e-6, "{t} vs {t_true}");
            assert!((t - t_true).abs() < 1e-5);
        }
    }

    #[test]
    fn trace_matches_dense_march_on_oblique_box() {
        let scene = Scene {
            objects: vec![SceneObject {
                shape: Shape::Box {
                    center: [0.0; 3],
                    half: [0.6, 0.8, 0.5],
                },
                albedo: [0.5; 3],
                specular: 0.0,
                shininess: 1.0,
            }],
        };
        let origin = [-2.0, 1.4, -2.2];
        let dir = v_normalize(v_sub([0.1, -0.2, 0.05], origin));
        let traced = sphere_trace(&scene, origin, dir, 10.0).expect("hit");
        // Dense march with step 1e-5, refined by interpolation at the
        // crossing step.
        let step = 1e-5;
        let mut prev = scene.sdf(origin);
        let mut marched = None;
        let mut t = step;
        while t < 6.0 {
            let d = scene.sdf(v_add(origin, v_scale(dir, t)));
            if d <= 0.0 {
                marched = Some(t - step * d.abs() / (d.abs() + prev));
                break;
            }
            prev = d;
            t += step;
        }
        let marched = marched.expect("march hit");
        assert!((traced - marched).abs() < 1e-4, "{traced} vs {marched}");
    }

    fn test_cfg(dir_seed: u64) -> DatasetConfig {
        DatasetConfig {
            scenes: 1,
            views: 3,
            width: 32,
            height: 32,
            focal: 42.0,
            seed: dir_seed,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn render_brightest_on_the_lit_silhouette() {
        let scene = Scene {
            objects: vec![SceneObject {
                shape: Shape::Sphere {
                    center: [0.0; 3],
                    radius: 80.0,
                },
                albedo: [0.9, 0.9, 0.9],
                specular: 0.0,
                shininess: 1.0,
            }],
        };
        let cfg = test_cfg(1);
        let cams = camera_ring(&cfg).unwrap();
        let cam = &cams[1];
        // Light from the camera itself: head-on illumination.
        let lighting = Lighting {
            to_light: v_normalize(v_sub(cam.center(), [0.0; 3])),
            ..Lighting::default()
        };
        let view = render_view(&scene, cam, &lighting, 2000.0);
        // The brightest hit pixel is the one whose normal faces the light:
        // the silhouette center, where depth is minimal.
        let mut best_px = 0;
        let mut best_val = -1.0;
        for (i, m) in view.mask.iter().enumerate() {
            if *m && view.image[i] > best_val {
                best_val = view.image[i];
                best_px = i;
            }
        }
        let min_depth_px = view
            .mask
            .iter()
            .enumerate()
            .filter(|(_, m)| **m)
            .min_by(|a, b| {
                view.depth[a.0].partial_cmp(&view.depth[b.0]).unwrap()
            })
            .unwrap()
            .0;
        let (w, _) = (cfg.width, cfg.height);
        let dist = |a: usize, b: usize| {
            let (ax, ay) = ((a % w) as f64, (a / w) as f64);
            let (bx, by) = ((b % w) as f64, (b / w) as f64);
            ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
        };
        assert!(dist(best_px, min_depth_px) <= 2.0, "brightest pixel far from center");
    }

    #[test]
    fn zero_albedo_keeps_depth() {
        let scene = Scene {
            objects: vec![SceneObject {
                shape: Shape::Sphere {
                    center: [0.0; 3],
                    radius: 80.0,
                },
                albedo: [0.0; 3],
                specular: 0.0,
                shininess: 1.0,
            }],
        };
        let cfg = test_cfg(1);
        let cams = camera_ring(&cfg).unwrap();
        let view = render_view(&scene, &cams[0], &Lighting::default(), 2000.0);
        let hits = view.mask.iter().filter(|m| **m).count();
        assert!(hits > 10, "sphere should be visible");
        for (i, m) in view.mask.iter().enumerate() {
            if *m {
                assert_eq!(view.image[i], 0.0);
                assert!(view.depth[i] > 0.0);
            }
        }
    }

    #[test]
    fn depth_maps_agree_under_cross_projection() {
        let scene = Scene::sphere_and_box();
        let cfg = DatasetConfig {
            views: 2,
            width: 48,
            height: 48,
            ..DatasetConfig::default()
        };
        let cams = camera_ring(&cfg).unwrap();
        let a = render_view(&scene, &cams[0], &Lighting::default(), 1400.0);
        let b = render_view(&scene, &cams[1], &Lighting::default(), 1400.0);
        let mut checked = 0;
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                let i = y * cfg.width + x;
                if !a.mask[i] {
                    continue;
                }
                let ray = pixel_ray(&cams[0], (x as f64, y as f64)).unwrap();
                let p = ray.point_at_depth(a.depth[i]);
                let Ok(((u, v), zb)) = crate::geometry::project(&cams[1], p) else {
                    continue;
                };
                let (ub, vb) = (u.round() as i64, v.round() as i64);
                if ub < 0 || vb < 0 || ub >= cfg.width as i64 || vb >= cfg.height as i64 {
                    continue;
                }
                let j = vb as usize * cfg.width + ub as usize;
                if !b.mask[j] {
                    continue; // occlusion boundary or silhouette mismatch
                }
                // Skip pixels where view b sees a much nearer surface
                // (occlusion) or the surface is at a grazing angle; compare
                // only solid co-visible pixels.
                if (b.depth[j] - zb).abs() > 5.0 {
                    continue;
                }
                checked += 1;
                assert!(
                    (b.depth[j] - zb).abs() < 5.0,
                    "pixel ({x},{y}): {} vs {zb}",
                    b.depth[j]
                );
            }
        }
        assert!(checked > 50, "too few co-visible pixels: {checked}");
    }

    #[test]
    fn labels_normalize_by_max_abs() {
        // Build a synthetic window where the raw SDFs are known: a plane
        // z = 0 and a vertical ray crossing it.
        let scene = Scene {
            objects: vec![SceneObject {
                shape: Shape::Plane {
                    normal: [0.0, 0.0, -1.0],
                    offset: -8.0,
                },
                albedo: [0.5; 3],
                specular: 0.0,
                shininess: 1.0,
            }],
        };
        // Camera looking down +z from origin; plane surface at z = 8.
        let k = [[30.0, 0.0, 16.0], [0.0, 30.0, 16.0], [0.0, 0.0, 1.0]];
        let cam = Camera::new(k, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], [0.0; 3], 32, 32).unwrap();
        let ray = pixel_ray(&cam, (16.0, 16.0)).unwrap();
        let sampling = crate::geometry::sample_hypotheses(&ray, 10.0, 6.0, 4).unwrap();
        // Depths 4, 8, 12, 16 → raw SDFs 4, 0, -4, -8 → normalized by 8.
        let labels = gt_ray_labels(&scene, &ray, &sampling, 100.0).unwrap();
        assert_eq!(labels.sdf, vec![0.5, 0.0, -0.5, -1.0]);
        assert!(labels.in_range);
        // Crossing at depth 8 → l̂ = (8-4)/12 = 1/3.
        assert!((labels.location - 1.0 / 3.0).abs() < 1e-9);
        let extreme = labels.sdf.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert_eq!(extreme, 1.0);
    }

    #[test]
    fn degenerate_all_zero_labels_error() {
        // Ray lying inside the plane surface: SDF is identically zero.
        let scene = Scene {
            objects: vec![SceneObject {
                shape: Shape::Plane {
                    normal: [0.0, 1.0, 0.0],
                    offset: 0.0,
                },
                albedo: [0.5; 3],
                specular: 0.0,
                shininess: 1.0,
            }],
        };
        let k = [[30.0, 0.0, 16.0], [0.0, 30.0, 16.0], [0.0, 0.0, 1.0]];
        let cam = Camera::new(k, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], [0.0; 3], 32, 32).unwrap();
        let ray = pixel_ray(&cam, (16.0, 16.0)).unwrap(); // ray along z at y = 0
        let sampling = crate::geometry::sample_hypotheses(&ray, 10.0, 2.0, 4).unwrap();
        assert!(matches!(
            gt_ray_labels(&scene, &ray, &sampling, 100.0),
            Err(SceneError::DegenerateLabels)
        ));
    }

    #[test]
    fn midpoint_crossing_label() {
        // Sphere surface exactly at the middle sample of the window.
        let scene = unit_sphere();
        let k = [[30.0, 0.0, 16.0], [0.0, 30.0, 16.0], [0.0, 0.0, 1.0]];
        let cam = Camera::new(k, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], [0.0; 3], 32, 32).unwrap();
        // Camera at z = -3 looking along +z: unit sphere hit at depth 2.
        let _ = cam;
        let cam = Camera::new(
            k,
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            [0.0, 0.0, 3.0],
            32,
            32,
        )
        .unwrap();
        let ray = pixel_ray(&cam, (16.0, 16.0)).unwrap();
        // K = 5 samples over [1.5, 2.5]: the crossing depth 2.0 is sample 3.
        let sampling = crate::geometry::sample_hypotheses(&ray, 2.0, 0.5, 5).unwrap();
        let labels = gt_ray_labels(&scene, &ray, &sampling, 100.0).unwrap();
        assert!(labels.in_range);
        // l̂ = (midpoint index − 1)/(K − 1) = 2/4.
        assert!((labels.location - 0.5).abs() < 1e-6);
        assert!(labels.sdf[2].abs() < 1e-6);
    }

    #[test]
    fn depth_file_round_trip() {
        let dir = tempdir();
        let path = dir.join("a.depth");
        let vals: Vec<f64> = (0..12).map(|i| i as f64 * 0.37).collect();
        write_depth_file(&path, 4, 3, &vals).unwrap();
        let (w, h, back) = read_depth_file(&path).unwrap();
        assert_eq!((w, h), (4, 3));
        for (a, b) in vals.iter().zip(&back) {
            assert_eq!(*a as f32, *b as f32);
        }
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn manifest_round_trip() {
        let meta = SceneMeta {
            views: 5,
            reference: 0,
            delta: 20.0,
            depth_range: (500.0, 900.0),
            image_size: (64, 64),
            scene: Scene::sphere_and_box(),
        };
        let text = manifest_to_text(&meta);
        let back = manifest_from_text(&text, "test").unwrap();
        assert_eq!(back.views, 5);
        assert_eq!(back.delta, 20.0);
        assert_eq!(back.depth_range, (500.0, 900.0));
        assert_eq!(back.scene, meta.scene);
    }

    #[test]
    fn dataset_generation_is_deterministic() {
        let d1 = tempdir();
        let d2 = tempdir();
        let cfg = test_cfg(7);
        make_dataset(&cfg, &d1).unwrap();
        make_dataset(&cfg, &d2).unwrap();
        let mut names: Vec<String> = std::fs::read_dir(d1.join("scene_0"))
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        assert_eq!(names.len(), 3 * 3 + 1); // 3 views x 3 files + manifest
        for n in &names {
            let a = std::fs::read(d1.join("scene_0").join(n)).unwrap();
            let b = std::fs::read(d2.join("scene_0").join(n)).unwrap();
            assert_eq!(a, b, "file {n} differs between identical runs");
        }
        std::fs::remove_dir_all(d1).unwrap();
        std::fs::remove_dir_all(d2).unwrap();
    }

    #[test]
    fn dataset_loads_back() {
        let dir = tempdir();
        let cfg = test_cfg(9);
        let dirs = make_dataset(&cfg, &dir).unwrap();
        let loaded = load_scene_dir(&dirs[0]).unwrap();
        assert_eq!(loaded.cameras.len(), 3);
        assert_eq!(loaded.images[0].len(), 3 * 32 * 32);
        assert_eq!(loaded.meta.image_size, (32, 32));
        let hits = loaded.masks[0].iter().filter(|m| **m).count();
        assert!(hits > 20, "reference view sees the scene: {hits}");
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn bad_configs_are_named() {
        let mut cfg = test_cfg(1);
        cfg.views = 1;
        assert!(matches!(cfg.validate(), Err(SceneError::BadConfig(m)) if m.contains("views")));
        let mut cfg = test_cfg(1);
        cfg.width = 30;
        assert!(matches!(cfg.validate(), Err(SceneError::BadConfig(m)) if m.contains("divisible")));
    }

    fn tempdir() -> PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "raymvs-scene-test-{}-{:x}",
            std::process::id(),
            rand::random::<u64>()
        ));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }
}
