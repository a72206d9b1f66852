//! Pinhole cameras, rays, plane-sweep warps, epipolar lines, interpolation,
//! and the linear maps between metric depth and normalized ray coordinates.
//!
//! Conventions, used consistently by every module:
//! - World-to-camera transform `x_cam = R x_world + t`; camera center is
//!   `-R^T t`.
//! - Intrinsics are zero-skew upper-triangular: pixel u = fx x/z + cx.
//! - Pixel coordinates index the sample lattice directly: integer (u, v) is
//!   the stored sample, no half-pixel offset.
//! - Depth along a ray is camera-frame z, not Euclidean ray length, so depth
//!   maps compose with fronto-parallel sweep planes.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("camera: {0}")]
    InvalidCamera(String),
    #[error("pixel ({0}, {1}) outside {2}x{3} image")]
    OutOfBounds(f64, f64, usize, usize),
    #[error("point behind camera (z = {0})")]
    BehindCamera(f64),
    #[error("epipolar line undefined: camera centers coincide")]
    CoincidentCenters,
    #[error("epipolar line degenerate: pixel ray passes through the other camera center")]
    DegenerateLine,
    #[error("ray sampling: {0}")]
    BadSampling(String),
    #[error("camera file {path}: {msg}")]
    Parse { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub fn v_add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn v_sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn v_scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn v_dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn v_cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn v_norm(a: Vec3) -> f64 {
    v_dot(a, a).sqrt()
}

pub fn v_normalize(a: Vec3) -> Vec3 {
    v_scale(a, 1.0 / v_norm(a))
}

pub fn m_mul_v(m: &Mat3, v: Vec3) -> Vec3 {
    [v_dot(m[0], v), v_dot(m[1], v), v_dot(m[2], v)]
}

pub fn m_transpose(m: &Mat3) -> Mat3 {
    [
        [m[0][0], m[1][0], m[2][0]],
        [m[0][1], m[1][1], m[2][1]],
        [m[0][2], m[1][2], m[2][2]],
    ]
}

pub fn m_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let bt = m_transpose(b);
    let mut out = [[0.0; 3]; 3];
    for (i, row) in a.iter().enumerate() {
        for (j, col) in bt.iter().enumerate() {
            out[i][j] = v_dot(*row, *col);
        }
    }
    out
}

pub fn m_det(m: &Mat3) -> f64 {
    v_dot(m[0], v_cross(m[1], m[2]))
}

/// Calibrated pinhole camera with a world-to-camera pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    k: Mat3,
    r: Mat3,
    t: Vec3,
    width: usize,
    height: usize,
}

impl Camera {
    pub fn new(k: Mat3, r: Mat3, t: Vec3, width: usize, height: usize) -> Result<Camera, GeomError> {
        if width == 0 || height == 0 {
            return Err(GeomError::InvalidCamera("zero image dimension".into()));
        }
        if k[0][0] <= 0.0 || k[1][1] <= 0.0 {
            return Err(GeomError::InvalidCamera(format!(
                "focal lengths must be positive, got ({}, {})",
                k[0][0], k[1][1]
            )));
        }
        if k[1][0] != 0.0 || k[2][0] != 0.0 || k[2][1] != 0.0 || k[0][1] != 0.0 || k[2][2] != 1.0 {
            return Err(GeomError::InvalidCamera(
                "intrinsics must be zero-skew upper-triangular with K[2][2] = 1".into(),
            ));
        }
        let (cx, cy) = (k[0][2], k[1][2]);
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(GeomError::InvalidCamera(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        let rt_r = m_mul(&m_transpose(&r), &r);
        for (i, row) in rt_r.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                if (v - want).abs() > 1e-8 {
                    return Err(GeomError::InvalidCamera(format!(
                        "rotation is not orthonormal (R^T R deviates by {:.3e})",
                        (v - want).abs()
                    )));
                }
            }
        }
        if (m_det(&r) - 1.0).abs() > 1e-8 {
            return Err(GeomError::InvalidCamera(format!(
                "rotation determinant {} != +1",
                m_det(&r)
            )));
        }
        Ok(Camera {
            k,
            r,
            t,
            width,
            height,
        })
    }

    pub fn intrinsics(&self) -> &Mat3 {
        &self.k
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.r
    }

    pub fn translation(&self) -> Vec3 {
        self.t
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vec3 {
        v_scale(m_mul_v(&m_transpose(&self.r), self.t), -1.0)
    }

    pub fn world_to_cam(&self, p: Vec3) -> Vec3 {
        v_add(m_mul_v(&self.r, p), self.t)
    }

    /// Camera at `center` looking toward `target`, with image x along
    /// world `up` × forward and image y completing a right-handed frame
    /// (y points "down" when `up` points up).
    pub fn look_at(
        k: Mat3,
        center: Vec3,
        target: Vec3,
        up: Vec3,
        width: usize,
        height: usize,
    ) -> Result<Camera, GeomError> {
        let fwd = v_sub(target, center);
        if v_norm(fwd) < 1e-12 {
            return Err(GeomError::InvalidCamera("look_at target equals center".into()));
        }
        let fwd = v_normalize(fwd);
        let right = v_cross(up, fwd);
        if v_norm(right) < 1e-9 {
            return Err(GeomError::InvalidCamera(
                "look_at up vector parallel to the view direction".into(),
            ));
        }
        let right = v_normalize(right);
        let down = v_cross(fwd, right);
        let r = [right, down, fwd];
        let t = v_scale(m_mul_v(&r, center), -1.0);
        Camera::new(k, r, t, width, height)
    }

    /// Camera scaled to a smaller pixel grid by an integer factor. Used for
    /// reduced-resolution cost volumes; sample lattices align at (0, 0).
    pub fn downscaled(&self, factor: usize) -> Result<Camera, GeomError> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(GeomError::InvalidCamera(format!(
                "image {}x{} not divisible by scale factor {factor}",
                self.width, self.height
            )));
        }
        let f = factor as f64;
        let mut k = self.k;
        k[0][0] /= f;
        k[1][1] /= f;
        k[0][2] /= f;
        k[1][2] /= f;
        Camera::new(k, self.r, self.t, self.width / factor, self.height / factor)
    }
}

/// A world-space viewing ray cast through one reference-image pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit direction in world coordinates.
    pub direction: Vec3,
    /// Pixel this ray was cast through.
    pub pixel: (f64, f64),
    /// Camera-frame z advance per unit step along `direction`; converts
    /// between depth values and ray arc length.
    depth_rate: f64,
}

impl Ray {
    /// World point whose camera-frame depth along this ray is `depth`.
    pub fn point_at_depth(&self, depth: f64) -> Vec3 {
        v_add(self.origin, v_scale(self.direction, depth / self.depth_rate))
    }

    /// World point at Euclidean arc length `s`.
    pub fn point_at(&self, s: f64) -> Vec3 {
        v_add(self.origin, v_scale(self.direction, s))
    }

    pub fn depth_rate(&self) -> f64 {
        self.depth_rate
    }
}

/// Ray through the given pixel. The pixel must lie inside the image.
pub fn pixel_ray(camera: &Camera, pixel: (f64, f64)) -> Result<Ray, GeomError> {
    let (u, v) = pixel;
    if !(0.0..camera.width as f64).contains(&u) || !(0.0..camera.height as f64).contains(&v) {
        return Err(GeomError::OutOfBounds(u, v, camera.width, camera.height));
    }
    let k = &camera.k;
    let dir_cam = [(u - k[0][2]) / k[0][0], (v - k[1][2]) / k[1][1], 1.0];
    let dir_world = v_normalize(m_mul_v(&m_transpose(&camera.r), dir_cam));
    let depth_rate = v_dot(camera.r[2], dir_world);
    Ok(Ray {
        origin: camera.center(),
        direction: dir_world,
        pixel,
        depth_rate,
    })
}

/// Perspective projection: pixel coordinates and camera-frame depth.
pub fn project(camera: &Camera, p: Vec3) -> Result<((f64, f64), f64), GeomError> {
    let pc = camera.world_to_cam(p);
    if pc[2] <= 0.0 {
        return Err(GeomError::BehindCamera(pc[2]));
    }
    let k = &camera.k;
    Ok((
        (
            k[0][0] * pc[0] / pc[2] + k[0][2],
            k[1][1] * pc[1] / pc[2] + k[1][2],
        ),
        pc[2],
    ))
}

/// Plane-induced warp: unprojects `ref_pixel` to the fronto-parallel plane at
/// `plane_depth` in the reference frame, then projects into the source view.
/// A warped point behind the source camera is invalid (`BehindCamera`), which
/// cost-volume construction treats as out-of-view rather than an error.
pub fn homography_warp(
    ref_camera: &Camera,
    src_camera: &Camera,
    plane_depth: f64,
    ref_pixel: (f64, f64),
) -> Result<(f64, f64), GeomError> {
    if plane_depth <= 0.0 {
        return Err(GeomError::BadSampling(format!(
            "plane depth must be positive, got {plane_depth}"
        )));
    }
    let k = &ref_camera.k;
    let (u, v) = ref_pixel;
    let pc = [
        (u - k[0][2]) / k[0][0] * plane_depth,
        (v - k[1][2]) / k[1][1] * plane_depth,
        plane_depth,
    ];
    let world = m_mul_v(&m_transpose(&ref_camera.r), v_sub(pc, ref_camera.t));
    project(src_camera, world).map(|(px, _)| px)
}

/// Epipolar line of `ref_pixel` in the source image, as normalized
/// coefficients (a, b, c) with a² + b² = 1: a point (u, v) is on the line
/// when a·u + b·v + c = 0.
///
/// Built projectively as the join of the epipole and the ray's infinity
/// point, so it is defined even when one of them lies behind the source
/// camera.
pub fn epipolar_line(
    ref_camera: &Camera,
    src_camera: &Camera,
    ref_pixel: (f64, f64),
) -> Result<(f64, f64, f64), GeomError> {
    let c_ref = ref_camera.center();
    let c_src = src_camera.center();
    if v_norm(v_sub(c_ref, c_src)) < 1e-12 {
        return Err(GeomError::CoincidentCenters);
    }
    // Homogeneous image of the reference center (epipole), may be at infinity
    // or "behind"; projective join still works.
    let e = m_mul_v(&src_camera.k, src_camera.world_to_cam(c_ref));
    // Homogeneous image of the ray direction (point at infinity on the ray).
    let k = &ref_camera.k;
    let (u, v) = ref_pixel;
    let dir_ref = [(u - k[0][2]) / k[0][0], (v - k[1][2]) / k[1][1], 1.0];
    let dir_world = m_mul_v(&m_transpose(&ref_camera.r), dir_ref);
    let m = m_mul_v(&src_camera.k, m_mul_v(&src_camera.r, dir_world));
    let line = v_cross(e, m);
    let scale = (line[0] * line[0] + line[1] * line[1]).sqrt();
    if scale < 1e-12 {
        return Err(GeomError::DegenerateLine);
    }
    let mut l = v_scale(line, 1.0 / scale);
    // Canonical sign for determinism.
    if l[0] < 0.0 || (l[0] == 0.0 && l[1] < 0.0) {
        l = v_scale(l, -1.0);
    }
    Ok((l[0], l[1], l[2]))
}

/// Distance of a point from a normalized line.
pub fn line_point_distance(line: (f64, f64, f64), p: (f64, f64)) -> f64 {
    (line.0 * p.0 + line.1 * p.1 + line.2).abs()
}

/// The four bilinear taps for continuous position (u, v) on a `w`x`h` grid,
/// as flat indices `y*w + x` with weights summing to 1. `None` when the
/// position leaves the sample lattice (out of view).
pub fn bilinear_taps(w: usize, h: usize, u: f64, v: f64) -> Option<[(u32, f64); 4]> {
    if !(0.0..=(w - 1) as f64).contains(&u) || !(0.0..=(h - 1) as f64).contains(&v) {
        return None;
    }
    let x0 = (u.floor() as usize).min(w - 2.min(w - 1));
    let y0 = (v.floor() as usize).min(h - 2.min(h - 1));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = u - x0 as f64;
    let fy = v - y0 as f64;
    Some([
        ((y0 * w + x0) as u32, (1.0 - fx) * (1.0 - fy)),
        ((y0 * w + x1) as u32, fx * (1.0 - fy)),
        ((y1 * w + x0) as u32, (1.0 - fx) * fy),
        ((y1 * w + x1) as u32, fx * fy),
    ])
}

/// The eight trilinear taps for continuous position (x, y, z) on a
/// `w`x`h`x`d` grid (z slowest), as flat indices `(z*h + y)*w + x`.
pub fn trilinear_taps(
    w: usize,
    h: usize,
    d: usize,
    x: f64,
    y: f64,
    z: f64,
) -> Option<[(u32, f64); 8]> {
    if !(0.0..=(w - 1) as f64).contains(&x)
        || !(0.0..=(h - 1) as f64).contains(&y)
        || !(0.0..=(d - 1) as f64).contains(&z)
    {
        return None;
    }
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let z0 = (z.floor() as usize).min(d.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let z1 = (z0 + 1).min(d - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let fz = z - z0 as f64;
    let at = |zz: usize, yy: usize, xx: usize| ((zz * h + yy) * w + xx) as u32;
    Some([
        (at(z0, y0, x0), (1.0 - fx) * (1.0 - fy) * (1.0 - fz)),
        (at(z0, y0, x1), fx * (1.0 - fy) * (1.0 - fz)),
        (at(z0, y1, x0), (1.0 - fx) * fy * (1.0 - fz)),
        (at(z0, y1, x1), fx * fy * (1.0 - fz)),
        (at(z1, y0, x0), (1.0 - fx) * (1.0 - fy) * fz),
        (at(z1, y0, x1), fx * (1.0 - fy) * fz),
        (at(z1, y1, x0), (1.0 - fx) * fy * fz),
        (at(z1, y1, x1), fx * fy * fz),
    ])
}

/// Bilinear sample of a `[C, H, W]` map. Out-of-view positions return a zero
/// vector with the flag cleared; the flag is `true` when the fetch is valid.
pub fn bilinear_fetch(map: &[f64], c: usize, h: usize, w: usize, u: f64, v: f64) -> (Vec<f64>, bool) {
    assert_eq!(map.len(), c * h * w, "feature map length mismatch");
    match bilinear_taps(w, h, u, v) {
        None => (vec![0.0; c], false),
        Some(taps) => {
            let mut out = vec![0.0; c];
            for (ch, o) in out.iter_mut().enumerate() {
                let plane = &map[ch * h * w..(ch + 1) * h * w];
                *o = taps.iter().map(|&(i, wt)| plane[i as usize] * wt).sum();
            }
            (out, true)
        }
    }
}

/// Trilinear sample of a `[C, D, H, W]` volume at volume coordinates
/// (x, y, z) = (width, height, depth axes). Out-of-volume → zeros + false.
pub fn trilinear_fetch(
    volume: &[f64],
    c: usize,
    d: usize,
    h: usize,
    w: usize,
    x: f64,
    y: f64,
    z: f64,
) -> (Vec<f64>, bool) {
    assert_eq!(volume.len(), c * d * h * w, "volume length mismatch");
    match trilinear_taps(w, h, d, x, y, z) {
        None => (vec![0.0; c], false),
        Some(taps) => {
            let mut out = vec![0.0; c];
            for (ch, o) in out.iter_mut().enumerate() {
                let block = &volume[ch * d * h * w..(ch + 1) * d * h * w];
                *o = taps.iter().map(|&(i, wt)| block[i as usize] * wt).sum();
            }
            (out, true)
        }
    }
}

/// Uniform depth hypotheses around a coarse estimate.
#[derive(Debug, Clone)]
pub struct RaySampling {
    pub coarse_depth: f64,
    pub delta: f64,
    pub count: usize,
    /// Metric camera-frame depths, strictly increasing, spanning ±δ.
    pub depths: Vec<f64>,
    /// World points; point k has camera-frame depth `depths[k]`.
    pub points: Vec<Vec3>,
    /// Normalized per-sample coordinates k/K for k = 1..K.
    pub normalized: Vec<f64>,
}

/// Samples K depths `coarse − δ + (k−1)·2δ/(K−1)` (inclusive endpoints) and
/// places the corresponding world points along the ray.
pub fn sample_hypotheses(
    ray: &Ray,
    coarse_depth: f64,
    delta: f64,
    k: usize,
) -> Result<RaySampling, GeomError> {
    if k < 2 {
        return Err(GeomError::BadSampling(format!("K >= 2 required, got {k}")));
    }
    if delta <= 0.0 {
        return Err(GeomError::BadSampling(format!(
            "half-range must be positive, got {delta}"
        )));
    }
    if coarse_depth - delta <= 0.0 {
        return Err(GeomError::BadSampling(format!(
            "near depth {} must be positive",
            coarse_depth - delta
        )));
    }
    let step = 2.0 * delta / (k - 1) as f64;
    let mut depths = Vec::with_capacity(k);
    let mut points = Vec::with_capacity(k);
    let mut normalized = Vec::with_capacity(k);
    for i in 0..k {
        let d = coarse_depth - delta + i as f64 * step;
        depths.push(d);
        points.push(ray.point_at_depth(d));
        normalized.push((i + 1) as f64 / k as f64);
    }
    Ok(RaySampling {
        coarse_depth,
        delta,
        count: k,
        depths,
        points,
        normalized,
    })
}

static CLAMP_WARNINGS: AtomicU64 = AtomicU64::new(0);

/// Times a normalized location fell outside [0,1] and was clamped.
pub fn location_clamp_warnings() -> u64 {
    CLAMP_WARNINGS.load(Ordering::Relaxed)
}

/// Maps a normalized zero-crossing location l ∈ [0,1] onto the sampled depth
/// segment: depth = (coarse − δ) + l·2δ. Out-of-range l is clamped and
/// counted.
pub fn location_to_depth(l: f64, coarse_depth: f64, delta: f64) -> f64 {
    let l = if !(0.0..=1.0).contains(&l) {
        CLAMP_WARNINGS.fetch_add(1, Ordering::Relaxed);
        l.clamp(0.0, 1.0)
    } else {
        l
    };
    (coarse_depth - delta) + l * 2.0 * delta
}

/// Inverse of [`location_to_depth`]: the normalized location of a metric
/// depth, clamped to [0,1]. The second value is false when the depth fell
/// outside the ±δ window (the label is then the clamped boundary).
pub fn depth_to_location(depth: f64, coarse_depth: f64, delta: f64) -> (f64, bool) {
    let l = (depth - (coarse_depth - delta)) / (2.0 * delta);
    let in_range = (0.0..=1.0).contains(&l);
    (l.clamp(0.0, 1.0), in_range)
}

fn fmt_row(out: &mut String, label: &str, vals: &[f64]) {
    out.push_str(label);
    for v in vals {
        // Round-trip exact float text.
        let _ = write!(out, " {v:.17e}");
    }
    out.push('\n');
}

/// Serializes a camera to the text format: rows `K` (9 values, row-major),
/// `R` (9), `t` (3), `size` (width height).
pub fn camera_to_text(cam: &Camera) -> String {
    let mut s = String::new();
    let k: Vec<f64> = cam.k.iter().flatten().copied().collect();
    let r: Vec<f64> = cam.r.iter().flatten().copied().collect();
    fmt_row(&mut s, "K", &k);
    fmt_row(&mut s, "R", &r);
    fmt_row(&mut s, "t", &cam.t);
    let _ = writeln!(s, "size {} {}", cam.width, cam.height);
    s
}

/// Parses the camera text format; see [`camera_to_text`].
pub fn camera_from_text(text: &str, origin: &str) -> Result<Camera, GeomError> {
    let err = |msg: String| GeomError::Parse {
        path: origin.to_string(),
        msg,
    };
    let mut k: Option<Vec<f64>> = None;
    let mut r: Option<Vec<f64>> = None;
    let mut t: Option<Vec<f64>> = None;
    let mut size: Option<(usize, usize)> = None;
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let label = it.next().unwrap();
        let rest: Vec<&str> = it.collect();
        let parse_floats = |want: usize| -> Result<Vec<f64>, GeomError> {
            if rest.len() != want {
                return Err(err(format!(
                    "line {}: row {label} needs {want} values, got {}",
                    ln + 1,
                    rest.len()
                )));
            }
            rest.iter()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| err(format!("line {}: bad number {s:?}", ln + 1)))
                })
                .collect()
        };
        match label {
            "K" => k = Some(parse_floats(9)?),
            "R" => r = Some(parse_floats(9)?),
            "t" => t = Some(parse_floats(3)?),
            "size" => {
                let v = parse_floats(2)?;
                if v[0].fract() != 0.0 || v[1].fract() != 0.0 || v[0] <= 0.0 || v[1] <= 0.0 {
                    return Err(err(format!("line {}: size must be positive integers", ln + 1)));
                }
                size = Some((v[0] as usize, v[1] as usize));
            }
            other => return Err(err(format!("line {}: unknown row {other:?}", ln + 1))),
        }
    }
    let k = k.ok_or_else(|| err("missing K row".into()))?;
    let r = r.ok_or_else(|| err("missing R row".into()))?;
    let t = t.ok_or_else(|| err("missing t row".into()))?;
    let (w, h) = size.ok_or_else(|| err("missing size row".into()))?;
    let to_mat = |v: &[f64]| -> Mat3 {
        [
            [v[0], v[1], v[2]],
            [v[3], v[4], v[5]],
            [v[6], v[7], v[8]],
        ]
    };
    Camera::new(to_mat(&k), to_mat(&r), [t[0], t[1], t[2]], w, h)
}

pub fn write_camera(cam: &Camera, path: &Path) -> Result<(), GeomError> {
    Ok(std::fs::write(path, camera_to_text(cam))?)
}

pub fn read_camera(path: &Path) -> Result<Camera, GeomError> {
    let text = std::fs::read_to_string(path)?;
    camera_from_text(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    const I3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

    fn identity_cam() -> Camera {
        let k = [[100.0, 0.0, 50.0], [0.0, 100.0, 50.0], [0.0, 0.0, 1.0]];
        Camera::new(k, I3, [0.0; 3], 100, 100).unwrap()
    }

    /// Rotation about the y axis by `a` radians.
    fn rot_y(a: f64) -> Mat3 {
        [
            [a.cos(), 0.0, a.sin()],
            [0.0, 1.0, 0.0],
            [-a.sin(), 0.0, a.cos()],
        ]
    }

    fn posed_cam() -> Camera {
        let k = [[90.0, 0.0, 40.0], [0.0, 85.0, 30.0], [0.0, 0.0, 1.0]];
        let r = rot_y(0.3);
        Camera::new(k, r, [12.0, -5.0, 30.0], 80, 64).unwrap()
    }

    #[test]
    fn principal_point_ray_is_optical_axis() {
        let ray = pixel_ray(&identity_cam(), (50.0, 50.0)).unwrap();
        assert!((ray.direction[0]).abs() < 1e-15);
        assert!((ray.direction[1]).abs() < 1e-15);
        assert!((ray.direction[2] - 1.0).abs() < 1e-15);
        assert_eq!(ray.origin, [0.0; 3]);
    }

    #[test]
    fn off_axis_ray_matches_hand_unprojection() {
        // focal 100, principal (50,50): pixel (99,50) unprojects along
        // (0.49, 0, 1). (The spec's (150,50) example pixel lies outside this
        // 100px image; same formula, in-bounds operand.)
        let ray = pixel_ray(&identity_cam(), (99.0, 50.0)).unwrap();
        let want = v_normalize([0.49, 0.0, 1.0]);
        for i in 0..3 {
            assert!((ray.direction[i] - want[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn unproject_formula_holds_at_larger_sensor() {
        // The spec's literal example: focal 100, principal (50,50), pixel
        // (150,50) → direction ∝ (1,0,1).
        let k = [[100.0, 0.0, 50.0], [0.0, 100.0, 50.0], [0.0, 0.0, 1.0]];
        let cam = Camera::new(k, I3, [0.0; 3], 200, 100).unwrap();
        let ray = pixel_ray(&cam, (150.0, 50.0)).unwrap();
        let want = v_normalize([1.0, 0.0, 1.0]);
        for i in 0..3 {
            assert!((ray.direction[i] - want[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn projection_round_trips_through_rays() {
        let cam = posed_cam();
        for &(u, v) in &[(0.0, 0.0), (79.0, 63.0), (13.25, 41.75), (40.0, 30.0)] {
            let ray = pixel_ray(&cam, (u, v)).unwrap();
            for &s in &[0.5, 5.0, 211.0] {
                let ((pu, pv), _) = project(&cam, ray.point_at(s)).unwrap();
                assert!((pu - u).abs() < 1e-6, "{u},{v} at {s}: {pu}");
                assert!((pv - v).abs() < 1e-6, "{u},{v} at {s}: {pv}");
            }
        }
    }

    #[test]
    fn identity_projection_hits_principal_point() {
        let ((u, v), d) = project(&identity_cam(), [0.0, 0.0, 1.0]).unwrap();
        assert_eq!((u, v), (50.0, 50.0));
        assert_eq!(d, 1.0);
    }

    #[test]
    fn projection_is_scale_invariant_in_camera_frame() {
        let cam = posed_cam();
        // Scale a camera-frame point by 3 and map back to world: same pixel.
        let pc = [0.2, -0.1, 2.0];
        let world = |p: Vec3| m_mul_v(&m_transpose(cam.rotation()), v_sub(p, cam.translation()));
        let (px1, _) = project(&cam, world(pc)).unwrap();
        let (px2, _) = project(&cam, world(v_scale(pc, 3.0))).unwrap();
        assert!((px1.0 - px2.0).abs() < 1e-9);
        assert!((px1.1 - px2.1).abs() < 1e-9);
    }

    #[test]
    fn projection_matches_two_step_oracle() {
        let cam = posed_cam();
        let p = [3.0, -2.0, 44.0];
        let pc = v_add(m_mul_v(cam.rotation(), p), cam.translation());
        let k = cam.intrinsics();
        let want = (
            k[0][0] * pc[0] / pc[2] + k[0][2],
            k[1][1] * pc[1] / pc[2] + k[1][2],
        );
        let ((u, v), d) = project(&cam, p).unwrap();
        assert!((u - want.0).abs() < 1e-12);
        assert!((v - want.1).abs() < 1e-12);
        assert!((d - pc[2]).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_point_is_rejected() {
        assert!(matches!(
            project(&identity_cam(), [0.0, 0.0, -1.0]),
            Err(GeomError::BehindCamera(_))
        ));
    }

    #[test]
    fn warp_to_same_camera_is_identity() {
        let cam = posed_cam();
        for &(u, v) in &[(1.0, 2.0), (40.5, 30.25), (79.0, 63.0)] {
            for &d in &[0.5, 10.0, 300.0] {
                let (wu, wv) = homography_warp(&cam, &cam, d, (u, v)).unwrap();
                assert!((wu - u).abs() < 1e-9);
                assert!((wv - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rectified_stereo_warp_is_disparity_shift() {
        let k = [[100.0, 0.0, 50.0], [0.0, 100.0, 50.0], [0.0, 0.0, 1.0]];
        let ref_cam = Camera::new(k, I3, [0.0; 3], 100, 100).unwrap();
        // Source shifted along +x in world: t = -R·C = (-0.3, 0, 0).
        let src_cam = Camera::new(k, I3, [-0.3, 0.0, 0.0], 100, 100).unwrap();
        let d = 2.0;
        let (wu, wv) = homography_warp(&ref_cam, &src_cam, d, (50.0, 50.0)).unwrap();
        // Shift = f·t_x/d = 100·(-0.3)/2 = -15.
        assert!((wu - 35.0).abs() < 1e-9);
        assert!((wv - 50.0).abs() < 1e-9);
    }

    /// A two-camera rig converging on the origin from distance ~24.
    fn convergent_pair() -> (Camera, Camera) {
        let k = [[95.0, 0.0, 42.0], [0.0, 95.0, 33.0], [0.0, 0.0, 1.0]];
        let up = [0.0, 1.0, 0.0];
        let a = Camera::look_at(k, [6.0, 3.0, -24.0], [0.0; 3], up, 80, 64).unwrap();
        let b = Camera::look_at(k, [-8.0, -2.0, -22.0], [0.0; 3], up, 80, 64).unwrap();
        (a, b)
    }

    #[test]
    fn warp_matches_unproject_project_oracle() {
        let (ref_cam, src_cam) = convergent_pair();
        for &(u, v) in &[(10.0, 10.0), (60.25, 48.5)] {
            for &d in &[5.0, 17.0, 120.0] {
                let ray = pixel_ray(&ref_cam, (u, v)).unwrap();
                let p = ray.point_at_depth(d);
                let ((ou, ov), _) = project(&src_cam, p).unwrap();
                let (wu, wv) = homography_warp(&ref_cam, &src_cam, d, (u, v)).unwrap();
                assert!((wu - ou).abs() < 1e-6);
                assert!((wv - ov).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rectified_epipolar_line_is_the_pixel_row() {
        let k = [[100.0, 0.0, 50.0], [0.0, 100.0, 50.0], [0.0, 0.0, 1.0]];
        let ref_cam = Camera::new(k, I3, [0.0; 3], 100, 100).unwrap();
        let src_cam = Camera::new(k, I3, [-0.3, 0.0, 0.0], 100, 100).unwrap();
        let (a, b, c) = epipolar_line(&ref_cam, &src_cam, (20.0, 37.0)).unwrap();
        // Horizontal line v = 37: coefficients (0, ±1, ∓37).
        assert!(a.abs() < 1e-12);
        assert!((b.abs() - 1.0).abs() < 1e-12);
        assert!((c / b + 37.0).abs() < 1e-9);
    }

    #[test]
    fn warped_points_lie_on_epipolar_line() {
        let (ref_cam, src_cam) = convergent_pair();
        let px = (25.0, 40.0);
        let line = epipolar_line(&ref_cam, &src_cam, px).unwrap();
        for &d in &[0.5, 1.0, 2.0, 10.0] {
            let w = homography_warp(&ref_cam, &src_cam, d, px).unwrap();
            assert!(line_point_distance(line, w) < 1e-6, "depth {d}");
        }
    }

    #[test]
    fn epipolar_line_matches_two_point_construction() {
        let (ref_cam, src_cam) = convergent_pair();
        let px = (25.0, 40.0);
        let (a, b, c) = epipolar_line(&ref_cam, &src_cam, px).unwrap();
        let p1 = homography_warp(&ref_cam, &src_cam, 3.0, px).unwrap();
        let p2 = homography_warp(&ref_cam, &src_cam, 60.0, px).unwrap();
        // Join of the two warped points, same normalization.
        let join = v_cross([p1.0, p1.1, 1.0], [p2.0, p2.1, 1.0]);
        let s = (join[0] * join[0] + join[1] * join[1]).sqrt();
        let mut j = v_scale(join, 1.0 / s);
        if j[0] < 0.0 || (j[0] == 0.0 && j[1] < 0.0) {
            j = v_scale(j, -1.0);
        }
        assert!((a - j[0]).abs() < 1e-8);
        assert!((b - j[1]).abs() < 1e-8);
        assert!((c - j[2]).abs() < 1e-8);
    }

    #[test]
    fn coincident_centers_are_rejected() {
        let cam = posed_cam();
        assert!(matches!(
            epipolar_line(&cam, &cam, (10.0, 10.0)),
            Err(GeomError::CoincidentCenters)
        ));
    }

    #[test]
    fn bilinear_fetch_examples() {
        // 1-channel 2x2 map [[1,2],[3,4]].
        let map = [1.0, 2.0, 3.0, 4.0];
        let (v, ok) = bilinear_fetch(&map, 1, 2, 2, 1.0, 0.0);
        assert!(ok);
        assert_eq!(v[0], 2.0);
        let (v, ok) = bilinear_fetch(&map, 1, 2, 2, 0.5, 0.5);
        assert!(ok);
        assert_eq!(v[0], 2.5);
        // (0.25, 0.75): rows blend to 1+0.25 = 1.25 and 3.25; 0.75 toward
        // the second row → 2.75.
        let (v, ok) = bilinear_fetch(&map, 1, 2, 2, 0.25, 0.75);
        assert!(ok);
        assert!((v[0] - 2.75).abs() < 1e-15);
        let (v, ok) = bilinear_fetch(&map, 1, 2, 2, -0.01, 0.0);
        assert!(!ok);
        assert_eq!(v[0], 0.0);
        let (_, ok) = bilinear_fetch(&map, 1, 2, 2, 1.01, 0.5);
        assert!(!ok);
    }

    #[test]
    fn trilinear_fetch_examples() {
        // 2x2x2 block with values 0..8 at lattice corners.
        let vol: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let (v, ok) = trilinear_fetch(&vol, 1, 2, 2, 2, 1.0, 0.0, 1.0);
        assert!(ok);
        assert_eq!(v[0], 5.0);
        let eq = Tensor8([0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let (x, y, z) = (0.3, 0.6, 0.85);
        let (v, ok) = trilinear_fetch(&vol, 1, 2, 2, 2, x, y, z);
        assert!(ok);
        assert!((v[0] - eq.trilinear(x, y, z)).abs() < 1e-14);
        // Cube center of equal values.
        let ones = vec![7.5; 8];
        let (v, ok) = trilinear_fetch(&ones, 1, 2, 2, 2, 0.5, 0.5, 0.5);
        assert!(ok);
        assert!((v[0] - 7.5).abs() < 1e-15);
        let (_, ok) = trilinear_fetch(&vol, 1, 2, 2, 2, 0.5, 0.5, 1.5);
        assert!(!ok);
    }

    /// Straight-line 8-term trilinear oracle over a 2x2x2 block.
    struct Tensor8([f64; 8]);
    impl Tensor8 {
        fn trilinear(&self, x: f64, y: f64, z: f64) -> f64 {
            let mut acc = 0.0;
            for dz in 0..2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let w = (if dx == 1 { x } else { 1.0 - x })
                            * (if dy == 1 { y } else { 1.0 - y })
                            * (if dz == 1 { z } else { 1.0 - z });
                        acc += w * self.0[(dz * 2 + dy) * 2 + dx];
                    }
                }
            }
            acc
        }
    }

    #[test]
    fn hypothesis_sampling_spans_the_window() {
        let cam = posed_cam();
        let ray = pixel_ray(&cam, (33.0, 21.0)).unwrap();
        let s = sample_hypotheses(&ray, 500.0, 20.0, 16).unwrap();
        assert_eq!(s.depths.len(), 16);
        assert!((s.depths[0] - 480.0).abs() < 1e-12);
        assert!((s.depths[15] - 520.0).abs() < 1e-12);
        let step = 40.0 / 15.0;
        for w in s.depths.windows(2) {
            assert!((w[1] - w[0] - step).abs() < 1e-10);
            assert!(w[1] > w[0]);
        }
        // Symmetric about the coarse depth.
        for i in 0..8 {
            let lo = s.depths[i] - 500.0;
            let hi = s.depths[15 - i] - 500.0;
            assert!((lo + hi).abs() < 1e-9);
        }
        // Normalized coordinates are k/K.
        for (i, nd) in s.normalized.iter().enumerate() {
            assert_eq!(*nd, (i + 1) as f64 / 16.0);
        }
        // Each point's camera-frame z equals its depth.
        for (d, p) in s.depths.iter().zip(&s.points) {
            let z = cam.world_to_cam(*p)[2];
            assert!((z - d).abs() < 1e-9);
        }
    }

    #[test]
    fn two_sample_window_is_the_endpoints() {
        let cam = identity_cam();
        let ray = pixel_ray(&cam, (50.0, 50.0)).unwrap();
        let s = sample_hypotheses(&ray, 10.0, 1.0, 2).unwrap();
        assert_eq!(s.depths, vec![9.0, 11.0]);
    }

    #[test]
    fn sampling_rejects_bad_windows() {
        let cam = identity_cam();
        let ray = pixel_ray(&cam, (50.0, 50.0)).unwrap();
        assert!(sample_hypotheses(&ray, 10.0, 1.0, 1).is_err());
        assert!(sample_hypotheses(&ray, 1.0, 2.0, 8).is_err());
    }

    #[test]
    fn location_depth_maps_are_inverse() {
        assert_eq!(location_to_depth(0.5, 500.0, 20.0), 500.0);
        assert_eq!(location_to_depth(0.0, 500.0, 20.0), 480.0);
        assert_eq!(location_to_depth(1.0, 500.0, 20.0), 520.0);
        let (l, in_range) = depth_to_location(490.0, 500.0, 20.0);
        assert!(in_range);
        assert!((l - 0.25).abs() < 1e-15);
        let mut d = 480.0;
        while d <= 520.0 {
            let (l, ok) = depth_to_location(d, 500.0, 20.0);
            assert!(ok);
            assert!((location_to_depth(l, 500.0, 20.0) - d).abs() < 1e-10);
            d += 1.37;
        }
        let (_, ok) = depth_to_location(479.0, 500.0, 20.0);
        assert!(!ok);
    }

    #[test]
    fn out_of_range_location_clamps_and_counts() {
        let before = location_clamp_warnings();
        assert_eq!(location_to_depth(1.5, 500.0, 20.0), 520.0);
        assert_eq!(location_to_depth(-0.25, 500.0, 20.0), 480.0);
        assert!(location_clamp_warnings() >= before + 2);
    }

    #[test]
    fn camera_validation_rejects_bad_inputs() {
        let k = [[100.0, 0.0, 50.0], [0.0, 100.0, 50.0], [0.0, 0.0, 1.0]];
        let skewed = [[100.0, 5.0, 50.0], [0.0, 100.0, 50.0], [0.0, 0.0, 1.0]];
        let mut bad_r = I3;
        bad_r[0][0] = 1.1;
        assert!(Camera::new(k, bad_r, [0.0; 3], 100, 100).is_err());
        let mut reflect = I3;
        reflect[0][0] = -1.0;
        assert!(Camera::new(k, reflect, [0.0; 3], 100, 100).is_err());
        assert!(Camera::new(skewed, I3, [0.0; 3], 100, 100).is_err());
        let neg_f = [[-100.0, 0.0, 50.0], [0.0, 100.0, 50.0], [0.0, 0.0, 1.0]];
        assert!(Camera::new(neg_f, I3, [0.0; 3], 100, 100).is_err());
        let pp_out = [[100.0, 0.0, 150.0], [0.0, 100.0, 50.0], [0.0, 0.0, 1.0]];
        assert!(Camera::new(pp_out, I3, [0.0; 3], 100, 100).is_err());
        assert!(Camera::new(k, I3, [0.0; 3], 100, 100).is_ok());
    }

    #[test]
    fn out_of_bounds_pixel_ray_is_rejected() {
        let cam = identity_cam();
        assert!(matches!(
            pixel_ray(&cam, (100.0, 50.0)),
            Err(GeomError::OutOfBounds(..))
        ));
        assert!(pixel_ray(&cam, (-0.5, 50.0)).is_err());
    }

    #[test]
    fn camera_text_round_trips() {
        let cam = posed_cam();
        let text = camera_to_text(&cam);
        let back = camera_from_text(&text, "test").unwrap();
        assert_eq!(cam, back);
    }

    #[test]
    fn camera_text_rejects_malformed_rows() {
        assert!(camera_from_text("K 1 2 3\n", "test").is_err());
        let cam = posed_cam();
        let text = camera_to_text(&cam).replace("size", "dims");
        assert!(camera_from_text(&text, "test").is_err());
    }

    #[test]
    fn downscaled_camera_keeps_ray_directions() {
        let cam = posed_cam();
        let small = cam.downscaled(4).unwrap();
        assert_eq!(small.width(), 20);
        assert_eq!(small.height(), 16);
        // Pixel (u, v) in the small image sees the same ray as (4u, 4v).
        let a = pixel_ray(&small, (5.0, 3.0)).unwrap();
        let b = pixel_ray(&cam, (20.0, 12.0)).unwrap();
        for i in 0..3 {
            assert!((a.direction[i] - b.direction[i]).abs() < 1e-12);
        }
    }
}
