//! Depth-map filtering, fusion into point clouds, distance metrics, and
//! PLY I/O.
//!
//! Per-view depth maps are filtered photometrically (confidence threshold)
//! and geometrically (cross-view consistency), unprojected, and merged into
//! one cloud. Clouds are scored with clamped nearest-neighbor distances in
//! both directions; depth maps with per-threshold error fractions.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::geometry::{pixel_ray, project, v_norm, v_scale, v_sub, Camera, GeomError, Vec3};
use crate::scene::{sphere_trace, Scene};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("fusion: {0}")]
    BadInput(String),
    #[error("{path}: {msg} at byte {offset}")]
    BadPly {
        path: String,
        offset: u64,
        msg: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// A cloud in scene units, with optional per-point color.
#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub colors: Option<Vec<[u8; 3]>>,
}

/// Distance metrics between two clouds plus an optional depth-error curve.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    /// Mean distance from each predicted point to its nearest truth point.
    pub accuracy: f64,
    /// Mean distance from each truth point to its nearest predicted point.
    pub completeness: f64,
    /// Arithmetic mean of the two.
    pub overall: f64,
    /// Distance cap applied before averaging, so the numbers are
    /// self-describing.
    pub clamp: f64,
    /// (threshold, fraction of pixels with |error| below it) rows.
    pub curve: Vec<(f64, f64)>,
}

impl MetricsReport {
    /// Structured text: one key per line, then one row per curve entry.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "accuracy={:.6}", self.accuracy);
        let _ = writeln!(s, "completeness={:.6}", self.completeness);
        let _ = writeln!(s, "overall={:.6}", self.overall);
        let _ = writeln!(s, "clamp={:.6}", self.clamp);
        for (t, f) in &self.curve {
            let _ = writeln!(s, "curve threshold={t:.6} fraction={f:.6}");
        }
        s
    }
}

/// Keeps pixels whose confidence reaches the threshold. `valid` marks pixels
/// that carry a depth at all.
pub fn photometric_filter(
    confidence: &[f64],
    valid: &[bool],
    threshold: f64,
) -> Result<Vec<bool>, FusionError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(FusionError::BadInput(format!(
            "confidence threshold must be in [0, 1], got {threshold}"
        )));
    }
    if confidence.len() != valid.len() {
        return Err(FusionError::BadInput(format!(
            "confidence has {} entries, validity {}",
            confidence.len(),
            valid.len()
        )));
    }
    Ok(confidence
        .iter()
        .zip(valid)
        .map(|(c, v)| *v && *c >= threshold)
        .collect())
}

/// Cross-view consistency tolerances.
#[derive(Debug, Clone, Copy)]
pub struct GeoFilterParams {
    /// Maximum round-trip reprojection error, pixels.
    pub reproj_px: f64,
    /// Maximum relative depth disagreement.
    pub depth_rel: f64,
    /// Other views that must agree for a pixel to survive.
    pub min_views: usize,
}

impl Default for GeoFilterParams {
    fn default() -> GeoFilterParams {
        GeoFilterParams {
            reproj_px: 1.0,
            depth_rel: 0.01,
            min_views: 2,
        }
    }
}

/// Checks one reference pixel against one other view. The pixel's point is
/// projected into the view, the view's own depth is read at the landing
/// pixel and unprojected, and that point is projected back: the check passes
/// when the round trip lands within `reproj_px` of the start and the depth
/// it implies is within `depth_rel` relative error.
fn consistent_in_view(
    ref_cam: &Camera,
    depth: f64,
    pixel: (f64, f64),
    other_cam: &Camera,
    other_depth: &[f64],
    params: &GeoFilterParams,
) -> Result<bool, FusionError> {
    let p = pixel_ray(ref_cam, pixel)?.point_at_depth(depth);
    let Ok(((u, v), z)) = project(other_cam, p) else {
        return Ok(false);
    };
    if z <= 0.0 {
        return Ok(false);
    }
    let (w, h) = (other_cam.width(), other_cam.height());
    let (xi, yi) = (u.round(), v.round());
    if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
        return Ok(false);
    }
    let d_other = other_depth[yi as usize * w + xi as usize];
    if d_other <= 0.0 {
        return Ok(false);
    }
    let q = pixel_ray(other_cam, (xi, yi))?.point_at_depth(d_other);
    let Ok(((ru, rv), rz)) = project(ref_cam, q) else {
        return Ok(false);
    };
    if rz <= 0.0 {
        return Ok(false);
    }
    let reproj = ((ru - pixel.0).powi(2) + (rv - pixel.1).powi(2)).sqrt();
    let rel = (rz - depth).abs() / depth;
    Ok(reproj <= params.reproj_px && rel <= params.depth_rel)
}

/// Keeps reference pixels that at least `min_views` other views confirm.
/// Missing depth (0) never passes.
pub fn geometric_filter(
    depths: &[Vec<f64>],
    cameras: &[Camera],
    reference: usize,
    params: &GeoFilterParams,
) -> Result<Vec<bool>, FusionError> {
    if depths.len() != cameras.len() {
        return Err(FusionError::BadInput(format!(
            "{} depth maps for {} cameras",
            depths.len(),
            cameras.len()
        )));
    }
    if depths.len() < 2 {
        return Err(FusionError::BadInput(
            "geometric filter needs at least one other view".into(),
        ));
    }
    if reference >= depths.len() {
        return Err(FusionError::BadInput(format!(
            "reference view {reference} out of range for {} views",
            depths.len()
        )));
    }
    let cam = &cameras[reference];
    let (w, h) = (cam.width(), cam.height());
    let ref_depth = &depths[reference];
    if ref_depth.len() != w * h {
        return Err(FusionError::BadInput(format!(
            "reference depth has {} pixels for a {w}x{h} image",
            ref_depth.len()
        )));
    }
    let mut mask = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let d = ref_depth[i];
            if d <= 0.0 {
                continue;
            }
            let mut agree = 0usize;
            for (j, other) in cameras.iter().enumerate() {
                if j == reference {
                    continue;
                }
                if consistent_in_view(cam, d, (x as f64, y as f64), other, &depths[j], params)? {
                    agree += 1;
                    if agree >= params.min_views {
                        break;
                    }
                }
            }
            mask[i] = agree >= params.min_views;
        }
    }
    Ok(mask)
}

/// Unprojects every kept pixel of every view and merges points closer than
/// `merge_radius` by averaging (greedy, in view-then-pixel order, against a
/// radius grid). Colors, when given (one RGB image per view, `[3, H, W]` in
/// [0, 1]), are averaged the same way.
pub fn fuse(
    depths: &[Vec<f64>],
    masks: &[Vec<bool>],
    cameras: &[Camera],
    merge_radius: f64,
    colors: Option<&[Vec<f64>]>,
) -> Result<PointCloud, FusionError> {
    if depths.len() != masks.len() || depths.len() != cameras.len() {
        return Err(FusionError::BadInput(format!(
            "{} depth maps, {} masks, {} cameras",
            depths.len(),
            masks.len(),
            cameras.len()
        )));
    }
    if !(merge_radius >= 0.0 && merge_radius.is_finite()) {
        return Err(FusionError::BadInput(format!(
            "merge radius must be finite and nonnegative, got {merge_radius}"
        )));
    }
    struct Cluster {
        sum: Vec3,
        color_sum: [f64; 3],
        n: usize,
    }
    let cell = merge_radius.max(1e-9);
    let key = |p: Vec3| {
        [
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        ]
    };
    let mut grid: std::collections::BTreeMap<[i64; 3], Vec<usize>> = std::collections::BTreeMap::new();
    let mut clusters: Vec<Cluster> = Vec::new();
    for (v, cam) in cameras.iter().enumerate() {
        let (w, h) = (cam.width(), cam.height());
        if depths[v].len() != w * h || masks[v].len() != w * h {
            return Err(FusionError::BadInput(format!(
                "view {v}: depth/mask size does not match a {w}x{h} image"
            )));
        }
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if !masks[v][i] || depths[v][i] <= 0.0 {
                    continue;
                }
                let p = pixel_ray(cam, (x as f64, y as f64))?.point_at_depth(depths[v][i]);
                let rgb = match colors {
                    Some(imgs) => {
                        let img = &imgs[v];
                        [img[i], img[w * h + i], img[2 * w * h + i]]
                    }
                    None => [0.0; 3],
                };
                let k = key(p);
                let mut joined = false;
                if merge_radius > 0.0 {
                    'search: for dz in -1..=1i64 {
                        for dy in -1..=1i64 {
                            for dx in -1..=1i64 {
                                let kk = [k[0] + dx, k[1] + dy, k[2] + dz];
                                let Some(ids) = grid.get(&kk) else { continue };
                                for &ci in ids {
                                    let c = &clusters[ci];
                                    let mean = v_scale(c.sum, 1.0 / c.n as f64);
                                    if v_norm(v_sub(mean, p)) < merge_radius {
                                        let c = &mut clusters[ci];
                                        c.sum = crate::geometry::v_add(c.sum, p);
                                        for ch in 0..3 {
                                            c.color_sum[ch] += rgb[ch];
                                        }
                                        c.n += 1;
                                        joined = true;
                                        break 'search;
                                    }
                                }
                            }
                        }
                    }
                }
                if !joined {
                    grid.entry(k).or_default().push(clusters.len());
                    clusters.push(Cluster {
                        sum: p,
                        color_sum: rgb,
                        n: 1,
                    });
                }
            }
        }
    }
    let points: Vec<Vec3> = clusters
        .iter()
        .map(|c| v_scale(c.sum, 1.0 / c.n as f64))
        .collect();
    let colors_out = colors.map(|_| {
        clusters
            .iter()
            .map(|c| {
                let mut rgb = [0u8; 3];
                for ch in 0..3 {
                    rgb[ch] = (c.color_sum[ch] / c.n as f64 * 255.0).round().clamp(0.0, 255.0) as u8;
                }
                rgb
            })
            .collect()
    });
    Ok(PointCloud {
        points,
        colors: colors_out,
    })
}

/// Exact nearest-neighbor structure: a k-d tree over point indices with
/// median splits and plane-distance pruning.
pub struct NearestIndex<'a> {
    points: &'a [Vec3],
    /// Flattened tree; nodes[i] holds the point index at that tree slot.
    order: Vec<usize>,
}

impl<'a> NearestIndex<'a> {
    pub fn build(points: &'a [Vec3]) -> NearestIndex<'a> {
        let mut order: Vec<usize> = (0..points.len()).collect();
        fn split(points: &[Vec3], order: &mut [usize], axis: usize) {
            if order.len() <= 1 {
                return;
            }
            let mid = order.len() / 2;
            order.select_nth_unstable_by(mid, |a, b| {
                points[*a][axis]
                    .partial_cmp(&points[*b][axis])
                    .expect("finite coordinates")
            });
            let (lo, rest) = order.split_at_mut(mid);
            split(points, lo, (axis + 1) % 3);
            split(points, &mut rest[1..], (axis + 1) % 3);
        }
        split(points, &mut order, 0);
        NearestIndex { points, order }
    }

    /// Distance from `q` to the nearest indexed point.
    pub fn nearest(&self, q: Vec3) -> f64 {
        fn descend(
            points: &[Vec3],
            order: &[usize],
            axis: usize,
            q: Vec3,
            best: &mut f64,
        ) {
            if order.is_empty() {
                return;
            }
            let mid = order.len() / 2;
            let p = points[order[mid]];
            let d = v_norm(v_sub(p, q));
            if d < *best {
                *best = d;
            }
            let gap = q[axis] - p[axis];
            let (near, far) = if gap < 0.0 {
                (&order[..mid], &order[mid + 1..])
            } else {
                (&order[mid + 1..], &order[..mid])
            };
            descend(points, near, (axis + 1) % 3, q, best);
            if gap.abs() < *best {
                descend(points, far, (axis + 1) % 3, q, best);
            }
        }
        let mut best = f64::INFINITY;
        descend(self.points, &self.order, 0, q, &mut best);
        best
    }
}

fn mean_clamped_nn(from: &[Vec3], to: &[Vec3], clamp: f64) -> f64 {
    let index = NearestIndex::build(to);
    let sum: f64 = from.iter().map(|p| index.nearest(*p).min(clamp)).sum();
    sum / from.len() as f64
}

/// Clamped bidirectional distance metrics. The curve field is left empty;
/// compose with [`depth_error_curve`] when depth maps are available.
pub fn eval_acc_comp(
    pred: &PointCloud,
    gt: &PointCloud,
    clamp: f64,
) -> Result<MetricsReport, FusionError> {
    if pred.points.is_empty() || gt.points.is_empty() {
        return Err(FusionError::BadInput(
            "distance metrics need two nonempty clouds".into(),
        ));
    }
    if !(clamp > 0.0) {
        return Err(FusionError::BadInput(format!(
            "distance clamp must be positive, got {clamp}"
        )));
    }
    let accuracy = mean_clamped_nn(&pred.points, &gt.points, clamp);
    let completeness = mean_clamped_nn(&gt.points, &pred.points, clamp);
    Ok(MetricsReport {
        accuracy,
        completeness,
        overall: (accuracy + completeness) / 2.0,
        clamp,
        curve: Vec::new(),
    })
}

/// Fraction of masked pixels whose |pred - gt| is strictly below each
/// threshold.
pub fn depth_error_curve(
    pred: &[f64],
    gt: &[f64],
    mask: &[bool],
    thresholds: &[f64],
) -> Result<Vec<(f64, f64)>, FusionError> {
    if pred.len() != gt.len() || pred.len() != mask.len() {
        return Err(FusionError::BadInput(format!(
            "curve inputs disagree: {} pred, {} gt, {} mask",
            pred.len(),
            gt.len(),
            mask.len()
        )));
    }
    let n = mask.iter().filter(|m| **m).count();
    if n == 0 {
        return Err(FusionError::BadInput(
            "depth error curve over an empty mask".into(),
        ));
    }
    Ok(thresholds
        .iter()
        .map(|t| {
            let hits = mask
                .iter()
                .zip(pred.iter().zip(gt))
                .filter(|(m, (p, g))| **m && (*p - *g).abs() < *t)
                .count();
            (*t, hits as f64 / n as f64)
        })
        .collect())
}

/// Rasterizes the analytic surface into a cloud: every pixel of every given
/// camera is sphere-traced and hits become points.
pub fn gt_surface_cloud(scene: &Scene, cameras: &[Camera], max_depth: f64) -> Result<PointCloud, FusionError> {
    let mut points = Vec::new();
    for cam in cameras {
        for y in 0..cam.height() {
            for x in 0..cam.width() {
                let ray = pixel_ray(cam, (x as f64, y as f64))?;
                if let Some(s) = sphere_trace(scene, ray.origin, ray.direction, max_depth) {
                    points.push(ray.point_at(s));
                }
            }
        }
    }
    Ok(PointCloud {
        points,
        colors: None,
    })
}

/// Writes a binary little-endian PLY: float32 x, y, z plus uchar RGB when
/// the cloud carries color.
pub fn write_ply(cloud: &PointCloud, path: &Path) -> Result<(), FusionError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(b"ply\n");
    buf.extend_from_slice(b"format binary_little_endian 1.0\n");
    buf.extend_from_slice(format!("element vertex {}\n", cloud.points.len()).as_bytes());
    buf.extend_from_slice(b"property float x\nproperty float y\nproperty float z\n");
    if cloud.colors.is_some() {
        buf.extend_from_slice(b"property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    buf.extend_from_slice(b"end_header\n");
    for (i, p) in cloud.points.iter().enumerate() {
        for c in p {
            buf.extend_from_slice(&(*c as f32).to_le_bytes());
        }
        if let Some(colors) = &cloud.colors {
            buf.extend_from_slice(&colors[i]);
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

enum PlyFormat {
    Ascii,
    BinaryLe,
}

/// Reads ASCII or binary-little-endian PLY with float32 x, y, z and optional
/// uchar red/green/blue. Malformed files report the byte offset.
pub fn read_ply(path: &Path) -> Result<PointCloud, FusionError> {
    let bytes = fs::read(path)?;
    let bad = |offset: usize, msg: &str| FusionError::BadPly {
        path: path.display().to_string(),
        offset: offset as u64,
        msg: msg.to_string(),
    };
    // Header: newline-delimited lines up to and including end_header.
    let mut at = 0usize;
    let line_at = |at: &mut usize| -> Result<(usize, String), FusionError> {
        let start = *at;
        let rest = &bytes[start..];
        let end = rest
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| bad(start, "unterminated header line"))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| bad(start, "header is not UTF-8"))?
            .trim_end_matches('\r')
            .to_string();
        *at = start + end + 1;
        Ok((start, line))
    };
    let (off, magic) = line_at(&mut at)?;
    if magic != "ply" {
        return Err(bad(off, "missing ply magic"));
    }
    let mut format = None;
    let mut count: Option<usize> = None;
    let mut props: Vec<(String, String)> = Vec::new();
    let mut in_vertex = false;
    loop {
        let (off, line) = line_at(&mut at)?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["end_header"] => break,
            ["comment", ..] => {}
            ["format", "ascii", "1.0"] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", "1.0"] => format = Some(PlyFormat::BinaryLe),
            ["format", ..] => return Err(bad(off, "unsupported format")),
            ["element", "vertex", n] => {
                count = Some(n.parse().map_err(|_| bad(off, "bad vertex count"))?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", ty, name] => {
                if in_vertex {
                    props.push((ty.to_string(), name.to_string()));
                }
            }
            ["property", "list", ..] => {
                if in_vertex {
                    return Err(bad(off, "list properties unsupported"));
                }
            }
            _ => return Err(bad(off, "unrecognized header line")),
        }
    }
    let format = format.ok_or_else(|| bad(at, "header missing format"))?;
    let count = count.ok_or_else(|| bad(at, "header missing vertex element"))?;
    let names: Vec<&str> = props.iter().map(|(_, n)| n.as_str()).collect();
    let has_color = match names.as_slice() {
        ["x", "y", "z"] => false,
        ["x", "y", "z", "red", "green", "blue"] => true,
        _ => return Err(bad(at, "vertex must be float x,y,z with optional uchar red,green,blue")),
    };
    for (i, (ty, _)) in props.iter().enumerate() {
        let want = if i < 3 { "float" } else { "uchar" };
        if ty != want {
            return Err(bad(at, "vertex property types must be float x,y,z and uchar colors"));
        }
    }
    let mut points = Vec::with_capacity(count);
    let mut colors = has_color.then(|| Vec::with_capacity(count));
    match format {
        PlyFormat::BinaryLe => {
            let stride = 12 + if has_color { 3 } else { 0 };
            if bytes.len() - at < count * stride {
                return Err(bad(bytes.len(), "payload truncated"));
            }
            for i in 0..count {
                let base = at + i * stride;
                let mut p = [0.0; 3];
                for (c, pc) in p.iter_mut().enumerate() {
                    let b = &bytes[base + c * 4..base + c * 4 + 4];
                    *pc = f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
                }
                points.push(p);
                if let Some(cols) = &mut colors {
                    cols.push([bytes[base + 12], bytes[base + 13], bytes[base + 14]]);
                }
            }
        }
        PlyFormat::Ascii => {
            let text = std::str::from_utf8(&bytes[at..]).map_err(|_| bad(at, "payload is not UTF-8"))?;
            let mut tokens = text.split_whitespace();
            let per = 3 + if has_color { 3 } else { 0 };
            for i in 0..count {
                let mut row = [0.0f64; 6];
                for (c, rc) in row.iter_mut().take(per).enumerate() {
                    let tok = tokens
                        .next()
                        .ok_or_else(|| bad(bytes.len(), "payload truncated"))?;
                    *rc = tok.parse().map_err(|_| {
                        bad(at, &format!("vertex {i} field {c} is not a number"))
                    })?;
                }
                points.push([
                    f64::from(row[0] as f32),
                    f64::from(row[1] as f32),
                    f64::from(row[2] as f32),
                ]);
                if let Some(cols) = &mut colors {
                    cols.push([row[3] as u8, row[4] as u8, row[5] as u8]);
                }
            }
        }
    }
    for p in &points {
        if !p.iter().all(|c| c.is_finite()) {
            return Err(bad(at, "non-finite coordinate"));
        }
    }
    Ok(PointCloud { points, colors })
}
