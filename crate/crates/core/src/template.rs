//! Canonical-scale template matching on edge maps.
//!
//! Templates are rendered once at the canonical distance `z_r` into an
//! `l_r × l_r` RoI. At run time the edge map is re-cropped around the
//! projected translation estimate with side `l_s = (z_r/z_s)·l_r` and mapped
//! back to `l_r × l_r`, so a single template bank serves every distance.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use nalgebra::{Matrix2, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{project, CameraIntrinsics, Pose, Rotation};
use crate::measure::{EdgeMap, OrientationMeasurement};
use crate::scene::{look_at, ObjectModel};

/// Matches scoring below this are rejected.
pub const DEFAULT_REJECT_FLOOR: f64 = 0.3;

/// Minimum edge pixels per template.
pub const MIN_TEMPLATE_PIXELS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TemplateError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid template parameters: {0}")]
    InvalidParams(String),
    #[error("no measurement: {0}")]
    NoMeasurement(String),
    #[error("template cache: {0}")]
    Cache(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplatePixel {
    pub x: u16,
    pub y: u16,
    /// Edge-normal direction in [0, π), radians.
    pub gradient: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Template {
    /// Object orientation relative to a camera looking straight at it.
    pub rotation: Rotation,
    pub pixels: Vec<TemplatePixel>,
}

/// Identity of a template bank; a cache file is reusable only when every
/// field matches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateCacheKey {
    pub model_hash: u64,
    pub n_views: usize,
    pub n_inplane: usize,
    pub canonical_distance: f64,
    pub canonical_roi: usize,
    pub fx: f64,
    pub fy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub key: TemplateCacheKey,
    pub templates: Vec<Template>,
}

impl TemplateSet {
    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn canonical_distance(&self) -> f64 {
        self.key.canonical_distance
    }

    pub fn canonical_roi(&self) -> usize {
        self.key.canonical_roi
    }

    /// Writes the bank as JSON lines: a key header, then one template per line.
    pub fn write_cache<W: Write>(&self, mut w: W) -> Result<(), TemplateError> {
        let io = |e: std::io::Error| TemplateError::Cache(e.to_string());
        let json = |e: serde_json::Error| TemplateError::Cache(e.to_string());
        writeln!(w, "{}", serde_json::to_string(&self.key).map_err(json)?).map_err(io)?;
        for t in &self.templates {
            writeln!(w, "{}", serde_json::to_string(t).map_err(json)?).map_err(io)?;
        }
        Ok(())
    }

    /// Loads a cache written by [`TemplateSet::write_cache`]. Returns
    /// `Ok(None)` when the stored key differs from `expected`.
    pub fn read_cache<R: BufRead>(r: R, expected: &TemplateCacheKey) -> Result<Option<TemplateSet>, TemplateError> {
        let mut lines = r.lines();
        let header = match lines.next() {
            Some(l) => l.map_err(|e| TemplateError::Cache(e.to_string()))?,
            None => return Err(TemplateError::Cache("empty cache file".into())),
        };
        let key: TemplateCacheKey =
            serde_json::from_str(&header).map_err(|e| TemplateError::Cache(format!("header: {e}")))?;
        if &key != expected {
            return Ok(None);
        }
        let mut templates = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| TemplateError::Cache(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let t: Template =
                serde_json::from_str(&line).map_err(|e| TemplateError::Cache(format!("line {}: {e}", i + 2)))?;
            templates.push(t);
        }
        Ok(Some(TemplateSet { key, templates }))
    }
}

/// Points on the unit sphere from the Fibonacci lattice.
pub fn fibonacci_sphere(n: usize) -> Vec<Vector3<f64>> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2 * i + 1) as f64 / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            Vector3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Edge-normal direction in [0, π) at `(x, y)` from the principal axis of
/// lit neighbors within a 5×5 window; 0 when there are no neighbors.
fn local_gradient(lit: &dyn Fn(i64, i64) -> bool, x: i64, y: i64) -> f64 {
    let mut m = Matrix2::zeros();
    let mut count = 0;
    for dy in -2i64..=2 {
        for dx in -2i64..=2 {
            if (dx, dy) != (0, 0) && lit(x + dx, y + dy) {
                let d = Vector2::new(dx as f64, dy as f64);
                m += d * d.transpose();
                count += 1;
            }
        }
    }
    if count == 0 {
        return 0.0;
    }
    // Tangent angle of the dominant axis of a symmetric 2×2 matrix.
    let tangent = 0.5 * (2.0 * m[(0, 1)]).atan2(m[(0, 0)] - m[(1, 1)]);
    (tangent + PI / 2.0).rem_euclid(PI)
}

/// Renders the model at `(R_t, [0, 0, z_r])` into the canonical RoI.
pub fn render_template(
    model: &ObjectModel,
    rotation: &Rotation,
    fx: f64,
    fy: f64,
) -> Result<Template, TemplateError> {
    let size = model.canonical_roi;
    let half = size as f64 / 2.0;
    let pose = Pose::new(*rotation, Vector3::new(0.0, 0.0, model.canonical_distance));
    let mut grid = vec![false; size * size];
    for x in &model.edge_points {
        let p = pose.transform_point(x);
        if p.z <= crate::geom::MIN_DEPTH {
            continue;
        }
        let (cx, cy) = ((fx * p.x / p.z + half).round(), (fy * p.y / p.z + half).round());
        if cx >= 0.0 && cy >= 0.0 && (cx as usize) < size && (cy as usize) < size {
            grid[cy as usize * size + cx as usize] = true;
        }
    }
    let lit = |x: i64, y: i64| x >= 0 && y >= 0 && (x as usize) < size && (y as usize) < size && grid[y as usize * size + x as usize];
    let mut pixels = Vec::new();
    for y in 0..size {
        for x in 0..size {
            if grid[y * size + x] {
                pixels.push(TemplatePixel {
                    x: x as u16,
                    y: y as u16,
                    gradient: local_gradient(&lit, x as i64, y as i64),
                });
            }
        }
    }
    if pixels.len() < MIN_TEMPLATE_PIXELS {
        return Err(TemplateError::InvalidModel(format!(
            "template has {} pixels inside the {size}×{size} RoI, need {MIN_TEMPLATE_PIXELS}",
            pixels.len()
        )));
    }
    Ok(Template { rotation: *rotation, pixels })
}

/// Orientations for Fibonacci viewing directions × uniform in-plane turns.
/// Index order is `view·n_inplane + inplane`.
pub fn template_orientations(n_views: usize, n_inplane: usize, canonical_distance: f64) -> Vec<Rotation> {
    let mut out = Vec::with_capacity(n_views * n_inplane);
    for d in fibonacci_sphere(n_views) {
        // Camera placed along `d` in the object frame, looking at the origin.
        let r_oc = look_at(&(d * canonical_distance), &Vector3::zeros());
        let r_co = r_oc.inverse();
        for j in 0..n_inplane {
            let roll = Rotation::rot_z(2.0 * PI * j as f64 / n_inplane as f64);
            out.push(roll * r_co);
        }
    }
    out
}

pub fn build_templates(
    model: &ObjectModel,
    n_views: usize,
    n_inplane: usize,
    fx: f64,
    fy: f64,
) -> Result<TemplateSet, TemplateError> {
    if model.edge_points.len() < MIN_TEMPLATE_PIXELS {
        return Err(TemplateError::InvalidModel(format!(
            "model has {} edge points, need {MIN_TEMPLATE_PIXELS}",
            model.edge_points.len()
        )));
    }
    if n_views < 4 {
        return Err(TemplateError::InvalidParams("n_views must be at least 4".into()));
    }
    if n_inplane == 0 {
        return Err(TemplateError::InvalidParams("n_inplane must be at least 1".into()));
    }
    if !(fx > 0.0 && fy > 0.0) {
        return Err(TemplateError::InvalidParams("focal lengths must be positive".into()));
    }
    let templates = template_orientations(n_views, n_inplane, model.canonical_distance)
        .par_iter()
        .map(|r| render_template(model, r, fx, fy))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TemplateSet {
        key: TemplateCacheKey {
            model_hash: model.content_hash(),
            n_views,
            n_inplane,
            canonical_distance: model.canonical_distance,
            canonical_roi: model.canonical_roi,
            fx,
            fy,
        },
        templates,
    })
}

/// Edge map re-cropped and rescaled to the canonical RoI.
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalRoi {
    pub view_id: usize,
    pub size: usize,
    /// Translation estimate the crop was centered on.
    pub t_co: Vector3<f64>,
    /// Window side in the source image, pixels.
    pub window_side: f64,
    cells: Vec<f64>,
}

impl CanonicalRoi {
    pub fn new(view_id: usize, size: usize, t_co: Vector3<f64>) -> Self {
        CanonicalRoi { view_id, size, t_co, window_side: size as f64, cells: vec![0.0; size * size] }
    }

    pub fn get(&self, x: i64, y: i64) -> f64 {
        if x < 0 || y < 0 || x as usize >= self.size || y as usize >= self.size {
            return 0.0;
        }
        self.cells[y as usize * self.size + x as usize]
    }

    pub fn set_max(&mut self, x: usize, y: usize, v: f64) {
        if x < self.size && y < self.size {
            let c = &mut self.cells[y * self.size + x];
            *c = c.max(v);
        }
    }

    pub fn lit_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.size {
            for x in 0..self.size {
                if self.cells[y * self.size + x] > 0.0 {
                    out.push((x, y));
                }
            }
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.cells.iter().all(|v| *v <= 0.0)
    }

    /// 3×3 max-pooled copy of the cells.
    fn pooled(&self) -> Vec<f64> {
        let n = self.size;
        let mut out = vec![0.0; n * n];
        for y in 0..n as i64 {
            for x in 0..n as i64 {
                let mut best = 0.0f64;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        best = best.max(self.get(x + dx, y + dy));
                    }
                }
                out[y as usize * n + x as usize] = best;
            }
        }
        out
    }
}

/// Side of the image window that maps onto the canonical RoI.
pub fn window_side(z_s: f64, canonical_distance: f64, canonical_roi: usize) -> f64 {
    canonical_distance / z_s * canonical_roi as f64
}

/// Re-crops `edge_map` around `project(t_co)` and maps every edge pixel in
/// the window to its nearest RoI cell (maximum where several collide).
pub fn crop_canonical_roi(
    edge_map: &EdgeMap,
    t_co: &Vector3<f64>,
    intr: &CameraIntrinsics,
    canonical_roi: usize,
    canonical_distance: f64,
) -> Result<CanonicalRoi, TemplateError> {
    let c = project(t_co, intr).map_err(|e| TemplateError::NoMeasurement(e.to_string()))?;
    let side = window_side(t_co.z, canonical_distance, canonical_roi);
    let half_side = side / 2.0;
    let (x0, x1, y0, y1) = (c.x - half_side, c.x + half_side, c.y - half_side, c.y + half_side);
    if x1 < 0.0 || y1 < 0.0 || x0 > intr.width as f64 - 1.0 || y0 > intr.height as f64 - 1.0 {
        return Err(TemplateError::NoMeasurement(format!(
            "RoI window of side {side:.1} px lies outside the image"
        )));
    }
    let scale = canonical_roi as f64 / side;
    let half = canonical_roi as f64 / 2.0;
    let mut roi = CanonicalRoi::new(edge_map.view_id, canonical_roi, *t_co);
    roi.window_side = side;
    for p in edge_map.pixels() {
        let (px, py) = (p.x as f64, p.y as f64);
        if px < x0 || px > x1 || py < y0 || py > y1 {
            continue;
        }
        let qx = ((px - c.x) * scale + half).round();
        let qy = ((py - c.y) * scale + half).round();
        if qx >= 0.0 && qy >= 0.0 {
            roi.set_max(qx as usize, qy as usize, p.intensity);
        }
    }
    Ok(roi)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    /// Mean max-pooled intensity under the template pixels.
    #[default]
    Presence,
    /// Presence weighted by `|cos|` of the edge-normal difference.
    Gradient,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchOptions {
    pub mode: ScoringMode,
    pub reject_floor: f64,
}

impl Default for MatchOptions {
    fn default() -> Self {
        MatchOptions { mode: ScoringMode::Presence, reject_floor: DEFAULT_REJECT_FLOOR }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub measurement: OrientationMeasurement,
    pub template_index: usize,
    pub score: f64,
}

/// Minimal rotation taking the optical axis onto the ray through `t_co`.
pub fn ray_rotation(t_co: &Vector3<f64>) -> Rotation {
    let z = Vector3::z();
    let d = t_co.normalize();
    let axis = z.cross(&d);
    let s = axis.norm();
    if s < 1e-15 {
        return Rotation::identity();
    }
    Rotation::about_axis(&axis, s.atan2(z.dot(&d)))
}

/// Scores every template and returns the best. Ranking is by pooled score,
/// then by unpooled score, then by lowest index.
pub fn match_roi(roi: &CanonicalRoi, set: &TemplateSet, options: &MatchOptions) -> Result<MatchResult, TemplateError> {
    if roi.is_empty() {
        return Err(TemplateError::NoMeasurement("empty RoI".into()));
    }
    if roi.size != set.canonical_roi() {
        return Err(TemplateError::InvalidParams(format!(
            "RoI side {} does not match template side {}",
            roi.size,
            set.canonical_roi()
        )));
    }
    let n = roi.size;
    let pooled = roi.pooled();
    let roi_gradient: Option<Vec<f64>> = match options.mode {
        ScoringMode::Presence => None,
        ScoringMode::Gradient => {
            let lit = |x: i64, y: i64| roi.get(x, y) > 0.0;
            Some(
                (0..n * n)
                    .map(|i| if roi.cells[i] > 0.0 { local_gradient(&lit, (i % n) as i64, (i / n) as i64) } else { 0.0 })
                    .collect(),
            )
        }
    };
    let scores: Vec<(f64, f64)> = set
        .templates
        .par_iter()
        .map(|t| {
            let mut pooled_sum = 0.0;
            let mut raw_sum = 0.0;
            for p in &t.pixels {
                let (x, y) = (p.x as usize, p.y as usize);
                raw_sum += roi.cells[y * n + x];
                pooled_sum += match &roi_gradient {
                    None => pooled[y * n + x],
                    Some(grad) => {
                        let mut best = 0.0f64;
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                let (qx, qy) = (x as i64 + dx, y as i64 + dy);
                                let v = roi.get(qx, qy);
                                if v > 0.0 {
                                    let g = grad[qy as usize * n + qx as usize];
                                    best = best.max(v * (p.gradient - g).cos().abs());
                                }
                            }
                        }
                        best
                    }
                };
            }
            let m = t.pixels.len() as f64;
            (pooled_sum / m, raw_sum / m)
        })
        .collect();
    let mut best = 0usize;
    for (i, s) in scores.iter().enumerate().skip(1) {
        let b = scores[best];
        if s.0 > b.0 || (s.0 == b.0 && s.1 > b.1) {
            best = i;
        }
    }
    let score = scores[best].0;
    if score < options.reject_floor {
        return Err(TemplateError::NoMeasurement(format!(
            "best score {score:.3} below reject floor {}",
            options.reject_floor
        )));
    }
    let rotation = ray_rotation(&roi.t_co) * set.templates[best].rotation;
    Ok(MatchResult {
        measurement: OrientationMeasurement { view_id: roi.view_id, rotation, confidence: score.min(1.0) },
        template_index: best,
        score,
    })
}

/// Crops around `t_co` and matches; the common run-time path.
pub fn measure_orientation(
    edge_map: &EdgeMap,
    t_co: &Vector3<f64>,
    intr: &CameraIntrinsics,
    set: &TemplateSet,
    options: &MatchOptions,
) -> Result<MatchResult, TemplateError> {
    let roi = crop_canonical_roi(edge_map, t_co, intr, set.canonical_roi(), set.canonical_distance())?;
    match_roi(&roi, set, options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::{EdgePixel, NoiseProfile};
    use crate::rng::{stream_rng, Stream};
    use crate::scene::{synthetic_object, uniform_rotation, ObjectKind, SceneObject, SyntheticParams, Viewpoint};

    fn bracket() -> ObjectModel {
        synthetic_object(
            &ObjectKind::AsymmetricBracket { width: 0.05, depth: 0.03, height: 0.04, thickness: 0.005 },
            &SyntheticParams::default(),
        )
        .unwrap()
    }

    fn roi_from_template(t: &Template, size: usize) -> CanonicalRoi {
        let mut roi = CanonicalRoi::new(0, size, Vector3::new(0.0, 0.0, 0.6));
        for p in &t.pixels {
            roi.set_max(p.x as usize, p.y as usize, 1.0);
        }
        roi
    }

    fn on_axis_view() -> Viewpoint {
        Viewpoint { id: 0, pose: Pose::identity(), intrinsics: CameraIntrinsics::default() }
    }

    fn edge_map_at(model: &ObjectModel, r_co: Rotation, t_co: Vector3<f64>) -> EdgeMap {
        let obj = SceneObject { id: 0, model: 0, pose: Pose::new(r_co, t_co) };
        let mut rng = stream_rng(0, 0, 0, Stream::EdgeMap);
        crate::measure::simulate_edge_map(&obj, model, &on_axis_view(), &NoiseProfile::noiseless(), &mut rng).unwrap()
    }

    #[test]
    fn template_count_and_bounds() {
        let model = bracket();
        let set = build_templates(&model, 4, 1, 600.0, 600.0).unwrap();
        assert_eq!(set.len(), 4);
        let set = build_templates(&model, 10, 3, 600.0, 600.0).unwrap();
        assert_eq!(set.len(), 30);
        for t in &set.templates {
            assert!(t.pixels.len() >= MIN_TEMPLATE_PIXELS);
            assert!(t.pixels.iter().all(|p| (p.x as usize) < 96 && (p.y as usize) < 96));
            assert!(t.pixels.iter().all(|p| (0.0..PI).contains(&p.gradient)));
        }
    }

    #[test]
    fn invalid_template_params() {
        let model = bracket();
        assert!(matches!(build_templates(&model, 3, 1, 600.0, 600.0), Err(TemplateError::InvalidParams(_))));
        let mut tiny = model.clone();
        tiny.edge_points.truncate(7);
        assert!(matches!(build_templates(&tiny, 4, 1, 600.0, 600.0), Err(TemplateError::InvalidModel(_))));
    }

    #[test]
    fn orientations_are_distinct() {
        let rs = template_orientations(40, 6, 0.6);
        for i in 0..rs.len() {
            for j in i + 1..rs.len() {
                assert!(rs[i].angle_to(&rs[j]) > 1e-6);
            }
        }
    }

    #[test]
    fn fibonacci_nearest_neighbor_spacing() {
        // A near-hexagonal covering of the sphere has spacing √(8π/(√3·n)).
        let n = 500;
        let pts = fibonacci_sphere(n);
        let expected = (8.0 * PI / (3f64.sqrt() * n as f64)).sqrt();
        let nn: Vec<f64> = pts
            .iter()
            .enumerate()
            .map(|(i, a)| {
                pts.iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, b)| a.dot(b).clamp(-1.0, 1.0).acos())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let mean = nn.iter().sum::<f64>() / n as f64;
        assert!((mean / expected - 1.0).abs() < 0.15, "mean {mean} expected {expected}");
        assert!(nn.iter().all(|d| *d > 0.5 * expected));
    }

    #[test]
    fn window_side_formula() {
        assert_eq!(window_side(0.6, 0.6, 96), 96.0);
        assert_eq!(window_side(1.2, 0.6, 96), 48.0);
    }

    #[test]
    fn crop_matches_canonical_rendering() {
        let model = bracket();
        let mut rng = stream_rng(12, 0, 0, Stream::Scene);
        for _ in 0..20 {
            let r = uniform_rotation(&mut rng);
            for z in [0.6, 1.2] {
                let t_co = Vector3::new(0.0, 0.0, z);
                let map = edge_map_at(&model, r, t_co);
                let roi = crop_canonical_roi(&map, &t_co, &CameraIntrinsics::default(), 96, 0.6).unwrap();
                let tpl = render_template(&model, &r, 600.0, 600.0).unwrap();
                // Each rendered template pixel has a crop pixel within the
                // quantization error (1 px at z_r, 2 px at 2·z_r after scaling).
                let tol = if z == 0.6 { 1 } else { 2 };
                for p in &tpl.pixels {
                    let mut hit = false;
                    for dy in -tol..=tol {
                        for dx in -tol..=tol {
                            hit |= roi.get(p.x as i64 + dx, p.y as i64 + dy) > 0.0;
                        }
                    }
                    assert!(hit, "template pixel ({}, {}) missing at z = {z}", p.x, p.y);
                }
                if z == 0.6 {
                    for (x, y) in roi.lit_cells() {
                        let near = tpl.pixels.iter().any(|p| {
                            (p.x as i64 - x as i64).abs() <= 1 && (p.y as i64 - y as i64).abs() <= 1
                        });
                        assert!(near, "crop pixel ({x}, {y}) has no template pixel nearby");
                    }
                }
            }
        }
    }

    #[test]
    fn crop_outside_image_is_no_measurement() {
        let map = EdgeMap::from_pixels(0, 640, 480, [EdgePixel { x: 10, y: 10, intensity: 1.0 }]);
        let t_co = Vector3::new(5.0, 0.0, 0.6);
        let err = crop_canonical_roi(&map, &t_co, &CameraIntrinsics::default(), 96, 0.6).unwrap_err();
        assert!(matches!(err, TemplateError::NoMeasurement(_)));
    }

    #[test]
    fn self_match_returns_same_template() {
        let model = bracket();
        let set = build_templates(&model, 30, 6, 600.0, 600.0).unwrap();
        for (k, t) in set.templates.iter().enumerate() {
            let roi = roi_from_template(t, 96);
            let m = match_roi(&roi, &set, &MatchOptions::default()).unwrap();
            assert_eq!(m.template_index, k);
            assert_eq!(m.measurement.confidence, 1.0);
            assert!(m.measurement.rotation.angle_to(&t.rotation) < 1e-12);
        }
    }

    #[test]
    fn self_match_in_gradient_mode() {
        let model = bracket();
        let set = build_templates(&model, 12, 4, 600.0, 600.0).unwrap();
        let opts = MatchOptions { mode: ScoringMode::Gradient, ..MatchOptions::default() };
        for (k, t) in set.templates.iter().enumerate() {
            let m = match_roi(&roi_from_template(t, 96), &set, &opts).unwrap();
            assert_eq!(m.template_index, k);
        }
    }

    #[test]
    fn empty_roi_is_no_measurement() {
        let model = bracket();
        let set = build_templates(&model, 4, 1, 600.0, 600.0).unwrap();
        let roi = CanonicalRoi::new(0, 96, Vector3::new(0.0, 0.0, 0.6));
        assert!(matches!(match_roi(&roi, &set, &MatchOptions::default()), Err(TemplateError::NoMeasurement(_))));
    }

    #[test]
    fn jittered_match_within_one_sampling_step() {
        let model = bracket();
        let (n_views, n_inplane) = (200, 24);
        let set = build_templates(&model, n_views, n_inplane, 600.0, 600.0).unwrap();
        let view_step = (8.0 * PI / (3f64.sqrt() * n_views as f64)).sqrt();
        let step = view_step + 2.0 * PI / n_inplane as f64;
        let mut rng = stream_rng(3, 0, 0, Stream::Scene);
        let profile = NoiseProfile { edge_pixel_sigma: 0.6, ..NoiseProfile::noiseless() };
        let view = on_axis_view();
        for _ in 0..10 {
            let r = uniform_rotation(&mut rng);
            let t_co = Vector3::new(0.0, 0.0, 0.6);
            let obj = SceneObject { id: 0, model: 0, pose: Pose::new(r, t_co) };
            let map = crate::measure::simulate_edge_map(&obj, &model, &view, &profile, &mut rng).unwrap();
            let roi = crop_canonical_roi(&map, &t_co, &view.intrinsics, 96, 0.6).unwrap();
            let m = match_roi(&roi, &set, &MatchOptions::default()).unwrap();
            // Exhaustive oracle: the returned template attains the best pooled score.
            let pooled = roi.pooled();
            let best = set
                .templates
                .iter()
                .map(|t| t.pixels.iter().map(|p| pooled[p.y as usize * 96 + p.x as usize]).sum::<f64>() / t.pixels.len() as f64)
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(m.score, best);
            assert!(m.measurement.rotation.angle_to(&r) <= step, "error {}°", m.measurement.rotation.angle_to(&r).to_degrees());
        }
    }

    #[test]
    fn clutter_never_decreases_scores() {
        let model = bracket();
        let set = build_templates(&model, 20, 4, 600.0, 600.0).unwrap();
        let base = roi_from_template(&set.templates[5], 96);
        let mut cluttered = base.clone();
        for i in 0..200 {
            cluttered.set_max((i * 37) % 96, (i * 53) % 96, 0.2);
        }
        let pb = base.pooled();
        let pc = cluttered.pooled();
        for t in &set.templates {
            let sb: f64 = t.pixels.iter().map(|p| pb[p.y as usize * 96 + p.x as usize]).sum();
            let sc: f64 = t.pixels.iter().map(|p| pc[p.y as usize * 96 + p.x as usize]).sum();
            assert!(sc >= sb);
        }
    }

    #[test]
    fn off_axis_match_composes_ray_rotation() {
        let model = bracket();
        let set = build_templates(&model, 300, 36, 600.0, 600.0).unwrap();
        let r_t = set.templates[123].rotation;
        let t_co = Vector3::new(0.08, -0.05, 0.6);
        let r_co = ray_rotation(&t_co) * r_t;
        let map = edge_map_at(&model, r_co, t_co);
        let m = measure_orientation(&map, &t_co, &CameraIntrinsics::default(), &set, &MatchOptions::default()).unwrap();
        assert!(m.measurement.rotation.angle_to(&r_co) < 12f64.to_radians());
    }

    #[test]
    fn cache_round_trip_and_key_mismatch() {
        let model = bracket();
        let set = build_templates(&model, 6, 2, 600.0, 600.0).unwrap();
        let mut buf = Vec::new();
        set.write_cache(&mut buf).unwrap();
        let back = TemplateSet::read_cache(std::io::Cursor::new(&buf), &set.key).unwrap().unwrap();
        assert_eq!(back, set);
        let other = TemplateCacheKey { n_views: 7, ..set.key.clone() };
        assert!(TemplateSet::read_cache(std::io::Cursor::new(&buf), &other).unwrap().is_none());
    }
}
