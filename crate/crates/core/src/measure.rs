//! Measurement simulator standing in for the detection network: per-view
//! object-center pixels with covariance, sparse edge maps, and direct
//! orientation measurements with symmetry ambiguity, confusions and outliers.

use std::io::{BufRead, Write};

use nalgebra::{Matrix2, Vector2, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{project, Rotation, RotVec};
use crate::rng::{stream_rng, Stream};
use crate::scene::{uniform_rotation, ObjectModel, Scene, SceneObject, SymmetryGroup, Viewpoint};

/// Smallest reported center standard deviation, pixels; keeps Σ_u SPD when
/// the simulated noise is zero.
pub const MIN_REPORTED_SIGMA: f64 = 1e-3;

/// Minimum angular separation between the confusable rotation and every
/// symmetry-equivalent ground truth, radians.
pub const MIN_CONFUSION_ANGLE: f64 = std::f64::consts::PI / 3.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("no measurement: {0}")]
    NoMeasurement(String),
    #[error("unknown object id {0}")]
    UnknownObject(usize),
    #[error("unknown view id {0}")]
    UnknownView(usize),
    #[error("invalid noise profile: {0}")]
    InvalidProfile(String),
    #[error("record i/o: {0}")]
    Io(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterMeasurement {
    pub view_id: usize,
    /// Object center pixel.
    pub u: Vector2<f64>,
    /// Center covariance, pixels².
    pub cov: Matrix2<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgePixel {
    pub x: u32,
    pub y: u32,
    pub intensity: f64,
}

/// Sparse edge map; pixels are kept sorted by `(y, x)` and unique.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeMap {
    pub view_id: usize,
    pub width: u32,
    pub height: u32,
    pixels: Vec<EdgePixel>,
}

impl EdgeMap {
    pub fn new(view_id: usize, width: u32, height: u32) -> Self {
        EdgeMap { view_id, width, height, pixels: Vec::new() }
    }

    /// Builds a map from arbitrary entries; duplicates keep the maximum,
    /// out-of-range pixels and non-positive intensities are dropped and
    /// intensities are clamped to 1.
    pub fn from_pixels(view_id: usize, width: u32, height: u32, pixels: impl IntoIterator<Item = EdgePixel>) -> Self {
        let mut map = EdgeMap::new(view_id, width, height);
        for p in pixels {
            map.splat(p.x as i64, p.y as i64, p.intensity);
        }
        map
    }

    fn key(p: &EdgePixel) -> (u32, u32) {
        (p.y, p.x)
    }

    /// Writes `intensity` at `(x, y)` keeping the maximum of old and new.
    pub fn splat(&mut self, x: i64, y: i64, intensity: f64) {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 || !(intensity > 0.0) {
            return;
        }
        let px = EdgePixel { x: x as u32, y: y as u32, intensity: intensity.min(1.0) };
        match self.pixels.binary_search_by_key(&Self::key(&px), Self::key) {
            Ok(i) => self.pixels[i].intensity = self.pixels[i].intensity.max(px.intensity),
            Err(i) => self.pixels.insert(i, px),
        }
    }

    pub fn get(&self, x: i64, y: i64) -> f64 {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return 0.0;
        }
        self.pixels
            .binary_search_by_key(&(y as u32, x as u32), Self::key)
            .map(|i| self.pixels[i].intensity)
            .unwrap_or(0.0)
    }

    /// Maximum intensity over the 3×3 neighborhood of `(x, y)`.
    pub fn pooled(&self, x: i64, y: i64) -> f64 {
        let mut best = 0.0f64;
        for dy in -1..=1 {
            for dx in -1..=1 {
                best = best.max(self.get(x + dx, y + dy));
            }
        }
        best
    }

    pub fn pixels(&self) -> &[EdgePixel] {
        &self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Every intensity multiplied by `factor`, clamped to 1.
    pub fn scaled(&self, factor: f64) -> EdgeMap {
        let mut out = self.clone();
        for p in &mut out.pixels {
            p.intensity = (p.intensity * factor).min(1.0);
        }
        out
    }

    /// The same map shifted by `(dx, dy)` pixels; pixels leaving the image
    /// are dropped.
    pub fn shifted(&self, dx: i64, dy: i64) -> EdgeMap {
        EdgeMap::from_pixels(
            self.view_id,
            self.width,
            self.height,
            self.pixels.iter().filter_map(|p| {
                let (x, y) = (p.x as i64 + dx, p.y as i64 + dy);
                (x >= 0 && y >= 0).then_some(EdgePixel { x: x as u32, y: y as u32, intensity: p.intensity })
            }),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientationMeasurement {
    pub view_id: usize,
    /// Measured `R_co`.
    pub rotation: Rotation,
    /// Match confidence in (0, 1].
    pub confidence: f64,
}

/// Ground-truth provenance of a simulated orientation draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrawKind {
    Inlier,
    Ambiguous,
    Outlier,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrientationDraw {
    pub measurement: OrientationMeasurement,
    pub kind: DrawKind,
    /// Symmetry element composed onto the ground truth for inlier draws.
    pub symmetry_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfidenceModel {
    pub inlier_low: f64,
    pub inlier_high: f64,
    pub outlier_low: f64,
    pub outlier_high: f64,
}

impl Default for ConfidenceModel {
    fn default() -> Self {
        ConfidenceModel { inlier_low: 0.7, inlier_high: 1.0, outlier_low: 0.2, outlier_high: 0.6 }
    }
}

/// Simulator noise settings. All defaults are artifact choices, not values
/// measured from a trained detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseProfile {
    /// Per-axis center noise, pixels.
    pub center_sigma: f64,
    pub center_outlier_rate: f64,
    /// RMS angle of the orientation perturbation, radians (per-axis
    /// standard deviation is `orient_sigma/√3`).
    pub orient_sigma: f64,
    pub orient_outlier_rate: f64,
    pub ambiguity_rate: f64,
    /// Object-frame rotation vector of the fixed confusable orientation.
    pub confusion_rotvec: [f64; 3],
    pub confidence: ConfidenceModel,
    /// Per-axis jitter of projected edge points, pixels.
    pub edge_pixel_sigma: f64,
    /// Inlier edge intensity is `1 − U(0, jitter)`.
    pub edge_intensity_jitter: f64,
    pub edge_dropout_rate: f64,
    /// Expected spurious pixels per model edge point.
    pub clutter_rate: f64,
    pub clutter_intensity: [f64; 2],
}

impl Default for NoiseProfile {
    fn default() -> Self {
        NoiseProfile {
            center_sigma: 1.0,
            center_outlier_rate: 0.0,
            orient_sigma: 3f64.to_radians(),
            orient_outlier_rate: 0.05,
            ambiguity_rate: 0.1,
            confusion_rotvec: [std::f64::consts::FRAC_PI_2, 0.0, 0.0],
            confidence: ConfidenceModel::default(),
            edge_pixel_sigma: 0.5,
            edge_intensity_jitter: 0.2,
            edge_dropout_rate: 0.0,
            clutter_rate: 0.1,
            clutter_intensity: [0.05, 0.3],
        }
    }
}

impl NoiseProfile {
    /// Every noise source disabled.
    pub fn noiseless() -> Self {
        NoiseProfile {
            center_sigma: 0.0,
            center_outlier_rate: 0.0,
            orient_sigma: 0.0,
            orient_outlier_rate: 0.0,
            ambiguity_rate: 0.0,
            edge_pixel_sigma: 0.0,
            edge_intensity_jitter: 0.0,
            edge_dropout_rate: 0.0,
            clutter_rate: 0.0,
            ..NoiseProfile::default()
        }
    }

    /// Returns `Err((field, message))` for the first invalid field.
    pub fn check(&self) -> Result<(), (&'static str, String)> {
        let rate = |name: &'static str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err((name, format!("must lie in [0, 1), got {v}")))
            }
        };
        let sigma = |name: &'static str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err((name, format!("must be a finite value ≥ 0, got {v}")))
            }
        };
        sigma("center_sigma", self.center_sigma)?;
        sigma("orient_sigma", self.orient_sigma)?;
        sigma("edge_pixel_sigma", self.edge_pixel_sigma)?;
        rate("center_outlier_rate", self.center_outlier_rate)?;
        rate("orient_outlier_rate", self.orient_outlier_rate)?;
        rate("ambiguity_rate", self.ambiguity_rate)?;
        rate("edge_dropout_rate", self.edge_dropout_rate)?;
        if self.ambiguity_rate + self.orient_outlier_rate >= 1.0 {
            return Err(("ambiguity_rate", "ambiguity_rate + orient_outlier_rate must be below 1".into()));
        }
        if !(0.0..=1.0).contains(&self.edge_intensity_jitter) {
            return Err(("edge_intensity_jitter", "must lie in [0, 1]".into()));
        }
        if !(self.clutter_rate >= 0.0 && self.clutter_rate <= 1.0) {
            return Err(("clutter_rate", "must lie in [0, 1]".into()));
        }
        let [lo, hi] = self.clutter_intensity;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(("clutter_intensity", "must satisfy 0 < low ≤ high ≤ 1".into()));
        }
        let c = &self.confidence;
        if !(c.inlier_low > 0.0 && c.inlier_low <= c.inlier_high && c.inlier_high <= 1.0) {
            return Err(("confidence.inlier_low", "inlier range must satisfy 0 < low ≤ high ≤ 1".into()));
        }
        if !(c.outlier_low > 0.0 && c.outlier_low <= c.outlier_high && c.outlier_high <= 1.0) {
            return Err(("confidence.outlier_low", "outlier range must satisfy 0 < low ≤ high ≤ 1".into()));
        }
        Ok(())
    }

    pub fn confusion(&self) -> Rotation {
        Rotation::exp(&Vector3::from(self.confusion_rotvec))
    }
}

fn uniform_in<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn not_visible(object: &SceneObject, view: &Viewpoint, why: &str) -> MeasureError {
    MeasureError::NoMeasurement(format!("object {} in view {}: {why}", object.id, view.id))
}

pub fn simulate_center<R: Rng + ?Sized>(
    object: &SceneObject,
    view: &Viewpoint,
    profile: &NoiseProfile,
    rng: &mut R,
) -> Result<CenterMeasurement, MeasureError> {
    let intr = &view.intrinsics;
    let t_co = view.pose.inverse_transform_point(&object.pose.translation);
    let truth = project(&t_co, intr).map_err(|_| not_visible(object, view, "behind camera"))?;
    if !intr.contains(&truth) {
        return Err(not_visible(object, view, "center outside image"));
    }
    let (w, h) = (intr.width as f64, intr.height as f64);
    let outlier = rng.random::<f64>() < profile.center_outlier_rate;
    let u = if outlier {
        Vector2::new(rng.random_range(0.0..w), rng.random_range(0.0..h))
    } else {
        let (nx, ny) = (normal(rng), normal(rng));
        let noisy = truth + Vector2::new(nx, ny) * profile.center_sigma;
        let below = |v: f64| v * (1.0 - f64::EPSILON);
        Vector2::new(noisy.x.clamp(0.0, below(w)), noisy.y.clamp(0.0, below(h)))
    };
    let s = profile.center_sigma.max(MIN_REPORTED_SIGMA);
    Ok(CenterMeasurement { view_id: view.id, u, cov: Matrix2::identity() * (s * s) })
}

/// Counts of what went into a simulated edge map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EdgeMapStats {
    pub projected: usize,
    pub dropped: usize,
    pub clutter: usize,
}

pub fn simulate_edge_map_detailed<R: Rng + ?Sized>(
    object: &SceneObject,
    model: &ObjectModel,
    view: &Viewpoint,
    profile: &NoiseProfile,
    rng: &mut R,
) -> Result<(EdgeMap, EdgeMapStats), MeasureError> {
    let intr = &view.intrinsics;
    let t_co_pose = view.pose.inverse() * object.pose;
    if t_co_pose.translation.z <= crate::geom::MIN_DEPTH {
        return Err(not_visible(object, view, "behind camera"));
    }
    let mut map = EdgeMap::new(view.id, intr.width, intr.height);
    let mut stats = EdgeMapStats::default();
    let mut lo = Vector2::repeat(f64::INFINITY);
    let mut hi = Vector2::repeat(f64::NEG_INFINITY);
    for x in &model.edge_points {
        let p = t_co_pose.transform_point(x);
        let Ok(mut u) = project(&p, intr) else { continue };
        if profile.edge_pixel_sigma > 0.0 {
            u += Vector2::new(normal(rng), normal(rng)) * profile.edge_pixel_sigma;
        }
        lo = lo.inf(&u);
        hi = hi.sup(&u);
        if profile.edge_dropout_rate > 0.0 && rng.random::<f64>() < profile.edge_dropout_rate {
            stats.dropped += 1;
            continue;
        }
        let intensity = 1.0 - profile.edge_intensity_jitter * rng.random::<f64>();
        let (px, py) = (u.x.round() as i64, u.y.round() as i64);
        if px >= 0 && py >= 0 && px < intr.width as i64 && py < intr.height as i64 {
            map.splat(px, py, intensity);
            stats.projected += 1;
        }
    }
    if stats.projected == 0 {
        return Err(not_visible(object, view, "no edge point inside the image"));
    }
    if profile.clutter_rate > 0.0 {
        let margin = 10.0;
        let x0 = (lo.x - margin).max(0.0);
        let y0 = (lo.y - margin).max(0.0);
        let x1 = (hi.x + margin).min(intr.width as f64 - 1.0);
        let y1 = (hi.y + margin).min(intr.height as f64 - 1.0);
        let [ilo, ihi] = profile.clutter_intensity;
        for _ in 0..model.edge_points.len() {
            if rng.random::<f64>() < profile.clutter_rate {
                let cx = uniform_in(rng, x0, x1).round() as i64;
                let cy = uniform_in(rng, y0, y1).round() as i64;
                let intensity = uniform_in(rng, ilo, ihi);
                map.splat(cx, cy, intensity);
                stats.clutter += 1;
            }
        }
    }
    Ok((map, stats))
}

pub fn simulate_edge_map<R: Rng + ?Sized>(
    object: &SceneObject,
    model: &ObjectModel,
    view: &Viewpoint,
    profile: &NoiseProfile,
    rng: &mut R,
) -> Result<EdgeMap, MeasureError> {
    simulate_edge_map_detailed(object, model, view, profile, rng).map(|(m, _)| m)
}

/// Small-angle isotropic perturbation with RMS angle `sigma`.
pub fn perturb<R: Rng + ?Sized>(r: &Rotation, sigma: f64, rng: &mut R) -> Rotation {
    if sigma <= 0.0 {
        return *r;
    }
    let s = sigma / 3f64.sqrt();
    let n: RotVec = Vector3::new(normal(rng), normal(rng), normal(rng)) * s;
    Rotation::exp(&n) * *r
}

pub fn simulate_orientation<R: Rng + ?Sized>(
    object: &SceneObject,
    symmetry: &SymmetryGroup,
    view: &Viewpoint,
    profile: &NoiseProfile,
    rng: &mut R,
) -> Result<OrientationDraw, MeasureError> {
    let t_co = view.pose.inverse_transform_point(&object.pose.translation);
    let center = project(&t_co, &view.intrinsics).map_err(|_| not_visible(object, view, "behind camera"))?;
    if !view.intrinsics.contains(&center) {
        return Err(not_visible(object, view, "center outside image"));
    }
    let r_co = view.pose.rotation.inverse() * object.pose.rotation;
    let c = &profile.confidence;
    let draw: f64 = rng.random();
    let (base, kind, symmetry_index, confidence) = if draw < profile.ambiguity_rate {
        let conf = uniform_in(rng, c.outlier_low, c.outlier_high);
        (r_co * profile.confusion(), DrawKind::Ambiguous, 0, conf)
    } else if draw < profile.ambiguity_rate + profile.orient_outlier_rate {
        let conf = uniform_in(rng, c.outlier_low, c.outlier_high);
        (uniform_rotation(rng), DrawKind::Outlier, 0, conf)
    } else {
        let k = rng.random_range(0..symmetry.order());
        let conf = uniform_in(rng, c.inlier_low, c.inlier_high);
        (r_co * symmetry.elements()[k], DrawKind::Inlier, k, conf)
    };
    let rotation = perturb(&base, profile.orient_sigma, rng);
    Ok(OrientationDraw {
        measurement: OrientationMeasurement { view_id: view.id, rotation, confidence },
        kind,
        symmetry_index,
    })
}

/// All measurements acquired from one view for one object.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ViewMeasurements {
    pub object_id: usize,
    pub view_id: usize,
    pub center: Option<CenterMeasurement>,
    pub edge_map: Option<EdgeMap>,
    pub orientation: Option<OrientationMeasurement>,
}

/// Scene-bound simulator; every draw uses the counter-based stream for
/// `(seed, object, view)`.
#[derive(Clone, Debug)]
pub struct Simulator<'a> {
    scene: &'a Scene,
    profile: NoiseProfile,
    seed: u64,
}

impl<'a> Simulator<'a> {
    pub fn new(scene: &'a Scene, profile: NoiseProfile, seed: u64) -> Result<Self, MeasureError> {
        profile.check().map_err(|(f, m)| MeasureError::InvalidProfile(format!("{f}: {m}")))?;
        let confusion = profile.confusion();
        for model in &scene.models {
            let closest = model
                .symmetry
                .elements()
                .iter()
                .map(|s| s.angle_to(&confusion))
                .fold(f64::INFINITY, f64::min);
            if closest < MIN_CONFUSION_ANGLE {
                return Err(MeasureError::InvalidProfile(format!(
                    "confusion rotation is only {:.1}° from a symmetry of model '{}'",
                    closest.to_degrees(),
                    model.name
                )));
            }
        }
        Ok(Simulator { scene, profile, seed })
    }

    pub fn profile(&self) -> &NoiseProfile {
        &self.profile
    }

    fn lookup(&self, object_id: usize, view_id: usize) -> Result<(&'a SceneObject, &'a Viewpoint), MeasureError> {
        let object = self.scene.object(object_id).ok_or(MeasureError::UnknownObject(object_id))?;
        let view = self.scene.catalog.get(view_id).ok_or(MeasureError::UnknownView(view_id))?;
        Ok((object, view))
    }

    pub fn center(&self, object_id: usize, view_id: usize) -> Result<CenterMeasurement, MeasureError> {
        let (object, view) = self.lookup(object_id, view_id)?;
        let mut rng = stream_rng(self.seed, object_id as u64, view_id as u64, Stream::Center);
        simulate_center(object, view, &self.profile, &mut rng)
    }

    pub fn edge_map(&self, object_id: usize, view_id: usize) -> Result<EdgeMap, MeasureError> {
        let (object, view) = self.lookup(object_id, view_id)?;
        let mut rng = stream_rng(self.seed, object_id as u64, view_id as u64, Stream::EdgeMap);
        simulate_edge_map(object, self.scene.model_of(object), view, &self.profile, &mut rng)
    }

    pub fn orientation(&self, object_id: usize, view_id: usize) -> Result<OrientationDraw, MeasureError> {
        let (object, view) = self.lookup(object_id, view_id)?;
        let mut rng = stream_rng(self.seed, object_id as u64, view_id as u64, Stream::Orientation);
        simulate_orientation(object, &self.scene.model_of(object).symmetry, view, &self.profile, &mut rng)
    }

    /// Acquires every measurement type; unavailable ones are left `None`.
    /// `with_orientation = false` skips the direct orientation surrogate
    /// (used when orientations come from template matching).
    pub fn acquire(&self, object_id: usize, view_id: usize, with_orientation: bool) -> ViewMeasurements {
        ViewMeasurements {
            object_id,
            view_id,
            center: self.center(object_id, view_id).ok(),
            edge_map: self.edge_map(object_id, view_id).ok(),
            orientation: if with_orientation {
                self.orientation(object_id, view_id).ok().map(|d| d.measurement)
            } else {
                None
            },
        }
    }
}

/// One line of a measurement stream file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MeasurementRecord {
    /// Marks the start of a view's measurements.
    View { object_id: usize, view_id: usize },
    Center { object_id: usize, measurement: CenterMeasurement },
    Edge { object_id: usize, measurement: EdgeMap },
    Orientation { object_id: usize, measurement: OrientationMeasurement },
}

impl ViewMeasurements {
    pub fn to_records(&self) -> Vec<MeasurementRecord> {
        let object_id = self.object_id;
        let mut out = vec![MeasurementRecord::View { object_id, view_id: self.view_id }];
        if let Some(m) = &self.center {
            out.push(MeasurementRecord::Center { object_id, measurement: m.clone() });
        }
        if let Some(m) = &self.edge_map {
            out.push(MeasurementRecord::Edge { object_id, measurement: m.clone() });
        }
        if let Some(m) = &self.orientation {
            out.push(MeasurementRecord::Orientation { object_id, measurement: m.clone() });
        }
        out
    }
}

pub fn write_records<W: Write>(mut w: W, views: &[ViewMeasurements]) -> Result<(), MeasureError> {
    for v in views {
        for rec in v.to_records() {
            let line = serde_json::to_string(&rec).map_err(|e| MeasureError::Io(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| MeasureError::Io(e.to_string()))?;
        }
    }
    Ok(())
}

/// Reads a stream written by [`write_records`], regrouping by view markers.
pub fn read_records<R: BufRead>(r: R) -> Result<Vec<ViewMeasurements>, MeasureError> {
    let mut out: Vec<ViewMeasurements> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| MeasureError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MeasurementRecord =
            serde_json::from_str(&line).map_err(|e| MeasureError::Io(format!("line {}: {e}", i + 1)))?;
        let missing_view = || MeasureError::Io(format!("line {}: measurement before any view marker", i + 1));
        match rec {
            MeasurementRecord::View { object_id, view_id } => {
                out.push(ViewMeasurements { object_id, view_id, ..Default::default() });
            }
            MeasurementRecord::Center { measurement, .. } => {
                out.last_mut().ok_or_else(missing_view)?.center = Some(measurement);
            }
            MeasurementRecord::Edge { measurement, .. } => {
                out.last_mut().ok_or_else(missing_view)?.edge_map = Some(measurement);
            }
            MeasurementRecord::Orientation { measurement, .. } => {
                out.last_mut().ok_or_else(missing_view)?.orientation = Some(measurement);
            }
        }
    }
    Ok(out)
}
