//! Object-center triangulation: two-view initialization, damped Gauss-Newton
//! refinement over all views, Mahalanobis outlier gating, and greedy
//! detection-to-track association.

use nalgebra::{Matrix2, Matrix3, SymmetricEigen, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{back_project, project, projection_jacobian, CameraIntrinsics, Pose};
use crate::measure::CenterMeasurement;

/// Rays closer than this to parallel cannot be triangulated.
pub const MIN_RAY_ANGLE_DEG: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TranslationError {
    #[error("translation unobservable: {0}")]
    Unobservable(String),
    #[error("no convergence after {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("degenerate baseline: ray angle {angle_deg:.3}°")]
    DegenerateBaseline { angle_deg: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// A center measurement together with the camera that took it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterObservation {
    pub view_id: usize,
    /// Camera pose `T_wc`.
    pub camera: Pose,
    pub intrinsics: CameraIntrinsics,
    pub u: Vector2<f64>,
    pub cov: Matrix2<f64>,
}

impl CenterObservation {
    pub fn new(m: &CenterMeasurement, camera: Pose, intrinsics: CameraIntrinsics) -> Self {
        CenterObservation { view_id: m.view_id, camera, intrinsics, u: m.u, cov: m.cov }
    }

    /// Unit ray direction through the measured pixel, world frame.
    pub fn ray(&self) -> Vector3<f64> {
        let p = back_project(&self.u, 1.0, &self.intrinsics).expect("unit depth is valid");
        (self.camera.rotation * p).normalize()
    }

    pub fn residual(&self, t_wo: &Vector3<f64>) -> Option<Vector2<f64>> {
        let p = self.camera.inverse_transform_point(t_wo);
        project(&p, &self.intrinsics).ok().map(|q| self.u - q)
    }

    /// Squared Mahalanobis distance of the residual at `t_wo`.
    pub fn mahalanobis_sq(&self, t_wo: &Vector3<f64>) -> f64 {
        match (self.residual(t_wo), self.cov.try_inverse()) {
            (Some(r), Some(w)) => (r.transpose() * w * r)[(0, 0)],
            _ => f64::INFINITY,
        }
    }

    /// Information contribution `JᵀΣ⁻¹J` at `t_wo`.
    pub fn information(&self, t_wo: &Vector3<f64>) -> Option<Matrix3<f64>> {
        let j = projection_jacobian(t_wo, &self.camera, &self.intrinsics).ok()?;
        let w = self.cov.try_inverse()?;
        Some(j.transpose() * w * j)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Stop once the update is shorter than this, meters.
    pub step_tolerance: f64,
    pub max_condition: f64,
    pub initial_damping: f64,
    /// Consecutive non-decreasing steps before giving up.
    pub max_stalls: usize,
    /// Squared Mahalanobis distance above which a measurement is rejected.
    pub outlier_gate: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iterations: 50,
            step_tolerance: 1e-8,
            max_condition: 1e12,
            initial_damping: 1e-6,
            max_stalls: 5,
            outlier_gate: 25.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslationEstimate {
    pub t_wo: Vector3<f64>,
    pub cov: Matrix3<f64>,
    pub iterations: usize,
    /// Views whose measurements were used.
    pub inliers: Vec<usize>,
    /// Views rejected by the outlier gate.
    pub rejected: Vec<usize>,
}

/// Ratio of extreme eigenvalues of a symmetric matrix; infinite when not
/// positive definite.
pub fn condition_number(h: &Matrix3<f64>) -> f64 {
    let eig = SymmetricEigen::new(*h).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

fn distinct_centers(obs: &[CenterObservation]) -> usize {
    let mut centers: Vec<Vector3<f64>> = Vec::new();
    for o in obs {
        let c = o.camera.translation;
        if centers.iter().all(|d| (d - c).norm() > 1e-9) {
            centers.push(c);
        }
    }
    centers.len()
}

/// Midpoint of the common perpendicular of the two measurement rays.
pub fn triangulate_two_view(a: &CenterObservation, b: &CenterObservation) -> Result<Vector3<f64>, TranslationError> {
    let (ca, cb) = (a.camera.translation, b.camera.translation);
    let (da, db) = (a.ray(), b.ray());
    let angle = da.dot(&db).clamp(-1.0, 1.0).acos();
    if angle.to_degrees() < MIN_RAY_ANGLE_DEG {
        return Err(TranslationError::DegenerateBaseline { angle_deg: angle.to_degrees() });
    }
    // Minimize |ca + s·da − cb − t·db|².
    let w = ca - cb;
    let (b_, d, e) = (da.dot(&db), da.dot(&w), db.dot(&w));
    let denom = 1.0 - b_ * b_;
    let s = (b_ * e - d) / denom;
    let t = (e - b_ * d) / denom;
    Ok(0.5 * ((ca + s * da) + (cb + t * db)))
}

/// Sum of squared Mahalanobis residuals; infinite if any view sees the point
/// behind the camera.
pub fn translation_cost(obs: &[CenterObservation], t_wo: &Vector3<f64>) -> f64 {
    obs.iter().map(|o| o.mahalanobis_sq(t_wo)).sum()
}

/// Total information `Σ JᵀΣ⁻¹J` at `t_wo`.
pub fn information_matrix(obs: &[CenterObservation], t_wo: &Vector3<f64>) -> Result<Matrix3<f64>, TranslationError> {
    let mut h = Matrix3::zeros();
    for o in obs {
        h += o.information(t_wo).ok_or_else(|| {
            TranslationError::Unobservable(format!("view {}: point behind camera or singular covariance", o.view_id))
        })?;
    }
    Ok(h)
}

/// Best-conditioned starting point: triangulation from the pair of views with
/// the widest ray angle.
pub fn initialize(obs: &[CenterObservation]) -> Result<Vector3<f64>, TranslationError> {
    if distinct_centers(obs) < 2 {
        return Err(TranslationError::Unobservable("fewer than two distinct views".into()));
    }
    let mut best: Option<(f64, usize, usize)> = None;
    for i in 0..obs.len() {
        for j in i + 1..obs.len() {
            let a = obs[i].ray().dot(&obs[j].ray()).clamp(-1.0, 1.0).acos();
            if best.is_none_or(|(b, _, _)| a > b) {
                best = Some((a, i, j));
            }
        }
    }
    let (_, i, j) = best.expect("at least two observations");
    triangulate_two_view(&obs[i], &obs[j])
}

/// Levenberg-damped Gauss-Newton from `init`, without outlier handling.
pub fn refine_translation(
    obs: &[CenterObservation],
    init: &Vector3<f64>,
    opts: &SolverOptions,
) -> Result<TranslationEstimate, TranslationError> {
    if distinct_centers(obs) < 2 {
        return Err(TranslationError::Unobservable("fewer than two distinct views".into()));
    }
    let mut t = *init;
    let mut cost = translation_cost(obs, &t);
    if !cost.is_finite() {
        return Err(TranslationError::InvalidInput("initial point is behind a camera".into()));
    }
    let mut lambda = opts.initial_damping;
    let mut stalls = 0;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        iterations += 1;
        let mut h = Matrix3::zeros();
        let mut g = Vector3::zeros();
        for o in obs {
            let j = projection_jacobian(&t, &o.camera, &o.intrinsics)
                .map_err(|e| TranslationError::Unobservable(e.to_string()))?;
            let w = o.cov.try_inverse().ok_or_else(|| TranslationError::InvalidInput("singular covariance".into()))?;
            let r = o.residual(&t).expect("finite cost implies projectable");
            h += j.transpose() * w * j;
            g += j.transpose() * w * r;
        }
        if condition_number(&h) > opts.max_condition {
            return Err(TranslationError::Unobservable(format!("information condition {:.3e}", condition_number(&h))));
        }
        let damped = h + Matrix3::from_diagonal(&h.diagonal()) * lambda;
        let step = damped
            .cholesky()
            .map(|c| c.solve(&g))
            .ok_or_else(|| TranslationError::Unobservable("damped system not positive definite".into()))?;
        if step.norm() < opts.step_tolerance {
            break;
        }
        let candidate = t + step;
        let new_cost = translation_cost(obs, &candidate);
        if new_cost < cost {
            t = candidate;
            cost = new_cost;
            lambda /= 10.0;
            stalls = 0;
        } else {
            lambda *= 10.0;
            stalls += 1;
            if stalls >= opts.max_stalls {
                return Err(TranslationError::NoConvergence { iterations });
            }
        }
    }
    let h = information_matrix(obs, &t)?;
    if condition_number(&h) > opts.max_condition {
        return Err(TranslationError::Unobservable(format!("information condition {:.3e}", condition_number(&h))));
    }
    let cov = h.try_inverse().ok_or_else(|| TranslationError::Unobservable("singular information".into()))?;
    Ok(TranslationEstimate {
        t_wo: t,
        cov: 0.5 * (cov + cov.transpose()),
        iterations,
        inliers: obs.iter().map(|o| o.view_id).collect(),
        rejected: Vec::new(),
    })
}

/// Full estimate: initialize (unless `init` is given), refine, gate outliers
/// at the Mahalanobis threshold, and re-solve once on the survivors. The
/// first solution is kept when fewer than two distinct views would remain.
pub fn estimate_translation(
    obs: &[CenterObservation],
    init: Option<Vector3<f64>>,
    opts: &SolverOptions,
) -> Result<TranslationEstimate, TranslationError> {
    let start = match init {
        Some(t) if translation_cost(obs, &t).is_finite() => t,
        _ => initialize(obs)?,
    };
    let first = refine_translation(obs, &start, opts)?;
    let (keep, drop): (Vec<&CenterObservation>, Vec<&CenterObservation>) =
        obs.iter().partition(|o| o.mahalanobis_sq(&first.t_wo) <= opts.outlier_gate);
    if drop.is_empty() {
        return Ok(first);
    }
    let kept: Vec<CenterObservation> = keep.into_iter().cloned().collect();
    if distinct_centers(&kept) < 2 {
        return Ok(first);
    }
    match refine_translation(&kept, &first.t_wo, opts) {
        Ok(mut second) => {
            second.rejected = drop.iter().map(|o| o.view_id).collect();
            Ok(second)
        }
        Err(_) => Ok(first),
    }
}

/// What a track knows when associating a new detection.
#[derive(Clone, Debug, PartialEq)]
pub enum TrackHypothesis {
    /// Triangulated center.
    Point(Vector3<f64>),
    /// Single prior view: the detection must lie near this ray.
    Ray { origin: Vector3<f64>, direction: Vector3<f64> },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Association {
    /// `(detection index, track index)` pairs.
    pub assigned: Vec<(usize, usize)>,
    /// Detections matching no track; candidates for new objects.
    pub unassigned: Vec<usize>,
}

/// Distance from `u` to the image of a world ray.
pub fn epipolar_distance(
    u: &Vector2<f64>,
    origin: &Vector3<f64>,
    direction: &Vector3<f64>,
    camera: &Pose,
    intr: &CameraIntrinsics,
) -> f64 {
    let pts: Vec<Vector2<f64>> = [0.05, 0.2, 1.0, 5.0, 25.0]
        .iter()
        .filter_map(|s| project(&camera.inverse_transform_point(&(origin + direction * *s)), intr).ok())
        .collect();
    if pts.len() < 2 {
        return f64::INFINITY;
    }
    let (a, b) = (pts[0], pts[pts.len() - 1]);
    let d = b - a;
    if d.norm() < 1e-9 {
        return (u - a).norm();
    }
    let n = Vector2::new(-d.y, d.x) / d.norm();
    (u - a).dot(&n).abs()
}

/// Greedy nearest-first association with a pixel gate. Distances are
/// reprojection errors for triangulated tracks and epipolar distances for
/// single-view tracks; ties resolve to the lower detection, then track index.
pub fn associate(
    detections: &[Vector2<f64>],
    tracks: &[TrackHypothesis],
    camera: &Pose,
    intr: &CameraIntrinsics,
    gate_px: f64,
) -> Association {
    let mut pairs = Vec::new();
    for (di, u) in detections.iter().enumerate() {
        for (ti, track) in tracks.iter().enumerate() {
            let d = match track {
                TrackHypothesis::Point(p) => project(&camera.inverse_transform_point(p), intr)
                    .map(|q| (u - q).norm())
                    .unwrap_or(f64::INFINITY),
                TrackHypothesis::Ray { origin, direction } => epipolar_distance(u, origin, direction, camera, intr),
            };
            if d <= gate_px {
                pairs.push((d, di, ti));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut det_used = vec![false; detections.len()];
    let mut track_used = vec![false; tracks.len()];
    let mut out = Association::default();
    for (_, di, ti) in pairs {
        if !det_used[di] && !track_used[ti] {
            det_used[di] = true;
            track_used[ti] = true;
            out.assigned.push((di, ti));
        }
    }
    out.assigned.sort_unstable();
    out.unassigned = (0..detections.len()).filter(|i| !det_used[*i]).collect();
    out
}
