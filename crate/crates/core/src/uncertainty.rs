//! Pose uncertainty: Gaussian differential entropy, the mixture entropy upper
//! bound, and orientation covariance from edge-point Fisher information.

use std::f64::consts::{E, PI};

use nalgebra::{Cholesky, Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{hat, pinhole_jacobian, project, CameraIntrinsics, Pose, Rotation};
use crate::measure::EdgeMap;
use crate::scene::ObjectModel;

/// Pooled intensities below this are clamped up when forming weights.
pub const MIN_EDGE_INTENSITY: f64 = 0.05;
/// Fisher matrices worse conditioned than this are regularized.
pub const MAX_FISHER_CONDITION: f64 = 1e12;
pub const FISHER_REGULARIZER: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UncertaintyError {
    #[error("covariance is not symmetric positive definite")]
    InvalidCovariance,
    #[error("mixture weights do not sum to one (sum {0})")]
    InvalidWeights(f64),
    #[error("no edge point projects into any view")]
    NoConstraints,
}

/// `½·ln((2πe)³·det Σ)` for a 3×3 SPD covariance.
pub fn gaussian_entropy(cov: &Matrix3<f64>) -> Result<f64, UncertaintyError> {
    let sym = (cov - cov.transpose()).abs().max();
    if sym > 1e-9 * cov.abs().max().max(f64::MIN_POSITIVE) {
        return Err(UncertaintyError::InvalidCovariance);
    }
    let chol = Cholesky::new(*cov).ok_or(UncertaintyError::InvalidCovariance)?;
    // ln det = 2·Σ ln L_ii, stable for tiny determinants.
    let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    Ok(0.5 * (3.0 * (2.0 * PI * E).ln() + log_det))
}

/// Entropy from an information matrix, `h = ½·ln((2πe)³) − ½·ln det H`.
pub fn entropy_from_information(info: &Matrix3<f64>) -> Result<f64, UncertaintyError> {
    let chol = Cholesky::new(*info).ok_or(UncertaintyError::InvalidCovariance)?;
    let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    Ok(0.5 * (3.0 * (2.0 * PI * E).ln() - log_det))
}

/// `Σ w_i·[−ln w_i + h(Σ_i)]`; zero-weight components contribute nothing.
pub fn mixture_entropy_upper(weights: &[f64], covs: &[Matrix3<f64>]) -> Result<f64, UncertaintyError> {
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || weights.iter().any(|w| *w < 0.0) {
        return Err(UncertaintyError::InvalidWeights(sum));
    }
    let mut h = 0.0;
    for (w, c) in weights.iter().zip(covs) {
        if *w > 0.0 {
            h += w * (-w.ln() + gaussian_entropy(c)?);
        }
    }
    Ok(h)
}

/// One edge point's projection and its derivative with respect to a left
/// perturbation of `R_wo`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeJacobian {
    pub point: usize,
    pub pixel: Vector2<f64>,
    pub jacobian: Matrix2x3<f64>,
}

/// `∂m/∂φ = ∂π/∂p_c · R_wc⁻¹ · (−(R_wo·x)^)` for every model point that
/// lands inside the image.
pub fn edge_point_jacobians(
    r_wo: &Rotation,
    t_wo: &Vector3<f64>,
    model: &ObjectModel,
    camera: &Pose,
    intr: &CameraIntrinsics,
) -> Vec<EdgeJacobian> {
    let r_cw = camera.rotation.inverse();
    let mut out = Vec::with_capacity(model.edge_points.len());
    for (k, x) in model.edge_points.iter().enumerate() {
        let rx = r_wo * x;
        let p_c = r_cw * (rx + t_wo - camera.translation);
        let (Ok(m), Ok(jp)) = (project(&p_c, intr), pinhole_jacobian(&p_c, intr)) else { continue };
        if !intr.contains(&m) {
            continue;
        }
        let jacobian = jp * r_cw.matrix() * (-hat(&rx));
        out.push(EdgeJacobian { point: k, pixel: m, jacobian });
    }
    out
}

/// Pooled edge intensity at the rounded pixel, floored.
pub fn edge_weight(map: &EdgeMap, pixel: &Vector2<f64>) -> f64 {
    map.pooled(pixel.x.round() as i64, pixel.y.round() as i64).max(MIN_EDGE_INTENSITY)
}

/// `Σ_k J_kᵀ·w_k·J_k` with per-point weights (inverse pixel variances).
pub fn weighted_information(jacs: &[EdgeJacobian], weight: impl Fn(&EdgeJacobian) -> f64) -> Matrix3<f64> {
    let mut h = Matrix3::zeros();
    for j in jacs {
        h += j.jacobian.transpose() * j.jacobian * weight(j);
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherCovariance {
    pub cov: Matrix3<f64>,
    /// Set when the information matrix had to be regularized.
    pub degenerate: bool,
}

/// Inverts an information matrix, regularizing it when badly conditioned.
pub fn covariance_from_information(info: &Matrix3<f64>) -> FisherCovariance {
    let sym = 0.5 * (info + info.transpose());
    let cond = crate::translation::condition_number(&sym);
    let (h, degenerate) =
        if cond > MAX_FISHER_CONDITION { (sym + Matrix3::identity() * FISHER_REGULARIZER, true) } else { (sym, false) };
    let cov = h
        .try_inverse()
        .unwrap_or_else(|| (h + Matrix3::identity() * FISHER_REGULARIZER).try_inverse().expect("regularized"));
    FisherCovariance { cov: 0.5 * (cov + cov.transpose()), degenerate: degenerate || cond.is_infinite() }
}

/// A collected view with its edge map, for Fisher information.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeView {
    pub view_id: usize,
    pub camera: Pose,
    pub intrinsics: CameraIntrinsics,
    pub map: EdgeMap,
}

/// Orientation information at `(r_wo, t_wo)` from every collected edge map.
pub fn orientation_information(
    r_wo: &Rotation,
    t_wo: &Vector3<f64>,
    model: &ObjectModel,
    views: &[EdgeView],
) -> Matrix3<f64> {
    let mut h = Matrix3::zeros();
    for v in views {
        let jacs = edge_point_jacobians(r_wo, t_wo, model, &v.camera, &v.intrinsics);
        h += weighted_information(&jacs, |j| edge_weight(&v.map, &j.pixel));
    }
    h
}

pub fn orientation_component_covariance(
    r_wo: &Rotation,
    t_wo: &Vector3<f64>,
    model: &ObjectModel,
    views: &[EdgeView],
) -> Result<FisherCovariance, UncertaintyError> {
    if views.is_empty() {
        return Err(UncertaintyError::NoConstraints);
    }
    Ok(covariance_from_information(&orientation_information(r_wo, t_wo, model, views)))
}

/// Average pixel variance `1/w` of each model point across collected views,
/// evaluated at `(r_wo, t_wo)`. Points never seen get variance 1/floor.
pub fn mean_point_variances(r_wo: &Rotation, t_wo: &Vector3<f64>, model: &ObjectModel, views: &[EdgeView]) -> Vec<f64> {
    let n = model.edge_points.len();
    let mut sum = vec![0.0; n];
    let mut count = vec![0usize; n];
    for v in views {
        for j in edge_point_jacobians(r_wo, t_wo, model, &v.camera, &v.intrinsics) {
            sum[j.point] += 1.0 / edge_weight(&v.map, &j.pixel);
            count[j.point] += 1;
        }
    }
    sum.iter()
        .zip(count)
        .map(|(s, c)| if c == 0 { 1.0 / MIN_EDGE_INTENSITY } else { s / c as f64 })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub h_t: f64,
    pub h_phi_upper: f64,
    pub h_6d: f64,
    pub component_entropies: Vec<f64>,
    pub weights: Vec<f64>,
    pub degenerate: bool,
}

impl EntropyReport {
    pub fn new(h_t: f64, weights: Vec<f64>, component_entropies: Vec<f64>, g_t: f64, g_phi: f64, degenerate: bool) -> Self {
        let h_phi_upper = weights
            .iter()
            .zip(&component_entropies)
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, h)| w * (-w.ln() + h))
            .sum();
        EntropyReport { h_t, h_phi_upper, h_6d: g_t * h_t + g_phi * h_phi_upper, component_entropies, weights, degenerate }
    }
}
