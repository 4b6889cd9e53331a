//! Symmetry-aware pose accuracy: ADD*, the (5 mm, 10°) rule and detection
//! rates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Pose;
use crate::scene::ObjectModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("detection rate of an empty result set is undefined")]
    EmptyResults,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// ADD* threshold as a fraction of the model diameter.
    pub add_fraction: f64,
    /// Translation tolerance, meters.
    pub translation: f64,
    /// Rotation tolerance, radians.
    pub rotation: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { add_fraction: 0.1, translation: 0.005, rotation: 10f64.to_radians() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub add_star: f64,
    /// Translation error, meters (independent of symmetry).
    pub trans_err: f64,
    /// Smallest rotation error over symmetry-adjusted ground truths, radians.
    pub rot_err: f64,
    pub add_pass: bool,
    pub five_ten_pass: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    AddStar,
    FiveTen,
}

fn mean_distance(est: &Pose, gt: &Pose, model: &ObjectModel, s: &crate::geom::Rotation) -> f64 {
    let r_gt = gt.rotation * *s;
    let total: f64 = model
        .edge_points
        .iter()
        .map(|x| ((&est.rotation * x + est.translation) - (&r_gt * x + gt.translation)).norm())
        .sum();
    total / model.edge_points.len() as f64
}

/// Plain ADD: mean model-point distance without symmetry adjustment.
pub fn add(est: &Pose, gt: &Pose, model: &ObjectModel) -> f64 {
    mean_distance(est, gt, model, &crate::geom::Rotation::identity())
}

/// ADD minimized over the model's symmetry group.
pub fn add_star(est: &Pose, gt: &Pose, model: &ObjectModel) -> f64 {
    model
        .symmetry
        .elements()
        .iter()
        .map(|s| mean_distance(est, gt, model, s))
        .fold(f64::INFINITY, f64::min)
}

pub fn pose_passes(est: &Pose, gt: &Pose, model: &ObjectModel, th: &Thresholds) -> PoseError {
    let a = add_star(est, gt, model);
    let trans_err = (est.translation - gt.translation).norm();
    let rots: Vec<f64> = model
        .symmetry
        .elements()
        .iter()
        .map(|s| est.rotation.angle_to(&(gt.rotation * *s)))
        .collect();
    let rot_err = rots.iter().cloned().fold(f64::INFINITY, f64::min);
    let five_ten_pass = trans_err < th.translation && rots.iter().any(|r| *r < th.rotation);
    PoseError { add_star: a, trans_err, rot_err, add_pass: a < th.add_fraction * model.diameter, five_ten_pass }
}

/// Percentage of passing results under `metric`.
pub fn detection_rate(results: &[PoseError], metric: Metric) -> Result<f64, MetricsError> {
    if results.is_empty() {
        return Err(MetricsError::EmptyResults);
    }
    let pass = results
        .iter()
        .filter(|e| match metric {
            Metric::AddStar => e.add_pass,
            Metric::FiveTen => e.five_ten_pass,
        })
        .count();
    Ok(100.0 * pass as f64 / results.len() as f64)
}
