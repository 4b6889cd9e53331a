//! Multi-view orientation estimation with a max-mixture over SO(3).
//!
//! Each measurement is first moved to the symmetry-equivalent rotation
//! closest to a component mean, then assigned to the nearest component within
//! the gate or used to seed a new one. Component means are refined by
//! confidence-weighted Gauss-Newton with a left update.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{right_jacobian_inverse, RotVec, Rotation};
use crate::measure::OrientationMeasurement;
use crate::scene::SymmetryGroup;

pub const DEFAULT_GATE: f64 = PI / 6.0;
pub const DEFAULT_MAX_COMPONENTS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrientationError {
    #[error("component has no measurements")]
    NoMeasurements,
    #[error("mixture is empty")]
    NoEstimate,
    #[error("non-positive total confidence")]
    InvalidConfidence,
}

/// Where `R_wo` puts the object as seen from `R_wc`: `R_wc⁻¹·R_wo`.
pub fn predicted_r_co(r_wo: &Rotation, r_wc: &Rotation) -> Rotation {
    r_wc.inverse() * *r_wo
}

/// Symmetry-equivalent measurement closest to the predicted camera-frame
/// rotation. Returns the group index, the resolved rotation and its angular
/// distance to the prediction; ties go to the lowest index.
pub fn resolve_symmetry(
    r_co: &Rotation,
    symmetry: &SymmetryGroup,
    r_wo: &Rotation,
    r_wc: &Rotation,
) -> (usize, Rotation, f64) {
    let target = predicted_r_co(r_wo, r_wc);
    let mut best = (0, *r_co, f64::INFINITY);
    for (k, s) in symmetry.elements().iter().enumerate() {
        let cand = *r_co * *s;
        let d = cand.angle_to(&target);
        if d < best.2 {
            best = (k, cand, d);
        }
    }
    best
}

/// One accepted measurement, fixed at acceptance time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureMember {
    pub view_id: usize,
    /// Camera orientation `R_wc` of the view.
    pub r_wc: Rotation,
    /// Symmetry-resolved measurement `R̄_co`.
    pub r_co: Rotation,
    /// Scalar weight; the information block is `confidence·I`.
    pub confidence: f64,
    /// Set when a later refinement moved the mean more than the gate away
    /// from this member's implied world rotation.
    pub historical: bool,
}

impl MixtureMember {
    /// World rotation implied by this member alone, `R_wc·R̄_co`.
    pub fn implied_r_wo(&self) -> Rotation {
        self.r_wc * self.r_co
    }
}

/// Residual `log(R̄_co⁻¹·R_wc⁻¹·R_wo)`.
pub fn orientation_residual(r_wo: &Rotation, member: &MixtureMember) -> RotVec {
    (member.r_co.inverse() * member.r_wc.inverse() * *r_wo).log()
}

/// Exact derivative of [`orientation_residual`] with respect to a left
/// perturbation `R_wo ← exp(δ)·R_wo`: `J_r⁻¹(r)·R_wo⁻¹`.
pub fn residual_jacobian(r_wo: &Rotation, member: &MixtureMember) -> Matrix3<f64> {
    let r = orientation_residual(r_wo, member);
    right_jacobian_inverse(&r) * r_wo.inverse().matrix()
}

/// Jacobian used by the solver: the right Jacobian is approximated by the
/// identity, leaving `R_wo⁻¹`.
pub fn solver_jacobian(r_wo: &Rotation) -> Matrix3<f64> {
    *r_wo.inverse().matrix()
}

/// Weighted cost `Σ c_k·|r_k|²`.
pub fn orientation_cost(r_wo: &Rotation, members: &[MixtureMember]) -> f64 {
    members.iter().map(|m| m.confidence * orientation_residual(r_wo, m).norm_squared()).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineOptions {
    pub max_iterations: usize,
    pub step_tolerance: f64,
}

impl Default for RefineOptions {
    fn default() -> Self {
        RefineOptions { max_iterations: 50, step_tolerance: 1e-10 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Refinement {
    pub r_wo: Rotation,
    pub cov: Matrix3<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Norm of the last computed step.
    pub last_step: f64,
}

/// Confidence-weighted Gauss-Newton on SO(3) starting at `init`.
/// Non-convergence is reported through [`Refinement::converged`] with the
/// last iterate.
pub fn refine_rotation(
    members: &[MixtureMember],
    init: &Rotation,
    opts: &RefineOptions,
) -> Result<Refinement, OrientationError> {
    if members.is_empty() {
        return Err(OrientationError::NoMeasurements);
    }
    let total: f64 = members.iter().map(|m| m.confidence).sum();
    if !(total > 0.0) {
        return Err(OrientationError::InvalidConfidence);
    }
    let mut r_wo = *init;
    let mut iterations = 0;
    let mut converged = false;
    let mut last_step = f64::INFINITY;
    while iterations < opts.max_iterations {
        iterations += 1;
        let j = solver_jacobian(&r_wo);
        let mut h = Matrix3::zeros();
        let mut g = Vector3::zeros();
        for m in members {
            let r = orientation_residual(&r_wo, m);
            h += j.transpose() * j * m.confidence;
            g += j.transpose() * r * m.confidence;
        }
        let delta = -(h.try_inverse().ok_or(OrientationError::InvalidConfidence)? * g);
        last_step = delta.norm();
        r_wo = (Rotation::exp(&delta) * r_wo).renormalized();
        if last_step < opts.step_tolerance {
            converged = true;
            break;
        }
    }
    let j = solver_jacobian(&r_wo);
    let h = j.transpose() * j * total;
    let cov = h.try_inverse().ok_or(OrientationError::InvalidConfidence)?;
    Ok(Refinement { r_wo, cov: 0.5 * (cov + cov.transpose()), iterations, converged, last_step })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub r_wo: Rotation,
    /// Tangent-space covariance from the measurement-weighted solve, rad².
    pub cov: Matrix3<f64>,
    /// Sum of member confidences.
    pub confidence: f64,
    pub members: Vec<MixtureMember>,
    /// Creation order within the mixture; lower is older.
    pub created: u64,
    pub converged: bool,
}

impl MixtureComponent {
    fn seeded(member: MixtureMember, created: u64) -> Self {
        let r_wo = member.implied_r_wo();
        let c = member.confidence;
        MixtureComponent {
            r_wo,
            cov: Matrix3::identity() / c,
            confidence: c,
            members: vec![member],
            created,
            converged: true,
        }
    }

    pub fn refine(&mut self, opts: &RefineOptions, gate: f64) -> Result<(), OrientationError> {
        let r = refine_rotation(&self.members, &self.r_wo, opts)?;
        self.r_wo = r.r_wo;
        self.cov = r.cov;
        self.converged = r.converged;
        for m in &mut self.members {
            if m.implied_r_wo().angle_to(&self.r_wo) > gate {
                m.historical = true;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum MixtureUpdate {
    Accepted { component: usize, angle: f64 },
    Created { component: usize, evicted: Option<u64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationMixture {
    pub components: Vec<MixtureComponent>,
    pub gate: f64,
    pub max_components: usize,
    pub refine: RefineOptions,
    next_created: u64,
}

impl Default for RotationMixture {
    fn default() -> Self {
        RotationMixture::new(DEFAULT_GATE, DEFAULT_MAX_COMPONENTS)
    }
}

impl RotationMixture {
    pub fn new(gate: f64, max_components: usize) -> Self {
        RotationMixture {
            components: Vec::new(),
            gate,
            max_components: max_components.max(1),
            refine: RefineOptions::default(),
            next_created: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn total_confidence(&self) -> f64 {
        self.components.iter().map(|c| c.confidence).sum()
    }

    /// `w_i = c_i / Σc`.
    pub fn weights(&self) -> Vec<f64> {
        let total = self.total_confidence();
        self.components.iter().map(|c| c.confidence / total).collect()
    }

    /// Index of the heaviest component; ties go to the earliest created.
    pub fn mode_index(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, c) in self.components.iter().enumerate() {
            best = match best {
                None => Some(i),
                Some(b) => {
                    let cb = &self.components[b];
                    if c.confidence > cb.confidence || (c.confidence == cb.confidence && c.created < cb.created) {
                        Some(i)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        best
    }

    pub fn mode(&self) -> Result<(Rotation, f64), OrientationError> {
        let i = self.mode_index().ok_or(OrientationError::NoEstimate)?;
        Ok((self.components[i].r_wo, self.components[i].confidence / self.total_confidence()))
    }

    /// Adds one measurement taken from a camera with orientation `r_wc`.
    pub fn update(
        &mut self,
        meas: &OrientationMeasurement,
        r_wc: &Rotation,
        symmetry: &SymmetryGroup,
    ) -> Result<MixtureUpdate, OrientationError> {
        if !(meas.confidence > 0.0) {
            return Err(OrientationError::InvalidConfidence);
        }
        let mut best: Option<(usize, Rotation, f64)> = None;
        for (i, c) in self.components.iter().enumerate() {
            let (_, resolved, angle) = resolve_symmetry(&meas.rotation, symmetry, &c.r_wo, r_wc);
            if best.as_ref().is_none_or(|b| angle < b.2) {
                best = Some((i, resolved, angle));
            }
        }
        if let Some((i, resolved, angle)) = best {
            if angle <= self.gate {
                let comp = &mut self.components[i];
                comp.members.push(MixtureMember {
                    view_id: meas.view_id,
                    r_wc: *r_wc,
                    r_co: resolved,
                    confidence: meas.confidence,
                    historical: false,
                });
                comp.confidence += meas.confidence;
                comp.refine(&self.refine, self.gate)?;
                return Ok(MixtureUpdate::Accepted { component: i, angle });
            }
        }
        let member = MixtureMember {
            view_id: meas.view_id,
            r_wc: *r_wc,
            r_co: meas.rotation,
            confidence: meas.confidence,
            historical: false,
        };
        let created = self.next_created;
        self.next_created += 1;
        self.components.push(MixtureComponent::seeded(member, created));
        let mut evicted = None;
        if self.components.len() > self.max_components {
            // Lowest weight goes; ties evict the newest.
            let mut worst = 0;
            for (i, c) in self.components.iter().enumerate() {
                let w = &self.components[worst];
                if c.confidence < w.confidence || (c.confidence == w.confidence && c.created > w.created) {
                    worst = i;
                }
            }
            evicted = Some(self.components.remove(worst).created);
        }
        let component = self.components.iter().position(|c| c.created == created);
        match component {
            Some(component) => Ok(MixtureUpdate::Created { component, evicted }),
            None => Ok(MixtureUpdate::Created { component: usize::MAX, evicted }),
        }
    }

    /// Compact per-component view for logging.
    pub fn snapshot(&self) -> Vec<ComponentSnapshot> {
        let w = self.weights();
        self.components
            .iter()
            .zip(w)
            .map(|(c, weight)| ComponentSnapshot {
                created: c.created,
                weight,
                confidence: c.confidence,
                rotvec: c.r_wo.log().into(),
                members: c.members.len(),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentSnapshot {
    pub created: u64,
    pub weight: f64,
    pub confidence: f64,
    /// Mean as a rotation vector `log(R_wo)`.
    pub rotvec: [f64; 3],
    pub members: usize,
}
