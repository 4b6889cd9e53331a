//! Estimation state, next-best-view selection, viewpoint policies and the
//! active acquisition loop.
//!
//! Estimation is driven only by [`ViewMeasurements`] through
//! [`EstimationState::ingest`], so a recorded measurement stream replays to
//! the same estimates as the live run that produced it.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix2, Matrix3, Vector3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{projection_jacobian, Pose, MIN_DEPTH};
use crate::measure::{MeasureError, Simulator, ViewMeasurements};
use crate::metrics::{pose_passes, PoseError, Thresholds};
use crate::orientation::{ComponentSnapshot, MixtureUpdate, RotationMixture, DEFAULT_GATE, DEFAULT_MAX_COMPONENTS};
use crate::rng::{stream_rng, Stream};
use crate::scene::{ObjectModel, Scene, Viewpoint, ViewpointCatalog};
use crate::template::{measure_orientation, MatchOptions, TemplateSet};
use crate::translation::{estimate_translation, CenterObservation, SolverOptions, TranslationEstimate};
use crate::uncertainty::{
    covariance_from_information, edge_point_jacobians, entropy_from_information, gaussian_entropy,
    mean_point_variances, orientation_information, weighted_information, EdgeView, EntropyReport,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ActiveError {
    #[error("state not ready for prediction: {0}")]
    NotReady(String),
    #[error("no unvisited candidate views")]
    Exhausted,
    #[error("view budget must be at least 2, got {0}")]
    InvalidBudget(usize),
    #[error("catalog needs at least 2 views")]
    SmallCatalog,
    #[error("unknown view {0}")]
    UnknownView(usize),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrientationSource {
    /// Orientations drawn directly by the measurement simulator.
    #[default]
    Surrogate,
    /// Orientations from template matching on the edge maps.
    Template,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub solver: SolverOptions,
    pub gate: f64,
    pub max_components: usize,
    pub orientation_source: OrientationSource,
    pub matching: MatchOptions,
    pub g_t: f64,
    pub g_phi: f64,
    /// Stop once `h_6d` drops below this; `None` runs to the view budget.
    pub entropy_stop: Option<f64>,
    pub thresholds: Thresholds,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            solver: SolverOptions::default(),
            gate: DEFAULT_GATE,
            max_components: DEFAULT_MAX_COMPONENTS,
            orientation_source: OrientationSource::Surrogate,
            matching: MatchOptions::default(),
            g_t: 1.0,
            g_phi: 1.0,
            entropy_stop: None,
            thresholds: Thresholds::default(),
        }
    }
}

/// What one call to [`EstimationState::ingest`] did.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IngestOutcome {
    pub mixture_updates: Vec<MixtureUpdate>,
    pub errors: Vec<String>,
}

/// Everything known about one object after a sequence of views.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimationState {
    pub object_id: usize,
    pub model: ObjectModel,
    pub config: EstimatorConfig,
    pub centers: Vec<CenterObservation>,
    pub edges: Vec<EdgeView>,
    pub translation: Option<TranslationEstimate>,
    pub mixture: RotationMixture,
    pub visited: Vec<usize>,
    /// Entropy after each ingest; `None` while the pose is incomplete.
    pub history: Vec<Option<EntropyReport>>,
    pending_match: Vec<usize>,
}

impl EstimationState {
    pub fn new(object_id: usize, model: ObjectModel, config: EstimatorConfig) -> Self {
        let mixture = RotationMixture::new(config.gate, config.max_components);
        EstimationState {
            object_id,
            model,
            config,
            centers: Vec::new(),
            edges: Vec::new(),
            translation: None,
            mixture,
            visited: Vec::new(),
            history: Vec::new(),
            pending_match: Vec::new(),
        }
    }

    /// Folds in one view's measurements.
    pub fn ingest(&mut self, vm: &ViewMeasurements, view: &Viewpoint, templates: Option<&TemplateSet>) -> IngestOutcome {
        let mut out = IngestOutcome::default();
        self.visited.push(view.id);
        if let Some(c) = &vm.center {
            self.centers.push(CenterObservation::new(c, view.pose, view.intrinsics));
        } else {
            out.errors.push(format!("view {}: no center measurement", view.id));
        }
        if let Some(map) = &vm.edge_map {
            self.edges.push(EdgeView { view_id: view.id, camera: view.pose, intrinsics: view.intrinsics, map: map.clone() });
            if self.config.orientation_source == OrientationSource::Template {
                self.pending_match.push(self.edges.len() - 1);
            }
        }
        if self.centers.len() >= 2 {
            let init = self.translation.as_ref().map(|t| t.t_wo);
            match estimate_translation(&self.centers, init, &self.config.solver) {
                Ok(t) => self.translation = Some(t),
                Err(e) => out.errors.push(format!("view {}: translation: {e}", view.id)),
            }
        }
        let symmetry = self.model.symmetry.clone();
        match self.config.orientation_source {
            OrientationSource::Surrogate => {
                if let Some(m) = &vm.orientation {
                    match self.mixture.update(m, &view.pose.rotation, &symmetry) {
                        Ok(u) => out.mixture_updates.push(u),
                        Err(e) => out.errors.push(format!("view {}: orientation: {e}", view.id)),
                    }
                }
            }
            OrientationSource::Template => match (templates, &self.translation) {
                (None, _) => out.errors.push("template source selected without a template set".into()),
                (Some(set), Some(t)) => {
                    let t_wo = t.t_wo;
                    for idx in std::mem::take(&mut self.pending_match) {
                        let ev = &self.edges[idx];
                        let t_co = ev.camera.inverse_transform_point(&t_wo);
                        match measure_orientation(&ev.map, &t_co, &ev.intrinsics, set, &self.config.matching) {
                            Ok(r) => match self.mixture.update(&r.measurement, &ev.camera.rotation, &symmetry) {
                                Ok(u) => out.mixture_updates.push(u),
                                Err(e) => out.errors.push(format!("view {}: orientation: {e}", ev.view_id)),
                            },
                            Err(e) => out.errors.push(format!("view {}: template match: {e}", ev.view_id)),
                        }
                    }
                }
                (Some(_), None) => {}
            },
        }
        let report = self.entropy().ok();
        self.history.push(report);
        out
    }

    /// Current pose estimate: translation and the mixture mode.
    pub fn pose(&self) -> Option<Pose> {
        let t = self.translation.as_ref()?;
        let (r, _) = self.mixture.mode().ok()?;
        Some(Pose::new(r, t.t_wo))
    }

    /// Per-component orientation information from the collected edge maps.
    fn component_information(&self, t_wo: &Vector3<f64>) -> Vec<Matrix3<f64>> {
        self.mixture
            .components
            .iter()
            .map(|c| {
                if self.edges.is_empty() {
                    c.cov.try_inverse().unwrap_or_else(Matrix3::zeros)
                } else {
                    orientation_information(&c.r_wo, t_wo, &self.model, &self.edges)
                }
            })
            .collect()
    }

    pub fn entropy(&self) -> Result<EntropyReport, ActiveError> {
        let t = self.translation.as_ref().ok_or_else(|| ActiveError::NotReady("no translation".into()))?;
        if self.mixture.is_empty() {
            return Err(ActiveError::NotReady("no orientation".into()));
        }
        let h_t = gaussian_entropy(&t.cov).map_err(|e| ActiveError::NotReady(e.to_string()))?;
        let mut degenerate = false;
        let mut hs = Vec::new();
        for info in self.component_information(&t.t_wo) {
            let f = covariance_from_information(&info);
            degenerate |= f.degenerate;
            hs.push(gaussian_entropy(&f.cov).map_err(|e| ActiveError::NotReady(e.to_string()))?);
        }
        Ok(EntropyReport::new(h_t, self.mixture.weights(), hs, self.config.g_t, self.config.g_phi, degenerate))
    }

    /// Precomputes what candidate evaluation needs.
    pub fn predictor(&self) -> Result<Predictor<'_>, ActiveError> {
        let t = self.translation.as_ref().ok_or_else(|| ActiveError::NotReady("no translation".into()))?;
        if self.mixture.is_empty() {
            return Err(ActiveError::NotReady("no orientation".into()));
        }
        let info_t = t.cov.try_inverse().ok_or_else(|| ActiveError::NotReady("singular translation covariance".into()))?;
        let used: Vec<&CenterObservation> = self.centers.iter().filter(|c| t.inliers.contains(&c.view_id)).collect();
        let mean_cov = used.iter().map(|c| c.cov).sum::<Matrix2<f64>>() / used.len().max(1) as f64;
        let center_weight = mean_cov.try_inverse().ok_or_else(|| ActiveError::NotReady("singular center covariance".into()))?;
        let components = self
            .mixture
            .components
            .iter()
            .zip(self.component_information(&t.t_wo))
            .map(|(c, info)| {
                let variances = mean_point_variances(&c.r_wo, &t.t_wo, &self.model, &self.edges);
                (c.r_wo, info, variances)
            })
            .collect();
        Ok(Predictor { state: self, t_wo: t.t_wo, info_t, center_weight, weights: self.mixture.weights(), components })
    }
}

/// Entropy of the state after one more hypothetical view, with measurement
/// covariances held at their collected averages and mixture weights fixed.
#[derive(Clone, Debug)]
pub struct Predictor<'a> {
    state: &'a EstimationState,
    t_wo: Vector3<f64>,
    info_t: Matrix3<f64>,
    center_weight: Matrix2<f64>,
    weights: Vec<f64>,
    components: Vec<(crate::geom::Rotation, Matrix3<f64>, Vec<f64>)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub h_t: f64,
    pub h_phi_upper: f64,
    pub h_6d: f64,
}

impl Predictor<'_> {
    pub fn predict(&self, view: &Viewpoint) -> Prediction {
        let inf = Prediction { h_t: f64::INFINITY, h_phi_upper: f64::INFINITY, h_6d: f64::INFINITY };
        if view.pose.inverse_transform_point(&self.t_wo).z <= MIN_DEPTH {
            return inf;
        }
        let Ok(j) = projection_jacobian(&self.t_wo, &view.pose, &view.intrinsics) else { return inf };
        let info = self.info_t + j.transpose() * self.center_weight * j;
        let Ok(h_t) = entropy_from_information(&info) else { return inf };
        let mut h_phi_upper = 0.0;
        for (w, (r_wo, info_c, var)) in self.weights.iter().zip(&self.components) {
            let jacs = edge_point_jacobians(r_wo, &self.t_wo, &self.state.model, &view.pose, &view.intrinsics);
            let add = weighted_information(&jacs, |e| 1.0 / var[e.point]);
            let f = covariance_from_information(&(info_c + add));
            let Ok(h) = gaussian_entropy(&f.cov) else { return inf };
            if *w > 0.0 {
                h_phi_upper += w * (-w.ln() + h);
            }
        }
        let c = &self.state.config;
        Prediction { h_t, h_phi_upper, h_6d: c.g_t * h_t + c.g_phi * h_phi_upper }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NbvDecision {
    pub view_id: usize,
    /// `(view id, predicted h_6d)` for every evaluated candidate, by id.
    pub predictions: Vec<(usize, f64)>,
    pub measurements: usize,
}

/// Unvisited view minimizing the predicted `h_6d`; ties go to the lowest id.
pub fn select_nbv(state: &EstimationState, catalog: &ViewpointCatalog) -> Result<NbvDecision, ActiveError> {
    let mut candidates: Vec<&Viewpoint> = catalog.views().iter().filter(|v| !state.visited.contains(&v.id)).collect();
    if candidates.is_empty() {
        return Err(ActiveError::Exhausted);
    }
    candidates.sort_by_key(|v| v.id);
    let predictor = state.predictor()?;
    let predictions: Vec<(usize, f64)> = candidates
        .par_iter()
        .map(|v| {
            let h = predictor.predict(v).h_6d;
            (v.id, if h.is_nan() { f64::INFINITY } else { h })
        })
        .collect();
    let mut best = 0;
    for (i, p) in predictions.iter().enumerate() {
        if p.1 < predictions[best].1 {
            best = i;
        }
    }
    Ok(NbvDecision { view_id: predictions[best].0, predictions, measurements: state.visited.len() })
}

/// Unvisited view farthest from all visited camera centers (max-min
/// Euclidean distance); ties go to the lowest id.
pub fn select_max_distance(visited: &[usize], catalog: &ViewpointCatalog) -> Result<usize, ActiveError> {
    let centers: Vec<Vector3<f64>> = visited.iter().filter_map(|id| catalog.get(*id)).map(|v| v.center()).collect();
    let mut best: Option<(f64, usize)> = None;
    let mut views: Vec<&Viewpoint> = catalog.views().iter().filter(|v| !visited.contains(&v.id)).collect();
    views.sort_by_key(|v| v.id);
    for v in views {
        let d = centers.iter().map(|c| (v.center() - c).norm()).fold(f64::INFINITY, f64::min);
        if best.is_none_or(|(b, _)| d > b) {
            best = Some((d, v.id));
        }
    }
    best.map(|(_, id)| id).ok_or(ActiveError::Exhausted)
}

/// Uniformly random unvisited view from the policy stream of `step`.
pub fn select_random(visited: &[usize], catalog: &ViewpointCatalog, seed: u64, object: usize, step: usize) -> Result<usize, ActiveError> {
    let mut ids: Vec<usize> = catalog.views().iter().map(|v| v.id).filter(|id| !visited.contains(id)).collect();
    if ids.is_empty() {
        return Err(ActiveError::Exhausted);
    }
    ids.sort_unstable();
    let mut rng = stream_rng(seed, object as u64, step as u64, Stream::Policy);
    Ok(ids[rng.random_range(0..ids.len())])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Random,
    MaxDistance,
    Nbv,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::Random, Policy::MaxDistance, Policy::Nbv];

    pub fn name(&self) -> &'static str {
        match self {
            Policy::Random => "random",
            Policy::MaxDistance => "max_distance",
            Policy::Nbv => "nbv",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(Policy::Random),
            "max_distance" | "max-distance" => Ok(Policy::MaxDistance),
            "nbv" => Ok(Policy::Nbv),
            _ => Err(format!("unknown policy '{s}' (expected random, max_distance or nbv)")),
        }
    }
}

/// Estimation result after a given number of views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub views: usize,
    /// View added last.
    pub view_id: usize,
    pub t_wo: Option<[f64; 3]>,
    /// Mixture mode as a rotation vector.
    pub r_wo: Option<[f64; 3]>,
    pub entropy: Option<EntropyReport>,
    pub error: Option<PoseError>,
    pub add_pass: bool,
    pub five_ten_pass: bool,
    /// Predicted `h_6d` of this view when NBV chose it.
    pub predicted_h6d: Option<f64>,
    pub mixture: Vec<ComponentSnapshot>,
    pub messages: Vec<String>,
}

impl StepRecord {
    fn from_state(state: &EstimationState, view_id: usize, gt: &Pose, messages: Vec<String>) -> Self {
        let pose = state.pose();
        let error = pose.as_ref().map(|p| pose_passes(p, gt, &state.model, &state.config.thresholds));
        StepRecord {
            views: state.visited.len(),
            view_id,
            t_wo: state.translation.as_ref().map(|t| t.t_wo.into()),
            r_wo: pose.map(|p| p.rotation.log().into()),
            entropy: state.history.last().cloned().flatten(),
            error,
            add_pass: error.is_some_and(|e| e.add_pass),
            five_ten_pass: error.is_some_and(|e| e.five_ten_pass),
            predicted_h6d: None,
            mixture: state.mixture.snapshot(),
            messages,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub seed: u64,
    pub object_id: usize,
    pub policy: Policy,
    pub steps: Vec<StepRecord>,
    /// Every measurement in acquisition order, for replay.
    pub measurements: Vec<ViewMeasurements>,
}

impl Trajectory {
    pub fn has_failures(&self) -> bool {
        self.steps.iter().any(|s| s.t_wo.is_none() || s.r_wo.is_none())
    }
}

/// Runs bootstrap (catalog ids in order, first two) plus policy-driven views
/// until the budget or the entropy stop is reached. Estimator failures are
/// recorded in the step messages.
pub fn run_active_loop(
    scene: &Scene,
    object_id: usize,
    policy: Policy,
    max_views: usize,
    config: &EstimatorConfig,
    profile: &crate::measure::NoiseProfile,
    seed: u64,
    templates: Option<&TemplateSet>,
) -> Result<Trajectory, ActiveError> {
    if max_views < 2 {
        return Err(ActiveError::InvalidBudget(max_views));
    }
    let catalog = &scene.catalog;
    if catalog.len() < 2 {
        return Err(ActiveError::SmallCatalog);
    }
    let object = scene.object(object_id).ok_or(MeasureError::UnknownObject(object_id))?;
    let model = scene.model_of(object).clone();
    let gt = object.pose;
    let sim = Simulator::new(scene, profile.clone(), seed)?;
    let with_orientation = config.orientation_source == OrientationSource::Surrogate;
    let mut state = EstimationState::new(object_id, model, config.clone());
    let mut measurements = Vec::new();
    let mut steps = Vec::new();

    let mut ids: Vec<usize> = catalog.views().iter().map(|v| v.id).collect();
    ids.sort_unstable();
    let mut messages = Vec::new();
    for &id in &ids[..2] {
        let vm = sim.acquire(object_id, id, with_orientation);
        let out = state.ingest(&vm, catalog.get(id).expect("id from catalog"), templates);
        messages.extend(out.errors);
        measurements.push(vm);
    }
    steps.push(StepRecord::from_state(&state, ids[1], &gt, messages));

    while state.visited.len() < max_views.min(catalog.len()) {
        if let (Some(th), Some(Some(h))) = (config.entropy_stop, state.history.last()) {
            if h.h_6d < th {
                break;
            }
        }
        let mut messages = Vec::new();
        let mut predicted = None;
        let next = match policy {
            Policy::Random => select_random(&state.visited, catalog, seed, object_id, state.visited.len())?,
            Policy::MaxDistance => select_max_distance(&state.visited, catalog)?,
            Policy::Nbv => match select_nbv(&state, catalog) {
                Ok(d) => {
                    predicted = d.predictions.iter().find(|p| p.0 == d.view_id).map(|p| p.1);
                    d.view_id
                }
                Err(ActiveError::NotReady(why)) => {
                    messages.push(format!("nbv unavailable ({why}); fell back to max_distance"));
                    select_max_distance(&state.visited, catalog)?
                }
                Err(e) => return Err(e),
            },
        };
        let vm = sim.acquire(object_id, next, with_orientation);
        let out = state.ingest(&vm, catalog.get(next).ok_or(ActiveError::UnknownView(next))?, templates);
        messages.extend(out.errors);
        measurements.push(vm);
        let mut rec = StepRecord::from_state(&state, next, &gt, messages);
        rec.predicted_h6d = predicted;
        steps.push(rec);
    }
    Ok(Trajectory { seed, object_id, policy, steps, measurements })
}

/// Estimates `(t_wo, mode rotation)` after each step of a recorded stream,
/// starting once the first two views are in.
pub type EstimateSnapshot = (Option<[f64; 3]>, Option<[f64; 3]>);

pub fn replay(
    catalog: &ViewpointCatalog,
    model: &ObjectModel,
    object_id: usize,
    measurements: &[ViewMeasurements],
    config: &EstimatorConfig,
    templates: Option<&TemplateSet>,
) -> Result<Vec<EstimateSnapshot>, ActiveError> {
    let mut state = EstimationState::new(object_id, model.clone(), config.clone());
    let mut out = Vec::new();
    for (i, vm) in measurements.iter().enumerate() {
        let view = catalog.get(vm.view_id).ok_or(ActiveError::UnknownView(vm.view_id))?;
        state.ingest(vm, view, templates);
        if i >= 1 {
            out.push((state.translation.as_ref().map(|t| t.t_wo.into()), state.pose().map(|p| p.rotation.log().into())));
        }
    }
    Ok(out)
}
