//! Object models, symmetry groups, viewpoint catalogs and ground-truth scene
//! generation.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{project, CameraIntrinsics, Pose, Rotation};
use crate::rng::{stream_rng, Stream};

/// Closure tolerance for symmetry groups, radians.
pub const SYMMETRY_TOLERANCE: f64 = 1e-6;

/// Attempts allowed when sampling visible object poses.
pub const MAX_SCENE_ATTEMPTS: usize = 10_000;

/// Default side of the canonical orientation RoI, pixels.
pub const DEFAULT_CANONICAL_ROI: usize = 96;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("invalid symmetry group: {0}")]
    InvalidSymmetry(String),
    #[error("invalid object model: {0}")]
    InvalidModel(String),
    #[error("invalid catalog: {0}")]
    InvalidCatalog(String),
    #[error("could not place {n_objects} visible objects within {attempts} attempts")]
    InfeasibleScene { n_objects: usize, attempts: usize },
    #[error("point cloud parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SymmetryDescriptor {
    Cyclic { axis: [f64; 3], order: u32 },
    Explicit,
}

/// Finite set of rotations leaving the object's appearance unchanged.
/// Element 0 is always the identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymmetryGroup {
    elements: Vec<Rotation>,
    descriptor: SymmetryDescriptor,
}

impl SymmetryGroup {
    pub fn trivial() -> Self {
        SymmetryGroup {
            elements: vec![Rotation::identity()],
            descriptor: SymmetryDescriptor::Cyclic { axis: [0.0, 0.0, 1.0], order: 1 },
        }
    }

    /// The four-element group of half turns about the frame axes, which is the
    /// rotational symmetry of a box with distinct side lengths.
    pub fn box_symmetry() -> Self {
        SymmetryGroup {
            elements: vec![
                Rotation::identity(),
                Rotation::rot_x(PI),
                Rotation::rot_y(PI),
                Rotation::rot_z(PI),
            ],
            descriptor: SymmetryDescriptor::Explicit,
        }
    }

    /// Builds a group from explicit elements, checking identity and closure.
    pub fn from_elements(mut elements: Vec<Rotation>) -> Result<Self, SceneError> {
        let id = elements
            .iter()
            .position(|r| r.angle() < SYMMETRY_TOLERANCE)
            .ok_or_else(|| SceneError::InvalidSymmetry("identity missing".into()))?;
        elements.swap(0, id);
        let group = SymmetryGroup { elements, descriptor: SymmetryDescriptor::Explicit };
        if !group.is_closed(SYMMETRY_TOLERANCE) {
            return Err(SceneError::InvalidSymmetry("not closed under composition".into()));
        }
        Ok(group)
    }

    pub fn elements(&self) -> &[Rotation] {
        &self.elements
    }

    pub fn order(&self) -> usize {
        self.elements.len()
    }

    pub fn descriptor(&self) -> &SymmetryDescriptor {
        &self.descriptor
    }

    /// Every pairwise product matches some element within `tol` radians.
    pub fn is_closed(&self, tol: f64) -> bool {
        self.elements.iter().all(|a| {
            self.elements
                .iter()
                .all(|b| self.elements.iter().any(|c| (*a * *b).angle_to(c) <= tol))
        })
    }
}

/// Rotations by `2πk/order` about `axis`, `k = 0..order`.
pub fn make_cyclic_symmetry(axis: &Vector3<f64>, order: u32) -> Result<SymmetryGroup, SceneError> {
    if order == 0 {
        return Err(SceneError::InvalidSymmetry("order must be at least 1".into()));
    }
    let norm = axis.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(SceneError::InvalidSymmetry("axis must be a non-zero vector".into()));
    }
    let axis = axis / norm;
    let elements = (0..order)
        .map(|k| Rotation::about_axis(&axis, 2.0 * PI * k as f64 / order as f64))
        .collect();
    Ok(SymmetryGroup {
        elements,
        descriptor: SymmetryDescriptor::Cyclic { axis: [axis.x, axis.y, axis.z], order },
    })
}

/// Rigid object described by its 3D edge points (object frame, meters).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectModel {
    pub name: String,
    pub edge_points: Vec<Vector3<f64>>,
    pub diameter: f64,
    pub symmetry: SymmetryGroup,
    /// Canonical template distance `z_r`, meters.
    pub canonical_distance: f64,
    /// Canonical RoI side `l_r`, pixels.
    pub canonical_roi: usize,
}

impl ObjectModel {
    pub const MIN_POINTS: usize = 8;

    pub fn new(
        name: impl Into<String>,
        edge_points: Vec<Vector3<f64>>,
        symmetry: SymmetryGroup,
        canonical_distance: f64,
        canonical_roi: usize,
    ) -> Result<Self, SceneError> {
        if edge_points.len() < Self::MIN_POINTS {
            return Err(SceneError::InvalidModel(format!(
                "{} edge points, need at least {}",
                edge_points.len(),
                Self::MIN_POINTS
            )));
        }
        if edge_points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(SceneError::InvalidModel("non-finite edge point".into()));
        }
        if !(canonical_distance > 0.0) || canonical_roi == 0 {
            return Err(SceneError::InvalidModel("canonical distance and RoI must be positive".into()));
        }
        let diameter = max_pairwise_distance(&edge_points);
        if !(diameter > 0.0) {
            return Err(SceneError::InvalidModel("zero diameter".into()));
        }
        Ok(ObjectModel {
            name: name.into(),
            edge_points,
            diameter,
            symmetry,
            canonical_distance,
            canonical_roi,
        })
    }

    /// Parses a plain-text point cloud: one `x y z` triple per line, meters.
    /// Blank lines and lines starting with `#` are skipped.
    pub fn from_xyz_text(
        name: impl Into<String>,
        text: &str,
        symmetry: SymmetryGroup,
        canonical_distance: f64,
        canonical_roi: usize,
    ) -> Result<Self, SceneError> {
        let mut points = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse::<f64>).collect();
            let vals = vals.map_err(|e| SceneError::Parse { line: i + 1, message: e.to_string() })?;
            if vals.len() != 3 {
                return Err(SceneError::Parse {
                    line: i + 1,
                    message: format!("expected 3 values, found {}", vals.len()),
                });
            }
            points.push(Vector3::new(vals[0], vals[1], vals[2]));
        }
        Self::new(name, points, symmetry, canonical_distance, canonical_roi)
    }

    /// FNV-1a over the edge point bits and canonical parameters; used as a
    /// cache key for template sets.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bits: u64| {
            for b in bits.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for p in &self.edge_points {
            feed(p.x.to_bits());
            feed(p.y.to_bits());
            feed(p.z.to_bits());
        }
        for s in self.symmetry.elements() {
            for v in s.matrix().iter() {
                feed(v.to_bits());
            }
        }
        h
    }
}

fn max_pairwise_distance(points: &[Vector3<f64>]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            best = best.max((a - b).norm_squared());
        }
    }
    best.sqrt()
}

/// Procedural stand-ins for CAD models. Dimensions in meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectKind {
    /// Rectangular box; symmetric under half turns about each axis.
    Box { x: f64, y: f64, z: f64 },
    /// Two-step turned part about the z axis with `order` radial spokes on
    /// its top face, giving a cyclic symmetry of that order.
    Lathe { radius_bottom: f64, radius_top: f64, height: f64, order: u32 },
    /// L-shaped bracket with an off-center hole; no rotational symmetry.
    AsymmetricBracket { width: f64, depth: f64, height: f64, thickness: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticParams {
    /// Edge point spacing, meters.
    pub spacing: f64,
    pub canonical_distance: f64,
    pub canonical_roi: usize,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams { spacing: 0.002, canonical_distance: 0.6, canonical_roi: DEFAULT_CANONICAL_ROI }
    }
}

fn push_segment(out: &mut Vec<Vector3<f64>>, a: Vector3<f64>, b: Vector3<f64>, spacing: f64) {
    let n = ((b - a).norm() / spacing - 1e-9).ceil().max(1.0) as usize;
    for i in 0..=n {
        out.push(a + (b - a) * (i as f64 / n as f64));
    }
}

fn box_edges(out: &mut Vec<Vector3<f64>>, lo: Vector3<f64>, hi: Vector3<f64>, spacing: f64) {
    let corner = |i: usize| {
        Vector3::new(
            if i & 1 == 0 { lo.x } else { hi.x },
            if i & 2 == 0 { lo.y } else { hi.y },
            if i & 4 == 0 { lo.z } else { hi.z },
        )
    };
    for i in 0..8 {
        for bit in [1usize, 2, 4] {
            if i & bit == 0 {
                push_segment(out, corner(i), corner(i | bit), spacing);
            }
        }
    }
}

fn push_ring(out: &mut Vec<Vector3<f64>>, radius: f64, z: f64, count: usize) {
    for j in 0..count {
        let a = 2.0 * PI * j as f64 / count as f64;
        out.push(Vector3::new(radius * a.cos(), radius * a.sin(), z));
    }
}

/// Removes points closer than 1e-9 m to an earlier point, keeping order.
fn dedup_points(points: Vec<Vector3<f64>>) -> Vec<Vector3<f64>> {
    let key = |p: &Vector3<f64>| {
        (
            (p.x * 1e9).round() as i64,
            (p.y * 1e9).round() as i64,
            (p.z * 1e9).round() as i64,
        )
    };
    let mut seen = std::collections::HashSet::new();
    points.into_iter().filter(|p| seen.insert(key(p))).collect()
}

pub fn synthetic_object(kind: &ObjectKind, params: &SyntheticParams) -> Result<ObjectModel, SceneError> {
    if !(params.spacing > 0.0) {
        return Err(SceneError::InvalidModel("spacing must be positive".into()));
    }
    let positive = |vals: &[f64]| vals.iter().all(|v| *v > 0.0 && v.is_finite());
    let s = params.spacing;
    let (name, points, symmetry) = match *kind {
        ObjectKind::Box { x, y, z } => {
            if !positive(&[x, y, z]) {
                return Err(SceneError::InvalidModel("box dimensions must be positive".into()));
            }
            let half = Vector3::new(x, y, z) * 0.5;
            let mut pts = Vec::new();
            box_edges(&mut pts, -half, half, s);
            ("box", pts, SymmetryGroup::box_symmetry())
        }
        ObjectKind::Lathe { radius_bottom, radius_top, height, order } => {
            if !positive(&[radius_bottom, radius_top, height]) || order == 0 {
                return Err(SceneError::InvalidModel("lathe dimensions and order must be positive".into()));
            }
            if (radius_bottom - radius_top).abs() < 1e-9 {
                return Err(SceneError::InvalidModel(
                    "lathe radii must differ, otherwise the part is flip-symmetric".into(),
                ));
            }
            let order_usize = order as usize;
            let ring_count = |r: f64| {
                let per_sector = ((2.0 * PI * r / s) / order as f64).ceil().max(1.0) as usize;
                per_sector * order_usize
            };
            let h = height * 0.5;
            let mut pts = Vec::new();
            push_ring(&mut pts, radius_bottom, -h, ring_count(radius_bottom));
            push_ring(&mut pts, radius_bottom, 0.0, ring_count(radius_bottom));
            push_ring(&mut pts, radius_top, 0.0, ring_count(radius_top));
            push_ring(&mut pts, radius_top, h, ring_count(radius_top));
            for k in 0..order_usize {
                let a = 2.0 * PI * k as f64 / order as f64;
                let dir = Vector3::new(a.cos(), a.sin(), 0.0);
                push_segment(&mut pts, Vector3::new(0.0, 0.0, h), dir * radius_top + Vector3::new(0.0, 0.0, h), s);
            }
            let sym = make_cyclic_symmetry(&Vector3::z(), order)?;
            ("lathe", pts, sym)
        }
        ObjectKind::AsymmetricBracket { width, depth, height, thickness } => {
            if !positive(&[width, depth, height, thickness]) || thickness >= width.min(height) {
                return Err(SceneError::InvalidModel(
                    "bracket dimensions must be positive with thickness below width and height".into(),
                ));
            }
            let mut pts = Vec::new();
            let (w, d) = (width * 0.5, depth * 0.5);
            box_edges(&mut pts, Vector3::new(-w, -d, 0.0), Vector3::new(w, d, thickness), s);
            box_edges(&mut pts, Vector3::new(-w, -d, 0.0), Vector3::new(-w + thickness, d, height), s);
            let hole_r = depth.min(height) / 8.0;
            let center = Vector3::new(-w, d * 0.5, height * 0.6);
            let count = ((2.0 * PI * hole_r / s).ceil() as usize).max(8);
            for j in 0..count {
                let a = 2.0 * PI * j as f64 / count as f64;
                pts.push(center + Vector3::new(0.0, hole_r * a.cos(), hole_r * a.sin()));
            }
            let lo = pts.iter().fold(Vector3::repeat(f64::INFINITY), |m, p| m.inf(p));
            let hi = pts.iter().fold(Vector3::repeat(f64::NEG_INFINITY), |m, p| m.sup(p));
            let mid = (lo + hi) * 0.5;
            for p in &mut pts {
                *p -= mid;
            }
            ("bracket", pts, SymmetryGroup::trivial())
        }
    };
    ObjectModel::new(name, dedup_points(points), symmetry, params.canonical_distance, params.canonical_roi)
}

/// One catalog camera: pose `T_wc` and intrinsics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    pub id: usize,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
}

impl Viewpoint {
    pub fn center(&self) -> Vector3<f64> {
        self.pose.translation
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewpointCatalog {
    views: Vec<Viewpoint>,
}

impl ViewpointCatalog {
    pub fn new(views: Vec<Viewpoint>) -> Result<Self, SceneError> {
        let mut ids: Vec<usize> = views.iter().map(|v| v.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(SceneError::InvalidCatalog("duplicate view id".into()));
        }
        for v in &views {
            Rotation::from_matrix(*v.pose.rotation.matrix())
                .map_err(|e| SceneError::InvalidCatalog(format!("view {}: {e}", v.id)))?;
            v.intrinsics
                .validate()
                .map_err(|e| SceneError::InvalidCatalog(format!("view {}: {e}", v.id)))?;
        }
        Ok(ViewpointCatalog { views })
    }

    pub fn views(&self) -> &[Viewpoint] {
        &self.views
    }

    pub fn get(&self, id: usize) -> Option<&Viewpoint> {
        self.views.iter().find(|v| v.id == id)
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

/// Camera orientation `R_wc` whose optical axis (+z) points from `eye` to
/// `target`, with image +y pointing as close to world −z as possible.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>) -> Rotation {
    let z = (target - eye).normalize();
    let mut up = Vector3::z();
    if z.cross(&up).norm() < 1e-9 {
        up = Vector3::y();
    }
    let x = z.cross(&up).normalize();
    let y = z.cross(&x);
    Rotation::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z]))
}

/// Cameras on an upper hemisphere around `center`, all looking at it.
///
/// Ring `i` sits at polar angle `(i + 1)·(π/2)/(n_rings + 1)` from the zenith;
/// odd rings are rotated by half an azimuth step. View ids are
/// `ring·n_per_ring + index`.
pub fn hemisphere_catalog(
    center: &Vector3<f64>,
    radius: f64,
    n_rings: usize,
    n_per_ring: usize,
    intr: &CameraIntrinsics,
) -> Result<ViewpointCatalog, SceneError> {
    if !(radius > 0.0) {
        return Err(SceneError::InvalidCatalog("radius must be positive".into()));
    }
    intr.validate().map_err(|e| SceneError::InvalidCatalog(e.to_string()))?;
    let mut views = Vec::with_capacity(n_rings * n_per_ring);
    for ring in 0..n_rings {
        let polar = (ring + 1) as f64 * (PI / 2.0) / (n_rings + 1) as f64;
        let offset = if ring % 2 == 1 { PI / n_per_ring as f64 } else { 0.0 };
        for j in 0..n_per_ring {
            let az = 2.0 * PI * j as f64 / n_per_ring as f64 + offset;
            let eye = center
                + radius * Vector3::new(polar.sin() * az.cos(), polar.sin() * az.sin(), polar.cos());
            views.push(Viewpoint {
                id: ring * n_per_ring + j,
                pose: Pose::new(look_at(&eye, center), eye),
                intrinsics: *intr,
            });
        }
    }
    ViewpointCatalog::new(views)
}

/// Axis-aligned box from which ground-truth translations are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkspaceBox {
    pub center: [f64; 3],
    pub half_extent: [f64; 3],
}

impl Default for WorkspaceBox {
    fn default() -> Self {
        WorkspaceBox { center: [0.0, 0.0, 0.0], half_extent: [0.05, 0.05, 0.02] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: usize,
    /// Index into [`Scene::models`].
    pub model: usize,
    /// Ground-truth `T_wo`.
    pub pose: Pose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub models: Vec<ObjectModel>,
    pub objects: Vec<SceneObject>,
    pub catalog: ViewpointCatalog,
    pub workspace: WorkspaceBox,
    pub rng_seed: u64,
}

impl Scene {
    pub fn object(&self, id: usize) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn model_of(&self, object: &SceneObject) -> &ObjectModel {
        &self.models[object.model]
    }

    /// Ground-truth object pose in the camera frame, `T_co = T_wc⁻¹·T_wo`.
    pub fn object_in_camera(&self, object: &SceneObject, view: &Viewpoint) -> Pose {
        view.pose.inverse() * object.pose
    }
}

/// Object center in front of the camera and inside the image.
pub fn center_visible(t_wo: &Vector3<f64>, view: &Viewpoint) -> bool {
    let t_co = view.pose.inverse_transform_point(t_wo);
    project(&t_co, &view.intrinsics).map(|u| view.intrinsics.contains(&u)).unwrap_or(false)
}

/// Uniform rotation from three uniforms (Shoemake's subgroup construction).
pub fn uniform_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random::<f64>() * 2.0 * PI;
    let u3: f64 = rng.random::<f64>() * 2.0 * PI;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let q = nalgebra::Quaternion::new(b * u3.cos(), a * u2.sin(), a * u2.cos(), b * u3.sin());
    let uq = nalgebra::UnitQuaternion::from_quaternion(q);
    Rotation::nearest(uq.to_rotation_matrix().matrix())
}

pub fn generate_scene(
    models: &[ObjectModel],
    catalog: &ViewpointCatalog,
    n_objects: usize,
    seed: u64,
    workspace: &WorkspaceBox,
) -> Result<Scene, SceneError> {
    if n_objects == 0 {
        return Err(SceneError::InvalidModel("n_objects must be at least 1".into()));
    }
    if models.is_empty() {
        return Err(SceneError::InvalidModel("no object models".into()));
    }
    let mut rng = stream_rng(seed, 0, 0, Stream::Scene);
    let center = Vector3::from(workspace.center);
    let half = Vector3::from(workspace.half_extent);
    let mut objects = Vec::with_capacity(n_objects);
    let mut attempts = 0usize;
    while objects.len() < n_objects {
        if attempts >= MAX_SCENE_ATTEMPTS {
            return Err(SceneError::InfeasibleScene { n_objects, attempts });
        }
        attempts += 1;
        let offset = Vector3::new(
            rng.random_range(-1.0..=1.0) * half.x,
            rng.random_range(-1.0..=1.0) * half.y,
            rng.random_range(-1.0..=1.0) * half.z,
        );
        let t = center + offset;
        let r = uniform_rotation(&mut rng);
        let visible = catalog.views().iter().filter(|v| center_visible(&t, v)).count();
        if visible >= 2 {
            let id = objects.len();
            objects.push(SceneObject { id, model: id % models.len(), pose: Pose::new(r, t) });
        }
    }
    Ok(Scene {
        models: models.to_vec(),
        objects,
        catalog: catalog.clone(),
        workspace: workspace.clone(),
        rng_seed: seed,
    })
}
