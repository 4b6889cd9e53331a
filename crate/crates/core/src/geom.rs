//! Rotation and rigid-transform algebra, pinhole projection, and the analytic
//! Jacobians used by the estimators.
//!
//! Rotations are stored as 3×3 matrices. Tangent vectors (`RotVec`) are
//! axis-angle vectors; the exponential map uses the left-perturbation
//! convention `R ← exp(δ)·R` throughout the crate.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Axis-angle tangent vector, radians.
pub type RotVec = Vector3<f64>;

/// Smallest depth accepted in front of a camera, meters.
pub const MIN_DEPTH: f64 = 1e-6;

/// Tolerance used when validating orthonormality and determinant.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

const EXP_TAYLOR_THRESHOLD: f64 = 1e-8;
const LOG_PI_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("point is behind the camera (z = {0:e} m)")]
    BehindCamera(f64),
    #[error("invalid depth {0} m, must be positive")]
    InvalidDepth(f64),
    #[error("matrix is not a rotation: {0}")]
    NotARotation(String),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Hat operator: so(3) vector to skew-symmetric matrix.
#[rustfmt::skip]
pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
         0.0, -w.z,  w.y,
         w.z,  0.0, -w.x,
        -w.y,  w.x,  0.0,
    )
}

/// Vee operator, inverse of [`hat`]. Does not check skew-symmetry.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m.m32, m.m13, m.m21)
}

/// Element of SO(3) stored as an orthonormal matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 3]; 3]", into = "[[f64; 3]; 3]")]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Validates orthonormality and determinant within [`ROTATION_TOLERANCE`].
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GeomError> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(GeomError::NotARotation("non-finite entry".into()));
        }
        let ortho = (m * m.transpose() - Matrix3::identity()).abs().max();
        if ortho > ROTATION_TOLERANCE {
            return Err(GeomError::NotARotation(format!(
                "R·Rᵀ deviates from identity by {ortho:e}"
            )));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(GeomError::NotARotation(format!("det = {det}")));
        }
        Ok(Rotation(m))
    }

    /// Wraps a matrix the caller guarantees is a rotation.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    /// Projects an arbitrary invertible matrix onto the nearest rotation
    /// (polar decomposition via SVD).
    pub fn nearest(m: &Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd u");
        let v_t = svd.v_t.expect("svd v_t");
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            let mut u_fixed = u;
            u_fixed.column_mut(2).neg_mut();
            r = u_fixed * v_t;
        }
        Rotation(r)
    }

    pub fn exp(phi: &RotVec) -> Self {
        exp_so3(phi)
    }

    pub fn about_axis(axis: &Vector3<f64>, angle: f64) -> Self {
        exp_so3(&(axis.normalize() * angle))
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::about_axis(&Vector3::x(), angle)
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::about_axis(&Vector3::y(), angle)
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::about_axis(&Vector3::z(), angle)
    }

    pub fn log(&self) -> RotVec {
        log_so3(self)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Rotation(self.0.transpose())
    }

    /// Rotation angle in [0, π].
    pub fn angle(&self) -> f64 {
        let cos = 0.5 * (self.0.trace() - 1.0);
        let sin = 0.5 * vee(&(self.0 - self.0.transpose())).norm();
        sin.atan2(cos)
    }

    /// Geodesic distance `|log(selfᵀ·other)|`.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        (self.inverse() * *other).angle()
    }

    pub fn renormalized(&self) -> Self {
        Self::nearest(&self.0)
    }

    /// Largest absolute entry of `R·Rᵀ − I`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.0 * self.0.transpose() - Matrix3::identity()).abs().max()
    }

    pub fn to_rows(&self) -> [[f64; 3]; 3] {
        let m = &self.0;
        [
            [m.m11, m.m12, m.m13],
            [m.m21, m.m22, m.m23],
            [m.m31, m.m32, m.m33],
        ]
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl TryFrom<[[f64; 3]; 3]> for Rotation {
    type Error = GeomError;

    fn try_from(rows: [[f64; 3]; 3]) -> Result<Self, Self::Error> {
        #[rustfmt::skip]
        let m = Matrix3::new(
            rows[0][0], rows[0][1], rows[0][2],
            rows[1][0], rows[1][1], rows[1][2],
            rows[2][0], rows[2][1], rows[2][2],
        );
        // Deserialized rotations may carry accumulated drift; accept them
        // within a looser bound and keep the stored bits untouched.
        let ortho = (m * m.transpose() - Matrix3::identity()).abs().max();
        if !(ortho <= 1e-6) || (m.determinant() - 1.0).abs() > 1e-6 {
            return Err(GeomError::NotARotation(format!(
                "deserialized matrix deviates by {ortho:e}"
            )));
        }
        Ok(Rotation(m))
    }
}

impl From<Rotation> for [[f64; 3]; 3] {
    fn from(r: Rotation) -> Self {
        r.to_rows()
    }
}

impl Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;

    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

impl Mul<&Vector3<f64>> for &Rotation {
    type Output = Vector3<f64>;

    fn mul(self, rhs: &Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

/// Exponential map so(3) → SO(3) (Rodrigues).
pub fn exp_so3(phi: &RotVec) -> Rotation {
    let theta = phi.norm();
    let k = hat(phi);
    let k2 = k * k;
    let m = if theta < EXP_TAYLOR_THRESHOLD {
        Matrix3::identity() + k + 0.5 * k2
    } else {
        let (s, c) = theta.sin_cos();
        Matrix3::identity() + (s / theta) * k + ((1.0 - c) / (theta * theta)) * k2
    };
    Rotation(m)
}

/// Logarithm map SO(3) → so(3), angle in [0, π].
///
/// Within 1e-6 of π the axis is recovered from the symmetric part
/// `(R + Rᵀ)/2 = cos θ·I + (1 − cos θ)·a·aᵀ`.
pub fn log_so3(r: &Rotation) -> RotVec {
    let m = r.matrix();
    let cos = (0.5 * (m.trace() - 1.0)).clamp(-1.0, 1.0);
    let v = vee(&(m - m.transpose()));
    let sin = 0.5 * v.norm();
    let theta = sin.atan2(cos);

    if theta < EXP_TAYLOR_THRESHOLD {
        return 0.5 * v * (1.0 + theta * theta / 6.0);
    }
    if PI - theta < LOG_PI_THRESHOLD {
        let sym = 0.5 * (m + m.transpose());
        let outer = (sym - Matrix3::identity() * cos) / (1.0 - cos);
        let i = (0..3)
            .max_by(|&a, &b| outer[(a, a)].total_cmp(&outer[(b, b)]))
            .unwrap_or(0);
        let mut axis: Vector3<f64> = outer.column(i).into_owned() / outer[(i, i)].max(0.0).sqrt();
        axis.normalize_mut();
        if axis.dot(&v) < 0.0 {
            axis = -axis;
        }
        return axis * theta;
    }
    v * (theta / (2.0 * sin))
}

/// Right Jacobian of SO(3).
pub fn right_jacobian(phi: &RotVec) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = hat(phi);
    let k2 = k * k;
    if theta < 1e-5 {
        return Matrix3::identity() - 0.5 * k + k2 / 6.0;
    }
    let t2 = theta * theta;
    Matrix3::identity() - ((1.0 - theta.cos()) / t2) * k + ((theta - theta.sin()) / (t2 * theta)) * k2
}

/// Inverse of the right Jacobian of SO(3); singular at θ = 2π.
pub fn right_jacobian_inverse(phi: &RotVec) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = hat(phi);
    let k2 = k * k;
    if theta < 1e-5 {
        return Matrix3::identity() + 0.5 * k + k2 / 12.0;
    }
    let coeff = 1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() + 0.5 * k + coeff * k2
}

/// Composes long chains of rotations, re-projecting onto SO(3) every
/// [`RotationChain::RENORMALIZE_EVERY`] compositions to bound drift.
#[derive(Clone, Debug)]
pub struct RotationChain {
    current: Rotation,
    since_renormalize: usize,
}

impl RotationChain {
    pub const RENORMALIZE_EVERY: usize = 100;

    pub fn new(start: Rotation) -> Self {
        RotationChain { current: start, since_renormalize: 0 }
    }

    pub fn push(&mut self, r: &Rotation) {
        self.current = self.current * *r;
        self.since_renormalize += 1;
        if self.since_renormalize >= Self::RENORMALIZE_EVERY {
            self.current = self.current.renormalized();
            self.since_renormalize = 0;
        }
    }

    pub fn current(&self) -> &Rotation {
        &self.current
    }
}

/// Rigid transform mapping points from a child frame into a parent frame:
/// `p_parent = R·p_child + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Pose { rotation, translation }
    }

    pub fn identity() -> Self {
        Pose::new(Rotation::identity(), Vector3::zeros())
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.matrix() * p + self.translation
    }

    /// Maps a parent-frame point into the child frame: `Rᵀ·(p − t)`.
    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.matrix().tr_mul(&(p - self.translation))
    }

    pub fn inverse(&self) -> Pose {
        let r_inv = self.rotation.inverse();
        Pose::new(r_inv, -(r_inv.matrix() * self.translation))
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        Pose::new(
            self.rotation * rhs.rotation,
            self.transform_point(&rhs.translation),
        )
    }
}

/// Pinhole intrinsics, pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeomError> {
        let intr = CameraIntrinsics { fx, fy, cx, cy, width, height };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeomError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx = {}, fy = {})",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(GeomError::InvalidIntrinsics(format!(
                "cx = {} outside [0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(GeomError::InvalidIntrinsics(format!(
                "cy = {} outside [0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    /// True when the pixel lies inside `[0, width) × [0, height)`.
    pub fn contains(&self, u: &Vector2<f64>) -> bool {
        u.x >= 0.0 && u.y >= 0.0 && u.x < self.width as f64 && u.y < self.height as f64
    }
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        CameraIntrinsics { fx: 600.0, fy: 600.0, cx: 320.0, cy: 240.0, width: 640, height: 480 }
    }
}

/// Perspective projection of a camera-frame point.
pub fn project(point_cam: &Vector3<f64>, intr: &CameraIntrinsics) -> Result<Vector2<f64>, GeomError> {
    if !(point_cam.z > MIN_DEPTH) {
        return Err(GeomError::BehindCamera(point_cam.z));
    }
    Ok(Vector2::new(
        intr.fx * point_cam.x / point_cam.z + intr.cx,
        intr.fy * point_cam.y / point_cam.z + intr.cy,
    ))
}

/// Back-projects a pixel to the camera-frame point at depth `t_z`.
pub fn back_project(u: &Vector2<f64>, t_z: f64, intr: &CameraIntrinsics) -> Result<Vector3<f64>, GeomError> {
    if !(t_z > 0.0) {
        return Err(GeomError::InvalidDepth(t_z));
    }
    Ok(Vector3::new(
        (u.x - intr.cx) / intr.fx * t_z,
        (u.y - intr.cy) / intr.fy * t_z,
        t_z,
    ))
}

/// `∂π(p)/∂p` for a camera-frame point.
pub fn pinhole_jacobian(p: &Vector3<f64>, intr: &CameraIntrinsics) -> Result<Matrix2x3<f64>, GeomError> {
    if !(p.z > MIN_DEPTH) {
        return Err(GeomError::BehindCamera(p.z));
    }
    let inv_z = 1.0 / p.z;
    let inv_z2 = inv_z * inv_z;
    #[rustfmt::skip]
    let j = Matrix2x3::new(
        intr.fx * inv_z, 0.0, -intr.fx * p.x * inv_z2,
        0.0, intr.fy * inv_z, -intr.fy * p.y * inv_z2,
    );
    Ok(j)
}

/// Jacobian of the projected object origin with respect to the world-frame
/// translation `t_wo`, for a camera with pose `T_wc`.
pub fn projection_jacobian(
    t_wo: &Vector3<f64>,
    cam: &Pose,
    intr: &CameraIntrinsics,
) -> Result<Matrix2x3<f64>, GeomError> {
    let t_co = cam.inverse_transform_point(t_wo);
    let d_pix = pinhole_jacobian(&t_co, intr)?;
    Ok(d_pix * cam.rotation.matrix().transpose())
}

/// Projects a world point through a camera with pose `T_wc`.
pub fn project_world(p_w: &Vector3<f64>, cam: &Pose, intr: &CameraIntrinsics) -> Result<Vector2<f64>, GeomError> {
    project(&cam.inverse_transform_point(p_w), intr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr600() -> CameraIntrinsics {
        CameraIntrinsics::new(600.0, 600.0, 320.0, 320.0, 640, 640).unwrap()
    }

    #[test]
    fn exp_identity_and_quarter_turn() {
        assert_eq!(exp_so3(&Vector3::zeros()).matrix(), &Matrix3::identity());
        let r = exp_so3(&Vector3::new(0.0, 0.0, PI / 2.0));
        #[rustfmt::skip]
        let expected = Matrix3::new(
            0.0, -1.0, 0.0,
            1.0,  0.0, 0.0,
            0.0,  0.0, 1.0,
        );
        assert_relative_eq!(*r.matrix(), expected, epsilon = 1e-15);
    }

    #[test]
    fn log_examples() {
        assert_eq!(log_so3(&Rotation::identity()), Vector3::zeros());
        #[rustfmt::skip]
        let m = Matrix3::new(
            0.0, -1.0, 0.0,
            1.0,  0.0, 0.0,
            0.0,  0.0, 1.0,
        );
        let phi = log_so3(&Rotation::from_matrix(m).unwrap());
        assert_relative_eq!(phi, Vector3::new(0.0, 0.0, PI / 2.0), epsilon = 1e-15);
    }

    #[test]
    fn log_at_pi_uses_eigen_axis() {
        let r = Rotation::from_matrix(Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0))).unwrap();
        let phi = log_so3(&r);
        assert_relative_eq!(phi.norm(), PI, epsilon = 1e-12);
        assert_relative_eq!(phi.x.abs(), PI, epsilon = 1e-12);
        assert!(phi.y.abs() < 1e-12 && phi.z.abs() < 1e-12);

        // Generic axis, angle π − 1e-9: eigen branch must still round-trip.
        let axis = Vector3::new(1.0, 2.0, -0.5).normalize();
        let r = exp_so3(&(axis * (PI - 1e-9)));
        let back = exp_so3(&log_so3(&r));
        assert_relative_eq!(*back.matrix(), *r.matrix(), epsilon = 1e-9);
    }

    #[test]
    fn exp_log_round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let axis = Vector3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
                .normalize();
            let angle = rng.random::<f64>() * (PI - 1e-3);
            let phi = axis * angle;
            let back = log_so3(&exp_so3(&phi));
            assert!((back - phi).norm() <= 1e-9, "phi {phi:?} back {back:?}");
        }
    }

    #[test]
    fn tiny_angles_round_trip() {
        let phi = Vector3::new(1e-10, -3e-11, 2e-10);
        assert_relative_eq!(log_so3(&exp_so3(&phi)), phi, epsilon = 1e-20);
    }

    #[test]
    fn chain_of_compositions_stays_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut chain = RotationChain::new(Rotation::identity());
        for _ in 0..100_000 {
            let phi = Vector3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
            chain.push(&exp_so3(&phi));
        }
        assert!(chain.current().orthonormality_error() <= 1e-6);
        assert!((chain.current().matrix().determinant() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn nearest_rotation_fixes_reflection_and_drift() {
        let r = Rotation::rot_x(0.3);
        let noisy = r.matrix() * 1.001 + Matrix3::from_element(1e-4);
        let fixed = Rotation::nearest(&noisy);
        assert!(fixed.orthonormality_error() < 1e-12);
        assert!(fixed.angle_to(&r) < 1e-3);
    }

    #[test]
    fn from_matrix_rejects_non_rotations() {
        assert!(Rotation::from_matrix(Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0))).is_err());
        assert!(Rotation::from_matrix(Matrix3::identity() * 2.0).is_err());
    }

    #[test]
    fn project_examples() {
        let intr = intr600();
        assert_eq!(project(&Vector3::new(0.0, 0.0, 0.5), &intr).unwrap(), Vector2::new(320.0, 320.0));
        assert_relative_eq!(
            project(&Vector3::new(0.1, 0.0, 1.0), &intr).unwrap(),
            Vector2::new(380.0, 320.0),
            epsilon = 1e-12
        );
        assert!(matches!(project(&Vector3::new(0.0, 0.0, 0.0), &intr), Err(GeomError::BehindCamera(_))));
    }

    #[test]
    fn back_project_examples() {
        let intr = intr600();
        assert_eq!(back_project(&Vector2::new(320.0, 320.0), 1.0, &intr).unwrap(), Vector3::new(0.0, 0.0, 1.0));
        assert_relative_eq!(
            back_project(&Vector2::new(380.0, 320.0), 1.0, &intr).unwrap(),
            Vector3::new(0.1, 0.0, 1.0),
            epsilon = 1e-12
        );
        assert!(matches!(back_project(&Vector2::new(1.0, 1.0), 0.0, &intr), Err(GeomError::InvalidDepth(_))));
    }

    #[test]
    fn projection_jacobian_on_axis() {
        let intr = intr600();
        let j = projection_jacobian(&Vector3::new(0.0, 0.0, 1.0), &Pose::identity(), &intr).unwrap();
        assert_relative_eq!(j, Matrix2x3::new(600.0, 0.0, 0.0, 0.0, 600.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn projection_jacobian_rotated_camera_permutes_columns() {
        // Camera rotated +90° about world y: its optical axis is world +x.
        let intr = intr600();
        let cam = Pose::new(Rotation::rot_y(PI / 2.0), Vector3::zeros());
        let j = projection_jacobian(&Vector3::new(1.0, 0.0, 0.0), &cam, &intr).unwrap();
        // Camera x axis is world −z, camera y is world y, depth along world x.
        assert_relative_eq!(j, Matrix2x3::new(0.0, 0.0, -600.0, 0.0, 600.0, 0.0), epsilon = 1e-9);
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 10, 10).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 10.0, 1.0, 10, 10).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 5.0, 5.0, 10, 10).is_ok());
    }

    #[test]
    fn right_jacobian_inverse_is_inverse() {
        let phi = Vector3::new(0.4, -1.1, 0.7);
        let prod = right_jacobian(&phi) * right_jacobian_inverse(&phi);
        assert_relative_eq!(prod, Matrix3::identity(), epsilon = 1e-12);
    }

    #[test]
    fn pose_inverse_round_trip() {
        let pose = Pose::new(Rotation::exp(&Vector3::new(0.1, 0.2, -0.3)), Vector3::new(1.0, -2.0, 0.5));
        let p = Vector3::new(0.3, 0.1, 0.9);
        assert_relative_eq!(pose.inverse().transform_point(&pose.transform_point(&p)), p, epsilon = 1e-12);
        assert_relative_eq!(pose.inverse_transform_point(&p), pose.inverse().transform_point(&p), epsilon = 1e-12);
    }

    #[test]
    fn rotation_serde_round_trip_is_exact() {
        let r = Rotation::exp(&Vector3::new(0.123456789, -2.2, 0.3));
        let s = serde_json::to_string(&r).unwrap();
        let back: Rotation = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #[test]
        fn back_project_then_project_is_identity(
            ux in 0.0f64..640.0, uy in 0.0f64..640.0, z in 0.05f64..10.0
        ) {
            let intr = intr600();
            let u = Vector2::new(ux, uy);
            let p = back_project(&u, z, &intr).unwrap();
            let back = project(&p, &intr).unwrap();
            prop_assert!((back - u).abs().max() <= 1e-12 * u.abs().max().max(1.0));
        }

        #[test]
        fn log_angle_in_range(x in -3.0f64..3.0, y in -3.0f64..3.0, z in -3.0f64..3.0) {
            let phi = Vector3::new(x, y, z);
            let back = log_so3(&exp_so3(&phi));
            prop_assert!(back.norm() <= PI + 1e-12);
            let r1 = exp_so3(&phi);
            let r2 = exp_so3(&back);
            prop_assert!((r1.matrix() - r2.matrix()).abs().max() <= 1e-9);
        }
    }
}
