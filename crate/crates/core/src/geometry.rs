//! SE(3) poses, pinhole projection, reprojection residuals and the scalar
//! machinery of the robust conditional training objective.
//!
//! Poses are stored camera-to-scene: a camera-frame point `e` maps to the
//! scene frame as `y = R e + t`. The camera center in the scene frame is
//! therefore the translation itself.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

/// Errors raised by geometric operations.
#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    /// The camera-frame point has non-positive depth and cannot be projected.
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    /// A scalar argument fell outside its documented domain.
    #[error("argument {value} outside [{min}, {max}]")]
    OutOfRange { value: f64, min: f64, max: f64 },
    /// A matrix that should be a rotation is not orthonormal with det +1.
    #[error("matrix is not a rotation (orthonormality error {err:.3e})")]
    NotARotation { err: f64 },
}

/// Rigid camera-to-scene transform: `y = R e + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    /// Build a pose, checking that `rotation` is orthonormal with det +1
    /// within `1e-9` elementwise.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let err = rotation_error(&rotation);
        if err > 1e-9 || !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NotARotation { err });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Build a pose without validating the rotation. Callers must guarantee
    /// orthonormality (e.g. output of [`nearest_rotation`]).
    pub fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Apply the transform to a camera-frame point: `y = R e + t`.
    pub fn apply(&self, e: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * e + self.translation
    }

    /// Apply the inverse transform to a scene point: `e = Rᵀ (y − t)`.
    pub fn apply_inverse(&self, y: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (y - self.translation)
    }

    /// Composition `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn invert(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Camera center in the scene frame (the point the camera origin maps to).
    pub fn camera_center(&self) -> Vector3<f64> {
        self.translation
    }
}

/// Max elementwise deviation of `RᵀR` from identity plus any det defect.
pub fn rotation_error(r: &Matrix3<f64>) -> f64 {
    if !r.iter().all(|v| v.is_finite()) {
        return f64::INFINITY;
    }
    let gram = r.transpose() * r;
    let mut err: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let target = if i == j { 1.0 } else { 0.0 };
            err = err.max((gram[(i, j)] - target).abs());
        }
    }
    err.max((r.determinant() - 1.0).abs())
}

/// Project an arbitrary matrix onto the nearest rotation (polar decomposition
/// via SVD, with the reflection corrected through the smallest singular value).
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let det = (u * v_t).determinant();
    let sign = if det < 0.0 { -1.0 } else { 1.0 };
    let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign));
    u * d * v_t
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        Self { fx, fy, cx, cy }
    }
}

/// 3D point in the scene frame (meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenePoint(pub Vector3<f64>);

impl ScenePoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self(Vector3::new(x, y, z))
    }
}

/// Image coordinates in pixels, origin top-left, +u right, +v down.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: &PixelPoint) -> f64 {
        ((self.u - other.u).powi(2) + (self.v - other.v).powi(2)).sqrt()
    }
}

/// Bounds and schedule parameters of the robust conditional objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustLossConfig {
    /// Soft-clamp floor in pixels.
    pub tau_min: f64,
    /// Soft-clamp range in pixels; the schedule starts at `tau_min + tau_max`.
    pub tau_max: f64,
    /// Minimum camera-frame depth (meters) for a prediction to count as valid.
    pub depth_min: f64,
    /// Maximum camera-frame depth (meters) for a valid prediction.
    pub depth_max: f64,
    /// Raw reprojection error bound (pixels); validity requires strictly less.
    pub reproj_max: f64,
    /// Depth (meters) of the heuristic back-projected target for invalid
    /// predictions.
    pub dummy_depth: f64,
}

impl Default for RobustLossConfig {
    fn default() -> Self {
        Self {
            tau_min: 1.0,
            tau_max: 50.0,
            depth_min: 0.1,
            depth_max: 1000.0,
            reproj_max: 1000.0,
            dummy_depth: 10.0,
        }
    }
}

/// Project a scene point through `(K, h)`: `π(K h⁻¹ y)`.
///
/// Fails with [`GeometryError::BehindCamera`] when the camera-frame depth is
/// not positive; the loss path never projects such points.
pub fn project(
    k: &CameraIntrinsics,
    h: &Pose,
    y: &ScenePoint,
) -> Result<PixelPoint, GeometryError> {
    let e = h.apply_inverse(&y.0);
    if e.z <= 0.0 {
        return Err(GeometryError::BehindCamera { depth: e.z });
    }
    Ok(PixelPoint {
        u: k.fx * e.x / e.z + k.cx,
        v: k.fy * e.y / e.z + k.cy,
    })
}

/// Euclidean distance in pixels between the projection of `y` under
/// `(K, h_star)` and the observed pixel `x`.
pub fn reprojection_residual(
    x: &PixelPoint,
    y: &ScenePoint,
    h_star: &Pose,
    k: &CameraIntrinsics,
) -> Result<f64, GeometryError> {
    let p = project(k, h_star, y)?;
    Ok(p.distance(x))
}

/// Soft-clamp radius over training progress: `τ(t) = √(1−t²)·τ_max + τ_min`.
pub fn tau_schedule(t: f64, cfg: &RobustLossConfig) -> Result<f64, GeometryError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(GeometryError::OutOfRange {
            value: t,
            min: 0.0,
            max: 1.0,
        });
    }
    Ok((1.0 - t * t).sqrt() * cfg.tau_max + cfg.tau_min)
}

/// Robustified residual `τ·tanh(r/τ)`: identity-like for `r ≪ τ`, saturating
/// below `τ` for large residuals.
pub fn robust_residual(r: f64, tau: f64) -> f64 {
    debug_assert!(r >= 0.0 && tau > 0.0);
    tau * (r / tau).tanh()
}

/// Membership test for the valid set: camera-frame depth within
/// `[depth_min, depth_max]` and raw reprojection error strictly below
/// `reproj_max`. Points behind the camera are invalid.
pub fn is_valid_prediction(
    y: &ScenePoint,
    h_star: &Pose,
    k: &CameraIntrinsics,
    x: &PixelPoint,
    cfg: &RobustLossConfig,
) -> bool {
    let e = h_star.apply_inverse(&y.0);
    if !(cfg.depth_min..=cfg.depth_max).contains(&e.z) {
        return false;
    }
    match reprojection_residual(x, y, h_star, k) {
        Ok(r) => r < cfg.reproj_max,
        Err(_) => false,
    }
}

/// Heuristic regression target for invalid predictions: the back-projection
/// of `x` at `dummy_depth`, mapped into the scene frame through `h_star`.
pub fn dummy_target(
    x: &PixelPoint,
    k: &CameraIntrinsics,
    h_star: &Pose,
    cfg: &RobustLossConfig,
) -> ScenePoint {
    let d = cfg.dummy_depth;
    let e = Vector3::new((x.u - k.cx) / k.fx * d, (x.v - k.cy) / k.fy * d, d);
    ScenePoint(h_star.apply(&e))
}

/// Rotation error in degrees and camera-center distance in meters between
/// two poses.
pub fn pose_error(h_est: &Pose, h_gt: &Pose) -> (f64, f64) {
    let trace = (h_est.rotation.transpose() * h_gt.rotation).trace();
    let cos = ((trace - 1.0) / 2.0).clamp(-1.0, 1.0);
    let rot_deg = cos.acos().to_degrees();
    let trans = (h_est.camera_center() - h_gt.camera_center()).norm();
    (rot_deg, trans)
}

/// Rotation matrix for an axis-angle vector (Rodrigues' formula).
pub fn rotation_from_axis_angle(axis_angle: &Vector3<f64>) -> Matrix3<f64> {
    let theta = axis_angle.norm();
    if theta < 1e-12 {
        return Matrix3::identity();
    }
    let k = axis_angle / theta;
    let kx = skew(&k);
    Matrix3::identity() + kx * theta.sin() + kx * kx * (1.0 - theta.cos())
}

/// Skew-symmetric cross-product matrix `[v]×`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}
