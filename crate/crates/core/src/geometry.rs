//! Pinhole camera model and SE(3) pose algebra.
//!
//! Poses map world coordinates into the camera frame (`X_cam = R * X + t`),
//! so `project(pose, cam, X)` is the full world-to-pixel map. Optimization
//! updates poses by left retraction `pose <- exp(delta) * pose` with tangent
//! vectors ordered `[rotation; translation]`.

use nalgebra::{Matrix2x3, Matrix3, UnitQuaternion, Vector2, Vector3, Vector6};

/// Minimum camera-frame depth accepted by `project`.
pub const Z_MIN: f64 = 1e-6;

#[derive(thiserror::Error, Debug, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point behind camera (z = {0})")]
    BehindCamera(f64),
    #[error("non-positive depth {0}")]
    NonPositiveDepth(f64),
}

/// Pinhole intrinsics. Distortion-free; fx, fy > 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        Self { fx, fy, cx, cy }
    }

    pub fn from_matrix(k: &Matrix3<f64>) -> Self {
        Self::new(k[(0, 0)], k[(1, 1)], k[(0, 2)], k[(1, 2)])
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Lift a pixel at the given depth into the camera frame.
    pub fn lift(&self, p: Vector2<f64>, depth: f64) -> Vector3<f64> {
        Vector3::new(
            depth * (p.x - self.cx) / self.fx,
            depth * (p.y - self.cy) / self.fy,
            depth,
        )
    }

    /// Perspective division of a camera-frame point. No z check.
    pub fn project_cam(&self, xc: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * xc.x / xc.z + self.cx,
            self.fy * xc.y / xc.z + self.cy,
        )
    }

    /// Jacobian of `project_cam` w.r.t. the camera-frame point.
    pub fn project_cam_jacobian(&self, xc: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / xc.z;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * xc.x * iz * iz,
            0.0,
            self.fy * iz,
            -self.fy * xc.y * iz * iz,
        )
    }
}

/// Rigid world-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// World point into the camera frame.
    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// Camera-frame point back into the world frame.
    pub fn inverse_transform(&self, xc: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (xc - self.translation)
    }

    /// `self` after `other`: (a.compose(b))(x) = a(b(x)).
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rinv = self.rotation.inverse();
        PoseSE3 {
            rotation: rinv,
            translation: -(rinv * self.translation),
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Row-major 3x4 [R | t].
    pub fn to_matrix_3x4(&self) -> [f64; 12] {
        let r = self.rotation_matrix();
        let t = self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    pub fn from_matrix_3x4(m: &[f64; 12]) -> Self {
        let r = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let rot = UnitQuaternion::from_matrix(&r);
        PoseSE3::new(rot, Vector3::new(m[3], m[7], m[11]))
    }

    /// Left retraction: `exp(delta) * self`, renormalizing the quaternion.
    pub fn retract(&self, delta: &Vector6<f64>) -> PoseSE3 {
        let inc = se3_exp(delta);
        let mut out = inc.compose(self);
        out.rotation = UnitQuaternion::new_normalize(*out.rotation.quaternion());
        out
    }

    /// Rotation-angle and translation distance to another pose.
    pub fn distance(&self, other: &PoseSE3) -> (f64, f64) {
        let rel = self.inverse().compose(other);
        (rel.rotation.angle(), rel.translation.norm())
    }
}

/// SE(3) exponential map; tangent is `[omega; v]`.
pub fn se3_exp(tangent: &Vector6<f64>) -> PoseSE3 {
    let omega = Vector3::new(tangent[0], tangent[1], tangent[2]);
    let v = Vector3::new(tangent[3], tangent[4], tangent[5]);
    let theta = omega.norm();
    let w = skew(&omega);
    let w2 = w * w;
    let (a, b, c) = if theta < 1e-8 {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let t2 = theta * theta;
        (
            theta.sin() / theta,
            (1.0 - theta.cos()) / t2,
            (theta - theta.sin()) / (t2 * theta),
        )
    };
    let r = Matrix3::identity() + w * a + w2 * b;
    let vmat = Matrix3::identity() + w * b + w2 * c;
    let rot = UnitQuaternion::from_matrix(&r);
    PoseSE3::new(rot, vmat * v)
}

/// SE(3) logarithm; inverse of `se3_exp` for rotation angles below pi.
pub fn se3_log(pose: &PoseSE3) -> Vector6<f64> {
    let omega = pose.rotation.scaled_axis();
    let theta = omega.norm();
    let w = skew(&omega);
    let w2 = w * w;
    let vinv = if theta < 1e-8 {
        Matrix3::identity() - w * 0.5 + w2 * (1.0 / 12.0)
    } else {
        let half = 0.5 * theta;
        let coef = (1.0 - half * half.cos() / half.sin()) / (theta * theta);
        Matrix3::identity() - w * 0.5 + w2 * coef
    };
    let v = vinv * pose.translation;
    Vector6::new(omega.x, omega.y, omega.z, v.x, v.y, v.z)
}

/// Project a world point through pose and intrinsics.
pub fn project(
    pose: &PoseSE3,
    cam: &CameraModel,
    x: &Vector3<f64>,
) -> Result<Vector2<f64>, GeometryError> {
    let xc = pose.transform(x);
    if xc.z <= Z_MIN {
        return Err(GeometryError::BehindCamera(xc.z));
    }
    Ok(cam.project_cam(&xc))
}

/// Lift a pixel at a given depth into the world frame.
pub fn unproject(
    pose: &PoseSE3,
    cam: &CameraModel,
    p: Vector2<f64>,
    depth: f64,
) -> Result<Vector3<f64>, GeometryError> {
    if depth <= 0.0 {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    Ok(pose.inverse_transform(&cam.lift(p, depth)))
}

/// Camera-frame depth of a world point. May be non-positive.
pub fn cam_depth(pose: &PoseSE3, x: &Vector3<f64>) -> f64 {
    pose.transform(x).z
}

/// Jacobian of the camera-frame point w.r.t. the pose tangent (left
/// retraction), as the pair (d/d omega, d/d v) = (-[X_cam]x, I).
pub fn dcam_dpose_rot(xc: &Vector3<f64>) -> Matrix3<f64> {
    -skew(xc)
}

/// Jacobian of `pose^-1 exp(-delta) applied to a fixed camera point Y`
/// w.r.t. delta, as (d/d omega, d/d v) = (R^T [Y]x, -R^T).
pub fn dworld_dinvpose_rot(pose: &PoseSE3, y: &Vector3<f64>) -> (Matrix3<f64>, Matrix3<f64>) {
    let rt = pose.rotation_matrix().transpose();
    (rt * skew(y), -rt)
}
