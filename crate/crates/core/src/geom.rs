//! Rigid-body and pinhole camera geometry.
//!
//! Rotations are stored as matrices. Euler angles only appear where a
//! distribution over rotations is parameterized (the coarse GMM); they use
//! the intrinsic Z-Y-X convention: `R = Rz(yaw) * Ry(pitch) * Rx(roll)`.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, Rotation3, Unit, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can round up to exactly 2*pi for tiny negative inputs
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Skew-symmetric cross-product matrix `[v]x`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Left Jacobian of SO(3): `Exp(w + dw) ~ Exp(J_l(w) dw) Exp(w)`.
pub fn so3_left_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = skew(w);
    if theta < 1e-6 {
        return Matrix3::identity() + 0.5 * k + k * k / 6.0;
    }
    let t2 = theta * theta;
    Matrix3::identity() + (1.0 - theta.cos()) / t2 * k + (theta - theta.sin()) / (t2 * theta) * k * k
}

/// A 3x3 proper orthonormal matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 3]; 3]", into = "[[f64; 3]; 3]")]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub const ORTHONORMAL_TOL: f64 = 1e-9;

    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Validates orthonormality and orientation within [`Self::ORTHONORMAL_TOL`].
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let err = (m * m.transpose() - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if !err.is_finite() || err > Self::ORTHONORMAL_TOL || (det - 1.0).abs() > Self::ORTHONORMAL_TOL
        {
            return Err(Error::InvalidArgument(format!(
                "not a rotation matrix (orthonormality error {err:e}, det {det})"
            )));
        }
        Ok(Rotation(m))
    }

    /// Projects an arbitrary matrix onto the nearest rotation (polar decomposition).
    pub fn from_matrix_projected(m: Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut d = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Rotation(u * d * v_t)
    }

    /// Exponential map of a rotation vector.
    pub fn exp(omega: &Vector3<f64>) -> Self {
        Rotation(*Rotation3::new(*omega).matrix())
    }

    /// Rotation vector with angle in `[0, pi]`.
    pub fn log(&self) -> Vector3<f64> {
        let m = &self.0;
        let v = 0.5 * Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
        let s = v.norm();
        let c = 0.5 * (m.trace() - 1.0);
        if c < -0.9 {
            // near pi the antisymmetric part vanishes
            return Rotation3::from_matrix_unchecked(self.0).scaled_axis();
        }
        let theta = s.atan2(c);
        if s < 1e-12 {
            return v;
        }
        v * (theta / s)
    }

    pub fn about_axis(axis: &Vector3<f64>, angle: f64) -> Self {
        Rotation(*Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle).matrix())
    }

    pub fn from_euler(e: EulerAngles) -> Self {
        let z = Rotation3::from_axis_angle(&Vector3::z_axis(), e.yaw);
        let y = Rotation3::from_axis_angle(&Vector3::y_axis(), e.pitch);
        let x = Rotation3::from_axis_angle(&Vector3::x_axis(), e.roll);
        Rotation(*(z * y * x).matrix())
    }

    pub fn to_euler(&self) -> EulerAngles {
        let m = &self.0;
        let pitch = (-m[(2, 0)]).clamp(-1.0, 1.0).asin();
        let (yaw, roll) = if m[(2, 0)].abs() < 1.0 - 1e-12 {
            (m[(1, 0)].atan2(m[(0, 0)]), m[(2, 1)].atan2(m[(2, 2)]))
        } else {
            // gimbal lock: only yaw - roll (or yaw + roll) is observable; put it all in yaw
            ((-m[(0, 1)]).atan2(m[(1, 1)]), 0.0)
        };
        EulerAngles::new(yaw, pitch, roll)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    /// Geodesic angle between two rotations, in `[0, pi]`.
    pub fn geodesic_distance(&self, other: &Rotation) -> f64 {
        rotation_geodesic_distance(self, other)
    }
}

/// `arccos((trace(a^T b) - 1) / 2)` clamped to `[0, pi]`.
pub fn rotation_geodesic_distance(a: &Rotation, b: &Rotation) -> f64 {
    let m = a.0.transpose() * b.0;
    let angle = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
    if angle < 1e-4 {
        // acos is ill-conditioned near 1; the antisymmetric part is sin(angle) * axis
        let w = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
        (0.5 * w.norm()).min(1.0).asin()
    } else {
        angle
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

impl TryFrom<[[f64; 3]; 3]> for Rotation {
    type Error = Error;
    fn try_from(rows: [[f64; 3]; 3]) -> Result<Self> {
        let m = Matrix3::from_fn(|r, c| rows[r][c]);
        // Serialized rotations go through text; accept them if they are close
        // and snap back onto SO(3).
        let err = (m * m.transpose() - Matrix3::identity()).abs().max();
        if !err.is_finite() || err > 1e-5 || m.determinant() < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "not a rotation matrix (orthonormality error {err:e})"
            )));
        }
        Ok(Rotation::from_matrix_projected(m))
    }
}

impl From<Rotation> for [[f64; 3]; 3] {
    fn from(r: Rotation) -> Self {
        let m = r.0;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }
}

/// Intrinsic Z-Y-X Euler angles in radians, each wrapped into `[-pi, pi)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EulerAngles {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl EulerAngles {
    pub fn new(yaw: f64, pitch: f64, roll: f64) -> Self {
        EulerAngles { yaw: wrap_angle(yaw), pitch: wrap_angle(pitch), roll: wrap_angle(roll) }
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.yaw, self.pitch, self.roll)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        EulerAngles::new(v.x, v.y, v.z)
    }
}

/// Rigid transform from object space to camera space: `x_cam = R x_obj + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Pose { rotation, translation }
    }

    pub fn identity() -> Self {
        Pose::new(Rotation::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Pose::new(Rotation::identity(), t)
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.0 * x + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        compose(self, other)
    }

    pub fn inverse(&self) -> Pose {
        invert(self)
    }

    /// Left-multiplied tangent update: `R <- exp(omega) R`, `t <- t + v`,
    /// with `twist = (omega, v)`.
    pub fn retract(&self, twist: &Vector6<f64>) -> Pose {
        let omega = twist.fixed_rows::<3>(0).into_owned();
        let v = twist.fixed_rows::<3>(3).into_owned();
        Pose::new(Rotation::exp(&omega) * self.rotation, self.translation + v)
    }

    /// Inverse of [`Pose::retract`] relative to `base`: the twist taking `base` to `self`.
    pub fn local_coordinates(&self, base: &Pose) -> Vector6<f64> {
        let omega = (self.rotation * base.rotation.transpose()).log();
        let v = self.translation - base.translation;
        Vector6::new(omega.x, omega.y, omega.z, v.x, v.y, v.z)
    }

    /// Geodesic rotation error (radians) and translation error (meters).
    pub fn error_to(&self, other: &Pose) -> (f64, f64) {
        (
            self.rotation.geodesic_distance(&other.rotation),
            (self.translation - other.translation).norm(),
        )
    }
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    Pose::new(a.rotation * b.rotation, a.rotation.0 * b.translation + a.translation)
}

pub fn invert(p: &Pose) -> Pose {
    let rt = p.rotation.transpose();
    Pose::new(rt, -(rt.0 * p.translation))
}

/// Pinhole intrinsics plus image size.
///
/// Pixel `(u, v)` refers to the pixel whose center sits at continuous image
/// coordinate `(u, v)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// A full-frame camera; the principal point must lie inside the image.
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Camera::crop_camera(fx, fy, cx, cy, width, height)?;
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(Error::InvalidCamera(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(cam)
    }

    /// A camera for an image crop. The principal point may lie outside the crop.
    pub fn crop_camera(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::InvalidCamera(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidCamera("empty image".into()));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::InvalidCamera("non-finite principal point".into()));
        }
        Ok(Camera { fx, fy, cx, cy, width, height })
    }

    pub fn k(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Pinhole projection of a camera-space point.
    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>> {
        project(self, p)
    }

    /// `K^-1 * depth * (u, v, 1)`: the camera-space point at z-depth `depth`.
    pub fn backproject(&self, pixel: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx * depth,
            (pixel.y - self.cy) / self.fy * depth,
            depth,
        )
    }

    /// Length of the ray direction `K^-1 (u, v, 1)`; converts z-depth to range.
    pub fn ray_scale(&self, u: f64, v: f64) -> f64 {
        let x = (u - self.cx) / self.fx;
        let y = (v - self.cy) / self.fy;
        (x * x + y * y + 1.0).sqrt()
    }

    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        p.x >= -0.5 && p.y >= -0.5 && p.x < self.width as f64 - 0.5 && p.y < self.height as f64 - 0.5
    }
}

/// `(fx x/z + cx, fy y/z + cy)`.
pub fn project(camera: &Camera, p: &Vector3<f64>) -> Result<Vector2<f64>> {
    if !(p.z > 0.0) {
        return Err(Error::BehindCamera(p.z));
    }
    Ok(Vector2::new(camera.fx * p.x / p.z + camera.cx, camera.fy * p.y / p.z + camera.cy))
}

/// Lifts a pixel with known depth into object space: `R^T (K^-1 d (u, v, 1) - t)`.
pub fn lift(camera: &Camera, pose: &Pose, pixel: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::BehindCamera(depth));
    }
    let x_cam = camera.backproject(pixel, depth);
    Ok(pose.rotation.transpose().0 * (x_cam - pose.translation))
}
