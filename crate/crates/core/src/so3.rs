//! Rotations in SO(3) stored as unit quaternions, with the exponential and
//! logarithm maps, the skew operator and the right Jacobian.
//!
//! Quaternions are kept in canonical form (`w ≥ 0`) so that equal rotations
//! compare equal componentwise.

use std::fmt;
use std::ops::Mul;

use nalgebra::Quaternion;

use crate::error::{invalid, Result};
use crate::{Mat3, Vec3};

/// Below this angle `exp`/`log` switch to their Taylor expansions.
pub const EXP_LOG_TAYLOR_THRESHOLD: f64 = 1e-8;
/// Below this angle the right Jacobian switches to its Taylor expansion.
pub const JACOBIAN_TAYLOR_THRESHOLD: f64 = 1e-6;

#[derive(Clone, Copy, PartialEq)]
pub struct Rotation {
    q: Quaternion<f64>,
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl fmt::Debug for Rotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Rotation(w: {:.6}, x: {:.6}, y: {:.6}, z: {:.6})",
            self.q.w, self.q.i, self.q.j, self.q.k
        )
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self {
            q: Quaternion::new(1.0, 0.0, 0.0, 0.0),
        }
    }

    /// Builds a rotation from quaternion components, normalizing them.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let q = Quaternion::new(w, x, y, z);
        let n = q.norm();
        if !n.is_finite() || n < 1e-12 {
            return Err(invalid(format!(
                "quaternion ({w}, {x}, {y}, {z}) cannot be normalized"
            )));
        }
        Ok(Self::canonical(q / n))
    }

    fn canonical(q: Quaternion<f64>) -> Self {
        let q = q / q.norm();
        if q.w < 0.0 {
            Self { q: -q }
        } else {
            Self { q }
        }
    }

    /// Components as `[w, x, y, z]`.
    pub fn quaternion(&self) -> [f64; 4] {
        [self.q.w, self.q.i, self.q.j, self.q.k]
    }

    /// Exponential map. Non-finite input propagates NaN; use [`Rotation::try_exp`]
    /// for a checked variant.
    pub fn exp(phi: &Vec3) -> Self {
        let theta_sq = phi.norm_squared();
        let theta = theta_sq.sqrt();
        let (w, s) = if theta < EXP_LOG_TAYLOR_THRESHOLD {
            (1.0 - theta_sq / 8.0, 0.5 - theta_sq / 48.0)
        } else {
            let half = 0.5 * theta;
            (half.cos(), half.sin() / theta)
        };
        Self::canonical(Quaternion::new(w, s * phi.x, s * phi.y, s * phi.z))
    }

    pub fn try_exp(phi: &Vec3) -> Result<Self> {
        if phi.iter().any(|c| !c.is_finite()) {
            return Err(invalid(format!("exp of non-finite vector {phi:?}")));
        }
        Ok(Self::exp(phi))
    }

    /// Logarithm map; the result has norm in `[0, π]`.
    pub fn log(&self) -> Vec3 {
        let v = Vec3::new(self.q.i, self.q.j, self.q.k);
        let w = self.q.w;
        let n_sq = v.norm_squared();
        let n = n_sq.sqrt();
        if n < EXP_LOG_TAYLOR_THRESHOLD {
            // atan(n/w)/n ≈ (1 − n²/(3w²))/w, and w ≈ 1 here
            v * (2.0 / w * (1.0 - n_sq / (3.0 * w * w)))
        } else {
            let theta = 2.0 * n.atan2(w);
            v * (theta / n)
        }
    }

    /// Angle of `self⁻¹·other` in radians; exactly zero for equal rotations.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        if self == other {
            0.0
        } else {
            self.inverse().compose(other).angle()
        }
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn angle(&self) -> f64 {
        let n = Vec3::new(self.q.i, self.q.j, self.q.k).norm();
        2.0 * n.atan2(self.q.w)
    }

    pub fn inverse(&self) -> Self {
        Self { q: self.q.conjugate() }
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Self::canonical(self.q * other.q)
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        let u = Vec3::new(self.q.i, self.q.j, self.q.k);
        let t = 2.0 * u.cross(v);
        v + self.q.w * t + u.cross(&t)
    }

    /// Rotates by the inverse, `Rᵀ v`.
    pub fn inverse_rotate(&self, v: &Vec3) -> Vec3 {
        self.inverse().rotate(v)
    }

    pub fn matrix(&self) -> Mat3 {
        let (w, x, y, z) = (self.q.w, self.q.i, self.q.j, self.q.k);
        let (xx, yy, zz) = (x * x, y * y, z * z);
        let (xy, xz, yz) = (x * y, x * z, y * z);
        let (wx, wy, wz) = (w * x, w * y, w * z);
        Mat3::new(
            1.0 - 2.0 * (yy + zz),
            2.0 * (xy - wz),
            2.0 * (xz + wy),
            2.0 * (xy + wz),
            1.0 - 2.0 * (xx + zz),
            2.0 * (yz - wx),
            2.0 * (xz - wy),
            2.0 * (yz + wx),
            1.0 - 2.0 * (xx + yy),
        )
    }

    /// Distance between quaternions modulo the double cover.
    pub fn distance(&self, other: &Rotation) -> f64 {
        (self.q - other.q).norm().min((self.q + other.q).norm())
    }

    /// Spherical interpolation, `self·exp(t·log(self⁻¹·other))`.
    pub fn slerp(&self, other: &Rotation, t: f64) -> Self {
        let delta = self.inverse().compose(other).log();
        self.compose(&Self::exp(&(delta * t)))
    }

    pub fn about_z(angle: f64) -> Self {
        Self::exp(&Vec3::new(0.0, 0.0, angle))
    }
}

impl Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        self.compose(&rhs)
    }
}

impl Mul<&Rotation> for &Rotation {
    type Output = Rotation;

    fn mul(self, rhs: &Rotation) -> Rotation {
        self.compose(rhs)
    }
}

impl Mul<Vec3> for Rotation {
    type Output = Vec3;

    fn mul(self, rhs: Vec3) -> Vec3 {
        self.rotate(&rhs)
    }
}

/// Skew-symmetric matrix with `hat(v)·u = v × u`.
pub fn hat(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Right Jacobian: `exp(φ + δ) ≈ exp(φ)·exp(J_r(φ)·δ)`.
pub fn right_jacobian(phi: &Vec3) -> Mat3 {
    let theta_sq = phi.norm_squared();
    let theta = theta_sq.sqrt();
    let k = hat(phi);
    let k2 = k * k;
    if theta < JACOBIAN_TAYLOR_THRESHOLD {
        Mat3::identity() - 0.5 * k + k2 / 6.0
    } else {
        let a = (1.0 - theta.cos()) / theta_sq;
        let b = (theta - theta.sin()) / (theta_sq * theta);
        Mat3::identity() - a * k + b * k2
    }
}

/// Inverse of [`right_jacobian`], used to differentiate `log`.
pub fn right_jacobian_inv(phi: &Vec3) -> Mat3 {
    let theta_sq = phi.norm_squared();
    let theta = theta_sq.sqrt();
    let k = hat(phi);
    let k2 = k * k;
    if theta < JACOBIAN_TAYLOR_THRESHOLD {
        Mat3::identity() + 0.5 * k + k2 / 12.0
    } else {
        let c = 1.0 / theta_sq - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
        Mat3::identity() + 0.5 * k + c * k2
    }
}
