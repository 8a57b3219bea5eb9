//! Planar rigid transforms and angle utilities.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Wraps an angle to the half-open interval `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut a = theta % std::f64::consts::TAU;
    if a <= -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    } else if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    }
    a
}

/// Derivative of a rotation matrix with respect to its angle.
pub fn rotation_derivative(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(-s, -c, c, -s)
}

/// Rotation matrix for `theta` radians (counter-clockwise).
pub fn rotation(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c)
}

#[derive(Debug, Error)]
pub enum Se2Error {
    #[error("rotation matrix is not orthonormal with det +1 (deviation {deviation:.3e})")]
    NotRotation { deviation: f64 },
    #[error("non-finite transform component")]
    NonFinite,
}

/// A planar rigid transform: rotation by `angle` followed by `translation`
/// (metres). Applying it maps `q` to `R q + t`.
///
/// Internally the rotation is stored as an angle so repeated composition
/// cannot drift away from SO(2); `rotation()` always returns an exactly
/// orthonormal matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Se2 {
    angle: f64,
    translation: Vector2<f64>,
}

impl Se2 {
    pub fn identity() -> Self {
        Se2 { angle: 0.0, translation: Vector2::zeros() }
    }

    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Se2 { angle: wrap_angle(theta), translation: Vector2::new(x, y) }
    }

    pub fn from_parts(translation: Vector2<f64>, angle: f64) -> Self {
        Se2 { angle: wrap_angle(angle), translation }
    }

    /// Builds a transform from an explicit rotation matrix, rejecting inputs
    /// that are not orthonormal with determinant +1 (tolerance 1e-9).
    pub fn from_matrix(rotation: &Matrix2<f64>, translation: Vector2<f64>) -> Result<Self, Se2Error> {
        if !rotation.iter().all(|v| v.is_finite()) || !translation.iter().all(|v| v.is_finite()) {
            return Err(Se2Error::NonFinite);
        }
        let gram = rotation.transpose() * rotation;
        let ortho_dev = (gram - Matrix2::identity()).norm();
        let det_dev = (rotation.determinant() - 1.0).abs();
        let deviation = ortho_dev.max(det_dev);
        if deviation > 1e-9 {
            return Err(Se2Error::NotRotation { deviation });
        }
        let angle = rotation[(1, 0)].atan2(rotation[(0, 0)]);
        Ok(Se2 { angle, translation })
    }

    pub fn angle(&self) -> f64 {
        self.angle
    }

    pub fn translation(&self) -> Vector2<f64> {
        self.translation
    }

    pub fn rotation(&self) -> Matrix2<f64> {
        rotation(self.angle)
    }

    pub fn x(&self) -> f64 {
        self.translation.x
    }

    pub fn y(&self) -> f64 {
        self.translation.y
    }

    /// Group composition: `self` applied after `other` (`(self ∘ other)(q) =
    /// self(other(q))`).
    pub fn compose(&self, other: &Se2) -> Se2 {
        Se2 {
            angle: wrap_angle(self.angle + other.angle),
            translation: self.rotation() * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Se2 {
        let inv_rot = rotation(-self.angle);
        Se2 { angle: wrap_angle(-self.angle), translation: -(inv_rot * self.translation) }
    }

    pub fn apply(&self, q: Vector2<f64>) -> Vector2<f64> {
        self.rotation() * q + self.translation
    }
}
