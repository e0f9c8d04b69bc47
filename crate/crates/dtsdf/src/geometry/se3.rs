//! Rigid body transforms in SE(3).

use nalgebra::{Matrix3, Matrix4, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::{so3_exp, so3_left_jacobian, so3_left_jacobian_inv, so3_log};

/// A rigid body transform: `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Se3 {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Se3 {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds from parts; `rotation` must be orthonormal with determinant 1.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        debug_assert!((rotation.determinant() - 1.0).abs() < 1e-6);
        debug_assert!((rotation * rotation.transpose() - Matrix3::identity()).norm() < 1e-6);
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Exponential map. `xi = (v, w)`: translational coordinates first.
    pub fn exp(xi: &Vector6<f64>) -> Self {
        let v = xi.fixed_rows::<3>(0).into_owned();
        let w = xi.fixed_rows::<3>(3).into_owned();
        Self {
            rotation: so3_exp(&w),
            translation: so3_left_jacobian(&w) * v,
        }
    }

    /// Logarithm map, inverse of [`Se3::exp`] for rotation angles below pi.
    pub fn log(&self) -> Vector6<f64> {
        let w = so3_log(&self.rotation);
        let v = so3_left_jacobian_inv(&w) * self.translation;
        let mut xi = Vector6::zeros();
        xi.fixed_rows_mut::<3>(0).copy_from(&v);
        xi.fixed_rows_mut::<3>(3).copy_from(&w);
        xi
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotates a direction without translating it.
    pub fn rotate(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * d
    }

    /// Geodesic rotation angle in radians, in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        ((self.rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Unit quaternion of the rotation; used at trajectory file boundaries.
    pub fn rotation_quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.rotation)
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: q.to_rotation_matrix().into_inner(),
            translation,
        }
    }

    /// Re-orthonormalizes the rotation; call after long composition chains.
    pub fn renormalized(&self) -> Self {
        let q = UnitQuaternion::from_matrix(&self.rotation);
        Self::from_quaternion(&q, self.translation)
    }
}

impl std::ops::Mul for Se3 {
    type Output = Se3;

    fn mul(self, rhs: Se3) -> Se3 {
        Se3 {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation * rhs.translation + self.translation,
        }
    }
}

impl std::ops::Mul<&Se3> for &Se3 {
    type Output = Se3;

    fn mul(self, rhs: &Se3) -> Se3 {
        *self * *rhs
    }
}
