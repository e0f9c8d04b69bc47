//! Rigid and similarity transforms, their exponential maps, and the pinhole
//! camera model.
//!
//! Rotations are carried as orthonormal 3x3 matrices end to end; quaternions
//! appear only at trajectory file boundaries. Tangent vectors order the
//! translational part first: `(v, w)` for [`Se3`] and `(v, w, sigma)` for
//! [`Sim3`].

mod camera;
mod se3;
mod sim3;

pub use camera::CameraIntrinsics;
pub use se3::Se3;
pub use sim3::{point_action_jacobian, Sim3, Sim3PointJacobian, Sim3Tangent};

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

/// Errors produced by camera-space geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum GeometryError {
    /// Projection or unprojection was asked for a point at or behind the
    /// camera plane.
    #[error("depth must be strictly positive")]
    NonPositiveDepth,
}

/// Angle guard below which rotation formulas switch to their Taylor series.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Log-scale guard below which similarity formulas switch to their Taylor
/// series.
pub const SMALL_SCALE: f64 = 1e-8;

/// Skew-symmetric matrix of `v`, so that `wedge(v) * x == v.cross(&x)`.
pub fn wedge(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -v.z, v.y, //
        v.z, 0.0, -v.x, //
        -v.y, v.x, 0.0,
    )
}

/// Inverse of [`wedge`] for skew-symmetric input.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

pub(crate) fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let w = wedge(omega);
    let w2 = w * w;
    if theta < SMALL_ANGLE {
        Matrix3::identity() + w + w2 * 0.5
    } else {
        Matrix3::identity() + w * (theta.sin() / theta)
            + w2 * ((1.0 - theta.cos()) / (theta * theta))
    }
}

pub(crate) fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let anti = vee(&(r - r.transpose())) * 0.5;
    if theta < SMALL_ANGLE {
        // sin(theta)/theta ~ 1 - theta^2/6
        anti * (1.0 + theta * theta / 6.0)
    } else if theta > std::f64::consts::PI - 1e-6 {
        // Near pi the antisymmetric part degenerates; recover the axis from
        // the dominant diagonal of R + I and fix its sign with `anti`.
        let b = r + Matrix3::identity();
        let col = (0..3)
            .max_by(|&a, &c| b[(a, a)].partial_cmp(&b[(c, c)]).unwrap())
            .unwrap();
        let axis = b.column(col).normalize();
        let sign = if axis.dot(&anti) < 0.0 { -1.0 } else { 1.0 };
        axis * (theta * sign)
    } else {
        anti * (theta / theta.sin())
    }
}

/// Left Jacobian of SO(3); maps translational tangent coordinates to the
/// translation column of the SE(3) exponential.
pub(crate) fn so3_left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let w = wedge(omega);
    let w2 = w * w;
    if theta < SMALL_ANGLE {
        Matrix3::identity() + w * 0.5 + w2 / 6.0
    } else {
        let t2 = theta * theta;
        Matrix3::identity()
            + w * ((1.0 - theta.cos()) / t2)
            + w2 * ((theta - theta.sin()) / (t2 * theta))
    }
}

pub(crate) fn so3_left_jacobian_inv(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let w = wedge(omega);
    let w2 = w * w;
    if theta < SMALL_ANGLE {
        Matrix3::identity() - w * 0.5 + w2 / 12.0
    } else {
        let half = theta * 0.5;
        let cot = 1.0 / half.tan();
        Matrix3::identity() - w * 0.5 + w2 * ((1.0 - half * cot) / (theta * theta))
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn wedge_reproduces_cross_product() {
        let v = Vector3::new(0.3, -1.2, 2.5);
        let x = Vector3::new(-0.7, 0.4, 1.1);
        assert_abs_diff_eq!(wedge(&v) * x, v.cross(&x), epsilon = 1e-15);
    }

    #[test]
    fn wedge_is_antisymmetric_and_vee_inverts() {
        let v = Vector3::new(1.0, 2.0, 3.0);
        let w = wedge(&v);
        assert_abs_diff_eq!(w + w.transpose(), Matrix3::zeros(), epsilon = 0.0);
        assert_abs_diff_eq!(vee(&w), v, epsilon = 0.0);
    }
}
