//! Similarity transforms in Sim(3) for joint pose and scale estimation.

use nalgebra::{Matrix3, Matrix4, SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use super::{so3_exp, so3_log, wedge, Se3, SMALL_ANGLE, SMALL_SCALE};

/// Tangent vector of [`Sim3`]: `(v, w, sigma)`.
pub type Sim3Tangent = SMatrix<f64, 7, 1>;

/// Jacobian of a transformed point with respect to a [`Sim3`] tangent.
pub type Sim3PointJacobian = SMatrix<f64, 3, 7>;

/// A similarity transform: `p -> s R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sim3 {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    scale: f64,
}

impl Sim3 {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    /// Builds from parts; `scale` must be strictly positive.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>, scale: f64) -> Self {
        assert!(scale > 0.0, "similarity scale must be positive");
        debug_assert!((rotation.determinant() - 1.0).abs() < 1e-6);
        Self {
            rotation,
            translation,
            scale,
        }
    }

    pub fn from_se3(t: &Se3) -> Self {
        Self {
            rotation: *t.rotation(),
            translation: *t.translation(),
            scale: 1.0,
        }
    }

    /// Drops the scale, keeping the rigid part.
    pub fn se3_part(&self) -> Se3 {
        Se3::new(self.rotation, self.translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Top-left 3x3 block of the homogeneous matrix: the scaled rotation.
    pub fn scaled_rotation(&self) -> Matrix3<f64> {
        self.rotation * self.scale
    }

    /// Exponential map. `xi = (v, w, sigma)`; the translation column is
    /// `W(w, sigma) v` with the similarity-aware left Jacobian `W`.
    pub fn exp(xi: &Sim3Tangent) -> Self {
        let v = xi.fixed_rows::<3>(0).into_owned();
        let w = xi.fixed_rows::<3>(3).into_owned();
        let sigma = xi[6];
        Self {
            rotation: so3_exp(&w),
            translation: calc_w(&w, sigma) * v,
            scale: sigma.exp(),
        }
    }

    /// Logarithm map, inverse of [`Sim3::exp`] for rotation angles below pi.
    pub fn log(&self) -> Sim3Tangent {
        let w = so3_log(&self.rotation);
        let sigma = self.scale.ln();
        let v = calc_w(&w, sigma)
            .try_inverse()
            .expect("similarity left Jacobian is invertible for angle < pi")
            * self.translation;
        let mut xi = Sim3Tangent::zeros();
        xi.fixed_rows_mut::<3>(0).copy_from(&v);
        xi.fixed_rows_mut::<3>(3).copy_from(&w);
        xi[6] = sigma;
        xi
    }

    pub fn inverse(&self) -> Self {
        let s_inv = 1.0 / self.scale;
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation) * s_inv,
            scale: s_inv,
        }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * (p * self.scale) + self.translation
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.scaled_rotation());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

impl std::ops::Mul for Sim3 {
    type Output = Sim3;

    fn mul(self, rhs: Sim3) -> Sim3 {
        Sim3 {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation * rhs.translation * self.scale + self.translation,
            scale: self.scale * rhs.scale,
        }
    }
}

/// Derivative of `a * exp(xi) * d * p` with respect to `xi` at `xi = 0`.
///
/// Columns: translation, rotation, scale. With `y = d * p` this is the
/// scaled rotation of `a` times `[I | -wedge(y) | y]`.
pub fn point_action_jacobian(a: &Sim3, d: &Sim3, p: &Vector3<f64>) -> Sim3PointJacobian {
    let y = d.transform(p);
    let ra = a.scaled_rotation();
    let mut j = Sim3PointJacobian::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&ra);
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(ra * (-wedge(&y))));
    j.fixed_view_mut::<3, 1>(0, 6).copy_from(&(ra * y));
    j
}

/// Translation factor of the Sim(3) exponential: the matrix `W` with
/// `t = W v`. Reduces to the SO(3) left Jacobian at `sigma = 0`.
fn calc_w(omega: &Vector3<f64>, sigma: f64) -> Matrix3<f64> {
    let theta = omega.norm();
    let w = wedge(omega);
    let w2 = w * w;
    let scale = sigma.exp();
    // exp_m1 keeps C exact through the small-sigma regime.
    let c = if sigma == 0.0 { 1.0 } else { sigma.exp_m1() / sigma };
    let (a, b);
    if theta < SMALL_ANGLE {
        if sigma.abs() < SMALL_SCALE {
            a = 0.5 + sigma / 3.0;
            b = 1.0 / 6.0 + sigma / 8.0;
        } else {
            let s2 = sigma * sigma;
            a = ((sigma - 1.0) * scale + 1.0) / s2;
            b = (scale * (0.5 * s2 - sigma + 1.0) - 1.0) / (s2 * sigma);
        }
    } else {
        let t2 = theta * theta;
        let (sin, cos) = theta.sin_cos();
        if sigma.abs() < SMALL_SCALE {
            a = (1.0 - cos) / t2 + sigma * (sin - theta * cos) / (t2 * theta);
            b = (theta - sin) / (t2 * theta)
                + sigma * (0.5 * t2 + 1.0 - cos - theta * sin) / (t2 * t2);
        } else {
            let (esin, ecos) = (scale * sin, scale * cos);
            let denom = t2 + sigma * sigma;
            a = (esin * sigma + (1.0 - ecos) * theta) / (theta * denom);
            b = (c - ((ecos - 1.0) * sigma + esin * theta) / denom) / t2;
        }
    }
    Matrix3::identity() * c + w * a + w2 * b
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::test_oracle::{central_difference, expm};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn sim3_generator(xi: &Sim3Tangent) -> Matrix4<f64> {
        let mut g = Matrix4::zeros();
        let rot = wedge(&xi.fixed_rows::<3>(3).into_owned()) + Matrix3::identity() * xi[6];
        g.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        g.fixed_view_mut::<3, 1>(0, 3)
            .copy_from(&xi.fixed_rows::<3>(0).into_owned());
        g
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let t = Sim3::exp(&Sim3Tangent::zeros());
        assert_eq!(t.scale(), 1.0);
        assert_eq!(t.translation(), &Vector3::zeros());
        assert_eq!(t.rotation(), &Matrix3::identity());
    }

    #[test]
    fn pure_log_scale_exponentiates() {
        let mut xi = Sim3Tangent::zeros();
        xi[6] = 0.3;
        let t = Sim3::exp(&xi);
        assert_abs_diff_eq!(t.scale(), 0.3f64.exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(*t.translation(), Vector3::zeros(), epsilon = 0.0);
    }

    #[test]
    fn exp_matches_matrix_exponential_oracle() {
        let cases = [
            Sim3Tangent::from_column_slice(&[0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.25]),
            Sim3Tangent::from_column_slice(&[1.0, 2.0, -3.0, 0.0, 0.0, 2.9, -0.4]),
            Sim3Tangent::from_column_slice(&[-0.4, 0.0, 0.2, 1e-9, -2e-9, 1e-9, 0.5]),
            Sim3Tangent::from_column_slice(&[0.7, -0.1, 0.0, 0.8, 0.3, -0.2, 1e-10]),
            Sim3Tangent::from_column_slice(&[0.7, -0.1, 0.0, 2e-9, 1e-9, -2e-9, -3e-9]),
            Sim3Tangent::from_column_slice(&[2.0, -1.0, 0.5, 1.2, -0.4, 0.9, 8e-9]),
            Sim3Tangent::from_column_slice(&[2.0, -1.0, 0.5, 6e-9, -4e-9, 5e-9, 0.7]),
        ];
        for xi in cases {
            let got = Sim3::exp(&xi).to_matrix();
            let want = expm(&sim3_generator(&xi));
            assert_abs_diff_eq!(got, want, epsilon = 1e-9);
        }
    }

    #[test]
    fn point_action_jacobian_at_identity_is_canonical() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        let j = point_action_jacobian(&Sim3::identity(), &Sim3::identity(), &p);
        let mut want = Sim3PointJacobian::zeros();
        want.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
        want.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-wedge(&p)));
        want.fixed_view_mut::<3, 1>(0, 6).copy_from(&p);
        assert_abs_diff_eq!(j, want, epsilon = 0.0);
    }

    #[test]
    fn point_action_jacobian_matches_finite_differences() {
        let a = Sim3::exp(&Sim3Tangent::from_column_slice(&[
            0.2, -0.4, 0.8, 0.3, -0.6, 0.1, 0.2,
        ]));
        let d = Sim3::exp(&Sim3Tangent::from_column_slice(&[
            -0.5, 0.3, 0.1, -0.2, 0.4, 0.7, -0.3,
        ]));
        let p = Vector3::new(0.8, -1.1, 2.4);
        let j = point_action_jacobian(&a, &d, &p);
        let fd = central_difference(
            |xi| a.transform(&Sim3::exp(xi).transform(&d.transform(&p))),
            &Sim3Tangent::zeros(),
            1e-6,
        );
        let rel = (j - fd).norm() / fd.norm();
        assert!(rel < 1e-4, "relative error {rel}");
    }

    proptest! {
        #[test]
        fn exp_log_round_trip(
            v in proptest::array::uniform3(-5.0f64..5.0),
            axis in proptest::array::uniform3(-1.0f64..1.0),
            angle in 0.0f64..3.0,
            sigma in -0.6f64..0.6,
        ) {
            let axis = Vector3::from(axis);
            prop_assume!(axis.norm() > 1e-3);
            let w = axis.normalize() * angle;
            let xi = Sim3Tangent::from_column_slice(&[v[0], v[1], v[2], w.x, w.y, w.z, sigma]);
            let t = Sim3::exp(&xi);
            let back = Sim3::exp(&t.log());
            prop_assert!((back.to_matrix() - t.to_matrix()).norm() < 1e-9);
        }

        #[test]
        fn inverse_round_trips(
            xi in proptest::array::uniform7(-1.0f64..1.0),
        ) {
            let t = Sim3::exp(&Sim3Tangent::from(xi));
            let eye = t * t.inverse();
            prop_assert!((eye.to_matrix() - Matrix4::identity()).norm() < 1e-12);
        }

        #[test]
        fn transform_matches_matrix_action(
            xi in proptest::array::uniform7(-1.0f64..1.0),
            p in proptest::array::uniform3(-5.0f64..5.0),
        ) {
            let t = Sim3::exp(&Sim3Tangent::from(xi));
            let p = Vector3::from(p);
            let hom = t.to_matrix() * p.push(1.0);
            prop_assert!((t.transform(&p) - hom.fixed_rows::<3>(0)).norm() < 1e-12);
        }
    }
}
