//! Pinhole camera intrinsics, projection, and its derivative.

use nalgebra::{Matrix2x3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::GeometryError;

/// Pinhole intrinsics with the usable depth range of the sensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Closest depth the sensor reports, meters.
    pub z_min: f64,
    /// Farthest depth the sensor reports, meters.
    pub z_max: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            z_min: 0.1,
            z_max: 5.0,
        };
        k.validate();
        k
    }

    pub fn with_depth_range(mut self, z_min: f64, z_max: f64) -> Self {
        self.z_min = z_min;
        self.z_max = z_max;
        self.validate();
        self
    }

    fn validate(&self) {
        assert!(self.fx > 0.0 && self.fy > 0.0, "focal lengths must be positive");
        assert!(
            self.z_min > 0.0 && self.z_min < self.z_max,
            "depth range must satisfy 0 < z_min < z_max"
        );
    }

    /// Projects a camera-frame point to pixel coordinates.
    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if p.z <= 0.0 {
            return Err(GeometryError::NonPositiveDepth);
        }
        Ok(Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Back-projects pixel `(x, y)` at depth `d` into the camera frame.
    ///
    /// Linear in `d`: `unproject(x, y, a*d) == a * unproject(x, y, d)`.
    pub fn unproject(&self, x: f64, y: f64, d: f64) -> Result<Vector3<f64>, GeometryError> {
        if d <= 0.0 {
            return Err(GeometryError::NonPositiveDepth);
        }
        Ok(Vector3::new(
            d * (x - self.cx) / self.fx,
            d * (y - self.cy) / self.fy,
            d,
        ))
    }

    /// Derivative of projection in pixel units, `d(pixel)/d(point)`.
    pub fn pixel_jacobian(&self, p: &Vector3<f64>) -> Matrix2x3<f64> {
        let mut j = projection_jacobian(p);
        j.row_mut(0).scale_mut(self.fx);
        j.row_mut(1).scale_mut(self.fy);
        j
    }

    /// True when the (floating point) pixel supports bilinear sampling.
    pub fn in_bounds(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x <= (self.width - 1) as f64
            && pixel.y <= (self.height - 1) as f64
    }

    /// Intrinsics of pyramid level `level`; all four parameters and the
    /// image size halve per level.
    pub fn scaled(&self, level: u32) -> Self {
        let s = 0.5f64.powi(level as i32);
        Self {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: self.cx * s,
            cy: self.cy * s,
            width: (self.width + (1 << level) - 1) >> level,
            height: (self.height + (1 << level) - 1) >> level,
            z_min: self.z_min,
            z_max: self.z_max,
        }
    }
}

/// Derivative of the normalized projection `(x/z, y/z)` with respect to the
/// 3D point.
pub fn projection_jacobian(p: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        iz, 0.0, -p.x * iz2, //
        0.0, iz, -p.y * iz2,
    )
}
