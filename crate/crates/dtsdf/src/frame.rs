//! Input frame preprocessing: outlier removal, edge-preserving smoothing,
//! normal estimation, and coarse-to-fine pyramids.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::geometry::CameraIntrinsics;
use crate::image::{par_image_from_fn, Image, ScalarImage};

/// Spatial/range Gaussian parameters of a bilateral filter.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BilateralParams {
    pub sigma_spatial: f64,
    pub sigma_range: f64,
    pub radius: i64,
}

/// Preprocessing configuration with sensor-calibrated defaults.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct FrameParams {
    /// Neighbor agreement band of the depth outlier filter, meters.
    pub outlier_threshold: f64,
    pub depth_filter: BilateralParams,
    pub normal_filter: BilateralParams,
    pub pyramid_levels: u32,
    /// 2x2 blocks whose depth spread exceeds this are not averaged when
    /// downsampling; the value nearest the camera wins.
    pub pyramid_depth_spread: f64,
}

impl Default for FrameParams {
    fn default() -> Self {
        Self {
            outlier_threshold: 0.05,
            depth_filter: BilateralParams {
                sigma_spatial: 5.0,
                sigma_range: 0.025,
                radius: 5,
            },
            normal_filter: BilateralParams {
                sigma_spatial: 2.5,
                sigma_range: 5.0,
                radius: 5,
            },
            pyramid_levels: 3,
            pyramid_depth_spread: 0.05,
        }
    }
}

/// One pyramid level; level 0 is full resolution.
#[derive(Debug, Clone)]
pub struct PyramidLevel {
    pub depth: ScalarImage,
    pub intensity: ScalarImage,
    pub intrinsics: CameraIntrinsics,
}

/// A preprocessed RGB-D frame.
///
/// Depth is metric with NaN marking invalid pixels; normals are camera-frame
/// unit vectors facing the camera, zero where undefined.
#[derive(Debug, Clone)]
pub struct Frame {
    pub timestamp: f64,
    pub color: Image<[f32; 3]>,
    pub normals: Image<Vector3<f64>>,
    levels: Vec<PyramidLevel>,
}

impl Frame {
    /// Runs the full preprocessing chain on raw sensor images.
    pub fn preprocess(
        depth: ScalarImage,
        color: Image<[f32; 3]>,
        intrinsics: CameraIntrinsics,
        timestamp: f64,
        params: &FrameParams,
    ) -> Self {
        assert_eq!(depth.width(), intrinsics.width);
        assert_eq!(depth.height(), intrinsics.height);
        assert_eq!(color.width(), intrinsics.width);
        assert_eq!(color.height(), intrinsics.height);
        let depth = depth_outlier_filter(&depth, params.outlier_threshold);
        let depth = bilateral_filter_depth(&depth, &params.depth_filter);
        let normals = compute_normals(&depth, &intrinsics);
        let normals = bilateral_filter_normals(&normals, &params.normal_filter);
        let intensity = intensity_from_color(&color);
        let mut levels = vec![PyramidLevel {
            depth,
            intensity,
            intrinsics,
        }];
        for k in 1..params.pyramid_levels {
            let prev = &levels[(k - 1) as usize];
            levels.push(PyramidLevel {
                depth: downsample_depth(&prev.depth, params.pyramid_depth_spread),
                intensity: downsample_intensity(&prev.intensity),
                intrinsics: intrinsics.scaled(k),
            });
        }
        Self {
            timestamp,
            color,
            normals,
            levels,
        }
    }

    pub fn depth(&self) -> &ScalarImage {
        &self.levels[0].depth
    }

    pub fn intensity(&self) -> &ScalarImage {
        &self.levels[0].intensity
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.levels[0].intrinsics
    }

    pub fn level(&self, k: u32) -> &PyramidLevel {
        &self.levels[k as usize]
    }

    pub fn num_levels(&self) -> u32 {
        self.levels.len() as u32
    }

    /// Camera-frame normal at a pixel, `None` where undefined.
    pub fn normal_at(&self, x: u32, y: u32) -> Option<Vector3<f64>> {
        let n = self.normals.get(x, y);
        (n != Vector3::zeros()).then_some(n)
    }

    /// Full-resolution normal associated with a pyramid-level pixel.
    pub fn normal_for_level(&self, level: u32, x: u32, y: u32) -> Option<Vector3<f64>> {
        let fx = (x << level).min(self.normals.width() - 1);
        let fy = (y << level).min(self.normals.height() - 1);
        self.normal_at(fx, fy)
    }
}

/// Drops depth pixels supported by fewer than two of their eight neighbors.
///
/// A neighbor supports the center when its depth differs by at most
/// `threshold`. Border pixels evaluate the neighbors that exist.
pub fn depth_outlier_filter(depth: &ScalarImage, threshold: f64) -> ScalarImage {
    par_image_from_fn(depth.width(), depth.height(), |x, y| {
        let Some(z) = depth.valid_get(x, y) else {
            return f64::NAN;
        };
        let mut support = 0;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                if dx == 0 && dy == 0 {
                    continue;
                }
                if let Some(zn) = depth
                    .try_get(x as i64 + dx, y as i64 + dy)
                    .filter(|v| v.is_finite())
                {
                    if (zn - z).abs() <= threshold {
                        support += 1;
                    }
                }
            }
        }
        if support >= 2 {
            z
        } else {
            f64::NAN
        }
    })
}

/// Edge-preserving bilateral smoothing of a depth map.
///
/// Invalid pixels contribute nothing and stay invalid in the output.
pub fn bilateral_filter_depth(depth: &ScalarImage, params: &BilateralParams) -> ScalarImage {
    let spatial = spatial_kernel(params);
    let inv_2r2 = 0.5 / (params.sigma_range * params.sigma_range);
    par_image_from_fn(depth.width(), depth.height(), |x, y| {
        let Some(z) = depth.valid_get(x, y) else {
            return f64::NAN;
        };
        let mut sum = 0.0;
        let mut weight = 0.0;
        for dy in -params.radius..=params.radius {
            for dx in -params.radius..=params.radius {
                let Some(zn) = depth
                    .try_get(x as i64 + dx, y as i64 + dy)
                    .filter(|v| v.is_finite())
                else {
                    continue;
                };
                let dz = zn - z;
                let w = spatial_at(&spatial, params.radius, dx, dy) * (-dz * dz * inv_2r2).exp();
                sum += w * zn;
                weight += w;
            }
        }
        sum / weight
    })
}

/// Bilateral smoothing of a normal map with renormalization.
///
/// Range distance is the Euclidean distance between unit normals.
pub fn bilateral_filter_normals(
    normals: &Image<Vector3<f64>>,
    params: &BilateralParams,
) -> Image<Vector3<f64>> {
    let spatial = spatial_kernel(params);
    let inv_2r2 = 0.5 / (params.sigma_range * params.sigma_range);
    par_image_from_fn(normals.width(), normals.height(), |x, y| {
        let n = normals.get(x, y);
        if n == Vector3::zeros() {
            return Vector3::zeros();
        }
        let mut sum = Vector3::zeros();
        for dy in -params.radius..=params.radius {
            for dx in -params.radius..=params.radius {
                let Some(nn) = normals.try_get(x as i64 + dx, y as i64 + dy) else {
                    continue;
                };
                if nn == Vector3::zeros() {
                    continue;
                }
                let d2 = (nn - n).norm_squared();
                let w = spatial_at(&spatial, params.radius, dx, dy) * (-d2 * inv_2r2).exp();
                sum += nn * w;
            }
        }
        let norm = sum.norm();
        if norm > 1e-12 {
            sum / norm
        } else {
            Vector3::zeros()
        }
    })
}

/// Camera-frame surface normals from central differences of unprojected
/// depth, oriented toward the camera.
pub fn compute_normals(depth: &ScalarImage, intrinsics: &CameraIntrinsics) -> Image<Vector3<f64>> {
    let point = |x: u32, y: u32| -> Option<Vector3<f64>> {
        let z = depth.valid_get(x, y)?;
        intrinsics.unproject(x as f64, y as f64, z).ok()
    };
    par_image_from_fn(depth.width(), depth.height(), |x, y| {
        if x == 0 || y == 0 || x + 1 >= depth.width() || y + 1 >= depth.height() {
            return Vector3::zeros();
        }
        let (Some(center), Some(px), Some(mx), Some(py), Some(my)) = (
            point(x, y),
            point(x + 1, y),
            point(x - 1, y),
            point(x, y + 1),
            point(x, y - 1),
        ) else {
            return Vector3::zeros();
        };
        let n = (px - mx).cross(&(py - my));
        let norm = n.norm();
        if norm < 1e-12 {
            return Vector3::zeros();
        }
        let n = n / norm;
        // Orient toward the camera: the view ray is the point direction.
        if n.dot(&center) > 0.0 {
            -n
        } else {
            n
        }
    })
}

/// BT.601 luma of an RGB image, in `[0, 1]`.
pub fn intensity_from_color(color: &Image<[f32; 3]>) -> ScalarImage {
    par_image_from_fn(color.width(), color.height(), |x, y| {
        let [r, g, b] = color.get(x, y);
        0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64
    })
}

fn half_extent(v: u32) -> u32 {
    v.div_ceil(2)
}

/// Depth downsampling for pyramid construction.
///
/// Valid values in each 2x2 block are averaged when their spread stays under
/// `max_spread`; blocks straddling a depth edge keep the value nearest the
/// camera instead of inventing mid-air averages.
pub fn downsample_depth(depth: &ScalarImage, max_spread: f64) -> ScalarImage {
    par_image_from_fn(half_extent(depth.width()), half_extent(depth.height()), |x, y| {
        let mut values = [0.0f64; 4];
        let mut count = 0;
        for dy in 0..2u32 {
            for dx in 0..2u32 {
                let (sx, sy) = (2 * x + dx, 2 * y + dy);
                if sx < depth.width() && sy < depth.height() {
                    if let Some(z) = depth.valid_get(sx, sy) {
                        values[count] = z;
                        count += 1;
                    }
                }
            }
        }
        if count == 0 {
            return f64::NAN;
        }
        let values = &values[..count];
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max - min < max_spread {
            values.iter().sum::<f64>() / count as f64
        } else {
            min
        }
    })
}

/// Intensity downsampling by 2x2 averaging.
pub fn downsample_intensity(intensity: &ScalarImage) -> ScalarImage {
    par_image_from_fn(
        half_extent(intensity.width()),
        half_extent(intensity.height()),
        |x, y| {
            let mut sum = 0.0;
            let mut count = 0;
            for dy in 0..2u32 {
                for dx in 0..2u32 {
                    let (sx, sy) = (2 * x + dx, 2 * y + dy);
                    if sx < intensity.width() && sy < intensity.height() {
                        if let Some(v) = intensity.valid_get(sx, sy) {
                            sum += v;
                            count += 1;
                        }
                    }
                }
            }
            if count == 0 {
                f64::NAN
            } else {
                sum / count as f64
            }
        },
    )
}

fn spatial_kernel(params: &BilateralParams) -> Vec<f64> {
    let r = params.radius;
    let inv_2s2 = 0.5 / (params.sigma_spatial * params.sigma_spatial);
    let size = (2 * r + 1) as usize;
    let mut kernel = vec![0.0; size * size];
    for dy in -r..=r {
        for dx in -r..=r {
            kernel[((dy + r) * (2 * r + 1) + dx + r) as usize] =
                (-((dx * dx + dy * dy) as f64) * inv_2s2).exp();
        }
    }
    kernel
}

fn spatial_at(kernel: &[f64], radius: i64, dx: i64, dy: i64) -> f64 {
    kernel[((dy + radius) * (2 * radius + 1) + dx + radius) as usize]
}
