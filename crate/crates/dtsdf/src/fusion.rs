//! Depth and color integration into the directional volume.
//!
//! Each allocated voxel projects into the current frame and pulls the
//! surface sample of its nearest pixel (voxel projection fusion). Distances
//! are measured against the local surface plane, so oblique geometry is not
//! smeared the way plain projective differences along the ray would.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::frame::Frame;
use crate::geometry::Se3;
use crate::image::ScalarImage;
use crate::tracking::{icp_weight, IcpWeightMode};
use crate::volume::{block_origin_voxel, Direction, DirectionalVolume, Representation};

/// Fusion behavior knobs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionParams {
    /// Saturation value of the per-voxel fusion weight.
    pub max_weight: f64,
    /// Sample weight of free space carving updates.
    pub carve_weight: f64,
    /// Whether observed free space erodes previously fused surfaces.
    pub carve: bool,
    /// Chebyshev pixel radius of the carving depth-discontinuity guard.
    pub carve_guard_radius: i64,
    /// Depth reliability model for the fusion weight.
    pub depth_weight: IcpWeightMode,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            max_weight: 128.0,
            carve_weight: 1.0,
            carve: true,
            carve_guard_radius: 2,
            depth_weight: IcpWeightMode::Proposed,
        }
    }
}

/// Per-frame integration counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionStats {
    /// Voxels updated inside the truncation band.
    pub updated_voxels: usize,
    /// Voxels pushed toward free space by carving.
    pub carved_voxels: usize,
}

/// Membership weight of a direction for a unit surface normal.
///
/// The weight falls linearly with the angle between the normal and the
/// direction's axis: 1 at or below `2 * theta - pi / 2`, 0 at or above
/// `theta`. With the default half-angle of 65 degrees a normal at 45
/// degrees off axis gets weight 0.5.
pub fn direction_weight(normal: &Vector3<f64>, direction: Direction, theta: f64) -> f64 {
    debug_assert!((normal.norm() - 1.0).abs() < 1e-6, "normal must be unit");
    let alpha = normal.dot(&direction.unit()).clamp(-1.0, 1.0).acos();
    ((theta - alpha) / (2.0 * theta - std::f64::consts::FRAC_PI_2)).clamp(0.0, 1.0)
}

/// Membership weights of all six directions, honoring the representation.
///
/// The classical single-field representation maps every normal onto one
/// canonical direction with weight 1.
pub fn direction_memberships(
    normal: &Vector3<f64>,
    theta: f64,
    representation: Representation,
) -> [f64; 6] {
    let mut w = [0.0; 6];
    match representation {
        Representation::Regular => w[Direction::CANONICAL.index()] = 1.0,
        Representation::Dtsdf => {
            for d in Direction::ALL {
                w[d.index()] = direction_weight(normal, d, theta);
            }
        }
    }
    w
}

/// Truncated distance of `x` to the plane through `p` with unit normal `n`,
/// normalized by `tau` and clamped to `[-1, 1]`.
pub fn point_to_plane_sdf(
    p: &Vector3<f64>,
    n: &Vector3<f64>,
    x: &Vector3<f64>,
    tau: f64,
) -> f64 {
    ((p - x).dot(n) / tau).clamp(-1.0, 1.0)
}

/// True when carving at pixel `(px, py)` must be suppressed because some
/// valid pixel in the guard window has depth more than `tau` away from the
/// center depth. Invalid neighbors do not block carving.
pub fn carve_blocked(depth: &ScalarImage, px: i64, py: i64, z: f64, tau: f64, radius: i64) -> bool {
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            if dx == 0 && dy == 0 {
                continue;
            }
            if let Some(zn) = depth.try_get(px + dx, py + dy) {
                if zn.is_nan() {
                    continue;
                }
                if (zn - z).abs() > tau {
                    return true;
                }
            }
        }
    }
    false
}

/// Integrates one posed frame into the volume.
///
/// Every allocated voxel projects into the frame; voxels within one
/// truncation of the pixel's surface plane take a weighted running average
/// update, voxels more than one truncation in front of the surface are
/// carved toward free space, and voxels behind the band are left alone.
pub fn fuse_frame(
    volume: &mut DirectionalVolume,
    frame: &Frame,
    pose: &Se3,
    params: &FusionParams,
) -> FusionStats {
    let voxel_size = volume.voxel_size();
    let tau = volume.truncation();
    let theta = volume.params().theta;
    let representation = volume.representation();
    let pose_inv = pose.inverse();
    let intr = frame.intrinsics().clone();
    let depth = frame.depth();
    let color = &frame.color;

    let (updated_voxels, carved_voxels) = volume
        .blocks_mut()
        .par_iter_mut()
        .map(|(key, block)| {
            let mut updated = 0usize;
            let mut carved = 0usize;
            let origin = block_origin_voxel((key.x, key.y, key.z));
            for k in 0..8u32 {
                for j in 0..8u32 {
                    for i in 0..8u32 {
                        let v = (
                            origin.0 + i as i64,
                            origin.1 + j as i64,
                            origin.2 + k as i64,
                        );
                        let x_world = Vector3::new(
                            (v.0 as f64 + 0.5) * voxel_size,
                            (v.1 as f64 + 0.5) * voxel_size,
                            (v.2 as f64 + 0.5) * voxel_size,
                        );
                        let x_cam = pose_inv.transform(&x_world);
                        if x_cam.z <= 0.0 {
                            continue;
                        }
                        let Ok(uv) = intr.project(&x_cam) else {
                            continue;
                        };
                        let px = uv.x.round() as i64;
                        let py = uv.y.round() as i64;
                        if px < 0
                            || py < 0
                            || px >= depth.width() as i64
                            || py >= depth.height() as i64
                        {
                            continue;
                        }
                        let (ux, uy) = (px as u32, py as u32);
                        let Some(z) = depth.valid_get(ux, uy) else {
                            continue;
                        };
                        let Some(n_cam) = frame.normal_at(ux, uy) else {
                            continue;
                        };
                        let Ok(p_cam) = intr.unproject(px as f64, py as f64, z) else {
                            continue;
                        };
                        // Flip the camera-facing normal so distances come out
                        // positive on the observed side of the surface.
                        let d = point_to_plane_sdf(&p_cam, &(-n_cam), &x_cam, tau);
                        let raw = (p_cam - x_cam).dot(&-n_cam) / tau;
                        if raw < -1.0 {
                            continue;
                        }
                        if raw > 1.0 {
                            // Free space in front of the surface: carve every
                            // direction's voxel, unless the local depth window
                            // shows a discontinuity.
                            if params.carve
                                && !carve_blocked(
                                    depth,
                                    px,
                                    py,
                                    z,
                                    tau,
                                    params.carve_guard_radius,
                                )
                            {
                                let voxel = block.voxel_mut(i, j, k);
                                if voxel.weight > 0.0 {
                                    voxel.integrate(1.0, params.carve_weight, params.max_weight);
                                    carved += 1;
                                }
                            }
                            continue;
                        }
                        let n_world = pose.rotation() * n_cam;
                        let w_dir = direction_memberships(&n_world, theta, representation)
                            [key.direction.index()];
                        if w_dir <= 0.0 {
                            continue;
                        }
                        let ray = p_cam.normalize();
                        let w_angle = (-n_cam.dot(&ray)).max(0.0);
                        let Ok(w_depth) =
                            icp_weight(z, 0.0, params.depth_weight, &intr)
                        else {
                            continue;
                        };
                        let w = w_depth * w_angle * w_dir;
                        if w <= 0.0 {
                            continue;
                        }
                        let voxel = block.voxel_mut(i, j, k);
                        voxel.integrate(d, w, params.max_weight);
                        let proximity = 1.0 - ((p_cam - x_cam).norm() / tau).min(1.0);
                        let w_color = w * proximity;
                        if w_color > 0.0 {
                            let c = color.get(ux, uy);
                            voxel.integrate_color(c, w_color, params.max_weight);
                        }
                        updated += 1;
                    }
                }
            }
            (updated, carved)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));

    FusionStats {
        updated_voxels,
        carved_voxels,
    }
}
