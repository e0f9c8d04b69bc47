//! View-dependent combination of the directional fields into a single
//! renderable distance field, and per-pixel raycasting.
//!
//! A camera never needs surfaces it sees from behind, so for a fixed
//! viewpoint the six directional fields collapse into one conflict-free
//! field. The default path blends directions by gradient agreement and view
//! angle; an exact free-space decision procedure is available behind an
//! option for offline use.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::Frame;
use crate::fusion::direction_weight;
use crate::geometry::{CameraIntrinsics, Se3};
use crate::image::{Image, ScalarImage};
use crate::volume::{
    block_origin_voxel, split_coord, BlockLocation, Direction, DirectionalVolume,
    DeterministicState, PaddedBlock, Representation, VoxelBlock, BLOCK_EDGE, BLOCK_VOLUME,
};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("image io: {0}")]
    Image(#[from] image::ImageError),
}

/// One voxel of the combined field.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CombinedVoxel {
    pub sdf: f32,
    /// Total combination weight; 0 marks an empty voxel.
    pub weight: f32,
    pub color: [f32; 3],
    /// Bitmask of directions that contributed.
    pub mask: u8,
}

/// An 8x8x8 brick of combined voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedBlock {
    voxels: Box<[CombinedVoxel; BLOCK_VOLUME]>,
}

impl CombinedBlock {
    fn new() -> Self {
        Self {
            voxels: vec![CombinedVoxel::default(); BLOCK_VOLUME]
                .into_boxed_slice()
                .try_into()
                .unwrap(),
        }
    }

    pub fn voxel(&self, i: u32, j: u32, k: u32) -> &CombinedVoxel {
        &self.voxels[VoxelBlock::flat(i, j, k)]
    }

    pub fn voxels(&self) -> &[CombinedVoxel; BLOCK_VOLUME] {
        &self.voxels
    }
}

/// View-dependent single field, valid for raycasting from poses near its
/// source pose.
pub struct CombinedTsdf {
    blocks: HashMap<BlockLocation, CombinedBlock, DeterministicState>,
    pub source_pose: Se3,
    pub source_frame_index: usize,
    /// Frustum expansion as a fraction of the image size.
    pub frustum_margin: f64,
    voxel_size: f64,
    truncation: f64,
}

impl CombinedTsdf {
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &HashMap<BlockLocation, CombinedBlock, DeterministicState> {
        &self.blocks
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    pub fn voxel_at(&self, v: (i64, i64, i64)) -> Option<&CombinedVoxel> {
        let (bx, i) = split_coord(v.0);
        let (by, j) = split_coord(v.1);
        let (bz, k) = split_coord(v.2);
        self.blocks
            .get(&(bx, by, bz))
            .map(|b| b.voxel(i, j, k))
    }

    /// Validity-renormalized trilinear interpolation of the combined
    /// distance; also returns the interpolated weight.
    pub fn sample(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        let (base, weights) = crate::volume::trilinear_support(p, self.voxel_size);
        let mut sdf = 0.0;
        let mut w = 0.0;
        let mut tri = 0.0;
        for (offset, tw) in weights {
            if tw == 0.0 {
                continue;
            }
            let v = (base.0 + offset.0, base.1 + offset.1, base.2 + offset.2);
            let Some(voxel) = self.voxel_at(v) else {
                continue;
            };
            if voxel.weight > 0.0 {
                sdf += tw * voxel.sdf as f64;
                w += tw * voxel.weight as f64;
                tri += tw;
            }
        }
        if tri < 1e-12 {
            None
        } else {
            Some((sdf / tri, w / tri))
        }
    }

    /// Trilinear color and the union of contributing-direction masks over
    /// the valid support voxels.
    pub fn color_and_mask(&self, p: &Vector3<f64>) -> Option<([f32; 3], u8)> {
        let (base, weights) = crate::volume::trilinear_support(p, self.voxel_size);
        let mut color = [0.0f64; 3];
        let mut tri = 0.0;
        let mut mask = 0u8;
        for (offset, tw) in weights {
            if tw == 0.0 {
                continue;
            }
            let v = (base.0 + offset.0, base.1 + offset.1, base.2 + offset.2);
            let Some(voxel) = self.voxel_at(v) else {
                continue;
            };
            if voxel.weight > 0.0 {
                for c in 0..3 {
                    color[c] += tw * voxel.color[c] as f64;
                }
                tri += tw;
                mask |= voxel.mask;
            }
        }
        if tri < 1e-12 {
            None
        } else {
            Some((
                [
                    (color[0] / tri) as f32,
                    (color[1] / tri) as f32,
                    (color[2] / tri) as f32,
                ],
                mask,
            ))
        }
    }

    /// Normalized gradient of the interpolated combined field.
    pub fn gradient(&self, p: &Vector3<f64>) -> Option<Vector3<f64>> {
        let h = self.voxel_size;
        let mut g = Vector3::zeros();
        for axis in 0..3 {
            let mut hi = *p;
            let mut lo = *p;
            hi[axis] += h;
            lo[axis] -= h;
            g[axis] = self.sample(&hi)?.0 - self.sample(&lo)?.0;
        }
        let norm = g.norm();
        if norm < 1e-9 {
            None
        } else {
            Some(g / norm)
        }
    }
}

/// When the combined field must be rebuilt.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct CombinePolicy {
    pub boot_frames: usize,
    pub stale_frames: usize,
    /// Meters.
    pub translation_threshold: f64,
    /// Radians.
    pub rotation_threshold: f64,
}

impl Default for CombinePolicy {
    fn default() -> Self {
        Self {
            boot_frames: 5,
            stale_frames: 50,
            translation_threshold: 0.05,
            rotation_threshold: 0.05 * std::f64::consts::FRAC_PI_2,
        }
    }
}

/// True when any rebuild criterion fires: early frames, stale field, or
/// the camera moved or turned past the thresholds since the last rebuild.
pub fn should_recombine(
    policy: &CombinePolicy,
    frame_index: usize,
    last_combine_index: usize,
    pose: &Se3,
    last_pose: &Se3,
) -> bool {
    if frame_index < policy.boot_frames {
        return true;
    }
    if frame_index - last_combine_index > policy.stale_frames {
        return true;
    }
    if (pose.translation() - last_pose.translation()).norm() > policy.translation_threshold {
        return true;
    }
    let relative = pose.inverse() * *last_pose;
    relative.rotation_angle() > policy.rotation_threshold
}

/// Gradient-and-view-angle combination weight of one direction at the voxel
/// containing `p`, evaluated on stored voxel values only.
///
/// Zero when the voxel is unobserved, its six-neighbor gradient is absent or
/// degenerate, the gradient does not belong to the direction, or the surface
/// faces away from the camera.
pub fn combine_weight(
    volume: &DirectionalVolume,
    direction: Direction,
    p: &Vector3<f64>,
    camera_center: &Vector3<f64>,
) -> f64 {
    let vs = volume.voxel_size();
    let g = p / vs - Vector3::repeat(0.5);
    let v = (
        g.x.round() as i64,
        g.y.round() as i64,
        g.z.round() as i64,
    );
    let Some(voxel) = volume.voxel_at(direction, v) else {
        return 0.0;
    };
    if voxel.weight <= 0.0 {
        return 0.0;
    }
    if volume.representation() == Representation::Regular {
        // The classical baseline has nothing to arbitrate; pass the stored
        // weight through.
        return voxel.weight as f64;
    }
    let mut grad = Vector3::zeros();
    for axis in 0..3 {
        let mut hi = v;
        let mut lo = v;
        match axis {
            0 => {
                hi.0 += 1;
                lo.0 -= 1;
            }
            1 => {
                hi.1 += 1;
                lo.1 -= 1;
            }
            _ => {
                hi.2 += 1;
                lo.2 -= 1;
            }
        }
        let (Some(a), Some(b)) = (volume.voxel_at(direction, hi), volume.voxel_at(direction, lo))
        else {
            return 0.0;
        };
        if a.weight <= 0.0 || b.weight <= 0.0 {
            return 0.0;
        }
        grad[axis] = (a.sdf - b.sdf) as f64;
    }
    let norm = grad.norm();
    if norm < 1e-9 {
        return 0.0;
    }
    let n = grad / norm;
    let r = p - camera_center;
    let rn = r.norm();
    if rn < 1e-9 {
        return 0.0;
    }
    let r = r / rn;
    let w_dir = direction_weight(&n, direction, volume.params().theta);
    let cos = (-r).dot(&n).max(0.0);
    w_dir * cos * voxel.weight as f64
}

/// Fallback combination weight when no direction has a usable gradient:
/// substitutes the direction's axis for the missing surface normal.
pub fn combine_weight_nograd(
    volume: &DirectionalVolume,
    direction: Direction,
    p: &Vector3<f64>,
    camera_center: &Vector3<f64>,
) -> f64 {
    let vs = volume.voxel_size();
    let g = p / vs - Vector3::repeat(0.5);
    let v = (
        g.x.round() as i64,
        g.y.round() as i64,
        g.z.round() as i64,
    );
    let Some(voxel) = volume.voxel_at(direction, v) else {
        return 0.0;
    };
    if voxel.weight <= 0.0 {
        return 0.0;
    }
    let r = p - camera_center;
    let rn = r.norm();
    if rn < 1e-9 {
        return 0.0;
    }
    let r = r / rn;
    let cos = (-r).dot(&direction.unit()).max(0.0);
    voxel.weight as f64 * cos
}

/// Conservative test whether a block's bounding box can intersect the
/// camera frustum expanded by `margin` of the image size.
fn block_in_frustum(
    loc: BlockLocation,
    voxel_size: f64,
    pose_inv: &Se3,
    k: &CameraIntrinsics,
    margin: f64,
) -> bool {
    let edge = voxel_size * BLOCK_EDGE as f64;
    let base = Vector3::new(loc.0 as f64, loc.1 as f64, loc.2 as f64) * edge;
    let mut corners = [Vector3::zeros(); 8];
    for (c, corner) in corners.iter_mut().enumerate() {
        let offset = Vector3::new(
            (c & 1) as f64 * edge,
            ((c >> 1) & 1) as f64 * edge,
            ((c >> 2) & 1) as f64 * edge,
        );
        *corner = pose_inv.transform(&(base + offset));
    }
    let mx = margin * k.width as f64;
    let my = margin * k.height as f64;
    // Half-space functions that are all nonnegative inside the expanded
    // frustum; the block is culled when some half-space excludes every
    // corner.
    let planes: [&dyn Fn(&Vector3<f64>) -> f64; 6] = [
        &|p| p.z,
        &|p| k.z_max - p.z,
        &|p| k.fx * p.x + (k.cx + mx) * p.z,
        &|p| -k.fx * p.x + (k.width as f64 - 1.0 + mx - k.cx) * p.z,
        &|p| k.fy * p.y + (k.cy + my) * p.z,
        &|p| -k.fy * p.y + (k.height as f64 - 1.0 + my - k.cy) * p.z,
    ];
    for plane in planes {
        if corners.iter().all(|c| plane(c) < 0.0) {
            return false;
        }
    }
    true
}

/// Builds the view-dependent combined field for every allocated block
/// location inside the (margin-expanded) frustum of `pose`.
///
/// Per voxel, direction gradients come from stored six-neighbor voxel
/// values only. Directions blend by gradient membership, view angle, and
/// fusion weight; when no direction at a voxel has a gradient at all, the
/// axis-for-gradient fallback keeps observed free space renderable.
pub fn build_combined(
    volume: &DirectionalVolume,
    pose: &Se3,
    intrinsics: &CameraIntrinsics,
    frame_index: usize,
) -> CombinedTsdf {
    let margin = 1.0 / 8.0;
    let voxel_size = volume.voxel_size();
    let theta = volume.params().theta;
    let pose_inv = pose.inverse();
    let camera = *pose.translation();
    let regular = volume.representation() == Representation::Regular;

    let locations: Vec<BlockLocation> = volume
        .block_locations()
        .into_iter()
        .filter(|&loc| block_in_frustum(loc, voxel_size, &pose_inv, intrinsics, margin))
        .collect();

    let built: Vec<(BlockLocation, CombinedBlock)> = locations
        .par_iter()
        .filter_map(|&loc| {
            let mut out = CombinedBlock::new();
            let mut any = false;
            let origin = block_origin_voxel(loc);
            if regular {
                let key = crate::volume::BlockKey {
                    x: loc.0,
                    y: loc.1,
                    z: loc.2,
                    direction: Direction::CANONICAL,
                };
                let block = volume.block(&key)?;
                for idx in 0..BLOCK_VOLUME {
                    let v = block.voxels()[idx];
                    if v.weight > 0.0 {
                        out.voxels[idx] = CombinedVoxel {
                            sdf: v.sdf,
                            weight: v.weight,
                            color: v.color,
                            mask: Direction::CANONICAL.bit(),
                        };
                        any = true;
                    }
                }
                return if any { Some((loc, out)) } else { None };
            }

            // Gather the fields of every direction present at this location,
            // padded by one voxel so gradients never need hash lookups.
            let mut fields: Vec<(Direction, PaddedBlock, &VoxelBlock)> = Vec::new();
            for d in Direction::ALL {
                let key = crate::volume::BlockKey {
                    x: loc.0,
                    y: loc.1,
                    z: loc.2,
                    direction: d,
                };
                if let Some(block) = volume.block(&key) {
                    let mut padded = PaddedBlock::new();
                    volume.fill_padded(d, loc, &mut padded);
                    fields.push((d, padded, block));
                }
            }
            if fields.is_empty() {
                return None;
            }
            for k in 0..BLOCK_EDGE {
                for j in 0..BLOCK_EDGE {
                    for i in 0..BLOCK_EDGE {
                        let center = Vector3::new(
                            ((origin.0 + i) as f64 + 0.5) * voxel_size,
                            ((origin.1 + j) as f64 + 0.5) * voxel_size,
                            ((origin.2 + k) as f64 + 0.5) * voxel_size,
                        );
                        let r = center - camera;
                        let rn = r.norm();
                        if rn < 1e-9 {
                            continue;
                        }
                        let r = r / rn;
                        let mut sum_w = 0.0;
                        let mut sum_sdf = 0.0;
                        let mut mask = 0u8;
                        let mut color = [0.0f64; 3];
                        let mut color_w = 0.0;
                        let mut any_gradient = false;
                        let mut fb_w = 0.0;
                        let mut fb_sdf = 0.0;
                        let mut fb_mask = 0u8;
                        let mut fb_color = [0.0f64; 3];
                        let mut fb_color_w = 0.0;
                        for (d, padded, block) in &fields {
                            let w_d = padded.weight(i, j, k) as f64;
                            if w_d <= 0.0 {
                                continue;
                            }
                            let sdf_d = padded.sdf(i, j, k) as f64;
                            let grad = gradient_from_padded(padded, i, j, k);
                            let voxel = block.voxel(i as u32, j as u32, k as u32);
                            match grad {
                                Some(n) => {
                                    any_gradient = true;
                                    let w = direction_weight(&n, *d, theta)
                                        * (-r).dot(&n).max(0.0)
                                        * w_d;
                                    if w > 0.0 {
                                        sum_w += w;
                                        sum_sdf += w * sdf_d;
                                        mask |= d.bit();
                                        let cw = w * voxel.color_weight as f64;
                                        if cw > 0.0 {
                                            for c in 0..3 {
                                                color[c] += cw * voxel.color[c] as f64;
                                            }
                                            color_w += cw;
                                        }
                                    }
                                }
                                None => {
                                    let w = w_d * (-r).dot(&d.unit()).max(0.0);
                                    if w > 0.0 {
                                        fb_w += w;
                                        fb_sdf += w * sdf_d;
                                        fb_mask |= d.bit();
                                        let cw = w * voxel.color_weight as f64;
                                        if cw > 0.0 {
                                            for c in 0..3 {
                                                fb_color[c] += cw * voxel.color[c] as f64;
                                            }
                                            fb_color_w += cw;
                                        }
                                    }
                                }
                            }
                        }
                        let (w_total, sdf, mask, color, color_w) = if sum_w > 0.0 {
                            (sum_w, sum_sdf / sum_w, mask, color, color_w)
                        } else if !any_gradient && fb_w > 0.0 {
                            (fb_w, fb_sdf / fb_w, fb_mask, fb_color, fb_color_w)
                        } else {
                            continue;
                        };
                        let out_color = if color_w > 0.0 {
                            [
                                (color[0] / color_w) as f32,
                                (color[1] / color_w) as f32,
                                (color[2] / color_w) as f32,
                            ]
                        } else {
                            [0.0; 3]
                        };
                        out.voxels[VoxelBlock::flat(i as u32, j as u32, k as u32)] =
                            CombinedVoxel {
                                sdf: sdf as f32,
                                weight: w_total as f32,
                                color: out_color,
                                mask,
                            };
                        any = true;
                    }
                }
            }
            if any {
                Some((loc, out))
            } else {
                None
            }
        })
        .collect();

    let mut blocks: HashMap<BlockLocation, CombinedBlock, DeterministicState> = HashMap::default();
    for (loc, block) in built {
        blocks.insert(loc, block);
    }
    CombinedTsdf {
        blocks,
        source_pose: *pose,
        source_frame_index: frame_index,
        frustum_margin: margin,
        voxel_size,
        truncation: volume.truncation(),
    }
}

/// Six-neighbor gradient from a padded field; `None` unless all six
/// neighbors are observed and the difference is nondegenerate.
fn gradient_from_padded(padded: &PaddedBlock, i: i64, j: i64, k: i64) -> Option<Vector3<f64>> {
    if !(padded.observed(i + 1, j, k)
        && padded.observed(i - 1, j, k)
        && padded.observed(i, j + 1, k)
        && padded.observed(i, j - 1, k)
        && padded.observed(i, j, k + 1)
        && padded.observed(i, j, k - 1))
    {
        return None;
    }
    let g = Vector3::new(
        (padded.sdf(i + 1, j, k) - padded.sdf(i - 1, j, k)) as f64,
        (padded.sdf(i, j + 1, k) - padded.sdf(i, j - 1, k)) as f64,
        (padded.sdf(i, j, k + 1) - padded.sdf(i, j, k - 1)) as f64,
    );
    let norm = g.norm();
    if norm < 1e-9 {
        None
    } else {
        Some(g / norm)
    }
}

/// Options of the exact free-space decision procedure.
#[derive(Debug, Clone, Copy)]
pub struct ExactLookupParams {
    /// Entries below this fusion weight cannot declare free space.
    pub weight_floor: f64,
    /// March step of the back-raycast, meters.
    pub step: f64,
    /// Distance (meters) within which opposing signs blend instead of the
    /// free-space value winning outright.
    pub near_surface_band: f64,
}

impl ExactLookupParams {
    pub fn for_volume(volume: &DirectionalVolume) -> Self {
        Self {
            weight_floor: 2.0,
            step: 0.5 * volume.voxel_size(),
            near_surface_band: volume.voxel_size(),
        }
    }
}

/// Result of the exact per-point combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactLookup {
    pub freespace: bool,
    pub sdf: Option<f64>,
}

/// Decides free versus occupied space at `p` for a camera at
/// `camera_center` by back-raycasting to the first zero transition and
/// checking it against visible occupied space of the other directions, then
/// combines the eligible directions as a fusion-weighted sum.
pub fn exact_combined_lookup(
    volume: &DirectionalVolume,
    p: &Vector3<f64>,
    camera_center: &Vector3<f64>,
    params: &ExactLookupParams,
) -> ExactLookup {
    let to_p = p - camera_center;
    let dist = to_p.norm();
    if dist < 1e-9 {
        return ExactLookup {
            freespace: false,
            sdf: None,
        };
    }
    let r = to_p / dist;
    let theta = volume.params().theta;

    // A direction's information at a point is ignored when its gradient
    // exists but does not belong to the direction.
    let eligible = |d: Direction, at: &Vector3<f64>| -> bool {
        match volume.sdf_gradient(d, at) {
            Some(n) => direction_weight(&n, d, theta) > 0.0,
            None => true,
        }
    };

    let mut freespace = false;
    for d in Direction::ALL {
        let Some(s) = volume.sample(d, p) else {
            continue;
        };
        if s.sdf <= 0.0 || s.weight < params.weight_floor || !eligible(d, p) {
            continue;
        }
        // Back-raycast from p toward the camera for the first zero
        // transition of this direction's field.
        let mut q = None;
        let mut prev: Option<(f64, f64)> = Some((0.0, s.sdf));
        let mut t = params.step;
        while t < dist {
            let at = p - r * t;
            match volume.sample(d, &at) {
                Some(sample) => {
                    if sample.sdf < 0.0 {
                        if let Some((t0, s0)) = prev {
                            let frac = s0 / (s0 - sample.sdf);
                            q = Some(p - r * (t0 + (t - t0) * frac));
                        } else {
                            q = Some(p - r * t);
                        }
                        break;
                    }
                    prev = Some((t, sample.sdf));
                }
                None => prev = None,
            }
            t += params.step;
        }
        match q {
            None => {
                freespace = true;
            }
            Some(q) => {
                let conflict = Direction::ALL.iter().any(|&dd| {
                    let Some(sq) = volume.sample(dd, &q) else {
                        return false;
                    };
                    if sq.sdf >= 0.0 {
                        return false;
                    }
                    let Some(n) = volume.sdf_gradient(dd, &q) else {
                        return false;
                    };
                    direction_weight(&n, dd, theta) > 0.0 && n.dot(&-r) > 0.0
                });
                if !conflict {
                    freespace = true;
                }
            }
        }
        if freespace {
            break;
        }
    }

    // Weighted sum over the sign class; near the surface opposing signs
    // blend so a barely-negative direction mapping the same surface is not
    // discarded.
    let tau = volume.truncation();
    let mut sum = 0.0;
    let mut sum_w = 0.0;
    for d in Direction::ALL {
        let Some(s) = volume.sample(d, p) else {
            continue;
        };
        if !eligible(d, p) {
            continue;
        }
        let matches_class = if freespace { s.sdf >= 0.0 } else { s.sdf < 0.0 };
        let near_surface = s.sdf.abs() * tau <= params.near_surface_band;
        if matches_class || near_surface {
            sum += s.weight * s.sdf;
            sum_w += s.weight;
        }
    }
    ExactLookup {
        freespace,
        sdf: if sum_w > 0.0 { Some(sum / sum_w) } else { None },
    }
}

/// Per-pixel output of a raycast, plus the pose and intrinsics it was
/// rendered with. Pixels with a zero direction mask are invalid.
pub struct RenderedView {
    pub points: Image<Vector3<f64>>,
    pub normals: Image<Vector3<f64>>,
    pub colors: Image<[f32; 3]>,
    pub direction_mask: Image<u8>,
    /// Camera-frame depth, NaN where invalid.
    pub depth: ScalarImage,
    pub pose: Se3,
    pub intrinsics: CameraIntrinsics,
}

impl RenderedView {
    pub fn width(&self) -> u32 {
        self.direction_mask.width()
    }

    pub fn height(&self) -> u32 {
        self.direction_mask.height()
    }

    pub fn is_valid(&self, x: u32, y: u32) -> bool {
        self.direction_mask.get(x, y) != 0
    }

    pub fn valid_count(&self) -> usize {
        self.direction_mask.data().iter().filter(|&&m| m != 0).count()
    }

    /// Builds a view directly from a frame's own measurements; used as the
    /// alignment reference before a model exists and by frame-to-frame
    /// photometric tracking.
    pub fn from_frame(frame: &Frame, pose: &Se3) -> Self {
        let k = *frame.intrinsics();
        let depth_in = frame.depth();
        let (w, h) = (k.width, k.height);
        let mut points = Image::from_fill(w, h, Vector3::zeros());
        let mut normals = Image::from_fill(w, h, Vector3::zeros());
        let mut colors = Image::from_fill(w, h, [0.0f32; 3]);
        let mut mask = Image::from_fill(w, h, 0u8);
        let mut depth = ScalarImage::invalid(w, h);
        for y in 0..h {
            for x in 0..w {
                let Some(z) = depth_in.valid_get(x, y) else {
                    continue;
                };
                let Some(n_cam) = frame.normal_at(x, y) else {
                    continue;
                };
                let Ok(p_cam) = k.unproject(x as f64, y as f64, z) else {
                    continue;
                };
                points.set(x, y, pose.transform(&p_cam));
                normals.set(x, y, pose.rotate(&n_cam));
                colors.set(x, y, frame.color.get(x, y));
                mask.set(x, y, Direction::CANONICAL.bit());
                depth.set(x, y, z);
            }
        }
        Self {
            points,
            normals,
            colors,
            direction_mask: mask,
            depth,
            pose: *pose,
            intrinsics: k,
        }
    }

    /// Writes depth as 16-bit grayscale PNG with 1 unit = 0.2 mm; invalid
    /// pixels are 0.
    pub fn save_depth_png(&self, path: &Path) -> Result<(), RenderError> {
        let (w, h) = (self.width(), self.height());
        let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let v = match self.depth.valid_get(x, y) {
                    Some(z) => (z * 5000.0).round().clamp(0.0, 65535.0) as u16,
                    None => 0,
                };
                img.put_pixel(x, y, image::Luma([v]));
            }
        }
        img.save(path)?;
        Ok(())
    }

    /// Writes normals as 8-bit RGB, components mapped from [-1, 1].
    pub fn save_normals_png(&self, path: &Path) -> Result<(), RenderError> {
        let (w, h) = (self.width(), self.height());
        let mut img = image::ImageBuffer::<image::Rgb<u8>, Vec<u8>>::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let n = self.normals.get(x, y);
                let to8 = |v: f64| ((v * 0.5 + 0.5) * 255.0).round().clamp(0.0, 255.0) as u8;
                let px = if self.is_valid(x, y) {
                    [to8(n.x), to8(n.y), to8(n.z)]
                } else {
                    [0, 0, 0]
                };
                img.put_pixel(x, y, image::Rgb(px));
            }
        }
        img.save(path)?;
        Ok(())
    }

    /// Writes colors as 8-bit RGB.
    pub fn save_colors_png(&self, path: &Path) -> Result<(), RenderError> {
        let (w, h) = (self.width(), self.height());
        let mut img = image::ImageBuffer::<image::Rgb<u8>, Vec<u8>>::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let c = self.colors.get(x, y);
                let to8 = |v: f32| (v * 255.0).round().clamp(0.0, 255.0) as u8;
                img.put_pixel(x, y, image::Rgb([to8(c[0]), to8(c[1]), to8(c[2])]));
            }
        }
        img.save(path)?;
        Ok(())
    }

    /// Writes the contributing-direction bitmask as 8-bit grayscale (raw
    /// mask value; one bit per direction).
    pub fn save_mask_png(&self, path: &Path) -> Result<(), RenderError> {
        let (w, h) = (self.width(), self.height());
        let mut img = image::ImageBuffer::<image::Luma<u8>, Vec<u8>>::new(w, h);
        for y in 0..h {
            for x in 0..w {
                img.put_pixel(x, y, image::Luma([self.direction_mask.get(x, y)]));
            }
        }
        img.save(path)?;
        Ok(())
    }
}

struct RayHit {
    point: Vector3<f64>,
    normal: Vector3<f64>,
    color: [f32; 3],
    mask: u8,
    depth: f64,
}

/// Casts one ray through the combined field. `dir_cam` must be the unit
/// camera-frame ray direction.
fn cast_ray(
    combined: &CombinedTsdf,
    origin: &Vector3<f64>,
    dir_world: &Vector3<f64>,
    dir_cam_z: f64,
    z_min: f64,
    z_max: f64,
) -> Option<RayHit> {
    let tau = combined.truncation;
    let coarse = 0.75 * tau;
    let min_refined = 0.25 * combined.voxel_size;
    let t_start = z_min / dir_cam_z;
    let t_end = z_max / dir_cam_z;
    let mut t = t_start;
    let mut prev: Option<(f64, f64)> = None;
    let mut hit_t = None;
    while t <= t_end {
        let p = origin + dir_world * t;
        match combined.sample(&p) {
            None => {
                prev = None;
                t += coarse;
            }
            Some((sdf, _)) => {
                if sdf < 0.0 {
                    match prev {
                        Some((t0, s0)) => {
                            hit_t = Some(refine_hit(combined, origin, dir_world, t0, s0, t, sdf));
                            break;
                        }
                        None => {
                            // Entered occupied space from unknown; skip
                            // through and look for a proper front face.
                            prev = None;
                            t += coarse;
                        }
                    }
                } else if sdf >= 1.0 {
                    prev = Some((t, sdf));
                    t += coarse;
                } else {
                    prev = Some((t, sdf));
                    t += (sdf * tau).max(min_refined);
                }
            }
        }
    }
    let t_hit = hit_t?;
    let point = origin + dir_world * t_hit;
    let normal = combined.gradient(&point)?;
    // The stored field grows toward the camera side, so the gradient faces
    // the camera for genuine front surfaces.
    if normal.dot(&-dir_world) <= 0.0 {
        return None;
    }
    let (color, mask) = combined.color_and_mask(&point)?;
    if mask == 0 {
        return None;
    }
    Some(RayHit {
        point,
        normal,
        color,
        mask,
        depth: t_hit * dir_cam_z,
    })
}

/// Secant refinement of the zero crossing bracketed by `(t0, s0)` and
/// `(t1, s1)`.
fn refine_hit(
    combined: &CombinedTsdf,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    mut t0: f64,
    mut s0: f64,
    mut t1: f64,
    mut s1: f64,
) -> f64 {
    for _ in 0..3 {
        let tm = t0 + (t1 - t0) * s0 / (s0 - s1);
        let Some((sm, _)) = combined.sample(&(origin + dir * tm)) else {
            break;
        };
        if sm > 0.0 {
            t0 = tm;
            s0 = sm;
        } else {
            t1 = tm;
            s1 = sm;
        }
    }
    t0 + (t1 - t0) * s0 / (s0 - s1)
}

/// Renders the combined field into per-pixel surface points, normals,
/// colors, and direction masks.
pub fn raycast(combined: &CombinedTsdf, pose: &Se3, intrinsics: &CameraIntrinsics) -> RenderedView {
    let (w, h) = (intrinsics.width, intrinsics.height);
    let origin = *pose.translation();
    let hits: Vec<Option<RayHit>> = (0..(w as usize * h as usize))
        .into_par_iter()
        .map(|idx| {
            let x = (idx % w as usize) as u32;
            let y = (idx / w as usize) as u32;
            let dir_cam = intrinsics.unproject(x as f64, y as f64, 1.0).ok()?;
            let norm = dir_cam.norm();
            let dir_cam = dir_cam / norm;
            let dir_world = pose.rotate(&dir_cam);
            cast_ray(
                combined,
                &origin,
                &dir_world,
                dir_cam.z,
                intrinsics.z_min,
                intrinsics.z_max,
            )
        })
        .collect();

    let mut points = Image::from_fill(w, h, Vector3::zeros());
    let mut normals = Image::from_fill(w, h, Vector3::zeros());
    let mut colors = Image::from_fill(w, h, [0.0f32; 3]);
    let mut mask = Image::from_fill(w, h, 0u8);
    let mut depth = ScalarImage::invalid(w, h);
    for (idx, hit) in hits.iter().enumerate() {
        if let Some(hit) = hit {
            let x = (idx % w as usize) as u32;
            let y = (idx / w as usize) as u32;
            points.set(x, y, hit.point);
            normals.set(x, y, hit.normal);
            colors.set(x, y, hit.color);
            mask.set(x, y, hit.mask);
            depth.set(x, y, hit.depth);
        }
    }
    RenderedView {
        points,
        normals,
        colors,
        direction_mask: mask,
        depth,
        pose: *pose,
        intrinsics: *intrinsics,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Voxel, VolumeParams};
    use approx::assert_abs_diff_eq;

    /// Writes the normalized plane distance field of the plane through
    /// `origin` with unit normal `n` into direction `d`, restricted to
    /// `region` (world-space predicate), with the given weight.
    fn fill_plane_region(
        vol: &mut DirectionalVolume,
        d: Direction,
        origin: &Vector3<f64>,
        n: &Vector3<f64>,
        weight: f32,
        lo: (i64, i64, i64),
        hi: (i64, i64, i64),
        region: impl Fn(&Vector3<f64>) -> bool,
    ) {
        let tau = vol.truncation();
        for z in lo.2..hi.2 {
            for y in lo.1..hi.1 {
                for x in lo.0..hi.0 {
                    let p = vol.voxel_center((x, y, z));
                    if !region(&p) {
                        continue;
                    }
                    let dist = (p - origin).dot(n) / tau;
                    if dist.abs() <= 1.0 {
                        *vol.voxel_mut(d, (x, y, z)).unwrap() = Voxel {
                            sdf: dist as f32,
                            weight,
                            color: [0.3, 0.6, 0.9],
                            color_weight: weight,
                        };
                    }
                }
            }
        }
    }

    fn plane_volume() -> DirectionalVolume {
        // Plane z = 1 facing the origin, field in the negative-z direction.
        let mut vol = DirectionalVolume::new(VolumeParams::with_voxel_size(0.02));
        fill_plane_region(
            &mut vol,
            Direction::ZNeg,
            &Vector3::new(0.0, 0.0, 1.0),
            &Vector3::new(0.0, 0.0, -1.0),
            8.0,
            (-30, -30, 40),
            (30, 30, 60),
            |_| true,
        );
        vol
    }

    #[test]
    fn combine_weight_matches_factorwise_oracle() {
        let vol = plane_volume();
        let c = Vector3::new(0.0, 0.0, 0.0);
        let p = Vector3::new(0.11, 0.05, 0.97);
        let w = combine_weight(&vol, Direction::ZNeg, &p, &c);
        assert!(w > 0.0);
        // Independent factor recomputation: unit gradient of the analytic
        // plane, membership of that gradient, view cosine, stored weight.
        let n = Vector3::new(0.0, 0.0, -1.0);
        let w_dir = direction_weight(&n, Direction::ZNeg, vol.params().theta);
        let r = (p - c).normalize();
        let expected = w_dir * (-r).dot(&n) * 8.0;
        assert_abs_diff_eq!(w, expected, epsilon = 1e-9);
        // The same plane viewed from behind contributes nothing.
        let behind = Vector3::new(0.11, 0.05, 2.0);
        assert_eq!(combine_weight(&vol, Direction::ZNeg, &p, &behind), 0.0);
        // Unallocated space contributes nothing.
        assert_eq!(
            combine_weight(&vol, Direction::ZNeg, &Vector3::new(5.0, 5.0, 5.0), &c),
            0.0
        );
        // Other directions hold no data here.
        assert_eq!(combine_weight(&vol, Direction::XPos, &p, &c), 0.0);
    }

    #[test]
    fn nograd_fallback_uses_axis_cosine() {
        let mut vol = DirectionalVolume::new(VolumeParams::with_voxel_size(0.02));
        // A single isolated voxel has no gradient support.
        let v = (10, 10, 10);
        *vol.voxel_mut(Direction::ZNeg, v).unwrap() = Voxel {
            sdf: 0.4,
            weight: 5.0,
            ..Voxel::default()
        };
        let p = vol.voxel_center(v);
        // A camera below the voxel looks along +z, so the negative-z axis
        // faces it and earns the full stored weight.
        let c = p - Vector3::new(0.0, 0.0, 1.0) * 0.9;
        assert_abs_diff_eq!(
            combine_weight_nograd(&vol, Direction::ZNeg, &p, &c),
            5.0,
            epsilon = 1e-9
        );
        // From above, the axis points away from the camera.
        let c = p + Vector3::new(0.0, 0.0, 1.0) * 0.9;
        assert_abs_diff_eq!(
            combine_weight_nograd(&vol, Direction::ZNeg, &p, &c),
            0.0,
            epsilon = 1e-12
        );
        // Orthogonal approach yields zero.
        let c = p + Vector3::new(1.0, 0.0, 0.0) * 0.9;
        assert_abs_diff_eq!(
            combine_weight_nograd(&vol, Direction::ZNeg, &p, &c),
            0.0,
            epsilon = 1e-12
        );
        // The gradient path reports nothing for this voxel.
        assert_eq!(combine_weight(&vol, Direction::ZNeg, &p, &c), 0.0);
    }

    fn test_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(60.0, 60.0, 31.5, 23.5, 64, 48)
    }

    #[test]
    fn combined_of_single_direction_equals_source() {
        let vol = plane_volume();
        let pose = Se3::identity();
        let combined = build_combined(&vol, &pose, &test_intrinsics(), 0);
        assert!(combined.block_count() > 0);
        for probe in [
            Vector3::new(0.0, 0.0, 0.97),
            Vector3::new(0.05, -0.03, 1.02),
            Vector3::new(-0.08, 0.06, 0.99),
        ] {
            let want = vol.sample(Direction::ZNeg, &probe).unwrap().sdf;
            let (got, _) = combined.sample(&probe).unwrap();
            assert_abs_diff_eq!(got, want, epsilon = 1e-6);
        }
        // Mask names the single source direction.
        let v = combined.voxel_at((0, 0, 49)).unwrap();
        assert_eq!(v.mask, Direction::ZNeg.bit());
    }

    #[test]
    fn agreeing_directions_combine_to_their_shared_value() {
        // A 45 degree plane x + z = 1.3 facing the camera is shared evenly
        // by the negative-x and negative-z directions.
        let mut vol = DirectionalVolume::new(VolumeParams::with_voxel_size(0.02));
        let n = Vector3::new(-1.0, 0.0, -1.0).normalize();
        let origin = Vector3::new(0.65, 0.0, 0.65);
        for d in [Direction::XNeg, Direction::ZNeg] {
            fill_plane_region(&mut vol, d, &origin, &n, 6.0, (-30, -20, 40), (40, 20, 80), |_| {
                true
            });
        }
        let pose = Se3::identity();
        let combined = build_combined(&vol, &pose, &test_intrinsics(), 0);
        let probe = Vector3::new(0.2, 0.0, 1.05);
        let want = vol.sample(Direction::XNeg, &probe).unwrap().sdf;
        let other = vol.sample(Direction::ZNeg, &probe).unwrap().sdf;
        assert_abs_diff_eq!(want, other, epsilon = 1e-12);
        let (got, _) = combined.sample(&probe).unwrap();
        assert_abs_diff_eq!(got, want, epsilon = 1e-6);
        // Convexity: the combined value never leaves the contributing range.
        let v = combined.voxel_at((10, 0, 52)).unwrap();
        let a = vol.voxel_at(Direction::XNeg, (10, 0, 52)).unwrap().sdf;
        let b = vol.voxel_at(Direction::ZNeg, (10, 0, 52)).unwrap().sdf;
        assert!(v.sdf >= a.min(b) - 1e-6 && v.sdf <= a.max(b) + 1e-6);
        assert_eq!(v.mask, Direction::XNeg.bit() | Direction::ZNeg.bit());
    }

    #[test]
    fn rebuild_is_bit_identical() {
        let vol = plane_volume();
        let pose = Se3::identity();
        let k = test_intrinsics();
        let a = build_combined(&vol, &pose, &k, 0);
        let b = build_combined(&vol, &pose, &k, 0);
        assert_eq!(a.block_count(), b.block_count());
        for (loc, block) in a.blocks() {
            let other = b.blocks().get(loc).expect("same locations");
            assert_eq!(block, other);
        }
    }

    #[test]
    fn recombine_policy_pins() {
        let policy = CombinePolicy::default();
        let eye = Se3::identity();
        // Boot-up phase.
        assert!(should_recombine(&policy, 3, 0, &eye, &eye));
        // Stale field.
        assert!(should_recombine(&policy, 60, 9, &eye, &eye));
        assert!(!should_recombine(&policy, 59, 9, &eye, &eye));
        // All four criteria false.
        let near = Se3::exp(&nalgebra::Vector6::new(0.04, 0.0, 0.0, 0.0, 0.0, 0.02 * std::f64::consts::FRAC_PI_2));
        assert!(!should_recombine(&policy, 30, 20, &near, &eye));
        // Translation trigger.
        let far = Se3::from_translation(Vector3::new(0.06, 0.0, 0.0));
        assert!(should_recombine(&policy, 30, 20, &far, &eye));
        // Rotation trigger.
        let turned = Se3::exp(&nalgebra::Vector6::new(0.0, 0.0, 0.0, 0.0, 0.06 * std::f64::consts::FRAC_PI_2, 0.0));
        assert!(should_recombine(&policy, 30, 20, &turned, &eye));
    }

    #[test]
    fn raycast_recovers_plane_depth_normals_and_mask() {
        let vol = plane_volume();
        let pose = Se3::identity();
        let k = test_intrinsics();
        let combined = build_combined(&vol, &pose, &k, 0);
        let view = raycast(&combined, &pose, &k);
        let mut abs_err = 0.0;
        let mut count = 0usize;
        for y in 4..44 {
            for x in 4..60 {
                assert!(view.is_valid(x, y), "pixel {x},{y} should hit the plane");
                let z = view.depth.valid_get(x, y).unwrap();
                abs_err += (z - 1.0).abs();
                count += 1;
                let n = view.normals.get(x, y);
                assert_abs_diff_eq!(n.norm(), 1.0, epsilon = 1e-9);
                assert!(n.z < -0.99, "normal {n:?}");
                assert_eq!(view.direction_mask.get(x, y), Direction::ZNeg.bit());
                let c = view.colors.get(x, y);
                assert_abs_diff_eq!(c[0] as f64, 0.3, epsilon = 1e-3);
                // World point consistent with depth.
                let p = view.points.get(x, y);
                assert_abs_diff_eq!(p.z, z, epsilon = 1e-9);
            }
        }
        let mae = abs_err / count as f64;
        assert!(mae < 0.01, "depth MAE {mae}");
        // Rays that exit the mapped region miss.
        let far_k = CameraIntrinsics::new(10.0, 10.0, 31.5, 23.5, 64, 48);
        let view2 = raycast(&combined, &pose, &far_k);
        assert!(!view2.is_valid(0, 0));
        assert_eq!(view2.direction_mask.get(0, 0), 0);
        assert!(view2.depth.valid_get(0, 0).is_none());
    }

    #[test]
    fn view_from_frame_mirrors_frame_geometry() {
        use crate::frame::FrameParams;
        let k = test_intrinsics();
        let depth = ScalarImage::from_fill(64, 48, 1.5);
        let color = Image::from_fill(64, 48, [0.2f32, 0.4, 0.8]);
        let mut fp = FrameParams::default();
        fp.pyramid_levels = 1;
        let frame = Frame::preprocess(depth, color, k, 0.0, &fp);
        let pose = Se3::from_translation(Vector3::new(0.5, 0.0, 0.0));
        let view = RenderedView::from_frame(&frame, &pose);
        assert!(view.valid_count() > 1000);
        let p = view.points.get(31, 23);
        assert_abs_diff_eq!(p.z, 1.5, epsilon = 1e-6);
        assert_abs_diff_eq!(p.x, 0.5 + (31.0 - 31.5) / 60.0 * 1.5, epsilon = 1e-6);
        let n = view.normals.get(31, 23);
        assert!(n.z < -0.99);
    }

    fn corner_volume() -> DirectionalVolume {
        // Tabletop z = 1 facing the camera at the origin, and a hidden side
        // face x = 0.3 whose normal points away from the camera; only the
        // region under the tabletop holds the side face's field.
        let mut vol = DirectionalVolume::new(VolumeParams::with_voxel_size(0.01));
        fill_plane_region(
            &mut vol,
            Direction::ZNeg,
            &Vector3::new(0.0, 0.0, 1.0),
            &Vector3::new(0.0, 0.0, -1.0),
            10.0,
            (-20, -20, 80),
            (60, 20, 120),
            |_| true,
        );
        fill_plane_region(
            &mut vol,
            Direction::XPos,
            &Vector3::new(0.3, 0.0, 0.0),
            &Vector3::new(1.0, 0.0, 0.0),
            10.0,
            (10, -20, 80),
            (50, 20, 130),
            |p| p.z > 0.9,
        );
        vol
    }

    #[test]
    fn exact_lookup_detects_hidden_point_as_occupied() {
        let vol = corner_volume();
        let params = ExactLookupParams::for_volume(&vol);
        let c = Vector3::zeros();
        // Free in the side face's field but hidden behind the visible
        // tabletop: the back-raycast transition lands in the tabletop's
        // occupied space.
        let p1 = Vector3::new(0.305, 0.0, 1.03);
        assert!(vol.sample(Direction::XPos, &p1).unwrap().sdf > 0.0);
        assert!(vol.sample(Direction::ZNeg, &p1).unwrap().sdf < 0.0);
        let res = exact_combined_lookup(&vol, &p1, &c, &params);
        assert!(!res.freespace, "hidden point must not become free space");
        assert!(res.sdf.unwrap() < 0.0);
    }

    #[test]
    fn exact_lookup_keeps_unoccluded_free_space() {
        let vol = corner_volume();
        let params = ExactLookupParams::for_volume(&vol);
        let c = Vector3::zeros();
        // Same side-face free space, but the transition toward the camera
        // happens in front of the tabletop where its field is also free.
        let p2 = Vector3::new(0.335, 0.0, 0.97);
        assert!(vol.sample(Direction::XPos, &p2).unwrap().sdf > 0.0);
        let res = exact_combined_lookup(&vol, &p2, &c, &params);
        assert!(res.freespace);
        assert!(res.sdf.unwrap() > 0.0);
        // A point straight in front of the tabletop, inside its truncation
        // band, has no transition at all toward the camera.
        let p3 = Vector3::new(0.0, 0.0, 0.975);
        let res = exact_combined_lookup(&vol, &p3, &c, &params);
        assert!(res.freespace);
        assert!(res.sdf.unwrap() > 0.0);
    }

    #[test]
    fn exact_lookup_weight_floor_blocks_low_confidence_free_space() {
        let mut vol = corner_volume();
        // Rewrite the side face with weights below the floor.
        for z in 80..130i64 {
            for y in -20..20i64 {
                for x in 10..50i64 {
                    let key_center = vol.voxel_center((x, y, z));
                    if key_center.z <= 0.9 {
                        continue;
                    }
                    if let Some(v) = vol.voxel_at(Direction::XPos, (x, y, z)) {
                        if v.weight > 0.0 {
                            let copy = Voxel {
                                weight: 1.0,
                                ..*v
                            };
                            *vol.voxel_mut(Direction::XPos, (x, y, z)).unwrap() = copy;
                        }
                    }
                }
            }
        }
        let params = ExactLookupParams::for_volume(&vol);
        let c = Vector3::zeros();
        let p1 = Vector3::new(0.305, 0.0, 1.03);
        let res = exact_combined_lookup(&vol, &p1, &c, &params);
        assert!(!res.freespace);
    }

    #[test]
    fn exact_lookup_blends_near_surface_disagreement() {
        let vol = corner_volume();
        let params = ExactLookupParams::for_volume(&vol);
        let c = Vector3::zeros();
        // Millimeters behind the tabletop while the side face still claims
        // free space: the occupied value must participate instead of the
        // free-space sum winning outright.
        let p = Vector3::new(0.32, 0.0, 1.004);
        let free_only = vol.sample(Direction::XPos, &p).unwrap().sdf;
        let occ = vol.sample(Direction::ZNeg, &p).unwrap().sdf;
        assert!(free_only > 0.0 && occ < 0.0 && occ.abs() * vol.truncation() <= params.near_surface_band);
        let res = exact_combined_lookup(&vol, &p, &c, &params);
        let sdf = res.sdf.unwrap();
        assert!(
            sdf < free_only - 1e-9,
            "blend must pull {free_only} toward {occ}, got {sdf}"
        );
    }
}
