//! Camera tracking: weighted point-to-plane ICP, photometric alignment
//! against frames, keyframes, or rendered model views, a combined objective,
//! and a seven-parameter variant that also estimates a depth scale.
//!
//! All residual reductions run over a fixed-topology pairwise tree, so the
//! accumulated normal equations are bit-identical no matter how many worker
//! threads participate.

use nalgebra::{Rotation3, SMatrix, SVector, UnitQuaternion, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{downsample_intensity, intensity_from_color, Frame};
use crate::geometry::{point_action_jacobian, CameraIntrinsics, Se3, Sim3};
use crate::image::ScalarImage;
use crate::render::RenderedView;

#[derive(Debug, Error)]
pub enum TrackingError {
    #[error("depth {z} outside the sensor range")]
    DepthOutOfRange { z: f64 },
    #[error("normal equations not solvable at maximum damping")]
    SingularSystem,
    #[error("tracking lost: geometric inlier fraction {inlier_fraction:.3}")]
    TrackingLost { inlier_fraction: f64 },
    #[error("scale estimate diverged: |log s| = {log_scale_abs:.3}")]
    ScaleDiverged { log_scale_abs: f64 },
}

/// Per-pixel depth reliability model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IcpWeightMode {
    /// Every measurement weighs 1.
    Constant,
    /// Normalized inverse squared depth, 1 at the near plane, 0 at the far
    /// plane.
    Xia,
    /// Axial noise model of a structured-light sensor, with a view-angle
    /// term past 60 degrees.
    Nguyen,
    /// Shifted inverse squared depth without sensor constants.
    Proposed,
}

/// Photometric reference selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhotoMode {
    Off,
    /// Previous frame.
    F2f,
    /// Most recent keyframe.
    F2kf,
    /// Colors of the rendered model view.
    F2r,
}

/// Tracker configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpConfig {
    /// Convergence threshold on the update step norm.
    pub min_step: f64,
    pub max_iters_coarse: usize,
    pub max_iters_fine: usize,
    /// Geometric residual rejection, meters.
    pub depth_outlier_coarse: f64,
    pub depth_outlier_fine: f64,
    /// Photometric residual rejection, unit-range intensity.
    pub intensity_outlier_coarse: f64,
    pub intensity_outlier_fine: f64,
    /// Photometric term weight, applied unsquared.
    pub lambda_photo: f64,
    pub weight_mode: IcpWeightMode,
    pub photo_mode: PhotoMode,
    pub keyframe_interval: usize,
    /// Pixels with a reference gradient below this skip the photometric term.
    pub min_gradient_threshold: f64,
    /// Association rejection when transformed and reference normals disagree
    /// beyond this cosine.
    pub normal_agreement_min: f64,
    /// Geometric inlier fraction below which the frame counts as lost.
    pub min_inlier_fraction: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            min_step: 1e-6,
            max_iters_coarse: 20,
            max_iters_fine: 50,
            depth_outlier_coarse: 0.05,
            depth_outlier_fine: 0.005,
            intensity_outlier_coarse: 0.175,
            intensity_outlier_fine: 0.05,
            lambda_photo: 0.1,
            weight_mode: IcpWeightMode::Proposed,
            photo_mode: PhotoMode::F2kf,
            keyframe_interval: 10,
            min_gradient_threshold: 0.01,
            normal_agreement_min: 0.5,
            min_inlier_fraction: 0.1,
        }
    }
}

impl IcpConfig {
    pub fn validate(&self) {
        assert!(self.min_step > 0.0);
        assert!(self.depth_outlier_fine > 0.0 && self.intensity_outlier_fine > 0.0);
        assert!(
            self.depth_outlier_fine <= self.depth_outlier_coarse,
            "fine depth threshold must not exceed the coarse one"
        );
        assert!(
            self.intensity_outlier_fine <= self.intensity_outlier_coarse,
            "fine intensity threshold must not exceed the coarse one"
        );
        assert!(self.keyframe_interval > 0);
    }
}

fn nguyen_sigma(z: f64, view_angle: f64) -> f64 {
    let mut sigma = 0.0012 + 0.0019 * (z - 0.4) * (z - 0.4);
    // The angular term only engages for very oblique views.
    if view_angle > 60.0f64.to_radians() {
        let denom = std::f64::consts::FRAC_PI_2 - view_angle;
        sigma += 0.0001 / z.sqrt() * view_angle * view_angle / (denom * denom);
    }
    sigma
}

/// Depth reliability weight in `[0, 1]`.
///
/// `view_angle` is the angle between the surface normal and the viewing
/// ray, radians; only the sensor noise model uses it.
pub fn icp_weight(
    z: f64,
    view_angle: f64,
    mode: IcpWeightMode,
    k: &CameraIntrinsics,
) -> Result<f64, TrackingError> {
    if !(z >= k.z_min && z <= k.z_max) {
        return Err(TrackingError::DepthOutOfRange { z });
    }
    let w = match mode {
        IcpWeightMode::Constant => 1.0,
        IcpWeightMode::Xia => {
            let inv = |v: f64| 1.0 / (v * v);
            (inv(z) - inv(k.z_max)) / (inv(k.z_min) - inv(k.z_max))
        }
        // The noise model has its minimum at 0.4 m; clamp keeps the weight
        // in range when the configured near plane sits closer than that.
        IcpWeightMode::Nguyen => nguyen_sigma(k.z_min, 0.0) / nguyen_sigma(z, view_angle),
        IcpWeightMode::Proposed => {
            let s = z + (1.0 - k.z_min);
            1.0 / (s * s)
        }
    };
    Ok(w.clamp(0.0, 1.0))
}

/// Accumulated linear system of one tracking iteration.
#[derive(Debug, Clone)]
pub struct NormalEquations<const N: usize> {
    pub h: SMatrix<f64, N, N>,
    pub g: SVector<f64, N>,
    pub inlier_count: usize,
    /// Weighted sum of squared residuals.
    pub residual_sum: f64,
}

impl<const N: usize> NormalEquations<N> {
    pub fn zero() -> Self {
        Self {
            h: SMatrix::zeros(),
            g: SVector::zeros(),
            inlier_count: 0,
            residual_sum: 0.0,
        }
    }

    fn merge(mut self, other: Self) -> Self {
        self.h += other.h;
        self.g += other.g;
        self.inlier_count += other.inlier_count;
        self.residual_sum += other.residual_sum;
        self
    }
}

/// Grain below which the reduction tree stops spawning parallel work.
const REDUCE_GRAIN: usize = 2048;

/// Reduces `leaf(lo..hi)` over a fixed-topology binary tree: every node
/// splits its range at the midpoint and combines left before right. Large
/// nodes evaluate their halves in parallel, but the bracketing, and with it
/// every intermediate floating point sum, is independent of thread count.
pub fn deterministic_tree_reduce<T, L, C>(lo: usize, hi: usize, leaf: &L, combine: &C) -> Option<T>
where
    T: Send,
    L: Fn(usize) -> T + Sync,
    C: Fn(T, T) -> T + Sync,
{
    if lo >= hi {
        return None;
    }
    if hi - lo == 1 {
        return Some(leaf(lo));
    }
    let mid = lo + (hi - lo) / 2;
    let (a, b) = if hi - lo >= REDUCE_GRAIN {
        rayon::join(
            || deterministic_tree_reduce(lo, mid, leaf, combine),
            || deterministic_tree_reduce(mid, hi, leaf, combine),
        )
    } else {
        (
            deterministic_tree_reduce(lo, mid, leaf, combine),
            deterministic_tree_reduce(mid, hi, leaf, combine),
        )
    };
    match (a, b) {
        (Some(a), Some(b)) => Some(combine(a, b)),
        (Some(a), None) => Some(a),
        (None, b) => b,
    }
}

/// Builds the normal equations `H = 2 sum w J Jt`, `g = 2 sum w J r` from a
/// per-pixel term function, using the deterministic reduction tree.
pub fn accumulate_normal_equations<const N: usize, F>(count: usize, term: F) -> NormalEquations<N>
where
    F: Fn(usize) -> Option<(SVector<f64, N>, f64, f64)> + Sync,
{
    deterministic_tree_reduce(
        0,
        count,
        &|i| match term(i) {
            None => NormalEquations::zero(),
            Some((j, r, w)) => {
                let mut ne = NormalEquations::zero();
                ne.h = 2.0 * w * j * j.transpose();
                ne.g = 2.0 * w * j * r;
                ne.inlier_count = 1;
                ne.residual_sum = w * r * r;
                ne
            }
        },
        &NormalEquations::merge,
    )
    .unwrap_or_else(NormalEquations::zero)
}

/// Width of the internal tracking state: a rigid twist plus one log-scale
/// coordinate. Rigid tracking freezes the scale slot.
const PARAMS: usize = 7;
/// Index of the log-scale coordinate within the state.
const SCALE_SLOT: usize = 6;
/// Damping ceiling past which an unsolvable system aborts the frame.
const MU_CEILING: f64 = 1e7;

type Params = SVector<f64, PARAMS>;

/// A frame retained as photometric reference together with its estimated
/// pose.
#[derive(Debug, Clone)]
pub struct Keyframe {
    pub frame: Frame,
    pub pose: Se3,
    pub frame_index: usize,
}

/// Keyframes are replaced on a fixed cadence: returns true exactly when
/// `frame_index` is a multiple of `interval`, so frame 0 always starts one.
pub fn select_keyframe(frame_index: usize, interval: usize) -> bool {
    interval > 0 && frame_index % interval == 0
}

/// Intensity pyramid of a photometric reference together with its pose.
#[derive(Debug, Clone)]
pub struct PhotoReference {
    levels: Vec<ScalarImage>,
    intrinsics: Vec<CameraIntrinsics>,
    pose: Se3,
}

impl PhotoReference {
    /// Reference taken from a preprocessed frame (previous frame or
    /// keyframe) at the given pose estimate.
    pub fn from_frame(frame: &Frame, pose: &Se3) -> Self {
        let levels = (0..frame.num_levels())
            .map(|k| frame.level(k).intensity.clone())
            .collect();
        let intrinsics = (0..frame.num_levels())
            .map(|k| frame.level(k).intrinsics)
            .collect();
        Self {
            levels,
            intrinsics,
            pose: *pose,
        }
    }

    /// Reference built from the colors of a rendered model view. Pixels the
    /// renderer left empty become invalid and never feed residuals.
    pub fn from_view(view: &RenderedView, num_levels: u32) -> Self {
        let mut base = intensity_from_color(&view.colors);
        for y in 0..view.height() {
            for x in 0..view.width() {
                if !view.is_valid(x, y) {
                    base.set(x, y, f64::NAN);
                }
            }
        }
        let mut levels = vec![base];
        for _ in 1..num_levels.max(1) {
            levels.push(downsample_intensity(levels.last().unwrap()));
        }
        let intrinsics = (0..levels.len() as u32)
            .map(|k| view.intrinsics.scaled(k))
            .collect();
        Self {
            levels,
            intrinsics,
            pose: view.pose,
        }
    }

    pub fn pose(&self) -> &Se3 {
        &self.pose
    }

    fn context_for(&self, level: u32) -> PhotoContext<'_> {
        let idx = (level as usize).min(self.levels.len() - 1);
        PhotoContext {
            image: &self.levels[idx],
            intrinsics: self.intrinsics[idx],
            world_to_ref: self.pose.inverse(),
        }
    }
}

/// Per-level slice of the photometric reference.
struct PhotoContext<'a> {
    image: &'a ScalarImage,
    intrinsics: CameraIntrinsics,
    world_to_ref: Se3,
}

/// One source pixel lifted into world coordinates by the previous pose
/// estimate. Everything here is independent of the increment under
/// estimation.
struct SourceEntry {
    point: Vector3<f64>,
    normal: Option<Vector3<f64>>,
    /// NaN when the pixel has no usable intensity.
    intensity: f64,
    weight: f64,
}

/// Geometric association frozen for one linearization.
#[derive(Clone, Copy)]
struct GeomAssoc {
    point: Vector3<f64>,
    target: Vector3<f64>,
    normal: Vector3<f64>,
    weight: f64,
}

/// Photometric association frozen for one linearization. `residual_lin`
/// is reused when a trial increment pushes the projection off the image,
/// so rejected excursions cannot hide residual mass.
#[derive(Clone, Copy)]
struct PhotoAssoc {
    point: Vector3<f64>,
    intensity: f64,
    weight: f64,
    residual_lin: f64,
}

fn build_source_entries(
    frame: &Frame,
    level: u32,
    lift: &Se3,
    mode: IcpWeightMode,
) -> Vec<Option<SourceEntry>> {
    let lvl = frame.level(level);
    let k = lvl.intrinsics;
    let width = lvl.depth.width() as usize;
    let count = width * lvl.depth.height() as usize;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let x = (i % width) as u32;
            let y = (i / width) as u32;
            let z = lvl.depth.valid_get(x, y)?;
            let p_cam = k.unproject(x as f64, y as f64, z).ok()?;
            let n_cam = frame.normal_for_level(level, x, y);
            let view_angle = n_cam
                .map(|n| (-n.dot(&p_cam.normalize())).clamp(-1.0, 1.0).acos())
                .unwrap_or(0.0);
            let weight = icp_weight(z, view_angle, mode, &k).ok()?;
            Some(SourceEntry {
                point: lift.transform(&p_cam),
                normal: n_cam.map(|n| lift.rotate(&n)),
                intensity: lvl.intensity.get(x, y),
                weight,
            })
        })
        .collect()
}

fn associate_geometric(
    entry: &SourceEntry,
    view: &RenderedView,
    view_pose_inv: &Se3,
    delta: &Sim3,
    depth_outlier: f64,
    normal_agreement_min: f64,
) -> Option<GeomAssoc> {
    let n_src = entry.normal?;
    let z = delta.transform(&entry.point);
    let cam = view_pose_inv.transform(&z);
    let uv = view.intrinsics.project(&cam).ok()?;
    let px = uv.x.round();
    let py = uv.y.round();
    if px < 0.0 || py < 0.0 || px >= view.width() as f64 || py >= view.height() as f64 {
        return None;
    }
    let (px, py) = (px as u32, py as u32);
    if !view.is_valid(px, py) {
        return None;
    }
    let target = view.points.get(px, py);
    let normal = view.normals.get(px, py);
    let r = (target - z).dot(&normal);
    if r.abs() > depth_outlier {
        return None;
    }
    // Rotate the source normal by the current increment before comparing.
    let n_rot = delta.rotation() * n_src;
    if n_rot.dot(&normal) < normal_agreement_min {
        return None;
    }
    Some(GeomAssoc {
        point: entry.point,
        target,
        normal,
        weight: entry.weight,
    })
}

fn associate_photometric(
    entry: &SourceEntry,
    ctx: &PhotoContext,
    delta: &Sim3,
    intensity_outlier: f64,
    min_gradient: f64,
) -> Option<PhotoAssoc> {
    if !entry.intensity.is_finite() {
        return None;
    }
    let z = delta.transform(&entry.point);
    let p_ref = ctx.world_to_ref.transform(&z);
    let uv = ctx.intrinsics.project(&p_ref).ok()?;
    let i_ref = ctx.image.bilinear(&uv)?;
    let r = entry.intensity - i_ref;
    if r.abs() > intensity_outlier {
        return None;
    }
    let grad = ctx.image.bilinear_gradient(&uv)?;
    if grad.norm() < min_gradient {
        return None;
    }
    Some(PhotoAssoc {
        point: entry.point,
        intensity: entry.intensity,
        weight: entry.weight,
        residual_lin: r,
    })
}

fn geometric_linearization(assoc: &GeomAssoc, delta: &Sim3) -> (f64, Params) {
    let z = delta.transform(&assoc.point);
    let r = (assoc.target - z).dot(&assoc.normal);
    let pj = point_action_jacobian(&Sim3::identity(), delta, &assoc.point);
    let j = -(pj.transpose() * assoc.normal);
    (r, j)
}

fn photometric_linearization(
    assoc: &PhotoAssoc,
    ctx: &PhotoContext,
    delta: &Sim3,
) -> Option<(f64, Params)> {
    let z = delta.transform(&assoc.point);
    let p_ref = ctx.world_to_ref.transform(&z);
    let uv = ctx.intrinsics.project(&p_ref).ok()?;
    let i_ref = ctx.image.bilinear(&uv)?;
    let grad = ctx.image.bilinear_gradient(&uv)?;
    let pixel_jac = ctx.intrinsics.pixel_jacobian(&p_ref);
    let pj = point_action_jacobian(&Sim3::from_se3(&ctx.world_to_ref), delta, &assoc.point);
    let j = -(pj.transpose() * (pixel_jac.transpose() * grad));
    Some((assoc.intensity - i_ref, j))
}

/// Photometric residual of a frozen association at a trial increment, or
/// `None` when the projection leaves the reference image.
fn photometric_residual_at(assoc: &PhotoAssoc, ctx: &PhotoContext, delta: &Sim3) -> Option<f64> {
    let z = delta.transform(&assoc.point);
    let p_ref = ctx.world_to_ref.transform(&z);
    let uv = ctx.intrinsics.project(&p_ref).ok()?;
    let i_ref = ctx.image.bilinear(&uv)?;
    Some(assoc.intensity - i_ref)
}

/// Point-to-plane residual of one source pixel against a rendered model
/// view, linearized in the world-frame increment.
///
/// `source_point` and `source_normal` live in world coordinates under the
/// previous pose estimate; the estimated pose of the source is
/// `delta * view.pose`. Returns `None` when the projection leaves the
/// view, the target pixel is empty, the residual exceeds `depth_outlier`,
/// or the normals disagree beyond the cosine `normal_agreement_min`.
pub fn geometric_residual(
    source_point: &Vector3<f64>,
    source_normal: &Vector3<f64>,
    view: &RenderedView,
    delta: &Se3,
    depth_outlier: f64,
    normal_agreement_min: f64,
) -> Option<(f64, Vector6<f64>)> {
    let entry = SourceEntry {
        point: *source_point,
        normal: Some(*source_normal),
        intensity: f64::NAN,
        weight: 1.0,
    };
    let d = Sim3::from_se3(delta);
    let assoc = associate_geometric(
        &entry,
        view,
        &view.pose.inverse(),
        &d,
        depth_outlier,
        normal_agreement_min,
    )?;
    let (r, j) = geometric_linearization(&assoc, &d);
    Some((r, j.fixed_rows::<6>(0).into_owned()))
}

/// Photometric residual of one source pixel against a reference intensity
/// image, linearized in the world-frame increment.
///
/// `world_to_reference` maps world points into the reference camera. The
/// residual is the source intensity minus the bilinearly interpolated
/// reference intensity at the warped pixel. Returns `None` when the warp
/// leaves the image, the residual exceeds `intensity_outlier`, or the
/// reference gradient magnitude falls below `min_gradient`.
#[allow(clippy::too_many_arguments)]
pub fn photometric_residual(
    source_point: &Vector3<f64>,
    source_intensity: f64,
    reference: &ScalarImage,
    reference_intrinsics: &CameraIntrinsics,
    world_to_reference: &Se3,
    delta: &Se3,
    intensity_outlier: f64,
    min_gradient: f64,
) -> Option<(f64, Vector6<f64>)> {
    let entry = SourceEntry {
        point: *source_point,
        normal: None,
        intensity: source_intensity,
        weight: 1.0,
    };
    let ctx = PhotoContext {
        image: reference,
        intrinsics: *reference_intrinsics,
        world_to_ref: *world_to_reference,
    };
    let d = Sim3::from_se3(delta);
    let assoc = associate_photometric(&entry, &ctx, &d, intensity_outlier, min_gradient)?;
    let (r, j) = photometric_linearization(&assoc, &ctx, &d)?;
    Some((r, j.fixed_rows::<6>(0).into_owned()))
}

/// Adaptive damping state of the trust-region style step control.
#[derive(Debug, Clone, Copy)]
pub struct LmDamping {
    pub mu: f64,
    pub nu: f64,
}

impl LmDamping {
    /// Seeds the damping from the largest diagonal entry of the initial
    /// Gauss-Newton matrix.
    pub fn from_max_diagonal(max_diag: f64) -> Self {
        Self {
            mu: 1e-4 * max_diag,
            nu: 2.0,
        }
    }

    /// Shrinks damping after an accepted step with gain ratio `rho`.
    pub fn accept(&mut self, rho: f64) {
        let f = 1.0 - (2.0 * rho - 1.0).powi(3);
        self.mu *= f.max(1.0 / 3.0);
        self.nu = 2.0;
    }

    /// Inflates damping after a rejected step.
    pub fn reject(&mut self) {
        self.mu *= self.nu;
        self.nu *= 2.0;
    }

    pub fn exhausted(&self) -> bool {
        self.mu > MU_CEILING
    }
}

/// Damping diagonal `D = diag(H)` floored at a tiny fraction of the
/// largest entry, so directions the data does not constrain stay solvable
/// instead of producing a singular damped system.
fn damping_diagonal<const N: usize>(h: &SMatrix<f64, N, N>) -> SVector<f64, N> {
    let floor = 1e-12 * h.diagonal().max();
    SVector::from_fn(|i, _| h[(i, i)].max(floor))
}

/// Solves `(H + mu D) xi = -g` by Cholesky factorization. `None` when the
/// damped matrix is not positive definite.
pub fn solve_damped<const N: usize>(ne: &NormalEquations<N>, mu: f64) -> Option<SVector<f64, N>> {
    if !(ne.h.diagonal().max() > 0.0) {
        return None;
    }
    let d = damping_diagonal(&ne.h);
    let m = ne.h + SMatrix::from_diagonal(&(mu * d));
    m.cholesky().map(|c| c.solve(&(-ne.g)))
}

/// Clears the scale row and column and pins its diagonal, so the solve
/// returns exactly zero for the scale coordinate and the update stays
/// rigid.
fn freeze_scale_slot(ne: &mut NormalEquations<PARAMS>) {
    for i in 0..PARAMS {
        ne.h[(SCALE_SLOT, i)] = 0.0;
        ne.h[(i, SCALE_SLOT)] = 0.0;
    }
    ne.g[SCALE_SLOT] = 0.0;
    ne.h[(SCALE_SLOT, SCALE_SLOT)] = 1.0;
}

/// Linearizes the combined objective at `delta`: associations are frozen,
/// the normal equations accumulated over the deterministic reduction tree.
/// Geometric terms come first in the stream, photometric terms second.
fn linearize(
    entries: &[Option<SourceEntry>],
    view: &RenderedView,
    view_pose_inv: &Se3,
    photo: Option<&PhotoContext>,
    delta: &Sim3,
    depth_outlier: f64,
    intensity_outlier: f64,
    config: &IcpConfig,
) -> (
    NormalEquations<PARAMS>,
    Vec<Option<GeomAssoc>>,
    Vec<Option<PhotoAssoc>>,
) {
    let geom: Vec<Option<GeomAssoc>> = entries
        .par_iter()
        .map(|e| {
            let e = e.as_ref()?;
            associate_geometric(
                e,
                view,
                view_pose_inv,
                delta,
                depth_outlier,
                config.normal_agreement_min,
            )
        })
        .collect();
    let photo_assoc: Vec<Option<PhotoAssoc>> = match photo {
        None => vec![None; entries.len()],
        Some(ctx) => entries
            .par_iter()
            .map(|e| {
                let e = e.as_ref()?;
                associate_photometric(
                    e,
                    ctx,
                    delta,
                    intensity_outlier,
                    config.min_gradient_threshold,
                )
            })
            .collect(),
    };
    let n = entries.len();
    let lambda = config.lambda_photo;
    let ne = accumulate_normal_equations(2 * n, |i| {
        if i < n {
            let a = geom[i].as_ref()?;
            let (r, j) = geometric_linearization(a, delta);
            Some((j, r, a.weight))
        } else {
            let a = photo_assoc[i - n].as_ref()?;
            let (r, j) = photometric_linearization(a, photo.unwrap(), delta)?;
            Some((j, r, a.weight * lambda))
        }
    });
    (ne, geom, photo_assoc)
}

/// Combined objective of the frozen associations at a trial increment,
/// summed over the same reduction tree as the linearization so the two
/// values are directly comparable.
fn objective_fixed(
    geom: &[Option<GeomAssoc>],
    photo_assoc: &[Option<PhotoAssoc>],
    photo: Option<&PhotoContext>,
    trial: &Sim3,
    lambda: f64,
) -> f64 {
    let n = geom.len();
    deterministic_tree_reduce(
        0,
        2 * n,
        &|i| {
            if i < n {
                match &geom[i] {
                    None => 0.0,
                    Some(a) => {
                        let z = trial.transform(&a.point);
                        let r = (a.target - z).dot(&a.normal);
                        a.weight * r * r
                    }
                }
            } else {
                match &photo_assoc[i - n] {
                    None => 0.0,
                    Some(a) => {
                        let r = photometric_residual_at(a, photo.unwrap(), trial)
                            .unwrap_or(a.residual_lin);
                        a.weight * lambda * r * r
                    }
                }
            }
        },
        &|x, y| x + y,
    )
    .unwrap_or(0.0)
}

/// Everything the coarse-to-fine minimization produces besides the pose.
struct EngineResult {
    delta: Sim3,
    iterations_per_level: Vec<usize>,
    valid_pixels: usize,
    geometric_inliers: usize,
    photometric_inliers: usize,
    inlier_fraction: f64,
    geometric_rms: f64,
    photometric_rms: f64,
}

/// Coarse-to-fine damped Gauss-Newton over the combined objective.
///
/// The increment `delta` acts on the world side: the estimated source pose
/// is `delta * view.pose`. Each iteration freezes projective associations
/// at the current increment, accumulates the normal equations over a
/// deterministic reduction tree, and accepts a trial step only when it
/// lowers the objective evaluated on those same frozen associations.
fn run_tracker(
    frame: &Frame,
    view: &RenderedView,
    photo_ref: Option<&PhotoReference>,
    config: &IcpConfig,
    freeze_scale: bool,
) -> Result<EngineResult, TrackingError> {
    config.validate();
    let num_levels = frame.num_levels();
    let view_pose_inv = view.pose.inverse();
    let mut delta = Sim3::identity();
    let mut iterations = vec![0usize; num_levels as usize];
    for level in (0..num_levels).rev() {
        let fine = level == 0;
        let max_iters = if fine {
            config.max_iters_fine
        } else {
            config.max_iters_coarse
        };
        let depth_outlier = if fine {
            config.depth_outlier_fine
        } else {
            config.depth_outlier_coarse
        };
        let intensity_outlier = if fine {
            config.intensity_outlier_fine
        } else {
            config.intensity_outlier_coarse
        };
        let entries = build_source_entries(frame, level, &view.pose, config.weight_mode);
        let photo_ctx = photo_ref.map(|r| r.context_for(level));
        let mut damping: Option<LmDamping> = None;
        let mut iter = 0;
        'level: while iter < max_iters {
            let (mut ne, geom, photo_assoc) = linearize(
                &entries,
                view,
                &view_pose_inv,
                photo_ctx.as_ref(),
                &delta,
                depth_outlier,
                intensity_outlier,
                config,
            );
            let data_max = ne.h.diagonal().max();
            if !(data_max > 0.0) {
                return Err(TrackingError::SingularSystem);
            }
            if freeze_scale {
                freeze_scale_slot(&mut ne);
            }
            let dmp = damping.get_or_insert_with(|| LmDamping::from_max_diagonal(data_max));
            let f_current = ne.residual_sum;
            let d = damping_diagonal(&ne.h);
            // Inner loop: inflate damping until a step is accepted, then
            // go back out and relinearize.
            loop {
                if iter >= max_iters {
                    break 'level;
                }
                iter += 1;
                let Some(xi) = solve_damped(&ne, dmp.mu) else {
                    dmp.reject();
                    if dmp.exhausted() {
                        return Err(TrackingError::SingularSystem);
                    }
                    continue;
                };
                if xi.norm() < config.min_step {
                    break 'level;
                }
                let trial = Sim3::exp(&xi) * delta;
                let f_trial = objective_fixed(
                    &geom,
                    &photo_assoc,
                    photo_ctx.as_ref(),
                    &trial,
                    config.lambda_photo,
                );
                let predicted = 0.5 * xi.dot(&(dmp.mu * d.component_mul(&xi) - ne.g));
                if predicted > 0.0 && f_trial < f_current {
                    let rho = (f_current - f_trial) / predicted;
                    delta = trial;
                    dmp.accept(rho);
                    break;
                }
                dmp.reject();
                if dmp.exhausted() {
                    return Err(TrackingError::SingularSystem);
                }
            }
        }
        iterations[level as usize] = iter;
    }
    // One more association pass at the accepted increment for reporting.
    let entries = build_source_entries(frame, 0, &view.pose, config.weight_mode);
    let photo_ctx = photo_ref.map(|r| r.context_for(0));
    let (_, geom, photo_assoc) = linearize(
        &entries,
        view,
        &view_pose_inv,
        photo_ctx.as_ref(),
        &delta,
        config.depth_outlier_fine,
        config.intensity_outlier_fine,
        config,
    );
    let valid_pixels = entries.iter().flatten().count();
    let geometric_inliers = geom.iter().flatten().count();
    let photometric_inliers = photo_assoc.iter().flatten().count();
    let mut geom_sq = 0.0;
    for a in geom.iter().flatten() {
        let r = (a.target - delta.transform(&a.point)).dot(&a.normal);
        geom_sq += r * r;
    }
    let mut photo_sq = 0.0;
    if let Some(ctx) = photo_ctx.as_ref() {
        for a in photo_assoc.iter().flatten() {
            let r = photometric_residual_at(a, ctx, &delta).unwrap_or(a.residual_lin);
            photo_sq += r * r;
        }
    }
    let rms = |sq: f64, n: usize| if n == 0 { 0.0 } else { (sq / n as f64).sqrt() };
    Ok(EngineResult {
        delta,
        iterations_per_level: iterations,
        valid_pixels,
        geometric_inliers,
        photometric_inliers,
        inlier_fraction: if valid_pixels == 0 {
            0.0
        } else {
            geometric_inliers as f64 / valid_pixels as f64
        },
        geometric_rms: rms(geom_sq, geometric_inliers),
        photometric_rms: rms(photo_sq, photometric_inliers),
    })
}

/// Per-frame tracking summary, serialized into the run report stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackingReport {
    /// Position in the sequence; filled by the caller.
    pub frame_index: usize,
    pub timestamp: f64,
    pub translation: [f64; 3],
    /// Orientation as `[x, y, z, w]`.
    pub quaternion: [f64; 4],
    pub iterations_per_level: Vec<usize>,
    pub valid_pixels: usize,
    pub geometric_inliers: usize,
    pub photometric_inliers: usize,
    pub inlier_fraction: f64,
    pub geometric_rms: f64,
    pub photometric_rms: f64,
    /// Whether the combined field was rebuilt for this frame; filled by
    /// the caller.
    pub recombined: bool,
    pub tracking_lost: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compensated_log_scale: Option<f64>,
}

fn report_from(result: &EngineResult, pose: &Se3, timestamp: f64) -> TrackingReport {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(
        *pose.rotation(),
    ));
    let t = pose.translation();
    TrackingReport {
        frame_index: 0,
        timestamp,
        translation: [t.x, t.y, t.z],
        quaternion: [q.i, q.j, q.k, q.w],
        iterations_per_level: result.iterations_per_level.clone(),
        valid_pixels: result.valid_pixels,
        geometric_inliers: result.geometric_inliers,
        photometric_inliers: result.photometric_inliers,
        inlier_fraction: result.inlier_fraction,
        geometric_rms: result.geometric_rms,
        photometric_rms: result.photometric_rms,
        recombined: false,
        tracking_lost: false,
        log_scale: None,
        compensated_log_scale: None,
    }
}

fn build_photo_reference(
    frame: &Frame,
    view: &RenderedView,
    keyframe: Option<&Keyframe>,
    prev_frame: Option<(&Frame, &Se3)>,
    config: &IcpConfig,
) -> Option<PhotoReference> {
    match config.photo_mode {
        PhotoMode::Off => None,
        PhotoMode::F2f => prev_frame.map(|(f, pose)| PhotoReference::from_frame(f, pose)),
        PhotoMode::F2kf => keyframe.map(|kf| PhotoReference::from_frame(&kf.frame, &kf.pose)),
        PhotoMode::F2r => Some(PhotoReference::from_view(view, frame.num_levels())),
    }
}

/// Estimates the rigid pose of `frame` against a rendered model view.
///
/// The view carries the previous pose estimate; the returned pose is the
/// recovered world-frame increment composed onto it. The photometric term
/// follows `config.photo_mode`: against the previous frame, the current
/// keyframe, or the view colors; references that are not supplied simply
/// disable the term.
pub fn track_frame(
    frame: &Frame,
    view: &RenderedView,
    keyframe: Option<&Keyframe>,
    prev_frame: Option<(&Frame, &Se3)>,
    config: &IcpConfig,
) -> Result<(Se3, TrackingReport), TrackingError> {
    let photo_ref = build_photo_reference(frame, view, keyframe, prev_frame, config);
    let result = run_tracker(frame, view, photo_ref.as_ref(), config, true)?;
    if result.inlier_fraction < config.min_inlier_fraction {
        return Err(TrackingError::TrackingLost {
            inlier_fraction: result.inlier_fraction,
        });
    }
    let pose = result.delta.se3_part() * view.pose;
    let report = report_from(&result, &pose, frame.timestamp);
    Ok((pose, report))
}

/// Estimates a similarity pose of `frame`, exposing the depth-scale
/// estimate of the sensor that produced it.
///
/// The reported log scale is positive when the sensor depth runs long: a
/// sensor scaled by factor `f` yields `log_scale` near `ln f`. When an
/// anchor estimate is supplied, `compensated_log_scale` carries the
/// difference to it, which discounts drift common to all sensors.
pub fn track_frame_sim3(
    frame: &Frame,
    view: &RenderedView,
    keyframe: Option<&Keyframe>,
    prev_frame: Option<(&Frame, &Se3)>,
    config: &IcpConfig,
    anchor_log_scale: Option<f64>,
) -> Result<(Sim3, TrackingReport), TrackingError> {
    let photo_ref = build_photo_reference(frame, view, keyframe, prev_frame, config);
    let result = run_tracker(frame, view, photo_ref.as_ref(), config, false)?;
    let log_scale = -result.delta.scale().ln();
    if log_scale.abs() > std::f64::consts::LN_2 {
        return Err(TrackingError::ScaleDiverged {
            log_scale_abs: log_scale.abs(),
        });
    }
    if result.inlier_fraction < config.min_inlier_fraction {
        return Err(TrackingError::TrackingLost {
            inlier_fraction: result.inlier_fraction,
        });
    }
    let pose = result.delta * Sim3::from_se3(&view.pose);
    let mut report = report_from(&result, &pose.se3_part(), frame.timestamp);
    report.log_scale = Some(log_scale);
    report.compensated_log_scale = anchor_log_scale.map(|s0| log_scale - s0);
    Ok((pose, report))
}





#[cfg(test)]
mod solver_tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_terms(n: usize, seed: u64) -> Vec<(Params, f64, f64)> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let j = Params::from_fn(|_, _| rng.gen_range(-1.0..1.0));
                (j, rng.gen_range(-0.5..0.5), rng.gen_range(0.1..1.0))
            })
            .collect()
    }

    #[test]
    fn zero_system_is_unsolvable() {
        assert!(solve_damped(&NormalEquations::<7>::zero(), 1.0).is_none());
    }

    #[test]
    fn frozen_scale_solve_matches_six_dimensional_solve() {
        let terms = random_terms(60, 11);
        let mut ne7 = accumulate_normal_equations::<7, _>(terms.len(), |i| Some(terms[i]));
        let ne6 = accumulate_normal_equations::<6, _>(terms.len(), |i| {
            let (j, r, w) = terms[i];
            Some((j.fixed_rows::<6>(0).into_owned(), r, w))
        });
        freeze_scale_slot(&mut ne7);
        for mu in [1e-6, 1e-3, 0.1] {
            let x7 = solve_damped(&ne7, mu).unwrap();
            let x6 = solve_damped(&ne6, mu).unwrap();
            assert_eq!(x7[SCALE_SLOT], 0.0);
            for i in 0..6 {
                let tol = 1e-14 * x6[i].abs().max(1e-3);
                assert!((x7[i] - x6[i]).abs() <= tol, "slot {i}: {} vs {}", x7[i], x6[i]);
            }
        }
    }

    #[test]
    fn damping_follows_the_gain_ratio() {
        let mut d = LmDamping::from_max_diagonal(100.0);
        assert_eq!(d.mu, 1e-2);
        assert_eq!(d.nu, 2.0);
        d.reject();
        assert_eq!(d.mu, 2e-2);
        assert_eq!(d.nu, 4.0);
        d.accept(1.0);
        assert!((d.mu - 2e-2 / 3.0).abs() < 1e-17);
        assert_eq!(d.nu, 2.0);
        // At rho = 1/2 the cubic vanishes and damping stays put.
        let before = d.mu;
        d.accept(0.5);
        assert_eq!(d.mu, before);
        assert!(!d.exhausted());
    }

    #[test]
    fn damped_iteration_converges_on_linear_least_squares() {
        // Linear residuals keep the quadratic model exact, so every trial
        // step must be accepted and the objective must fall monotonically
        // to the normal solution.
        let terms = random_terms(80, 5);
        let residual = |theta: &Params, i: usize| {
            let (a, b, _) = terms[i];
            a.dot(theta) - b
        };
        let objective = |theta: &Params| {
            terms
                .iter()
                .enumerate()
                .map(|(i, &(_, _, w))| {
                    let r = residual(theta, i);
                    w * r * r
                })
                .sum::<f64>()
        };
        let at = |theta: &Params| {
            accumulate_normal_equations::<7, _>(terms.len(), |i| {
                let (a, _, w) = terms[i];
                Some((a, residual(theta, i), w))
            })
        };
        let ne0 = at(&Params::zeros());
        let theta_star = solve_damped(&ne0, 0.0).unwrap();

        let mut theta = Params::zeros();
        let mut damping: Option<LmDamping> = None;
        let mut f_prev = f64::INFINITY;
        let mut iters = 0;
        for _ in 0..20 {
            let ne = at(&theta);
            assert!(
                ne.residual_sum <= f_prev + 1e-12 * f_prev.max(1.0),
                "objective increased"
            );
            f_prev = ne.residual_sum;
            let dmp =
                damping.get_or_insert_with(|| LmDamping::from_max_diagonal(ne.h.diagonal().max()));
            let xi = solve_damped(&ne, dmp.mu).unwrap();
            if xi.norm() < 1e-12 {
                break;
            }
            iters += 1;
            let trial = theta + xi;
            let f_trial = objective(&trial);
            let d = damping_diagonal(&ne.h);
            let predicted = 0.5 * xi.dot(&(dmp.mu * d.component_mul(&xi) - ne.g));
            if f_trial < ne.residual_sum && predicted > 0.0 {
                dmp.accept((ne.residual_sum - f_trial) / predicted);
                theta = trial;
            } else {
                // A rejection on an exact quadratic can only mean the
                // decrease fell below floating point resolution, which is
                // only legitimate at the optimum.
                assert!(
                    (theta - theta_star).norm() < 1e-8,
                    "rejected while {} from the optimum",
                    (theta - theta_star).norm()
                );
                break;
            }
        }
        assert!(
            (theta - theta_star).norm() < 1e-8,
            "distance {} after {iters} iterations",
            (theta - theta_star).norm()
        );
    }
}
