//! Trajectory and map-quality metrics: windowed relative pose error,
//! post-fusion geometric and photometric depth-map agreement, and
//! per-stage runtime and memory statistics.

use crate::frame::Frame;
use crate::geometry::Se3;
use crate::image::ScalarImage;
use crate::render::{build_combined, raycast};
use crate::volume::DirectionalVolume;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Nearest-timestamp association tolerance, seconds.
pub const ASSOCIATION_TOLERANCE: f64 = 0.02;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("timestamps must be strictly increasing at sample {index}")]
    NonMonotonicTimestamps { index: usize },
    #[error("only {pairs} associated pose pairs, at least 2 required")]
    InsufficientOverlap { pairs: usize },
}

/// Ordered pose samples with strictly increasing timestamps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    samples: Vec<(f64, Se3)>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_samples(samples: Vec<(f64, Se3)>) -> Result<Self, EvalError> {
        let mut traj = Self::new();
        for (t, pose) in samples {
            traj.push(t, pose)?;
        }
        Ok(traj)
    }

    /// Appends a sample; its timestamp must exceed the previous one.
    pub fn push(&mut self, timestamp: f64, pose: Se3) -> Result<(), EvalError> {
        if let Some((last, _)) = self.samples.last() {
            if timestamp <= *last {
                return Err(EvalError::NonMonotonicTimestamps {
                    index: self.samples.len(),
                });
            }
        }
        self.samples.push((timestamp, pose));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[(f64, Se3)] {
        &self.samples
    }

    pub fn get(&self, i: usize) -> Option<&(f64, Se3)> {
        self.samples.get(i)
    }

    /// Index of the sample whose timestamp is nearest to `t`, or `None`
    /// when empty.
    fn nearest(&self, t: f64) -> Option<usize> {
        if self.samples.is_empty() {
            return None;
        }
        let i = self.samples.partition_point(|(ts, _)| *ts < t);
        let mut best = i.min(self.samples.len() - 1);
        if i > 0 {
            let before = i - 1;
            if (self.samples[before].0 - t).abs() <= (self.samples[best].0 - t).abs() {
                best = before;
            }
        }
        Some(best)
    }
}

/// One windowed relative-pose comparison.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RpePair {
    /// Timestamp of the window start (estimated trajectory).
    pub timestamp: f64,
    /// Translation magnitude of the relative error, millimeters.
    pub translation_mm: f64,
    /// Rotation magnitude of the relative error, radians.
    pub rotation_rad: f64,
}

/// Windowed relative pose error over an associated trajectory pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RpeReport {
    pub pairs: Vec<RpePair>,
    /// Root mean square of the per-pair translation errors, millimeters.
    pub rmse_translation_mm: f64,
    /// Root mean square of the per-pair rotation errors, radians,
    /// reported separately from the headline translation number.
    pub rmse_rotation_rad: f64,
    /// Estimated samples without a ground-truth partner within the
    /// association tolerance.
    pub unassociated: usize,
}

/// Relative pose error of `estimated` against `ground_truth` over a
/// fixed window of associated frames.
///
/// Samples are associated by nearest timestamp within
/// [`ASSOCIATION_TOLERANCE`]. For every associated index `i` with
/// `i + window` in range, the error transform is
/// `(Q_i^-1 Q_{i+w})^-1 (P_i^-1 P_{i+w})` with `P` estimated and `Q`
/// ground truth; the report carries the per-pair translation magnitudes
/// in millimeters and their root mean square.
pub fn rpe(
    estimated: &Trajectory,
    ground_truth: &Trajectory,
    window: usize,
) -> Result<RpeReport, EvalError> {
    let mut associated: Vec<(f64, Se3, Se3)> = Vec::new();
    let mut unassociated = 0usize;
    for (t, p) in estimated.samples() {
        let q = ground_truth
            .nearest(*t)
            .map(|i| ground_truth.samples()[i])
            .filter(|(tq, _)| (tq - t).abs() <= ASSOCIATION_TOLERANCE);
        match q {
            Some((_, q)) => associated.push((*t, *p, q)),
            None => unassociated += 1,
        }
    }
    let window = window.max(1);
    let mut pairs = Vec::new();
    for i in 0..associated.len().saturating_sub(window) {
        let (t, p_i, q_i) = associated[i];
        let (_, p_j, q_j) = associated[i + window];
        let rel_est = p_i.inverse() * p_j;
        let rel_gt = q_i.inverse() * q_j;
        let error = rel_gt.inverse() * rel_est;
        pairs.push(RpePair {
            timestamp: t,
            translation_mm: error.translation().norm() * 1000.0,
            rotation_rad: error.rotation_angle(),
        });
    }
    if pairs.len() < 2 {
        return Err(EvalError::InsufficientOverlap { pairs: pairs.len() });
    }
    let rms = |f: &dyn Fn(&RpePair) -> f64| {
        (pairs.iter().map(|p| f(p) * f(p)).sum::<f64>() / pairs.len() as f64).sqrt()
    };
    Ok(RpeReport {
        rmse_translation_mm: rms(&|p| p.translation_mm),
        rmse_rotation_rad: rms(&|p| p.rotation_rad),
        pairs,
        unassociated,
    })
}

/// Mean absolute difference over pixels valid in both images, with the
/// count of such pixels. `None` when no pixel is valid in both.
pub fn masked_mae(a: &ScalarImage, b: &ScalarImage) -> Option<(f64, usize)> {
    assert_eq!(a.width(), b.width());
    assert_eq!(a.height(), b.height());
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..a.height() {
        for x in 0..a.width() {
            if let (Some(va), Some(vb)) = (a.valid_get(x, y), b.valid_get(x, y)) {
                sum += (va - vb).abs();
                n += 1;
            }
        }
    }
    (n > 0).then(|| (sum / n as f64, n))
}

/// Map agreement of one frame after fusion completed.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FrameMae {
    pub frame_index: usize,
    pub timestamp: f64,
    /// Pixels valid in both the re-rendered and the input depth map.
    pub valid_pixels: usize,
    /// Mean absolute depth difference, millimeters. `None` when no pixel
    /// is valid in both maps.
    pub geometric_mae_mm: Option<f64>,
    /// Mean absolute intensity difference over mutually valid pixels.
    pub photometric_mae: Option<f64>,
}

/// Per-frame series with mean and confidence interval.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaeReport {
    pub frames: Vec<FrameMae>,
    pub mean_geometric_mae_mm: f64,
    /// Half width of the 95 percent confidence interval of the mean.
    pub ci95_geometric_mae_mm: f64,
    pub mean_photometric_mae: f64,
    pub ci95_photometric_mae: f64,
}

fn mean_and_ci95(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

impl MaeReport {
    /// Two-column `frame_index value` text series of the geometric MAE,
    /// for plotting. Frames without overlap are skipped.
    pub fn geometric_series(&self) -> String {
        let mut out = String::new();
        for f in &self.frames {
            if let Some(mae) = f.geometric_mae_mm {
                out.push_str(&format!("{} {:.6}\n", f.frame_index, mae));
            }
        }
        out
    }
}

/// Re-renders every trajectory pose out of the fused volume and compares
/// the result against the corresponding input frame.
///
/// For each `(pose, frame)` pair the combined field is rebuilt at that
/// pose and raycast; the geometric error is the mean absolute depth
/// difference (millimeters) and the photometric error the mean absolute
/// intensity difference, both over pixels valid in the rendered and the
/// input map alike. Frames without any mutually valid pixel are reported
/// with zero valid pixels and excluded from the means.
pub fn post_fusion_mae(
    volume: &DirectionalVolume,
    trajectory: &Trajectory,
    frames: &[Frame],
) -> MaeReport {
    assert_eq!(
        trajectory.len(),
        frames.len(),
        "one trajectory sample per frame"
    );
    let mut per_frame = Vec::with_capacity(frames.len());
    for (i, ((timestamp, pose), frame)) in trajectory.samples().iter().zip(frames).enumerate() {
        let combined = build_combined(volume, pose, frame.intrinsics(), i);
        let view = raycast(&combined, pose, frame.intrinsics());
        let geometric = masked_mae(&view.depth, frame.depth());
        let rendered_intensity = crate::frame::intensity_from_color(&view.colors);
        let mut masked_intensity = rendered_intensity;
        for y in 0..view.height() {
            for x in 0..view.width() {
                if !view.is_valid(x, y) {
                    masked_intensity.set(x, y, f64::NAN);
                }
            }
        }
        let photometric = masked_mae(&masked_intensity, frame.intensity());
        per_frame.push(FrameMae {
            frame_index: i,
            timestamp: *timestamp,
            valid_pixels: geometric.map_or(0, |(_, n)| n),
            geometric_mae_mm: geometric.map(|(mae, _)| mae * 1000.0),
            photometric_mae: photometric.map(|(mae, _)| mae),
        });
    }
    let geo: Vec<f64> = per_frame.iter().filter_map(|f| f.geometric_mae_mm).collect();
    let photo: Vec<f64> = per_frame.iter().filter_map(|f| f.photometric_mae).collect();
    let (mean_g, ci_g) = mean_and_ci95(&geo);
    let (mean_p, ci_p) = mean_and_ci95(&photo);
    MaeReport {
        frames: per_frame,
        mean_geometric_mae_mm: mean_g,
        ci95_geometric_mae_mm: ci_g,
        mean_photometric_mae: mean_p,
        ci95_photometric_mae: ci_p,
    }
}

/// Wall time one frame spent in each pipeline stage, seconds.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct StageTimes {
    pub preprocess: f64,
    pub track: f64,
    pub allocate: f64,
    pub fuse: f64,
    pub combine: f64,
    pub raycast: f64,
}

impl StageTimes {
    pub fn total(&self) -> f64 {
        self.preprocess + self.track + self.allocate + self.fuse + self.combine + self.raycast
    }

    fn add(&mut self, other: &StageTimes) {
        self.preprocess += other.preprocess;
        self.track += other.track;
        self.allocate += other.allocate;
        self.fuse += other.fuse;
        self.combine += other.combine;
        self.raycast += other.raycast;
    }

    fn scaled(&self, f: f64) -> StageTimes {
        StageTimes {
            preprocess: self.preprocess * f,
            track: self.track * f,
            allocate: self.allocate * f,
            fuse: self.fuse * f,
            combine: self.combine * f,
            raycast: self.raycast * f,
        }
    }
}

/// Aggregated per-stage timings and storage footprint of one run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunStats {
    per_frame: Vec<StageTimes>,
    /// Allocated voxel blocks at the end of the run.
    pub block_count: usize,
    /// Voxel payload bytes implied by the block count.
    pub memory_bytes: usize,
}

impl RunStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, times: StageTimes) {
        self.per_frame.push(times);
    }

    pub fn set_memory(&mut self, volume: &DirectionalVolume) {
        self.block_count = volume.block_count();
        self.memory_bytes = volume.memory_bytes();
    }

    pub fn frames(&self) -> usize {
        self.per_frame.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_frame.is_empty()
    }

    pub fn per_frame(&self) -> &[StageTimes] {
        &self.per_frame
    }

    pub fn mean_times(&self) -> StageTimes {
        if self.per_frame.is_empty() {
            return StageTimes::default();
        }
        let mut sum = StageTimes::default();
        for t in &self.per_frame {
            sum.add(t);
        }
        sum.scaled(1.0 / self.per_frame.len() as f64)
    }
}

/// Storage ratio of a directional run against a regular-field baseline
/// over the same input.
pub fn memory_ratio(directional: &RunStats, regular: &RunStats) -> f64 {
    directional.block_count as f64 / regular.block_count.max(1) as f64
}


#[cfg(test)]
mod rpe_tests {
    use super::trajectory_tests::wiggle;
    use super::*;
    use nalgebra::{Matrix4, Vector6};

    fn make(n: usize, scale: f64) -> Trajectory {
        Trajectory::from_samples((0..n).map(|i| (i as f64 * 0.1, wiggle(i, scale))).collect())
            .unwrap()
    }

    #[test]
    fn identical_trajectories_have_zero_error() {
        let traj = make(40, 0.5);
        let report = rpe(&traj, &traj, 30).unwrap();
        assert_eq!(report.pairs.len(), 10);
        assert!(report.rmse_translation_mm < 1e-9);
        assert!(report.rmse_rotation_rad < 1e-6);
        assert_eq!(report.unassociated, 0);
    }

    #[test]
    fn constant_global_offset_cancels() {
        let gt = make(40, 0.5);
        let offset = Se3::exp(&Vector6::from_row_slice(&[3.0, -2.0, 1.0, 0.4, -0.3, 0.2]));
        let est = Trajectory::from_samples(
            gt.samples().iter().map(|(t, p)| (*t, offset * *p)).collect(),
        )
        .unwrap();
        let report = rpe(&est, &gt, 30).unwrap();
        assert!(report.rmse_translation_mm < 1e-7, "{}", report.rmse_translation_mm);
        assert!(report.rmse_rotation_rad < 1e-6);
    }

    /// Brute-force restatement of the definition on homogeneous matrices,
    /// written independently of the production path.
    fn oracle_rpe(est: &[(f64, Matrix4<f64>)], gt: &[(f64, Matrix4<f64>)], w: usize) -> Vec<f64> {
        let mut errors = Vec::new();
        for i in 0..est.len() {
            let j = i + w;
            if j >= est.len() {
                break;
            }
            let rel_p = est[i].1.try_inverse().unwrap() * est[j].1;
            let rel_q = gt[i].1.try_inverse().unwrap() * gt[j].1;
            let e = rel_q.try_inverse().unwrap() * rel_p;
            let t = e.fixed_view::<3, 1>(0, 3);
            errors.push(t.norm() * 1000.0);
        }
        errors
    }

    #[test]
    fn matches_the_brute_force_oracle() {
        let gt = make(10, 0.4);
        let est = Trajectory::from_samples(
            gt.samples()
                .iter()
                .enumerate()
                .map(|(i, (t, p))| (*t, *p * wiggle(i + 100, 0.01)))
                .collect(),
        )
        .unwrap();
        for window in [1, 3, 7] {
            let report = rpe(&est, &gt, window).unwrap();
            let to_mat = |traj: &Trajectory| {
                traj.samples()
                    .iter()
                    .map(|(t, p)| (*t, p.to_matrix()))
                    .collect::<Vec<_>>()
            };
            let expected = oracle_rpe(&to_mat(&est), &to_mat(&gt), window);
            assert_eq!(report.pairs.len(), expected.len());
            for (pair, want) in report.pairs.iter().zip(&expected) {
                assert!(
                    (pair.translation_mm - want).abs() < 1e-12 * want.max(1.0),
                    "{} vs {}",
                    pair.translation_mm,
                    want
                );
            }
        }
    }

    #[test]
    fn invariant_to_a_global_rigid_transform() {
        let gt = make(25, 0.5);
        let est = Trajectory::from_samples(
            gt.samples()
                .iter()
                .enumerate()
                .map(|(i, (t, p))| (*t, *p * wiggle(i + 7, 0.02)))
                .collect(),
        )
        .unwrap();
        let g = Se3::exp(&Vector6::from_row_slice(&[1.0, 2.0, -3.0, 0.7, -0.2, 0.5]));
        let apply = |traj: &Trajectory| {
            Trajectory::from_samples(
                traj.samples().iter().map(|(t, p)| (*t, g * *p)).collect(),
            )
            .unwrap()
        };
        let base = rpe(&est, &gt, 10).unwrap();
        let moved = rpe(&apply(&est), &apply(&gt), 10).unwrap();
        assert!((base.rmse_translation_mm - moved.rmse_translation_mm).abs() < 1e-8);
        assert!((base.rmse_rotation_rad - moved.rmse_rotation_rad).abs() < 1e-8);
    }

    #[test]
    fn too_few_pairs_is_an_error() {
        let traj = make(5, 0.2);
        let err = rpe(&traj, &traj, 30).unwrap_err();
        assert_eq!(err, EvalError::InsufficientOverlap { pairs: 0 });
        // Window 3 on 5 samples leaves exactly 2 pairs, the minimum.
        assert!(rpe(&traj, &traj, 3).is_ok());
        assert!(matches!(
            rpe(&traj, &traj, 4),
            Err(EvalError::InsufficientOverlap { pairs: 1 })
        ));
    }

    #[test]
    fn association_respects_the_tolerance() {
        let gt = make(40, 0.5);
        let shift = |dt: f64| {
            Trajectory::from_samples(
                gt.samples().iter().map(|(t, p)| (*t + dt, *p)).collect(),
            )
            .unwrap()
        };
        // Within tolerance every sample associates to its own partner.
        let near = rpe(&shift(0.019), &gt, 30).unwrap();
        assert_eq!(near.unassociated, 0);
        assert!(near.rmse_translation_mm < 1e-9);
        // Beyond tolerance nothing associates at all.
        assert!(matches!(
            rpe(&shift(0.05), &gt, 30),
            Err(EvalError::InsufficientOverlap { pairs: 0 })
        ));
    }
}


#[cfg(test)]
mod stats_tests {
    use super::*;
    use crate::frame::FrameParams;
    use crate::geometry::CameraIntrinsics;
    use crate::image::Image;
    use crate::volume::{Representation, VolumeParams};
    use nalgebra::Vector3;

    #[test]
    fn empty_run_reports_empty() {
        let stats = RunStats::new();
        assert!(stats.is_empty());
        assert_eq!(stats.frames(), 0);
        let mean = stats.mean_times();
        assert_eq!(mean.total(), 0.0);
    }

    #[test]
    fn mean_times_average_per_stage() {
        let mut stats = RunStats::new();
        stats.record(StageTimes {
            preprocess: 1.0,
            track: 2.0,
            allocate: 3.0,
            fuse: 4.0,
            combine: 5.0,
            raycast: 6.0,
        });
        stats.record(StageTimes {
            preprocess: 3.0,
            track: 4.0,
            allocate: 5.0,
            fuse: 6.0,
            combine: 7.0,
            raycast: 8.0,
        });
        let mean = stats.mean_times();
        assert_eq!(mean.preprocess, 2.0);
        assert_eq!(mean.raycast, 7.0);
        assert_eq!(mean.total(), 27.0);
    }

    /// Slanted corner surfaces whose normals spread across several
    /// directions, so the directional representation allocates more
    /// blocks than the regular baseline.
    fn corner_frame(k: &CameraIntrinsics) -> Frame {
        let planes = [
            (Vector3::new(0.0, 0.0, 0.60), Vector3::new(0.55, 0.15, -1.0).normalize()),
            (Vector3::new(0.0, 0.0, 0.70), Vector3::new(-0.50, 0.25, -1.0).normalize()),
            (Vector3::new(0.0, 0.0, 0.65), Vector3::new(0.10, -0.55, -1.0).normalize()),
        ];
        let mut depth = ScalarImage::invalid(k.width, k.height);
        let color = Image::from_fill(k.width, k.height, [0.5f32; 3]);
        for y in 0..k.height {
            for x in 0..k.width {
                let d = k.unproject(x as f64, y as f64, 1.0).unwrap();
                let mut best = f64::MAX;
                for (p0, n) in &planes {
                    let denom = d.dot(n);
                    if denom.abs() < 1e-12 {
                        continue;
                    }
                    let t = p0.dot(n) / denom;
                    if t > 0.0 && t < best {
                        best = t;
                    }
                }
                if best < f64::MAX {
                    depth.set(x, y, best);
                }
            }
        }
        let mut params = FrameParams::default();
        params.depth_filter.radius = 0;
        params.normal_filter.radius = 0;
        Frame::preprocess(depth, color, *k, 0.0, &params)
    }

    fn blocks_after_allocation(voxel_size: f64, representation: Representation) -> usize {
        let k = CameraIntrinsics::new(60.0, 60.0, 31.5, 23.5, 64, 48);
        let frame = corner_frame(&k);
        let mut params = VolumeParams::with_voxel_size(voxel_size);
        params.representation = representation;
        let mut volume = DirectionalVolume::new(params);
        volume.allocate_for_frame(&frame, &Se3::identity()).unwrap();
        let mut stats = RunStats::new();
        stats.set_memory(&volume);
        assert_eq!(stats.block_count, volume.block_count());
        stats.block_count
    }

    #[test]
    fn directional_storage_ratio_is_at_least_one_and_grows_with_voxel_size() {
        let ratio_at = |voxel_size: f64| {
            let dtsdf = blocks_after_allocation(voxel_size, Representation::Dtsdf);
            let regular = blocks_after_allocation(voxel_size, Representation::Regular);
            assert!(dtsdf > 0 && regular > 0);
            dtsdf as f64 / regular as f64
        };
        let fine = ratio_at(0.01);
        let coarse = ratio_at(0.02);
        assert!(fine >= 1.0, "ratio {fine}");
        assert!(coarse >= fine, "coarse {coarse} vs fine {fine}");
    }

    #[test]
    fn memory_ratio_uses_block_counts() {
        let mut a = RunStats::new();
        a.block_count = 30;
        let mut b = RunStats::new();
        b.block_count = 12;
        assert_eq!(memory_ratio(&a, &b), 2.5);
        let empty = RunStats::new();
        assert_eq!(memory_ratio(&a, &empty), 30.0);
    }
}
