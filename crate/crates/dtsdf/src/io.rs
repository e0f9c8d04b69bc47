//! Dataset loading, trajectory file I/O, and a synthetic scene generator
//! producing ground-truth RGB-D sequences of analytic objects.
//!
//! Disk sequences follow the TUM RGB-D layout: `depth.txt` / `rgb.txt`
//! index files of `timestamp path` lines, 16-bit PNG depth at 1/5000 m
//! per unit, and an optional `groundtruth.txt` trajectory. Synthetic
//! sequences render analytic primitives with exact ray intersections, so
//! fusion and tracking tests have noise-free ground truth.

use crate::eval::Trajectory;
use crate::frame::{Frame, FrameParams};
use crate::geometry::{CameraIntrinsics, Se3};
use crate::image::{Image, ScalarImage};
use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Depth unit of TUM 16-bit PNGs: raw value 5000 is one meter.
pub const TUM_DEPTH_SCALE: f64 = 5000.0;
/// Timestamp association tolerance between streams, seconds.
pub const ASSOCIATION_TOLERANCE: f64 = 0.02;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("missing index file {path}")]
    MissingIndexFile { path: PathBuf },
    #[error("corrupt image {path}: {detail}")]
    CorruptImage { path: PathBuf, detail: String },
    #[error("parse error at {path}:{line}: {detail}")]
    ParseError {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("frame index {index} out of range ({len} frames)")]
    FrameOutOfRange { index: usize, len: usize },
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

/// Analytic surface primitive. All intersection and distance queries are
/// closed-form.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum Primitive {
    /// Infinite double-sided plane through `anchor` with unit `normal`.
    Plane {
        anchor: Vector3<f64>,
        normal: Vector3<f64>,
    },
    /// Axis-aligned box spanning `min` to `max`.
    Cuboid {
        min: Vector3<f64>,
        max: Vector3<f64>,
    },
    Sphere { center: Vector3<f64>, radius: f64 },
}

/// Procedural intensity over a primitive's surface.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum Texture {
    Uniform { value: f64 },
    /// Axis-aligned cubical checkerboard with cells of `scale` meters.
    Checker { scale: f64, bright: f64, dark: f64 },
    /// Crossed sinusoids; gradient direction varies over the surface,
    /// which keeps in-plane motion photometrically observable.
    Plaid {
        frequency: f64,
        amplitude: f64,
        base: f64,
    },
}

impl Texture {
    pub fn shade(&self, p: &Vector3<f64>) -> f64 {
        match *self {
            Texture::Uniform { value } => value,
            Texture::Checker { scale, bright, dark } => {
                let cell = |v: f64| (v / scale).floor() as i64;
                let parity = cell(p.x) + cell(p.y) + cell(p.z);
                if parity.rem_euclid(2) == 0 {
                    bright
                } else {
                    dark
                }
            }
            Texture::Plaid {
                frequency,
                amplitude,
                base,
            } => {
                base + amplitude * (frequency * p.x).sin()
                    + amplitude * (frequency * p.y).sin()
            }
        }
    }
}

/// One textured primitive.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SceneObject {
    pub primitive: Primitive,
    pub texture: Texture,
}

/// First visible intersection of a ray with a scene.
#[derive(Debug, Clone, Copy)]
pub struct SurfaceHit {
    /// Ray parameter; with camera rays scaled to unit forward component
    /// this equals the camera-space depth.
    pub t: f64,
    pub point: Vector3<f64>,
    /// Unit normal flipped to face the ray origin.
    pub normal: Vector3<f64>,
    pub object: usize,
}

/// Collection of analytic objects observed by a camera path.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub objects: Vec<SceneObject>,
}

fn cuboid_hit(
    min: &Vector3<f64>,
    max: &Vector3<f64>,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
) -> Option<(f64, Vector3<f64>)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut near_axis = 0usize;
    let mut far_axis = 0usize;
    for axis in 0..3 {
        if dir[axis] == 0.0 {
            if origin[axis] < min[axis] || origin[axis] > max[axis] {
                return None;
            }
            continue;
        }
        let mut t1 = (min[axis] - origin[axis]) / dir[axis];
        let mut t2 = (max[axis] - origin[axis]) / dir[axis];
        if t1 > t2 {
            std::mem::swap(&mut t1, &mut t2);
        }
        if t1 > t_near {
            t_near = t1;
            near_axis = axis;
        }
        if t2 < t_far {
            t_far = t2;
            far_axis = axis;
        }
    }
    if t_near > t_far || t_far <= 0.0 {
        return None;
    }
    // Entering from outside hits the near face; rays starting inside see
    // the far face (a room interior).
    let (t, axis) = if t_near > 0.0 {
        (t_near, near_axis)
    } else {
        (t_far, far_axis)
    };
    let mut normal = Vector3::zeros();
    normal[axis] = if dir[axis] > 0.0 { -1.0 } else { 1.0 };
    if t == t_far {
        normal[axis] = -normal[axis];
    }
    Some((t, normal))
}

impl SyntheticScene {
    pub fn new(objects: Vec<SceneObject>) -> Self {
        Self { objects }
    }

    /// Two thin axis-aligned slabs forming an L of `thickness` along z:
    /// an upright arm of length `arm_y` and a base arm of length `arm_x`,
    /// both `arm_width` wide, cornered at `corner`.
    pub fn l_extrusion(
        corner: Vector3<f64>,
        arm_x: f64,
        arm_y: f64,
        arm_width: f64,
        thickness: f64,
        texture: Texture,
    ) -> Vec<SceneObject> {
        let z0 = corner.z;
        let z1 = corner.z + thickness;
        vec![
            SceneObject {
                primitive: Primitive::Cuboid {
                    min: Vector3::new(corner.x, corner.y, z0),
                    max: Vector3::new(corner.x + arm_width, corner.y + arm_y, z1),
                },
                texture,
            },
            SceneObject {
                primitive: Primitive::Cuboid {
                    min: Vector3::new(corner.x, corner.y, z0),
                    max: Vector3::new(corner.x + arm_x, corner.y + arm_width, z1),
                },
                texture,
            },
        ]
    }

    /// First intersection along `dir` from `origin`, with the surface
    /// normal flipped toward the origin side.
    pub fn hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<SurfaceHit> {
        let mut best: Option<SurfaceHit> = None;
        for (idx, obj) in self.objects.iter().enumerate() {
            let candidate = match &obj.primitive {
                Primitive::Plane { anchor, normal } => {
                    let denom = dir.dot(normal);
                    if denom.abs() < 1e-15 {
                        None
                    } else {
                        let t = (anchor - origin).dot(normal) / denom;
                        (t > 0.0).then_some((t, *normal))
                    }
                }
                Primitive::Cuboid { min, max } => cuboid_hit(min, max, origin, dir),
                Primitive::Sphere { center, radius } => {
                    let m = origin - center;
                    let a = dir.dot(dir);
                    let b = 2.0 * m.dot(dir);
                    let c = m.dot(&m) - radius * radius;
                    let disc = b * b - 4.0 * a * c;
                    if disc < 0.0 {
                        None
                    } else {
                        let sq = disc.sqrt();
                        let t0 = (-b - sq) / (2.0 * a);
                        let t1 = (-b + sq) / (2.0 * a);
                        let t = if t0 > 0.0 {
                            Some(t0)
                        } else if t1 > 0.0 {
                            Some(t1)
                        } else {
                            None
                        };
                        t.map(|t| {
                            let p = origin + dir * t;
                            (t, (p - center) / *radius)
                        })
                    }
                }
            };
            if let Some((t, mut normal)) = candidate {
                if best.as_ref().map_or(true, |b| t < b.t) {
                    if normal.dot(dir) > 0.0 {
                        normal = -normal;
                    }
                    best = Some(SurfaceHit {
                        t,
                        point: origin + dir * t,
                        normal,
                        object: idx,
                    });
                }
            }
        }
        best
    }

    /// Unsigned distance from `p` to the nearest surface.
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        let mut best = f64::INFINITY;
        for obj in &self.objects {
            let d = match &obj.primitive {
                Primitive::Plane { anchor, normal } => (p - anchor).dot(normal).abs(),
                Primitive::Cuboid { min, max } => {
                    let mut outside = Vector3::zeros();
                    let mut inside = f64::INFINITY;
                    for axis in 0..3 {
                        let v = p[axis];
                        outside[axis] = (min[axis] - v).max(0.0) + (v - max[axis]).max(0.0);
                        inside = inside.min((v - min[axis]).min(max[axis] - v));
                    }
                    let out = outside.norm();
                    if out > 0.0 {
                        out
                    } else {
                        inside
                    }
                }
                Primitive::Sphere { center, radius } => ((p - center).norm() - radius).abs(),
            };
            best = best.min(d);
        }
        best
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

// ---------------------------------------------------------------------------
// Camera paths
// ---------------------------------------------------------------------------

/// Camera-to-world pose at `eye` looking toward `target`, with image y
/// pointing along world +y (the camera frame is x right, y down,
/// z forward).
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>) -> Se3 {
    let z = (target - eye).normalize();
    let mut down = Vector3::new(0.0, 1.0, 0.0);
    if z.dot(&down).abs() > 0.999 {
        down = Vector3::new(1.0, 0.0, 0.0);
    }
    let x = down.cross(&z).normalize();
    let y = z.cross(&x);
    let rotation = Matrix3::from_columns(&[x, y, z]);
    Se3::new(rotation, *eye)
}

/// Full circle of `frames` poses at constant `radius` and `height` above
/// `center`, all looking at the center. Timestamps advance at `fps`.
pub fn orbit_path(
    center: &Vector3<f64>,
    radius: f64,
    height: f64,
    frames: usize,
    fps: f64,
) -> Vec<(f64, Se3)> {
    (0..frames)
        .map(|i| {
            let phi = 2.0 * std::f64::consts::PI * i as f64 / frames.max(1) as f64;
            let eye = center
                + Vector3::new(radius * phi.cos(), -height, radius * phi.sin());
            (i as f64 / fps, look_at(&eye, center))
        })
        .collect()
}

/// Straight segment of `frames` poses from `from` to `to`, all looking at
/// `target`.
pub fn linear_path(
    from: &Vector3<f64>,
    to: &Vector3<f64>,
    target: &Vector3<f64>,
    frames: usize,
    fps: f64,
) -> Vec<(f64, Se3)> {
    (0..frames)
        .map(|i| {
            let s = if frames > 1 {
                i as f64 / (frames - 1) as f64
            } else {
                0.0
            };
            let eye = from + (to - from) * s;
            (i as f64 / fps, look_at(&eye, target))
        })
        .collect()
}

/// Orbit with a gentle sinusoidal height sway, imitating a hand-held walk
/// around an object so the surfaces are seen under varying angles.
pub fn walk_around_path(
    center: &Vector3<f64>,
    radius: f64,
    sway: f64,
    frames: usize,
    fps: f64,
) -> Vec<(f64, Se3)> {
    (0..frames)
        .map(|i| {
            let phi = 2.0 * std::f64::consts::PI * i as f64 / frames.max(1) as f64;
            let eye = center
                + Vector3::new(
                    radius * phi.cos(),
                    -sway * (2.0 * phi).sin(),
                    radius * phi.sin(),
                );
            (i as f64 / fps, look_at(&eye, center))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Synthetic rendering
// ---------------------------------------------------------------------------

/// Additive depth noise with standard deviation `sigma_factor * z^2`,
/// matching how stereo depth error grows quadratically with range.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma_factor: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma_factor: 0.001,
            seed: 0,
        }
    }
}

fn mix_seed(seed: u64, frame: u64, row: u64) -> u64 {
    // splitmix64 finalizer over the combined stream coordinates.
    let mut z = seed
        .wrapping_add(frame.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(row.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller transform of two uniform draws.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Exact depth and shaded color images of the scene from `pose`.
///
/// Depth is the camera-space z of the first hit; normals and hits are
/// analytic. Noise, when enabled, is seeded per row from the model seed
/// and the frame index, so renders are deterministic regardless of
/// threading or rerun.
pub fn render_synthetic_images(
    scene: &SyntheticScene,
    pose: &Se3,
    intrinsics: &CameraIntrinsics,
    noise: Option<&NoiseModel>,
    frame_index: u64,
) -> (ScalarImage, Image<[f32; 3]>) {
    let origin = *pose.translation();
    let mut depth = ScalarImage::invalid(intrinsics.width, intrinsics.height);
    let mut color = Image::from_fill(intrinsics.width, intrinsics.height, [0.0f32; 3]);
    for y in 0..intrinsics.height {
        let mut rng = noise.map(|n| ChaCha8Rng::seed_from_u64(mix_seed(n.seed, frame_index, y as u64)));
        for x in 0..intrinsics.width {
            let d_cam = intrinsics
                .unproject(x as f64, y as f64, 1.0)
                .expect("pixel centers unproject");
            let d_world = pose.rotate(&d_cam);
            if let Some(hit) = scene.hit(&origin, &d_world) {
                let mut z = hit.t;
                if let (Some(model), Some(rng)) = (noise, rng.as_mut()) {
                    z += model.sigma_factor * z * z * standard_normal(rng);
                }
                if z > 0.0 {
                    depth.set(x, y, z);
                }
                let i = scene.objects[hit.object].texture.shade(&hit.point) as f32;
                color.set(x, y, [i, i, i]);
            } else if let Some(rng) = rng.as_mut() {
                // Keep the noise stream aligned with pixel positions.
                let _ = standard_normal(rng);
            }
        }
    }
    (depth, color)
}

/// Renders and preprocesses one synthetic frame.
pub fn render_synthetic_frame(
    scene: &SyntheticScene,
    pose: &Se3,
    intrinsics: &CameraIntrinsics,
    noise: Option<&NoiseModel>,
    frame_index: u64,
    timestamp: f64,
    params: &FrameParams,
) -> Frame {
    let (depth, color) = render_synthetic_images(scene, pose, intrinsics, noise, frame_index);
    Frame::preprocess(depth, color, *intrinsics, timestamp, params)
}

// ---------------------------------------------------------------------------
// Sequence sources
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum EntryKind {
    Disk {
        depth: PathBuf,
        color: Option<PathBuf>,
    },
    Synthetic {
        pose: Se3,
    },
}

/// One frame of a sequence before decoding.
#[derive(Debug, Clone)]
pub struct SequenceEntry {
    pub timestamp: f64,
    /// Multiplier applied to decoded depth, simulating a sensor whose
    /// depth runs long or short.
    pub depth_scale: f64,
    /// Which simulated sensor produced the frame.
    pub sensor_id: usize,
    kind: EntryKind,
}

/// Enumerated RGB-D sequence: either files on disk in the TUM layout or
/// a synthetic scene with a camera path.
#[derive(Debug, Clone)]
pub struct SequenceSource {
    entries: Vec<SequenceEntry>,
    pub intrinsics: CameraIntrinsics,
    ground_truth: Option<Trajectory>,
    scene: Option<SyntheticScene>,
    noise: Option<NoiseModel>,
    /// Index entries dropped because no partner stream sample was within
    /// the association tolerance.
    pub skipped: usize,
}

impl SequenceSource {
    /// Synthetic source whose ground truth is the rendering path itself.
    pub fn synthetic(
        scene: SyntheticScene,
        path: Vec<(f64, Se3)>,
        intrinsics: CameraIntrinsics,
        noise: Option<NoiseModel>,
    ) -> Self {
        let entries = path
            .iter()
            .map(|(t, pose)| SequenceEntry {
                timestamp: *t,
                depth_scale: 1.0,
                sensor_id: 0,
                kind: EntryKind::Synthetic { pose: *pose },
            })
            .collect();
        let ground_truth = Trajectory::from_samples(path).ok();
        Self {
            entries,
            intrinsics,
            ground_truth,
            scene: Some(scene),
            noise,
            skipped: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[SequenceEntry] {
        &self.entries
    }

    /// Keeps only the first `n` frames.
    pub fn truncate(&mut self, n: usize) {
        self.entries.truncate(n);
    }

    pub fn ground_truth(&self) -> Option<&Trajectory> {
        self.ground_truth.as_ref()
    }

    pub fn scene(&self) -> Option<&SyntheticScene> {
        self.scene.as_ref()
    }

    /// Decoded depth and color of frame `index` before depth scaling.
    pub fn load_raw_unscaled(
        &self,
        index: usize,
    ) -> Result<(ScalarImage, Image<[f32; 3]>), IoError> {
        let entry = self.entries.get(index).ok_or(IoError::FrameOutOfRange {
            index,
            len: self.entries.len(),
        })?;
        match &entry.kind {
            EntryKind::Synthetic { pose } => Ok(render_synthetic_images(
                self.scene.as_ref().expect("synthetic source has a scene"),
                pose,
                &self.intrinsics,
                self.noise.as_ref(),
                index as u64,
            )),
            EntryKind::Disk { depth, color } => {
                let depth_img = decode_tum_depth(depth)?;
                let color_img = match color {
                    Some(path) => decode_rgb(path)?,
                    None => Image::from_fill(depth_img.width(), depth_img.height(), [0.5f32; 3]),
                };
                Ok((depth_img, color_img))
            }
        }
    }

    /// Decoded frame `index` with its sensor depth scale applied.
    pub fn load_raw(&self, index: usize) -> Result<(ScalarImage, Image<[f32; 3]>), IoError> {
        let (mut depth, color) = self.load_raw_unscaled(index)?;
        let factor = self.entries[index].depth_scale;
        if factor != 1.0 {
            for v in depth.data_mut() {
                *v *= factor;
            }
        }
        Ok((depth, color))
    }

    /// Decoded and preprocessed frame `index`.
    pub fn load_frame(&self, index: usize, params: &FrameParams) -> Result<Frame, IoError> {
        let (depth, color) = self.load_raw(index)?;
        let timestamp = self.entries[index].timestamp;
        Ok(Frame::preprocess(
            depth,
            color,
            self.intrinsics,
            timestamp,
            params,
        ))
    }
}

/// Cycles `factors` over the frames of `base`: frame `i` gets factor and
/// sensor id `i mod factors.len()`, simulating interleaved sensors with
/// miscalibrated depth.
pub fn multi_sensor_scaled_source(mut base: SequenceSource, factors: &[f64]) -> SequenceSource {
    assert!(!factors.is_empty(), "factors must be nonempty");
    assert!(factors.iter().all(|f| *f > 0.0), "factors must be positive");
    for (i, entry) in base.entries.iter_mut().enumerate() {
        entry.depth_scale = factors[i % factors.len()];
        entry.sensor_id = i % factors.len();
    }
    base
}

// ---------------------------------------------------------------------------
// TUM layout loading
// ---------------------------------------------------------------------------

fn read_index_file(path: &Path) -> Result<Vec<(f64, String)>, IoError> {
    let text = std::fs::read_to_string(path).map_err(|_| IoError::MissingIndexFile {
        path: path.to_path_buf(),
    })?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(ts), Some(file)) = (parts.next(), parts.next()) else {
            return Err(IoError::ParseError {
                path: path.to_path_buf(),
                line: lineno + 1,
                detail: "expected `timestamp path`".into(),
            });
        };
        let ts: f64 = ts.parse().map_err(|_| IoError::ParseError {
            path: path.to_path_buf(),
            line: lineno + 1,
            detail: format!("bad timestamp `{ts}`"),
        })?;
        out.push((ts, file.to_string()));
    }
    Ok(out)
}

fn decode_tum_depth(path: &Path) -> Result<ScalarImage, IoError> {
    let img = image::open(path).map_err(|e| IoError::CorruptImage {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let image::DynamicImage::ImageLuma16(img) = img else {
        return Err(IoError::CorruptImage {
            path: path.to_path_buf(),
            detail: "expected 16-bit grayscale depth".into(),
        });
    };
    let (w, h) = (img.width(), img.height());
    let mut depth = ScalarImage::invalid(w, h);
    for y in 0..h {
        for x in 0..w {
            let raw = img.get_pixel(x, y).0[0];
            if raw > 0 {
                depth.set(x, y, raw as f64 / TUM_DEPTH_SCALE);
            }
        }
    }
    Ok(depth)
}

fn decode_rgb(path: &Path) -> Result<Image<[f32; 3]>, IoError> {
    let img = image::open(path)
        .map_err(|e| IoError::CorruptImage {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width(), img.height());
    let mut out = Image::from_fill(w, h, [0.0f32; 3]);
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x, y).0;
            out.set(
                x,
                y,
                [
                    p[0] as f32 / 255.0,
                    p[1] as f32 / 255.0,
                    p[2] as f32 / 255.0,
                ],
            );
        }
    }
    Ok(out)
}

/// Loads a TUM-layout sequence rooted at `root`.
///
/// `depth.txt` drives the sequence; each depth sample is paired with the
/// nearest `rgb.txt` sample within the association tolerance and frames
/// without a color partner are skipped (counted in `skipped`). A
/// `groundtruth.txt`, when present, is attached as the reference
/// trajectory.
pub fn load_tum_sequence(
    root: &Path,
    intrinsics: CameraIntrinsics,
) -> Result<SequenceSource, IoError> {
    let depth_index = read_index_file(&root.join("depth.txt"))?;
    let rgb_index = read_index_file(&root.join("rgb.txt"))?;
    let mut entries = Vec::new();
    let mut skipped = 0usize;
    for (ts, depth_file) in &depth_index {
        let nearest = rgb_index
            .iter()
            .min_by(|a, b| {
                (a.0 - ts)
                    .abs()
                    .partial_cmp(&(b.0 - ts).abs())
                    .expect("timestamps are finite")
            })
            .filter(|(rgb_ts, _)| (rgb_ts - ts).abs() <= ASSOCIATION_TOLERANCE);
        match nearest {
            Some((_, rgb_file)) => entries.push(SequenceEntry {
                timestamp: *ts,
                depth_scale: 1.0,
                sensor_id: 0,
                kind: EntryKind::Disk {
                    depth: root.join(depth_file),
                    color: Some(root.join(rgb_file)),
                },
            }),
            None => skipped += 1,
        }
    }
    let gt_path = root.join("groundtruth.txt");
    let ground_truth = if gt_path.exists() {
        Some(read_trajectory(&gt_path)?)
    } else {
        None
    };
    Ok(SequenceSource {
        entries,
        intrinsics,
        ground_truth,
        scene: None,
        noise: None,
        skipped,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    std::fs::write(path, text).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `source` to `root` in the TUM RGB-D layout.
///
/// Depth goes to `depth/<timestamp>.png` as 16-bit PNG at
/// [`TUM_DEPTH_SCALE`] units per meter (invalid pixels become zero),
/// color to `rgb/<timestamp>.png` as 8-bit RGB, each stream with its
/// `timestamp path` index file. The ground-truth trajectory, the scene
/// description, and the camera intrinsics are written alongside when the
/// source carries them, so a reloaded sequence reproduces the original
/// up to pixel quantization.
pub fn export_tum_dataset(source: &SequenceSource, root: &Path) -> Result<(), IoError> {
    let depth_dir = root.join("depth");
    let rgb_dir = root.join("rgb");
    for dir in [&depth_dir, &rgb_dir] {
        std::fs::create_dir_all(dir).map_err(|source| IoError::Io {
            path: dir.clone(),
            source,
        })?;
    }
    let mut depth_index = String::from("# timestamp filename\n");
    let mut rgb_index = String::from("# timestamp filename\n");
    for i in 0..source.len() {
        let (depth, color) = source.load_raw(i)?;
        let t = source.entries()[i].timestamp;
        let name = format!("{t:.6}.png");
        let (w, h) = (depth.width(), depth.height());
        let mut depth_png = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w, h);
        let mut rgb_png = image::ImageBuffer::<image::Rgb<u8>, Vec<u8>>::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let raw = match depth.valid_get(x, y) {
                    Some(d) => (d * TUM_DEPTH_SCALE).round().clamp(0.0, 65535.0) as u16,
                    None => 0,
                };
                depth_png.put_pixel(x, y, image::Luma([raw]));
                let c = color.get(x, y);
                rgb_png.put_pixel(
                    x,
                    y,
                    image::Rgb([
                        (c[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                        (c[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                        (c[2].clamp(0.0, 1.0) * 255.0).round() as u8,
                    ]),
                );
            }
        }
        let dp = depth_dir.join(&name);
        depth_png.save(&dp).map_err(|e| IoError::Io {
            path: dp.clone(),
            source: std::io::Error::other(e.to_string()),
        })?;
        let cp = rgb_dir.join(&name);
        rgb_png.save(&cp).map_err(|e| IoError::Io {
            path: cp.clone(),
            source: std::io::Error::other(e.to_string()),
        })?;
        writeln!(depth_index, "{t:.6} depth/{name}").expect("string write");
        writeln!(rgb_index, "{t:.6} rgb/{name}").expect("string write");
    }
    write_text(&root.join("depth.txt"), &depth_index)?;
    write_text(&root.join("rgb.txt"), &rgb_index)?;
    if let Some(gt) = source.ground_truth() {
        write_trajectory(gt, &root.join("groundtruth.txt"))?;
    }
    if let Some(scene) = source.scene() {
        write_text(&root.join("scene.json"), &scene.to_json())?;
    }
    let k = serde_json::to_string_pretty(&source.intrinsics).expect("intrinsics serialize");
    write_text(&root.join("intrinsics.json"), &k)?;
    Ok(())
}

/// Reads the `intrinsics.json` sidecar written by [`export_tum_dataset`],
/// when present.
pub fn read_intrinsics_sidecar(root: &Path) -> Result<Option<CameraIntrinsics>, IoError> {
    let path = root.join("intrinsics.json");
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|source| IoError::Io {
        path: path.clone(),
        source,
    })?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| IoError::ParseError {
            path,
            line: e.line(),
            detail: e.to_string(),
        })
}

// ---------------------------------------------------------------------------
// Trajectory text format
// ---------------------------------------------------------------------------

/// Formats a trajectory in the TUM text convention, one
/// `timestamp tx ty tz qx qy qz qw` line per pose.
pub fn trajectory_to_string(traj: &Trajectory) -> String {
    let mut out = String::new();
    for (t, pose) in traj.samples() {
        let p = pose.translation();
        let q = pose.rotation_quaternion();
        let v = q.as_ref().coords;
        writeln!(
            out,
            "{t:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            p.x, p.y, p.z, v.x, v.y, v.z, v.w
        )
        .expect("string write");
    }
    out
}

pub fn write_trajectory(traj: &Trajectory, path: &Path) -> Result<(), IoError> {
    std::fs::write(path, trajectory_to_string(traj)).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses the TUM trajectory convention; `path` is used only for error
/// reporting.
pub fn trajectory_from_str(text: &str, path: &Path) -> Result<Trajectory, IoError> {
    let mut traj = Trajectory::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |detail: String| IoError::ParseError {
            path: path.to_path_buf(),
            line: lineno + 1,
            detail,
        };
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| parse_err(e.to_string()))?;
        if fields.len() != 8 {
            return Err(parse_err(format!("expected 8 fields, got {}", fields.len())));
        }
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            fields[7], fields[4], fields[5], fields[6],
        ));
        let pose = Se3::from_quaternion(&q, Vector3::new(fields[1], fields[2], fields[3]));
        traj.push(fields[0], pose)
            .map_err(|e| parse_err(e.to_string()))?;
    }
    Ok(traj)
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory, IoError> {
    let text = std::fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    trajectory_from_str(&text, path)
}



#[cfg(test)]
mod noise_tests {
    use super::*;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(60.0, 60.0, 31.5, 23.5, 64, 48)
    }

    fn plane_scene(z: f64) -> SyntheticScene {
        SyntheticScene::new(vec![SceneObject {
            primitive: Primitive::Plane {
                anchor: Vector3::new(0.0, 0.0, z),
                normal: Vector3::new(0.0, 0.0, -1.0),
            },
            texture: Texture::Uniform { value: 0.5 },
        }])
    }

    #[test]
    fn noise_is_deterministic_and_off_by_default() {
        let scene = plane_scene(2.0);
        let (clean, _) = render_synthetic_images(&scene, &Se3::identity(), &k(), None, 0);
        assert_eq!(clean.get(10, 10), 2.0);

        let noise = NoiseModel {
            sigma_factor: 0.001,
            seed: 42,
        };
        let (a, _) = render_synthetic_images(&scene, &Se3::identity(), &k(), Some(&noise), 3);
        let (b, _) = render_synthetic_images(&scene, &Se3::identity(), &k(), Some(&noise), 3);
        assert_eq!(a.data(), b.data());
        // A different frame index shifts the stream.
        let (c, _) = render_synthetic_images(&scene, &Se3::identity(), &k(), Some(&noise), 4);
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn noise_magnitude_follows_the_quadratic_model() {
        let z = 3.0;
        let scene = plane_scene(z);
        let noise = NoiseModel {
            sigma_factor: 0.001,
            seed: 7,
        };
        let (noisy, _) = render_synthetic_images(&scene, &Se3::identity(), &k(), Some(&noise), 0);
        let sigma_expected = 0.001 * z * z;
        let mut sum_sq = 0.0;
        let mut n = 0;
        for y in 0..noisy.height() {
            for x in 0..noisy.width() {
                // The plane fills the frame fronto-parallel, so the
                // noise-free depth is exactly z.
                let d = noisy.get(x, y) - z;
                sum_sq += d * d;
                n += 1;
            }
        }
        let sigma = (sum_sq / n as f64).sqrt();
        assert!(
            (sigma - sigma_expected).abs() < 0.3 * sigma_expected,
            "sigma {sigma} vs {sigma_expected}"
        );
    }
}


#[cfg(test)]
mod tum_tests {
    use super::*;
    use image::{ImageBuffer, Luma, Rgb};

    fn write_mini_dataset(root: &Path, with_gt: bool) {
        std::fs::create_dir_all(root.join("depth")).unwrap();
        std::fs::create_dir_all(root.join("rgb")).unwrap();
        let mut depth_index = String::from("# depth\n");
        let mut rgb_index = String::from("# rgb\n");
        for i in 0..3u32 {
            let t = i as f64 / 30.0;
            let depth: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(8, 6, |x, y| {
                if (x, y) == (0, 0) {
                    Luma([0u16])
                } else {
                    Luma([(5000 + 100 * i + x + y) as u16])
                }
            });
            let dp = format!("depth/{i}.png");
            depth.save(root.join(&dp)).unwrap();
            depth_index.push_str(&format!("{t:.6} {dp}\n"));

            let rgb: ImageBuffer<Rgb<u8>, Vec<u8>> =
                ImageBuffer::from_fn(8, 6, |x, _| Rgb([x as u8 * 30, 128, 255]));
            let cp = format!("rgb/{i}.png");
            rgb.save(root.join(&cp)).unwrap();
            // Slightly offset rgb timestamps, still within tolerance.
            rgb_index.push_str(&format!("{:.6} {cp}\n", t + 0.005));
        }
        // One depth frame with no rgb partner anywhere near.
        depth_index.push_str("9.000000 depth/0.png\n");
        std::fs::write(root.join("depth.txt"), depth_index).unwrap();
        std::fs::write(root.join("rgb.txt"), rgb_index).unwrap();
        if with_gt {
            std::fs::write(
                root.join("groundtruth.txt"),
                "# gt\n0.0 0 0 0 0 0 0 1\n0.033333 0.1 0 0 0 0 0 1\n",
            )
            .unwrap();
        }
    }

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(60.0, 60.0, 3.5, 2.5, 8, 6)
    }

    #[test]
    fn mini_dataset_round_trips_pixel_exactly() {
        let dir = tempfile::tempdir().unwrap();
        write_mini_dataset(dir.path(), true);
        let source = load_tum_sequence(dir.path(), k()).unwrap();
        assert_eq!(source.len(), 3);
        assert_eq!(source.skipped, 1);
        assert_eq!(source.ground_truth().unwrap().len(), 2);

        let (depth, color) = source.load_raw(1).unwrap();
        // Raw 5000 + 100 + x + y over the depth scale; the (0,0) zero is
        // invalid.
        assert!(depth.valid_get(0, 0).is_none());
        assert_eq!(depth.get(2, 3), 5105.0 / 5000.0);
        assert_eq!(color.get(2, 0)[0], 60.0 / 255.0);
        assert_eq!(color.get(2, 0)[2], 1.0);
    }

    #[test]
    fn missing_index_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        match load_tum_sequence(dir.path(), k()) {
            Err(IoError::MissingIndexFile { path }) => {
                assert!(path.ends_with("depth.txt"));
            }
            other => panic!("expected MissingIndexFile, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_depth_image_is_reported_with_its_path() {
        let dir = tempfile::tempdir().unwrap();
        write_mini_dataset(dir.path(), false);
        std::fs::write(dir.path().join("depth/1.png"), b"not a png").unwrap();
        let source = load_tum_sequence(dir.path(), k()).unwrap();
        match source.load_raw(1) {
            Err(IoError::CorruptImage { path, .. }) => {
                assert!(path.ends_with("depth/1.png"));
            }
            other => panic!("expected CorruptImage, got {other:?}"),
        }
        // An 8-bit depth image is also rejected.
        let rgb: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::new(8, 6);
        rgb.save(dir.path().join("depth/2.png")).unwrap();
        assert!(matches!(
            source.load_raw(2),
            Err(IoError::CorruptImage { .. })
        ));
    }

    #[test]
    fn bad_index_line_is_reported_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path()).unwrap();
        std::fs::write(dir.path().join("depth.txt"), "# ok\n1.0 a.png\nbroken\n").unwrap();
        std::fs::write(dir.path().join("rgb.txt"), "").unwrap();
        match load_tum_sequence(dir.path(), k()) {
            Err(IoError::ParseError { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected ParseError, got {other:?}"),
        }
    }

    #[test]
    fn export_reload_matches_up_to_quantization() {
        let scene = SyntheticScene {
            objects: vec![SceneObject {
                primitive: Primitive::Plane {
                    anchor: Vector3::new(0.0, 0.0, 2.0),
                    normal: Vector3::new(0.0, 0.0, -1.0),
                },
                texture: Texture::Checker {
                    scale: 0.25,
                    bright: 0.8,
                    dark: 0.3,
                },
            }],
        };
        let intrinsics = CameraIntrinsics::new(40.0, 40.0, 15.5, 11.5, 32, 24);
        let path = linear_path(
            &Vector3::zeros(),
            &Vector3::new(0.1, 0.0, 0.0),
            &Vector3::new(0.0, 0.0, 2.0),
            4,
            30.0,
        );
        let source = SequenceSource::synthetic(scene, path, intrinsics, None);
        let dir = tempfile::tempdir().unwrap();
        export_tum_dataset(&source, dir.path()).unwrap();

        assert_eq!(
            read_intrinsics_sidecar(dir.path()).unwrap().unwrap(),
            intrinsics
        );
        let reloaded = load_tum_sequence(dir.path(), intrinsics).unwrap();
        assert_eq!(reloaded.len(), 4);
        assert_eq!(reloaded.skipped, 0);
        assert!(dir.path().join("scene.json").exists());

        let gt = reloaded.ground_truth().unwrap();
        assert_eq!(gt.len(), 4);
        for ((ta, pa), (tb, pb)) in gt.samples().iter().zip(source.ground_truth().unwrap().samples())
        {
            assert!((ta - tb).abs() < 1e-9);
            assert!((pa.translation() - pb.translation()).norm() < 1e-8);
        }

        for i in 0..4 {
            let (depth_a, color_a) = source.load_raw(i).unwrap();
            let (depth_b, color_b) = reloaded.load_raw(i).unwrap();
            for y in 0..depth_a.height() {
                for x in 0..depth_a.width() {
                    match (depth_a.valid_get(x, y), depth_b.valid_get(x, y)) {
                        (Some(a), Some(b)) => {
                            // 16-bit quantization at 1/5000 m per unit.
                            assert!((a - b).abs() <= 0.5 / TUM_DEPTH_SCALE + 1e-12);
                        }
                        (None, None) => {}
                        other => panic!("validity mismatch at ({x},{y}): {other:?}"),
                    }
                    let (a, b) = (color_a.get(x, y), color_b.get(x, y));
                    assert!((a[0] - b[0]).abs() <= 0.5 / 255.0 + 1e-6);
                }
            }
        }
    }
}
