//! Directional voxel volume: six interleaved truncated signed distance
//! fields indexed by signed coordinate axis, stored as hashed 8x8x8 blocks.
//!
//! Distances are stored normalized by the truncation band, so a voxel value
//! of 1 means "at least one truncation distance in front of the surface".
//! Positive values lie on the observed side, negative values behind.

use std::collections::HashMap;
use std::hash::{BuildHasherDefault, DefaultHasher};
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::Frame;
use crate::geometry::Se3;

/// Voxels per block edge.
pub const BLOCK_EDGE: i64 = 8;
/// Voxels per block.
pub const BLOCK_VOLUME: usize = 512;

/// Deterministic hasher so that map iteration order is reproducible across
/// runs. No floating point accumulation crosses blocks, so ordering never
/// changes results; stable ordering still helps debugging and snapshots.
pub type DeterministicState = BuildHasherDefault<DefaultHasher>;

#[derive(Debug, Error)]
pub enum VolumeError {
    /// The configured block budget is exhausted.
    #[error("block budget of {budget} blocks exhausted")]
    CapacityExceeded { budget: usize },
    #[error("snapshot io: {0}")]
    Io(#[from] std::io::Error),
    #[error("snapshot format: {0}")]
    Snapshot(String),
}

/// One of the six signed coordinate axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    XPos,
    XNeg,
    YPos,
    YNeg,
    ZPos,
    ZNeg,
}

impl Direction {
    pub const ALL: [Direction; 6] = [
        Direction::XPos,
        Direction::XNeg,
        Direction::YPos,
        Direction::YNeg,
        Direction::ZPos,
        Direction::ZNeg,
    ];

    /// Canonical direction used when the volume runs without directional
    /// separation.
    pub const CANONICAL: Direction = Direction::XPos;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Direction {
        Self::ALL[i]
    }

    /// Bit in a direction mask.
    pub fn bit(self) -> u8 {
        1 << self.index()
    }

    pub fn unit(self) -> Vector3<f64> {
        match self {
            Direction::XPos => Vector3::new(1.0, 0.0, 0.0),
            Direction::XNeg => Vector3::new(-1.0, 0.0, 0.0),
            Direction::YPos => Vector3::new(0.0, 1.0, 0.0),
            Direction::YNeg => Vector3::new(0.0, -1.0, 0.0),
            Direction::ZPos => Vector3::new(0.0, 0.0, 1.0),
            Direction::ZNeg => Vector3::new(0.0, 0.0, -1.0),
        }
    }
}

/// Block coordinates of one direction's field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockKey {
    pub x: i32,
    pub y: i32,
    pub z: i32,
    pub direction: Direction,
}

/// Block coordinates shared by all directions.
pub type BlockLocation = (i32, i32, i32);

/// A single voxel: normalized signed distance, fusion weight, and color.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Voxel {
    pub sdf: f32,
    pub weight: f32,
    pub color: [f32; 3],
    pub color_weight: f32,
}

impl Voxel {
    pub fn is_observed(&self) -> bool {
        self.weight > 0.0
    }

    /// Weighted running average update of the distance value.
    pub fn integrate(&mut self, sdf: f64, weight: f64, max_weight: f64) {
        let w_old = self.weight as f64;
        let w_new = w_old + weight;
        self.sdf = ((self.sdf as f64 * w_old + sdf * weight) / w_new) as f32;
        self.weight = w_new.min(max_weight) as f32;
    }

    /// Weighted running average update of the color.
    pub fn integrate_color(&mut self, color: [f32; 3], weight: f64, max_weight: f64) {
        if weight <= 0.0 {
            return;
        }
        let w_old = self.color_weight as f64;
        let w_new = w_old + weight;
        for c in 0..3 {
            self.color[c] =
                ((self.color[c] as f64 * w_old + color[c] as f64 * weight) / w_new) as f32;
        }
        self.color_weight = w_new.min(max_weight) as f32;
    }
}

/// An 8x8x8 brick of voxels.
#[derive(Debug, Clone)]
pub struct VoxelBlock {
    voxels: Box<[Voxel; BLOCK_VOLUME]>,
}

impl VoxelBlock {
    fn new() -> Self {
        Self {
            voxels: vec![Voxel::default(); BLOCK_VOLUME]
                .into_boxed_slice()
                .try_into()
                .unwrap(),
        }
    }

    /// Flat index of in-block offsets, x fastest.
    pub fn flat(i: u32, j: u32, k: u32) -> usize {
        debug_assert!(i < 8 && j < 8 && k < 8);
        ((k * 8 + j) * 8 + i) as usize
    }

    pub fn voxel(&self, i: u32, j: u32, k: u32) -> &Voxel {
        &self.voxels[Self::flat(i, j, k)]
    }

    pub fn voxel_mut(&mut self, i: u32, j: u32, k: u32) -> &mut Voxel {
        &mut self.voxels[Self::flat(i, j, k)]
    }

    pub fn voxels(&self) -> &[Voxel; BLOCK_VOLUME] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [Voxel; BLOCK_VOLUME] {
        &mut self.voxels
    }
}

/// Whether the volume keeps six directional fields or one classical field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    Dtsdf,
    Regular,
}

/// Construction parameters of a [`DirectionalVolume`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct VolumeParams {
    /// Voxel edge length, meters.
    pub voxel_size: f64,
    /// Truncation band, meters. Distances are stored divided by this.
    pub truncation: f64,
    /// Direction membership half-angle, radians, in `(pi/4, pi/2]`.
    pub theta: f64,
    pub representation: Representation,
    /// Maximum number of allocated blocks across all directions.
    pub block_budget: usize,
}

impl VolumeParams {
    pub fn with_voxel_size(voxel_size: f64) -> Self {
        Self {
            voxel_size,
            truncation: 4.0 * voxel_size,
            theta: 65.0f64.to_radians(),
            representation: Representation::Dtsdf,
            block_budget: 1 << 22,
        }
    }
}

impl Default for VolumeParams {
    fn default() -> Self {
        Self::with_voxel_size(0.01)
    }
}

/// Trilinear interpolation result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelSample {
    pub sdf: f64,
    pub weight: f64,
    pub color: [f32; 3],
    pub color_weight: f64,
}

/// Distance and weight field of one block plus a one voxel halo, gathered
/// for gradient evaluation without per-voxel hash lookups.
pub struct PaddedBlock {
    sdf: Box<[f32; 1000]>,
    weight: Box<[f32; 1000]>,
}

impl PaddedBlock {
    pub fn new() -> Self {
        Self {
            sdf: vec![0.0; 1000].into_boxed_slice().try_into().unwrap(),
            weight: vec![0.0; 1000].into_boxed_slice().try_into().unwrap(),
        }
    }

    /// Offsets relative to the block origin, each in `-1..=8`.
    fn flat(i: i64, j: i64, k: i64) -> usize {
        debug_assert!((-1..=8).contains(&i) && (-1..=8).contains(&j) && (-1..=8).contains(&k));
        (((k + 1) * 10 + (j + 1)) * 10 + (i + 1)) as usize
    }

    pub fn sdf(&self, i: i64, j: i64, k: i64) -> f32 {
        self.sdf[Self::flat(i, j, k)]
    }

    pub fn weight(&self, i: i64, j: i64, k: i64) -> f32 {
        self.weight[Self::flat(i, j, k)]
    }

    pub fn observed(&self, i: i64, j: i64, k: i64) -> bool {
        self.weight(i, j, k) > 0.0
    }
}

impl Default for PaddedBlock {
    fn default() -> Self {
        Self::new()
    }
}

/// The directional voxel volume.
pub struct DirectionalVolume {
    params: VolumeParams,
    blocks: HashMap<BlockKey, VoxelBlock, DeterministicState>,
}

impl DirectionalVolume {
    pub fn new(params: VolumeParams) -> Self {
        assert!(params.voxel_size > 0.0);
        assert!(params.truncation > 0.0);
        assert!(
            params.theta > std::f64::consts::FRAC_PI_4
                && params.theta <= std::f64::consts::FRAC_PI_2,
            "membership half-angle must lie in (pi/4, pi/2]"
        );
        Self {
            params,
            blocks: HashMap::default(),
        }
    }

    pub fn params(&self) -> &VolumeParams {
        &self.params
    }

    pub fn voxel_size(&self) -> f64 {
        self.params.voxel_size
    }

    pub fn truncation(&self) -> f64 {
        self.params.truncation
    }

    pub fn representation(&self) -> Representation {
        self.params.representation
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_counts_per_direction(&self) -> [usize; 6] {
        let mut counts = [0usize; 6];
        for key in self.blocks.keys() {
            counts[key.direction.index()] += 1;
        }
        counts
    }

    /// Approximate resident size of the voxel payload, bytes.
    pub fn memory_bytes(&self) -> usize {
        self.blocks.len()
            * (BLOCK_VOLUME * std::mem::size_of::<Voxel>() + std::mem::size_of::<BlockKey>())
    }

    /// Direction membership weights of a world-frame normal under this
    /// volume's representation.
    pub fn memberships(&self, normal: &Vector3<f64>) -> [f64; 6] {
        crate::fusion::direction_memberships(normal, self.params.theta, self.params.representation)
    }

    pub fn block(&self, key: &BlockKey) -> Option<&VoxelBlock> {
        self.blocks.get(key)
    }

    pub fn block_keys(&self) -> impl Iterator<Item = &BlockKey> {
        self.blocks.keys()
    }

    pub fn blocks_mut(
        &mut self,
    ) -> &mut HashMap<BlockKey, VoxelBlock, DeterministicState> {
        &mut self.blocks
    }

    /// Locations (without direction) of all allocated blocks, deduplicated.
    pub fn block_locations(&self) -> Vec<BlockLocation> {
        let mut locs: Vec<BlockLocation> = self
            .blocks
            .keys()
            .map(|k| (k.x, k.y, k.z))
            .collect();
        locs.sort_unstable();
        locs.dedup();
        locs
    }

    fn ensure_block(&mut self, key: BlockKey) -> Result<bool, VolumeError> {
        if self.blocks.contains_key(&key) {
            return Ok(false);
        }
        if self.blocks.len() >= self.params.block_budget {
            return Err(VolumeError::CapacityExceeded {
                budget: self.params.block_budget,
            });
        }
        self.blocks.insert(key, VoxelBlock::new());
        Ok(true)
    }

    /// World-frame center of a voxel given its global integer coordinates.
    pub fn voxel_center(&self, v: (i64, i64, i64)) -> Vector3<f64> {
        Vector3::new(
            (v.0 as f64 + 0.5) * self.params.voxel_size,
            (v.1 as f64 + 0.5) * self.params.voxel_size,
            (v.2 as f64 + 0.5) * self.params.voxel_size,
        )
    }

    /// Mutable voxel of one direction at global voxel coordinates,
    /// allocating its block on demand.
    pub fn voxel_mut(
        &mut self,
        direction: Direction,
        v: (i64, i64, i64),
    ) -> Result<&mut Voxel, VolumeError> {
        let (bx, i) = split_coord(v.0);
        let (by, j) = split_coord(v.1);
        let (bz, k) = split_coord(v.2);
        let key = BlockKey {
            x: bx,
            y: by,
            z: bz,
            direction,
        };
        self.ensure_block(key)?;
        Ok(self.blocks.get_mut(&key).unwrap().voxel_mut(i, j, k))
    }

    /// Voxel value of one direction at global voxel coordinates.
    pub fn voxel_at(&self, direction: Direction, v: (i64, i64, i64)) -> Option<&Voxel> {
        let (bx, i) = split_coord(v.0);
        let (by, j) = split_coord(v.1);
        let (bz, k) = split_coord(v.2);
        let key = BlockKey {
            x: bx,
            y: by,
            z: bz,
            direction,
        };
        self.blocks.get(&key).map(|b| b.voxel(i, j, k))
    }

    /// Copies one block and a one voxel halo of a direction's field into
    /// `out`. Unallocated space reads as weight 0.
    pub fn fill_padded(&self, direction: Direction, loc: BlockLocation, out: &mut PaddedBlock) {
        out.sdf.fill(0.0);
        out.weight.fill(0.0);
        for nz in -1..=1i32 {
            for ny in -1..=1i32 {
                for nx in -1..=1i32 {
                    let key = BlockKey {
                        x: loc.0 + nx,
                        y: loc.1 + ny,
                        z: loc.2 + nz,
                        direction,
                    };
                    let Some(block) = self.blocks.get(&key) else {
                        continue;
                    };
                    // In-halo coordinate range covered by this neighbor.
                    let range = |n: i32| -> (i64, i64) {
                        match n {
                            -1 => (7, 8),
                            0 => (0, 8),
                            _ => (0, 1),
                        }
                    };
                    let (x0, x1) = range(nx);
                    let (y0, y1) = range(ny);
                    let (z0, z1) = range(nz);
                    for k in z0..z1 {
                        for j in y0..y1 {
                            for i in x0..x1 {
                                let v = block.voxel(i as u32, j as u32, k as u32);
                                let out_i = i + nx as i64 * 8;
                                let out_j = j + ny as i64 * 8;
                                let out_k = k + nz as i64 * 8;
                                let f = PaddedBlock::flat(out_i, out_j, out_k);
                                out.sdf[f] = v.sdf;
                                out.weight[f] = v.weight;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Allocates every block of `direction` that the world-space segment
    /// `[a, b]` passes through. Returns the number of new blocks.
    pub fn allocate_segment(
        &mut self,
        a: &Vector3<f64>,
        b: &Vector3<f64>,
        direction: Direction,
    ) -> Result<usize, VolumeError> {
        let cell = self.params.voxel_size * BLOCK_EDGE as f64;
        let mut fresh = 0;
        for (x, y, z) in cells_on_segment(a, b, cell) {
            let key = BlockKey {
                x,
                y,
                z,
                direction,
            };
            if self.ensure_block(key)? {
                fresh += 1;
            }
        }
        Ok(fresh)
    }

    /// Allocates the truncation band of every valid depth pixel of `frame`
    /// posed at `pose`, in every direction its normal belongs to.
    pub fn allocate_for_frame(&mut self, frame: &Frame, pose: &Se3) -> Result<usize, VolumeError> {
        let depth = frame.depth();
        let k = frame.intrinsics();
        let tau = self.params.truncation;
        let mut fresh = 0;
        for y in 0..depth.height() {
            for x in 0..depth.width() {
                let Some(z) = depth.valid_get(x, y) else {
                    continue;
                };
                let Some(n_cam) = frame.normal_at(x, y) else {
                    continue;
                };
                let Ok(p_cam) = k.unproject(x as f64, y as f64, z) else {
                    continue;
                };
                let p = pose.transform(&p_cam);
                let n = pose.rotate(&n_cam);
                let a = p - n * tau;
                let b = p + n * tau;
                let weights = self.memberships(&n);
                for d in Direction::ALL {
                    if weights[d.index()] > 0.0 {
                        fresh += self.allocate_segment(&a, &b, d)?;
                    }
                }
            }
        }
        Ok(fresh)
    }

    /// Trilinear interpolation of one direction's field at a world point.
    ///
    /// Corners without observations are excluded and the remaining corner
    /// weights renormalized; `None` when nothing in the support has been
    /// observed.
    pub fn sample(&self, direction: Direction, p: &Vector3<f64>) -> Option<VoxelSample> {
        let (base, weights) = trilinear_support(p, self.params.voxel_size);
        let mut sdf = 0.0;
        let mut w_d = 0.0;
        let mut tri_d = 0.0;
        let mut color = [0.0f64; 3];
        let mut w_c = 0.0;
        let mut tri_c = 0.0;
        for (offset, tw) in weights {
            if tw == 0.0 {
                continue;
            }
            let v = (base.0 + offset.0, base.1 + offset.1, base.2 + offset.2);
            let Some(voxel) = self.voxel_at(direction, v) else {
                continue;
            };
            if voxel.weight > 0.0 {
                sdf += tw * voxel.sdf as f64;
                w_d += tw * voxel.weight as f64;
                tri_d += tw;
            }
            if voxel.color_weight > 0.0 {
                for c in 0..3 {
                    color[c] += tw * voxel.color[c] as f64;
                }
                w_c += tw * voxel.color_weight as f64;
                tri_c += tw;
            }
        }
        if tri_d < 1e-12 {
            return None;
        }
        let color = if tri_c > 1e-12 {
            [
                (color[0] / tri_c) as f32,
                (color[1] / tri_c) as f32,
                (color[2] / tri_c) as f32,
            ]
        } else {
            [0.0; 3]
        };
        Some(VoxelSample {
            sdf: sdf / tri_d,
            weight: w_d / tri_d,
            color,
            color_weight: if tri_c > 1e-12 { w_c / tri_c } else { 0.0 },
        })
    }

    /// Normalized gradient of one direction's interpolated field.
    ///
    /// Central differences with one voxel of spacing; `None` when any probe
    /// is unobserved or the gradient is degenerate.
    pub fn sdf_gradient(&self, direction: Direction, p: &Vector3<f64>) -> Option<Vector3<f64>> {
        let h = self.params.voxel_size;
        let mut g = Vector3::zeros();
        for axis in 0..3 {
            let mut hi = *p;
            let mut lo = *p;
            hi[axis] += h;
            lo[axis] -= h;
            g[axis] = self.sample(direction, &hi)?.sdf - self.sample(direction, &lo)?.sdf;
        }
        let norm = g.norm();
        if norm < 1e-6 {
            None
        } else {
            Some(g / norm)
        }
    }

    /// Serializes the volume to a versioned little-endian snapshot.
    pub fn save_snapshot(&self, path: &Path) -> Result<(), VolumeError> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.params.voxel_size.to_le_bytes())?;
        w.write_all(&self.params.truncation.to_le_bytes())?;
        let rep = match self.params.representation {
            Representation::Dtsdf => 0u8,
            Representation::Regular => 1u8,
        };
        w.write_all(&[rep])?;
        w.write_all(&(self.blocks.len() as u64).to_le_bytes())?;
        let mut keys: Vec<&BlockKey> = self.blocks.keys().collect();
        keys.sort();
        for key in keys {
            let block = &self.blocks[key];
            w.write_all(&key.x.to_le_bytes())?;
            w.write_all(&key.y.to_le_bytes())?;
            w.write_all(&key.z.to_le_bytes())?;
            w.write_all(&[key.direction.index() as u8])?;
            for v in block.voxels.iter() {
                w.write_all(&v.sdf.to_le_bytes())?;
                w.write_all(&v.weight.to_le_bytes())?;
                for c in v.color {
                    w.write_all(&c.to_le_bytes())?;
                }
                w.write_all(&v.color_weight.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a snapshot produced by [`DirectionalVolume::save_snapshot`].
    pub fn load_snapshot(path: &Path) -> Result<Self, VolumeError> {
        let file = std::fs::File::open(path)?;
        let mut r = std::io::BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(VolumeError::Snapshot("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(VolumeError::Snapshot(format!(
                "unsupported version {version}"
            )));
        }
        let voxel_size = read_f64(&mut r)?;
        let truncation = read_f64(&mut r)?;
        let representation = match read_u8(&mut r)? {
            0 => Representation::Dtsdf,
            1 => Representation::Regular,
            other => {
                return Err(VolumeError::Snapshot(format!(
                    "unknown representation {other}"
                )))
            }
        };
        let count = read_u64(&mut r)?;
        let mut volume = DirectionalVolume::new(VolumeParams {
            voxel_size,
            truncation,
            ..VolumeParams::with_voxel_size(voxel_size)
        });
        volume.params.representation = representation;
        for _ in 0..count {
            let x = read_i32(&mut r)?;
            let y = read_i32(&mut r)?;
            let z = read_i32(&mut r)?;
            let d = read_u8(&mut r)? as usize;
            if d >= 6 {
                return Err(VolumeError::Snapshot(format!("bad direction {d}")));
            }
            let key = BlockKey {
                x,
                y,
                z,
                direction: Direction::from_index(d),
            };
            let mut block = VoxelBlock::new();
            for v in block.voxels.iter_mut() {
                v.sdf = read_f32(&mut r)?;
                v.weight = read_f32(&mut r)?;
                for c in 0..3 {
                    v.color[c] = read_f32(&mut r)?;
                }
                v.color_weight = read_f32(&mut r)?;
            }
            volume.blocks.insert(key, block);
        }
        Ok(volume)
    }
}

const MAGIC: &[u8; 8] = b"DTSDFVOX";
const VERSION: u32 = 1;

fn read_u8(r: &mut impl Read) -> std::io::Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_i32(r: &mut impl Read) -> std::io::Result<i32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(i32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read) -> std::io::Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Splits a global voxel coordinate into block and in-block parts.
pub(crate) fn split_coord(v: i64) -> (i32, u32) {
    let b = v.div_euclid(BLOCK_EDGE);
    let i = v.rem_euclid(BLOCK_EDGE);
    (b as i32, i as u32)
}

/// Global voxel coordinates of a block's origin voxel.
pub fn block_origin_voxel(loc: BlockLocation) -> (i64, i64, i64) {
    (
        loc.0 as i64 * BLOCK_EDGE,
        loc.1 as i64 * BLOCK_EDGE,
        loc.2 as i64 * BLOCK_EDGE,
    )
}

/// Base voxel and the eight `(offset, weight)` pairs of trilinear
/// interpolation at `p`, for voxel centers at `(index + 0.5) * size`.
pub fn trilinear_support(
    p: &Vector3<f64>,
    voxel_size: f64,
) -> ((i64, i64, i64), [((i64, i64, i64), f64); 8]) {
    let g = p / voxel_size - Vector3::repeat(0.5);
    let fx = g.x.floor();
    let fy = g.y.floor();
    let fz = g.z.floor();
    let (rx, ry, rz) = (g.x - fx, g.y - fy, g.z - fz);
    let base = (fx as i64, fy as i64, fz as i64);
    let mut out = [((0i64, 0i64, 0i64), 0.0f64); 8];
    for c in 0..8usize {
        let (ox, oy, oz) = ((c & 1) as i64, ((c >> 1) & 1) as i64, ((c >> 2) & 1) as i64);
        let w = (if ox == 1 { rx } else { 1.0 - rx })
            * (if oy == 1 { ry } else { 1.0 - ry })
            * (if oz == 1 { rz } else { 1.0 - rz });
        out[c] = ((ox, oy, oz), w);
    }
    (base, out)
}

/// Grid cells of edge `cell` that the segment `[a, b]` passes through,
/// by 3D digital differential analysis.
fn cells_on_segment(a: &Vector3<f64>, b: &Vector3<f64>, cell: f64) -> Vec<(i32, i32, i32)> {
    let d = b - a;
    let mut cur = [
        (a.x / cell).floor() as i64,
        (a.y / cell).floor() as i64,
        (a.z / cell).floor() as i64,
    ];
    let mut out = Vec::with_capacity(8);
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for axis in 0..3 {
        if d[axis] > 0.0 {
            step[axis] = 1;
            t_max[axis] = ((cur[axis] + 1) as f64 * cell - a[axis]) / d[axis];
            t_delta[axis] = cell / d[axis];
        } else if d[axis] < 0.0 {
            step[axis] = -1;
            t_max[axis] = (cur[axis] as f64 * cell - a[axis]) / d[axis];
            t_delta[axis] = -cell / d[axis];
        }
    }
    loop {
        out.push((cur[0] as i32, cur[1] as i32, cur[2] as i32));
        let axis = (0..3)
            .min_by(|&i, &j| t_max[i].partial_cmp(&t_max[j]).unwrap())
            .unwrap();
        if t_max[axis] > 1.0 {
            break;
        }
        cur[axis] += step[axis];
        t_max[axis] += t_delta[axis];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn direction_indices_round_trip() {
        for d in Direction::ALL {
            assert_eq!(Direction::from_index(d.index()), d);
            assert_eq!(d.bit().count_ones(), 1);
            assert_abs_diff_eq!(d.unit().norm(), 1.0);
        }
        assert_eq!(Direction::XNeg.unit(), -Direction::XPos.unit());
        assert_eq!(Direction::YNeg.unit(), -Direction::YPos.unit());
        assert_eq!(Direction::ZNeg.unit(), -Direction::ZPos.unit());
    }

    #[test]
    fn voxel_running_average() {
        let mut v = Voxel::default();
        v.integrate(0.5, 2.0, 128.0);
        assert_abs_diff_eq!(v.sdf as f64, 0.5, epsilon = 1e-7);
        assert_abs_diff_eq!(v.weight as f64, 2.0, epsilon = 0.0);
        v.integrate(-0.5, 2.0, 128.0);
        assert_abs_diff_eq!(v.sdf as f64, 0.0, epsilon = 1e-7);
        assert_abs_diff_eq!(v.weight as f64, 4.0, epsilon = 0.0);
    }

    #[test]
    fn voxel_weight_caps_but_average_still_moves() {
        let mut v = Voxel::default();
        v.integrate(1.0, 100.0, 128.0);
        v.integrate(1.0, 100.0, 128.0);
        assert_eq!(v.weight, 128.0);
        v.integrate(0.0, 128.0, 128.0);
        assert_abs_diff_eq!(v.sdf as f64, 0.5, epsilon = 1e-6);
        assert_eq!(v.weight, 128.0);
    }

    #[test]
    fn split_coord_handles_negatives() {
        assert_eq!(split_coord(0), (0, 0));
        assert_eq!(split_coord(7), (0, 7));
        assert_eq!(split_coord(8), (1, 0));
        assert_eq!(split_coord(-1), (-1, 7));
        assert_eq!(split_coord(-8), (-1, 0));
        assert_eq!(split_coord(-9), (-2, 7));
    }

    fn segment_hits_cell(a: &Vector3<f64>, b: &Vector3<f64>, cell: f64, c: (i32, i32, i32)) -> bool {
        let min = Vector3::new(c.0 as f64, c.1 as f64, c.2 as f64) * cell;
        let max = min + Vector3::repeat(cell);
        let d = b - a;
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        for axis in 0..3 {
            if d[axis].abs() < 1e-300 {
                if a[axis] < min[axis] || a[axis] > max[axis] {
                    return false;
                }
            } else {
                let inv = 1.0 / d[axis];
                let (mut ta, mut tb) = ((min[axis] - a[axis]) * inv, (max[axis] - a[axis]) * inv);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
                if t0 > t1 {
                    return false;
                }
            }
        }
        true
    }

    #[test]
    fn segment_traversal_matches_slab_oracle() {
        let cell = 0.08;
        let cases = [
            (
                Vector3::new(0.013, 0.027, 0.041),
                Vector3::new(0.301, -0.177, 0.203),
            ),
            (
                Vector3::new(-0.2501, 0.1303, 0.0907),
                Vector3::new(-0.0013, 0.1404, -0.2211),
            ),
            (Vector3::new(0.03, 0.03, 0.03), Vector3::new(0.03, 0.03, 0.03)),
            (
                Vector3::new(0.011, 0.033, 0.102),
                Vector3::new(0.011, 0.033, -0.415),
            ),
        ];
        for (a, b) in cases {
            let mut got = cells_on_segment(&a, &b, cell);
            got.sort_unstable();
            got.dedup();
            let mut want = Vec::new();
            let lo = a.inf(&b);
            let hi = a.sup(&b);
            let range = |v: f64, up: bool| {
                if up {
                    (v / cell).floor() as i32 + 1
                } else {
                    (v / cell).floor() as i32 - 1
                }
            };
            for z in range(lo.z, false)..=range(hi.z, true) {
                for y in range(lo.y, false)..=range(hi.y, true) {
                    for x in range(lo.x, false)..=range(hi.x, true) {
                        if segment_hits_cell(&a, &b, cell, (x, y, z)) {
                            want.push((x, y, z));
                        }
                    }
                }
            }
            want.sort_unstable();
            assert_eq!(got, want, "segment {a:?} -> {b:?}");
        }
    }

    #[test]
    fn allocation_is_idempotent_and_counts_new_blocks() {
        let mut vol = DirectionalVolume::new(VolumeParams::with_voxel_size(0.01));
        let a = Vector3::new(0.301, 0.122, 0.093);
        let b = Vector3::new(0.301, 0.122, 0.413);
        let first = vol.allocate_segment(&a, &b, Direction::ZNeg).unwrap();
        assert!(first >= 4);
        let again = vol.allocate_segment(&a, &b, Direction::ZNeg).unwrap();
        assert_eq!(again, 0);
        assert_eq!(vol.block_count(), first);
        // A different direction allocates its own blocks at the same places.
        let other = vol.allocate_segment(&a, &b, Direction::XPos).unwrap();
        assert_eq!(other, first);
    }

    #[test]
    fn allocation_respects_block_budget() {
        let mut params = VolumeParams::with_voxel_size(0.01);
        params.block_budget = 2;
        let mut vol = DirectionalVolume::new(params);
        let err = vol
            .allocate_segment(
                &Vector3::new(0.01, 0.01, 0.01),
                &Vector3::new(0.6, 0.01, 0.01),
                Direction::XPos,
            )
            .unwrap_err();
        assert!(matches!(err, VolumeError::CapacityExceeded { budget: 2 }));
    }

    fn write_voxel(vol: &mut DirectionalVolume, d: Direction, v: (i64, i64, i64), voxel: Voxel) {
        let (bx, i) = split_coord(v.0);
        let (by, j) = split_coord(v.1);
        let (bz, k) = split_coord(v.2);
        let key = BlockKey {
            x: bx,
            y: by,
            z: bz,
            direction: d,
        };
        vol.ensure_block(key).unwrap();
        *vol.blocks.get_mut(&key).unwrap().voxel_mut(i, j, k) = voxel;
    }

    #[test]
    fn sample_interpolates_between_observed_voxels() {
        let mut vol = DirectionalVolume::new(VolumeParams::with_voxel_size(0.01));
        let d = Direction::ZNeg;
        write_voxel(
            &mut vol,
            d,
            (2, 3, 4),
            Voxel {
                sdf: 0.2,
                weight: 5.0,
                color: [1.0, 0.0, 0.0],
                color_weight: 5.0,
            },
        );
        write_voxel(
            &mut vol,
            d,
            (3, 3, 4),
            Voxel {
                sdf: 0.4,
                weight: 5.0,
                color: [0.0, 1.0, 0.0],
                color_weight: 5.0,
            },
        );
        // Midway between the two voxel centers; all other corners are
        // unobserved and drop out by renormalization.
        let p = Vector3::new(0.030, 0.035, 0.045);
        let s = vol.sample(d, &p).unwrap();
        assert_abs_diff_eq!(s.sdf, 0.3, epsilon = 1e-6);
        assert_abs_diff_eq!(s.weight, 5.0, epsilon = 1e-6);
        assert_abs_diff_eq!(s.color[0] as f64, 0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(s.color[1] as f64, 0.5, epsilon = 1e-6);
    }

    #[test]
    fn sample_is_exact_at_voxel_centers() {
        let mut vol = DirectionalVolume::new(VolumeParams::with_voxel_size(0.01));
        let d = Direction::XPos;
        write_voxel(
            &mut vol,
            d,
            (5, 5, 5),
            Voxel {
                sdf: -0.25,
                weight: 3.0,
                ..Voxel::default()
            },
        );
        let s = vol.sample(d, &vol.voxel_center((5, 5, 5))).unwrap();
        assert_abs_diff_eq!(s.sdf, -0.25, epsilon = 1e-7);
    }

    #[test]
    fn sample_absent_when_unobserved() {
        let mut vol = DirectionalVolume::new(VolumeParams::with_voxel_size(0.01));
        assert!(vol.sample(Direction::XPos, &Vector3::new(0.05, 0.05, 0.05)).is_none());
        // An allocated but never fused block still reports absence.
        vol.ensure_block(BlockKey {
            x: 0,
            y: 0,
            z: 0,
            direction: Direction::XPos,
        })
        .unwrap();
        assert!(vol.sample(Direction::XPos, &Vector3::new(0.05, 0.05, 0.05)).is_none());
    }

    /// Fills a direction's field with the normalized distance to an analytic
    /// plane through `origin` with unit normal `n`.
    fn fill_plane(vol: &mut DirectionalVolume, d: Direction, origin: &Vector3<f64>, n: &Vector3<f64>) {
        let tau = vol.truncation();
        for z in -8..16i64 {
            for y in -8..16i64 {
                for x in -8..16i64 {
                    let p = vol.voxel_center((x, y, z));
                    let dist = (p - origin).dot(n) / tau;
                    if dist.abs() <= 1.5 {
                        write_voxel(
                            vol,
                            d,
                            (x, y, z),
                            Voxel {
                                sdf: dist.clamp(-1.0, 1.0) as f32,
                                weight: 10.0,
                                ..Voxel::default()
                            },
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn gradient_of_plane_field_matches_plane_normal() {
        let mut vol = DirectionalVolume::new(VolumeParams::with_voxel_size(0.01));
        let n = Vector3::new(0.0, 0.0, -1.0);
        let origin = Vector3::new(0.04, 0.04, 0.052);
        fill_plane(&mut vol, Direction::ZNeg, &origin, &n);
        let g = vol
            .sdf_gradient(Direction::ZNeg, &Vector3::new(0.041, 0.043, 0.050))
            .unwrap();
        let angle = g.dot(&n).clamp(-1.0, 1.0).acos().to_degrees();
        assert!(angle < 2.0, "gradient off by {angle} degrees");
    }

    #[test]
    fn gradient_absent_outside_observed_region() {
        let mut vol = DirectionalVolume::new(VolumeParams::with_voxel_size(0.01));
        write_voxel(
            &mut vol,
            Direction::XPos,
            (4, 4, 4),
            Voxel {
                sdf: 0.1,
                weight: 1.0,
                ..Voxel::default()
            },
        );
        assert!(vol
            .sdf_gradient(Direction::XPos, &Vector3::new(0.5, 0.5, 0.5))
            .is_none());
    }

    #[test]
    fn gradient_absent_in_flat_field() {
        let mut vol = DirectionalVolume::new(VolumeParams::with_voxel_size(0.01));
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    write_voxel(
                        &mut vol,
                        Direction::YPos,
                        (x, y, z),
                        Voxel {
                            sdf: 1.0,
                            weight: 1.0,
                            ..Voxel::default()
                        },
                    );
                }
            }
        }
        assert!(vol
            .sdf_gradient(Direction::YPos, &Vector3::new(0.04, 0.04, 0.04))
            .is_none());
    }

    #[test]
    fn padded_block_matches_per_voxel_lookup() {
        let mut vol = DirectionalVolume::new(VolumeParams::with_voxel_size(0.01));
        let d = Direction::YNeg;
        fill_plane(
            &mut vol,
            d,
            &Vector3::new(0.04, 0.045, 0.04),
            &Vector3::new(0.0, -1.0, 0.0),
        );
        let mut padded = PaddedBlock::new();
        vol.fill_padded(d, (0, 0, 0), &mut padded);
        for k in -1..=8i64 {
            for j in -1..=8i64 {
                for i in -1..=8i64 {
                    let direct = vol.voxel_at(d, (i, j, k));
                    let (sdf, w) = direct.map_or((0.0, 0.0), |v| (v.sdf, v.weight));
                    assert_eq!(padded.sdf(i, j, k), sdf);
                    assert_eq!(padded.weight(i, j, k), w);
                }
            }
        }
    }

    #[test]
    fn snapshot_round_trips_and_is_deterministic() {
        let mut vol = DirectionalVolume::new(VolumeParams::with_voxel_size(0.015));
        fill_plane(
            &mut vol,
            Direction::ZNeg,
            &Vector3::new(0.0, 0.0, 0.06),
            &Vector3::new(0.0, 0.0, -1.0),
        );
        fill_plane(
            &mut vol,
            Direction::XPos,
            &Vector3::new(0.05, 0.0, 0.0),
            &Vector3::new(1.0, 0.0, 0.0),
        );
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.tsdf");
        let p2 = dir.path().join("b.tsdf");
        vol.save_snapshot(&p1).unwrap();
        vol.save_snapshot(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let loaded = DirectionalVolume::load_snapshot(&p1).unwrap();
        assert_eq!(loaded.block_count(), vol.block_count());
        assert_eq!(loaded.voxel_size(), vol.voxel_size());
        assert_eq!(loaded.truncation(), vol.truncation());
        for (key, block) in &vol.blocks {
            let other = loaded.block(key).unwrap();
            assert_eq!(block.voxels.as_slice(), other.voxels.as_slice());
        }
        let p3 = dir.path().join("c.tsdf");
        loaded.save_snapshot(&p3).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p3).unwrap());
    }

    #[test]
    fn snapshot_rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.tsdf");
        std::fs::write(&path, b"not a volume snapshot").unwrap();
        assert!(matches!(
            DirectionalVolume::load_snapshot(&path),
            Err(VolumeError::Snapshot(_))
        ));
    }

    #[test]
    fn regular_representation_collapses_memberships() {
        let mut params = VolumeParams::with_voxel_size(0.01);
        params.representation = Representation::Regular;
        let vol = DirectionalVolume::new(params);
        let w = vol.memberships(&Vector3::new(0.3, -0.5, 0.81).normalize());
        assert_eq!(w[Direction::CANONICAL.index()], 1.0);
        assert_eq!(w.iter().filter(|&&x| x > 0.0).count(), 1);
    }
}
