//! Dense RGB-D mapping and tracking on a directional truncated signed
//! distance field.
//!
//! The volume keeps six interleaved distance fields, one per signed
//! coordinate axis, so that opposing surfaces of thin geometry never share
//! voxels. Frames are fused by voxel projection, rendered through a
//! view-dependent combination of the six fields, and tracked with a
//! point-to-plane ICP that can blend photometric terms and estimate scale.

pub mod eval;
pub mod geometry;
pub mod frame;
pub mod fusion;
pub mod image;
pub mod io;
pub mod pipeline;
pub mod render;
pub mod tracking;
pub mod volume;

pub mod book;
