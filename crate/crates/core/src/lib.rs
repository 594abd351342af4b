//! Camera-based 3D occupancy prediction from a single-channel occupancy grid.
//!
//! Per-camera depth distributions are folded into one scalar per voxel
//! ([`sampling`]), the grid is read as three planar views by treating one
//! spatial axis as channels ([`tpv`]), the views are fused with per-channel
//! matrix products, and the result is added to BEV features before a
//! Channel-to-Height classification head ([`head`]).

pub mod augment;
pub mod bench;
pub mod conv;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod head;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod sampling;
pub mod synth;
pub mod tensor;
pub mod tpv;
pub mod volume;

pub use error::{Error, ErrorKind, Result};
pub use tensor::{Scalar, Tensor};
