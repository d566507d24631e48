//! voxreg: unsupervised deformable registration of 3D volumes.
//!
//! The crate trains a small pyramid network that predicts a dense
//! displacement field aligning a moving volume to a fixed one, with no
//! supervision beyond an image-similarity loss and a smoothness penalty.
//! Everything is self-contained and deterministic: a hand-rolled
//! reverse-mode tape ([`tensor`]), the network ([`model`]), losses and
//! metrics, a synthetic phantom generator ([`data`]) so the whole system is
//! testable without external datasets, and a trainer plus CLI on top.
//!
//! Layout convention throughout: row-major `[batch, channel, depth, height,
//! width]`; displacement fields store (depth, height, width) offsets in
//! voxel units in channels 0/1/2.

pub mod cli;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
