//! Maximal directional singular integrals along codimension-1 subspaces,
//! at desk scale.
//!
//! The crate covers the geometry of oriented hyperplanes, FFT-backed
//! directional multiplier operators on a periodic grid, the triadic tile
//! discretization with its wave packets, and the greedy tree-selection
//! algorithms. The [`harness`] module drives the experiments behind the
//! `grsio` binary.

pub mod error;
pub mod grassmann;
pub mod multipliers;
pub mod operators;
pub mod smooth;
pub mod tiling;
pub mod trees;
pub mod wavepackets;
pub mod harness;

pub use error::{Error, Result};
