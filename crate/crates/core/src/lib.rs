//! Kernels for fusing multiple image conditions into a sparse-voxel
//! rectified-flow generator.
//!
//! The crate is `no_std` (it needs `alloc`) and holds everything that is
//! pure computation: patch geometry, a deterministic toy ViT encoder,
//! token fusion, the sparse voxel lattice with kNN vote refinement, a toy
//! cross-attention flow transformer, bidirectional attention alignment and
//! local attention enhancement. File formats, orchestration and the CLI
//! live in the `fusecond` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod alignment;
pub mod attention;
pub mod encoder;
pub mod enhancement;
pub mod error;
pub mod flow;
pub mod fusion;
pub mod math;
pub mod patch_grid;
pub mod rng;
pub mod voxel;

pub use error::{Error, Result};
pub use math::Matrix;
