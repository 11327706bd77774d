//! Algorithmic core for self-supervised training of detection transformer
//! encoders.
//!
//! Everything here is pure computation over owned buffers: the patch grid that
//! ties image pixels to encoder tokens, the five pretext transforms and their
//! losses, generalized IoU, optimal bipartite matching with the set-prediction
//! loss, COCO-protocol average precision, the fixed 2D sine positional
//! encoding and the auxiliary loss weight schedule.
//!
//! The crate is `no_std` and only needs `alloc`. Randomness is always supplied
//! by the caller through a [`rand::Rng`].
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod boxes;
pub mod error;
pub mod eval;
pub mod image;
pub mod matching;
pub mod patchgrid;
pub mod position;
pub mod schedule;
pub mod ssl;

pub use boxes::BBox;
pub use error::{Axis, Error, Result};
pub use image::Image;
pub use patchgrid::{PatchGrid, PatchPermutation, PatchSelection, Patches};
