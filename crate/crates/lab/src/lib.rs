//! Detection transformer lab with self-supervised encoder pretext tasks.
//!
//! The pure algorithms (patch geometry, task transforms, matching, COCO
//! metrics) live in `ssldetr-core`; this crate adds the trainable model,
//! optimization, datasets, file formats and the command-line front end.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod loss;
pub mod manifest;
pub mod model;
pub mod optim;
pub mod train;
pub mod visualize;

pub use error::{LabError, Result};
