use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Height,
    Width,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Axis::Height => f.write_str("height"),
            Axis::Width => f.write_str("width"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("image {axis} {size} is not a positive multiple of patch size {patch_size}")]
    Dimension {
        axis: Axis,
        size: usize,
        patch_size: usize,
    },
    #[error("patch size must be positive")]
    ZeroPatchSize,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{name} = {value} is outside [0, 1]")]
    Range { name: &'static str, value: f64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("cannot assign {cols} ground-truth objects to {rows} predictions")]
    Infeasible { rows: usize, cols: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("step {step} is outside [0, {total}]")]
    StepOutOfRange { step: usize, total: usize },
}
