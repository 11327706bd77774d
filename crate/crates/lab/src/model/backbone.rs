use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::params::{Conv2d, ParamStore};
use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Stride-2 3x3 convolutions with ReLU, `log2(f)` of them.
    Conv,
    /// One `f x f` average pool. Has no parameters; each output cell is the
    /// mean color of exactly one patch.
    StridedAverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub downsampling_factor: usize,
    pub feature_dim: usize,
    /// Checkpoint whose `backbone.*` tensors seed this backbone.
    pub pretrained_weights: Option<std::path::PathBuf>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::Conv,
            downsampling_factor: 32,
            feature_dim: 128,
            pretrained_weights: None,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let f = self.downsampling_factor;
        if f == 0 || !f.is_power_of_two() {
            return Err(LabError::config(
                "backbone.downsampling_factor",
                format!("{f} is not a power of two"),
            ));
        }
        if self.kind == BackboneKind::Conv && f < 2 {
            return Err(LabError::config(
                "backbone.downsampling_factor",
                "the conv backbone needs at least one strided stage",
            ));
        }
        if self.feature_dim == 0 {
            return Err(LabError::config("backbone.feature_dim", "must be positive"));
        }
        Ok(())
    }

    /// Channel count of the backbone output.
    pub fn out_channels(&self) -> usize {
        match self.kind {
            BackboneKind::Conv => self.feature_dim,
            BackboneKind::StridedAverage => 3,
        }
    }
}

pub struct Backbone {
    kind: BackboneKind,
    factor: usize,
    stages: Vec<Conv2d>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::new();
        if config.kind == BackboneKind::Conv {
            let n = config.downsampling_factor.trailing_zeros() as usize;
            let mut channels = 3;
            for i in 0..n {
                let out = if i + 1 == n {
                    config.feature_dim
                } else {
                    (16 << i).min(config.feature_dim)
                };
                let name = if i == 0 {
                    "backbone.stem".to_string()
                } else {
                    format!("backbone.stages.{i}")
                };
                stages.push(Conv2d::new(store, &name, channels, out, 3, 2)?);
                channels = out;
            }
        }
        Ok(Self {
            kind: config.kind,
            factor: config.downsampling_factor,
            stages,
        })
    }

    /// `(B, 3, H, W)` normalized pixels to `(B, C, H/f, W/f)` features.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        for (axis, size) in [(ssldetr_core::Axis::Height, h), (ssldetr_core::Axis::Width, w)] {
            if size % self.factor != 0 {
                return Err(ssldetr_core::Error::Dimension {
                    axis,
                    size,
                    patch_size: self.factor,
                }
                .into());
            }
        }
        match self.kind {
            BackboneKind::StridedAverage => Ok(x.avg_pool2d(self.factor)?),
            BackboneKind::Conv => {
                let mut y = x.clone();
                for stage in &self.stages {
                    y = stage.forward(&y)?.relu()?;
                }
                Ok(y)
            }
        }
    }
}
