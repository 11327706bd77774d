//! Weight of the auxiliary self-supervised loss over training.

use core::fmt;
use core::str::FromStr;

use alloc::format;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleMode {
    Constant,
    LinearDecay,
}

impl ScheduleMode {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleMode::Constant => "constant",
            ScheduleMode::LinearDecay => "linear",
        }
    }
}

impl fmt::Display for ScheduleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScheduleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(ScheduleMode::Constant),
            "linear" | "linear_decay" => Ok(ScheduleMode::LinearDecay),
            _ => Err(Error::Config(format!("unknown weight schedule `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SslWeightSchedule {
    pub mode: ScheduleMode,
    pub initial_weight: f64,
    pub final_weight: f64,
    pub total_steps: usize,
}

impl SslWeightSchedule {
    pub fn constant(weight: f64, total_steps: usize) -> Self {
        Self {
            mode: ScheduleMode::Constant,
            initial_weight: weight,
            final_weight: weight,
            total_steps,
        }
    }

    pub fn linear(initial_weight: f64, final_weight: f64, total_steps: usize) -> Self {
        Self {
            mode: ScheduleMode::LinearDecay,
            initial_weight,
            final_weight,
            total_steps,
        }
    }

    pub fn weight(&self, step: usize) -> Result<f64> {
        ssl_weight(self, step)
    }
}

impl Default for SslWeightSchedule {
    fn default() -> Self {
        Self::constant(1.0, 0)
    }
}

pub fn ssl_weight(schedule: &SslWeightSchedule, step: usize) -> Result<f64> {
    if step > schedule.total_steps {
        return Err(Error::StepOutOfRange {
            step,
            total: schedule.total_steps,
        });
    }
    Ok(match schedule.mode {
        ScheduleMode::Constant => schedule.initial_weight,
        ScheduleMode::LinearDecay if schedule.total_steps == 0 => schedule.initial_weight,
        ScheduleMode::LinearDecay => {
            let t = step as f64 / schedule.total_steps as f64;
            schedule.initial_weight + (schedule.final_weight - schedule.initial_weight) * t
        }
    })
}
