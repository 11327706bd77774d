//! AdamW with decoupled weight decay and global-norm gradient clipping.
//!
//! Moment estimates live in named tensors so they can be checkpointed and a
//! resumed run continues bit-for-bit.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

pub struct AdamW {
    config: AdamWConfig,
    params: Vec<(String, Var)>,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    step: u64,
}

impl AdamW {
    /// Optimizer over `params`, which should be sorted by name.
    pub fn new(params: Vec<(String, Var)>, config: AdamWConfig) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in &params {
            m.insert(name.clone(), var.as_tensor().zeros_like()?);
            v.insert(name.clone(), var.as_tensor().zeros_like()?);
        }
        Ok(Self {
            config,
            params,
            m,
            v,
            step: 0,
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Parameters without a gradient are left untouched,
    /// including by weight decay.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, var) in &self.params {
            let Some(g) = grads.get(var) else { continue };
            let g = g.detach();
            let m = &self.m[name];
            let v = &self.v[name];
            let m = ((m * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let denom = ((v.sqrt()? / bc2.sqrt())? + c.eps)?;
            let update = (m.div(&denom)? * (c.learning_rate / bc1))?;
            let decayed = (var.as_tensor().detach() * (1.0 - c.learning_rate * c.weight_decay))?;
            var.set(&(decayed - update)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    /// Moment tensors keyed `optimizer.m.<param>` / `optimizer.v.<param>`.
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, t) in &self.m {
            out.insert(format!("optimizer.m.{name}"), t.clone());
        }
        for (name, t) in &self.v {
            out.insert(format!("optimizer.v.{name}"), t.clone());
        }
        out
    }

    pub fn load_state(&mut self, tensors: &BTreeMap<String, Tensor>, step: u64) -> Result<()> {
        for (name, var) in &self.params {
            for (kind, slot) in [("m", &mut self.m), ("v", &mut self.v)] {
                let key = format!("optimizer.{kind}.{name}");
                let t = tensors.get(&key).ok_or_else(|| {
                    LabError::Model(format!("optimizer state `{key}` missing"))
                })?;
                if t.dims() != var.dims() {
                    return Err(LabError::Model(format!("optimizer state `{key}` has wrong shape")));
                }
                slot.insert(name.clone(), t.to_dtype(var.dtype())?);
            }
        }
        self.step = step;
        Ok(())
    }
}

/// Euclidean norm over every gradient of `params`, accumulated in `f64` in
/// the given order.
pub fn global_grad_norm(params: &[(String, Var)], grads: &GradStore) -> Result<f64> {
    let mut sum = 0.0;
    for (_, var) in params {
        if let Some(g) = grads.get(var) {
            sum += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
    }
    Ok(sum.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipReport {
    pub norm_before: f64,
    pub norm_after: f64,
}

/// Rescales gradients in place so their global norm is at most `max_norm`.
pub fn clip_grad_norm(
    params: &[(String, Var)],
    grads: &mut GradStore,
    max_norm: f64,
) -> Result<ClipReport> {
    let norm_before = global_grad_norm(params, grads)?;
    let coef = max_norm / (norm_before + 1e-6);
    if coef >= 1.0 {
        return Ok(ClipReport {
            norm_before,
            norm_after: norm_before,
        });
    }
    for (_, var) in params {
        if let Some(g) = grads.get(var) {
            let scaled = (g * coef)?;
            grads.insert(var, scaled);
        }
    }
    Ok(ClipReport {
        norm_before,
        norm_after: global_grad_norm(params, grads)?,
    })
}
