//! Named trainable parameters with seeded initialization, plus the small
//! layers built on them.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-bound, bound)`
    Uniform(f64),
}

impl Init {
    /// Glorot uniform bound for a `fan_out x fan_in` matrix.
    pub fn xavier(fan_in: usize, fan_out: usize) -> Self {
        Init::Uniform((6.0 / (fan_in + fan_out) as f64).sqrt())
    }

    /// `1 / sqrt(fan_in)`, the default for dense and conv layers.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform(1.0 / (fan_in as f64).sqrt())
    }
}

/// Owns every trainable variable, keyed by dotted path. Iteration order is
/// the sorted key order, so reductions over parameters are reproducible.
///
/// Each parameter draws its initial values from its own generator stream,
/// keyed by the root seed and the parameter name, so adding or removing a
/// module never shifts the initialization of the others.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    seed: u64,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            seed,
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn create(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(LabError::Model(format!("parameter `{name}` defined twice")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(name_stream(name));
                (0..n).map(|_| rng.random_range(-b..b)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// `(name, var)` pairs whose name starts with one of `prefixes`.
    pub fn select(&self, prefixes: &[&str]) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn all(&self) -> Vec<(String, Var)> {
        self.vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    /// Overwrites existing parameters from `tensors`; returns how many were
    /// copied. Shapes must agree.
    pub fn load_matching(
        &self,
        tensors: &BTreeMap<String, Tensor>,
        prefixes: &[&str],
    ) -> Result<usize> {
        let mut copied = 0;
        for (name, var) in &self.vars {
            if !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            if let Some(t) = tensors.get(name) {
                if t.dims() != var.dims() {
                    return Err(LabError::Model(format!(
                        "parameter `{name}` has shape {:?} but stored tensor has {:?}",
                        var.dims(),
                        t.dims()
                    )));
                }
                var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// Detached copies of every parameter.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().detach().copy()?)))
            .collect()
    }
}

/// FNV-1a hash of a parameter name.
fn name_stream(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, init: Init) -> Result<Self> {
        let weight = store.create(&format!("{name}.weight"), &[fan_out, fan_in], init)?;
        let bias_init = match init {
            Init::Uniform(_) => Init::fan_in(fan_in),
            other => other,
        };
        let bias = store.create(&format!("{name}.bias"), &[fan_out], bias_init)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = match x.dims() {
            [b, n, k] => x
                .reshape((b * n, *k))?
                .matmul(&self.weight.t()?)?
                .reshape((*b, *n, self.weight.dim(0)?))?,
            _ => x.matmul(&self.weight.t()?)?,
        };
        Ok(y.broadcast_add(&self.bias)?)
    }
}

/// Layer normalization over the last dimension, written with primitive ops
/// so it is differentiable.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: store.create(&format!("{name}.weight"), &[dim], Init::Ones)?,
            bias: store.create(&format!("{name}.bias"), &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        // He-uniform keeps activations alive through stacked ReLUs
        let bound = (6.0 / fan_in as f64).sqrt();
        Ok(Self {
            weight: store.create(
                &format!("{name}.weight"),
                &[out_channels, in_channels, kernel, kernel],
                Init::Uniform(bound),
            )?,
            bias: store.create(&format!("{name}.bias"), &[out_channels], Init::Zeros)?,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.neg()?.exp()?.affine(1.0, 1.0)?.recip()?)
}

/// Numerically stable `log softmax` over the last dimension.
pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn creation_is_seeded_and_ordered() {
        let build = |seed| {
            let mut s = ParamStore::new(seed, DType::F32, Device::Cpu);
            s.create("b", &[3], Init::Uniform(1.0)).unwrap();
            s.create("a", &[2, 2], Init::Uniform(1.0)).unwrap();
            s.snapshot().unwrap()
        };
        let (x, y) = (build(1), build(1));
        for k in ["a", "b"] {
            assert_eq!(
                x[k].flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                y[k].flatten_all().unwrap().to_vec1::<f32>().unwrap()
            );
        }
        assert_eq!(x.keys().collect::<Vec<_>>(), vec!["a", "b"]);
    }

    #[test]
    fn init_does_not_depend_on_other_parameters() {
        let mut lone = ParamStore::new(3, DType::F32, Device::Cpu);
        let a = lone.create("a", &[4], Init::Uniform(1.0)).unwrap();
        let mut crowded = ParamStore::new(3, DType::F32, Device::Cpu);
        crowded.create("z", &[7], Init::Uniform(1.0)).unwrap();
        let b = crowded.create("a", &[4], Init::Uniform(1.0)).unwrap();
        assert_eq!(a.to_vec1::<f32>().unwrap(), b.to_vec1::<f32>().unwrap());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new(0, DType::F32, Device::Cpu);
        s.create("w", &[1], Init::Zeros).unwrap();
        assert!(s.create("w", &[1], Init::Zeros).is_err());
    }

    #[test]
    fn layer_norm_normalizes() {
        let mut s = ParamStore::new(0, DType::F64, Device::Cpu);
        let ln = LayerNorm::new(&mut s, "ln", 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn log_softmax_matches_direct_formula() {
        let x = Tensor::new(&[[0.5f64, -1.0, 2.0]], &Device::Cpu).unwrap();
        let y = log_softmax(&x).unwrap().to_vec2::<f64>().unwrap();
        let z: f64 = [0.5f64, -1.0, 2.0].iter().map(|v| v.exp()).sum();
        assert!((y[0][2] - (2.0 - z.ln())).abs() < 1e-12);
    }
}
