//! Minimal layer toolkit on top of candle tensors: a named parameter store,
//! convolutions, group normalization and an AdamW step with global-norm
//! clipping.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Named trainable tensors, ordered by name.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::InvalidParameter(format!("duplicate parameter {name}")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(tensor)
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual default for conv/linear.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.insert(name, values, shape)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let n = shape.iter().product();
        self.insert(name, vec![0.0; n], shape)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let n = shape.iter().product();
        self.insert(name, vec![1.0; n], shape)
    }

    /// Registers a fresh variable holding a deep copy of `source`.
    pub fn copy_of(&mut self, name: &str, source: &Tensor) -> Result<Tensor> {
        let values = source.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        self.insert(name, values, source.dims())
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Variables whose name starts with any of `prefixes`.
    pub fn vars_with_prefix(&self, prefixes: &[&str]) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    /// Total number of scalar parameters under `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.as_tensor().elem_count())
            .sum()
    }

    /// Overwrites a parameter in place, keeping tensor identity.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::ShapeMismatch {
                expected: var.dims().to_vec(),
                actual: value.dims().to_vec(),
            });
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Flat snapshot of every parameter as `f32` values.
    pub fn snapshot(&self) -> Result<BTreeMap<String, (Vec<usize>, Vec<f32>)>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let t = v.as_tensor();
                let data = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
                Ok((k.clone(), (t.dims().to_vec(), data)))
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.uniform(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], fan_in)?;
        let bias = if bias {
            Some(store.uniform(&format!("{name}.bias"), &[out_ch], fan_in)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    /// A bias-free convolution whose weights start at exactly zero.
    pub fn zeroed(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        let weight = store.zeros(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel])?;
        Ok(Self {
            weight,
            bias: None,
            stride: 1,
            padding: kernel / 2,
        })
    }

    /// A new set of variables initialized from `self`.
    pub fn deep_copy(&self, store: &mut ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            weight: store.copy_of(&format!("{name}.weight"), &self.weight)?,
            bias: match &self.bias {
                Some(b) => Some(store.copy_of(&format!("{name}.bias"), b)?),
                None => None,
            },
            stride: self.stride,
            padding: self.padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.in_channels() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.in_channels()],
                actual: vec![c],
            });
        }
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: store.uniform(&format!("{name}.weight"), &[out_dim, in_dim], in_dim)?,
            bias: store.uniform(&format!("{name}.bias"), &[out_dim], in_dim)?,
        })
    }

    pub fn deep_copy(&self, store: &mut ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            weight: store.copy_of(&format!("{name}.weight"), &self.weight)?,
            bias: store.copy_of(&format!("{name}.bias"), &self.bias)?,
        })
    }

    /// `x: (N, in) -> (N, out)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Group normalization over `(C/G, H, W)` per group, optionally with a
/// per-channel affine transform.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub groups: usize,
    pub eps: f64,
    pub affine: Option<(Tensor, Tensor)>,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, groups: usize, channels: usize) -> Result<Self> {
        let gamma = store.ones(&format!("{name}.weight"), &[channels])?;
        let beta = store.zeros(&format!("{name}.bias"), &[channels])?;
        Ok(Self {
            groups,
            eps: 1e-5,
            affine: Some((gamma, beta)),
        })
    }

    pub fn plain(groups: usize) -> Self {
        Self {
            groups,
            eps: 1e-5,
            affine: None,
        }
    }

    pub fn deep_copy(&self, store: &mut ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            groups: self.groups,
            eps: self.eps,
            affine: match &self.affine {
                Some((g, b)) => Some((
                    store.copy_of(&format!("{name}.weight"), g)?,
                    store.copy_of(&format!("{name}.bias"), b)?,
                )),
                None => None,
            },
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if c % self.groups != 0 {
            return Err(Error::InvalidParameter(format!(
                "{c} channels do not split into {} groups",
                self.groups
            )));
        }
        let grouped = x.reshape((n, self.groups, (c / self.groups) * h * w))?;
        let mean = grouped.mean_keepdim(D::Minus1)?;
        let centered = grouped.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .reshape((n, c, h, w))?;
        Ok(match &self.affine {
            Some((g, b)) => normed
                .broadcast_mul(&g.reshape((1, c, 1, 1))?)?
                .broadcast_add(&b.reshape((1, c, 1, 1))?)?,
            None => normed,
        })
    }
}

/// Nearest-neighbour 2x upsampling built from differentiable primitives.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((n, c, 2 * h, 2 * w))?)
}

/// AdamW (decoupled weight decay) over a fixed set of variables, with the
/// gradient rescaled so its global L2 norm never exceeds `clip_norm`.
pub struct Trainer {
    vars: Vec<Var>,
    optimizer: AdamW,
    clip_norm: Option<f64>,
}

impl Trainer {
    pub fn new(vars: Vec<Var>, lr: f64, weight_decay: f64, clip_norm: Option<f64>) -> Result<Self> {
        let params = ParamsAdamW {
            lr,
            weight_decay,
            ..ParamsAdamW::default()
        };
        let optimizer = AdamW::new(vars.clone(), params)?;
        Ok(Self {
            vars,
            optimizer,
            clip_norm,
        })
    }

    /// Backpropagates `loss` and applies one update; returns the pre-clip
    /// gradient norm.
    pub fn step(&mut self, loss: &Tensor) -> Result<f64> {
        let mut grads = loss.backward()?;
        let norm = grad_norm(&grads, &self.vars)?;
        if let Some(cap) = self.clip_norm {
            if norm > cap {
                let scale = cap / norm;
                for v in &self.vars {
                    if let Some(g) = grads.get(v.as_tensor()) {
                        let scaled = (g * scale)?;
                        grads.insert(v.as_tensor(), scaled);
                    }
                }
            }
        }
        self.optimizer.step(&grads)?;
        Ok(norm)
    }
}

fn grad_norm(grads: &GradStore, vars: &[Var]) -> Result<f64> {
    let mut sum = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sum += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(sum.sqrt())
}

/// Reads a scalar tensor as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
