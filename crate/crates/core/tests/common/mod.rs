//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use guidir::denoiser::{Denoiser, Prompt};
use guidir::nn::scalar;
use guidir::{Latent, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Autograd and central-difference directional derivatives along one random
/// unit direction.
#[derive(Debug, Clone, Copy)]
pub struct DirectionalCheck {
    pub autograd: f64,
    pub finite_difference: f64,
}

impl DirectionalCheck {
    pub fn relative_error(&self) -> f64 {
        let scale = self.autograd.abs().max(self.finite_difference.abs()).max(1e-12);
        (self.autograd - self.finite_difference).abs() / scale
    }
}

/// Compares `loss`'s gradient w.r.t. `vars` with central differences along
/// `directions` random unit directions. Works in whatever dtype the vars
/// hold; use `f64` for meaningful tolerances.
pub fn check_gradient(
    vars: &[Var],
    loss: &dyn Fn() -> Result<Tensor>,
    directions: usize,
    seed: u64,
) -> Result<Vec<DirectionalCheck>> {
    let grads = loss()?.backward()?;
    let originals: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().copy()).collect::<candle_core::Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut out = Vec::with_capacity(directions);
    for _ in 0..directions {
        let raw: Vec<Vec<f64>> = vars
            .iter()
            .map(|v| (0..v.as_tensor().elem_count()).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let norm = raw.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        let dirs: Vec<Tensor> = raw
            .into_iter()
            .zip(vars)
            .map(|(d, v)| {
                let d: Vec<f64> = d.into_iter().map(|x| x / norm).collect();
                Tensor::from_vec(d, v.as_tensor().dims(), &Device::Cpu)?.to_dtype(v.as_tensor().dtype())
            })
            .collect::<candle_core::Result<_>>()?;
        let mut autograd = 0.0;
        for (v, d) in vars.iter().zip(&dirs) {
            if let Some(g) = grads.get(v.as_tensor()) {
                autograd += scalar(&(g * d)?.sum_all()?)?;
            }
        }
        let shifted = |sign: f64| -> Result<f64> {
            for ((v, d), o) in vars.iter().zip(&dirs).zip(&originals) {
                v.set(&(o + (d * (sign * h))?)?)?;
            }
            scalar(&loss()?)
        };
        let plus = shifted(1.0)?;
        let minus = shifted(-1.0)?;
        for (v, o) in vars.iter().zip(&originals) {
            v.set(o)?;
        }
        out.push(DirectionalCheck {
            autograd,
            finite_difference: (plus - minus) / (2.0 * h),
        });
    }
    Ok(out)
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
}

/// Overwrites every parameter whose name starts with `prefix` with small
/// random values.
pub fn randomize(store: &guidir::nn::ParamStore, prefix: &str, scale: f64, seed: u64) {
    for (i, (name, var)) in store.iter().enumerate() {
        if name.starts_with(prefix) {
            let t = (random_tensor(var.as_tensor().dims(), seed + i as u64) * scale)
                .unwrap()
                .to_dtype(store.dtype())
                .unwrap();
            var.set(&t).unwrap();
        }
    }
}

pub fn random_latent(shape: &[usize], seed: u64) -> Latent {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Latent::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal))
}

/// A smooth but otherwise arbitrary denoiser, used where the contract must
/// hold "for any denoiser".
pub struct WildDenoiser {
    pub gain: f64,
}

impl Denoiser for WildDenoiser {
    fn denoise(&self, z: &Latent, z_lq: &Latent, sigma: f64, prompts: &[Prompt]) -> Result<Latent> {
        let bias: f64 = prompts.iter().flat_map(|p| &p.tokens).map(|&t| t as f64 * 0.01).sum();
        Ok(ndarray::Zip::from(z)
            .and(z_lq)
            .map_collect(|&a, &b| self.gain * (a / (1.0 + sigma)).tanh() + 0.3 * b * sigma.sin() + bias))
    }
}

pub fn f64_dtype() -> DType {
    DType::F64
}
