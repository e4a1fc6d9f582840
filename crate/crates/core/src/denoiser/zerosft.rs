use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm, ParamStore};

/// 1x1 convolution; at initialization the weights are zero so the output is zero.
pub fn zero_conv_forward(x: &Tensor, conv: &Conv2d) -> Result<Tensor> {
    conv.forward(x)
}

/// Connector joining adaptor features `X_c` to the base network's skip
/// features `X_s` before they are merged with the decoder features `X_f`:
///
/// ```text
/// X_s'  = X_s + add_conv(X_c)
/// (g,b) = mod_conv(groupnorm(X_c))
/// X_fo  = concat(X_f, X_s' * (1 + g) + b)
/// ```
///
/// Both convolutions are bias-free and start at zero, so a fresh connector is
/// the identity on `(X_f, X_s)`, and `X_c = 0` is a no-op at any weights.
#[derive(Debug, Clone)]
pub struct ZeroSft {
    pub add_conv: Conv2d,
    pub mod_conv: Conv2d,
    pub norm: GroupNorm,
}

impl ZeroSft {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        control_channels: usize,
        skip_channels: usize,
        groups: usize,
    ) -> Result<Self> {
        Ok(Self {
            add_conv: Conv2d::zeroed(store, &format!("{name}.add_conv"), control_channels, skip_channels, 1)?,
            mod_conv: Conv2d::zeroed(store, &format!("{name}.mod_conv"), control_channels, 2 * skip_channels, 3)?,
            norm: GroupNorm::plain(groups),
        })
    }

    /// The modulated skip `X_s' * (1 + g) + b`.
    pub fn modulate(&self, x_s: &Tensor, x_c: &Tensor) -> Result<Tensor> {
        let (n, cs, h, w) = x_s.dims4()?;
        let (nc, _, hc, wc) = x_c.dims4()?;
        if (n, h, w) != (nc, hc, wc) {
            return Err(Error::ShapeMismatch {
                expected: x_s.dims().to_vec(),
                actual: x_c.dims().to_vec(),
            });
        }
        let shifted = (x_s + zero_conv_forward(x_c, &self.add_conv)?)?;
        let gb = self.mod_conv.forward(&self.norm.forward(x_c)?)?;
        let gamma = gb.narrow(1, 0, cs)?;
        let beta = gb.narrow(1, cs, cs)?;
        Ok(shifted.mul(&(gamma + 1.0)?)?.add(&beta)?)
    }

    pub fn forward(&self, x_f: &Tensor, x_s: &Tensor, x_c: &Tensor) -> Result<Tensor> {
        let (nf, _, hf, wf) = x_f.dims4()?;
        let (ns, _, hs, ws) = x_s.dims4()?;
        if (nf, hf, wf) != (ns, hs, ws) {
            return Err(Error::ShapeMismatch {
                expected: x_f.dims().to_vec(),
                actual: x_s.dims().to_vec(),
            });
        }
        let modulated = self.modulate(x_s, x_c)?;
        Ok(Tensor::cat(&[x_f, &modulated], D::Minus(3))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::scalar;
    use candle_core::{DType, Device};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        scalar(&(a - b).unwrap().abs().unwrap().max_all().unwrap()).unwrap()
    }

    #[test]
    fn fresh_connector_is_identity() {
        let mut store = ParamStore::new(DType::F64, 0);
        let sft = ZeroSft::new(&mut store, "c", 8, 4, 4).unwrap();
        let (xf, xs, xc) = (randn(&[2, 3, 5, 5], 1), randn(&[2, 4, 5, 5], 2), randn(&[2, 8, 5, 5], 3));
        let out = sft.forward(&xf, &xs, &xc).unwrap();
        let merged = Tensor::cat(&[&xf, &xs], 1).unwrap();
        assert_eq!(max_abs_diff(&out, &merged), 0.0);
    }

    #[test]
    fn zero_control_is_noop_with_trained_weights() {
        let mut store = ParamStore::new(DType::F64, 0);
        let sft = ZeroSft::new(&mut store, "c", 8, 4, 4).unwrap();
        store.set("c.add_conv.weight", &randn(&[4, 8, 1, 1], 4)).unwrap();
        store.set("c.mod_conv.weight", &randn(&[8, 8, 3, 3], 5)).unwrap();
        let (xf, xs) = (randn(&[1, 2, 4, 4], 6), randn(&[1, 4, 4, 4], 7));
        let xc = Tensor::zeros((1, 8, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let out = sft.forward(&xf, &xs, &xc).unwrap();
        assert_eq!(max_abs_diff(&out, &Tensor::cat(&[&xf, &xs], 1).unwrap()), 0.0);
        // Nonzero control now changes the output.
        let out = sft.forward(&xf, &xs, &randn(&[1, 8, 4, 4], 8)).unwrap();
        assert!(max_abs_diff(&out, &Tensor::cat(&[&xf, &xs], 1).unwrap()) > 1e-3);
    }

    #[test]
    fn zero_conv_starts_silent_and_learns() {
        let mut store = ParamStore::new(DType::F64, 0);
        let conv = Conv2d::zeroed(&mut store, "z", 3, 2, 1).unwrap();
        let x = randn(&[1, 3, 4, 4], 9);
        let y = zero_conv_forward(&x, &conv).unwrap();
        assert_eq!(scalar(&y.abs().unwrap().sum_all().unwrap()).unwrap(), 0.0);
        // A linear read-out of the output has a nonzero weight gradient at init.
        let probe = randn(&[1, 2, 4, 4], 10);
        let lin = (y.mul(&probe).unwrap()).sum_all().unwrap();
        let g = lin.backward().unwrap();
        let gw = g.get(&conv.weight).unwrap();
        assert!(scalar(&gw.abs().unwrap().sum_all().unwrap()).unwrap() > 0.0);

        store.set("z.weight", &Tensor::ones((2, 3, 1, 1), DType::F64, &Device::Cpu).unwrap()).unwrap();
        let y2 = zero_conv_forward(&x, &conv).unwrap();
        assert!(scalar(&y2.abs().unwrap().sum_all().unwrap()).unwrap() > 0.0);
        assert!(zero_conv_forward(&randn(&[1, 2, 4, 4], 11), &conv).is_err());
    }

    #[test]
    fn misaligned_inputs_are_rejected() {
        let mut store = ParamStore::new(DType::F64, 0);
        let sft = ZeroSft::new(&mut store, "c", 4, 4, 4).unwrap();
        let r = sft.forward(&randn(&[1, 2, 4, 4], 1), &randn(&[1, 4, 4, 4], 2), &randn(&[1, 4, 2, 2], 3));
        assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
    }
}
