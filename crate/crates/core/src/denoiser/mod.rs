//! The denoiser contract `H(z_hat, z_lq, sigma_hat, c)` and its
//! implementations: an exact Gaussian posterior mean for verifying samplers,
//! and a small UNet steered by a trimmed adaptor through ZeroSFT connectors.

mod analytic;
mod unet;
mod zerosft;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::Latent;

pub use analytic::AnalyticGaussianDenoiser;
pub use unet::{
    build_adaptor, Adaptor, BaseUNet, Branch, ConditioningVector, ControlledUNet, ResBlock, TokenEmbedding,
    UNetConfig, BASE_PREFIX, CHECKPOINT_KIND, CONTROL_PREFIXES, SIGMA_DATA,
};
pub use zerosft::{zero_conv_forward, ZeroSft};

/// Caption token ids of a single prompt.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub tokens: Vec<u32>,
}

impl Prompt {
    pub fn new(tokens: Vec<u32>) -> Self {
        Self { tokens }
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Returns the denoised (clean-signal) estimate of `z` at noise level `sigma`.
///
/// `prompts` holds one prompt per batch item, or a single prompt that is
/// broadcast. Implementations must be shape-preserving and safe to call from
/// several trajectories at once.
pub trait Denoiser: Send + Sync {
    fn denoise(&self, z: &Latent, z_lq: &Latent, sigma: f64, prompts: &[Prompt]) -> Result<Latent>;
}

impl<T: Denoiser + ?Sized> Denoiser for &T {
    fn denoise(&self, z: &Latent, z_lq: &Latent, sigma: f64, prompts: &[Prompt]) -> Result<Latent> {
        (**self).denoise(z, z_lq, sigma, prompts)
    }
}

impl<T: Denoiser + ?Sized> Denoiser for std::sync::Arc<T> {
    fn denoise(&self, z: &Latent, z_lq: &Latent, sigma: f64, prompts: &[Prompt]) -> Result<Latent> {
        (**self).denoise(z, z_lq, sigma, prompts)
    }
}
