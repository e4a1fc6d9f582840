//! Desk-scale toolkit for diffusion-prior image restoration.
//!
//! * [`imaging`] - images, PNG I/O, PSNR/SSIM
//! * [`degradation`] - blur / resize / noise / JPEG operators and presets
//! * [`sampler`] - EDM schedules, CFG and the restoration-guided sampler
//! * [`denoiser`] - analytic Gaussian oracle and the controlled toy UNet
//! * [`robust_encoder`] - autoencoder with degradation-robust encoder tuning
//! * [`training`] - denoising loss, negative-sample mixing, training loop
//! * [`dataset`] - procedural captioned textures and manifests
//! * [`checkpoint`] - the `GUIDIR1` tensor container

pub mod checkpoint;
pub mod dataset;
pub mod degradation;
pub mod denoiser;
pub mod error;
pub mod imaging;
pub mod nn;
pub mod pixel;
pub mod robust_encoder;
pub mod sampler;
pub mod training;

pub use error::{Error, Result};

/// Sampler state: any-rank array of `f64` in the working space.
pub type Latent = ndarray::ArrayD<f64>;
