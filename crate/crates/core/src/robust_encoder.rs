//! Small convolutional autoencoder (4-channel latent at a quarter of the
//! resolution) and the degradation-robust tuning of its encoder.
//!
//! The robust objective is `L_E = ||D(E(x_lq)) - D(E(x_gt))||^2` with the
//! decoder `D` held fixed; only encoder weights move.

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::{scalar, Conv2d, ParamStore, Trainer, upsample2x};
use crate::pixel::latent_to_batch;
use crate::training::images_to_tensor;
use crate::Latent;

pub const LATENT_CHANNELS: usize = 4;
pub const DOWNSAMPLE: usize = 4;
/// Smallest corpus accepted for pretraining.
pub const MIN_PRETRAIN_IMAGES: usize = 256;
pub const CHECKPOINT_KIND: &str = "autoencoder";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AeConfig {
    pub in_channels: usize,
    pub hidden: usize,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            hidden: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AutoEncoder {
    pub config: AeConfig,
    pub store: ParamStore,
    encoder: [Conv2d; 4],
    decoder: [Conv2d; 4],
}

impl AutoEncoder {
    pub fn new(config: AeConfig, dtype: DType, seed: u64) -> Result<Self> {
        if config.hidden < 2 || !matches!(config.in_channels, 1 | 3) {
            return Err(Error::InvalidParameter(format!("bad autoencoder config {config:?}")));
        }
        let (c, h) = (config.in_channels, config.hidden);
        let half = (h / 2).max(1);
        let mut store = ParamStore::new(dtype, seed);
        let s = &mut store;
        let encoder = [
            Conv2d::new(s, "encoder.0", c, half, 3, 1, true)?,
            Conv2d::new(s, "encoder.1", half, h, 3, 2, true)?,
            Conv2d::new(s, "encoder.2", h, h, 3, 2, true)?,
            Conv2d::new(s, "encoder.3", h, LATENT_CHANNELS, 3, 1, true)?,
        ];
        let decoder = [
            Conv2d::new(s, "decoder.0", LATENT_CHANNELS, h, 3, 1, true)?,
            Conv2d::new(s, "decoder.1", h, h, 3, 1, true)?,
            Conv2d::new(s, "decoder.2", h, half, 3, 1, true)?,
            Conv2d::new(s, "decoder.3", half, c, 3, 1, true)?,
        ];
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
        })
    }

    /// Independent copy with its own parameter storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let copy = Self::new(self.config, self.store.dtype(), 0)?;
        for (name, var) in self.store.iter() {
            copy.store.set(name, &var.as_tensor().copy()?)?;
        }
        Ok(copy)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.config.in_channels || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch {
                expected: vec![n, self.config.in_channels, h.next_multiple_of(DOWNSAMPLE).max(DOWNSAMPLE), w.next_multiple_of(DOWNSAMPLE).max(DOWNSAMPLE)],
                actual: x.dims().to_vec(),
            });
        }
        Ok(())
    }

    /// `(N, C, H, W)` working-space batch to `(N, 4, H/4, W/4)` latents.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let e = &self.encoder;
        let h = e[0].forward(x)?.silu()?;
        let h = e[1].forward(&h)?.silu()?;
        let h = e[2].forward(&h)?.silu()?;
        e[3].forward(&h)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let d = &self.decoder;
        let h = d[0].forward(z)?.silu()?;
        let h = d[1].forward(&upsample2x(&h)?)?.silu()?;
        let h = d[2].forward(&upsample2x(&h)?)?.silu()?;
        d[3].forward(&h)
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        self.decode(&self.encode(x)?)
    }

    pub fn encoder_vars(&self) -> Vec<candle_core::Var> {
        self.store.vars_with_prefix(&["encoder."])
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_store(CHECKPOINT_KIND, serde_json::to_value(self.config)?, &self.store)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        let config: AeConfig = serde_json::from_value(ckpt.config.clone())?;
        let ae = Self::new(config, DType::F32, 0)?;
        ckpt.load_into(&ae.store)?;
        Ok(ae)
    }
}

/// Mean squared difference per element, summed over the batch.
fn batch_sq_error(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.flatten_from(1)?.mean(1)?.sum_all()?)
}

/// Robust-encoder loss `L_E` of a batch, summed over items of per-element
/// means.
pub fn robust_loss(ae: &AutoEncoder, lq: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if lq.dims() != gt.dims() {
        return Err(Error::ShapeMismatch {
            expected: gt.dims().to_vec(),
            actual: lq.dims().to_vec(),
        });
    }
    batch_sq_error(&ae.reconstruct(lq)?, &ae.reconstruct(gt)?)
}

pub fn reconstruction_loss(ae: &AutoEncoder, x: &Tensor) -> Result<Tensor> {
    batch_sq_error(&ae.reconstruct(x)?, x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            batch_size: 16,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl AeTrainConfig {
    /// Defaults of the robust fine-tune. `L_E` alone is also minimized by
    /// encoders that smooth everything, so the tune is kept short and slow.
    pub fn finetune() -> Self {
        Self {
            epochs: 3,
            lr: 1e-5,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidParameter(format!("bad training config {self:?}")));
        }
        Ok(())
    }
}

/// Shuffled minibatch indices per epoch; the last partial batch is kept.
fn epoch_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn gather(images: &[Image], idx: &[usize], dtype: DType) -> Result<Tensor> {
    let picked: Vec<Image> = idx.iter().map(|&i| images[i].clone()).collect();
    images_to_tensor(&picked, dtype)
}

/// Trains encoder and decoder jointly on L2 reconstruction. Returns the model
/// and the mean per-image loss of every epoch.
pub fn pretrain_autoencoder(images: &[Image], config: AeConfig, train: &AeTrainConfig) -> Result<(AutoEncoder, Vec<f64>)> {
    if images.len() < MIN_PRETRAIN_IMAGES {
        return Err(Error::DatasetTooSmall {
            needed: MIN_PRETRAIN_IMAGES,
            got: images.len(),
        });
    }
    train.validate()?;
    let ae = AutoEncoder::new(config, DType::F32, train.seed)?;
    let mut trainer = Trainer::new(ae.store.all_vars(), train.lr, train.weight_decay, Some(1.0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut history = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        let mut total = 0.0;
        for idx in epoch_batches(images.len(), train.batch_size, &mut rng) {
            let x = gather(images, &idx, DType::F32)?;
            let loss = reconstruction_loss(&ae, &x)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::Divergence { step: epoch, loss: value });
            }
            trainer.step(&loss)?;
            total += value;
        }
        history.push(total / images.len() as f64);
    }
    Ok((ae, history))
}

/// Fine-tunes a copy of `ae`'s encoder on `(x_lq, x_gt)` pairs under `L_E`;
/// the decoder of the returned model is the original one, untouched. Returns
/// the mean per-pair loss of every epoch.
pub fn degradation_robust_finetune(
    ae: &AutoEncoder,
    pairs: &[(Image, Image)],
    train: &AeTrainConfig,
) -> Result<(AutoEncoder, Vec<f64>)> {
    train.validate()?;
    if pairs.is_empty() {
        return Err(Error::DatasetTooSmall { needed: 1, got: 0 });
    }
    let tuned = ae.deep_clone()?;
    let mut trainer = Trainer::new(tuned.encoder_vars(), train.lr, train.weight_decay, Some(1.0))?;
    let (lq, gt): (Vec<Image>, Vec<Image>) = pairs.iter().cloned().unzip();
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut history = Vec::with_capacity(train.epochs);
    let mut step = 0;
    for _ in 0..train.epochs {
        let mut total = 0.0;
        for idx in epoch_batches(pairs.len(), train.batch_size, &mut rng) {
            let loss = robust_loss(&tuned, &gather(&lq, &idx, DType::F32)?, &gather(&gt, &idx, DType::F32)?)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::Divergence { step, loss: value });
            }
            // A self-difference has an exactly zero gradient; skip the update so
            // weight decay cannot move the encoder.
            if value > 0.0 {
                trainer.step(&loss)?;
            }
            total += value;
            step += 1;
        }
        history.push(total / pairs.len() as f64);
    }
    Ok((tuned, history))
}

/// Mean `L_E` per pair over a held-out set.
pub fn mean_robust_loss(ae: &AutoEncoder, pairs: &[(Image, Image)]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in pairs.chunks(32) {
        let (lq, gt): (Vec<Image>, Vec<Image>) = chunk.iter().cloned().unzip();
        let dtype = ae.store.dtype();
        total += scalar(&robust_loss(ae, &images_to_tensor(&lq, dtype)?, &images_to_tensor(&gt, dtype)?)?)?;
    }
    Ok(total / pairs.len().max(1) as f64)
}

/// Encodes an LQ image: the `(4, H/4, W/4)` latent and the cleaned preview
/// `D(E(x_lq))`.
pub fn encode_lq(ae: &AutoEncoder, x_lq: &Image) -> Result<(Latent, Image)> {
    let x = images_to_tensor(std::slice::from_ref(x_lq), ae.store.dtype())?;
    let z = ae.encode(&x)?;
    let preview = ae.decode(&z)?;
    let z_dims = z.dims().to_vec();
    let to_latent = |t: &Tensor, dims: &[usize]| -> Result<Latent> {
        let data = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        Latent::from_shape_vec(dims, data).map_err(|e| Error::InvalidParameter(e.to_string()))
    };
    let latent = to_latent(&z, &z_dims[1..])?;
    let preview = to_latent(&preview, preview.dims())?;
    let preview = latent_to_batch(&preview)?.remove(0);
    Ok((latent, preview))
}

/// Decodes a `(4, h, w)` latent back to an image.
pub fn decode_latent(ae: &AutoEncoder, z: &Latent) -> Result<Image> {
    if z.ndim() != 3 || z.shape()[0] != LATENT_CHANNELS {
        return Err(Error::ShapeMismatch {
            expected: vec![LATENT_CHANNELS, 0, 0],
            actual: z.shape().to_vec(),
        });
    }
    let mut shape = vec![1];
    shape.extend_from_slice(z.shape());
    let t = Tensor::from_vec(z.iter().copied().collect::<Vec<f64>>(), shape, &Device::Cpu)?.to_dtype(ae.store.dtype())?;
    let out = ae.decode(&t)?;
    let data = out.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let latent = Latent::from_shape_vec(out.dims(), data).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok(latent_to_batch(&latent)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_corpus, CorpusConfig};

    fn images(n: usize, size: usize) -> Vec<Image> {
        generate_corpus(&CorpusConfig {
            count: n,
            size,
            seed: 11,
            ..CorpusConfig::default()
        })
        .unwrap()
        .into_iter()
        .map(|i| i.image)
        .collect()
    }

    #[test]
    fn latent_shape_and_determinism() {
        let ae = AutoEncoder::new(AeConfig::default(), DType::F32, 0).unwrap();
        let img = images(1, 32).remove(0);
        let (z, preview) = encode_lq(&ae, &img).unwrap();
        assert_eq!(z.shape(), &[4, 8, 8]);
        assert_eq!(preview.shape(), img.shape());
        let (z2, _) = encode_lq(&ae, &img).unwrap();
        assert_eq!(z, z2);
        assert_eq!(decode_latent(&ae, &z).unwrap(), preview);
        let odd = Image::filled(30, 32, 1, 0.5).unwrap();
        assert!(matches!(encode_lq(&ae, &odd), Err(Error::ShapeMismatch { .. })));
        let rgb = Image::filled(32, 32, 3, 0.5).unwrap();
        assert!(matches!(encode_lq(&ae, &rgb), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn pretrain_rejects_small_sets() {
        let err = pretrain_autoencoder(&images(10, 8), AeConfig::default(), &AeTrainConfig::default());
        assert!(matches!(err, Err(Error::DatasetTooSmall { needed: 256, got: 10 })));
    }

    #[test]
    fn identical_pairs_give_zero_loss_and_no_change() {
        let ae = AutoEncoder::new(AeConfig { hidden: 4, ..AeConfig::default() }, DType::F32, 1).unwrap();
        let imgs = images(8, 8);
        let pairs: Vec<_> = imgs.iter().map(|i| (i.clone(), i.clone())).collect();
        assert_eq!(mean_robust_loss(&ae, &pairs).unwrap(), 0.0);
        let train = AeTrainConfig {
            epochs: 2,
            batch_size: 4,
            weight_decay: 0.01,
            ..AeTrainConfig::finetune()
        };
        let (tuned, history) = degradation_robust_finetune(&ae, &pairs, &train).unwrap();
        assert!(history.iter().all(|&l| l == 0.0));
        assert_eq!(tuned.store.snapshot().unwrap(), ae.store.snapshot().unwrap());
    }

    #[test]
    fn finetune_moves_only_the_encoder() {
        let ae = AutoEncoder::new(AeConfig { hidden: 4, ..AeConfig::default() }, DType::F32, 2).unwrap();
        let before = ae.store.snapshot().unwrap();
        let imgs = images(8, 8);
        let pairs: Vec<_> = imgs
            .iter()
            .map(|i| (i.map(|v| (v * 0.7 + 0.1).clamp(0.0, 1.0)), i.clone()))
            .collect();
        let train = AeTrainConfig {
            epochs: 2,
            batch_size: 4,
            ..AeTrainConfig::finetune()
        };
        let (tuned, _) = degradation_robust_finetune(&ae, &pairs, &train).unwrap();
        let after = tuned.store.snapshot().unwrap();
        assert_eq!(ae.store.snapshot().unwrap(), before);
        for (name, value) in &before {
            if name.starts_with("decoder.") {
                assert_eq!(value, &after[name], "{name}");
            }
        }
        assert!(before.iter().any(|(k, v)| k.starts_with("encoder.") && v != &after[k]));
    }

    #[test]
    fn checkpoint_round_trip() {
        let ae = AutoEncoder::new(AeConfig { hidden: 4, in_channels: 3 }, DType::F32, 3).unwrap();
        let ckpt = Checkpoint::from_bytes(&ae.checkpoint().unwrap().to_bytes().unwrap()).unwrap();
        let back = AutoEncoder::from_checkpoint(&ckpt).unwrap();
        assert_eq!(back.config, ae.config);
        assert_eq!(back.store.snapshot().unwrap(), ae.store.snapshot().unwrap());
    }
}
