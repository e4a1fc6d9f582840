//! Denoising objective, negative-quality sample mixing and the training loop
//! of the controlled UNet.

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Vocabulary, NEGATIVE_QUALITY_TOKENS};
use crate::degradation::{apply_pipeline, DegradationSpec};
use crate::denoiser::{Branch, ControlledUNet, Prompt, BASE_PREFIX, CONTROL_PREFIXES, SIGMA_DATA};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::{scalar, Trainer};
use crate::pixel::batch_to_latent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityLabel {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub hq: Image,
    pub lq: Image,
    pub caption_tokens: Vec<String>,
    pub quality_label: QualityLabel,
    /// The pipeline that produced `lq` from `hq`.
    pub degradation: Option<DegradationSpec>,
}

impl TrainSample {
    /// A restoration pair: `lq` is `hq` run through `spec`.
    pub fn positive(hq: Image, caption_tokens: Vec<String>, spec: DegradationSpec) -> Result<Self> {
        let lq = apply_pipeline(&hq, &spec)?;
        Ok(Self {
            hq,
            lq,
            caption_tokens,
            quality_label: QualityLabel::Positive,
            degradation: Some(spec),
        })
    }
}

/// Which parameters a run updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainTarget {
    /// Base UNet alone, without the control branch (prior pretraining).
    Base,
    /// Adaptor and connectors with the base frozen.
    #[default]
    Control,
    /// Everything, through the controlled forward pass.
    Joint,
}

impl TrainTarget {
    pub fn freezes_base(self) -> bool {
        self == TrainTarget::Control
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Mean of `ln sigma`.
    pub sigma_mean: f64,
    /// Standard deviation of `ln sigma`.
    pub sigma_std: f64,
    pub negative_ratio: f64,
    pub clip_norm: f64,
    pub target: TrainTarget,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            steps: 2000,
            lr: 1e-3,
            weight_decay: 0.01,
            sigma_mean: -1.2,
            sigma_std: 1.2,
            negative_ratio: 0.005,
            clip_norm: 1.0,
            target: TrainTarget::Control,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(0.0..=0.2).contains(&self.negative_ratio) {
            return bad(format!("negative_ratio must be in [0, 0.2], got {}", self.negative_ratio));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return bad(format!("bad optimizer settings lr={} wd={}", self.lr, self.weight_decay));
        }
        if !self.sigma_mean.is_finite() || !(self.sigma_std >= 0.0 && self.sigma_std.is_finite()) {
            return bad(format!("bad sigma distribution ({}, {})", self.sigma_mean, self.sigma_std));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sample_sigma(&self, rng: &mut impl Rng) -> f64 {
        let n: f64 = rng.sample(StandardNormal);
        (self.sigma_mean + self.sigma_std * n).exp()
    }
}

/// EDM loss weight `(sigma^2 + sigma_data^2) / (sigma * sigma_data)^2`.
pub fn edm_weight(sigma: f64, sigma_data: f64) -> f64 {
    (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data).powi(2)
}

/// Stacks images into an `(N, C, H, W)` tensor in the working space.
pub fn images_to_tensor(images: &[Image], dtype: DType) -> Result<Tensor> {
    let z = batch_to_latent(images)?;
    let shape = z.shape().to_vec();
    let data: Vec<f64> = z.iter().copied().collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn prompts_for(samples: &[TrainSample], vocab: &Vocabulary) -> Result<Vec<Prompt>> {
    samples.iter().map(|s| vocab.prompt(&s.caption_tokens)).collect()
}

/// Sum over the batch of `w(sigma_i) * mean((D(hq_i + sigma_i n_i) - hq_i)^2)`.
///
/// `noise` has the batch shape; `branch` selects the base-only or controlled
/// pass.
pub fn denoising_loss(
    net: &ControlledUNet,
    samples: &[TrainSample],
    sigmas: &[f64],
    noise: &Tensor,
    prompts: &[Prompt],
    branch: Branch,
) -> Result<Tensor> {
    if samples.len() != sigmas.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![samples.len()],
            actual: vec![sigmas.len()],
        });
    }
    if sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidParameter(format!("noise levels must be positive, got {sigmas:?}")));
    }
    let dtype = net.dtype();
    let hq: Vec<Image> = samples.iter().map(|s| s.hq.clone()).collect();
    let lq: Vec<Image> = samples.iter().map(|s| s.lq.clone()).collect();
    let x0 = images_to_tensor(&hq, dtype)?;
    let z_lq = images_to_tensor(&lq, dtype)?;
    if noise.dims() != x0.dims() {
        return Err(Error::ShapeMismatch {
            expected: x0.dims().to_vec(),
            actual: noise.dims().to_vec(),
        });
    }
    let n = samples.len();
    let sig = Tensor::from_vec(sigmas.to_vec(), (n, 1, 1, 1), &Device::Cpu)?.to_dtype(dtype)?;
    let noisy = (&x0 + noise.to_dtype(dtype)?.broadcast_mul(&sig)?)?;
    let lq_arg = (branch == Branch::Controlled).then_some(&z_lq);
    let denoised = net.denoise_tensor(&noisy, lq_arg, sigmas, prompts, branch)?;
    let per_item = (denoised - &x0)?.sqr()?.flatten_from(1)?.mean(1)?;
    let weights: Vec<f64> = sigmas.iter().map(|&s| edm_weight(s, SIGMA_DATA)).collect();
    let weights = Tensor::from_vec(weights, n, &Device::Cpu)?.to_dtype(dtype)?;
    Ok((per_item * weights)?.sum_all()?)
}

/// Endless training stream interleaving negatives into the positive set.
///
/// Positives come out in their original order (cycling); each draw is a
/// negative with probability `ratio`.
pub struct MixedStream {
    positives: Vec<TrainSample>,
    negatives: Vec<TrainSample>,
    ratio: f64,
    next_positive: usize,
    rng: ChaCha8Rng,
}

pub fn mix_negative_samples(
    positives: Vec<TrainSample>,
    negatives: Vec<TrainSample>,
    ratio: f64,
    seed: u64,
) -> Result<MixedStream> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidParameter(format!("negative ratio must be in [0, 1], got {ratio}")));
    }
    if ratio > 0.0 && negatives.is_empty() {
        return Err(Error::EmptyNegativeSet(ratio));
    }
    if positives.is_empty() {
        return Err(Error::DatasetTooSmall { needed: 1, got: 0 });
    }
    let negatives = negatives
        .into_iter()
        .map(|mut s| {
            for t in NEGATIVE_QUALITY_TOKENS {
                if !s.caption_tokens.iter().any(|c| c == t) {
                    s.caption_tokens.push(t.to_string());
                }
            }
            s.quality_label = QualityLabel::Negative;
            s
        })
        .collect();
    Ok(MixedStream {
        positives,
        negatives,
        ratio,
        next_positive: 0,
        rng: ChaCha8Rng::seed_from_u64(seed),
    })
}

impl Iterator for MixedStream {
    type Item = TrainSample;

    fn next(&mut self) -> Option<TrainSample> {
        if self.ratio > 0.0 && self.rng.random::<f64>() < self.ratio {
            let i = self.rng.random_range(0..self.negatives.len());
            return Some(self.negatives[i].clone());
        }
        let s = self.positives[self.next_positive % self.positives.len()].clone();
        self.next_positive += 1;
        Some(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub sigma_mean: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossHistory {
    pub records: Vec<LossRecord>,
}

impl LossHistory {
    /// Mean loss over `records[range]`.
    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let slice = &self.records[range];
        slice.iter().map(|r| r.loss).sum::<f64>() / slice.len() as f64
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let bytes = if self.records.is_empty() {
            b"step,loss,sigma_mean\n".to_vec()
        } else {
            bytes
        };
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// Runs `cfg.steps` AdamW steps on batches drawn from `stream`, updating
/// `net` in place.
pub fn train_denoiser(
    net: &ControlledUNet,
    stream: &mut dyn Iterator<Item = TrainSample>,
    cfg: &TrainConfig,
    vocab: &Vocabulary,
) -> Result<LossHistory> {
    cfg.validate()?;
    let (vars, branch) = match cfg.target {
        TrainTarget::Base => (net.store.vars_with_prefix(&[BASE_PREFIX]), Branch::BaseOnly),
        TrainTarget::Control => (net.store.vars_with_prefix(&CONTROL_PREFIXES), Branch::Controlled),
        TrainTarget::Joint => (net.store.all_vars(), Branch::Controlled),
    };
    let mut trainer = Trainer::new(vars, cfg.lr, cfg.weight_decay, Some(cfg.clip_norm))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = LossHistory::default();
    for step in 0..cfg.steps {
        let batch: Vec<TrainSample> = (&mut *stream).take(cfg.batch_size).collect();
        if batch.len() < cfg.batch_size {
            return Err(Error::DatasetTooSmall {
                needed: cfg.batch_size,
                got: batch.len(),
            });
        }
        let sigmas: Vec<f64> = (0..batch.len()).map(|_| cfg.sample_sigma(&mut rng)).collect();
        let [h, w, c] = batch[0].hq.shape();
        let count = batch.len() * c * h * w;
        let noise: Vec<f64> = (0..count).map(|_| rng.sample(StandardNormal)).collect();
        let noise = Tensor::from_vec(noise, (batch.len(), c, h, w), &Device::Cpu)?;
        let prompts = prompts_for(&batch, vocab)?;
        let loss = denoising_loss(net, &batch, &sigmas, &noise, &prompts, branch)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        trainer.step(&loss)?;
        history.records.push(LossRecord {
            step,
            loss: value,
            sigma_mean: sigmas.iter().sum::<f64>() / sigmas.len() as f64,
        });
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_negative_sample, synth_texture, Palette, TextureFamily, TextureParams};
    use crate::degradation::DegradationOp;
    use crate::denoiser::UNetConfig;

    fn tiny_net(seed: u64) -> ControlledUNet {
        let cfg = UNetConfig {
            base_channels: 8,
            blocks_per_stage: 1,
            embed_dim: 16,
            fourier_features: 4,
            vocab_size: Vocabulary::default().len(),
            ..UNetConfig::default()
        };
        ControlledUNet::new(cfg, DType::F64, seed).unwrap()
    }

    fn samples(n: usize) -> Vec<TrainSample> {
        (0..n)
            .map(|i| {
                let p = TextureParams {
                    family: TextureFamily::ALL[i % 5],
                    frequency: 1.0 + i as f64 % 4.0,
                    orientation: 0.0,
                    contrast: 0.8,
                    palette: Palette::Gray,
                    seed: i as u64,
                };
                let (img, tokens) = synth_texture(&p, 8, 8).unwrap();
                let spec = DegradationSpec::new(vec![DegradationOp::Blur { sigma: 1.0 }], i as u64);
                TrainSample::positive(img, tokens, spec).unwrap()
            })
            .collect()
    }

    #[test]
    fn weight_matches_closed_form() {
        for &(s, sd) in &[(0.1, 0.5), (1.0, 0.5), (2.0, 1.0), (0.3, 1.0)] {
            let direct = 1.0 / (s * s) + 1.0 / (sd * sd);
            assert!((edm_weight(s, sd) - direct).abs() < 1e-12 * direct);
        }
        assert!((edm_weight(1.0, 1.0) - 2.0).abs() < 1e-15);
        assert!((edm_weight(1.0, 0.5) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn loss_is_nonnegative_deterministic_and_permutation_invariant() {
        let net = tiny_net(1);
        let vocab = Vocabulary::default();
        let batch = samples(3);
        let prompts = prompts_for(&batch, &vocab).unwrap();
        let sigmas = [0.2, 1.0, 3.0];
        let noise = Tensor::randn(0f64, 1.0, (3, 1, 8, 8), &Device::Cpu).unwrap();
        let loss = |b: &[TrainSample], s: &[f64], n: &Tensor, p: &[Prompt]| {
            scalar(&denoising_loss(&net, b, s, n, p, Branch::Controlled).unwrap()).unwrap()
        };
        let a = loss(&batch, &sigmas, &noise, &prompts);
        assert!(a >= 0.0);
        assert_eq!(a, loss(&batch, &sigmas, &noise, &prompts));

        let order = [2usize, 0, 1];
        let pb: Vec<_> = order.iter().map(|&i| batch[i].clone()).collect();
        let ps: Vec<_> = order.iter().map(|&i| sigmas[i]).collect();
        let pp: Vec<_> = order.iter().map(|&i| prompts[i].clone()).collect();
        let idx = Tensor::new(&[2u32, 0, 1], &Device::Cpu).unwrap();
        let pn = noise.index_select(&idx, 0).unwrap();
        assert!((a - loss(&pb, &ps, &pn, &pp)).abs() < 1e-10 * a);

        assert!(denoising_loss(&net, &batch, &[0.0, 1.0, 1.0], &noise, &prompts, Branch::Controlled).is_err());
    }

    #[test]
    fn mixing_ratio_zero_keeps_positive_order() {
        let pos = samples(5);
        let stream = mix_negative_samples(pos.clone(), vec![], 0.0, 9).unwrap();
        let drawn: Vec<_> = stream.take(12).collect();
        for (i, s) in drawn.iter().enumerate() {
            assert_eq!(s, &pos[i % 5]);
        }
    }

    #[test]
    fn mixing_fraction_and_tokens() {
        let pos = samples(4);
        let neg = vec![make_negative_sample(&pos[0].hq, 1.0, 0).unwrap()];
        let drawn: Vec<_> = mix_negative_samples(pos.clone(), neg, 0.1, 4).unwrap().take(1000).collect();
        let negatives: Vec<_> = drawn.iter().filter(|s| s.quality_label == QualityLabel::Negative).collect();
        assert!((80..=120).contains(&negatives.len()), "{}", negatives.len());
        assert!(negatives.iter().all(|s| s.caption_tokens.iter().any(|t| t == "quality:negative")));
        for s in drawn.iter().filter(|s| s.quality_label == QualityLabel::Positive) {
            assert!(pos.iter().any(|p| p.hq.data() == s.hq.data()));
        }
        assert!(matches!(
            mix_negative_samples(pos, vec![], 0.1, 0),
            Err(Error::EmptyNegativeSet(_))
        ));
    }

    #[test]
    fn config_validation_and_json() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            negative_ratio: 0.3,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let cfg = TrainConfig::from_json(r#"{"steps": 5, "target": "joint"}"#).unwrap();
        assert_eq!(cfg.steps, 5);
        assert_eq!(cfg.target, TrainTarget::Joint);
        assert!(TrainConfig::from_json(r#"{"stepz": 5}"#).is_err());
    }

    #[test]
    fn frozen_base_stays_bit_identical_and_runs_repeat() {
        let vocab = Vocabulary::default();
        let cfg = TrainConfig {
            batch_size: 2,
            steps: 3,
            seed: 5,
            ..TrainConfig::default()
        };
        let run = || {
            let net = tiny_net(2);
            let before = net.store.snapshot().unwrap();
            let mut stream = mix_negative_samples(samples(4), vec![], 0.0, 0).unwrap();
            let history = train_denoiser(&net, &mut stream, &cfg, &vocab).unwrap();
            let after = net.store.snapshot().unwrap();
            for (name, value) in &before {
                if name.starts_with(BASE_PREFIX) {
                    assert_eq!(value, &after[name], "{name}");
                }
            }
            assert!(before.iter().any(|(k, v)| !k.starts_with(BASE_PREFIX) && v != &after[k]));
            history
        };
        let a = run();
        let b = run();
        assert_eq!(a.records.len(), 3);
        for (x, y) in a.records.iter().zip(&b.records) {
            assert!((x.loss - y.loss).abs() <= 1e-5 * x.loss.abs().max(1.0));
        }
    }

    #[test]
    fn history_csv_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let h = LossHistory {
            records: vec![LossRecord {
                step: 0,
                loss: 1.5,
                sigma_mean: 0.25,
            }],
        };
        h.write_csv(&path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "step,loss,sigma_mean\n0,1.5,0.25\n");
        LossHistory::default().write_csv(&path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "step,loss,sigma_mean\n");
    }
}
