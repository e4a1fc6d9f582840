use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{Denoiser, Prompt, ZeroSft};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{upsample2x, Conv2d, GroupNorm, Linear, ParamStore};
use crate::Latent;

/// Data standard deviation assumed by the EDM preconditioning.
pub const SIGMA_DATA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Width of the first resolution; the second uses twice as many.
    pub base_channels: usize,
    pub blocks_per_stage: usize,
    pub groups: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub fourier_features: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_channels: 16,
            blocks_per_stage: 2,
            groups: 4,
            embed_dim: 64,
            vocab_size: 64,
            fourier_features: 16,
        }
    }
}

impl UNetConfig {
    /// Residual blocks per adaptor stage: half of the base, rounded up.
    pub fn adaptor_blocks(&self) -> usize {
        self.blocks_per_stage.div_ceil(2)
    }

    fn validate(&self) -> Result<()> {
        let ch = self.base_channels;
        if self.in_channels == 0 || self.blocks_per_stage == 0 || self.groups == 0 {
            return Err(Error::InvalidParameter("network sizes must be positive".into()));
        }
        if ch % self.groups != 0 {
            return Err(Error::InvalidParameter(format!(
                "base_channels {ch} must be divisible by groups {}",
                self.groups
            )));
        }
        Ok(())
    }
}

/// Residual conv block with a per-block scale/shift taken from the conditioning.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        embed_dim: usize,
        groups: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), groups, in_ch)?,
            conv1: Conv2d::new(store, &format!("{name}.conv1"), in_ch, out_ch, 3, 1, true)?,
            emb: Linear::new(store, &format!("{name}.emb"), embed_dim, 2 * out_ch)?,
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), groups, out_ch)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, true)?,
            skip: if in_ch != out_ch {
                Some(Conv2d::new(store, &format!("{name}.skip"), in_ch, out_ch, 1, 1, true)?)
            } else {
                None
            },
        })
    }

    pub fn deep_copy(&self, store: &mut ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            norm1: self.norm1.deep_copy(store, &format!("{name}.norm1"))?,
            conv1: self.conv1.deep_copy(store, &format!("{name}.conv1"))?,
            emb: self.emb.deep_copy(store, &format!("{name}.emb"))?,
            norm2: self.norm2.deep_copy(store, &format!("{name}.norm2"))?,
            conv2: self.conv2.deep_copy(store, &format!("{name}.conv2"))?,
            skip: match &self.skip {
                Some(s) => Some(s.deep_copy(store, &format!("{name}.skip"))?),
                None => None,
            },
        })
    }

    /// `x: (N, C, H, W)`, `cond: (N, E)`.
    pub fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let out_ch = self.conv1.out_channels();
        let ss = self.emb.forward(cond)?;
        let n = ss.dim(0)?;
        let scale = ss.narrow(1, 0, out_ch)?.reshape((n, out_ch, 1, 1))?;
        let shift = ss.narrow(1, out_ch, out_ch)?.reshape((n, out_ch, 1, 1))?;
        let h = self
            .norm2
            .forward(&h)?
            .broadcast_mul(&(scale + 1.0)?)?
            .broadcast_add(&shift)?;
        let h = self.conv2.forward(&h.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Mean-pooled caption token embedding.
#[derive(Debug, Clone)]
pub struct TokenEmbedding {
    table: Tensor,
}

/// The pooled embedding of one prompt, as consumed by the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningVector {
    pub token_ids: Vec<u32>,
    pub embedding: Vec<f32>,
}

impl TokenEmbedding {
    fn new(store: &mut ParamStore, name: &str, vocab: usize, dim: usize) -> Result<Self> {
        // Unit-scale rows; the fan-in rule would make them vanishingly small.
        Ok(Self {
            table: store.uniform(name, &[vocab, dim], 3)?,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.table.dims()[0]
    }

    /// `(N, E)` embeddings; an empty prompt maps to the zero vector.
    pub fn embed(&self, prompts: &[Prompt]) -> Result<Tensor> {
        let vocab = self.vocab_size();
        let mut weights = vec![0f64; prompts.len() * vocab];
        for (i, p) in prompts.iter().enumerate() {
            for &t in &p.tokens {
                if t as usize >= vocab {
                    return Err(Error::InvalidParameter(format!(
                        "token id {t} outside vocabulary of {vocab}"
                    )));
                }
                weights[i * vocab + t as usize] += 1.0 / p.tokens.len() as f64;
            }
        }
        let w = Tensor::from_vec(weights, (prompts.len(), vocab), self.table.device())?
            .to_dtype(self.table.dtype())?;
        Ok(w.matmul(&self.table)?)
    }

    pub fn condition(&self, prompt: &Prompt) -> Result<ConditioningVector> {
        let e = self.embed(std::slice::from_ref(prompt))?;
        Ok(ConditioningVector {
            token_ids: prompt.tokens.clone(),
            embedding: e.squeeze(0)?.to_dtype(DType::F32)?.to_vec1()?,
        })
    }
}

/// The frozen-able prior: a two-resolution UNet conditioned on noise level
/// and caption embedding.
#[derive(Debug, Clone)]
pub struct BaseUNet {
    pub tokens: TokenEmbedding,
    sigma_fc1: Linear,
    sigma_fc2: Linear,
    frequencies: Vec<f64>,
    pub stem: Conv2d,
    pub enc0: Vec<ResBlock>,
    pub down: Conv2d,
    pub enc1: Vec<ResBlock>,
    mid: ResBlock,
    dec1: Vec<ResBlock>,
    up: Conv2d,
    dec0: Vec<ResBlock>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

/// Skip features of the base encoder.
struct EncoderFeatures {
    skip0: Tensor,
    skip1: Tensor,
}

impl BaseUNet {
    fn new(store: &mut ParamStore, cfg: &UNetConfig) -> Result<Self> {
        let (c, ch, e, g) = (cfg.in_channels, cfg.base_channels, cfg.embed_dim, cfg.groups);
        let n = cfg.blocks_per_stage;
        let blocks = |store: &mut ParamStore, prefix: &str, first_in: usize, out: usize| {
            (0..n)
                .map(|i| {
                    let in_ch = if i == 0 { first_in } else { out };
                    ResBlock::new(store, &format!("{prefix}.{i}"), in_ch, out, e, g)
                })
                .collect::<Result<Vec<_>>>()
        };
        let k = cfg.fourier_features;
        let frequencies = (0..k)
            .map(|i| (i as f64 * (16f64).ln() / (k.max(2) - 1) as f64).exp())
            .collect();
        Ok(Self {
            tokens: TokenEmbedding::new(store, "base.tokens", cfg.vocab_size, e)?,
            sigma_fc1: Linear::new(store, "base.sigma_fc1", 2 * k, e)?,
            sigma_fc2: Linear::new(store, "base.sigma_fc2", e, e)?,
            frequencies,
            stem: Conv2d::new(store, "base.stem", c, ch, 3, 1, true)?,
            enc0: blocks(store, "base.enc0", ch, ch)?,
            down: Conv2d::new(store, "base.down", ch, 2 * ch, 3, 2, true)?,
            enc1: blocks(store, "base.enc1", 2 * ch, 2 * ch)?,
            mid: ResBlock::new(store, "base.mid", 2 * ch, 2 * ch, e, g)?,
            dec1: blocks(store, "base.dec1", 4 * ch, 2 * ch)?,
            up: Conv2d::new(store, "base.up", 2 * ch, ch, 3, 1, true)?,
            dec0: blocks(store, "base.dec0", 2 * ch, ch)?,
            out_norm: GroupNorm::new(store, "base.out_norm", g, ch)?,
            out_conv: Conv2d::new(store, "base.out_conv", ch, c, 3, 1, true)?,
        })
    }

    /// `(N, E)` conditioning from per-item noise levels and prompts.
    fn condition(&self, c_noise: &[f64], prompts: &[Prompt], dtype: DType, device: &Device) -> Result<Tensor> {
        let n = c_noise.len();
        let k = self.frequencies.len();
        let mut feats = Vec::with_capacity(n * 2 * k);
        for &c in c_noise {
            feats.extend(self.frequencies.iter().map(|f| (f * c).cos()));
            feats.extend(self.frequencies.iter().map(|f| (f * c).sin()));
        }
        let feats = Tensor::from_vec(feats, (n, 2 * k), device)?.to_dtype(dtype)?;
        let sigma_emb = self.sigma_fc2.forward(&self.sigma_fc1.forward(&feats)?.silu()?)?;
        let prompts: Vec<Prompt> = match prompts.len() {
            1 => vec![prompts[0].clone(); n],
            0 => vec![Prompt::default(); n],
            m if m == n => prompts.to_vec(),
            m => {
                return Err(Error::ShapeMismatch {
                    expected: vec![n],
                    actual: vec![m],
                })
            }
        };
        Ok((sigma_emb + self.tokens.embed(&prompts)?)?)
    }

    fn encode(&self, x: &Tensor, cond: &Tensor) -> Result<EncoderFeatures> {
        let mut h = self.stem.forward(x)?;
        for b in &self.enc0 {
            h = b.forward(&h, cond)?;
        }
        let skip0 = h.clone();
        h = self.down.forward(&h)?;
        for b in &self.enc1 {
            h = b.forward(&h, cond)?;
        }
        Ok(EncoderFeatures { skip0, skip1: h })
    }

    fn decode(
        &self,
        feats: &EncoderFeatures,
        cond: &Tensor,
        connectors: Option<(&[ZeroSft; 2], &[Tensor; 2])>,
    ) -> Result<Tensor> {
        let merge = |stage: usize, x_f: &Tensor, x_s: &Tensor| -> Result<Tensor> {
            match connectors {
                Some((sft, ctrl)) => sft[stage].forward(x_f, x_s, &ctrl[stage]),
                None => Ok(Tensor::cat(&[x_f, x_s], 1)?),
            }
        };
        let mut h = self.mid.forward(&feats.skip1, cond)?;
        h = merge(1, &h, &feats.skip1)?;
        for b in &self.dec1 {
            h = b.forward(&h, cond)?;
        }
        h = self.up.forward(&upsample2x(&h)?)?;
        h = merge(0, &h, &feats.skip0)?;
        for b in &self.dec0 {
            h = b.forward(&h, cond)?;
        }
        self.out_conv.forward(&self.out_norm.forward(&h)?.silu()?)
    }
}

/// Trainable, trimmed copy of the base encoder that reads the LQ input.
#[derive(Debug, Clone)]
pub struct Adaptor {
    pub stem: Conv2d,
    pub lq_stem: Conv2d,
    pub enc0: Vec<ResBlock>,
    pub down: Conv2d,
    pub enc1: Vec<ResBlock>,
}

impl Adaptor {
    pub fn blocks_per_stage(&self) -> [usize; 2] {
        [self.enc0.len(), self.enc1.len()]
    }

    /// Control features `[X_c0, X_c1]` at the two resolutions.
    fn forward(&self, x: &Tensor, z_lq: &Tensor, cond: &Tensor) -> Result<[Tensor; 2]> {
        let mut h = (self.stem.forward(x)? + self.lq_stem.forward(z_lq)?)?;
        for b in &self.enc0 {
            h = b.forward(&h, cond)?;
        }
        let c0 = h.clone();
        h = self.down.forward(&h)?;
        for b in &self.enc1 {
            h = b.forward(&h, cond)?;
        }
        Ok([c0, h])
    }
}

/// Copies the first `ceil(n/2)` blocks of every base encoder stage (plus the
/// stem and downsampler) into fresh variables and adds an LQ input stem.
pub fn build_adaptor(base: &BaseUNet, store: &mut ParamStore, cfg: &UNetConfig) -> Result<Adaptor> {
    let keep = cfg.adaptor_blocks();
    let copy_stage = |store: &mut ParamStore, blocks: &[ResBlock], prefix: &str| {
        blocks[..keep]
            .iter()
            .enumerate()
            .map(|(i, b)| b.deep_copy(store, &format!("{prefix}.{i}")))
            .collect::<Result<Vec<_>>>()
    };
    Ok(Adaptor {
        stem: base.stem.deep_copy(store, "adaptor.stem")?,
        lq_stem: Conv2d::new(store, "adaptor.lq_stem", cfg.in_channels, cfg.base_channels, 3, 1, true)?,
        enc0: copy_stage(store, &base.enc0, "adaptor.enc0")?,
        down: base.down.deep_copy(store, "adaptor.down")?,
        enc1: copy_stage(store, &base.enc1, "adaptor.enc1")?,
    })
}

/// Which parts of the network participate in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// The base UNet alone; skips merge by plain concatenation.
    BaseOnly,
    /// Base plus adaptor, joined through the ZeroSFT connectors.
    Controlled,
}

/// Base UNet, trimmed adaptor and one ZeroSFT connector per decoder stage,
/// wrapped in the EDM preconditioning so the output is a denoised estimate.
#[derive(Debug, Clone)]
pub struct ControlledUNet {
    pub config: UNetConfig,
    pub store: ParamStore,
    pub base: BaseUNet,
    pub adaptor: Adaptor,
    pub connectors: [ZeroSft; 2],
}

/// Parameter name prefixes of the base network.
pub const BASE_PREFIX: &str = "base.";
/// Checkpoint kind tag of the controlled UNet.
pub const CHECKPOINT_KIND: &str = "controlled-unet";
/// Parameter name prefixes of the adaptor and its connectors.
pub const CONTROL_PREFIXES: [&str; 2] = ["adaptor.", "connectors."];

impl ControlledUNet {
    pub fn new(config: UNetConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let base = BaseUNet::new(&mut store, &config)?;
        let adaptor = build_adaptor(&base, &mut store, &config)?;
        let ch = config.base_channels;
        let connectors = [
            ZeroSft::new(&mut store, "connectors.0", ch, ch, config.groups)?,
            ZeroSft::new(&mut store, "connectors.1", 2 * ch, 2 * ch, config.groups)?,
        ];
        Ok(Self {
            config,
            store,
            base,
            adaptor,
            connectors,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_store(CHECKPOINT_KIND, serde_json::to_value(&self.config)?, &self.store)
    }

    /// Rebuilds an `f32` network from a checkpoint written by [`Self::checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        let config: UNetConfig = serde_json::from_value(ckpt.config.clone())?;
        let net = Self::new(config, DType::F32, 0)?;
        ckpt.load_into(&net.store)?;
        Ok(net)
    }

    /// Re-initializes the adaptor from the current base weights and zeroes the
    /// connectors, e.g. after the base has been pretrained.
    pub fn reset_control(&self) -> Result<()> {
        for (name, var) in self.store.iter() {
            if let Some(rest) = name.strip_prefix("adaptor.") {
                if rest.starts_with("lq_stem") {
                    continue;
                }
                let src = self
                    .store
                    .get(&format!("base.{rest}"))
                    .ok_or_else(|| Error::Checkpoint(format!("no base counterpart for {name}")))?;
                var.set(&src.as_tensor().copy()?)?;
            } else if name.starts_with("connectors.") {
                var.set(&var.as_tensor().zeros_like()?)?;
            }
        }
        Ok(())
    }

    /// Number of parameters in the base encoder (stem, both stages, downsampler).
    pub fn base_encoder_params(&self) -> usize {
        ["base.stem", "base.enc0", "base.down", "base.enc1"]
            .iter()
            .map(|p| self.store.count(p))
            .sum()
    }

    pub fn adaptor_params(&self) -> usize {
        self.store.count("adaptor.")
    }

    /// Raw network output `F(x_in, c_noise)` without preconditioning.
    pub fn raw_forward(
        &self,
        x_in: &Tensor,
        z_lq: Option<&Tensor>,
        c_noise: &[f64],
        prompts: &[Prompt],
        branch: Branch,
    ) -> Result<Tensor> {
        let (n, c, h, w) = x_in.dims4()?;
        if c != self.config.in_channels || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::ShapeMismatch {
                expected: vec![n, self.config.in_channels, h + h % 2, w + w % 2],
                actual: x_in.dims().to_vec(),
            });
        }
        if c_noise.len() != n {
            return Err(Error::ShapeMismatch {
                expected: vec![n],
                actual: vec![c_noise.len()],
            });
        }
        let cond = self.base.condition(c_noise, prompts, self.dtype(), x_in.device())?;
        let feats = self.base.encode(x_in, &cond)?;
        match branch {
            Branch::BaseOnly => self.base.decode(&feats, &cond, None),
            Branch::Controlled => {
                let z_lq = z_lq.ok_or_else(|| Error::InvalidParameter("controlled pass needs z_lq".into()))?;
                if z_lq.dims() != x_in.dims() {
                    return Err(Error::ShapeMismatch {
                        expected: x_in.dims().to_vec(),
                        actual: z_lq.dims().to_vec(),
                    });
                }
                let ctrl = self.adaptor.forward(x_in, z_lq, &cond)?;
                self.base.decode(&feats, &cond, Some((&self.connectors, &ctrl)))
            }
        }
    }

    /// Preconditioned denoiser `c_skip x + c_out F(c_in x, ln(sigma)/4)` with
    /// one noise level per batch item.
    pub fn denoise_tensor(
        &self,
        x: &Tensor,
        z_lq: Option<&Tensor>,
        sigmas: &[f64],
        prompts: &[Prompt],
        branch: Branch,
    ) -> Result<Tensor> {
        let n = x.dim(0)?;
        if sigmas.len() != n || sigmas.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "need {n} positive noise levels, got {sigmas:?}"
            )));
        }
        let sd2 = SIGMA_DATA * SIGMA_DATA;
        let per_item = |f: &dyn Fn(f64) -> f64| -> Result<Tensor> {
            let v: Vec<f64> = sigmas.iter().map(|&s| f(s)).collect();
            Ok(Tensor::from_vec(v, (n, 1, 1, 1), x.device())?.to_dtype(x.dtype())?)
        };
        let c_skip = per_item(&|s| sd2 / (s * s + sd2))?;
        let c_out = per_item(&|s| s * SIGMA_DATA / (s * s + sd2).sqrt())?;
        let c_in = per_item(&|s| 1.0 / (s * s + sd2).sqrt())?;
        let c_noise: Vec<f64> = sigmas.iter().map(|s| s.ln() / 4.0).collect();
        let f = self.raw_forward(&x.broadcast_mul(&c_in)?, z_lq, &c_noise, prompts, branch)?;
        Ok((x.broadcast_mul(&c_skip)? + f.broadcast_mul(&c_out)?)?)
    }

    /// Converts a `(N, C, H, W)` or `(C, H, W)` latent to a tensor batch.
    pub fn latent_to_tensor(&self, z: &Latent) -> Result<Tensor> {
        let shape: Vec<usize> = match z.ndim() {
            3 => std::iter::once(1).chain(z.shape().iter().copied()).collect(),
            4 => z.shape().to_vec(),
            _ => {
                return Err(Error::ShapeMismatch {
                    expected: vec![0, self.config.in_channels, 0, 0],
                    actual: z.shape().to_vec(),
                })
            }
        };
        let data: Vec<f64> = z.iter().copied().collect();
        Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.dtype())?)
    }

    pub fn tensor_to_latent(t: &Tensor, shape: &[usize]) -> Result<Latent> {
        let data = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        Latent::from_shape_vec(shape, data).map_err(|e| Error::InvalidParameter(e.to_string()))
    }
}

impl Denoiser for ControlledUNet {
    fn denoise(&self, z: &Latent, z_lq: &Latent, sigma: f64, prompts: &[Prompt]) -> Result<Latent> {
        if z.shape() != z_lq.shape() {
            return Err(Error::ShapeMismatch {
                expected: z.shape().to_vec(),
                actual: z_lq.shape().to_vec(),
            });
        }
        let x = self.latent_to_tensor(z)?;
        let lq = self.latent_to_tensor(z_lq)?;
        let n = x.dim(0)?;
        let out = self.denoise_tensor(&x, Some(&lq), &vec![sigma; n], prompts, Branch::Controlled)?;
        let latent = Self::tensor_to_latent(&out, z.shape())?;
        if latent.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: 0,
                what: format!("network activation at sigma {sigma}"),
            });
        }
        Ok(latent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::scalar;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};

    fn small_config(channels: usize) -> UNetConfig {
        UNetConfig {
            in_channels: channels,
            base_channels: 8,
            embed_dim: 16,
            vocab_size: 10,
            fourier_features: 4,
            ..UNetConfig::default()
        }
    }

    fn random_latent(shape: &[usize], seed: u64) -> Latent {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Latent::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0..1.0))
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        scalar(&(a - b).unwrap().abs().unwrap().max_all().unwrap()).unwrap()
    }

    #[test]
    fn fresh_control_is_transparent() {
        let net = ControlledUNet::new(small_config(1), DType::F32, 1).unwrap();
        let x = net.latent_to_tensor(&random_latent(&[2, 1, 8, 8], 2)).unwrap();
        let lq = net.latent_to_tensor(&random_latent(&[2, 1, 8, 8], 3)).unwrap();
        let prompts = [Prompt::new(vec![1, 2]), Prompt::default()];
        let a = net.denoise_tensor(&x, Some(&lq), &[0.3, 2.0], &prompts, Branch::Controlled).unwrap();
        let b = net.denoise_tensor(&x, None, &[0.3, 2.0], &prompts, Branch::BaseOnly).unwrap();
        assert_eq!(max_diff(&a, &b), 0.0);
    }

    #[test]
    fn output_shapes() {
        for (c, hw) in [(1, 32), (3, 64)] {
            let net = ControlledUNet::new(small_config(c), DType::F32, 0).unwrap();
            let z = random_latent(&[1, c, hw, hw], 4);
            let out = net.denoise(&z, &z, 1.0, &[Prompt::new(vec![3])]).unwrap();
            assert_eq!(out.shape(), z.shape());
            let single = random_latent(&[c, hw, hw], 5);
            assert_eq!(net.denoise(&single, &single, 1.0, &[]).unwrap().shape(), single.shape());
        }
    }

    #[test]
    fn adaptor_is_a_trimmed_copy() {
        for n in [1usize, 2, 3, 4] {
            let cfg = UNetConfig {
                blocks_per_stage: n,
                ..small_config(1)
            };
            let net = ControlledUNet::new(cfg, DType::F32, 0).unwrap();
            assert_eq!(net.adaptor.blocks_per_stage(), [n.div_ceil(2); 2]);
        }
        let net = ControlledUNet::new(UNetConfig::default(), DType::F32, 0).unwrap();
        assert_eq!(net.adaptor.blocks_per_stage(), [1, 1]);
        let copied = net.store.get("adaptor.enc0.0.conv1.weight").unwrap().as_tensor();
        let original = net.store.get("base.enc0.0.conv1.weight").unwrap().as_tensor();
        assert_eq!(max_diff(copied, original), 0.0);
        let base = net.base_encoder_params() as f64;
        let adaptor = net.adaptor_params() as f64;
        assert!(adaptor <= 0.75 * base, "{adaptor} vs {base}");
    }

    #[test]
    fn adaptor_weights_are_deep_copies() {
        let net = ControlledUNet::new(small_config(1), DType::F32, 0).unwrap();
        let before = net.store.get("base.stem.weight").unwrap().as_tensor().copy().unwrap();
        let a = net.store.get("adaptor.stem.weight").unwrap();
        a.set(&a.as_tensor().ones_like().unwrap()).unwrap();
        let after = net.store.get("base.stem.weight").unwrap().as_tensor();
        assert_eq!(max_diff(&before, after), 0.0);
        net.reset_control().unwrap();
        assert_eq!(max_diff(net.store.get("adaptor.stem.weight").unwrap().as_tensor(), after), 0.0);
    }

    #[test]
    fn token_embedding_is_mean_of_rows() {
        let net = ControlledUNet::new(small_config(1), DType::F64, 0).unwrap();
        let empty = net.base.tokens.condition(&Prompt::default()).unwrap();
        assert!(empty.embedding.iter().all(|&v| v == 0.0));
        let pair = net.base.tokens.condition(&Prompt::new(vec![2, 5])).unwrap();
        let r2 = net.base.tokens.condition(&Prompt::new(vec![2])).unwrap();
        let r5 = net.base.tokens.condition(&Prompt::new(vec![5])).unwrap();
        for i in 0..pair.embedding.len() {
            assert!((pair.embedding[i] - (r2.embedding[i] + r5.embedding[i]) / 2.0).abs() < 1e-6);
        }
        assert!(net.base.tokens.embed(&[Prompt::new(vec![99])]).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        let net = ControlledUNet::new(small_config(1), DType::F32, 0).unwrap();
        let z = random_latent(&[1, 1, 8, 8], 1);
        let odd = random_latent(&[1, 1, 7, 8], 1);
        assert!(net.denoise(&odd, &odd, 1.0, &[]).is_err());
        assert!(net.denoise(&z, &odd, 1.0, &[]).is_err());
        let wrong_c = random_latent(&[1, 3, 8, 8], 1);
        assert!(net.denoise(&wrong_c, &wrong_c, 1.0, &[]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_restores_outputs() {
        let net = ControlledUNet::new(small_config(1), DType::F32, 4).unwrap();
        let bytes = net.checkpoint().unwrap().to_bytes().unwrap();
        let back = ControlledUNet::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.config, net.config);
        assert_eq!(back.store.snapshot().unwrap(), net.store.snapshot().unwrap());
        let mut other = net.checkpoint().unwrap();
        other.kind = "autoencoder".into();
        assert!(ControlledUNet::from_checkpoint(&other).is_err());
    }
}
