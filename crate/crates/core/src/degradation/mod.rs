//! Synthetic degradation operators, composable pipelines and named presets.

mod jpeg;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;

pub use jpeg::{chroma_table, jpeg_round_trip, luma_table};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMethod {
    /// Catmull-Rom cubic (a = -0.5) with edge clamping.
    #[default]
    Bicubic,
}

impl ResizeMethod {
    fn is_default(&self) -> bool {
        *self == ResizeMethod::Bicubic
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationOp {
    Blur {
        sigma: f64,
    },
    Resize {
        scale: f64,
        #[serde(default, skip_serializing_if = "ResizeMethod::is_default")]
        method: ResizeMethod,
    },
    #[serde(rename = "noise")]
    GaussianNoise {
        sigma_255: f64,
    },
    Jpeg {
        quality: u8,
    },
}

impl DegradationOp {
    pub fn resize(scale: f64) -> Self {
        DegradationOp::Resize {
            scale,
            method: ResizeMethod::Bicubic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        match *self {
            DegradationOp::Blur { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                bad(format!("blur sigma must be positive, got {sigma}"))
            }
            DegradationOp::Resize { scale, .. } if !(scale > 0.0 && scale.is_finite()) => {
                bad(format!("resize scale must be positive, got {scale}"))
            }
            DegradationOp::GaussianNoise { sigma_255 } if !(sigma_255 >= 0.0 && sigma_255.is_finite()) => {
                bad(format!("noise sigma must be non-negative, got {sigma_255}"))
            }
            DegradationOp::Jpeg { quality } if !(1..=100).contains(&quality) => {
                bad(format!("jpeg quality must be in 1..=100, got {quality}"))
            }
            _ => Ok(()),
        }
    }

    pub fn apply(&self, img: &Image, rng: &mut impl Rng) -> Result<Image> {
        match *self {
            DegradationOp::Blur { sigma } => Ok(gaussian_blur(img, sigma)),
            DegradationOp::Resize { scale, method } => resize(img, scale, method),
            DegradationOp::GaussianNoise { sigma_255 } => Ok(add_gaussian_noise(img, sigma_255, rng)),
            DegradationOp::Jpeg { quality } => Ok(jpeg_compress(img, quality)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub ops: Vec<DegradationOp>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_resize_back")]
    pub resize_back: bool,
}

fn default_resize_back() -> bool {
    true
}

impl DegradationSpec {
    pub fn new(ops: Vec<DegradationOp>, seed: u64) -> Self {
        Self {
            ops,
            seed,
            resize_back: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ops.iter().try_for_each(DegradationOp::validate)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Seed for the `index`-th image of a batch degraded under one base seed.
pub fn per_image_seed(seed: u64, index: u64) -> u64 {
    seed ^ index
}

/// Reflect-101 index mapping (`-1 -> 1`, `n -> n - 2`) for any offset.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Normalized 1-D Gaussian taps over `[-ceil(3 sigma), ceil(3 sigma)]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable Gaussian blur with reflect padding. `sigma <= 0` is the identity.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (h, w, c) = (img.height(), img.width(), img.channels());

    let mut horiz = vec![0.0f64; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &t) in kernel.iter().enumerate() {
                    let sx = reflect(x as isize + k as isize - radius, w);
                    acc += t * img.get(y, sx, ch) as f64;
                }
                horiz[(y * w + x) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &t) in kernel.iter().enumerate() {
                    let sy = reflect(y as isize + k as isize - radius, h);
                    acc += t * horiz[(sy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = acc as f32;
            }
        }
    }
    Image::new(h, w, c, out).expect("blur preserves shape")
}

/// Catmull-Rom cubic kernel (a = -0.5).
pub fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t.powi(3) - (A + 3.0) * t.powi(2) + 1.0
    } else if t < 2.0 {
        A * t.powi(3) - 5.0 * A * t.powi(2) + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

/// Taps `(source index, weight)` for every output coordinate along one axis.
fn cubic_taps(in_len: usize, out_len: usize) -> Vec<[(usize, f64); 4]> {
    let ratio = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * ratio - 0.5;
            let base = src.floor();
            let frac = src - base;
            let mut taps = [(0usize, 0.0f64); 4];
            for (k, tap) in taps.iter_mut().enumerate() {
                let offset = k as isize - 1;
                let idx = (base as isize + offset).clamp(0, in_len as isize - 1) as usize;
                *tap = (idx, cubic_weight(frac - offset as f64));
            }
            taps
        })
        .collect()
}

/// Bicubic resize by `scale`; output dims are `round(dim * scale)`.
pub fn resize(img: &Image, scale: f64, method: ResizeMethod) -> Result<Image> {
    let out_h = (img.height() as f64 * scale).round();
    let out_w = (img.width() as f64 * scale).round();
    if !(out_h >= 1.0 && out_w >= 1.0) {
        return Err(Error::DegenerateOutputSize {
            height: img.height(),
            width: img.width(),
            scale,
        });
    }
    Ok(resize_to(img, out_h as usize, out_w as usize, method))
}

/// Bicubic resize to an exact output size.
pub fn resize_to(img: &Image, out_h: usize, out_w: usize, _method: ResizeMethod) -> Image {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    if (out_h, out_w) == (h, w) {
        return img.clone();
    }
    let xt = cubic_taps(w, out_w);
    let yt = cubic_taps(h, out_h);

    let mut horiz = vec![0.0f64; h * out_w * c];
    for y in 0..h {
        for (x, taps) in xt.iter().enumerate() {
            for ch in 0..c {
                horiz[(y * out_w + x) * c + ch] = taps
                    .iter()
                    .map(|&(sx, wt)| wt * img.get(y, sx, ch) as f64)
                    .sum();
            }
        }
    }
    let mut out = vec![0.0f32; out_h * out_w * c];
    for (y, taps) in yt.iter().enumerate() {
        for x in 0..out_w {
            for ch in 0..c {
                let v: f64 = taps
                    .iter()
                    .map(|&(sy, wt)| wt * horiz[(sy * out_w + x) * c + ch])
                    .sum();
                out[(y * out_w + x) * c + ch] = v as f32;
            }
        }
    }
    Image::new(out_h, out_w, c, out).expect("resize output is well formed")
}

/// Adds i.i.d. `N(0, (sigma_255 / 255)^2)` noise drawn from `rng`, then clamps.
pub fn add_gaussian_noise(img: &Image, sigma_255: f64, rng: &mut impl Rng) -> Image {
    if sigma_255 <= 0.0 {
        return img.clone();
    }
    let sigma = sigma_255 / 255.0;
    img.map(|v| {
        let n: f64 = rng.sample(StandardNormal);
        (v as f64 + sigma * n) as f32
    })
}

pub fn jpeg_compress(img: &Image, quality: u8) -> Image {
    jpeg_round_trip(img, quality.clamp(1, 100))
}

/// Applies `spec.ops` in order; with `resize_back` the result is resized to the
/// input's resolution.
pub fn apply_pipeline(img: &Image, spec: &DegradationSpec) -> Result<Image> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut cur = img.clone();
    for op in &spec.ops {
        cur = op.apply(&cur, &mut rng)?;
    }
    if spec.resize_back && (cur.height(), cur.width()) != (img.height(), img.width()) {
        cur = resize_to(&cur, img.height(), img.width(), ResizeMethod::Bicubic);
    }
    Ok(cur)
}

type PresetBuilder = fn() -> Vec<DegradationOp>;

/// Named degradation settings of the synthetic benchmark.
pub struct PresetRegistry {
    presets: BTreeMap<&'static str, PresetBuilder>,
}

impl Default for PresetRegistry {
    fn default() -> Self {
        Self::with_benchmark_presets()
    }
}

impl PresetRegistry {
    pub fn empty() -> Self {
        Self {
            presets: BTreeMap::new(),
        }
    }

    pub fn with_benchmark_presets() -> Self {
        let mut reg = Self::empty();
        reg.register("sr4", || vec![DegradationOp::resize(0.25)]);
        reg.register("sr8", || vec![DegradationOp::resize(0.125)]);
        reg.register("blur2-sr4", || {
            vec![DegradationOp::Blur { sigma: 2.0 }, DegradationOp::resize(0.25)]
        });
        reg.register("sr4-noise40", || {
            vec![
                DegradationOp::resize(0.25),
                DegradationOp::GaussianNoise { sigma_255: 40.0 },
            ]
        });
        reg.register("mix-full", || {
            vec![
                DegradationOp::Blur { sigma: 2.0 },
                DegradationOp::resize(0.25),
                DegradationOp::GaussianNoise { sigma_255: 20.0 },
                DegradationOp::Jpeg { quality: 50 },
            ]
        });
        reg
    }

    pub fn register(&mut self, name: &'static str, build: PresetBuilder) {
        self.presets.insert(name, build);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.presets.keys().copied().collect()
    }

    pub fn get(&self, name: &str, seed: u64) -> Result<DegradationSpec> {
        let build = self.presets.get(name).ok_or_else(|| Error::UnknownName {
            kind: "preset",
            name: name.to_string(),
            valid: self.names().join(", "),
        })?;
        Ok(DegradationSpec::new(build(), seed))
    }
}

/// Parameter ranges of the randomized training degradation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationRanges {
    pub blur_sigma: (f64, f64),
    pub scales: Vec<f64>,
    pub noise_sigma_255: (f64, f64),
    pub jpeg_quality: (u8, u8),
}

impl Default for DegradationRanges {
    fn default() -> Self {
        Self {
            blur_sigma: (0.2, 3.0),
            scales: vec![2.0, 4.0, 8.0],
            noise_sigma_255: (0.0, 40.0),
            jpeg_quality: (30, 95),
        }
    }
}

impl DegradationRanges {
    /// Draws one `[blur, downscale, noise, jpeg]` spec; the spec's own seed
    /// drives the noise.
    pub fn sample(&self, rng: &mut impl Rng) -> DegradationSpec {
        let uniform = |rng: &mut dyn rand::RngCore, (lo, hi): (f64, f64)| {
            if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        };
        let sigma = uniform(rng, self.blur_sigma);
        let factor = self.scales[rng.random_range(0..self.scales.len())];
        let noise = uniform(rng, self.noise_sigma_255);
        let (qlo, qhi) = self.jpeg_quality;
        let quality = rng.random_range(qlo..=qhi.max(qlo));
        let seed = rng.random();
        let mut ops = Vec::with_capacity(4);
        if sigma > 0.0 {
            ops.push(DegradationOp::Blur { sigma });
        }
        ops.push(DegradationOp::resize(1.0 / factor));
        ops.push(DegradationOp::GaussianNoise { sigma_255: noise });
        ops.push(DegradationOp::Jpeg { quality });
        DegradationSpec::new(ops, seed)
    }
}
