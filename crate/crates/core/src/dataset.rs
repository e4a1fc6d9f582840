//! Procedural captioned texture corpus, negative-quality samples and JSONL
//! manifests.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::degradation::{apply_pipeline, DegradationOp, DegradationSpec};
use crate::denoiser::Prompt;
use crate::error::{Error, Result};
use crate::imaging::{save_png, Image};
use crate::training::{QualityLabel, TrainSample};

/// Closed caption vocabulary; a token's id is its position.
pub const VOCABULARY: &[&str] = &[
    "stripes",
    "checker",
    "radial",
    "noise-field",
    "blobs",
    "freq:1",
    "freq:2",
    "freq:4",
    "freq:8",
    "low-frequency",
    "high-frequency",
    "horizontal",
    "vertical",
    "diagonal",
    "antidiagonal",
    "low-contrast",
    "high-contrast",
    "gray",
    "color",
    "quality:high",
    "detailed",
    "sharp",
    "quality:negative",
    "blur",
    "messy",
    "low-quality",
    "dirty",
    "oil-painting",
    "cartoon",
];

/// Tokens appended to every high-quality caption.
pub const POSITIVE_QUALITY_TOKENS: &[&str] = &["quality:high", "detailed", "sharp"];
/// Tokens carried by every negative-quality sample.
pub const NEGATIVE_QUALITY_TOKENS: &[&str] = &["quality:negative", "blur", "messy", "low-quality"];
/// Default negative prompt used for CFG at restoration time.
pub const DEFAULT_NEGATIVE_PROMPT: &[&str] = &[
    "quality:negative",
    "oil-painting",
    "cartoon",
    "blur",
    "dirty",
    "messy",
    "low-quality",
];

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(VOCABULARY.iter().map(|s| s.to_string()).collect())
    }
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn id(&self, token: &str) -> Result<u32> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| Error::InvalidParameter(format!("token `{token}` is not in the vocabulary")))
    }

    pub fn prompt<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Prompt> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()))
            .collect::<Result<Vec<_>>>()
            .map(Prompt::new)
    }

    /// Newline-delimited `vocab.txt`.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_tokens(
            text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect(),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextureFamily {
    Stripes,
    Checker,
    Radial,
    NoiseField,
    Blobs,
}

impl TextureFamily {
    pub const ALL: [TextureFamily; 5] = [
        TextureFamily::Stripes,
        TextureFamily::Checker,
        TextureFamily::Radial,
        TextureFamily::NoiseField,
        TextureFamily::Blobs,
    ];

    pub fn token(self) -> &'static str {
        match self {
            TextureFamily::Stripes => "stripes",
            TextureFamily::Checker => "checker",
            TextureFamily::Radial => "radial",
            TextureFamily::NoiseField => "noise-field",
            TextureFamily::Blobs => "blobs",
        }
    }

    fn oriented(self) -> bool {
        matches!(self, TextureFamily::Stripes | TextureFamily::Checker)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Palette {
    Gray,
    Rgb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureParams {
    pub family: TextureFamily,
    /// Cycles (or features) per image side.
    pub frequency: f64,
    /// Degrees; 0 gives horizontal stripes.
    pub orientation: f64,
    pub contrast: f64,
    pub palette: Palette,
    pub seed: u64,
}

impl TextureParams {
    /// Random parameters with frequencies in `[1, 6]` (log-uniform).
    pub fn random(rng: &mut impl Rng, palette: Palette) -> Self {
        let family = TextureFamily::ALL[rng.random_range(0..TextureFamily::ALL.len())];
        let frequency = (rng.random_range(0.0..(6f64).ln())).exp();
        let orientation = [0.0, 45.0, 90.0, 135.0][rng.random_range(0..4)] + rng.random_range(-8.0..8.0);
        Self {
            family,
            frequency,
            orientation,
            contrast: rng.random_range(0.35..1.0),
            palette,
            seed: rng.random(),
        }
    }

    /// Nearest of the frequency buckets 1, 2, 4, 8 on a log scale.
    pub fn frequency_bucket(&self) -> u32 {
        let l = self.frequency.max(1e-9).log2().round().clamp(0.0, 3.0);
        1 << (l as u32)
    }

    pub fn caption_tokens(&self) -> Vec<String> {
        let bucket = self.frequency_bucket();
        let mut tokens = vec![
            self.family.token().to_string(),
            format!("freq:{bucket}"),
            if bucket <= 2 { "low-frequency" } else { "high-frequency" }.to_string(),
        ];
        if self.family.oriented() {
            let o = ((self.orientation.rem_euclid(180.0) / 45.0).round() as usize) % 4;
            tokens.push(["horizontal", "diagonal", "vertical", "antidiagonal"][o].to_string());
        }
        tokens.push(if self.contrast < 0.5 { "low-contrast" } else { "high-contrast" }.to_string());
        tokens.push(
            match self.palette {
                Palette::Gray => "gray",
                Palette::Rgb => "color",
            }
            .to_string(),
        );
        tokens
    }
}

/// Renders a texture and derives its caption tokens.
pub fn synth_texture(params: &TextureParams, height: usize, width: usize) -> Result<(Image, Vec<String>)> {
    if !(params.frequency > 0.0 && params.frequency.is_finite()) || !(0.0..=1.0).contains(&params.contrast) {
        return Err(Error::InvalidParameter(format!("bad texture parameters {params:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let size = height.max(width) as f64;
    let f = params.frequency;
    let theta = params.orientation.to_radians();
    let phase = rng.random_range(0.0..2.0 * PI);
    // Coordinate across the stripes: theta = 0 varies with y only.
    let across = |y: f64, x: f64| (y * theta.cos() + x * theta.sin()) / size;
    let along = |y: f64, x: f64| (x * theta.cos() - y * theta.sin()) / size;

    let field: Box<dyn Fn(f64, f64) -> f64> = match params.family {
        TextureFamily::Stripes => Box::new(move |y, x| (2.0 * PI * f * across(y, x) + phase).sin()),
        TextureFamily::Checker => Box::new(move |y, x| {
            let s = (2.0 * PI * f * across(y, x) + phase).sin() * (2.0 * PI * f * along(y, x) + phase).sin();
            (3.0 * s).tanh() / 3f64.tanh()
        }),
        TextureFamily::Radial => {
            let cy = height as f64 * rng.random_range(0.3..0.7);
            let cx = width as f64 * rng.random_range(0.3..0.7);
            Box::new(move |y, x| {
                let r = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt() / size;
                (2.0 * PI * f * r + phase).sin()
            })
        }
        TextureFamily::NoiseField => {
            let cells = f.ceil().max(1.0) as usize + 1;
            let grid: Vec<f64> = (0..(cells + 1) * (cells + 1))
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let scale = f.ceil().max(1.0) / size;
            Box::new(move |y, x| {
                let (gy, gx) = (y * scale, x * scale);
                let (iy, ix) = (gy.floor() as usize, gx.floor() as usize);
                let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
                let (ty, tx) = (smooth(gy - iy as f64), smooth(gx - ix as f64));
                let at = |a: usize, b: usize| grid[a.min(cells) * (cells + 1) + b.min(cells)];
                let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
                let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
                (top * (1.0 - ty) + bottom * ty) * 1.4
            })
        }
        TextureFamily::Blobs => {
            let count = (f * 2.0).round().max(1.0) as usize;
            let radius = size / (2.0 * f + 2.0);
            let blobs: Vec<(f64, f64, f64)> = (0..count)
                .map(|_| {
                    (
                        rng.random_range(0.0..height as f64),
                        rng.random_range(0.0..width as f64),
                        if rng.random::<bool>() { 1.0 } else { -1.0 },
                    )
                })
                .collect();
            Box::new(move |y, x| {
                let s: f64 = blobs
                    .iter()
                    .map(|&(by, bx, sign)| sign * (-((y - by).powi(2) + (x - bx).powi(2)) / (2.0 * radius * radius)).exp())
                    .sum();
                s.tanh()
            })
        }
    };

    let (low, high): (Vec<f64>, Vec<f64>) = match params.palette {
        Palette::Gray => (vec![0.5], vec![0.5]),
        Palette::Rgb => (
            (0..3).map(|_| rng.random_range(0.1..0.9)).collect(),
            (0..3).map(|_| rng.random_range(0.1..0.9)).collect(),
        ),
    };
    let channels = low.len();
    let amp = 0.45 * params.contrast;
    let img = Image::from_fn(height, width, channels, |y, x, c| {
        let v = field(y as f64, x as f64).clamp(-1.0, 1.0);
        let value = match params.palette {
            Palette::Gray => 0.5 + amp * v,
            Palette::Rgb => {
                let t = 0.5 + 0.5 * v * params.contrast;
                low[c] * (1.0 - t) + high[c] * t
            }
        };
        value as f32
    })?;
    Ok((img, params.caption_tokens()))
}

/// Degradation parameters of a negative sample at `severity` in `(0, 1]`.
pub fn negative_degradation(severity: f64, seed: u64) -> Result<DegradationSpec> {
    if !(severity > 0.0 && severity <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "severity must be in (0, 1], got {severity}"
        )));
    }
    let blur = 3.0 * severity;
    let noise = 50.0 * severity;
    let quality = (100.0 - 70.0 * severity).round().clamp(1.0, 100.0) as u8;
    let mut ops = Vec::new();
    if blur > 0.0 {
        ops.push(DegradationOp::Blur { sigma: blur });
    }
    ops.push(DegradationOp::GaussianNoise { sigma_255: noise });
    ops.push(DegradationOp::Jpeg { quality });
    Ok(DegradationSpec {
        ops,
        seed,
        resize_back: false,
    })
}

/// Degrades `hq` into a negative-quality sample; both image fields hold the
/// degraded image.
pub fn make_negative_sample(hq: &Image, severity: f64, seed: u64) -> Result<TrainSample> {
    let spec = negative_degradation(severity, seed)?;
    let degraded = apply_pipeline(hq, &spec)?;
    Ok(TrainSample {
        hq: degraded.clone(),
        lq: degraded,
        caption_tokens: NEGATIVE_QUALITY_TOKENS.iter().map(|s| s.to_string()).collect(),
        quality_label: QualityLabel::Negative,
        degradation: Some(spec),
    })
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub caption_tokens: Vec<String>,
    pub quality_label: QualityLabel,
    pub degradation_spec: Option<DegradationSpec>,
    pub sha256: String,
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes `entries` as JSONL to `path`.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Hashes the files behind `entries` (paths relative to `dir`), checks their
/// tokens against `vocab`, and writes `dir/manifest.jsonl`.
pub fn build_manifest(dir: impl AsRef<Path>, entries: Vec<ManifestEntry>, vocab: &Vocabulary) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let mut hashed = Vec::with_capacity(entries.len());
    for mut e in entries {
        if let Some(t) = e.caption_tokens.iter().find(|t| !vocab.contains(t)) {
            return Err(Error::InvalidParameter(format!("{}: token `{t}` not in vocabulary", e.path)));
        }
        e.sha256 = sha256_file(dir.join(&e.path))?;
        hashed.push(e);
    }
    let path = dir.join("manifest.jsonl");
    write_manifest(&path, &hashed)?;
    Ok(path)
}

/// Re-hashes every file listed in the manifest at `path`.
pub fn verify_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let dir = path.parent().unwrap_or(Path::new("."));
    let entries = read_manifest(path)?;
    for e in &entries {
        let actual = sha256_file(dir.join(&e.path))?;
        if actual != e.sha256 {
            return Err(Error::HashMismatch {
                path: e.path.clone(),
                expected: e.sha256.clone(),
                actual,
            });
        }
    }
    Ok(entries)
}

/// A generated corpus item held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusItem {
    pub image: Image,
    pub caption_tokens: Vec<String>,
    pub quality_label: QualityLabel,
    pub degradation_spec: Option<DegradationSpec>,
    pub params: TextureParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub count: usize,
    pub size: usize,
    pub palette: Palette,
    pub negative_ratio: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            count: 256,
            size: 32,
            palette: Palette::Gray,
            negative_ratio: 0.0,
            seed: 0,
        }
    }
}

/// Generates `count` textures; exactly `round(count * negative_ratio)` of them
/// are degraded into negative-quality samples.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<CorpusItem>> {
    if !(0.0..=1.0).contains(&cfg.negative_ratio) {
        return Err(Error::InvalidParameter(format!(
            "negative ratio must be in [0, 1], got {}",
            cfg.negative_ratio
        )));
    }
    if cfg.size < 8 {
        return Err(Error::InvalidParameter(format!("texture size {} is below 8", cfg.size)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_neg = (cfg.count as f64 * cfg.negative_ratio).round() as usize;
    let mut order: Vec<usize> = (0..cfg.count).collect();
    order.shuffle(&mut rng);
    let mut negative = vec![false; cfg.count];
    for &i in &order[..n_neg] {
        negative[i] = true;
    }

    let mut items = Vec::with_capacity(cfg.count);
    for (i, &is_negative) in negative.iter().enumerate() {
        let params = TextureParams::random(&mut rng, cfg.palette);
        let (image, mut tokens) = synth_texture(&params, cfg.size, cfg.size)?;
        let severity = rng.random_range(0.5..=1.0);
        let item_seed = crate::degradation::per_image_seed(cfg.seed, i as u64);
        if is_negative {
            let sample = make_negative_sample(&image, severity, item_seed)?;
            tokens.extend(sample.caption_tokens);
            items.push(CorpusItem {
                image: sample.hq,
                caption_tokens: tokens,
                quality_label: QualityLabel::Negative,
                degradation_spec: sample.degradation,
                params,
            });
        } else {
            tokens.extend(POSITIVE_QUALITY_TOKENS.iter().map(|s| s.to_string()));
            items.push(CorpusItem {
                image,
                caption_tokens: tokens,
                quality_label: QualityLabel::Positive,
                degradation_spec: None,
                params,
            });
        }
    }
    Ok(items)
}

/// Saves a corpus as PNGs plus `manifest.jsonl` and `vocab.txt` under `dir`.
pub fn write_corpus(dir: impl AsRef<Path>, items: &[CorpusItem], vocab: &Vocabulary) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let name = format!("img_{i:05}.png");
        save_png(&item.image, dir.join(&name), 8)?;
        entries.push(ManifestEntry {
            path: name,
            caption_tokens: item.caption_tokens.clone(),
            quality_label: item.quality_label,
            degradation_spec: item.degradation_spec.clone(),
            sha256: String::new(),
        });
    }
    vocab.write(dir.join("vocab.txt"))?;
    build_manifest(dir, entries, vocab)
}
