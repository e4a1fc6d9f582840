//! Pixel-space images, PNG I/O and full-reference quality metrics.
//!
//! Intensities are stored as `f32` in `[0, 1]`, interleaved `H x W x C`
//! row-major. Metrics use a peak value of 1.0; on 8-bit conventions the PSNR
//! differs only by the constant `20 log10(255)` that cancels in the ratio, so
//! the numbers are directly comparable.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// PSNR reported when the images are (numerically) identical.
pub const PSNR_CAP_DB: f64 = 99.0;
/// Side length of the uniform SSIM window.
pub const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const BT601: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    /// Builds an image from interleaved data, clamping every value into `[0, 1]`.
    pub fn new(height: usize, width: usize, channels: usize, mut data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidParameter(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidParameter(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                expected: vec![expected],
                actual: vec![data.len()],
            });
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite intensity {bad}"
            )));
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Builds an image by evaluating `f(y, x, c)` for every sample.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    let v = f(y, x, c);
                    // NaN would otherwise be clamped into range silently.
                    data.push(if v.is_nan() { 0.0 } else { v });
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    /// Builds an image from a `C x H x W` array, clamping into `[0, 1]`.
    /// Non-finite values are rejected.
    pub fn from_chw(array: &Array3<f64>) -> Result<Self> {
        let (c, h, w) = array.dim();
        let mut data = Vec::with_capacity(c * h * w);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(array[[ch, y, x]] as f32);
                }
            }
        }
        Self::new(h, w, c, data)
    }

    pub fn to_chw(&self) -> Array3<f64> {
        Array3::from_shape_fn((self.channels, self.height, self.width), |(c, y, x)| {
            self.get(y, x, c) as f64
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Applies `f` to every sample and clamps the result back into range.
    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Self {
        let data = self
            .data
            .iter()
            .map(|&v| {
                let out = f(v);
                if out.is_nan() {
                    0.0
                } else {
                    out.clamp(0.0, 1.0)
                }
            })
            .collect();
        Self { data, ..*self }
    }

    /// BT.601 luma; single-channel images are returned unchanged.
    pub fn to_luma(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|px| {
                (BT601[0] * px[0] as f64 + BT601[1] * px[1] as f64 + BT601[2] * px[2] as f64)
                    as f32
            })
            .collect();
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape().to_vec(),
                actual: other.shape().to_vec(),
            });
        }
        Ok(())
    }
}

/// Reads an 8- or 16-bit grayscale or RGB PNG. Alpha channels are dropped.
pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| decode_error(path, e))?;
    let (color, depth) = reader.output_color_type();
    let src_channels = match color {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::UnsupportedFormat(format!(
                "{}: palette images are not supported",
                path.display()
            )))
        }
    };
    let bytes_per_sample = match depth {
        png::BitDepth::Eight => 1,
        png::BitDepth::Sixteen => 2,
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "{}: bit depth {other:?} is not supported",
                path.display()
            )))
        }
    };
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::UnsupportedFormat(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| decode_error(path, e))?;
    let buf = &buf[..info.buffer_size()];
    let (height, width) = (info.height as usize, info.width as usize);
    let channels = if src_channels >= 3 { 3 } else { 1 };

    let mut data = Vec::with_capacity(height * width * channels);
    let pixel_bytes = src_channels * bytes_per_sample;
    for row in buf.chunks_exact(info.line_size) {
        for px in row[..width * pixel_bytes].chunks_exact(pixel_bytes) {
            for c in 0..channels {
                let v = if bytes_per_sample == 1 {
                    px[c] as f32 / 255.0
                } else {
                    u16::from_be_bytes([px[2 * c], px[2 * c + 1]]) as f32 / 65535.0
                };
                data.push(v);
            }
        }
    }
    Image::new(height, width, channels, data)
}

// Truncated or missing data surfaces from the decoder as an I/O error; keep it one.
fn decode_error(path: &Path, e: png::DecodingError) -> Error {
    match e {
        png::DecodingError::IoError(io) => Error::io(path, io),
        other => Error::PngDecode(other),
    }
}

/// Writes `img` as an 8- or 16-bit PNG.
pub fn save_png(img: &Image, path: impl AsRef<Path>, bit_depth: u8) -> Result<()> {
    let path = path.as_ref();
    let depth = match bit_depth {
        8 => png::BitDepth::Eight,
        16 => png::BitDepth::Sixteen,
        other => {
            return Err(Error::InvalidParameter(format!(
                "bit depth must be 8 or 16, got {other}"
            )))
        }
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    encoder.set_color(if img.channels == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    });
    encoder.set_depth(depth);
    let bytes: Vec<u8> = if bit_depth == 8 {
        img.data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    } else {
        img.data
            .iter()
            .flat_map(|&v| ((v * 65535.0).round().clamp(0.0, 65535.0) as u16).to_be_bytes())
            .collect()
    };
    let mut writer = encoder.write_header().map_err(|e| encode_error(path, e))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| encode_error(path, e))?;
    writer.finish().map_err(|e| encode_error(path, e))?;
    Ok(())
}

fn encode_error(path: &Path, e: png::EncodingError) -> Error {
    match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::PngEncode(other),
    }
}

/// Mean squared error over every sample of every channel.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data.len() as f64)
}

/// Peak signal-to-noise ratio in dB with unit peak, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// Mean SSIM over all 8x8 windows at stride 1, computed on BT.601 luma.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    if a.height.min(a.width) < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            height: a.height,
            width: a.width,
            window: SSIM_WINDOW,
        });
    }
    let la = a.to_luma();
    let lb = b.to_luma();
    let (h, w) = (a.height, a.width);

    // Summed-area tables of x, y, x^2, y^2, xy.
    let stride = w + 1;
    let mut tables = vec![[0f64; 5]; (h + 1) * stride];
    for y in 0..h {
        let mut row = [0f64; 5];
        for x in 0..w {
            let p = la.data[y * w + x] as f64;
            let q = lb.data[y * w + x] as f64;
            let vals = [p, q, p * p, q * q, p * q];
            for k in 0..5 {
                row[k] += vals[k];
                tables[(y + 1) * stride + x + 1][k] = tables[y * stride + x + 1][k] + row[k];
            }
        }
    }

    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (y1, x1) = (y0 + SSIM_WINDOW, x0 + SSIM_WINDOW);
            let mut s = [0f64; 5];
            for (k, sk) in s.iter_mut().enumerate() {
                *sk = tables[y1 * stride + x1][k] - tables[y0 * stride + x1][k]
                    - tables[y1 * stride + x0][k]
                    + tables[y0 * stride + x0][k];
            }
            total += ssim_from_moments(
                s[0] / n,
                s[1] / n,
                s[2] / n - (s[0] / n).powi(2),
                s[3] / n - (s[1] / n).powi(2),
                s[4] / n - (s[0] / n) * (s[1] / n),
            );
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// SSIM of a single window from its means, (population) variances and covariance.
pub fn ssim_from_moments(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64) -> f64 {
    ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub path: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Per-image metrics plus their arithmetic means.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub count: usize,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
}

impl MetricReport {
    pub fn push(&mut self, path: impl Into<String>, restored: &Image, reference: &Image) -> Result<()> {
        self.images.push(ImageMetrics {
            path: path.into(),
            psnr_db: psnr(restored, reference)?,
            ssim: ssim(restored, reference)?,
        });
        Ok(())
    }

    pub fn summary(&self) -> MetricSummary {
        let n = self.images.len();
        let mean = |f: fn(&ImageMetrics) -> f64| {
            if n == 0 {
                f64::NAN
            } else {
                self.images.iter().map(f).sum::<f64>() / n as f64
            }
        };
        MetricSummary {
            count: n,
            mean_psnr_db: mean(|m| m.psnr_db),
            mean_ssim: mean(|m| m.ssim),
        }
    }

    /// CSV with header `path,psnr_db,ssim`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(file).map_err(|e| Error::io(path, e))
    }

    pub fn write_csv_to<W: std::io::Write>(&self, w: W) -> std::io::Result<()> {
        let mut writer = csv::Writer::from_writer(w);
        writer.write_record(["path", "psnr_db", "ssim"])?;
        for m in &self.images {
            writer.write_record([m.path.clone(), m.psnr_db.to_string(), m.ssim.to_string()])?;
        }
        writer.flush()
    }
}
