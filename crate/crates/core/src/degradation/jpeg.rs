//! Baseline JPEG quantization round trip.
//!
//! Colour conversion, 4:2:0 chroma subsampling, 8x8 DCT and quantization with
//! the Annex K tables scaled by the libjpeg quality curve are reproduced
//! exactly; the entropy coding stage is skipped because it is lossless.

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::imaging::Image;

const LUMA_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

const CHROMA_TABLE: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// Scales a base table the way libjpeg's `jpeg_set_quality` does.
pub fn scaled_table(base: &[u16; 64], quality: u8) -> [u16; 64] {
    let q = quality.clamp(1, 100) as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0u16; 64];
    for (o, &b) in out.iter_mut().zip(base) {
        *o = ((b as u32 * scale + 50) / 100).clamp(1, 255) as u16;
    }
    out
}

pub fn luma_table(quality: u8) -> [u16; 64] {
    scaled_table(&LUMA_TABLE, quality)
}

pub fn chroma_table(quality: u8) -> [u16; 64] {
    scaled_table(&CHROMA_TABLE, quality)
}

fn cosines() -> &'static [[f64; 8]; 8] {
    static TABLE: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [[0.0; 8]; 8];
        for (u, row) in t.iter_mut().enumerate() {
            let cu = if u == 0 { (0.5f64).sqrt() } else { 1.0 };
            for (x, v) in row.iter_mut().enumerate() {
                *v = 0.5 * cu * (((2 * x + 1) as f64 * u as f64 * PI) / 16.0).cos();
            }
        }
        t
    })
}

fn fdct(block: &[f64; 64]) -> [f64; 64] {
    let c = cosines();
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| c[u][x] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            out[v * 8 + u] = (0..8).map(|y| c[v][y] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

fn idct(coef: &[f64; 64]) -> [f64; 64] {
    let c = cosines();
    let mut tmp = [0.0; 64];
    for v in 0..8 {
        for x in 0..8 {
            tmp[v * 8 + x] = (0..8).map(|u| c[u][x] * coef[v * 8 + u]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|v| c[v][y] * tmp[v * 8 + x]).sum();
        }
    }
    out
}

/// A single component plane on the 0..255 scale.
struct Plane {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Plane {
    fn at_clamped(&self, y: usize, x: usize) -> f64 {
        self.data[y.min(self.height - 1) * self.width + x.min(self.width - 1)]
    }

    /// Quantizes every 8x8 block of the edge-replicated plane and reconstructs
    /// it as an 8-bit decoder would.
    fn quantize(&self, table: &[u16; 64]) -> Plane {
        let bh = self.height.div_ceil(8);
        let bw = self.width.div_ceil(8);
        let mut out = vec![0.0; self.height * self.width];
        let mut block = [0.0; 64];
        for by in 0..bh {
            for bx in 0..bw {
                for y in 0..8 {
                    for x in 0..8 {
                        block[y * 8 + x] = self.at_clamped(by * 8 + y, bx * 8 + x) - 128.0;
                    }
                }
                let mut coef = fdct(&block);
                for (c, &q) in coef.iter_mut().zip(table) {
                    *c = (*c / q as f64).round() * q as f64;
                }
                let rec = idct(&coef);
                for y in 0..8 {
                    for x in 0..8 {
                        let (py, px) = (by * 8 + y, bx * 8 + x);
                        if py < self.height && px < self.width {
                            out[py * self.width + px] = (rec[y * 8 + x] + 128.0).round().clamp(0.0, 255.0);
                        }
                    }
                }
            }
        }
        Plane {
            height: self.height,
            width: self.width,
            data: out,
        }
    }

    /// 2x2 box average (4:2:0), replicating the last row/column for odd sizes.
    fn subsample(&self) -> Plane {
        let (h, w) = (self.height.div_ceil(2), self.width.div_ceil(2));
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let s = self.at_clamped(2 * y, 2 * x)
                    + self.at_clamped(2 * y, 2 * x + 1)
                    + self.at_clamped(2 * y + 1, 2 * x)
                    + self.at_clamped(2 * y + 1, 2 * x + 1);
                data.push(s / 4.0);
            }
        }
        Plane {
            height: h,
            width: w,
            data,
        }
    }
}

/// JPEG-compresses and decodes `img` at `quality` (1..=100).
pub fn jpeg_round_trip(img: &Image, quality: u8) -> Image {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let to8 = |v: f32| (v as f64 * 255.0).round().clamp(0.0, 255.0);
    let luma_q = luma_table(quality);

    if c == 1 {
        let plane = Plane {
            height: h,
            width: w,
            data: img.data().iter().map(|&v| to8(v)).collect(),
        };
        let rec = plane.quantize(&luma_q);
        let data = rec.data.iter().map(|&v| (v / 255.0) as f32).collect();
        return Image::new(h, w, 1, data).expect("same shape");
    }

    let chroma_q = chroma_table(quality);
    let mut y_plane = Vec::with_capacity(h * w);
    let mut cb_plane = Vec::with_capacity(h * w);
    let mut cr_plane = Vec::with_capacity(h * w);
    for px in img.data().chunks_exact(3) {
        let (r, g, b) = (to8(px[0]), to8(px[1]), to8(px[2]));
        y_plane.push(0.299 * r + 0.587 * g + 0.114 * b);
        cb_plane.push(-0.168_735_892 * r - 0.331_264_108 * g + 0.5 * b + 128.0);
        cr_plane.push(0.5 * r - 0.418_687_589 * g - 0.081_312_411 * b + 128.0);
    }
    let plane = |data| Plane {
        height: h,
        width: w,
        data,
    };
    let y_rec = plane(y_plane).quantize(&luma_q);
    let cb_rec = plane(cb_plane).subsample().quantize(&chroma_q);
    let cr_rec = plane(cr_plane).subsample().quantize(&chroma_q);

    let mut data = Vec::with_capacity(h * w * 3);
    for yy in 0..h {
        for xx in 0..w {
            let y = y_rec.data[yy * w + xx];
            let cidx = (yy / 2) * cb_rec.width + xx / 2;
            let cb = cb_rec.data[cidx] - 128.0;
            let cr = cr_rec.data[cidx] - 128.0;
            let r = y + 1.402 * cr;
            let g = y - 0.344_136_286 * cb - 0.714_136_286 * cr;
            let b = y + 1.772 * cb;
            for v in [r, g, b] {
                data.push((v.round().clamp(0.0, 255.0) / 255.0) as f32);
            }
        }
    }
    Image::new(h, w, 3, data).expect("same shape")
}
