//! Image containers and the small amount of image plumbing shared across
//! modules: separable Gaussian smoothing, area resampling, and PGM I/O for
//! frame persistence.

use std::io::{BufRead, BufReader, Read as _, Write as _};
use std::path::Path;

use crate::error::{Error, Result};

/// Quantized sensor image. Pixels lie in [0, 2^bits - 1].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    bits: u8,
    data: Vec<u16>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, bits: u8, data: Vec<u16>) -> Result<Self> {
        if bits == 0 || bits > 16 {
            return Err(Error::InvalidConfig(format!("quantization bits {bits} outside 1..=16")));
        }
        if data.len() != width * height {
            return Err(Error::format(
                "image buffer",
                format!("{} pixels for {width}x{height}", data.len()),
            ));
        }
        let max = Self::max_for_bits(bits);
        if data.iter().any(|&v| v > max) {
            return Err(Error::format("image buffer", format!("pixel exceeds {max}")));
        }
        Ok(Self { width, height, bits, data })
    }

    pub fn filled(width: usize, height: usize, bits: u8, value: u16) -> Result<Self> {
        Self::new(width, height, bits, vec![value; width * height])
    }

    fn max_for_bits(bits: u8) -> u16 {
        (((1u32 << bits) - 1) & 0xffff) as u16
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn max_value(&self) -> u16 {
        Self::max_for_bits(self.bits)
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.data[y * self.width + x]
    }

    /// Pixels scaled to [0, 1].
    pub fn normalized(&self) -> FloatImage {
        let inv = 1.0 / f32::from(self.max_value());
        let data = self.data.iter().map(|&v| f32::from(v) * inv).collect();
        FloatImage { width: self.width, height: self.height, data }
    }

    /// Mean intensity on the [0, 1] scale.
    pub fn mean_intensity(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.data.iter().map(|&v| f64::from(v)).sum();
        sum / (self.data.len() as f64 * f64::from(self.max_value()))
    }

    /// Area-average resample to `res` x `res`, normalized to [0, 1].
    pub fn resample_normalized(&self, res: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; res * res];
        let inv_max = 1.0 / f64::from(self.max_value());
        for oy in 0..res {
            let y0 = oy * self.height / res;
            let y1 = ((oy + 1) * self.height).div_ceil(res).min(self.height).max(y0 + 1);
            for ox in 0..res {
                let x0 = ox * self.width / res;
                let x1 = ((ox + 1) * self.width).div_ceil(res).min(self.width).max(x0 + 1);
                let mut sum = 0.0f64;
                for y in y0..y1 {
                    let row = &self.data[y * self.width + x0..y * self.width + x1];
                    sum += row.iter().map(|&v| f64::from(v)).sum::<f64>();
                }
                out[oy * res + ox] = (sum * inv_max / ((y1 - y0) as f64 * (x1 - x0) as f64)) as f32;
            }
        }
        out
    }

    /// Binary PGM (P5). 16-bit samples are written big-endian per the format.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(self.data.len() * 2 + 32);
        out.extend_from_slice(
            format!("P5\n{} {}\n{}\n", self.width, self.height, self.max_value()).as_bytes(),
        );
        if self.max_value() <= 255 {
            out.extend(self.data.iter().map(|&v| v as u8));
        } else {
            for &v in &self.data {
                out.extend_from_slice(&v.to_be_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(std::fs::File::open(path)?);
        let bad = |d: &str| Error::format("pgm", format!("{}: {d}", path.display()));
        let mut magic = [0u8; 2];
        reader.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != b"P5" {
            return Err(bad("not a binary PGM"));
        }
        let mut fields = Vec::with_capacity(3);
        while fields.len() < 3 {
            let mut tok = Vec::new();
            loop {
                let buf = reader.fill_buf()?;
                if buf.is_empty() {
                    return Err(bad("truncated header"));
                }
                let b = buf[0];
                reader.consume(1);
                if b == b'#' {
                    let mut line = String::new();
                    reader.read_line(&mut line)?;
                } else if b.is_ascii_whitespace() {
                    if !tok.is_empty() {
                        break;
                    }
                } else {
                    tok.push(b);
                }
            }
            let s = String::from_utf8(tok).map_err(|_| bad("non-ascii header"))?;
            fields.push(s.parse::<u32>().map_err(|_| bad("non-numeric header field"))?);
        }
        let (w, h, maxval) = (fields[0] as usize, fields[1] as usize, fields[2]);
        if maxval == 0 || maxval > 65535 {
            return Err(bad("maxval out of range"));
        }
        let bits = (32 - (maxval as u32).leading_zeros()) as u8;
        if u32::from(GrayImage::max_for_bits(bits)) != maxval {
            return Err(bad("maxval is not 2^bits - 1"));
        }
        let mut data = vec![0u16; w * h];
        if maxval <= 255 {
            let mut raw = vec![0u8; w * h];
            reader.read_exact(&mut raw).map_err(|_| bad("truncated pixels"))?;
            for (d, r) in data.iter_mut().zip(raw) {
                *d = u16::from(r);
            }
        } else {
            let mut raw = vec![0u8; w * h * 2];
            reader.read_exact(&mut raw).map_err(|_| bad("truncated pixels"))?;
            for (d, r) in data.iter_mut().zip(raw.chunks_exact(2)) {
                *d = u16::from_be_bytes([r[0], r[1]]);
            }
        }
        Self::new(w, h, bits, data)
    }
}

/// Intermediate floating-point image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl FloatImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Bilinear sample with border clamping. Coordinates are pixel centers.
    pub fn sample_clamped(&self, x: f32, y: f32) -> f32 {
        let xc = x.clamp(0.0, (self.width - 1) as f32);
        let yc = y.clamp(0.0, (self.height - 1) as f32);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = xc - x0 as f32;
        let fy = yc - y0 as f32;
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bot = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Separable Gaussian smoothing, border-clamped. `sigma <= 0` is identity.
    pub fn gaussian_blur(&self, sigma: f32) -> FloatImage {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as i64;
        let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
        let inv2s2 = 1.0 / (2.0 * f64::from(sigma) * f64::from(sigma));
        for k in -radius..=radius {
            kernel.push((-(k * k) as f64 * inv2s2).exp());
        }
        let norm: f64 = kernel.iter().sum();
        let kernel: Vec<f32> = kernel.iter().map(|v| (v / norm) as f32).collect();

        let w = self.width as i64;
        let h = self.height as i64;
        let mut tmp = FloatImage::zeros(self.width, self.height);
        for y in 0..self.height {
            let row = &self.data[y * self.width..(y + 1) * self.width];
            let out = &mut tmp.data[y * self.width..(y + 1) * self.width];
            for x in 0..w {
                let mut acc = 0.0f32;
                for (i, &kv) in kernel.iter().enumerate() {
                    let sx = (x + i as i64 - radius).clamp(0, w - 1) as usize;
                    acc += kv * row[sx];
                }
                out[x as usize] = acc;
            }
        }
        let mut out = FloatImage::zeros(self.width, self.height);
        for y in 0..h {
            for x in 0..self.width {
                let mut acc = 0.0f32;
                for (i, &kv) in kernel.iter().enumerate() {
                    let sy = (y + i as i64 - radius).clamp(0, h - 1) as usize;
                    acc += kv * tmp.data[sy * self.width + x];
                }
                out.data[y as usize * self.width + x] = acc;
            }
        }
        out
    }
}
