//! 8-bit planar YUV 4:2:0 images, Y4M and PPM I/O.
//!
//! RGB conversion uses fixed integer BT.601 (full range) coefficients with
//! explicit rounding, so ingesting a PPM gives the same planes everywhere.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Image(format!(
                "{} samples for a {width}x{height} plane",
                data.len()
            )));
        }
        Ok(Plane {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Plane {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Extends to `width x height` by replicating the last column and row.
    pub fn pad_edge(&self, width: usize, height: usize) -> Plane {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            let sy = y.min(self.height - 1);
            for x in 0..width {
                data.push(self.at(x.min(self.width - 1), sy));
            }
        }
        Plane {
            width,
            height,
            data,
        }
    }

    pub fn crop(&self, width: usize, height: usize) -> Plane {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            data.extend_from_slice(&self.data[y * self.width..y * self.width + width]);
        }
        Plane {
            width,
            height,
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct YuvImage {
    pub y: Plane,
    pub u: Plane,
    pub v: Plane,
}

pub fn chroma_dims(width: usize, height: usize) -> (usize, usize) {
    (width.div_ceil(2), height.div_ceil(2))
}

impl YuvImage {
    pub fn new(y: Plane, u: Plane, v: Plane) -> Result<Self> {
        let (cw, ch) = chroma_dims(y.width, y.height);
        if (u.width, u.height) != (cw, ch) || (v.width, v.height) != (cw, ch) {
            return Err(Error::Image(format!(
                "chroma planes {}x{} / {}x{} do not match 4:2:0 of {}x{}",
                u.width, u.height, v.width, v.height, y.width, y.height
            )));
        }
        if y.width == 0 || y.height == 0 {
            return Err(Error::Image("empty image".into()));
        }
        Ok(YuvImage { y, u, v })
    }

    pub fn width(&self) -> usize {
        self.y.width
    }

    pub fn height(&self) -> usize {
        self.y.height
    }

    pub fn planes(&self) -> [&Plane; 3] {
        [&self.y, &self.u, &self.v]
    }

    pub fn pad_to_multiple(&self, m: usize) -> YuvImage {
        let w = self.width().next_multiple_of(m);
        let h = self.height().next_multiple_of(m);
        let (cw, ch) = chroma_dims(w, h);
        YuvImage {
            y: self.y.pad_edge(w, h),
            u: self.u.pad_edge(cw, ch),
            v: self.v.pad_edge(cw, ch),
        }
    }

    pub fn crop(&self, width: usize, height: usize) -> YuvImage {
        let (cw, ch) = chroma_dims(width, height);
        YuvImage {
            y: self.y.crop(width, height),
            u: self.u.crop(cw, ch),
            v: self.v.crop(cw, ch),
        }
    }

    /// Y, then U, then V samples.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.y.data.len() + 2 * self.u.data.len());
        for p in self.planes() {
            out.extend_from_slice(&p.data);
        }
        out
    }

    pub fn sha256_hex(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn from_rgb(width: usize, height: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != width * height * 3 {
            return Err(Error::Image(format!(
                "{} bytes of RGB for {width}x{height}",
                rgb.len()
            )));
        }
        let mut y = Vec::with_capacity(width * height);
        let mut cb = Vec::with_capacity(width * height);
        let mut cr = Vec::with_capacity(width * height);
        for px in rgb.chunks_exact(3) {
            let (r, g, b) = (px[0] as i32, px[1] as i32, px[2] as i32);
            y.push(((77 * r + 150 * g + 29 * b + 128) >> 8) as u8);
            cb.push((((-43 * r - 85 * g + 128 * b + 128) >> 8) + 128).clamp(0, 255) as u8);
            cr.push((((128 * r - 107 * g - 21 * b + 128) >> 8) + 128).clamp(0, 255) as u8);
        }
        let (cw, ch) = chroma_dims(width, height);
        let subsample = |full: &[u8]| -> Vec<u8> {
            let mut out = Vec::with_capacity(cw * ch);
            for cy in 0..ch {
                for cx in 0..cw {
                    let mut sum = 0u32;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let sy = (2 * cy + dy).min(height - 1);
                        let sx = (2 * cx + dx).min(width - 1);
                        sum += full[sy * width + sx] as u32;
                    }
                    out.push(((sum + 2) >> 2) as u8);
                }
            }
            out
        };
        YuvImage::new(
            Plane::new(width, height, y)?,
            Plane::new(cw, ch, subsample(&cb))?,
            Plane::new(cw, ch, subsample(&cr))?,
        )
    }

    /// Nearest-neighbour chroma upsampling followed by the inverse transform.
    pub fn to_rgb(&self) -> Vec<u8> {
        let (w, h) = (self.width(), self.height());
        let mut out = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                let l = self.y.at(x, y) as i32;
                let cb = self.u.at(x / 2, y / 2) as i32 - 128;
                let cr = self.v.at(x / 2, y / 2) as i32 - 128;
                let r = l + ((359 * cr + 128) >> 8);
                let g = l - ((88 * cb + 183 * cr + 128) >> 8);
                let b = l + ((454 * cb + 128) >> 8);
                out.extend([r, g, b].map(|c| c.clamp(0, 255) as u8));
            }
        }
        out
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads `.ppm` (binary P6, maxval 255) or `.y4m` (single 4:2:0 frame).
pub fn load_image(path: &Path) -> Result<YuvImage> {
    let bytes = read_file(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => decode_ppm(&bytes),
        Some("y4m") => decode_y4m(&bytes),
        _ => Err(Error::Image(format!(
            "{}: unsupported extension (expected .ppm or .y4m)",
            path.display()
        ))),
    }
}

pub fn save_image(path: &Path, image: &YuvImage) -> Result<()> {
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => encode_ppm(image),
        Some("y4m") => encode_y4m(image),
        _ => {
            return Err(Error::Image(format!(
                "{}: unsupported extension (expected .ppm or .y4m)",
                path.display()
            )))
        }
    };
    write_file(path, &bytes)
}

fn ppm_tokens<R: BufRead>(reader: &mut R, count: usize) -> Result<Vec<String>> {
    let mut tokens = Vec::new();
    let mut byte = [0u8; 1];
    let mut current = String::new();
    while tokens.len() < count {
        if reader.read(&mut byte).map_err(|e| Error::Image(e.to_string()))? == 0 {
            return Err(Error::Image("truncated PPM header".into()));
        }
        match byte[0] {
            b'#' if current.is_empty() => {
                let mut skip = Vec::new();
                reader
                    .read_until(b'\n', &mut skip)
                    .map_err(|e| Error::Image(e.to_string()))?;
            }
            c if c.is_ascii_whitespace() => {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
            }
            c => current.push(c as char),
        }
    }
    Ok(tokens)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<YuvImage> {
    let mut reader = BufReader::new(bytes);
    let tokens = ppm_tokens(&mut reader, 4)?;
    if tokens[0] != "P6" {
        return Err(Error::Image(format!("PPM magic {} (only P6 supported)", tokens[0])));
    }
    let parse = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::Image(format!("bad PPM header field '{s}'")))
    };
    let (w, h, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if maxval != 255 {
        return Err(Error::Image(format!("PPM maxval {maxval} (only 255 supported)")));
    }
    let mut rgb = Vec::new();
    reader
        .read_to_end(&mut rgb)
        .map_err(|e| Error::Image(e.to_string()))?;
    if rgb.len() < w * h * 3 {
        return Err(Error::Image("truncated PPM raster".into()));
    }
    rgb.truncate(w * h * 3);
    YuvImage::from_rgb(w, h, &rgb)
}

pub fn encode_ppm(image: &YuvImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.to_rgb());
    out
}

pub fn decode_y4m(bytes: &[u8]) -> Result<YuvImage> {
    let header_end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Image("Y4M header without newline".into()))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::Image("Y4M header is not ASCII".into()))?;
    let mut fields = header.split_ascii_whitespace();
    if fields.next() != Some("YUV4MPEG2") {
        return Err(Error::Image("missing YUV4MPEG2 signature".into()));
    }
    let (mut w, mut h) = (None, None);
    for f in fields {
        let (tag, value) = f.split_at(1);
        match tag {
            "W" => w = value.parse().ok(),
            "H" => h = value.parse().ok(),
            "C" if !value.starts_with("420") => {
                return Err(Error::Image(format!("Y4M colourspace C{value} (only 4:2:0 supported)")))
            }
            _ => {}
        }
    }
    let (w, h): (usize, usize) = match (w, h) {
        (Some(w), Some(h)) if w > 0 && h > 0 => (w, h),
        _ => return Err(Error::Image("Y4M header lacks W/H".into())),
    };
    let rest = &bytes[header_end + 1..];
    let frame_end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Image("missing FRAME marker".into()))?;
    if !rest.starts_with(b"FRAME") {
        return Err(Error::Image("missing FRAME marker".into()));
    }
    let data = &rest[frame_end + 1..];
    let (cw, ch) = chroma_dims(w, h);
    let need = w * h + 2 * cw * ch;
    if data.len() < need {
        return Err(Error::Image("truncated Y4M frame".into()));
    }
    let (y, rest) = data.split_at(w * h);
    let (u, rest) = rest.split_at(cw * ch);
    let v = &rest[..cw * ch];
    YuvImage::new(
        Plane::new(w, h, y.to_vec())?,
        Plane::new(cw, ch, u.to_vec())?,
        Plane::new(cw, ch, v.to_vec())?,
    )
}

pub fn encode_y4m(image: &YuvImage) -> Vec<u8> {
    let mut out = Vec::new();
    write!(
        out,
        "YUV4MPEG2 W{} H{} F25:1 Ip A1:1 C420jpeg\nFRAME\n",
        image.width(),
        image.height()
    )
    .expect("writing to a Vec");
    out.extend(image.to_bytes());
    out
}

/// Deterministic test picture: smooth gradients, hard-edged shapes and
/// mild texture, so that both flat and detailed regions are present.
// The literal 2π approximations are part of the pinned pixel values.
#[allow(clippy::approx_constant)]
pub fn synthetic_image(width: usize, height: usize, seed: u64) -> Result<YuvImage> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let fx: f64 = rng.random_range(1.0..4.0);
    let fy: f64 = rng.random_range(1.0..4.0);
    let phase: f64 = rng.random_range(0.0..6.28);
    let shapes: Vec<(f64, f64, f64, [f64; 3], bool)> = (0..6)
        .map(|_| {
            (
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.05..0.3),
                [
                    rng.random_range(0.0..255.0),
                    rng.random_range(0.0..255.0),
                    rng.random_range(0.0..255.0),
                ],
                rng.random_bool(0.5),
            )
        })
        .collect();
    let mut rgb = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for x in 0..width {
            let (u, v) = (x as f64 / width as f64, y as f64 / height as f64);
            let mut px = [
                128.0 + 90.0 * (6.283 * fx * u + phase).sin(),
                128.0 + 90.0 * (6.283 * fy * v).cos(),
                128.0 + 60.0 * (6.283 * (u + v) + phase).sin(),
            ];
            for &(cx, cy, r, color, disc) in &shapes {
                let inside = if disc {
                    (u - cx).powi(2) + (v - cy).powi(2) < r * r
                } else {
                    (u - cx).abs() < r && (v - cy).abs() < r * 0.6
                };
                if inside {
                    px = color;
                }
            }
            let stripes = 12.0 * ((x / 3 + y / 5) % 2) as f64;
            for c in px {
                let noise: f64 = rng.random_range(-6.0..6.0);
                rgb.push((c + stripes + noise).clamp(0.0, 255.0) as u8);
            }
        }
    }
    YuvImage::from_rgb(width, height, &rgb)
}
