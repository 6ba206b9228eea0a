//! Grayscale images stored as binary PGM (`P5`, maxval 255).

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `[height, width, channels]` pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 || data.len() != height * width * channels {
            return Err(Error::Data(format!(
                "image {height}x{width}x{channels} with {} values",
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

fn pgm_err(what: impl std::fmt::Display) -> Error {
    Error::Data(format!("PGM: {what}"))
}

/// Parses the bytes of a binary PGM file.
pub fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(pgm_err("bad magic, expected P5"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        // whitespace and comments before each header field
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| pgm_err("malformed header"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(pgm_err(format!("maxval {maxval} unsupported, expected 255")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(pgm_err("missing whitespace after header"));
    }
    let payload = &bytes[pos + 1..];
    if payload.len() != width * height {
        return Err(pgm_err(format!(
            "{width}x{height} image needs {} bytes, found {}",
            width * height,
            payload.len()
        )));
    }
    Image::new(height, width, 1, payload.iter().map(|&b| b as f64 / 255.0).collect())
}

/// Pixels are rounded to the nearest of 256 levels.
pub fn encode_pgm(img: &Image) -> Result<Vec<u8>> {
    if img.channels != 1 {
        return Err(pgm_err("only single-channel images can be written"));
    }
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn load_image_pgm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn write_image_pgm(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, encode_pgm(img)?).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    Center,
    Random,
}

/// Crops `size = (h, w)`. Center offsets are `floor((H - h) / 2)`; random
/// offsets are uniform over all valid positions.
pub fn crop(img: &Image, mode: CropMode, size: (usize, usize), rng: &mut impl Rng) -> Result<Image> {
    let (h, w) = size;
    if h == 0 || w == 0 || h > img.height || w > img.width {
        return Err(Error::Data(format!(
            "crop {h}x{w} does not fit in a {}x{} image",
            img.height, img.width
        )));
    }
    let (oy, ox) = match mode {
        CropMode::Center => ((img.height - h) / 2, (img.width - w) / 2),
        CropMode::Random => (rng.gen_range(0..=img.height - h), rng.gen_range(0..=img.width - w)),
    };
    let c = img.channels;
    let mut data = Vec::with_capacity(h * w * c);
    for y in oy..oy + h {
        let start = ((y * img.width) + ox) * c;
        data.extend_from_slice(&img.data[start..start + w * c]);
    }
    Image::new(h, w, c, data)
}
