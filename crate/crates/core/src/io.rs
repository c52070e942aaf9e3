//! File interchange: PNG images (8-bit, or 16-bit on request) and the raw tensor
//! dump format used for latent analysis.
//!
//! Tensor file layout (little endian):
//!
//! ```text
//! magic   4 bytes  "LHTN"
//! dtype   u32      0 = f32
//! rank    u32
//! dims    rank × u32
//! data    prod(dims) × f32, row-major
//! ```
//!
//! A latent (h, w, c) is stored with dims `[h, w, c]`.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Rgb};

use crate::error::{bail_validation, Error, Result};
use crate::tensor::{HwcTensor, ImageTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BitDepth {
    #[default]
    Eight,
    Sixteen,
}

fn to_tensor(img: DynamicImage) -> Result<ImageTensor> {
    let rgb = img.into_rgb32f();
    let (w, h) = rgb.dimensions();
    ImageTensor::new(h as usize, w as usize, 3, rgb.into_raw())
}

pub fn decode_png(bytes: &[u8]) -> Result<ImageTensor> {
    to_tensor(image::load_from_memory_with_format(bytes, ImageFormat::Png)?)
}

/// Any format the `image` crate can sniff (PNG, JPEG), converted to RGB in [0,1].
pub fn decode_image(bytes: &[u8]) -> Result<ImageTensor> {
    to_tensor(image::load_from_memory(bytes)?)
}

/// Width and height from the header alone, without decoding pixels.
pub fn image_dimensions(bytes: &[u8]) -> Result<(usize, usize)> {
    let (w, h) = image::ImageReader::new(std::io::Cursor::new(bytes))
        .with_guessed_format()?
        .into_dimensions()?;
    Ok((w as usize, h as usize))
}

pub fn read_image(path: &Path) -> Result<ImageTensor> {
    to_tensor(image::open(path)?)
}

pub fn encode_png(img: &ImageTensor, depth: BitDepth) -> Result<Vec<u8>> {
    if img.channels() != 3 {
        bail_validation!("PNG export expects 3 channels, got {}", img.channels());
    }
    let (w, h) = (img.width() as u32, img.height() as u32);
    let dynimg = match depth {
        BitDepth::Eight => {
            let raw: Vec<u8> = img
                .data()
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            DynamicImage::ImageRgb8(
                ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, raw).expect("buffer size matches"),
            )
        }
        BitDepth::Sixteen => {
            let raw: Vec<u16> = img
                .data()
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
                .collect();
            DynamicImage::ImageRgb16(
                ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, raw).expect("buffer size matches"),
            )
        }
    };
    let mut buf = Cursor::new(Vec::new());
    dynimg.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn write_png(path: &Path, img: &ImageTensor, depth: BitDepth) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, encode_png(img, depth)?)?;
    Ok(())
}

const TENSOR_MAGIC: &[u8; 4] = b"LHTN";

pub fn encode_tensor(t: &HwcTensor) -> Vec<u8> {
    let (h, w, c) = t.shape();
    let mut out = Vec::with_capacity(16 + 12 + t.data().len() * 4);
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&3u32.to_le_bytes());
    for d in [h, w, c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<HwcTensor> {
    let bad = |msg: &str| Error::Validation(format!("tensor file: {msg}"));
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| bad("truncated header"))
    };
    if bytes.len() < 12 || &bytes[..4] != TENSOR_MAGIC {
        return Err(bad("bad magic"));
    }
    if word(4)? != 0 {
        return Err(bad("unsupported dtype (only f32)"));
    }
    let rank = word(8)? as usize;
    if !(1..=3).contains(&rank) {
        return Err(bad("rank must be 1..=3"));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        dims.push(word(12 + 4 * i)? as usize);
    }
    // lower ranks are read as 1×1×n / 1×w×c
    while dims.len() < 3 {
        dims.insert(0, 1);
    }
    let start = 12 + 4 * rank;
    let count: usize = dims.iter().product();
    let payload = bytes.get(start..).ok_or_else(|| bad("truncated data"))?;
    if payload.len() != count * 4 {
        return Err(bad("data length does not match dims"));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    HwcTensor::new(dims[0], dims[1], dims[2], data)
}

pub fn write_tensor(path: &Path, t: &HwcTensor) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<HwcTensor> {
    decode_tensor(&std::fs::read(path)?)
}
