//! Binary PGM/PPM reading and writing, and PGM renderings of masks.

use std::path::Path;

use image::{DynamicImage, ImageReader};
use thiserror::Error;

use crate::bitmat::BitMatrix;
use crate::degrade::ImageBuffer;

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Codec { path: String, source: image::ImageError },
    #[error("{path}: unsupported image layout ({what})")]
    Unsupported { path: String, what: String },
}

/// Read a binary or ASCII PGM (1 channel) or PPM (3 channels) into `[0, 1]`
/// intensities. 16-bit samples are scaled by 65535.
pub fn read_pnm(path: impl AsRef<Path>) -> Result<ImageBuffer, ImageIoError> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let reader = ImageReader::open(path)
        .map_err(|source| ImageIoError::Io { path: name.clone(), source })?
        .with_guessed_format()
        .map_err(|source| ImageIoError::Io { path: name.clone(), source })?;
    let img = reader.decode().map_err(|source| ImageIoError::Codec { path: name.clone(), source })?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let (channels, data): (usize, Vec<f64>) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect()),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect()),
        DynamicImage::ImageLuma16(b) => (1, b.into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect()),
        DynamicImage::ImageRgb16(b) => (3, b.into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect()),
        other => {
            return Err(ImageIoError::Unsupported { path: name, what: format!("{:?}", other.color()) });
        }
    };
    Ok(ImageBuffer { width, height, channels, data })
}

/// 8-bit samples, rounding to nearest after clamping to `[0, 1]`.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Header `P5\n<w> <h>\n255\n` (or `P6`) followed by raw samples.
fn encode(width: usize, height: usize, channels: usize, samples: &[u8]) -> Vec<u8> {
    debug_assert_eq!(samples.len(), width * height * channels);
    let magic = if channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(samples);
    out
}

/// Binary P5 (1 channel) or P6 (3 channels) bytes.
pub fn encode_pnm(img: &ImageBuffer) -> Vec<u8> {
    let samples: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
    encode(img.width, img.height, img.channels, &samples)
}

pub fn write_pnm(path: impl AsRef<Path>, img: &ImageBuffer) -> Result<(), ImageIoError> {
    let path = path.as_ref();
    std::fs::write(path, encode_pnm(img))
        .map_err(|source| ImageIoError::Io { path: path.display().to_string(), source })
}

/// P5 rendering of a binary matrix: set entries white, clear entries black.
pub fn mask_pgm(m: &BitMatrix) -> Vec<u8> {
    grid_pgm(m.as_slice(), m.rows(), m.cols())
}

/// P5 rendering of a flattened `height x width` mask.
pub fn grid_pgm(bits: &[bool], height: usize, width: usize) -> Vec<u8> {
    assert_eq!(bits.len(), height * width);
    let samples: Vec<u8> = bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
    encode(width, height, 1, &samples)
}
