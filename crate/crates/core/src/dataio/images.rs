use std::fs;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageReader, Luma};
use ndarray::Array2;

use super::{ByteOrder, Container, DatasetSpec, Image, ImageRecord, Mask, RawFormat};
use crate::{Error, Result};

/// Loads one radiograph and scales it to `[0, 1]`.
///
/// Raw containers must hold exactly `native_dim²` words; samples above the
/// declared full scale are clamped. PNGs are scaled by their own bit depth
/// (8 or 16) and must be `native_dim` square.
pub fn load_image(path: impl AsRef<Path>, spec: &DatasetSpec) -> Result<ImageRecord> {
    let path = path.as_ref();
    let image_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let dim = spec.native_dim;
    let mut pixels = match spec.raw_format.container {
        Container::Raw16 => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            decode_raw16(&bytes, dim, &spec.raw_format).map_err(|reason| Error::MalformedFile {
                path: path.to_path_buf(),
                reason,
            })?
        }
        Container::Png => {
            let img = read_png_gray(path)?;
            if img.dim() != (dim, dim) {
                return Err(Error::SpecMismatch {
                    what: format!("dimensions of {}", path.display()),
                    declared: format!("{dim}x{dim}"),
                    actual: format!("{}x{}", img.ncols(), img.nrows()),
                });
            }
            img
        }
    };
    if spec.raw_format.intensity_inverted {
        pixels.mapv_inplace(|v| 1.0 - v);
    }
    Ok(ImageRecord {
        image_id,
        pixels,
        dim,
        annotation: None,
        lung_mask: None,
    })
}

fn decode_raw16(bytes: &[u8], dim: usize, fmt: &RawFormat) -> std::result::Result<Image, String> {
    let expected = dim * dim * 2;
    if bytes.len() != expected {
        return Err(format!(
            "expected {expected} bytes ({dim}x{dim} 16-bit words), found {}",
            bytes.len()
        ));
    }
    let full_scale = ((1u32 << fmt.bit_depth) - 1) as f32;
    let values = bytes
        .chunks_exact(2)
        .map(|w| {
            let word = match fmt.byte_order {
                ByteOrder::Big => u16::from_be_bytes([w[0], w[1]]),
                ByteOrder::Little => u16::from_le_bytes([w[0], w[1]]),
            };
            (word as f32 / full_scale).min(1.0)
        })
        .collect();
    Ok(Array2::from_shape_vec((dim, dim), values).expect("length checked above"))
}

/// Writes a `[0, 1]` image as a headerless raw file, inverting if the format
/// says stored intensities are inverted.
pub fn write_raw16(path: impl AsRef<Path>, img: &Image, fmt: &RawFormat) -> Result<()> {
    let path = path.as_ref();
    let full_scale = ((1u32 << fmt.bit_depth) - 1) as f32;
    let mut bytes = Vec::with_capacity(img.len() * 2);
    for &v in img.iter() {
        let v = if fmt.intensity_inverted { 1.0 - v } else { v };
        let word = (v.clamp(0.0, 1.0) * full_scale).round() as u16;
        let pair = match fmt.byte_order {
            ByteOrder::Big => word.to_be_bytes(),
            ByteOrder::Little => word.to_le_bytes(),
        };
        bytes.extend_from_slice(&pair);
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn open_png(path: &Path) -> Result<DynamicImage> {
    let codec = |reason: String| Error::Codec {
        path: path.to_path_buf(),
        reason,
    };
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| codec(e.to_string()))
}

/// Reads any grayscale (or color, converted to luma) image into `[0, 1]`.
pub fn read_png_gray(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let img = open_png(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values: Vec<f32> = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        DynamicImage::ImageLuma16(buf) => {
            buf.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect()
        }
        other => other
            .to_luma16()
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / 65535.0)
            .collect(),
    };
    Ok(Array2::from_shape_vec((h, w), values).expect("buffer matches dimensions"))
}

/// Reads a 16-bit PNG written by [`write_png16`]; equivalent to
/// [`read_png_gray`] but named for symmetry.
pub fn read_png16(path: impl AsRef<Path>) -> Result<Image> {
    read_png_gray(path)
}

/// Stores a `[0, 1]` array as a 16-bit grayscale PNG (value × 65535).
pub fn write_png16(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = img.dim();
    let raw: Vec<u16> = img
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer matches dimensions");
    save_png(path, DynamicImage::from(buf))
}

pub fn write_png_mask(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = mask.dim();
    let raw: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer matches dimensions");
    save_png(path, DynamicImage::from(buf))
}

/// Encodes in memory, then writes atomically, creating parent directories.
fn save_png(path: &Path, img: DynamicImage) -> Result<()> {
    let mut bytes = std::io::Cursor::new(Vec::new());
    img.write_to(&mut bytes, image::ImageFormat::Png).map_err(|e| Error::Codec {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    crate::provenance::write_atomic(path, &bytes.into_inner())
}

/// Loads a lung-field mask (any nonzero pixel is lung) and brings it to
/// `dim` by nearest-neighbour resampling. Gold-standard JSRT masks are
/// commonly distributed at half the radiograph resolution.
pub fn load_lung_mask(path: impl AsRef<Path>, dim: usize) -> Result<Mask> {
    let img = read_png_gray(path.as_ref())?;
    let (h, w) = img.dim();
    if h != w {
        return Err(Error::MalformedFile {
            path: path.as_ref().to_path_buf(),
            reason: format!("lung mask is {w}x{h}, expected square"),
        });
    }
    let mask = img.mapv(|v| v > 0.0);
    Ok(crate::preprocess::resample_mask(&mask, dim))
}
