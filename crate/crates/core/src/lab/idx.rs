//! Big-endian IDX image and label files.

use std::path::Path;

use crate::error::{LabError, Result};
use crate::lab::data::Dataset;
use crate::numerics::Matrix;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const PIXEL_MEAN: f64 = 0.1307;
pub const PIXEL_STD: f64 = 0.3081;

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| LabError::Idx {
            offset,
            reason: format!("truncated header, file has {} bytes", bytes.len()),
        })
}

fn check_magic(bytes: &[u8], want: u32) -> Result<()> {
    let got = be_u32(bytes, 0)?;
    if got != want {
        return Err(LabError::Idx {
            offset: 0,
            reason: format!("bad magic {got:#010x}, expected {want:#010x}"),
        });
    }
    Ok(())
}

fn body(bytes: &[u8], offset: usize, len: usize) -> Result<&[u8]> {
    bytes.get(offset..offset + len).ok_or_else(|| LabError::Idx {
        offset: bytes.len(),
        reason: format!("truncated data, expected {len} bytes from offset {offset}"),
    })
}

/// `(count, rows, cols, pixels)` with pixels in row-major order per image.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let pixels = body(bytes, 16, n * rows * cols)?;
    Ok((n, rows, cols, pixels.to_vec()))
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABEL_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    Ok(body(bytes, 8, n)?.to_vec())
}

/// `(p/255 − 0.1307) / 0.3081`
pub fn normalize_pixel(p: u8) -> f64 {
    (p as f64 / 255.0 - PIXEL_MEAN) / PIXEL_STD
}

pub fn dataset_from_bytes(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_images(images)?;
    let lab = parse_labels(labels)?;
    if lab.len() != n {
        return Err(LabError::Idx {
            offset: 4,
            reason: format!("{n} images but {} labels", lab.len()),
        });
    }
    let x = Matrix::from_vec(n, rows * cols, pixels.into_iter().map(normalize_pixel).collect())?;
    let labels: Vec<usize> = lab.into_iter().map(usize::from).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok(Dataset { x, labels, classes })
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path).map_err(|e| LabError::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| LabError::io(labels_path, e))?;
    dataset_from_bytes(&images, &labels)
}
