//! Big-endian IDX containers, as used by the MNIST distribution.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Decoded `u8` image file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn format_err(offset: usize, reason: impl Into<alloc::string::String>) -> Error {
    Error::Format {
        offset,
        reason: reason.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(offset, "truncated header"))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = read_u32(bytes, 0)?;
    if magic != expected {
        return Err(format_err(
            0,
            format!("magic {magic:#010x}, expected {expected:#010x}"),
        ));
    }
    Ok(())
}

pub fn parse_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let need = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(format_err(
            16 + payload.len(),
            format!("payload truncated: {} of {need} pixel bytes", payload.len()),
        ));
    }
    if payload.len() > need {
        return Err(format_err(16 + need, "trailing bytes after pixel payload"));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: payload.to_vec(),
    })
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABELS_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(format_err(
            8 + payload.len(),
            format!("payload truncated: {} of {count} label bytes", payload.len()),
        ));
    }
    if payload.len() > count {
        return Err(format_err(8 + count, "trailing bytes after label payload"));
    }
    Ok(payload.to_vec())
}

pub fn write_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [
        IMAGES_MAGIC,
        images.count as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn write_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
