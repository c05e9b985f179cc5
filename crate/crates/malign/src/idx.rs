//! IDX files (the MNIST layout): big-endian `u32` magic and extents
//! followed by unsigned bytes.

use std::fs;
use std::path::Path;

use malign_core::data::{Dataset, Provenance, Split};
use malign_core::Tensor;

use crate::error::{Error, IoContext, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parses an IDX payload with the given magic, returning its extents and
/// the data bytes.
fn parse(path: &Path, bytes: &[u8], magic: u32) -> Result<(Vec<usize>, Vec<u8>)> {
    let found = be_u32(bytes, 0).ok_or_else(|| Error::Header {
        path: path.into(),
        reason: "file shorter than the magic number".into(),
    })?;
    if found != magic {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: format!("{magic:#010x}"),
            found: format!("{found:#010x}"),
        });
    }
    let rank = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let d = be_u32(bytes, 4 + 4 * i).ok_or_else(|| Error::Header {
            path: path.into(),
            reason: format!("missing extent {i} of {rank}"),
        })?;
        dims.push(d as usize);
    }
    let start = 4 + 4 * rank;
    let expected: usize = dims.iter().product();
    let body = &bytes[start..];
    if body.len() < expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            found: body.len(),
        });
    }
    if body.len() > expected {
        return Err(Error::LengthMismatch {
            path: path.into(),
            expected,
            found: body.len(),
        });
    }
    Ok((dims, body.to_vec()))
}

/// Loads an image/label file pair. Pixels are mapped to [0, 1] by `/255`.
/// `num_classes` defaults to one more than the largest label.
pub fn load_idx(images: &Path, labels: &Path, num_classes: Option<usize>, split: Split) -> Result<Dataset> {
    let img_bytes = fs::read(images).at(images)?;
    let lbl_bytes = fs::read(labels).at(labels)?;
    let (dims, pixels) = parse(images, &img_bytes, IMAGES_MAGIC)?;
    let (ldims, raw_labels) = parse(labels, &lbl_bytes, LABELS_MAGIC)?;
    if dims[0] != ldims[0] {
        return Err(Error::CountMismatch {
            path: labels.into(),
            images: dims[0],
            labels: ldims[0],
        });
    }
    let labels_vec: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let classes = num_classes.unwrap_or_else(|| labels_vec.iter().max().map_or(2, |m| (m + 1).max(2)));
    let inputs = Tensor::new(
        vec![dims[0], 1, dims[1], dims[2]],
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    )?;
    Ok(Dataset::new(
        inputs,
        labels_vec,
        classes,
        split,
        Provenance::IdxFile {
            images: images.display().to_string(),
            labels: labels.display().to_string(),
        },
    )?)
}

/// Encodes images (`[n, rows, cols]` bytes) in the IDX layout.
pub fn encode_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
