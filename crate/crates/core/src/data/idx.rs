//! IDX files (the MNIST container): a big-endian `u32` magic, big-endian
//! `u32` dimension sizes, then unsigned bytes.

use std::path::Path;

use crate::data::{Dataset, Normalization, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            expected: offset + 4,
            found: bytes.len(),
        })
}

/// Parse an IDX payload with the given magic; returns (dims, body).
fn parse<'a>(bytes: &'a [u8], magic: u32, path: &Path) -> Result<(Vec<usize>, &'a [u8])> {
    let found = read_u32(bytes, 0, path)?;
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|i| read_u32(bytes, 4 + 4 * i, path).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndim;
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok((dims, &bytes[header..expected]))
}

/// Load an IDX image/label pair as `[N, 1, rows, cols]` features. With
/// [`Normalization::ScaleToUnit`] pixels are divided by 255; with
/// [`Normalization::None`] they stay raw 0–255 values. Standardization is
/// not applied here (it needs train statistics; see [`crate::data::normalize`]).
pub fn load_idx(images_path: &Path, labels_path: &Path, normalization: Normalization) -> Result<Dataset> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let (idims, pixels) = parse(&images, IDX_IMAGES_MAGIC, images_path)?;
    let (ldims, label_bytes) = parse(&labels, IDX_LABELS_MAGIC, labels_path)?;
    if idims[0] != ldims[0] {
        return Err(Error::CountMismatch {
            images: idims[0],
            labels: ldims[0],
        });
    }
    let scale = if normalization == Normalization::ScaleToUnit {
        1.0 / 255.0
    } else {
        1.0
    };
    let data = pixels.iter().map(|&p| p as f64 * scale).collect();
    let features = Tensor::new(vec![idims[0], 1, idims[1], idims[2]], data)?;
    let labels: Vec<usize> = label_bytes.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let mut ds = Dataset::new(features, labels, classes, Split::Train)?;
    if normalization == Normalization::ScaleToUnit {
        ds.normalization = normalization;
    }
    Ok(ds)
}
