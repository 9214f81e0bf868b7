//! IDX binary image/label loader (the MNIST file format).
//!
//! Big-endian headers: images carry magic 0x00000803 and dimensions
//! [count, rows, cols] with one unsigned byte per pixel; labels carry
//! magic 0x00000801 and [count] with one byte per label. Loading is
//! atomic — any structural problem rejects the whole file.

use std::fs;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder};

use crate::error::{Error, Result};
use crate::problems::Dataset;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Load an IDX image/label pair as a binary-classification dataset.
///
/// Pixels are scaled to [0, 1] and flattened; a constant bias feature 1
/// is appended, so p = rows·cols + 1. The label is 1 when the digit is
/// in `positive_digits`, else 0. No optimum is attached.
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    positive_digits: &[u8],
) -> Result<Dataset> {
    let images = read_all(images_path)?;
    let labels = read_all(labels_path)?;

    let (image_count, rows, cols, pixels) = parse_images(images_path, &images)?;
    let (label_count, digits) = parse_labels(labels_path, &labels)?;

    if image_count != label_count {
        return Err(Error::CountMismatch {
            images: image_count,
            labels: label_count,
        });
    }

    let n = image_count as usize;
    let raw_p = (rows * cols) as usize;
    let p = raw_p + 1;
    let mut xs = Vec::with_capacity(n * p);
    for i in 0..n {
        let img = &pixels[i * raw_p..(i + 1) * raw_p];
        xs.extend(img.iter().map(|&b| f64::from(b) / 255.0));
        xs.push(1.0);
    }
    let ys = digits
        .iter()
        .map(|d| f64::from(positive_digits.contains(d)))
        .collect();

    Dataset::from_rows(xs, ys, p)
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// The magic is checked before anything else so that a wrong-type file
/// (labels where images belong) reports what it actually is rather than
/// a length complaint.
fn check_magic(path: &Path, bytes: &[u8], expected: u32) -> Result<()> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            needed: 4,
            found: bytes.len() as u64,
        });
    }
    let magic = BigEndian::read_u32(&bytes[0..4]);
    if magic != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected,
            found: magic,
        });
    }
    Ok(())
}

fn parse_images<'a>(path: &Path, bytes: &'a [u8]) -> Result<(u64, u32, u32, &'a [u8])> {
    check_magic(path, bytes, IMAGE_MAGIC)?;
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            needed: 16,
            found: bytes.len() as u64,
        });
    }
    let count = BigEndian::read_u32(&bytes[4..8]);
    let rows = BigEndian::read_u32(&bytes[8..12]);
    let cols = BigEndian::read_u32(&bytes[12..16]);
    let needed = 16 + u64::from(count) * u64::from(rows) * u64::from(cols);
    if (bytes.len() as u64) < needed {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            needed,
            found: bytes.len() as u64,
        });
    }
    Ok((u64::from(count), rows, cols, &bytes[16..needed as usize]))
}

fn parse_labels<'a>(path: &Path, bytes: &'a [u8]) -> Result<(u64, &'a [u8])> {
    check_magic(path, bytes, LABEL_MAGIC)?;
    if bytes.len() < 8 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            needed: 8,
            found: bytes.len() as u64,
        });
    }
    let count = BigEndian::read_u32(&bytes[4..8]);
    let needed = 8 + u64::from(count);
    if (bytes.len() as u64) < needed {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            needed,
            found: bytes.len() as u64,
        });
    }
    Ok((u64::from(count), &bytes[8..needed as usize]))
}
