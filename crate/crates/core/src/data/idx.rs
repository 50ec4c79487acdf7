//! IDX binary files (the MNIST distribution format).
//!
//! Images: big-endian `u32` magic `0x00000803`, then count, rows, cols, then
//! `count * rows * cols` unsigned bytes. Labels: magic `0x00000801`, count,
//! then `count` bytes. Pixels are scaled to `[0, 1]` and images flattened
//! row-major.

use std::path::Path;

use crate::error::{Error, Result};

use super::ClassSamples;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn format_err(file: &str, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: format!("{file}: {}", message.into()),
    }
}

fn read_u32(bytes: &[u8], offset: usize, file: &str, field: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            format_err(
                file,
                bytes.len(),
                format!("truncated while reading {field}"),
            )
        })
}

/// Parses an in-memory IDX image/label pair and groups images by label.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<ClassSamples> {
    let magic = read_u32(images, 0, "images", "magic number")?;
    if magic != IMAGES_MAGIC {
        return Err(format_err(
            "images",
            0,
            format!("bad magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        ));
    }
    let count = read_u32(images, 4, "images", "item count")? as usize;
    let rows = read_u32(images, 8, "images", "row count")? as usize;
    let cols = read_u32(images, 12, "images", "column count")? as usize;
    let oversized = || {
        format_err(
            "images",
            4,
            format!("{count} images of {rows}x{cols} is too large"),
        )
    };
    let dim = rows.checked_mul(cols).ok_or_else(oversized)?;
    let need = count.checked_mul(dim).ok_or_else(oversized)?;
    let body = &images[16..];
    if body.len() < need {
        return Err(format_err(
            "images",
            images.len(),
            format!(
                "truncated: {count} images of {rows}x{cols} need {need} bytes after the header"
            ),
        ));
    }

    let magic = read_u32(labels, 0, "labels", "magic number")?;
    if magic != LABELS_MAGIC {
        return Err(format_err(
            "labels",
            0,
            format!("bad magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        ));
    }
    let label_count = read_u32(labels, 4, "labels", "item count")? as usize;
    if label_count != count {
        return Err(format_err(
            "labels",
            4,
            format!("{label_count} labels for {count} images"),
        ));
    }
    let label_bytes = &labels[8..];
    if label_bytes.len() < count {
        return Err(format_err(
            "labels",
            labels.len(),
            format!("truncated: expected {count} labels"),
        ));
    }

    let num_classes = label_bytes[..count]
        .iter()
        .map(|&y| y as usize + 1)
        .max()
        .unwrap_or(0);
    let mut classes: Vec<Vec<Vec<f64>>> = vec![Vec::new(); num_classes];
    for (i, &y) in label_bytes[..count].iter().enumerate() {
        let pixels = &body[i * dim..(i + 1) * dim];
        classes[y as usize].push(pixels.iter().map(|&p| f64::from(p) / 255.0).collect());
    }
    Ok(ClassSamples { dim, classes })
}

/// Reads and parses an IDX image/label file pair.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<ClassSamples> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    parse_idx(&images, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn images_file(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for w in [IMAGES_MAGIC, count, rows, cols] {
            v.extend_from_slice(&w.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    pub(crate) fn labels_file(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn two_image_fixture() {
        let imgs = images_file(2, 2, 2, &[0, 255, 51, 102, 255, 255, 0, 0]);
        let labs = labels_file(&[1, 0]);
        let data = parse_idx(&imgs, &labs).unwrap();
        assert_eq!(data.dim, 4);
        assert_eq!(data.classes.len(), 2);
        assert_eq!(data.classes[0], vec![vec![1.0, 1.0, 0.0, 0.0]]);
        assert_eq!(data.classes[1], vec![vec![0.0, 1.0, 0.2, 0.4]]);
    }

    #[test]
    fn labels_with_image_magic_rejected() {
        let imgs = images_file(1, 1, 1, &[0]);
        let mut labs = labels_file(&[0]);
        labs[..4].copy_from_slice(&IMAGES_MAGIC.to_be_bytes());
        let err = parse_idx(&imgs, &labs).unwrap_err();
        match err {
            Error::Format { offset, message } => {
                assert_eq!(offset, 0);
                assert!(message.contains("labels"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_and_mismatched_files_rejected() {
        let short = images_file(2, 2, 2, &[0; 7]);
        assert!(matches!(
            parse_idx(&short, &labels_file(&[0, 0])),
            Err(Error::Format { offset: 23, .. })
        ));
        let imgs = images_file(2, 1, 1, &[0, 0]);
        assert!(matches!(
            parse_idx(&imgs, &labels_file(&[0])),
            Err(Error::Format { offset: 4, .. })
        ));
        assert!(matches!(
            parse_idx(&[0, 0], &labels_file(&[])),
            Err(Error::Format { offset: 2, .. })
        ));
    }

    #[test]
    fn absurd_header_sizes_are_format_errors() {
        let imgs = images_file(u32::MAX, u32::MAX, u32::MAX, &[]);
        let err = parse_idx(&imgs, &labels_file(&[0])).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 4, .. }), "{err}");
    }
}
