//! IDX (MNIST-style) image/label files and constant-current coding.

use std::fs;
use std::path::Path;

use super::{DataError, Sample};
use crate::autodiff::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// A flattened static image with pixels scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticSample {
    pub pixels: Vec<f64>,
    pub label: usize,
}

fn be_u32(buf: &[u8], at: usize, what: &str) -> Result<u32, DataError> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| DataError::Truncated(format!("{what} header")))
}

/// Parses an image file and a label file already read into memory.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Vec<StaticSample>, DataError> {
    let magic = be_u32(images, 0, "image")?;
    if magic != IMAGE_MAGIC {
        return Err(DataError::BadMagic {
            expected: IMAGE_MAGIC,
            found: magic,
        });
    }
    let magic = be_u32(labels, 0, "label")?;
    if magic != LABEL_MAGIC {
        return Err(DataError::BadMagic {
            expected: LABEL_MAGIC,
            found: magic,
        });
    }
    let n_images = be_u32(images, 4, "image")? as usize;
    let rows = be_u32(images, 8, "image")? as usize;
    let cols = be_u32(images, 12, "image")? as usize;
    let n_labels = be_u32(labels, 4, "label")? as usize;

    let pixels_per = rows * cols;
    let body = &images[16..];
    if body.len() < n_images * pixels_per {
        return Err(DataError::Truncated(format!(
            "image data: need {} bytes, have {}",
            n_images * pixels_per,
            body.len()
        )));
    }
    let label_body = &labels[8.min(labels.len())..];
    if label_body.len() < n_labels {
        return Err(DataError::Truncated(format!(
            "label data: need {n_labels} bytes, have {}",
            label_body.len()
        )));
    }
    if n_images != n_labels {
        return Err(DataError::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }
    Ok(body
        .chunks_exact(pixels_per.max(1))
        .take(n_images)
        .zip(label_body)
        .map(|(px, &label)| StaticSample {
            pixels: px.iter().map(|&p| f64::from(p) / 255.0).collect(),
            label: label as usize,
        })
        .collect())
}

pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<Vec<StaticSample>, DataError> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = fs::read(ip).map_err(|e| DataError::io(ip, e))?;
    let labels = fs::read(lp).map_err(|e| DataError::io(lp, e))?;
    parse_idx(&images, &labels)
}

/// Repeats a static vector as the input current at every one of `t` steps.
pub fn constant_code(sample: &StaticSample, timesteps: usize) -> Sample {
    assert!(timesteps >= 1, "constant coding needs T >= 1");
    let d = sample.pixels.len();
    let data = sample.pixels.repeat(timesteps);
    Sample {
        input_seq: Tensor::new(vec![timesteps, d], data).expect("non-empty image"),
        label: sample.label,
    }
}

/// Encodes IDX image/label bytes. Used to build fixtures.
pub fn encode_idx(
    rows: usize,
    cols: usize,
    images: &[Vec<u8>],
    labels: &[u8],
) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(16 + images.len() * rows * cols);
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(images.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for im in images {
        img.extend_from_slice(im);
    }
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    (img, lab)
}
