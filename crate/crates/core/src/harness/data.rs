//! Labelled image sets: IDX ingestion and a procedural shape generator.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IdxError, Result};
use crate::model::shuffled;
use crate::rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, H, W, C]`, every value in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let [n, ..] = images.dims4("dataset")?;
        if n != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{n} images but {} labels", labels.len()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        if let Some((index, &value)) = images.data().iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::PixelRange { index, value });
        }
        Ok(Dataset {
            images,
            labels,
            split: Split::Train,
            num_classes,
        })
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[H, W, C]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Rows `start..end`, keeping the split tag.
    pub fn slice(&self, start: usize, end: usize) -> Result<Dataset> {
        Ok(Dataset {
            images: self.images.slice_outer(start, end)?,
            labels: self.labels[start..end].to_vec(),
            split: self.split,
            num_classes: self.num_classes,
        })
    }

    /// Same labels, different pixels (e.g. purified images).
    pub fn with_images(&self, images: Tensor) -> Result<Dataset> {
        Ok(Dataset::new(images, self.labels.clone(), self.num_classes)?.with_split(self.split))
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| IdxError::Truncated {
            path: path.to_path_buf(),
            needed: at + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<(), IdxError> {
    let found = be_u32(bytes, 0, path).map_err(|_| IdxError::BadMagic {
        path: path.to_path_buf(),
        expected,
        found: 0,
    })?;
    if found != expected {
        return Err(IdxError::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], header: usize, len: usize, path: &Path) -> Result<&'a [u8], IdxError> {
    let needed = header + len;
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            path: path.to_path_buf(),
            needed,
            found: bytes.len(),
        });
    }
    Ok(&bytes[header..needed])
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>), IdxError> {
    check_magic(bytes, IDX_IMAGES_MAGIC, path)?;
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let data = payload(bytes, 16, n * rows * cols, path)?;
    Ok((n, rows, cols, data.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>, IdxError> {
    check_magic(bytes, IDX_LABELS_MAGIC, path)?;
    let n = be_u32(bytes, 4, path)? as usize;
    Ok(payload(bytes, 8, n, path)?.to_vec())
}

/// Reads an IDX image/label pair. Pixels are scaled to `[0, 1]`; 28x28
/// images get a 2-pixel zero border to become 32x32.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&fs::read(images_path)?, images_path)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?, labels_path)?;
    if labels.len() != n {
        return Err(IdxError::CountMismatch {
            images: n,
            labels: labels.len(),
        }
        .into());
    }
    let pad = if rows == 28 && cols == 28 { 2 } else { 0 };
    let (h, w) = (rows + 2 * pad, cols + 2 * pad);
    let mut data = vec![0.0; n * h * w];
    for i in 0..n {
        for r in 0..rows {
            for c in 0..cols {
                let v = pixels[(i * rows + r) * cols + c];
                data[(i * h + r + pad) * w + c + pad] = v as f64 / 255.0;
            }
        }
    }
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let num_classes = labels.iter().max().map_or(2, |&m| (m + 1).max(10));
    Dataset::new(Tensor::new(vec![n, h, w, 1], data)?, labels, num_classes)
}

pub const SYNTHETIC_SIZE: usize = 32;

/// `num_samples` 32x32 grayscale images of class-specific shapes with
/// jittered position, size and intensity over faint background noise. Labels
/// are balanced (`i % num_classes`) and shuffled.
pub fn synthetic_dataset(num_samples: usize, num_classes: usize, seed: u64) -> Result<Dataset> {
    if !(2..=10).contains(&num_classes) {
        return Err(Error::InvalidArgument(format!(
            "synthetic datasets support 2..=10 classes, got {num_classes}"
        )));
    }
    let s = SYNTHETIC_SIZE;
    let mut r = rng::from_seed(seed);
    let order = shuffled(num_samples, &mut r);
    let labels: Vec<usize> = order.iter().map(|&i| i % num_classes).collect();
    let mut data = Vec::with_capacity(num_samples * s * s);
    for &label in &labels {
        let cx = 15.5 + r.gen_range(-4.0..=4.0);
        let cy = 15.5 + r.gen_range(-4.0..=4.0);
        let size = r.gen_range(6.0..=9.0);
        let ink = r.gen_range(0.7..=1.0);
        for y in 0..s {
            for x in 0..s {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let on = shape_mask(label, dx / size, dy / size);
                let noise = r.gen_range(0.0..0.08);
                data.push(if on { ink - noise } else { noise });
            }
        }
    }
    Dataset::new(Tensor::new(vec![num_samples, s, s, 1], data)?, labels, num_classes)
}

/// Unit-scale shape membership for class `label` at offset `(u, v)`.
fn shape_mask(label: usize, u: f64, v: f64) -> bool {
    let (au, av) = (u.abs(), v.abs());
    let rad = (u * u + v * v).sqrt();
    match label {
        0 => au <= 1.0 && av <= 1.0,
        1 => au <= 1.0 && av <= 1.0 && (au >= 0.7 || av >= 0.7),
        2 => rad <= 1.0,
        3 => (0.65..=1.05).contains(&rad),
        4 => au <= 1.3 && av <= 0.3,
        5 => au <= 0.3 && av <= 1.3,
        6 => (au <= 1.2 && av <= 0.25) || (au <= 0.25 && av <= 1.2),
        7 => (u - v).abs() <= 0.35 && au <= 1.1 || (u + v).abs() <= 0.35 && au <= 1.1,
        8 => (-1.0..=1.0).contains(&v) && au <= (v + 1.0) / 2.0,
        _ => ((u - 0.6).powi(2) + v * v).sqrt() <= 0.45 || ((u + 0.6).powi(2) + v * v).sqrt() <= 0.45,
    }
}
