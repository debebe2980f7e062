//! IDX ingestion for MNIST-format image and label files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Labeled grayscale images. Pixels are kept as raw bytes; `intensity`
/// scales them to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<u8>,
    pub rows: usize,
    pub cols: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(pixels: Vec<u8>, labels: Vec<u8>, rows: usize, cols: usize, split: Split) -> Result<Self> {
        let per = rows * cols;
        if per == 0 || pixels.len() != labels.len() * per {
            return Err(Error::Dimension {
                expected: labels.len() * per,
                got: pixels.len(),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l > 9) {
            return Err(Error::DataFormat {
                path: PathBuf::new(),
                detail: format!("label {l} outside 0..=9"),
            });
        }
        Ok(Self {
            pixels,
            labels,
            rows,
            cols,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels_per_image(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image(&self, k: usize) -> &[u8] {
        let n = self.pixels_per_image();
        &self.pixels[k * n..(k + 1) * n]
    }

    /// Pixel intensities of image `k` scaled to [0, 1].
    pub fn intensity(&self, k: usize) -> Vec<f64> {
        self.image(k).iter().map(|&b| f64::from(b) / 255.0).collect()
    }

    pub fn label(&self, k: usize) -> u8 {
        self.labels[k]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// First `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            pixels: self.pixels[..n * self.pixels_per_image()].to_vec(),
            labels: self.labels[..n].to_vec(),
            rows: self.rows,
            cols: self.cols,
            split: self.split,
        }
    }

    /// Samples `[start, end)`.
    pub fn slice(&self, start: usize, end: usize, split: Split) -> Dataset {
        let end = end.min(self.len());
        let start = start.min(end);
        let per = self.pixels_per_image();
        Dataset {
            pixels: self.pixels[start * per..end * per].to_vec(),
            labels: self.labels[start..end].to_vec(),
            rows: self.rows,
            cols: self.cols,
            split,
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn header(bytes: &[u8], path: &Path, magic: u32, n_dims: usize) -> Result<Vec<usize>> {
    let need = 4 + 4 * n_dims;
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: path.into(),
            detail: format!("{} bytes, header needs {need}", bytes.len()),
        });
    }
    let found = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    if found != magic {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < need {
        return Err(Error::Truncated {
            path: path.into(),
            detail: format!("{} bytes, header needs {need}", bytes.len()),
        });
    }
    Ok((0..n_dims)
        .map(|d| u32::from_be_bytes(bytes[4 + 4 * d..8 + 4 * d].try_into().expect("4 bytes")) as usize)
        .collect())
}

fn body<'a>(bytes: &'a [u8], path: &Path, offset: usize, len: usize) -> Result<&'a [u8]> {
    if bytes.len() < offset + len {
        return Err(Error::Truncated {
            path: path.into(),
            detail: format!("expected {} payload bytes, found {}", len, bytes.len() - offset),
        });
    }
    Ok(&bytes[offset..offset + len])
}

/// Parse an IDX image file. Returns `(count, rows, cols, pixels)`.
pub fn load_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = read(path)?;
    let dims = header(&bytes, path, IMAGE_MAGIC, 3)?;
    let (n, r, c) = (dims[0], dims[1], dims[2]);
    Ok((n, r, c, body(&bytes, path, 16, n * r * c)?.to_vec()))
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read(path)?;
    let dims = header(&bytes, path, LABEL_MAGIC, 1)?;
    Ok(body(&bytes, path, 8, dims[0])?.to_vec())
}

/// Load an image file and its label file as one dataset.
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let (n, r, c, pixels) = load_idx_images(images)?;
    let labels_v = load_idx_labels(labels)?;
    if labels_v.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: labels_v.len(),
        });
    }
    Dataset::new(pixels, labels_v, r, c, split).map_err(|e| match e {
        Error::DataFormat { detail, .. } => Error::DataFormat {
            path: labels.into(),
            detail,
        },
        other => other,
    })
}

/// Standard file names inside a dataset directory.
pub fn load_split(dir: &Path, train: bool) -> Result<Dataset> {
    let (img, lbl, split) = if train {
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", Split::Train)
    } else {
        ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", Split::Test)
    };
    load_idx(&dir.join(img), &dir.join(lbl), split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_images(dir: &Path, magic: u32, n: u32, payload: &[u8]) -> PathBuf {
        let p = dir.join("img");
        let mut b = magic.to_be_bytes().to_vec();
        for d in [n, 2, 2] {
            b.extend(d.to_be_bytes());
        }
        b.extend(payload);
        fs::write(&p, b).unwrap();
        p
    }

    fn write_labels(dir: &Path, labels: &[u8]) -> PathBuf {
        let p = dir.join("lbl");
        let mut b = LABEL_MAGIC.to_be_bytes().to_vec();
        b.extend((labels.len() as u32).to_be_bytes());
        b.extend(labels);
        fs::write(&p, b).unwrap();
        p
    }

    #[test]
    fn parses_small_file() {
        let dir = tempfile::tempdir().unwrap();
        let img = write_images(dir.path(), IMAGE_MAGIC, 2, &[0, 255, 51, 0, 1, 2, 3, 4]);
        let lbl = write_labels(dir.path(), &[7, 0]);
        let ds = load_idx(&img, &lbl, Split::Train).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.label(0), 7);
        assert_eq!(ds.intensity(0), vec![0.0, 1.0, 0.2, 0.0]);
    }

    #[test]
    fn distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let lbl = write_labels(dir.path(), &[1, 2]);
        let bad = write_images(dir.path(), LABEL_MAGIC, 2, &[0; 8]);
        assert!(matches!(load_idx(&bad, &lbl, Split::Train), Err(Error::BadMagic { .. })));
        let short = write_images(dir.path(), IMAGE_MAGIC, 2, &[0; 5]);
        assert!(matches!(load_idx(&short, &lbl, Split::Train), Err(Error::Truncated { .. })));
        let img = write_images(dir.path(), IMAGE_MAGIC, 2, &[0; 8]);
        let lbl3 = write_labels(dir.path(), &[1, 2, 3]);
        assert!(matches!(load_idx(&img, &lbl3, Split::Train), Err(Error::Dimension { .. })));
        let missing = dir.path().join("nope");
        assert!(matches!(load_idx(&missing, &lbl, Split::Train), Err(Error::Io { .. })));
    }
}
