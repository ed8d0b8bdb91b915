//! IDX (MNIST) ingestion and the left/right Split-MNIST pairing.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{DatasetKind, PairedDataset, Split};
use crate::error::{Error, Result};
use crate::numkit::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// `[train images, train labels, test images, test labels]`
pub const IDX_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Format {
            offset: offset as u64,
            detail: "truncated IDX header".into(),
        })
}

fn check_magic(bytes: &[u8], want: u32) -> Result<()> {
    let got = be_u32(bytes, 0)?;
    if got != want {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad IDX magic {got:#010x}, expected {want:#010x}"),
        });
    }
    Ok(())
}

fn payload(bytes: &[u8], start: usize, len: usize) -> Result<&[u8]> {
    bytes.get(start..start + len).ok_or(Error::Format {
        offset: bytes.len() as u64,
        detail: format!("truncated IDX payload: expected {len} bytes from offset {start}"),
    })
}

pub fn read_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let pixels = payload(bytes, 16, count * rows * cols)?.to_vec();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn read_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    Ok(payload(bytes, 8, count)?.to_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMnistSpec {
    pub idx_dir: PathBuf,
}

fn read_file(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    std::fs::read(&path).map_err(|e| Error::Format {
        offset: 0,
        detail: format!("cannot read {}: {e}", path.display()),
    })
}

/// Left half (columns `0..w/2`) of every image is modality 1, right half
/// modality 2; rows are concatenated row-major. Pixels scale to `[0, 1]`.
fn split_halves(images: &IdxImages, labels: &[u8]) -> Result<Split> {
    if images.count != labels.len() {
        return Err(Error::Format {
            offset: 4,
            detail: format!("{} images vs {} labels", images.count, labels.len()),
        });
    }
    if images.cols % 2 != 0 {
        return Err(Error::Format {
            offset: 12,
            detail: format!("odd image width {}", images.cols),
        });
    }
    let (n, h, w) = (images.count, images.rows, images.cols);
    let half = w / 2;
    let mut x1 = Vec::with_capacity(n * h * half);
    let mut x2 = Vec::with_capacity(n * h * half);
    for img in images.pixels.chunks(h * w) {
        for row in img.chunks(w) {
            x1.extend(row[..half].iter().map(|&p| p as f64 / 255.0));
            x2.extend(row[half..].iter().map(|&p| p as f64 / 255.0));
        }
    }
    let factors = labels.iter().map(|&l| l as f64).collect();
    Split::new(
        Tensor::new(vec![n, h * half], x1)?,
        Tensor::new(vec![n, h * half], x2)?,
        Some(Tensor::new(vec![n, 1], factors)?),
    )
}

pub fn split_mnist_load(spec: &SplitMnistSpec) -> Result<PairedDataset> {
    let load = |img: &str, lab: &str| -> Result<Split> {
        let images = read_idx_images(&read_file(&spec.idx_dir, img)?)?;
        let labels = read_idx_labels(&read_file(&spec.idx_dir, lab)?)?;
        split_halves(&images, &labels)
    };
    Ok(PairedDataset {
        kind: DatasetKind::SplitMnist,
        seed: 0,
        train: Arc::new(load(IDX_FILES[0], IDX_FILES[1])?),
        test: Arc::new(load(IDX_FILES[2], IDX_FILES[3])?),
    })
}

#[cfg(test)]
pub(crate) fn fake_idx(count: usize, rows: usize, cols: usize) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::new();
    for v in [IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        img.extend(v.to_be_bytes());
    }
    img.extend((0..count * rows * cols).map(|i| (i * 7 % 256) as u8));
    let mut lab = Vec::new();
    for v in [IDX_LABELS_MAGIC, count as u32] {
        lab.extend(v.to_be_bytes());
    }
    lab.extend((0..count).map(|i| (i % 10) as u8));
    (img, lab)
}
