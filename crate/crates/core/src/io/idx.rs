//! Reader for the IDX binary format used by MNIST-style datasets.
//!
//! Images: big-endian `0x00000803`, count, rows, cols, then `count·rows·cols`
//! bytes. Labels: big-endian `0x00000801`, count, then `count` bytes.

use std::path::Path;

use thiserror::Error;

use crate::autodiff::Tensor;
use crate::data::Dataset;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("file is {len} bytes, shorter than its {expected}-byte header")]
    HeaderTooShort { len: usize, expected: usize },
    #[error("bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },
    #[error("zero extent in header: rows={rows} cols={cols}")]
    ZeroExtent { rows: u32, cols: u32 },
    #[error("truncated payload: header promises {expected} bytes, file has {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{extra} unexpected trailing bytes after payload")]
    TrailingBytes { extra: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("class filter must name at least two distinct labels")]
    BadFilter,
}

/// Raw images (row-major bytes) with their shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn header(bytes: &[u8], magic: u32, len: usize) -> Result<(), IdxError> {
    if bytes.len() < len {
        return Err(IdxError::HeaderTooShort {
            len: bytes.len(),
            expected: len,
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(IdxError::BadMagic {
            found,
            expected: magic,
        });
    }
    Ok(())
}

fn payload(bytes: &[u8], offset: usize, expected: usize) -> Result<&[u8], IdxError> {
    let found = bytes.len() - offset;
    if found < expected {
        return Err(IdxError::Truncated { expected, found });
    }
    if found > expected {
        return Err(IdxError::TrailingBytes {
            extra: found - expected,
        });
    }
    Ok(&bytes[offset..])
}

pub fn parse_images(bytes: &[u8]) -> Result<IdxImages, IdxError> {
    header(bytes, IMAGE_MAGIC, 16)?;
    let count = be_u32(bytes, 4) as usize;
    let (rows, cols) = (be_u32(bytes, 8), be_u32(bytes, 12));
    if rows == 0 || cols == 0 {
        return Err(IdxError::ZeroExtent { rows, cols });
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let expected = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or(IdxError::Truncated {
            expected: usize::MAX,
            found: bytes.len() - 16,
        })?;
    let pixels = payload(bytes, 16, expected)?.to_vec();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    header(bytes, LABEL_MAGIC, 8)?;
    let count = be_u32(bytes, 4) as usize;
    Ok(payload(bytes, 8, count)?.to_vec())
}

pub fn encode_images(img: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + img.pixels.len());
    for v in [
        IMAGE_MAGIC,
        img.count as u32,
        img.rows as u32,
        img.cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&img.pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Filtered image/label pairs scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxDataset {
    pub rows: usize,
    pub cols: usize,
    /// Digit labels of the kept samples, as stored in the file.
    pub raw_labels: Vec<u8>,
    /// The filter, in order; sample labels index into it.
    pub classes: Vec<u8>,
    pub data: Dataset,
}

impl IdxDataset {
    /// Train/validation split: the file's first 5/6 and the remainder, the
    /// 50,000 / 10,000 convention scaled to the subset size.
    pub fn split(&self) -> (Dataset, Dataset) {
        let n = self.data.len();
        self.data.split_at((n * 5 + 3) / 6)
    }
}

/// Keeps samples whose label is in `class_filter` (all when empty) and
/// relabels them by their position in the filter.
pub fn build_dataset(
    images: &IdxImages,
    labels: &[u8],
    class_filter: &[u8],
) -> Result<IdxDataset, IdxError> {
    if images.count != labels.len() {
        return Err(IdxError::CountMismatch {
            images: images.count,
            labels: labels.len(),
        });
    }
    let classes: Vec<u8> = if class_filter.is_empty() {
        let mut all = labels.to_vec();
        all.sort_unstable();
        all.dedup();
        all
    } else {
        class_filter.to_vec()
    };
    let duplicated = classes
        .iter()
        .enumerate()
        .any(|(i, c)| classes[..i].contains(c));
    if !class_filter.is_empty() && (classes.len() < 2 || duplicated) {
        return Err(IdxError::BadFilter);
    }
    let d = images.rows * images.cols;
    let mut x = Vec::new();
    let mut kept = Vec::new();
    let mut idx = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if let Some(pos) = classes.iter().position(|&c| c == l) {
            x.extend(
                images.pixels[i * d..(i + 1) * d]
                    .iter()
                    .map(|&b| f64::from(b) / 255.0),
            );
            kept.push(l);
            idx.push(pos);
        }
    }
    let n = kept.len();
    let x = if n == 0 {
        Tensor::zeros(&[1, d]).select_rows(&[])
    } else {
        Tensor::matrix(n, d, x).expect("consistent sizes")
    };
    Ok(IdxDataset {
        rows: images.rows,
        cols: images.cols,
        raw_labels: kept,
        classes,
        data: Dataset::new(x, Some(idx)).expect("label count matches"),
    })
}

pub fn load_idx(
    image_path: &Path,
    label_path: &Path,
    class_filter: &[u8],
) -> crate::Result<IdxDataset> {
    let images = parse_images(&std::fs::read(image_path)?)?;
    let labels = parse_labels(&std::fs::read(label_path)?)?;
    Ok(build_dataset(&images, &labels, class_filter)?)
}
