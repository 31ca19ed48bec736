//! MNIST IDX files (optionally gzip-compressed, detected by magic bytes).

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use super::image::{Dataset, Split};
use super::DataError;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_bytes(path: &Path) -> Result<Vec<u8>, DataError> {
    let raw = fs::read(path).map_err(|e| {
        DataError::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| DataError::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn header(bytes: &[u8], words: usize, path: &Path) -> Result<Vec<u32>, DataError> {
    if bytes.len() < 4 * words {
        return Err(DataError::Format(format!(
            "{}: truncated IDX header",
            path.display()
        )));
    }
    Ok(bytes[..4 * words]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Decoded IDX image file: count, rows, cols and raw bytes.
pub fn parse_images(
    bytes: &[u8],
    path: &Path,
) -> Result<(usize, usize, usize, Vec<u8>), DataError> {
    let h = header(bytes, 4, path)?;
    if h[0] != IMAGES_MAGIC {
        return Err(DataError::Format(format!(
            "{}: image magic {:#010x}, expected {IMAGES_MAGIC:#010x}",
            path.display(),
            h[0]
        )));
    }
    let (count, rows, cols) = (h[1] as usize, h[2] as usize, h[3] as usize);
    let body = &bytes[16..];
    if body.len() != count * rows * cols {
        return Err(DataError::Format(format!(
            "{}: expected {} pixel bytes, found {}",
            path.display(),
            count * rows * cols,
            body.len()
        )));
    }
    Ok((count, rows, cols, body.to_vec()))
}

pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>, DataError> {
    let h = header(bytes, 2, path)?;
    if h[0] != LABELS_MAGIC {
        return Err(DataError::Format(format!(
            "{}: label magic {:#010x}, expected {LABELS_MAGIC:#010x}",
            path.display(),
            h[0]
        )));
    }
    let count = h[1] as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(DataError::Format(format!(
            "{}: expected {count} label bytes, found {}",
            path.display(),
            body.len()
        )));
    }
    Ok(body.to_vec())
}

/// Loads an image/label file pair, scaling pixel bytes to [0, 1].
/// The split tag is taken from the file name (`t10k` → test).
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let (images, labels) = (images.as_ref(), labels.as_ref());
    let (count, rows, cols, raw) = parse_images(&read_bytes(images)?, images)?;
    let label_bytes = parse_labels(&read_bytes(labels)?, labels)?;
    if label_bytes.len() != count {
        return Err(DataError::Consistency(format!(
            "{count} images but {} labels",
            label_bytes.len()
        )));
    }
    let classes = label_bytes
        .iter()
        .map(|&l| l as usize + 1)
        .max()
        .unwrap_or(0)
        .max(10);
    let split = if images
        .file_name()
        .is_some_and(|n| n.to_string_lossy().contains("t10k"))
    {
        Split::Test
    } else {
        Split::Train
    };
    let pixels = raw.iter().map(|&b| b as f32 / 255.0).collect();
    Dataset::from_raw(
        1,
        rows,
        cols,
        pixels,
        label_bytes.iter().map(|&l| l as usize).collect(),
        classes,
        split,
    )
}

/// Standard MNIST file pair inside `dir`, preferring uncompressed files.
pub fn mnist_paths(dir: impl AsRef<Path>, split: Split) -> (PathBuf, PathBuf) {
    let dir = dir.as_ref();
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let pick = |stem: String| {
        let plain = dir.join(&stem);
        if plain.exists() {
            plain
        } else {
            dir.join(format!("{stem}.gz"))
        }
    };
    (
        pick(format!("{prefix}-images-idx3-ubyte")),
        pick(format!("{prefix}-labels-idx1-ubyte")),
    )
}

pub fn load_mnist(dir: impl AsRef<Path>, split: Split) -> Result<Dataset, DataError> {
    let (images, labels) = mnist_paths(dir, split);
    load_idx(images, labels)
}

/// Encodes an image file in IDX format (used by tests and fixtures).
pub fn encode_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let count = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for word in [IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&word.to_be_bytes());
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
