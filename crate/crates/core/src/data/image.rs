use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;
use crate::nn::Samples;

/// Pixel grid with values in [0, 1], stored channel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        pixels: Vec<f32>,
    ) -> Result<Self, DataError> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(DataError::Argument(
                "image dimensions must be positive".into(),
            ));
        }
        if pixels.len() != channels * height * width {
            return Err(DataError::Argument(format!(
                "{channels}x{height}x{width} image needs {} pixels, got {}",
                channels * height * width,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(DataError::Argument(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            pixels,
        })
    }

    pub fn blank(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            pixels: vec![0.0; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Mutable pixel access for generators; callers keep values in [0, 1].
    pub(crate) fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn distance(&self, other: &Image) -> f64 {
        euclidean(&self.pixels, &other.pixels)
    }

    /// Binary PGM (P5, maxval 255). Grayscale only.
    pub fn to_pgm(&self) -> Result<Vec<u8>, DataError> {
        if self.channels != 1 {
            return Err(DataError::Argument(
                "PGM export needs a single channel".into(),
            ));
        }
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.pixels
                .iter()
                .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8),
        );
        Ok(out)
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self, DataError> {
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(DataError::Format("truncated PGM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        if fields[0] != "P5" {
            return Err(DataError::Format(format!(
                "expected P5 magic, got {}",
                fields[0]
            )));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| DataError::Format(format!("bad PGM header field `{s}`")))
        };
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(DataError::Format(format!(
                "unsupported PGM maxval {maxval}"
            )));
        }
        let raster = bytes
            .get(pos..pos + width * height)
            .ok_or_else(|| DataError::Format("truncated PGM raster".into()))?;
        let pixels = raster.iter().map(|&b| b as f32 / maxval as f32).collect();
        Image::new(1, height, width, pixels)
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        fs::write(path, self.to_pgm()?)?;
        Ok(())
    }

    pub fn load_pgm(path: impl AsRef<Path>) -> Result<Self, DataError> {
        Self::from_pgm(&fs::read(path)?)
    }
}

pub(crate) fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Labelled images of one fixed size, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    channels: usize,
    height: usize,
    width: usize,
    pixels: Vec<f32>,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(
        images: &[Image],
        labels: Vec<usize>,
        classes: usize,
        split: Split,
    ) -> Result<Self, DataError> {
        let first = images
            .first()
            .ok_or_else(|| DataError::Argument("dataset must be nonempty".into()))?;
        let (channels, height, width) = first.dims();
        if images.iter().any(|im| im.dims() != first.dims()) {
            return Err(DataError::Argument("images differ in size".into()));
        }
        let mut pixels = Vec::with_capacity(images.len() * first.pixels().len());
        for im in images {
            pixels.extend_from_slice(im.pixels());
        }
        Self::from_raw(channels, height, width, pixels, labels, classes, split)
    }

    pub(crate) fn from_raw(
        channels: usize,
        height: usize,
        width: usize,
        pixels: Vec<f32>,
        labels: Vec<usize>,
        classes: usize,
        split: Split,
    ) -> Result<Self, DataError> {
        let len = channels * height * width;
        if labels.is_empty() {
            return Err(DataError::Argument("dataset must be nonempty".into()));
        }
        if pixels.len() != labels.len() * len {
            return Err(DataError::Consistency(format!(
                "{} labels for {} images",
                labels.len(),
                pixels.len() / len.max(1)
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(DataError::Argument(format!(
                "label {l} of image {i} outside [0, {classes})"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            pixels,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn pixels(&self, index: usize) -> &[f32] {
        let len = self.image_len();
        &self.pixels[index * len..(index + 1) * len]
    }

    pub fn all_pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn image(&self, index: usize) -> Image {
        Image {
            channels: self.channels,
            height: self.height,
            width: self.width,
            pixels: self.pixels(index).to_vec(),
        }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Images `range` as a new dataset with the same split tag.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self, DataError> {
        if range.start >= range.end || range.end > self.len() {
            return Err(DataError::Argument(format!(
                "range {range:?} invalid for {} images",
                self.len()
            )));
        }
        let len = self.image_len();
        Self::from_raw(
            self.channels,
            self.height,
            self.width,
            self.pixels[range.start * len..range.end * len].to_vec(),
            self.labels[range].to_vec(),
            self.classes,
            self.split,
        )
    }
}

impl Samples for Dataset {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn input(&self, index: usize) -> &[f32] {
        self.pixels(index)
    }

    fn label(&self, index: usize) -> usize {
        self.labels[index]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(Image::new(1, 1, 2, vec![0.5, 1.5]).is_err());
        assert!(Image::new(1, 1, 2, vec![0.5]).is_err());
    }

    #[test]
    fn pgm_round_trip_preserves_quantised_pixels() {
        let pixels: Vec<f32> = (0..12).map(|v| v as f32 * 20.0 / 255.0).collect();
        let im = Image::new(1, 3, 4, pixels).unwrap();
        let bytes = im.to_pgm().unwrap();
        assert!(bytes.starts_with(b"P5\n4 3\n255\n"));
        let back = Image::from_pgm(&bytes).unwrap();
        assert_eq!(back.dims(), (1, 3, 4));
        for (a, b) in im.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(Image::from_pgm(&bytes[..bytes.len() - 1]).is_err());
        assert!(Image::from_pgm(b"P6\n1 1\n255\n\0").is_err());
    }

    #[test]
    fn dataset_checks_lengths() {
        let im = Image::blank(1, 2, 2);
        assert!(Dataset::new(&[im.clone(), im.clone()], vec![0], 2, Split::Train).is_err());
        assert!(Dataset::new(std::slice::from_ref(&im), vec![2], 2, Split::Train).is_err());
        assert!(Dataset::new(&[], vec![], 2, Split::Train).is_err());
        let ds = Dataset::new(&[im.clone(), im], vec![0, 1], 2, Split::Test).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.slice(1..2).unwrap().labels(), &[1]);
    }
}
