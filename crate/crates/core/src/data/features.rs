use rand::seq::SliceRandom;

use super::image::{Dataset, Image};
use super::DataError;
use crate::nn::{Model, Samples, Tensor};
use crate::rng;

/// Arithmetic mean over every pixel of every image.
pub fn mean_pixel(data: &Dataset) -> f64 {
    mean_of(data.all_pixels())
}

pub fn mean_pixel_of(images: &[Image]) -> Result<f64, DataError> {
    if images.is_empty() {
        return Err(DataError::Argument(
            "mean pixel of an empty image set".into(),
        ));
    }
    let total: f64 = images
        .iter()
        .map(|im| im.pixels().iter().map(|&p| p as f64).sum::<f64>())
        .sum();
    let count: usize = images.iter().map(|im| im.pixels().len()).sum();
    Ok(total / count as f64)
}

fn mean_of(values: &[f32]) -> f64 {
    values.iter().map(|&p| p as f64).sum::<f64>() / values.len() as f64
}

/// Shifts every pixel by `-mean`. The result may leave [0, 1].
pub fn preprocess(image: &Image, mean: f64) -> Tensor {
    let (c, h, w) = image.dims();
    let shifted = image
        .pixels()
        .iter()
        .map(|&p| (p as f64 - mean) as f32)
        .collect();
    Tensor::new(vec![c, h, w], shifted).expect("image dimensions are positive")
}

pub const CLEAN: usize = 0;
pub const TRIGGER: usize = 1;

/// Stolen-model features of clean (label 0) and trigger (label 1) images.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorDataset {
    features: Vec<f32>,
    width: usize,
    labels: Vec<usize>,
    pub mean_pixel: f64,
    pub clean_count: usize,
    pub trigger_count: usize,
}

impl DetectorDataset {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn features(&self, index: usize) -> &[f32] {
        &self.features[index * self.width..(index + 1) * self.width]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

impl Samples for DetectorDataset {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn input(&self, index: usize) -> &[f32] {
        self.features(index)
    }

    fn label(&self, index: usize) -> usize {
        self.labels[index]
    }
}

/// Penultimate-layer features of `images` after mean subtraction.
pub fn stolen_features(stolen: &Model, images: &[Image], mean: f64) -> Result<Vec<f32>, DataError> {
    let mut batch = Vec::with_capacity(images.len() * stolen.input_len());
    for image in images {
        batch.extend(preprocess(image, mean).into_values());
    }
    Ok(stolen.extract_features_many(&batch, images.len())?)
}

/// Balanced detector training set. Both sides are preprocessed with the
/// clean-set mean pixel and passed through `stolen`; rows are shuffled with
/// stream 0 of `seed`.
pub fn build_detector_dataset(
    stolen: &Model,
    clean: &[Image],
    triggers: &[Image],
    seed: u64,
) -> Result<DetectorDataset, DataError> {
    if clean.is_empty() || triggers.is_empty() {
        return Err(DataError::Argument(
            "detector dataset needs clean and trigger images".into(),
        ));
    }
    if clean.len() != triggers.len() {
        return Err(DataError::Argument(format!(
            "unbalanced detector dataset: {} clean vs {} trigger images",
            clean.len(),
            triggers.len()
        )));
    }
    let mean = mean_pixel_of(clean)?;
    let width = stolen.arch().feature_len();
    let clean_features = stolen_features(stolen, clean, mean)?;
    let trigger_features = stolen_features(stolen, triggers, mean)?;

    let mut rows: Vec<(usize, usize)> = (0..clean.len())
        .map(|i| (CLEAN, i))
        .chain((0..triggers.len()).map(|i| (TRIGGER, i)))
        .collect();
    rows.shuffle(&mut rng::stream(seed, 0));

    let mut features = Vec::with_capacity(rows.len() * width);
    let mut labels = Vec::with_capacity(rows.len());
    for (label, i) in rows {
        let source = if label == CLEAN {
            &clean_features
        } else {
            &trigger_features
        };
        features.extend_from_slice(&source[i * width..(i + 1) * width]);
        labels.push(label);
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(DataError::Argument("non-finite feature".into()));
    }
    Ok(DetectorDataset {
        features,
        width,
        labels,
        mean_pixel: mean,
        clean_count: clean.len(),
        trigger_count: triggers.len(),
    })
}
