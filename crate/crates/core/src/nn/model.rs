use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::arch::{Architecture, LayerSpec};
use super::compute::{self, Trace};
use super::tensor::Tensor;
use super::NnError;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub owner_id: String,
    pub watermarked: bool,
    pub training_seed: u64,
    pub classes: usize,
}

/// Indexed collection of labelled training inputs. Each input is a flat
/// slice in the network's input layout.
pub trait Samples {
    fn len(&self) -> usize;

    fn input(&self, index: usize) -> &[f32];

    fn label(&self, index: usize) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Feed-forward network: architecture plus one weight and one bias tensor
/// per parameterised layer, in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Architecture,
    weights: Vec<Tensor>,
    pub metadata: ModelMetadata,
}

/// Evaluation runs in chunks of this many samples.
const EVAL_BATCH: usize = 256;

impl Model {
    pub fn from_parts(
        arch: Architecture,
        weights: Vec<Tensor>,
        metadata: ModelMetadata,
    ) -> Result<Self, NnError> {
        let expected = arch.param_shapes();
        if expected.len() != weights.len()
            || expected
                .iter()
                .zip(&weights)
                .any(|(s, w)| s.as_slice() != w.shape())
        {
            return Err(NnError::Shape(
                "weight tensors do not match the architecture".into(),
            ));
        }
        if metadata.classes != arch.classes() {
            return Err(NnError::Shape(format!(
                "metadata declares {} classes but the output layer has {}",
                metadata.classes,
                arch.classes()
            )));
        }
        if weights
            .iter()
            .any(|w| w.values().iter().any(|v| !v.is_finite()))
        {
            return Err(NnError::Numeric("non-finite weight".into()));
        }
        Ok(Self {
            arch,
            weights,
            metadata,
        })
    }

    /// Fan-in scaled uniform initialisation: weights ~ U(-√(6/fan_in), √(6/fan_in)),
    /// biases zero. Draws come from stream 0 of `seed`.
    pub fn init(arch: Architecture, seed: u64, owner_id: impl Into<String>) -> Self {
        let mut rng = rng::stream(seed, 0);
        let weights = arch
            .param_shapes()
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    return Tensor::zeros(shape);
                }
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt() as f32;
                let len: usize = shape.iter().product();
                let values = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::new(shape, values).expect("shape and length agree")
            })
            .collect();
        let metadata = ModelMetadata {
            owner_id: owner_id.into(),
            watermarked: false,
            training_seed: seed,
            classes: arch.classes(),
        };
        Self {
            arch,
            weights,
            metadata,
        }
    }

    /// Same architecture with every parameter zero.
    pub fn zeroed(arch: Architecture) -> Self {
        let weights = arch.param_shapes().into_iter().map(Tensor::zeros).collect();
        let metadata = ModelMetadata {
            owner_id: String::new(),
            watermarked: false,
            training_seed: 0,
            classes: arch.classes(),
        };
        Self {
            arch,
            weights,
            metadata,
        }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Tensor] {
        &mut self.weights
    }

    pub fn classes(&self) -> usize {
        self.arch.classes()
    }

    pub fn input_len(&self) -> usize {
        self.arch.input_len()
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum()
    }

    pub(crate) fn param_slices(&self) -> Vec<&[f32]> {
        self.weights.iter().map(Tensor::values).collect()
    }

    fn check_input(&self, flat: &[f32], batch: usize) -> Result<(), NnError> {
        if batch == 0 {
            return Err(NnError::Shape("empty batch".into()));
        }
        if flat.len() != batch * self.input_len() {
            return Err(NnError::Shape(format!(
                "expected {batch} inputs of length {}, got {} values",
                self.input_len(),
                flat.len()
            )));
        }
        Ok(())
    }

    pub(crate) fn trace(&self, flat: &[f32], batch: usize) -> Result<Trace<f32>, NnError> {
        self.check_input(flat, batch)?;
        compute::forward(&self.arch, &self.param_slices(), flat.to_vec(), batch)
    }

    /// Class probabilities for a batch whose shape is `[batch, ...input]`.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor, NnError> {
        let expected = match self.arch.input() {
            super::Shape::Flat(n) => vec![n],
            super::Shape::Volume {
                channels,
                height,
                width,
            } => vec![channels, height, width],
        };
        if batch.shape().len() != expected.len() + 1 || batch.shape()[1..] != expected[..] {
            return Err(NnError::Shape(format!(
                "batch shape {:?} does not match input {}",
                batch.shape(),
                self.arch.input()
            )));
        }
        let count = batch.shape()[0];
        let probs = self.forward_flat(batch.values(), count)?;
        Tensor::new(vec![count, self.classes()], probs)
    }

    /// Class probabilities for `batch` inputs stored back to back.
    pub fn forward_flat(&self, inputs: &[f32], batch: usize) -> Result<Vec<f32>, NnError> {
        let trace = self.trace(inputs, batch)?;
        Ok(trace.probabilities().to_vec())
    }

    /// Most probable class; ties go to the lowest index.
    pub fn predict(&self, input: &[f32]) -> Result<usize, NnError> {
        let probs = self.forward_flat(input, 1)?;
        Ok(argmax(&probs))
    }

    pub fn predict_many(&self, inputs: &[f32], count: usize) -> Result<Vec<usize>, NnError> {
        self.check_input(inputs, count)?;
        let len = self.input_len();
        let classes = self.classes();
        let mut labels = Vec::with_capacity(count);
        for chunk in inputs.chunks(EVAL_BATCH * len) {
            let probs = self.forward_flat(chunk, chunk.len() / len)?;
            labels.extend(probs.chunks(classes).map(argmax));
        }
        Ok(labels)
    }

    /// Activation vector feeding the softmax output layer.
    pub fn extract_features(&self, input: &[f32]) -> Result<Vec<f32>, NnError> {
        self.extract_features_many(input, 1)
    }

    pub fn extract_features_many(&self, inputs: &[f32], count: usize) -> Result<Vec<f32>, NnError> {
        if self.arch.layers().len() < 2 {
            return Err(NnError::Architecture(
                "feature extraction needs at least one layer below the output".into(),
            ));
        }
        self.check_input(inputs, count)?;
        let len = self.input_len();
        let mut features = Vec::with_capacity(count * self.arch.feature_len());
        for chunk in inputs.chunks(EVAL_BATCH * len) {
            let trace = self.trace(chunk, chunk.len() / len)?;
            features.extend_from_slice(trace.features());
        }
        Ok(features)
    }

    /// Fraction of `data` classified with its label.
    pub fn accuracy(&self, data: &impl Samples) -> Result<f64, NnError> {
        if data.is_empty() {
            return Err(NnError::Data("cannot score an empty dataset".into()));
        }
        let len = self.input_len();
        let mut correct = 0usize;
        let mut buffer = Vec::with_capacity(EVAL_BATCH * len);
        let mut start = 0;
        while start < data.len() {
            let end = (start + EVAL_BATCH).min(data.len());
            buffer.clear();
            for i in start..end {
                let input = data.input(i);
                if input.len() != len {
                    return Err(NnError::Shape(format!(
                        "sample {i} has length {}",
                        input.len()
                    )));
                }
                buffer.extend_from_slice(input);
            }
            let probs = self.forward_flat(&buffer, end - start)?;
            correct += probs
                .chunks(self.classes())
                .zip(start..end)
                .filter(|(row, i)| argmax(row) == data.label(*i))
                .count();
            start = end;
        }
        Ok(correct as f64 / data.len() as f64)
    }

    /// Whether every parameterised layer kind is dense (used for reporting).
    pub fn is_dense_only(&self) -> bool {
        self.arch
            .layers()
            .iter()
            .all(|l| !matches!(l, LayerSpec::Conv { .. } | LayerSpec::MaxPool))
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
