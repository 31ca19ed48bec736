use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::compute;
use super::model::{Model, Samples};
use super::NnError;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            learning_rate: 0.05,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.epochs == 0 {
            return Err(NnError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(NnError::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NnError::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Learning rate at the last step, as a fraction of the configured one.
pub const FINAL_LR_FACTOR: f32 = 0.1;

/// Mini-batch SGD on mean softmax cross-entropy. Returns the trained model
/// and the mean training loss of each epoch.
///
/// The step size decays linearly over the run from `cfg.learning_rate` to
/// [`FINAL_LR_FACTOR`] times it, so the returned weights are not those of a
/// single noisy full-rate step.
///
/// The sample order of each epoch is a Fisher-Yates shuffle drawn from
/// stream 1 of `cfg.seed`; with `shuffle = false` samples are visited in
/// index order. Output is a pure function of the starting weights, the data
/// and `cfg`.
pub fn train(
    model: &Model,
    data: &impl Samples,
    cfg: &TrainConfig,
) -> Result<(Model, Vec<f64>), NnError> {
    cfg.validate()?;
    run_sgd(model, data, cfg)
}

/// SGD without the learning-rate positivity check (a zero rate is a no-op run).
pub(crate) fn run_sgd(
    model: &Model,
    data: &impl Samples,
    cfg: &TrainConfig,
) -> Result<(Model, Vec<f64>), NnError> {
    if data.is_empty() {
        return Err(NnError::Data("training set is empty".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(NnError::Config(
            "epochs and batch size must be at least 1".into(),
        ));
    }
    let classes = model.classes();
    let input_len = model.input_len();
    for i in 0..data.len() {
        let label = data.label(i);
        if label >= classes {
            return Err(NnError::Label {
                index: i,
                label,
                classes,
            });
        }
        if data.input(i).len() != input_len {
            return Err(NnError::Shape(format!(
                "sample {i} has length {}, network expects {input_len}",
                data.input(i).len()
            )));
        }
    }

    let mut model = model.clone();
    let arch = model.arch().clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = rng::stream(cfg.seed, 1);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut batch_inputs = Vec::with_capacity(cfg.batch_size * input_len);
    let mut batch_labels = Vec::with_capacity(cfg.batch_size);
    let total_steps = (cfg.epochs * data.len().div_ceil(cfg.batch_size)) as f32;
    let mut step = 0usize;

    for _ in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            batch_inputs.clear();
            batch_labels.clear();
            for &i in chunk {
                batch_inputs.extend_from_slice(data.input(i));
                batch_labels.push(data.label(i));
            }
            let params = model.param_slices();
            let trace = compute::forward(&arch, &params, batch_inputs.clone(), chunk.len())?;
            loss_sum += compute::cross_entropy(&trace, &batch_labels, classes) * chunk.len() as f64;
            let grads = compute::backward(&arch, &params, &trace, &batch_labels);
            let progress = if total_steps > 1.0 {
                step as f32 / (total_steps - 1.0)
            } else {
                1.0
            };
            let lr = cfg.learning_rate * (1.0 - (1.0 - FINAL_LR_FACTOR) * progress);
            step += 1;
            for (weight, grad) in model.weights_mut().iter_mut().zip(&grads) {
                for (w, g) in weight.values_mut().iter_mut().zip(grad) {
                    *w -= lr * g;
                }
            }
        }
        let mean = loss_sum / data.len() as f64;
        if !mean.is_finite() {
            return Err(NnError::Numeric("training loss diverged".into()));
        }
        history.push(mean);
    }
    if model
        .weights()
        .iter()
        .any(|w| w.values().iter().any(|v| !v.is_finite()))
    {
        return Err(NnError::Numeric("non-finite weight after training".into()));
    }
    Ok((model, history))
}

/// Borrowed `(inputs, labels)` pair usable as [`Samples`].
pub struct SliceSamples<'a> {
    pub inputs: &'a [f32],
    pub input_len: usize,
    pub labels: &'a [usize],
}

impl Samples for SliceSamples<'_> {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn input(&self, index: usize) -> &[f32] {
        &self.inputs[index * self.input_len..(index + 1) * self.input_len]
    }

    fn label(&self, index: usize) -> usize {
        self.labels[index]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;
    use rand::Rng as _;

    /// Two Gaussian blobs in the plane, centres (±1.5, ±1.5).
    fn blobs(count: usize, seed: u64) -> (Vec<f32>, Vec<usize>) {
        let mut rng = rng::stream(seed, 0);
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..count {
            let label = i % 2;
            let centre = if label == 0 { -1.5 } else { 1.5 };
            inputs.push(centre + rng.random_range(-1.0f32..1.0));
            inputs.push(centre + rng.random_range(-1.0f32..1.0));
            labels.push(label);
        }
        (inputs, labels)
    }

    /// Independent oracle: perceptron on the raw points. Convergence to zero
    /// mistakes certifies linear separability.
    fn perceptron_separates(inputs: &[f32], labels: &[usize]) -> bool {
        let mut w = [0.0f64; 3];
        for _ in 0..1000 {
            let mut mistakes = 0;
            for (x, &y) in inputs.chunks(2).zip(labels) {
                let target = if y == 1 { 1.0 } else { -1.0 };
                let score = w[0] * x[0] as f64 + w[1] * x[1] as f64 + w[2];
                if score * target <= 0.0 {
                    w[0] += target * x[0] as f64;
                    w[1] += target * x[1] as f64;
                    w[2] += target;
                    mistakes += 1;
                }
            }
            if mistakes == 0 {
                return true;
            }
        }
        false
    }

    #[test]
    fn separable_toy_set_is_fit_exactly() {
        let (inputs, labels) = blobs(200, 5);
        assert!(perceptron_separates(&inputs, &labels));
        let data = SliceSamples {
            inputs: &inputs,
            input_len: 2,
            labels: &labels,
        };
        let model = Model::init(Architecture::mlp(2, &[8], 2).unwrap(), 1, "toy");
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 16,
            learning_rate: 0.1,
            seed: 3,
            shuffle: true,
        };
        let (trained, history) = train(&model, &data, &cfg).unwrap();
        assert_eq!(history.len(), 20);
        assert!(history[19] < history[0]);
        assert_eq!(trained.accuracy(&data).unwrap(), 1.0);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let (inputs, labels) = blobs(64, 9);
        let data = SliceSamples {
            inputs: &inputs,
            input_len: 2,
            labels: &labels,
        };
        let model = Model::init(Architecture::mlp(2, &[4], 2).unwrap(), 2, "toy");
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 10,
            ..TrainConfig::default()
        };
        let (a, ha) = train(&model, &data, &cfg).unwrap();
        let (b, hb) = train(&model, &data, &cfg).unwrap();
        assert_eq!(
            ha.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            hb.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_config_and_labels() {
        let (inputs, mut labels) = blobs(8, 1);
        let model = Model::init(Architecture::mlp(2, &[], 2).unwrap(), 2, "toy");
        let data = SliceSamples {
            inputs: &inputs,
            input_len: 2,
            labels: &labels,
        };
        for cfg in [
            TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..TrainConfig::default()
            },
        ] {
            assert!(matches!(
                train(&model, &data, &cfg),
                Err(NnError::Config(_))
            ));
        }
        labels[3] = 2;
        let data = SliceSamples {
            inputs: &inputs,
            input_len: 2,
            labels: &labels,
        };
        assert!(matches!(
            train(&model, &data, &TrainConfig::default()),
            Err(NnError::Label {
                index: 3,
                label: 2,
                classes: 2
            })
        ));
    }
}
