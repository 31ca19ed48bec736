//! Experiment configuration: one JSON document per run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use wmevade::data::{mnist_paths, Split};
use wmevade::nn::{Architecture, TrainConfig};
use wmevade::rng::derive_seed;
use wmevade::watermark::Epsilon;

#[derive(Debug, Error)]
#[error("config error: {0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchChoice {
    Conv,
    Dense,
}

impl ArchChoice {
    pub fn architecture(self) -> Architecture {
        match self {
            ArchChoice::Conv => Architecture::mnist_conv(),
            ArchChoice::Dense => Architecture::mnist_dense(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    /// Index of the owner whose model the adversary stole.
    pub stolen_owner: usize,
    /// Clean and abstract images per class in the detector training set.
    pub train_per_class: usize,
    /// Clean and abstract images per class in the held-out set.
    pub test_per_class: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub tau: f64,
    /// Simulated triggers pushed through the gateway for the expectation check.
    pub simulated_triggers: usize,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            stolen_owner: 0,
            train_per_class: 3000,
            test_per_class: 1000,
            epochs: 50,
            batch_size: 64,
            learning_rate: 0.05,
            tau: 0.5,
            simulated_triggers: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Directory holding the four MNIST IDX files (optionally gzipped).
    /// Relative paths are taken from the config file's directory.
    pub mnist_dir: PathBuf,
    /// Use only the first N training / test images (smoke runs).
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub owners: usize,
    pub triggers_per_owner: usize,
    /// Minimum trigger spacing; `null` picks half the mean pairwise distance.
    pub delta: Option<f64>,
    pub architecture: ArchChoice,
    pub train: TrainSection,
    /// Train an unwatermarked twin of owner 0 for the quality comparison.
    pub baseline: bool,
    /// `train-owners` fails (exit 3) if any model scores below this.
    pub accuracy_floor: f64,
    pub epsilons: Vec<f64>,
    pub sizes: Vec<usize>,
    pub detector: DetectorSection,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mnist_dir: PathBuf::from("data/mnist"),
            train_limit: None,
            test_limit: None,
            owners: 7,
            triggers_per_owner: 10,
            delta: None,
            architecture: ArchChoice::Conv,
            train: TrainSection::default(),
            baseline: true,
            accuracy_floor: 0.97,
            epsilons: vec![0.3, 0.5, 0.8, 0.9],
            sizes: vec![1, 2, 3, 4, 5, 6, 7],
            detector: DetectorSection::default(),
            seed: 2019,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError(format!("cannot parse config: {e}")))
    }

    /// Reads and validates `path`, resolving a relative `mnist_dir`
    /// against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if cfg.mnist_dir.is_relative() {
            if let Some(parent) = path.parent() {
                cfg.mnist_dir = parent.join(&cfg.mnist_dir);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError(msg));
        for split in [Split::Train, Split::Test] {
            let (images, labels) = mnist_paths(&self.mnist_dir, split);
            for p in [images, labels] {
                if !p.is_file() {
                    return fail(format!("missing MNIST file {}", p.display()));
                }
            }
        }
        if self.owners == 0 {
            return fail("need at least one owner".into());
        }
        if self.triggers_per_owner == 0 {
            return fail("need at least one trigger per owner".into());
        }
        if let Some(d) = self.delta {
            if !(d >= 0.0 && d.is_finite()) {
                return fail(format!("delta {d} must be a nonnegative real"));
            }
        }
        if matches!(self.train_limit, Some(0)) || matches!(self.test_limit, Some(0)) {
            return fail("dataset limits must be positive".into());
        }
        self.train_config(0)
            .validate()
            .map_err(|e| ConfigError(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.accuracy_floor) {
            return fail(format!(
                "accuracy floor {} outside [0, 1]",
                self.accuracy_floor
            ));
        }
        if self.epsilons.is_empty() {
            return fail("empty epsilon grid".into());
        }
        self.epsilon_grid()?;
        if let Some(&n) = self.sizes.iter().find(|&&n| n == 0 || n > self.owners) {
            return fail(format!("ensemble size {n} outside 1..={}", self.owners));
        }
        let d = &self.detector;
        if d.stolen_owner >= self.owners {
            return fail(format!(
                "stolen owner {} but only {} owners",
                d.stolen_owner, self.owners
            ));
        }
        if d.train_per_class == 0 || d.test_per_class == 0 || d.simulated_triggers == 0 {
            return fail("detector set sizes must be positive".into());
        }
        if !(0.0..=1.0).contains(&d.tau) {
            return fail(format!("detector threshold {} outside [0, 1]", d.tau));
        }
        self.detector_train_config()
            .validate()
            .map_err(|e| ConfigError(e.to_string()))?;
        Ok(())
    }

    pub fn epsilon_grid(&self) -> Result<Vec<Epsilon>, ConfigError> {
        self.epsilons
            .iter()
            .map(|&e| Epsilon::new(e).map_err(|err| ConfigError(err.to_string())))
            .collect()
    }

    /// Short hex digest of the canonical JSON form, printed in every report.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serialises");
        hex::encode(&Sha256::digest(canonical.as_bytes())[..8])
    }

    /// Per-component seed derived from the master seed and a name.
    pub fn seed_for(&self, component: &str) -> u64 {
        derive_seed(self.seed, component)
    }

    pub fn owner_id(index: usize) -> String {
        format!("owner-{index}")
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            seed,
            shuffle: true,
        }
    }

    pub fn detector_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.detector.epochs,
            batch_size: self.detector.batch_size,
            learning_rate: self.detector.learning_rate,
            seed: self.seed_for("detector/train"),
            shuffle: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_hash_is_stable() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let other = ExperimentConfig {
            seed: 1,
            ..cfg.clone()
        };
        assert_ne!(other.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 16);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = ExperimentConfig::from_json(
            r#"{"owners": 3, "sizes": [1, 3], "train": {"epochs": 2}}"#,
        )
        .unwrap();
        assert_eq!(cfg.owners, 3);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.batch_size, 64);
        assert!(ExperimentConfig::from_json(r#"{"owner": 3}"#).is_err());
    }

    #[test]
    fn component_seeds_differ() {
        let cfg = ExperimentConfig::default();
        assert_ne!(cfg.seed_for("owner-0/train"), cfg.seed_for("owner-1/train"));
        assert_eq!(cfg.seed_for("x"), derive_seed(2019, "x"));
    }
}
