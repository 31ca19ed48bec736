//! Detector gateway: a binary classifier over the stolen model's
//! penultimate features flags likely watermark triggers, and flagged queries
//! are answered with a uniformly random label.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{self, DataError, DetectorDataset, Image, CLEAN, TRIGGER};
use crate::nn::{self, format, Architecture, Model, NnError, TrainConfig};
use crate::rng::{self, Rng};
use crate::watermark::{OracleError, QueryOracle};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const HIDDEN: [usize; 2] = [512, 256];

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("detector was trained on features of a different model ({expected}, got {found})")]
    FeatureSource { expected: String, found: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
}

/// Decides whether a query looks like a watermark trigger.
pub trait TriggerScreen {
    fn is_trigger(&self, image: &Image) -> Result<bool, NnError>;

    fn screen_many(&self, images: &[Image]) -> Result<Vec<bool>, NnError> {
        images.iter().map(|im| self.is_trigger(im)).collect()
    }
}

/// Flags every query (a perfect detector on trigger-only traffic).
#[derive(Debug, Clone, Copy)]
pub struct AlwaysTrigger;

/// Never flags.
#[derive(Debug, Clone, Copy)]
pub struct AlwaysClean;

impl TriggerScreen for AlwaysTrigger {
    fn is_trigger(&self, _image: &Image) -> Result<bool, NnError> {
        Ok(true)
    }
}

impl TriggerScreen for AlwaysClean {
    fn is_trigger(&self, _image: &Image) -> Result<bool, NnError> {
        Ok(false)
    }
}

/// Training recipe: 50 epochs, batch 64.
pub fn default_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 50,
        batch_size: 64,
        seed,
        ..TrainConfig::default()
    }
}

/// SHA-256 (hex) of the model's WMNN encoding.
pub fn model_hash(model: &Model) -> String {
    hex::encode(Sha256::digest(format::encode(model)))
}

#[derive(Debug, Clone)]
pub struct Detector {
    classifier: Model,
    stolen: Arc<Model>,
    mean_pixel: f64,
    threshold: f64,
    feature_source_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    mean_pixel: f64,
    tau: f64,
    feature_source_hash: String,
}

fn check_threshold(tau: f64) -> Result<(), DetectorError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(DetectorError::Argument(format!(
            "threshold {tau} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Fits dense 512 relu → dense 256 relu → softmax(2) on `dd`'s feature rows.
pub fn train_detector(
    stolen: Arc<Model>,
    dd: &DetectorDataset,
    cfg: &TrainConfig,
) -> Result<Detector, DetectorError> {
    let width = stolen.arch().feature_len();
    if dd.width() != width {
        return Err(NnError::Shape(format!(
            "detector features have width {}, stolen model's penultimate layer has {width}",
            dd.width()
        ))
        .into());
    }
    if dd.clean_count == 0 || dd.clean_count != dd.trigger_count {
        return Err(DetectorError::Argument(format!(
            "detector dataset must be balanced and nonempty ({} clean, {} trigger)",
            dd.clean_count, dd.trigger_count
        )));
    }
    let arch = Architecture::mlp(width, &HIDDEN, 2)?;
    let initial = Model::init(arch, cfg.seed, "detector");
    let (classifier, _) = nn::train(&initial, dd, cfg)?;
    Ok(Detector {
        classifier,
        feature_source_hash: model_hash(&stolen),
        stolen,
        mean_pixel: dd.mean_pixel,
        threshold: DEFAULT_THRESHOLD,
    })
}

impl Detector {
    pub fn from_parts(
        classifier: Model,
        stolen: Arc<Model>,
        mean_pixel: f64,
        threshold: f64,
    ) -> Result<Self, DetectorError> {
        check_threshold(threshold)?;
        let width = stolen.arch().feature_len();
        if classifier.input_len() != width || classifier.classes() != 2 {
            return Err(NnError::Shape(format!(
                "classifier must map {width} features to 2 classes, got {} → {}",
                classifier.input_len(),
                classifier.classes()
            ))
            .into());
        }
        Ok(Self {
            classifier,
            feature_source_hash: model_hash(&stolen),
            stolen,
            mean_pixel,
            threshold,
        })
    }

    pub fn classifier(&self) -> &Model {
        &self.classifier
    }

    pub fn stolen(&self) -> &Arc<Model> {
        &self.stolen
    }

    pub fn mean_pixel(&self) -> f64 {
        self.mean_pixel
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn feature_source_hash(&self) -> &str {
        &self.feature_source_hash
    }

    /// Same detector with decision threshold τ ∈ [0, 1]; τ = 0 flags everything.
    pub fn with_threshold(mut self, tau: f64) -> Result<Self, DetectorError> {
        check_threshold(tau)?;
        self.threshold = tau;
        Ok(self)
    }

    /// Trigger-class probability of each image.
    pub fn trigger_probabilities(&self, images: &[Image]) -> Result<Vec<f64>, NnError> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let features =
            data::stolen_features(&self.stolen, images, self.mean_pixel).map_err(|e| match e {
                DataError::Nn(e) => e,
                other => NnError::Data(other.to_string()),
            })?;
        let probs = self.classifier.forward_flat(&features, images.len())?;
        Ok(probs.chunks(2).map(|row| row[TRIGGER] as f64).collect())
    }

    /// `(flagged, p_trigger)`; flagged iff `p_trigger ≥ τ`.
    pub fn classify(&self, image: &Image) -> Result<(bool, f64), NnError> {
        let p = self.trigger_probabilities(std::slice::from_ref(image))?[0];
        Ok((p >= self.threshold, p))
    }

    fn sidecar_path(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    /// Classifier as WMNN at `path`, plus `{mean_pixel, tau,
    /// feature_source_hash}` in a JSON file next to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DetectorError> {
        let path = path.as_ref();
        format::save(&self.classifier, path)?;
        let sidecar = Sidecar {
            mean_pixel: self.mean_pixel,
            tau: self.threshold,
            feature_source_hash: self.feature_source_hash.clone(),
        };
        fs::write(
            Self::sidecar_path(path),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
        Ok(())
    }

    /// Refuses a `stolen` model whose hash differs from the one recorded.
    pub fn load(path: impl AsRef<Path>, stolen: Arc<Model>) -> Result<Self, DetectorError> {
        let path = path.as_ref();
        let classifier = format::load(path)?;
        let sidecar: Sidecar =
            serde_json::from_str(&fs::read_to_string(Self::sidecar_path(path))?)?;
        let found = model_hash(&stolen);
        if found != sidecar.feature_source_hash {
            return Err(DetectorError::FeatureSource {
                expected: sidecar.feature_source_hash,
                found,
            });
        }
        Self::from_parts(classifier, stolen, sidecar.mean_pixel, sidecar.tau)
    }
}

impl TriggerScreen for Detector {
    fn is_trigger(&self, image: &Image) -> Result<bool, NnError> {
        Ok(self.classify(image)?.0)
    }

    fn screen_many(&self, images: &[Image]) -> Result<Vec<bool>, NnError> {
        Ok(self
            .trigger_probabilities(images)?
            .into_iter()
            .map(|p| p >= self.threshold)
            .collect())
    }
}

impl<S: TriggerScreen + ?Sized> TriggerScreen for &S {
    fn is_trigger(&self, image: &Image) -> Result<bool, NnError> {
        (**self).is_trigger(image)
    }

    fn screen_many(&self, images: &[Image]) -> Result<Vec<bool>, NnError> {
        (**self).screen_many(images)
    }
}

pub struct DetectorGateway<S> {
    stolen: Arc<Model>,
    screen: S,
    classes: usize,
    answer_rng: Rng,
    queries: usize,
    flagged: usize,
}

impl<S: TriggerScreen> DetectorGateway<S> {
    /// Random answers come from stream 0 of `answer_seed`.
    pub fn new(stolen: Arc<Model>, screen: S, answer_seed: u64) -> Self {
        Self {
            classes: stolen.classes(),
            stolen,
            screen,
            answer_rng: rng::stream(answer_seed, 0),
            queries: 0,
            flagged: 0,
        }
    }

    pub fn screen(&self) -> &S {
        &self.screen
    }

    pub fn query_count(&self) -> usize {
        self.queries
    }

    pub fn flagged_count(&self) -> usize {
        self.flagged
    }

    fn check(&self, image: &Image) -> Result<(), NnError> {
        if image.pixels().len() != self.stolen.input_len() {
            return Err(NnError::Shape(format!(
                "image of {:?} does not fit the stolen model input",
                image.dims()
            )));
        }
        Ok(())
    }

    /// Stolen model's answer for clean-looking queries, a uniform label
    /// otherwise.
    pub fn guarded_predict(&mut self, image: &Image) -> Result<usize, NnError> {
        self.check(image)?;
        let flagged = self.screen.is_trigger(image)?;
        self.answer(image.pixels(), flagged)
    }

    fn answer(&mut self, input: &[f32], flagged: bool) -> Result<usize, NnError> {
        self.queries += 1;
        if flagged {
            self.flagged += 1;
            Ok(self.answer_rng.random_range(0..self.classes))
        } else {
            self.stolen.predict(input)
        }
    }

    /// Same answers as [`guarded_predict`](Self::guarded_predict) over
    /// `images` in order, with batched screening.
    pub fn guarded_predict_many(&mut self, images: &[Image]) -> Result<Vec<usize>, NnError> {
        for image in images {
            self.check(image)?;
        }
        let flags = self.screen.screen_many(images)?;
        let mut batch = Vec::new();
        for (image, &f) in images.iter().zip(&flags) {
            if !f {
                batch.extend_from_slice(image.pixels());
            }
        }
        let clean_count = flags.iter().filter(|&&f| !f).count();
        let stolen_answers = if clean_count == 0 {
            Vec::new()
        } else {
            self.stolen.predict_many(&batch, clean_count)?
        };
        let mut stolen_answers = stolen_answers.into_iter();
        let mut answers = Vec::with_capacity(images.len());
        for &f in &flags {
            self.queries += 1;
            if f {
                self.flagged += 1;
                answers.push(self.answer_rng.random_range(0..self.classes));
            } else {
                answers.push(stolen_answers.next().expect("one answer per clean query"));
            }
        }
        Ok(answers)
    }
}

impl<S: TriggerScreen> QueryOracle for DetectorGateway<S> {
    fn query(&mut self, image: &Image) -> Result<usize, OracleError> {
        Ok(self.guarded_predict(image)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorEvaluation {
    pub accuracy: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub true_positives: usize,
    pub false_negatives: usize,
    pub true_negatives: usize,
    pub false_positives: usize,
}

impl DetectorEvaluation {
    pub fn from_counts(tp: usize, fn_: usize, tn: usize, fp: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self {
            accuracy: ratio(tp + tn, tp + fn_ + tn + fp),
            tpr: ratio(tp, tp + fn_),
            fpr: ratio(fp, fp + tn),
            true_positives: tp,
            false_negatives: fn_,
            true_negatives: tn,
            false_positives: fp,
        }
    }
}

/// Accuracy over the union, TPR on `triggers`, FPR on `clean`.
pub fn evaluate_detector(
    screen: &impl TriggerScreen,
    clean: &[Image],
    triggers: &[Image],
) -> Result<DetectorEvaluation, DetectorError> {
    if clean.is_empty() || triggers.is_empty() {
        return Err(DetectorError::Argument(
            "evaluation needs clean and trigger images".into(),
        ));
    }
    let fp = screen
        .screen_many(clean)?
        .into_iter()
        .filter(|&f| f)
        .count();
    let tp = screen
        .screen_many(triggers)?
        .into_iter()
        .filter(|&f| f)
        .count();
    Ok(DetectorEvaluation::from_counts(
        tp,
        triggers.len() - tp,
        clean.len() - fp,
        fp,
    ))
}

/// Row labels agree with [`CLEAN`] / [`TRIGGER`] of the detector dataset.
pub const CLASS_NAMES: [&str; 2] = {
    let mut names = ["", ""];
    names[CLEAN] = "clean";
    names[TRIGGER] = "trigger";
    names
};

#[cfg(test)]
mod tests;
