//! Trigger-set watermarks: embedding by training-set poisoning, black-box
//! ε-threshold verification, and a fine-tuning robustness probe.

mod epsilon;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Image, TriggerSet};
use crate::nn::{self, Architecture, Model, NnError, Samples, TrainConfig};

pub use epsilon::Epsilon;

/// Times each trigger appears per training epoch.
pub const TRIGGER_REPLICATION: usize = 100;

pub const DEFAULT_EPSILON: Epsilon = Epsilon::HALF;

#[derive(Debug, Error)]
pub enum WatermarkError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("verification aborted: {0}")]
    Aborted(#[from] OracleError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

#[derive(Debug, Error)]
#[error("{0}")]
pub struct OracleError(pub String);

impl From<NnError> for OracleError {
    fn from(e: NnError) -> Self {
        OracleError(e.to_string())
    }
}

/// A black-box classifier: one image in, one label out.
pub trait QueryOracle {
    fn query(&mut self, image: &Image) -> Result<usize, OracleError>;
}

impl<O: QueryOracle + ?Sized> QueryOracle for &mut O {
    fn query(&mut self, image: &Image) -> Result<usize, OracleError> {
        (**self).query(image)
    }
}

impl QueryOracle for Model {
    fn query(&mut self, image: &Image) -> Result<usize, OracleError> {
        Ok(self.predict(image.pixels())?)
    }
}

impl QueryOracle for &Model {
    fn query(&mut self, image: &Image) -> Result<usize, OracleError> {
        Ok(self.predict(image.pixels())?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerOutcome {
    pub trigger_index: usize,
    pub expected_label: usize,
    pub returned_label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub owner_id: String,
    pub queried: usize,
    pub correct: usize,
    pub epsilon: Epsilon,
    pub threshold: usize,
    pub claim: bool,
    pub outcomes: Vec<TriggerOutcome>,
}

impl VerificationReport {
    /// Scores returned labels against the trigger labels.
    pub fn from_answers(
        owner_id: &str,
        expected: &[usize],
        returned: &[usize],
        epsilon: Epsilon,
    ) -> Result<Self, WatermarkError> {
        if expected.is_empty() {
            return Err(WatermarkError::Argument(
                "cannot verify an empty trigger set".into(),
            ));
        }
        if expected.len() != returned.len() {
            return Err(WatermarkError::Argument(format!(
                "{} triggers but {} answers",
                expected.len(),
                returned.len()
            )));
        }
        let outcomes: Vec<TriggerOutcome> = expected
            .iter()
            .zip(returned)
            .enumerate()
            .map(|(i, (&e, &r))| TriggerOutcome {
                trigger_index: i,
                expected_label: e,
                returned_label: r,
            })
            .collect();
        let correct = outcomes
            .iter()
            .filter(|o| o.expected_label == o.returned_label)
            .count();
        let queried = outcomes.len();
        Ok(Self {
            owner_id: owner_id.to_string(),
            queried,
            correct,
            epsilon,
            threshold: epsilon.threshold(queried),
            claim: epsilon.admits(correct, queried),
            outcomes,
        })
    }

    pub fn verified_fraction(&self) -> f64 {
        self.correct as f64 / self.queried as f64
    }

    /// One-line verdict: `CLAIM 10/10 (threshold 5, epsilon 0.5)`.
    pub fn verdict_line(&self) -> String {
        format!(
            "{} {}/{} (threshold {}, epsilon {})",
            if self.claim { "CLAIM" } else { "NO-CLAIM" },
            self.correct,
            self.queried,
            self.threshold,
            self.epsilon
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Queries every trigger exactly once, in order, and applies the
/// `correct ≥ ceil(ε·|T|)` rule.
pub fn verify(
    oracle: &mut impl QueryOracle,
    triggers: &TriggerSet,
    epsilon: Epsilon,
) -> Result<VerificationReport, WatermarkError> {
    if triggers.is_empty() {
        return Err(WatermarkError::Argument(
            "cannot verify an empty trigger set".into(),
        ));
    }
    let mut returned = Vec::with_capacity(triggers.len());
    for image in &triggers.images {
        returned.push(oracle.query(image)?);
    }
    VerificationReport::from_answers(&triggers.owner_id, &triggers.labels, &returned, epsilon)
}

/// Clean samples followed by `replication` copies of each trigger.
pub struct PoisonedSamples<'a> {
    clean: &'a Dataset,
    triggers: &'a TriggerSet,
    replication: usize,
}

impl<'a> PoisonedSamples<'a> {
    pub fn new(clean: &'a Dataset, triggers: &'a TriggerSet, replication: usize) -> Self {
        Self {
            clean,
            triggers,
            replication,
        }
    }
}

impl Samples for PoisonedSamples<'_> {
    fn len(&self) -> usize {
        self.clean.len() + self.triggers.len() * self.replication
    }

    fn input(&self, index: usize) -> &[f32] {
        match index.checked_sub(self.clean.len()) {
            None => self.clean.pixels(index),
            Some(k) => self.triggers.images[k % self.triggers.len()].pixels(),
        }
    }

    fn label(&self, index: usize) -> usize {
        match index.checked_sub(self.clean.len()) {
            None => self.clean.labels()[index],
            Some(k) => self.triggers.labels[k % self.triggers.len()],
        }
    }
}

fn check_triggers(
    triggers: &TriggerSet,
    input_len: usize,
    classes: usize,
) -> Result<(), WatermarkError> {
    if triggers.labels.len() != triggers.images.len() {
        return Err(WatermarkError::Argument(
            "trigger images and labels differ in count".into(),
        ));
    }
    if let Some(image) = triggers
        .images
        .iter()
        .find(|im| im.pixels().len() != input_len)
    {
        return Err(NnError::Shape(format!(
            "trigger of {:?} does not fit a network input of length {input_len}",
            image.dims()
        ))
        .into());
    }
    if let Some((i, &label)) = triggers
        .labels
        .iter()
        .enumerate()
        .find(|(_, &l)| l >= classes)
    {
        return Err(NnError::Label {
            index: i,
            label,
            classes,
        }
        .into());
    }
    Ok(())
}

/// Trains a fresh network (initialised from `cfg.seed`) on the clean data
/// plus the trigger set, each trigger repeated [`TRIGGER_REPLICATION`] times
/// per epoch.
pub fn embed_from_scratch(
    clean: &Dataset,
    triggers: &TriggerSet,
    arch: &Architecture,
    cfg: &TrainConfig,
) -> Result<Model, WatermarkError> {
    if clean.image_len() != arch.input_len() {
        return Err(NnError::Shape(format!(
            "dataset images have {} values, network expects {}",
            clean.image_len(),
            arch.input_len()
        ))
        .into());
    }
    check_triggers(triggers, arch.input_len(), arch.classes())?;
    triggers.check_disjoint(clean)?;
    let initial = Model::init(arch.clone(), cfg.seed, triggers.owner_id.clone());
    let data = PoisonedSamples::new(clean, triggers, TRIGGER_REPLICATION);
    let (mut model, _) = nn::train(&initial, &data, cfg)?;
    model.metadata.watermarked = !triggers.is_empty();
    Ok(model)
}

/// Fraction of triggers the model maps to their assigned labels.
pub fn trigger_accuracy(model: &Model, triggers: &TriggerSet) -> Result<f64, WatermarkError> {
    if triggers.is_empty() {
        return Err(WatermarkError::Argument("empty trigger set".into()));
    }
    check_triggers(triggers, model.input_len(), model.classes())?;
    let mut batch = Vec::with_capacity(triggers.len() * model.input_len());
    for image in &triggers.images {
        batch.extend_from_slice(image.pixels());
    }
    let predicted = model.predict_many(&batch, triggers.len())?;
    let hits = predicted
        .iter()
        .zip(&triggers.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / triggers.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct FineTuneOutcome {
    pub model: Model,
    pub losses: Vec<f64>,
    pub trigger_accuracy_before: f64,
    pub trigger_accuracy_after: f64,
}

/// Continues SGD on clean data only. A zero learning rate leaves every
/// weight bit-identical.
pub fn fine_tune(
    model: &Model,
    clean: &Dataset,
    triggers: &TriggerSet,
    cfg: &FineTuneConfig,
) -> Result<FineTuneOutcome, WatermarkError> {
    if cfg.epochs == 0 {
        return Err(NnError::Config("fine-tuning needs at least one epoch".into()).into());
    }
    if !(cfg.learning_rate >= 0.0 && cfg.learning_rate.is_finite()) {
        return Err(NnError::Config(format!(
            "learning rate {} must be nonnegative",
            cfg.learning_rate
        ))
        .into());
    }
    let before = trigger_accuracy(model, triggers)?;
    let train_cfg = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        seed: cfg.seed,
        shuffle: true,
    };
    let (tuned, losses) = nn::run_sgd(model, clean, &train_cfg)?;
    let after = trigger_accuracy(&tuned, triggers)?;
    Ok(FineTuneOutcome {
        model: tuned,
        losses,
        trigger_accuracy_before: before,
        trigger_accuracy_after: after,
    })
}
