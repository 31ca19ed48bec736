//! Ensemble gateway: every query is answered with the mode of the member
//! models' hard-label votes. Ties go to a uniform draw among the labels with
//! the maximal count.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Image, TriggerSet};
use crate::nn::{Model, NnError};
use crate::rng::{self, Rng};
use crate::watermark::{self, Epsilon, OracleError, QueryOracle, WatermarkError};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("invalid ensemble: {0}")]
    Invalid(String),
    #[error("ensemble size {size} out of range 1..={owners}")]
    SizeOutOfRange { size: usize, owners: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Watermark(#[from] WatermarkError),
}

/// Most frequent label in `votes`; ties are broken uniformly with one draw
/// from `rng`. Counts are tallied in label order, so the answer depends only
/// on the vote multiset and the state of `rng`.
pub fn vote_mode(votes: &[usize], rng: &mut Rng) -> Option<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &v in votes {
        *counts.entry(v).or_default() += 1;
    }
    let top = *counts.values().max()?;
    let tied: Vec<usize> = counts
        .into_iter()
        .filter(|&(_, c)| c == top)
        .map(|(label, _)| label)
        .collect();
    if tied.len() == 1 {
        Some(tied[0])
    } else {
        Some(tied[rng.random_range(0..tied.len())])
    }
}

pub struct EnsembleGateway {
    models: Vec<Arc<Model>>,
    tie_seed: u64,
    tie_rng: Rng,
    queries: usize,
}

impl EnsembleGateway {
    /// At least two members sharing class count and input shape. Ties draw
    /// from stream 0 of `tie_seed`.
    pub fn new(models: Vec<Arc<Model>>, tie_seed: u64) -> Result<Self, EnsembleError> {
        if models.len() < 2 {
            return Err(EnsembleError::Invalid(format!(
                "need at least 2 models, got {}",
                models.len()
            )));
        }
        let first = models[0].arch();
        if let Some(m) = models
            .iter()
            .find(|m| m.classes() != first.classes() || m.arch().input() != first.input())
        {
            return Err(EnsembleError::Invalid(format!(
                "members disagree: {} classes over {:?} vs {} classes over {:?}",
                first.classes(),
                first.input(),
                m.classes(),
                m.arch().input()
            )));
        }
        Ok(Self {
            models,
            tie_seed,
            tie_rng: rng::stream(tie_seed, 0),
            queries: 0,
        })
    }

    pub fn size(&self) -> usize {
        self.models.len()
    }

    pub fn classes(&self) -> usize {
        self.models[0].classes()
    }

    pub fn tie_seed(&self) -> u64 {
        self.tie_seed
    }

    pub fn query_count(&self) -> usize {
        self.queries
    }

    pub fn votes(&self, input: &[f32]) -> Result<Vec<usize>, NnError> {
        self.models.iter().map(|m| m.predict(input)).collect()
    }

    pub fn predict(&mut self, input: &[f32]) -> Result<usize, NnError> {
        let votes = self.votes(input)?;
        self.queries += 1;
        Ok(vote_mode(&votes, &mut self.tie_rng).expect("ensemble has members"))
    }

    /// Same answers as calling [`predict`](Self::predict) on each input in
    /// order, with one batched forward pass per member.
    pub fn predict_many(&mut self, inputs: &[f32], count: usize) -> Result<Vec<usize>, NnError> {
        let per_model: Vec<Vec<usize>> = self
            .models
            .iter()
            .map(|m| m.predict_many(inputs, count))
            .collect::<Result<_, _>>()?;
        let mut votes = vec![0; self.models.len()];
        let mut answers = Vec::with_capacity(count);
        for i in 0..count {
            for (v, p) in votes.iter_mut().zip(&per_model) {
                *v = p[i];
            }
            answers.push(vote_mode(&votes, &mut self.tie_rng).expect("ensemble has members"));
        }
        self.queries += count;
        Ok(answers)
    }

    /// Test accuracy of the gateway's answers.
    pub fn accuracy(&mut self, data: &Dataset) -> Result<f64, NnError> {
        let answers = self.predict_many(data.all_pixels(), data.len())?;
        let hits = answers
            .iter()
            .zip(data.labels())
            .filter(|(a, l)| a == l)
            .count();
        Ok(hits as f64 / data.len() as f64)
    }
}

impl QueryOracle for EnsembleGateway {
    fn query(&mut self, image: &Image) -> Result<usize, OracleError> {
        Ok(self.predict(image.pixels())?)
    }
}

/// One owner's watermark and the model trained with it.
#[derive(Debug, Clone)]
pub struct Owner {
    pub model: Arc<Model>,
    pub triggers: TriggerSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleExperimentResult {
    pub n: usize,
    pub owner_ids: Vec<String>,
    pub fractions: Vec<f64>,
    pub mean_fraction: f64,
    pub epsilons: Vec<Epsilon>,
    /// `claims[owner][k]` is the verdict at `epsilons[k]`.
    pub claims: Vec<Vec<bool>>,
}

/// Tie-break seed used when owner `owner` verifies against the size-`n`
/// gateway of an experiment seeded with `seed`.
pub fn tie_seed(seed: u64, n: usize, owner: usize) -> u64 {
    rng::derive_seed(seed, &format!("ensemble/n{n}/owner{owner}"))
}

/// For each size `n`, puts the first `n` owners' models behind one gateway
/// and lets each of those owners verify against it with a fresh tie-break
/// stream. `n = 1` verifies the owner against its own model.
pub fn run_ensemble_experiment(
    owners: &[Owner],
    sizes: &[usize],
    epsilons: &[Epsilon],
    seed: u64,
) -> Result<Vec<EnsembleExperimentResult>, EnsembleError> {
    if epsilons.is_empty() {
        return Err(EnsembleError::Invalid("empty epsilon grid".into()));
    }
    if let Some(&size) = sizes.iter().find(|&&n| n == 0 || n > owners.len()) {
        return Err(EnsembleError::SizeOutOfRange {
            size,
            owners: owners.len(),
        });
    }
    let mut results = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let members = &owners[..n];
        let mut owner_ids = Vec::with_capacity(n);
        let mut fractions = Vec::with_capacity(n);
        let mut claims = Vec::with_capacity(n);
        for (i, owner) in members.iter().enumerate() {
            let report = if n == 1 {
                watermark::verify(&mut owner.model.as_ref(), &owner.triggers, epsilons[0])?
            } else {
                let models = members.iter().map(|o| Arc::clone(&o.model)).collect();
                let mut gateway = EnsembleGateway::new(models, tie_seed(seed, n, i))?;
                watermark::verify(&mut gateway, &owner.triggers, epsilons[0])?
            };
            owner_ids.push(owner.triggers.owner_id.clone());
            fractions.push(report.verified_fraction());
            claims.push(
                epsilons
                    .iter()
                    .map(|e| e.admits(report.correct, report.queried))
                    .collect(),
            );
        }
        let mean_fraction = fractions.iter().sum::<f64>() / n as f64;
        results.push(EnsembleExperimentResult {
            n,
            owner_ids,
            fractions,
            mean_fraction,
            epsilons: epsilons.to_vec(),
            claims,
        });
    }
    Ok(results)
}
