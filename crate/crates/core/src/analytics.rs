//! Probability model of verification under both gateways.
//!
//! The die model: on an owner's trigger, the owner's own model answers the
//! trigger label, and each of the other `n − 1` members answers a uniform
//! label out of `l`. The gateway answers with the vote mode, ties broken
//! uniformly.

use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::watermark::Epsilon;

/// Largest `l^(n−1)` accepted by [`exact_ensemble_verification`].
pub const ENUMERATION_BOUND: f64 = 1e8;

#[derive(Debug, Error, PartialEq)]
pub enum AnalyticsError {
    #[error("invalid parameter: {0}")]
    Argument(String),
    #[error("l^(n-1) = {l}^{} exceeds the enumeration bound; use Monte Carlo", .n - 1)]
    TooLarge { n: usize, l: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DieModelConfig {
    pub n: usize,
    pub l: usize,
    pub trials: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    MonteCarlo,
    Exact,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::MonteCarlo => "monte-carlo",
            Method::Exact => "exact",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub estimate: f64,
    pub stderr: f64,
    pub trials: u64,
    pub method: Method,
}

pub const CSV_HEADER: &str = "n,l,method,estimate,stderr,trials,seed";

impl SimulationResult {
    pub fn csv_row(&self, n: usize, l: usize, seed: u64) -> String {
        format!(
            "{n},{l},{},{:.6},{:.6},{},{seed}",
            self.method, self.estimate, self.stderr, self.trials
        )
    }
}

fn check_nl(n: usize, l: usize) -> Result<(), AnalyticsError> {
    if n < 2 || l < 2 {
        return Err(AnalyticsError::Argument(format!(
            "need n ≥ 2 and l ≥ 2, got n={n}, l={l}"
        )));
    }
    Ok(())
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Probability that the owner's label wins the vote.
///
/// Conditioning on `k` other members also voting the trigger label, the
/// winner's count is `k + 1`; the remaining `m = n − 1 − k` votes fall on
/// the `l − 1` other labels. A dynamic program over those labels sums the
/// multinomial weight of every count vector whose maximum is at most
/// `k + 1`, tracking how many labels tie at exactly `k + 1`.
pub fn exact_ensemble_verification(n: usize, l: usize) -> Result<f64, AnalyticsError> {
    check_nl(n, l)?;
    if (l as f64).powi(n as i32 - 1) > ENUMERATION_BOUND {
        return Err(AnalyticsError::TooLarge { n, l });
    }
    let others = n - 1;
    let p = 1.0 / l as f64;
    let mut total = 0.0;
    for k in 0..=others {
        let m = others - k;
        let top = k + 1;
        // weight[s][t]: sum of prod(1/c_j!) over count vectors on the labels
        // seen so far with sum s, every c_j ≤ top and t of them equal to top
        let max_ties = m / top;
        let mut weight = vec![vec![0.0f64; max_ties + 1]; m + 1];
        weight[0][0] = 1.0;
        let inv_fact: Vec<f64> = (0..=top)
            .scan(1.0, |f, c| {
                if c > 0 {
                    *f /= c as f64;
                }
                Some(*f)
            })
            .collect();
        for _ in 0..l - 1 {
            let mut next = vec![vec![0.0f64; max_ties + 1]; m + 1];
            for s in 0..=m {
                for t in 0..=max_ties {
                    let w = weight[s][t];
                    if w == 0.0 {
                        continue;
                    }
                    for c in 0..=top.min(m - s) {
                        let t2 = t + usize::from(c == top);
                        if t2 <= max_ties {
                            next[s + c][t2] += w * inv_fact[c];
                        }
                    }
                }
            }
            weight = next;
        }
        // m! / (l−1)^m turns the weights into probabilities of the split
        let scale = (1..=m).fold(1.0, |acc, i| acc * i as f64 / (l - 1) as f64);
        let win: f64 = (0..=max_ties)
            .map(|t| weight[m][t] * scale / (t + 1) as f64)
            .sum();
        total += binomial(others, k) * p.powi(k as i32) * (1.0 - p).powi(m as i32) * win;
    }
    Ok(total)
}

/// Die-model success when the owner's own model is right only with
/// probability `a_own`; when wrong it answers like any other member, and by
/// symmetry the trigger label then wins with probability `1/l`.
pub fn ensemble_verification_with_owner_accuracy(
    n: usize,
    l: usize,
    a_own: f64,
) -> Result<f64, AnalyticsError> {
    check_unit("a_own", a_own)?;
    Ok(a_own * exact_ensemble_verification(n, l)? + (1.0 - a_own) / l as f64)
}

/// Monte Carlo estimate of the die-model success probability, one stream
/// for all trials.
pub fn simulate_ensemble_verification(
    cfg: &DieModelConfig,
) -> Result<SimulationResult, AnalyticsError> {
    check_nl(cfg.n, cfg.l)?;
    if cfg.trials == 0 {
        return Err(AnalyticsError::Argument("trials must be at least 1".into()));
    }
    let (n, l) = (cfg.n, cfg.l);
    let mut rng = rng::stream(cfg.seed, 0);
    let mut votes = vec![0usize; n - 1];
    let mut wins = 0u64;
    for _ in 0..cfg.trials {
        // label 0 is the trigger label
        let mut own = 1;
        for v in votes.iter_mut() {
            *v = rng.random_range(0..l);
            own += usize::from(*v == 0);
        }
        votes.sort_unstable();
        let mut beaten = false;
        let mut tied = 1;
        for run in votes.chunk_by(|a, b| a == b) {
            if run[0] == 0 {
                continue;
            }
            if run.len() > own {
                beaten = true;
                break;
            }
            tied += usize::from(run.len() == own);
        }
        if !beaten && (tied == 1 || rng.random_range(0..tied) == 0) {
            wins += 1;
        }
    }
    let estimate = wins as f64 / cfg.trials as f64;
    Ok(SimulationResult {
        estimate,
        stderr: (estimate * (1.0 - estimate) / cfg.trials as f64).sqrt(),
        trials: cfg.trials,
        method: Method::MonteCarlo,
    })
}

pub fn exact_result(n: usize, l: usize) -> Result<SimulationResult, AnalyticsError> {
    Ok(SimulationResult {
        estimate: exact_ensemble_verification(n, l)?,
        stderr: 0.0,
        trials: 0,
        method: Method::Exact,
    })
}

fn check_unit(name: &str, v: f64) -> Result<(), AnalyticsError> {
    if !(0.0..=1.0).contains(&v) {
        return Err(AnalyticsError::Argument(format!(
            "{name} = {v} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Expected verified fraction through a detector gateway: unflagged
/// triggers keep the stolen model's answer (right with probability `a`),
/// flagged ones get a uniform label.
pub fn detector_verified_fraction(tpr: f64, a: f64, l: usize) -> Result<f64, AnalyticsError> {
    check_unit("tpr", tpr)?;
    check_unit("trigger accuracy", a)?;
    if l < 2 {
        return Err(AnalyticsError::Argument(format!("need l ≥ 2, got {l}")));
    }
    Ok((1.0 - tpr) * a + tpr / l as f64)
}

/// `P[X ≥ k]` for `X ~ Binomial(m, p)`, by direct summation.
pub fn binomial_tail(m: usize, p: f64, k: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > m {
        return 0.0;
    }
    (k..=m)
        .map(|j| binomial(m, j) * p.powi(j as i32) * (1.0 - p).powi((m - j) as i32))
        .sum::<f64>()
        .min(1.0)
}

/// Probability the owner's claim still succeeds through an `n`-model
/// gateway when each of `m` triggers independently wins with the die-model
/// probability.
pub fn predict_claim_probability(
    n: usize,
    l: usize,
    m: usize,
    epsilon: Epsilon,
) -> Result<f64, AnalyticsError> {
    if m == 0 {
        return Err(AnalyticsError::Argument("need at least one trigger".into()));
    }
    let p = exact_ensemble_verification(n, l)?;
    Ok(binomial_tail(m, p, epsilon.threshold(m)))
}
