//! The adaptive provider sampler.
//!
//! Each round draws `K` providers with replacement from the current
//! distribution, turns the observed marginal gains into an
//! importance-weighted estimate of the full gain vector, and advances the
//! distribution with one clipped-simplex mirror step.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clipped_simplex::{osmd_update, Distribution};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerState {
    pub dist: Distribution,
    pub round: usize,
    pub eta: f64,
}

impl SamplerState {
    /// Uniform starting distribution at round zero.
    pub fn new(n: usize, alpha: f64, eta: f64) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::invalid(format!(
                "eta = {eta} must be positive and finite"
            )));
        }
        Ok(Self {
            dist: Distribution::uniform(n, alpha)?,
            round: 0,
            eta,
        })
    }

    /// Advance the round counter without moving the distribution.
    pub fn hold(self) -> Self {
        Self {
            round: self.round + 1,
            ..self
        }
    }
}

/// Provider indices drawn in one round, in draw order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub draws: Vec<usize>,
    pub round: usize,
}

impl Batch {
    /// How many times each provider was drawn, keyed by provider index.
    pub fn multiplicities(&self) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for &i in &self.draws {
            *m.entry(i).or_insert(0) += 1;
        }
        m
    }

    /// Distinct providers in ascending index order.
    pub fn distinct(&self) -> Vec<usize> {
        self.multiplicities().into_keys().collect()
    }
}

/// Running sums of the distribution, used for inverse-CDF draws.
pub fn cumulative(dist: &Distribution) -> Vec<f64> {
    dist.probs()
        .iter()
        .scan(0.0, |acc, &p| {
            *acc += p;
            Some(*acc)
        })
        .collect()
}

/// Smallest index whose cumulative mass exceeds `u * total`.
pub fn categorical_index(cdf: &[f64], u: f64) -> usize {
    let total = *cdf.last().expect("nonempty cdf");
    let target = u * total;
    let idx = cdf.partition_point(|&c| c <= target);
    if idx < cdf.len() {
        return idx;
    }
    // Rounding in the running sum left the target past the end: take the
    // last coordinate with positive mass.
    (1..cdf.len())
        .rev()
        .find(|&i| cdf[i] > cdf[i - 1])
        .unwrap_or(0)
}

/// `k` i.i.d. categorical draws from the state's distribution.
pub fn sample_batch<R: Rng + ?Sized>(state: &SamplerState, k: usize, rng: &mut R) -> Result<Batch> {
    sample_from(&state.dist, state.round, k, rng)
}

pub fn sample_from<R: Rng + ?Sized>(
    dist: &Distribution,
    round: usize,
    k: usize,
    rng: &mut R,
) -> Result<Batch> {
    if k == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let cdf = cumulative(dist);
    let draws = (0..k)
        .map(|_| categorical_index(&cdf, rng.random::<f64>()))
        .collect();
    Ok(Batch { draws, round })
}

/// Importance-weighted estimate of the per-provider marginal gains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityEstimate {
    pub values: Vec<f64>,
}

/// `values[i] = count_i / (K p_i) * gain_i` for drawn providers, zero elsewhere.
///
/// Only gains of providers present in the batch are read.
pub fn estimate_utilities(
    batch: &Batch,
    marginal_gains: &BTreeMap<usize, f64>,
    dist: &Distribution,
    k: usize,
) -> Result<UtilityEstimate> {
    if batch.draws.len() != k {
        return Err(Error::invalid(format!(
            "batch has {} draws, expected {k}",
            batch.draws.len()
        )));
    }
    let n = dist.len();
    let mut values = vec![0.0; n];
    for (i, count) in batch.multiplicities() {
        if i >= n {
            return Err(Error::invalid(format!("drawn index {i} out of range")));
        }
        let gain = *marginal_gains
            .get(&i)
            .ok_or_else(|| Error::invalid(format!("no marginal gain for drawn provider {i}")))?;
        if !gain.is_finite() {
            return Err(Error::invalid(format!(
                "marginal gain of provider {i} is not finite"
            )));
        }
        let p = dist.probs()[i];
        if p <= 0.0 {
            return Err(Error::Invariant(format!(
                "provider {i} drawn with recorded probability {p}"
            )));
        }
        values[i] = count as f64 / (k as f64 * p) * gain;
    }
    Ok(UtilityEstimate { values })
}

/// Mirror step on the estimate; round advances by one.
pub fn step(state: SamplerState, estimate: &UtilityEstimate) -> Result<SamplerState> {
    let dist = osmd_update(&state.dist, &estimate.values, state.eta)?;
    Ok(SamplerState {
        dist,
        round: state.round + 1,
        eta: state.eta,
    })
}
