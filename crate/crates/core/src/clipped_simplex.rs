//! Mirror-descent update on the clipped probability simplex.
//!
//! The sampler keeps its distribution inside
//! `{ q : sum(q) = 1, q_i >= alpha / n }`. One update is a multiplicative
//! tilt `p_i * exp(eta * u_i)` followed by the KL (negative-entropy Bregman)
//! projection back onto that set. The projection has a closed form once the
//! tilted weights are sorted: the smallest weights are pinned to the floor
//! `alpha / n` and the rest are rescaled by a common factor. Finding the
//! pivot is a single scan after an `O(n log n)` sort.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cap on `|eta * u_hat_i|` before exponentiation.
pub const EXP_CAP: f64 = 500.0;

/// A probability vector on the clipped simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    probs: Vec<f64>,
    alpha: f64,
}

impl Distribution {
    /// Validating constructor.
    pub fn new(probs: Vec<f64>, alpha: f64) -> Result<Self> {
        let n = probs.len();
        if n == 0 {
            return Err(Error::invalid("distribution must have at least one entry"));
        }
        check_alpha(alpha)?;
        let floor = alpha / n as f64;
        let mut sum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() {
                return Err(Error::invalid(format!("probability {i} is not finite")));
            }
            if p < floor - 1e-12 {
                return Err(Error::invalid(format!(
                    "probability {i} = {p} is below the floor {floor}"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-12 * n as f64 {
            return Err(Error::invalid(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self { probs, alpha })
    }

    pub fn uniform(n: usize, alpha: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("distribution must have at least one entry"));
        }
        check_alpha(alpha)?;
        Ok(Self {
            probs: vec![1.0 / n as f64; n],
            alpha,
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// The per-coordinate lower bound `alpha / n`.
    pub fn floor(&self) -> f64 {
        self.alpha / self.probs.len() as f64
    }

    /// Reorder coordinates: entry `i` of the result is entry `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            probs: perm.iter().map(|&j| self.probs[j]).collect(),
            alpha: self.alpha,
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha = {alpha} is outside [0, 1]")));
    }
    Ok(())
}

/// Unnormalized weights after the multiplicative tilt.
///
/// Entries are finite and nonnegative with at least one strictly positive
/// entry. With `alpha > 0` every entry is strictly positive; with
/// `alpha = 0` a coordinate that has underflowed to zero stays zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltedWeights {
    weights: Vec<f64>,
}

impl TiltedWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("weights must be nonempty"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("weights must be finite and nonnegative"));
        }
        if weights.iter().all(|&w| w == 0.0) {
            return Err(Error::invalid("weights are all zero"));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// `p_i * exp(clamp(eta * u_hat_i, -EXP_CAP, EXP_CAP))`.
pub fn multiplicative_tilt(p: &Distribution, u_hat: &[f64], eta: f64) -> Result<TiltedWeights> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::invalid(format!(
            "eta = {eta} must be positive and finite"
        )));
    }
    if u_hat.len() != p.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            got: u_hat.len(),
        });
    }
    if let Some(i) = u_hat.iter().position(|u| !u.is_finite()) {
        return Err(Error::invalid(format!(
            "utility estimate {i} is not finite"
        )));
    }
    let weights = p
        .probs
        .iter()
        .zip(u_hat)
        .map(|(&pi, &ui)| pi * (eta * ui).clamp(-EXP_CAP, EXP_CAP).exp())
        .collect();
    TiltedWeights::new(weights)
}

/// Result of a projection, with the number of coordinates pinned to the floor.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub dist: Distribution,
    /// Number of coordinates set to exactly `alpha / n` (the pivot rank minus one).
    pub clipped: usize,
}

/// KL projection of positive weights onto the clipped simplex.
pub fn kl_project(y: &TiltedWeights, alpha: f64) -> Result<Distribution> {
    kl_project_detailed(y, alpha).map(|p| p.dist)
}

pub fn kl_project_detailed(y: &TiltedWeights, alpha: f64) -> Result<Projection> {
    check_alpha(alpha)?;
    let w = &y.weights;
    let n = w.len();
    let nf = n as f64;
    let floor = alpha / nf;

    if alpha == 1.0 {
        return Ok(Projection {
            dist: Distribution {
                probs: vec![1.0 / nf; n],
                alpha,
            },
            clipped: n,
        });
    }

    // Stable sort of indices by weight; equal weights keep index order.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| w[a].total_cmp(&w[b]));

    // suffix[r] = sum of sorted weights at ranks r..n
    let mut suffix = vec![0.0; n + 1];
    for r in (0..n).rev() {
        suffix[r] = suffix[r + 1] + w[order[r]];
    }

    // First rank r (0-based) with y_(r) * (1 - r*alpha/n) > (alpha/n) * suffix[r].
    // The condition flips once; if rounding keeps it false everywhere, only
    // the largest weight remains above the floor.
    let pivot = (0..n)
        .find(|&r| w[order[r]] * (1.0 - r as f64 * floor) > floor * suffix[r])
        .unwrap_or(n - 1);

    let scale = (1.0 - pivot as f64 * floor) / suffix[pivot];
    let mut probs = vec![0.0; n];
    for (rank, &i) in order.iter().enumerate() {
        probs[i] = if rank < pivot { floor } else { scale * w[i] };
    }
    debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12 * nf);

    Ok(Projection {
        dist: Distribution { probs, alpha },
        clipped: pivot,
    })
}

/// One mirror-descent step: tilt by `eta * u_hat`, then project.
pub fn osmd_update(p: &Distribution, u_hat: &[f64], eta: f64) -> Result<Distribution> {
    let tilted = multiplicative_tilt(p, u_hat, eta)?;
    // A feasible point is its own projection; renormalizing would only add
    // rounding drift.
    if tilted.weights == p.probs {
        return Ok(p.clone());
    }
    kl_project(&tilted, p.alpha)
}

/// Bregman divergence of the unnormalized negative entropy,
/// `sum q log(q/p) - q + p`, with `0 log 0 = 0`.
pub fn bregman_divergence(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .map(|(&qi, &pi)| {
            let ent = if qi > 0.0 { qi * (qi / pi).ln() } else { 0.0 };
            ent - qi + pi
        })
        .sum()
}

/// The mirror-step objective `-eta <q, u_hat> + D(q || p)`.
pub fn osmd_objective(q: &[f64], p: &[f64], u_hat: &[f64], eta: f64) -> f64 {
    let lin: f64 = q.iter().zip(u_hat).map(|(a, b)| a * b).sum();
    -eta * lin + bregman_divergence(q, p)
}
