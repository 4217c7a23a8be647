//! Shapley-value comparators for revenue allocation.
//!
//! Each training round defines a cooperative game over the providers whose
//! worth `v(S)` is the utility gain of applying the averaged updates of `S`.
//! Per-round values are accumulated over a uniform-sampling trajectory.

use itertools::Itertools;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::MarketConfig;
use crate::market::{
    run_market_with, ModelState, ProviderOracle, RoundView, RunOptions, SamplerKind,
    UtilityFunction,
};
use crate::rng::{substream, Purpose, StreamRng};

/// Largest game solved by subset enumeration.
pub const MAX_EXACT_PLAYERS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyReport {
    pub values: Vec<f64>,
    pub rounds_used: usize,
    /// Zero for the exact method.
    pub permutations_per_round: usize,
}

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// One round's game: `v(S) = U(w + gamma/|S| sum_{i in S} g_i) - U(w)`.
pub struct RoundGame<'a> {
    w: &'a [f64],
    updates: &'a [Vec<f64>],
    gamma: f64,
    utility: &'a dyn UtilityFunction,
    base: f64,
}

impl<'a> RoundGame<'a> {
    pub fn new(
        w: &'a [f64],
        updates: &'a [Vec<f64>],
        gamma: f64,
        utility: &'a dyn UtilityFunction,
    ) -> Result<Self> {
        if updates.iter().any(|u| u.len() != w.len()) {
            return Err(Error::invalid("update dimension differs from the model"));
        }
        Ok(Self {
            w,
            updates,
            gamma,
            utility,
            base: utility.evaluate(w),
        })
    }

    pub fn players(&self) -> usize {
        self.updates.len()
    }

    /// Worth of a coalition given the sum of its members' updates.
    fn worth_of_sum(&self, sum: &[f64], size: usize) -> f64 {
        if size == 0 {
            return 0.0;
        }
        let scale = self.gamma / size as f64;
        let moved: Vec<f64> = self.w.iter().zip(sum).map(|(a, s)| a + scale * s).collect();
        self.utility.evaluate(&moved) - self.base
    }

    pub fn worth(&self, subset: &[usize]) -> f64 {
        let mut sum = vec![0.0; self.w.len()];
        for &i in subset {
            for (s, x) in sum.iter_mut().zip(&self.updates[i]) {
                *s += x;
            }
        }
        self.worth_of_sum(&sum, subset.len())
    }

    /// Marginal contribution of each player along one ordering.
    pub fn marginals_along(&self, order: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; self.players()];
        let mut sum = vec![0.0; self.w.len()];
        let mut prev = 0.0;
        for (pos, &i) in order.iter().enumerate() {
            for (s, x) in sum.iter_mut().zip(&self.updates[i]) {
                *s += x;
            }
            let cur = self.worth_of_sum(&sum, pos + 1);
            out[i] = cur - prev;
            prev = cur;
        }
        out
    }
}

/// `v(S)` for one round; `v(empty) = 0`.
pub fn round_characteristic(
    w: &[f64],
    updates: &[Vec<f64>],
    gamma: f64,
    utility: &dyn UtilityFunction,
    subset: &[usize],
) -> Result<f64> {
    if subset.iter().any(|&i| i >= updates.len()) {
        return Err(Error::invalid("subset index out of range"));
    }
    Ok(RoundGame::new(w, updates, gamma, utility)?.worth(subset))
}

fn exact_values(game: &RoundGame<'_>) -> Result<Vec<f64>> {
    let n = game.players();
    if n > MAX_EXACT_PLAYERS {
        return Err(Error::invalid(format!(
            "exact Shapley refuses {n} players (limit {MAX_EXACT_PLAYERS})"
        )));
    }
    let full = 1usize << n;
    let worth: Vec<f64> = (0..full)
        .map(|mask| {
            let members: Vec<usize> = (0..n).filter(|&i| mask >> i & 1 == 1).collect();
            game.worth(&members)
        })
        .collect();
    // weight(s) = s! (n - s - 1)! / n!
    let mut weight = vec![0.0; n];
    for (s, wgt) in weight.iter_mut().enumerate() {
        let mut v = 1.0 / n as f64;
        // 1 / (n * C(n-1, s))
        for j in 0..s {
            v *= (j + 1) as f64 / (n - 1 - j) as f64;
        }
        *wgt = v;
    }
    Ok((0..n)
        .map(|i| {
            compensated_sum((0..full).filter(|mask| mask >> i & 1 == 0).map(|mask| {
                let s = (mask as u32).count_ones() as usize;
                weight[s] * (worth[mask | 1 << i] - worth[mask])
            }))
        })
        .collect())
}

/// Shapley values of one round by enumerating all `2^n` coalitions.
pub fn exact_round_shapley(
    w: &[f64],
    updates: &[Vec<f64>],
    gamma: f64,
    utility: &dyn UtilityFunction,
) -> Result<Vec<f64>> {
    exact_values(&RoundGame::new(w, updates, gamma, utility)?)
}

/// `n!` when it does not exceed `cap`.
fn factorial_within(n: usize, cap: usize) -> Option<usize> {
    (1..=n).try_fold(1usize, |acc, k| acc.checked_mul(k).filter(|&v| v <= cap))
}

fn permutation_values(game: &RoundGame<'_>, num_perms: usize, rng: &mut StreamRng) -> Vec<f64> {
    let n = game.players();
    let mut acc: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut push = |order: &[usize]| {
        for (i, m) in game.marginals_along(order).into_iter().enumerate() {
            acc[i].push(m);
        }
    };
    // A budget covering every ordering enumerates each exactly once.
    if factorial_within(n, num_perms).is_some() {
        for order in (0..n).permutations(n) {
            push(&order);
        }
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..num_perms {
            order.shuffle(rng);
            push(&order);
        }
    }
    acc.into_iter()
        .map(|v| {
            let len = v.len() as f64;
            compensated_sum(v) / len
        })
        .collect()
}

/// Monte-Carlo Shapley estimate from `num_perms` uniformly random orderings.
///
/// When `num_perms >= n!` every ordering is used once and the result is exact.
pub fn perm_sampling_shapley(
    w: &[f64],
    updates: &[Vec<f64>],
    gamma: f64,
    utility: &dyn UtilityFunction,
    num_perms: usize,
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    if num_perms == 0 {
        return Err(Error::invalid("need at least one permutation"));
    }
    let game = RoundGame::new(w, updates, gamma, utility)?;
    Ok(permutation_values(&game, num_perms, rng))
}

/// Payments proportional to the positive part of the values.
///
/// Returns the payments and whether the split fell back to uniform because
/// no value was positive.
pub fn shapley_revenue(values: &[f64], total_revenue: f64) -> Result<(Vec<f64>, bool)> {
    if values.is_empty() {
        return Err(Error::invalid("no providers"));
    }
    if !(total_revenue > 0.0 && total_revenue.is_finite()) {
        return Err(Error::invalid("revenue must be positive"));
    }
    let pos: Vec<f64> = values.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = pos.iter().sum();
    if total <= 0.0 {
        let even = total_revenue / values.len() as f64;
        return Ok((vec![even; values.len()], true));
    }
    Ok((
        pos.iter().map(|p| total_revenue * p / total).collect(),
        false,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapleyMethod {
    Exact,
    Permutations(usize),
}

/// Accumulate per-round Shapley values along the uniform-sampling trajectory.
///
/// Every round queries all providers, which is outside the market's budget.
pub fn accumulate_shapley(
    config: &MarketConfig,
    oracles: &[Box<dyn ProviderOracle>],
    utility: &dyn UtilityFunction,
    w0: &ModelState,
    method: ShapleyMethod,
) -> Result<ShapleyReport> {
    if let ShapleyMethod::Permutations(0) = method {
        return Err(Error::invalid("need at least one permutation"));
    }
    if method == ShapleyMethod::Exact && config.n > MAX_EXACT_PLAYERS {
        return Err(Error::invalid(format!(
            "exact Shapley refuses {} players (limit {MAX_EXACT_PLAYERS})",
            config.n
        )));
    }
    let mut per_round: Vec<Vec<f64>> = Vec::new();
    let seed = config.seed;
    let mut observe = |view: &RoundView<'_>| -> Result<()> {
        let game = RoundGame::new(view.w, view.updates, view.gamma, utility)?;
        let sv = match method {
            ShapleyMethod::Exact => exact_values(&game)?,
            ShapleyMethod::Permutations(p) => {
                let mut rng = substream(seed, view.round as u64, Purpose::Shapley, 0);
                permutation_values(&game, p, &mut rng)
            }
        };
        per_round.push(sv);
        Ok(())
    };
    run_market_with(
        config,
        oracles,
        utility,
        w0,
        SamplerKind::Uniform,
        RunOptions {
            observer: Some(&mut observe),
            ..Default::default()
        },
    )?;
    let n = config.n;
    let values = (0..n)
        .map(|i| compensated_sum(per_round.iter().map(|r| r[i])))
        .collect();
    Ok(ShapleyReport {
        values,
        rounds_used: per_round.len(),
        permutations_per_round: match method {
            ShapleyMethod::Exact => 0,
            ShapleyMethod::Permutations(p) => p,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn neg_sq(w: &[f64]) -> f64 {
        (-w.iter().map(|x| x * x).sum::<f64>()).exp()
    }

    #[test]
    fn empty_and_singleton_worth() {
        let w = [1.0, 0.5];
        let ups = vec![vec![-1.0, 0.0], vec![0.0, -0.5]];
        let u: &dyn UtilityFunction = &neg_sq;
        assert_eq!(round_characteristic(&w, &ups, 0.3, u, &[]).unwrap(), 0.0);
        let v1 = round_characteristic(&w, &ups, 0.3, u, &[0]).unwrap();
        let direct = neg_sq(&[1.0 - 0.3, 0.5]) - neg_sq(&w);
        assert!((v1 - direct).abs() < 1e-15);
    }

    #[test]
    fn identical_updates_equal_worths() {
        let w = [1.0, 0.5];
        let ups = vec![vec![-1.0, 0.2]; 2];
        let u: &dyn UtilityFunction = &neg_sq;
        let a = round_characteristic(&w, &ups, 0.3, u, &[0]).unwrap();
        let b = round_characteristic(&w, &ups, 0.3, u, &[1]).unwrap();
        let ab = round_characteristic(&w, &ups, 0.3, u, &[0, 1]).unwrap();
        assert_eq!(a, b);
        assert!((a - ab).abs() < 1e-15);
    }

    #[test]
    fn two_player_closed_form() {
        let w = [1.0, 0.5];
        let ups = vec![vec![-1.0, 0.3], vec![0.2, -0.5]];
        let u: &dyn UtilityFunction = &neg_sq;
        let sv = exact_round_shapley(&w, &ups, 0.4, u).unwrap();
        let v = |s: &[usize]| round_characteristic(&w, &ups, 0.4, u, s).unwrap();
        let sv1 = 0.5 * (v(&[0]) + v(&[0, 1]) - v(&[1]));
        assert!((sv[0] - sv1).abs() < 1e-15);
        assert!((sv[0] + sv[1] - v(&[0, 1])).abs() < 1e-15);
    }

    #[test]
    fn symmetric_players_split_evenly() {
        let w = [1.0, 0.5, -0.2];
        let ups = vec![vec![-0.5, 0.1, 0.3]; 4];
        let u: &dyn UtilityFunction = &neg_sq;
        let sv = exact_round_shapley(&w, &ups, 0.2, u).unwrap();
        let full = round_characteristic(&w, &ups, 0.2, u, &[0, 1, 2, 3]).unwrap();
        for v in sv {
            assert!((v - full / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn refuses_large_games() {
        let ups = vec![vec![0.0]; MAX_EXACT_PLAYERS + 1];
        let u: &dyn UtilityFunction = &neg_sq;
        assert!(exact_round_shapley(&[0.0], &ups, 0.1, u).is_err());
    }

    #[test]
    fn revenue_split() {
        assert_eq!(
            shapley_revenue(&[2.0, -1.0, 2.0], 8.0).unwrap(),
            (vec![4.0, 0.0, 4.0], false)
        );
        assert_eq!(
            shapley_revenue(&[1.0, 1.0], 3.0).unwrap(),
            (vec![1.5, 1.5], false)
        );
        assert_eq!(
            shapley_revenue(&[0.0, 0.0, 5.0], 10.0).unwrap(),
            (vec![0.0, 0.0, 10.0], false)
        );
        assert_eq!(
            shapley_revenue(&[-1.0, 0.0], 4.0).unwrap(),
            (vec![2.0, 2.0], true)
        );
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let xs = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(xs), 2.0);
    }
}
