//! Budget-allocation regret against a switching comparator.
//!
//! The comparator may change its chosen provider at most `m - 1` times over
//! `T` rounds and spends all `K` draws of a round on that provider. Its best
//! payoff is found by dynamic programming over (round, provider, switches used).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// True per-round marginal gains of every provider (instrumentation only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityTrace {
    /// `gains[t][i]`, a `T x n` matrix.
    pub gains: Vec<Vec<f64>>,
    /// Realized cumulative marginal gain of the drawn batch in each round.
    pub realized: Vec<f64>,
}

impl UtilityTrace {
    pub fn rounds(&self) -> usize {
        self.gains.len()
    }

    pub fn providers(&self) -> usize {
        self.gains.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretReport {
    pub oracle_value: f64,
    pub realized_total: f64,
    pub regret: f64,
    /// Right-hand side of the regret bound; `None` (JSON null) when infinite.
    #[serde(with = "finite_or_null")]
    pub bound: f64,
    pub avg_regret: f64,
}

mod finite_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Best comparator payoff `K * max_{a in Gamma_m} sum_t gains[t][a_t]`,
/// with one optimal path.
///
/// Ties go to the lowest provider index at every step.
pub fn oracle_value(trace: &UtilityTrace, m: usize, k: usize) -> Result<(f64, Vec<usize>)> {
    let t_len = trace.rounds();
    let n = trace.providers();
    if t_len == 0 || n == 0 {
        return Err(Error::invalid("empty utility trace"));
    }
    if trace.gains.iter().any(|row| row.len() != n) {
        return Err(Error::invalid("ragged gain matrix"));
    }
    if m == 0 || m > t_len {
        return Err(Error::invalid(format!(
            "switch budget {m} outside [1, {t_len}]"
        )));
    }
    let layers = m; // switches used: 0..m-1
    let idx = |s: usize, i: usize| s * n + i;

    // values[t][s*n+i]: best payoff over rounds t.. given action i at t with
    // s switches used; cont[t] holds the same minus this round's gain.
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(t_len);
    let mut conts: Vec<Vec<f64>> = Vec::with_capacity(t_len);
    let mut next = vec![0.0; layers * n];
    for s in 0..layers {
        for i in 0..n {
            next[idx(s, i)] = trace.gains[t_len - 1][i];
        }
    }
    values.push(next.clone());
    conts.push(vec![0.0; layers * n]);
    for t in (0..t_len - 1).rev() {
        let mut cur = vec![0.0; layers * n];
        let mut cont = vec![0.0; layers * n];
        for s in 0..layers {
            let switch_best =
                (s + 1 < layers).then(|| top_two(&next[idx(s + 1, 0)..idx(s + 1, 0) + n]));
            for i in 0..n {
                let stay = next[idx(s, i)];
                let best = match switch_best {
                    Some(tt) => stay.max(tt.best_excluding(i).1),
                    None => stay,
                };
                cont[idx(s, i)] = best;
                cur[idx(s, i)] = trace.gains[t][i] + best;
            }
        }
        values.push(cur.clone());
        conts.push(cont);
        next = cur;
    }
    values.reverse();
    conts.reverse();

    // Reconstruct: start at the lowest-index maximizer, then at each step take
    // the lowest-index action that attains the stored continuation value.
    let first = &values[0][0..n];
    let mut a = argmax_lowest(first);
    let mut s = 0;
    let value = first[a];
    let mut path = Vec::with_capacity(t_len);
    path.push(a);
    for t in 0..t_len - 1 {
        let nx = &values[t + 1];
        let target = conts[t][idx(s, a)];
        let mut choice: Option<(usize, usize)> = (nx[idx(s, a)] == target).then_some((a, s));
        if s + 1 < layers {
            let row = &nx[idx(s + 1, 0)..idx(s + 1, 0) + n];
            if let Some(j) = (0..n).find(|&j| j != a && row[j] == target) {
                if choice.is_none_or(|(c, _)| j < c) {
                    choice = Some((j, s + 1));
                }
            }
        }
        let (na, ns) =
            choice.ok_or_else(|| Error::Invariant("regret path reconstruction".into()))?;
        a = na;
        s = ns;
        path.push(a);
    }
    Ok((k as f64 * value, path))
}

#[derive(Clone, Copy)]
struct TopTwo {
    first: (usize, f64),
    second: (usize, f64),
}

impl TopTwo {
    fn best_excluding(&self, i: usize) -> (usize, f64) {
        if self.first.0 == i {
            self.second
        } else {
            self.first
        }
    }
}

fn top_two(row: &[f64]) -> TopTwo {
    let mut first = (usize::MAX, f64::NEG_INFINITY);
    let mut second = (usize::MAX, f64::NEG_INFINITY);
    for (j, &v) in row.iter().enumerate() {
        if v > first.1 {
            second = first;
            first = (j, v);
        } else if v > second.1 {
            second = (j, v);
        }
    }
    TopTwo { first, second }
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// `alpha * B + eta * n * B / 2 + m * K * ln(n / alpha) / eta`.
///
/// Returns `+inf` when `alpha = 0`.
pub fn theorem_bound(alpha: f64, eta: f64, n: usize, budget: usize, m: usize, k: usize) -> f64 {
    if alpha <= 0.0 {
        return f64::INFINITY;
    }
    let b = budget as f64;
    let nf = n as f64;
    alpha * b + eta * nf * b / 2.0 + m as f64 * k as f64 * (nf / alpha).ln() / eta
}

/// Tuning `alpha = sqrt(n/B)`, `eta = sqrt(m ln(nB) / (nT))` with `T = B/K`.
pub fn bound_tuning(n: usize, budget: usize, k: usize, m: usize) -> (f64, f64) {
    let nf = n as f64;
    let b = budget as f64;
    let t = (budget / k) as f64;
    let alpha = (nf / b).sqrt().min(1.0);
    let eta = (m as f64 * (nf * b).ln() / (nf * t)).sqrt();
    (alpha, eta)
}

/// Single-run realized regret with the bound attached.
pub fn compute_regret(
    trace: &UtilityTrace,
    m: usize,
    k: usize,
    alpha: f64,
    eta: f64,
) -> Result<RegretReport> {
    if trace.realized.len() != trace.rounds() {
        return Err(Error::invalid("realized gains do not cover every round"));
    }
    let (oracle, _) = oracle_value(trace, m, k)?;
    let realized_total: f64 = trace.realized.iter().sum();
    let regret = oracle - realized_total;
    let budget = k * trace.rounds();
    Ok(RegretReport {
        oracle_value: oracle,
        realized_total,
        regret,
        bound: theorem_bound(alpha, eta, trace.providers(), budget, m, k),
        avg_regret: regret / budget as f64,
    })
}
