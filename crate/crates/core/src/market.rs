//! The arbiter's training loop.
//!
//! Every round the arbiter draws a batch of providers, broadcasts the current
//! parameters to each distinct drawn provider, charges one access per draw,
//! scores each returned update by its single-step utility gain, feeds the
//! importance-weighted gains to the sampler and applies the averaged update.
//! Providers only ever see `w`; the utility function stays with the arbiter.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clipped_simplex::Distribution;
use crate::error::{Error, Result};
use crate::regret::UtilityTrace;
use crate::rng::{substream, Purpose, StreamRng};
use crate::sampler::{self, Batch, SamplerState};

/// A provider's model update oracle.
///
/// Must be a pure function of `w` and the substream it is handed.
pub trait ProviderOracle: Send + Sync {
    fn update(&self, w: &[f64], rng: &mut StreamRng) -> Vec<f64>;
}

impl<F> ProviderOracle for F
where
    F: Fn(&[f64], &mut StreamRng) -> Vec<f64> + Send + Sync,
{
    fn update(&self, w: &[f64], rng: &mut StreamRng) -> Vec<f64> {
        self(w, rng)
    }
}

/// The consumer's utility, with range in `[0, 1]`.
pub trait UtilityFunction: Send + Sync {
    fn evaluate(&self, w: &[f64]) -> f64;
}

impl<F> UtilityFunction for F
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    fn evaluate(&self, w: &[f64]) -> f64 {
        self(w)
    }
}

/// Optimization stepsizes `gamma^t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepSchedule {
    Constant(f64),
    PerRound(Vec<f64>),
}

impl StepSchedule {
    pub fn at(&self, round: usize) -> f64 {
        match self {
            StepSchedule::Constant(g) => *g,
            StepSchedule::PerRound(v) => v[round],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketConfig {
    pub n: usize,
    /// Total budget in oracle-access units.
    pub budget: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub alpha: f64,
    pub gamma: StepSchedule,
    pub seed: u64,
    /// Switch budget `m` of the regret comparator.
    pub switch_budget: usize,
}

impl MarketConfig {
    /// Number of rounds `floor(B / K)`.
    pub fn rounds(&self) -> usize {
        self.budget.checked_div(self.batch_size).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("n", "need at least one provider"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.budget < self.batch_size {
            return Err(Error::config(
                "budget",
                format!(
                    "budget {} is smaller than batch size {}",
                    self.budget, self.batch_size
                ),
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(
                "alpha",
                format!("{} is outside [0, 1]", self.alpha),
            ));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config(
                "eta",
                format!("{} must be positive", self.eta),
            ));
        }
        let t = self.rounds();
        match &self.gamma {
            StepSchedule::Constant(g) if !(*g > 0.0 && g.is_finite()) => {
                return Err(Error::config("gamma", format!("{g} must be positive")));
            }
            StepSchedule::PerRound(v) if v.len() < t => {
                return Err(Error::config(
                    "gamma",
                    format!("schedule has {} entries, need {t}", v.len()),
                ));
            }
            StepSchedule::PerRound(v) if v.iter().any(|g| !(*g > 0.0 && g.is_finite())) => {
                return Err(Error::config("gamma", "all stepsizes must be positive"));
            }
            _ => {}
        }
        if self.switch_budget == 0 || self.switch_budget > t {
            return Err(Error::config(
                "switch_budget",
                format!("{} is outside [1, {t}]", self.switch_budget),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub w: Vec<f64>,
}

impl ModelState {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("model parameters must be finite"));
        }
        Ok(Self { w })
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }
}

/// Per-provider access counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessLedger {
    pub counts: Vec<u64>,
    pub total: u64,
}

impl AccessLedger {
    pub fn new(n: usize) -> Self {
        Self {
            counts: vec![0; n],
            total: 0,
        }
    }

    /// Charge one access per draw.
    pub fn charge(&mut self, batch: &Batch) {
        for &i in &batch.draws {
            self.counts[i] += 1;
            self.total += 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Osmd,
    Uniform,
}

impl SamplerKind {
    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Osmd => "osmd",
            SamplerKind::Uniform => "uniform",
        }
    }
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "osmd" => Ok(SamplerKind::Osmd),
            "uniform" => Ok(SamplerKind::Uniform),
            other => Err(Error::invalid(format!("unknown sampler `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Sampling distribution used for this round's draws.
    pub probs: Vec<f64>,
    pub batch: Batch,
    /// Observed marginal gains of the distinct drawn providers.
    pub gains: BTreeMap<usize, f64>,
    /// `U(w^t)` before the round's update.
    pub utility: f64,
    pub metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub records: Vec<RoundRecord>,
    pub final_w: Vec<f64>,
    /// Full gain matrix, present only when gains were recorded.
    pub utility_trace: Option<UtilityTrace>,
}

#[derive(Debug, Clone)]
pub struct MarketOutcome {
    pub model: ModelState,
    pub ledger: AccessLedger,
    pub trace: RunTrace,
}

/// Source of each round's batch.
pub trait BatchDrawer {
    fn draw(&mut self, round: usize, dist: &Distribution, k: usize) -> Result<Batch>;
}

/// Default drawer: inverse-CDF draws from the `(seed, round, Draw)` substream.
#[derive(Debug, Clone, Copy)]
pub struct SeededDrawer {
    pub seed: u64,
}

impl BatchDrawer for SeededDrawer {
    fn draw(&mut self, round: usize, dist: &Distribution, k: usize) -> Result<Batch> {
        let mut rng = substream(self.seed, round as u64, Purpose::Draw, 0);
        sampler::sample_from(dist, round, k, &mut rng)
    }
}

/// What an observer sees each round when all providers are queried.
pub struct RoundView<'a> {
    pub round: usize,
    pub w: &'a [f64],
    pub gamma: f64,
    /// Updates of every provider at `w` (instrumentation, not charged).
    pub updates: &'a [Vec<f64>],
}

/// Test metric evaluated on a model.
pub type MetricFn = dyn Fn(&[f64]) -> f64 + Sync;

pub type RoundObserver<'a> = dyn FnMut(&RoundView<'_>) -> Result<()> + 'a;

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Test metric evaluated on `w^t` each round and stored in the trace.
    pub metric: Option<&'a MetricFn>,
    /// Query every oracle each round and keep the full gain matrix.
    pub record_gains: bool,
    /// Called with all providers' updates each round; implies querying every oracle.
    pub observer: Option<&'a mut RoundObserver<'a>>,
    /// Replaces the seeded categorical drawer.
    pub drawer: Option<&'a mut dyn BatchDrawer>,
}

/// `w + (gamma / K) * sum(updates)`, one update per draw.
pub fn apply_updates(w: &ModelState, updates: &[&[f64]], gamma: f64) -> Result<ModelState> {
    if updates.is_empty() {
        return Err(Error::invalid("no updates to apply"));
    }
    let d = w.dim();
    let mut sum = vec![0.0; d];
    for u in updates {
        if u.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: u.len(),
            });
        }
        for (s, x) in sum.iter_mut().zip(u.iter()) {
            *s += x;
        }
    }
    let scale = gamma / updates.len() as f64;
    Ok(ModelState {
        w: w.w.iter().zip(&sum).map(|(a, s)| a + scale * s).collect(),
    })
}

/// Split `total_revenue` in proportion to access counts.
pub fn allocate_revenue(ledger: &AccessLedger, total_revenue: f64) -> Result<Vec<f64>> {
    if ledger.total == 0 {
        return Err(Error::invalid("ledger has no accesses"));
    }
    if !(total_revenue > 0.0 && total_revenue.is_finite()) {
        return Err(Error::invalid("revenue must be positive"));
    }
    let total = ledger.total as f64;
    Ok(ledger
        .counts
        .iter()
        .map(|&c| total_revenue * c as f64 / total)
        .collect())
}

pub fn run_market(
    config: &MarketConfig,
    oracles: &[Box<dyn ProviderOracle>],
    utility: &dyn UtilityFunction,
    w0: &ModelState,
    kind: SamplerKind,
) -> Result<MarketOutcome> {
    run_market_with(config, oracles, utility, w0, kind, RunOptions::default())
}

fn query(
    oracle: &dyn ProviderOracle,
    provider: usize,
    w: &[f64],
    seed: u64,
    round: usize,
) -> Result<Vec<f64>> {
    let mut rng = substream(seed, round as u64, Purpose::Oracle, provider as u64);
    let g = oracle.update(w, &mut rng);
    if g.len() != w.len() {
        return Err(Error::ProviderDimension {
            provider,
            expected: w.len(),
            got: g.len(),
        });
    }
    Ok(g)
}

fn probe(utility: &dyn UtilityFunction, w: &[f64], g: &[f64], gamma: f64, base: f64) -> f64 {
    let moved: Vec<f64> = w.iter().zip(g).map(|(a, b)| a + gamma * b).collect();
    utility.evaluate(&moved) - base
}

pub fn run_market_with(
    config: &MarketConfig,
    oracles: &[Box<dyn ProviderOracle>],
    utility: &dyn UtilityFunction,
    w0: &ModelState,
    kind: SamplerKind,
    mut options: RunOptions<'_>,
) -> Result<MarketOutcome> {
    config.validate()?;
    if oracles.len() != config.n {
        return Err(Error::invalid(format!(
            "{} oracles for {} providers",
            oracles.len(),
            config.n
        )));
    }
    let n = config.n;
    let k = config.batch_size;
    let rounds = config.rounds();
    let query_all = options.record_gains || options.observer.is_some();

    let mut seeded = SeededDrawer { seed: config.seed };
    let mut state = SamplerState::new(n, config.alpha, config.eta)?;
    let mut w = w0.clone();
    let mut ledger = AccessLedger::new(n);
    let mut records = Vec::with_capacity(rounds);
    let mut all_gains = Vec::new();
    let mut realized = Vec::new();

    for t in 0..rounds {
        let gamma = config.gamma.at(t);
        let dist = state.dist.clone();
        let batch = match options.drawer.as_mut() {
            Some(d) => d.draw(t, &dist, k)?,
            None => seeded.draw(t, &dist, k)?,
        };
        if batch.draws.len() != k || batch.draws.iter().any(|&i| i >= n) {
            return Err(Error::Invariant(format!("malformed batch in round {t}")));
        }
        let base = utility.evaluate(&w.w);
        let distinct = batch.distinct();

        let mut updates: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut gains: BTreeMap<usize, f64> = BTreeMap::new();
        if query_all {
            let everything: Vec<Vec<f64>> = (0..n)
                .into_par_iter()
                .map(|i| query(oracles[i].as_ref(), i, &w.w, config.seed, t))
                .collect::<Result<_>>()?;
            if options.record_gains {
                let row: Vec<f64> = everything
                    .par_iter()
                    .map(|g| probe(utility, &w.w, g, gamma, base))
                    .collect();
                realized.push(batch.draws.iter().map(|&i| row[i]).sum::<f64>());
                for &i in &distinct {
                    gains.insert(i, row[i]);
                }
                all_gains.push(row);
            }
            if let Some(obs) = options.observer.as_mut() {
                obs(&RoundView {
                    round: t,
                    w: &w.w,
                    gamma,
                    updates: &everything,
                })?;
            }
            for &i in &distinct {
                updates.insert(i, everything[i].clone());
            }
        } else {
            for &i in &distinct {
                updates.insert(i, query(oracles[i].as_ref(), i, &w.w, config.seed, t)?);
            }
        }
        ledger.charge(&batch);
        for &i in &distinct {
            gains
                .entry(i)
                .or_insert_with(|| probe(utility, &w.w, &updates[&i], gamma, base));
        }

        state = match kind {
            SamplerKind::Osmd => {
                let est = sampler::estimate_utilities(&batch, &gains, &state.dist, k)?;
                sampler::step(state, &est)?
            }
            SamplerKind::Uniform => state.hold(),
        };

        let per_draw: Vec<&[f64]> = batch.draws.iter().map(|i| updates[i].as_slice()).collect();
        let next = apply_updates(&w, &per_draw, gamma)?;
        if next.w.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { round: t });
        }

        records.push(RoundRecord {
            round: t,
            probs: dist.probs().to_vec(),
            metric: options.metric.map(|m| m(&w.w)),
            batch,
            gains,
            utility: base,
        });
        w = next;
    }

    let utility_trace = options.record_gains.then_some(UtilityTrace {
        gains: all_gains,
        realized,
    });
    Ok(MarketOutcome {
        trace: RunTrace {
            records,
            final_w: w.w.clone(),
            utility_trace,
        },
        model: w,
        ledger,
    })
}
