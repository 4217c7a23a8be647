//! Synthetic provider environments.
//!
//! Two families: a mixture linear regression where only providers sharing the
//! consumer's latent group carry the right signal, and a Gaussian-cluster
//! classification task where providers differ by their fraction of corrupted
//! labels. Each comes with gradient and local-SGD provider oracles and a
//! hold-out loss turned into a utility in `[0, 1]`.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution as _, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{ProviderOracle, UtilityFunction};
use crate::rng::{substream, Purpose, StreamRng};

/// A dataset with a differentiable mean loss.
pub trait Objective: Send + Sync {
    /// Length of the parameter vector.
    fn param_dim(&self) -> usize;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Mean loss over all samples.
    fn loss(&self, w: &[f64]) -> f64;
    /// Add the sum of per-sample loss gradients over `rows` into `out`.
    fn add_grad(&self, w: &[f64], rows: &[usize], out: &mut [f64]);

    /// Gradient of the mean loss.
    fn grad(&self, w: &[f64]) -> Vec<f64> {
        let rows: Vec<usize> = (0..self.len()).collect();
        let mut g = vec![0.0; self.param_dim()];
        self.add_grad(w, &rows, &mut g);
        let m = self.len() as f64;
        g.iter_mut().for_each(|x| *x /= m);
        g
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionData {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl Objective for RegressionData {
    fn param_dim(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    fn len(&self) -> usize {
        self.y.len()
    }

    /// `(1 / 2m) sum (y - <w, x>)^2`
    fn loss(&self, w: &[f64]) -> f64 {
        let s: f64 = self
            .x
            .iter()
            .zip(&self.y)
            .map(|(x, y)| (y - dot(w, x)).powi(2))
            .sum();
        s / (2.0 * self.len() as f64)
    }

    fn add_grad(&self, w: &[f64], rows: &[usize], out: &mut [f64]) {
        for &j in rows {
            let x = &self.x[j];
            let r = dot(w, x) - self.y[j];
            for (o, xi) in out.iter_mut().zip(x) {
                *o += r * xi;
            }
        }
    }
}

/// Softmax regression data. Parameters are laid out class-major,
/// `d` weights followed by one bias per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationData {
    pub classes: usize,
    pub x: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl ClassificationData {
    fn feature_dim(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    fn logits(&self, w: &[f64], x: &[f64]) -> Vec<f64> {
        let stride = x.len() + 1;
        (0..self.classes)
            .map(|c| {
                let row = &w[c * stride..(c + 1) * stride];
                dot(&row[..x.len()], x) + row[x.len()]
            })
            .collect()
    }

    /// Fraction of samples whose arg-max logit equals the label.
    pub fn accuracy(&self, w: &[f64]) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        let hits = self
            .x
            .iter()
            .zip(&self.labels)
            .filter(|(x, &y)| {
                let z = self.logits(w, x);
                let mut best = 0;
                for c in 1..z.len() {
                    if z[c] > z[best] {
                        best = c;
                    }
                }
                best == y
            })
            .count();
        hits as f64 / self.labels.len() as f64
    }
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

impl Objective for ClassificationData {
    fn param_dim(&self) -> usize {
        self.classes * (self.feature_dim() + 1)
    }

    fn len(&self) -> usize {
        self.labels.len()
    }

    /// Mean cross-entropy.
    fn loss(&self, w: &[f64]) -> f64 {
        let s: f64 = self
            .x
            .iter()
            .zip(&self.labels)
            .map(|(x, &y)| -log_softmax(&self.logits(w, x))[y])
            .sum();
        s / self.len() as f64
    }

    fn add_grad(&self, w: &[f64], rows: &[usize], out: &mut [f64]) {
        let d = self.feature_dim();
        let stride = d + 1;
        for &j in rows {
            let x = &self.x[j];
            let lp = log_softmax(&self.logits(w, x));
            for (c, l) in lp.iter().enumerate() {
                let coef = l.exp() - if c == self.labels[j] { 1.0 } else { 0.0 };
                let g = &mut out[c * stride..(c + 1) * stride];
                for (gi, xi) in g[..d].iter_mut().zip(x) {
                    *gi += coef * xi;
                }
                g[d] += coef;
            }
        }
    }
}

/// `O(w) = -grad l(w, D)` for the mean loss.
#[derive(Debug, Clone)]
pub struct GradientOracle<D> {
    pub data: D,
}

pub fn gradient_oracle<D: Objective>(data: D) -> Result<GradientOracle<D>> {
    if data.is_empty() {
        return Err(Error::invalid("gradient oracle needs a nonempty dataset"));
    }
    Ok(GradientOracle { data })
}

impl<D: Objective> ProviderOracle for GradientOracle<D> {
    fn update(&self, w: &[f64], _rng: &mut StreamRng) -> Vec<f64> {
        let mut g = self.data.grad(w);
        g.iter_mut().for_each(|x| *x = -*x);
        g
    }
}

/// `O(w) = w+ - w`, where `w+` comes from mini-batch SGD over a shuffled
/// pass (or several) through the data.
#[derive(Debug, Clone)]
pub struct LocalSgdOracle<D> {
    pub data: D,
    pub local_lr: f64,
    pub minibatch_size: usize,
    pub epochs: usize,
}

pub fn local_sgd_oracle<D: Objective>(
    data: D,
    local_lr: f64,
    minibatch_size: usize,
    epochs: usize,
) -> Result<LocalSgdOracle<D>> {
    if data.is_empty() {
        return Err(Error::invalid("local SGD oracle needs a nonempty dataset"));
    }
    if minibatch_size == 0 || minibatch_size > data.len() {
        return Err(Error::invalid(format!(
            "minibatch size {minibatch_size} outside [1, {}]",
            data.len()
        )));
    }
    if !(local_lr >= 0.0 && local_lr.is_finite()) {
        return Err(Error::invalid("local learning rate must be nonnegative"));
    }
    Ok(LocalSgdOracle {
        data,
        local_lr,
        minibatch_size,
        epochs: epochs.max(1),
    })
}

impl<D: Objective> ProviderOracle for LocalSgdOracle<D> {
    fn update(&self, w: &[f64], rng: &mut StreamRng) -> Vec<f64> {
        let mut cur = w.to_vec();
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        let mut g = vec![0.0; w.len()];
        for _ in 0..self.epochs {
            order.shuffle(rng);
            for chunk in order.chunks(self.minibatch_size) {
                g.iter_mut().for_each(|x| *x = 0.0);
                self.data.add_grad(&cur, chunk, &mut g);
                let scale = self.local_lr / chunk.len() as f64;
                for (c, gi) in cur.iter_mut().zip(&g) {
                    *c -= scale * gi;
                }
            }
        }
        cur.iter().zip(w).map(|(a, b)| a - b).collect()
    }
}

/// Map from hold-out loss to a utility in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Squash {
    /// `exp(-loss / tau)`
    Exp { tau: f64 },
    /// `clamp(1 - loss / scale, 0, 1)`
    Affine { scale: f64 },
}

impl Squash {
    pub fn apply(&self, loss: f64) -> f64 {
        match *self {
            Squash::Exp { tau } => (-loss / tau).exp(),
            Squash::Affine { scale } => (1.0 - loss / scale).clamp(0.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = match *self {
            Squash::Exp { tau } => tau,
            Squash::Affine { scale } => scale,
        };
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(Error::invalid("squash temperature/scale must be positive"))
        }
    }
}

/// Utility of a parameter vector: squashed hold-out loss.
#[derive(Debug, Clone)]
pub struct LossUtility<D> {
    pub holdout: D,
    pub squash: Squash,
}

impl<D: Objective> UtilityFunction for LossUtility<D> {
    fn evaluate(&self, w: &[f64]) -> f64 {
        self.squash.apply(self.holdout.loss(w))
    }
}

pub fn regression_utility(
    holdout: RegressionData,
    tau: f64,
) -> Result<LossUtility<RegressionData>> {
    let squash = Squash::Exp { tau };
    squash.validate()?;
    Ok(LossUtility { holdout, squash })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub n: usize,
    pub d: usize,
    pub samples_per_provider: usize,
    pub holdout_size: usize,
    pub groups: usize,
    /// Zero-based group of the consumer.
    pub consumer_group: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetadata {
    pub kind: String,
    pub seed: u64,
    pub n: usize,
    pub d: usize,
    pub groups: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionScenario {
    pub metadata: ScenarioMetadata,
    /// `datasets[0]` is the consumer's hold-out set, `datasets[i]` provider `i - 1`.
    pub datasets: Vec<RegressionData>,
    /// Latent group of each dataset, aligned with `datasets`.
    pub group_labels: Vec<usize>,
    /// One true parameter per group.
    pub true_params: Vec<Vec<f64>>,
}

impl RegressionScenario {
    pub fn holdout(&self) -> &RegressionData {
        &self.datasets[0]
    }

    pub fn providers(&self) -> &[RegressionData] {
        &self.datasets[1..]
    }

    pub fn provider_groups(&self) -> &[usize] {
        &self.group_labels[1..]
    }

    pub fn consumer_group(&self) -> usize {
        self.group_labels[0]
    }

    /// Parameters of the consumer's group.
    pub fn consumer_params(&self) -> &[f64] {
        &self.true_params[self.consumer_group()]
    }

    /// `||w - w_consumer||`.
    pub fn estimation_error(&self, w: &[f64]) -> f64 {
        w.iter()
            .zip(self.consumer_params())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn normal_row(rng: &mut StreamRng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// Mixture linear regression: group parameters `w_k` with entries
/// `U[0.5 k, 0.5 (k + 1)]` (zero-based `k`), N(0, 1) features and N(0, 0.5^2) noise.
pub fn gen_mixture_regression(params: &MixtureParams) -> Result<RegressionScenario> {
    let MixtureParams {
        n,
        d,
        samples_per_provider,
        holdout_size,
        groups,
        consumer_group,
        seed,
    } = *params;
    if n == 0 || d == 0 || samples_per_provider == 0 || holdout_size == 0 {
        return Err(Error::invalid("mixture regression sizes must be positive"));
    }
    if groups == 0 || consumer_group >= groups {
        return Err(Error::invalid(format!(
            "consumer group {consumer_group} outside [0, {groups})"
        )));
    }
    let mut rng = substream(seed, 0, Purpose::Scenario, 0);
    let true_params: Vec<Vec<f64>> = (0..groups)
        .map(|k| {
            let lo = 0.5 * k as f64;
            let u = Uniform::new(lo, lo + 0.5).expect("valid range");
            (0..d).map(|_| u.sample(&mut rng)).collect()
        })
        .collect();
    let mut group_labels = vec![consumer_group];
    group_labels.extend((0..n).map(|_| rng.random_range(0..groups)));

    let datasets = group_labels
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            let m = if i == 0 {
                holdout_size
            } else {
                samples_per_provider
            };
            let mut x = Vec::with_capacity(m);
            let mut y = Vec::with_capacity(m);
            for _ in 0..m {
                let row = normal_row(&mut rng, d);
                let eps: f64 = StandardNormal.sample(&mut rng);
                y.push(dot(&true_params[z], &row) + 0.5 * eps);
                x.push(row);
            }
            RegressionData { x, y }
        })
        .collect();

    Ok(RegressionScenario {
        metadata: ScenarioMetadata {
            kind: "mixture_regression".into(),
            seed,
            n,
            d,
            groups: Some(groups),
        },
        datasets,
        group_labels,
        true_params,
    })
}

/// Corruption rates by provider decile: 0, 20, 50, then 90 percent.
pub fn default_beta_tiers(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| match i * 10 / n.max(1) {
            0 => 0.0,
            1 => 20.0,
            2 => 50.0,
            _ => 90.0,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationParams {
    pub n: usize,
    pub per_provider: usize,
    pub d: usize,
    pub classes: usize,
    /// Percent of corrupted labels per provider.
    pub beta: Vec<f64>,
    pub holdout_size: usize,
    pub test_size: usize,
    /// Standard deviation of the class-mean entries.
    pub separation: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationScenario {
    pub metadata: ScenarioMetadata,
    pub providers: Vec<ClassificationData>,
    /// Labels before corruption, aligned with `providers`.
    pub clean_labels: Vec<Vec<usize>>,
    pub beta: Vec<f64>,
    pub holdout: ClassificationData,
    pub test: ClassificationData,
    pub class_means: Vec<Vec<f64>>,
}

impl ClassificationScenario {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// `floor(beta * m / 100)`
pub fn corrupted_count(beta: f64, m: usize) -> usize {
    // beta * m is an exact integer for integral beta; the epsilon absorbs the
    // division rounding in that case.
    ((beta * m as f64) / 100.0 + 1e-9).floor() as usize
}

pub fn gen_corrupted_classification(
    params: &ClassificationParams,
) -> Result<ClassificationScenario> {
    let p = params;
    if p.beta.len() != p.n {
        return Err(Error::invalid(format!(
            "beta schedule has {} entries for {} providers",
            p.beta.len(),
            p.n
        )));
    }
    if p.beta.iter().any(|b| !(0.0..=100.0).contains(b)) {
        return Err(Error::invalid("beta entries must lie in [0, 100]"));
    }
    if p.classes < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    if p.n == 0 || p.d == 0 || p.per_provider == 0 || p.holdout_size == 0 || p.test_size == 0 {
        return Err(Error::invalid("classification sizes must be positive"));
    }
    let mut rng = substream(p.seed, 0, Purpose::Scenario, 1);
    let class_means: Vec<Vec<f64>> = (0..p.classes)
        .map(|_| {
            normal_row(&mut rng, p.d)
                .into_iter()
                .map(|v| v * p.separation)
                .collect()
        })
        .collect();

    let draw_set = |m: usize, rng: &mut StreamRng| -> ClassificationData {
        let mut x = Vec::with_capacity(m);
        let mut labels = Vec::with_capacity(m);
        for _ in 0..m {
            let c = rng.random_range(0..p.classes);
            let noise = normal_row(rng, p.d);
            x.push(
                class_means[c]
                    .iter()
                    .zip(noise)
                    .map(|(a, b)| a + b)
                    .collect(),
            );
            labels.push(c);
        }
        ClassificationData {
            classes: p.classes,
            x,
            labels,
        }
    };

    let mut providers = Vec::with_capacity(p.n);
    let mut clean_labels = Vec::with_capacity(p.n);
    for &beta in &p.beta {
        let mut data = draw_set(p.per_provider, &mut rng);
        let clean = data.labels.clone();
        let bad = corrupted_count(beta, p.per_provider);
        for j in index::sample(&mut rng, p.per_provider, bad) {
            let shift = 1 + rng.random_range(0..p.classes - 1);
            data.labels[j] = (clean[j] + shift) % p.classes;
        }
        providers.push(data);
        clean_labels.push(clean);
    }
    let holdout = draw_set(p.holdout_size, &mut rng);
    let test = draw_set(p.test_size, &mut rng);

    Ok(ClassificationScenario {
        metadata: ScenarioMetadata {
            kind: "corrupted_classification".into(),
            seed: p.seed,
            n: p.n,
            d: p.d,
            groups: None,
        },
        providers,
        clean_labels,
        beta: p.beta.clone(),
        holdout,
        test,
        class_means,
    })
}
