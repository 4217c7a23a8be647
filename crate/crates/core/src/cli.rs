//! Config-driven experiment runner.
//!
//! A run is a grid of (sampler, seed) jobs over one scenario family. Every
//! job builds its scenario from its seed, runs the market and renders its
//! artifacts in memory; nothing touches the output directory until every job
//! has succeeded, and each file is written to a temporary name first and then
//! renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::baselines::{accumulate_shapley, shapley_revenue, ShapleyMethod, ShapleyReport};
use crate::error::{Error, Result};
use crate::market::{
    allocate_revenue, run_market_with, MarketConfig, MetricFn, ModelState, ProviderOracle,
    RunOptions, SamplerKind, StepSchedule, UtilityFunction,
};
use crate::regret::{compute_regret, RegretReport};
use crate::scenarios::{
    gen_corrupted_classification, gen_mixture_regression, gradient_oracle, local_sgd_oracle,
    default_beta_tiers, ClassificationParams, LossUtility, MixtureParams, Objective, Squash,
};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "OSMD_MARKET_OUT";
pub const DEFAULT_OUT: &str = "osmd-out";
pub const TRACE_HEADER: &str = "# osmd-market trace v1";
pub const AGGREGATE_HEADER: &str = "# osmd-market aggregate v1";
pub const SUMMARY_SCHEMA: &str = "osmd-market summary v1";

/// Scenario family and its generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioSpec {
    MixtureRegression {
        n: usize,
        d: usize,
        samples_per_provider: usize,
        holdout_size: usize,
        groups: usize,
        /// Zero-based consumer group.
        consumer_group: usize,
        squash: Squash,
        /// Every coordinate of the starting parameter.
        init: f64,
    },
    CorruptedClassification {
        n: usize,
        per_provider: usize,
        d: usize,
        classes: usize,
        /// Percent corrupted per provider; decile tiers when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        beta: Option<Vec<f64>>,
        holdout_size: usize,
        test_size: usize,
        separation: f64,
        squash: Squash,
        local_lr: f64,
        minibatch_size: usize,
        epochs: usize,
    },
}

impl ScenarioSpec {
    pub fn providers(&self) -> usize {
        match self {
            ScenarioSpec::MixtureRegression { n, .. } => *n,
            ScenarioSpec::CorruptedClassification { n, .. } => *n,
        }
    }

    fn metric_name(&self) -> &'static str {
        match self {
            ScenarioSpec::MixtureRegression { .. } => "estimation_error",
            ScenarioSpec::CorruptedClassification { .. } => "test_accuracy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSpec {
    /// `K`; defaults to `max(1, round(0.1 n))`.
    #[serde(default)]
    pub batch_size: Option<usize>,
    pub rounds: usize,
    pub eta: f64,
    pub alpha: f64,
    pub gamma: StepSchedule,
    #[serde(default = "one")]
    pub switch_budget: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSpec {
    #[serde(default)]
    pub regret: bool,
    /// Shapley permutations per round; 0 means exact enumeration.
    #[serde(default)]
    pub shapley: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub scenario: ScenarioSpec,
    pub market: MarketSpec,
    #[serde(default = "default_samplers")]
    pub samplers: Vec<SamplerKind>,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub analysis: AnalysisSpec,
    #[serde(default = "unit_pool")]
    pub revenue_pool: f64,
}

fn default_samplers() -> Vec<SamplerKind> {
    vec![SamplerKind::Osmd]
}

fn unit_pool() -> f64 {
    1.0
}

impl ExperimentConfig {
    pub fn batch_size(&self) -> usize {
        self.market
            .batch_size
            .unwrap_or_else(|| default_batch(self.scenario.providers()))
    }

    /// Market configuration for one seed.
    pub fn market_config(&self, seed: u64) -> MarketConfig {
        let k = self.batch_size();
        MarketConfig {
            n: self.scenario.providers(),
            budget: k * self.market.rounds,
            batch_size: k,
            eta: self.market.eta,
            alpha: self.market.alpha,
            gamma: self.market.gamma.clone(),
            seed,
            switch_budget: self.market.switch_budget,
        }
    }
}

fn default_batch(n: usize) -> usize {
    ((n as f64 * 0.1).round() as usize).max(1)
}

/// Names accepted in the `preset` field.
pub const PRESETS: &[&str] = &[
    "paper-mixture-a2",
    "desk-mixture",
    "reference-classification",
    "regret-tuning",
];

fn desk_mixture_scenario() -> Value {
    json!({
        "kind": "mixture_regression",
        "n": 40,
        "d": 50,
        "samples_per_provider": 25,
        "holdout_size": 200,
        "groups": 4,
        "consumer_group": 0,
        "squash": {"kind": "exp", "tau": 10.0},
        "init": -1.0
    })
}

/// Partial config a preset contributes; user keys override it.
pub fn preset(name: &str) -> Result<Value> {
    let v = match name {
        "paper-mixture-a2" => json!({
            "scenario": desk_mixture_scenario(),
            "market": {"rounds": 1500, "eta": 0.001, "alpha": 0.01, "gamma": 0.01},
            "samplers": ["osmd", "uniform"]
        }),
        "desk-mixture" => json!({
            "scenario": desk_mixture_scenario(),
            "market": {"rounds": 1500, "eta": 1.0, "alpha": 0.01, "gamma": 0.01},
            "samplers": ["osmd", "uniform"]
        }),
        "reference-classification" => json!({
            "scenario": {
                "kind": "corrupted_classification",
                "n": 20,
                "per_provider": 40,
                "d": 10,
                "classes": 4,
                "holdout_size": 200,
                "test_size": 1000,
                "separation": 1.0,
                "squash": {"kind": "exp", "tau": 1.0},
                "local_lr": 0.1,
                "minibatch_size": 10,
                "epochs": 1
            },
            "market": {"rounds": 500, "eta": 1.0, "alpha": 0.01, "gamma": 0.1},
            "samplers": ["osmd", "uniform"]
        }),
        "regret-tuning" => {
            let (alpha, eta) = crate::regret::bound_tuning(40, 6000, 4, 2);
            json!({
                "scenario": desk_mixture_scenario(),
                "market": {
                    "batch_size": 4,
                    "rounds": 1500,
                    "eta": eta,
                    "alpha": alpha,
                    "gamma": 0.01,
                    "switch_budget": 2
                },
                "samplers": ["osmd"],
                "analysis": {"regret": true}
            })
        }
        other => {
            return Err(Error::config(
                "preset",
                format!("unknown preset `{other}`; known: {}", PRESETS.join(", ")),
            ))
        }
    };
    Ok(v)
}

/// Recursive object merge; a differing scenario `kind` replaces the block.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if !(k == "scenario" && kind_differs(slot, &v)) => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn kind_differs(a: &Value, b: &Value) -> bool {
    match (a.get("kind"), b.get("kind")) {
        (Some(x), Some(y)) => x != y,
        _ => false,
    }
}

/// Parse, resolve the preset and validate config text.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let user: Value = serde_json::from_str(text).map_err(|e| Error::ConfigParse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if !user.is_object() {
        return Err(Error::config("<root>", "config must be a JSON object"));
    }
    let mut merged = match user.get("preset") {
        None | Some(Value::Null) => json!({}),
        Some(Value::String(name)) => preset(name)?,
        Some(_) => return Err(Error::config("preset", "must be a string")),
    };
    merge(&mut merged, user);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(merged).map_err(|e| {
        let path = e.path().to_string();
        let message = e.into_inner().to_string();
        let missing = message
            .strip_prefix("missing field `")
            .and_then(|s| s.split('`').next());
        let field = match (path.as_str(), missing) {
            (".", Some(f)) => f.to_string(),
            (_, Some(f)) => format!("{path}.{f}"),
            (".", None) => "<root>".to_string(),
            _ => path,
        };
        Error::config(field, message)
    })?;
    validate(&cfg)?;
    Ok(cfg)
}

/// Read and validate a config file.
pub fn validate_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    parse_config(&text)
}

/// Check every invariant of a resolved config; no compute happens here.
pub fn validate(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.seeds.is_empty() {
        return Err(Error::config("seeds", "seed list is empty"));
    }
    if cfg.samplers.is_empty() {
        return Err(Error::config("samplers", "sampler list is empty"));
    }
    for (i, s) in cfg.samplers.iter().enumerate() {
        if cfg.samplers[..i].contains(s) {
            return Err(Error::config(
                "samplers",
                format!("`{}` listed twice", s.name()),
            ));
        }
    }
    for (i, s) in cfg.seeds.iter().enumerate() {
        if cfg.seeds[..i].contains(s) {
            return Err(Error::config("seeds", format!("seed {s} listed twice")));
        }
    }
    if !(cfg.revenue_pool > 0.0 && cfg.revenue_pool.is_finite()) {
        return Err(Error::config("revenue_pool", "must be positive and finite"));
    }
    if cfg.market.rounds == 0 {
        return Err(Error::config("market.rounds", "must be at least 1"));
    }
    if cfg.market.batch_size == Some(0) {
        return Err(Error::config("market.batch_size", "must be at least 1"));
    }
    cfg.market_config(0).validate().map_err(|e| match e {
        Error::Config { field, message } => Error::Config {
            field: format!("market.{field}"),
            message,
        },
        other => other,
    })?;
    validate_scenario(&cfg.scenario)?;
    if let Some(p) = cfg.analysis.shapley {
        let n = cfg.scenario.providers();
        if p == 0 && n > crate::baselines::MAX_EXACT_PLAYERS {
            return Err(Error::config(
                "analysis.shapley",
                format!(
                    "exact Shapley needs n <= {}, got {n}",
                    crate::baselines::MAX_EXACT_PLAYERS
                ),
            ));
        }
    }
    Ok(())
}

fn positive(field: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(Error::config(field, "must be at least 1"))
    } else {
        Ok(())
    }
}

fn validate_scenario(s: &ScenarioSpec) -> Result<()> {
    match s {
        ScenarioSpec::MixtureRegression {
            n,
            d,
            samples_per_provider,
            holdout_size,
            groups,
            consumer_group,
            squash,
            init,
        } => {
            positive("scenario.n", *n)?;
            positive("scenario.d", *d)?;
            positive("scenario.samples_per_provider", *samples_per_provider)?;
            positive("scenario.holdout_size", *holdout_size)?;
            positive("scenario.groups", *groups)?;
            if consumer_group >= groups {
                return Err(Error::config(
                    "scenario.consumer_group",
                    format!("{consumer_group} is outside [0, {groups})"),
                ));
            }
            if !init.is_finite() {
                return Err(Error::config("scenario.init", "must be finite"));
            }
            squash
                .validate()
                .map_err(|e| Error::config("scenario.squash", e.to_string()))
        }
        ScenarioSpec::CorruptedClassification {
            n,
            per_provider,
            d,
            classes,
            beta,
            holdout_size,
            test_size,
            separation,
            squash,
            local_lr,
            minibatch_size,
            epochs,
        } => {
            positive("scenario.n", *n)?;
            positive("scenario.per_provider", *per_provider)?;
            positive("scenario.d", *d)?;
            positive("scenario.holdout_size", *holdout_size)?;
            positive("scenario.test_size", *test_size)?;
            positive("scenario.epochs", *epochs)?;
            if *classes < 2 {
                return Err(Error::config(
                    "scenario.classes",
                    "need at least two classes",
                ));
            }
            if let Some(b) = beta {
                if b.len() != *n {
                    return Err(Error::config(
                        "scenario.beta",
                        format!("{} entries for {n} providers", b.len()),
                    ));
                }
                if b.iter().any(|x| !(0.0..=100.0).contains(x)) {
                    return Err(Error::config(
                        "scenario.beta",
                        "entries must lie in [0, 100]",
                    ));
                }
            }
            if !(*separation > 0.0 && separation.is_finite()) {
                return Err(Error::config("scenario.separation", "must be positive"));
            }
            if !(*local_lr >= 0.0 && local_lr.is_finite()) {
                return Err(Error::config("scenario.local_lr", "must be nonnegative"));
            }
            if *minibatch_size == 0 || minibatch_size > per_provider {
                return Err(Error::config(
                    "scenario.minibatch_size",
                    format!("{minibatch_size} is outside [1, {per_provider}]"),
                ));
            }
            squash
                .validate()
                .map_err(|e| Error::config("scenario.squash", e.to_string()))
        }
    }
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    pub sampler: Option<SamplerKind>,
    pub regret: bool,
    pub shapley: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(out) = &self.out {
            cfg.output_dir = Some(out.clone());
        }
        if let Some(seeds) = &self.seeds {
            cfg.seeds = seeds.clone();
        }
        if let Some(s) = self.sampler {
            cfg.samplers = vec![s];
        }
        if self.regret {
            cfg.analysis.regret = true;
        }
        if self.shapley.is_some() {
            cfg.analysis.shapley = self.shapley;
        }
        validate(cfg)
    }
}

/// Output directory: config (or `--out`), then the environment, then the default.
pub fn resolve_output_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// Everything needed to run one seed of a scenario.
struct Instance {
    oracles: Vec<Box<dyn ProviderOracle>>,
    utility: Box<dyn UtilityFunction>,
    metric: Box<MetricFn>,
    w0: ModelState,
}

fn build_instance(spec: &ScenarioSpec, seed: u64) -> Result<Instance> {
    match spec {
        ScenarioSpec::MixtureRegression {
            n,
            d,
            samples_per_provider,
            holdout_size,
            groups,
            consumer_group,
            squash,
            init,
        } => {
            let sc = gen_mixture_regression(&MixtureParams {
                n: *n,
                d: *d,
                samples_per_provider: *samples_per_provider,
                holdout_size: *holdout_size,
                groups: *groups,
                consumer_group: *consumer_group,
                seed,
            })?;
            let oracles = sc
                .providers()
                .iter()
                .map(|data| Ok(Box::new(gradient_oracle(data.clone())?) as Box<dyn ProviderOracle>))
                .collect::<Result<Vec<_>>>()?;
            let utility = Box::new(LossUtility {
                holdout: sc.holdout().clone(),
                squash: *squash,
            });
            let w0 = ModelState::new(vec![*init; *d])?;
            Ok(Instance {
                oracles,
                utility,
                metric: Box::new(move |w| sc.estimation_error(w)),
                w0,
            })
        }
        ScenarioSpec::CorruptedClassification {
            n,
            per_provider,
            d,
            classes,
            beta,
            holdout_size,
            test_size,
            separation,
            squash,
            local_lr,
            minibatch_size,
            epochs,
        } => {
            let sc = gen_corrupted_classification(&ClassificationParams {
                n: *n,
                per_provider: *per_provider,
                d: *d,
                classes: *classes,
                beta: beta.clone().unwrap_or_else(|| default_beta_tiers(*n)),
                holdout_size: *holdout_size,
                test_size: *test_size,
                separation: *separation,
                seed,
            })?;
            let oracles = sc
                .providers
                .iter()
                .map(|data| {
                    let o = local_sgd_oracle(data.clone(), *local_lr, *minibatch_size, *epochs)?;
                    Ok(Box::new(o) as Box<dyn ProviderOracle>)
                })
                .collect::<Result<Vec<_>>>()?;
            let w0 = ModelState::new(vec![0.0; sc.holdout.param_dim()])?;
            let utility = Box::new(LossUtility {
                holdout: sc.holdout.clone(),
                squash: *squash,
            });
            let test = sc.test;
            Ok(Instance {
                oracles,
                utility,
                metric: Box::new(move |w| test.accuracy(w)),
                w0,
            })
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct ShapleySection {
    report: ShapleyReport,
    payments: Vec<f64>,
    /// True when no provider had positive value and payments fell back to uniform.
    degenerate: bool,
}

#[derive(Debug, Clone, Serialize)]
struct Summary<'a> {
    schema: &'static str,
    sampler: &'static str,
    seed: u64,
    market: &'a MarketConfig,
    metric_name: &'static str,
    final_utility: f64,
    final_metric: f64,
    final_w: &'a [f64],
    counts: &'a [u64],
    total_accesses: u64,
    revenue_pool: f64,
    payments: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    regret: Option<RegretReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    shapley: Option<&'a ShapleySection>,
}

/// Output of one (sampler, seed) job, rendered but not yet written.
struct JobResult {
    sampler: SamplerKind,
    seed: u64,
    trace_csv: Vec<u8>,
    summary_json: String,
    utility: Vec<f64>,
    metric: Vec<f64>,
    regret: Option<RegretReport>,
}

fn run_job(
    cfg: &ExperimentConfig,
    sampler: SamplerKind,
    seed: u64,
    shapley: Option<&ShapleySection>,
) -> Result<JobResult> {
    let inst = build_instance(&cfg.scenario, seed)?;
    let market = cfg.market_config(seed);
    let outcome = run_market_with(
        &market,
        &inst.oracles,
        inst.utility.as_ref(),
        &inst.w0,
        sampler,
        RunOptions {
            metric: Some(inst.metric.as_ref()),
            record_gains: cfg.analysis.regret,
            ..Default::default()
        },
    )?;
    let n = market.n;
    let mut trace_csv = Vec::new();
    trace_csv.extend_from_slice(TRACE_HEADER.as_bytes());
    trace_csv.push(b'\n');
    {
        let mut wr = csv::Writer::from_writer(&mut trace_csv);
        let mut header = vec!["round".to_string(), "utility".into(), "test_metric".into()];
        header.extend((0..n).map(|i| format!("p_{i}")));
        header.extend((0..n).map(|i| format!("N_{i}")));
        wr.write_record(&header).map_err(csv_err)?;
        let mut counts = vec![0u64; n];
        for rec in &outcome.trace.records {
            for &i in &rec.batch.draws {
                counts[i] += 1;
            }
            let mut row = Vec::with_capacity(3 + 2 * n);
            row.push(rec.round.to_string());
            row.push(rec.utility.to_string());
            row.push(rec.metric.map_or_else(String::new, |m| m.to_string()));
            row.extend(rec.probs.iter().map(|p| p.to_string()));
            row.extend(counts.iter().map(|c| c.to_string()));
            wr.write_record(&row).map_err(csv_err)?;
        }
        wr.flush()?;
    }

    let mut utility: Vec<f64> = outcome.trace.records.iter().map(|r| r.utility).collect();
    let mut metric: Vec<f64> = outcome
        .trace
        .records
        .iter()
        .map(|r| r.metric.unwrap_or(f64::NAN))
        .collect();
    let final_utility = inst.utility.evaluate(&outcome.model.w);
    let final_metric = (inst.metric)(&outcome.model.w);
    utility.push(final_utility);
    metric.push(final_metric);

    let regret = match &outcome.trace.utility_trace {
        Some(tr) => Some(compute_regret(
            tr,
            market.switch_budget,
            market.batch_size,
            market.alpha,
            market.eta,
        )?),
        None => None,
    };
    let summary = Summary {
        schema: SUMMARY_SCHEMA,
        sampler: sampler.name(),
        seed,
        market: &market,
        metric_name: cfg.scenario.metric_name(),
        final_utility,
        final_metric,
        final_w: &outcome.model.w,
        counts: &outcome.ledger.counts,
        total_accesses: outcome.ledger.total,
        revenue_pool: cfg.revenue_pool,
        payments: allocate_revenue(&outcome.ledger, cfg.revenue_pool)?,
        regret: regret.clone(),
        shapley,
    };
    let mut summary_json = serde_json::to_string_pretty(&summary)?;
    summary_json.push('\n');
    Ok(JobResult {
        sampler,
        seed,
        trace_csv,
        summary_json,
        utility,
        metric,
        regret,
    })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn shapley_for_seed(cfg: &ExperimentConfig, perms: usize, seed: u64) -> Result<ShapleySection> {
    let inst = build_instance(&cfg.scenario, seed)?;
    let method = if perms == 0 {
        ShapleyMethod::Exact
    } else {
        ShapleyMethod::Permutations(perms)
    };
    let report = accumulate_shapley(
        &cfg.market_config(seed),
        &inst.oracles,
        inst.utility.as_ref(),
        &inst.w0,
        method,
    )?;
    let (payments, degenerate) = shapley_revenue(&report.values, cfg.revenue_pool)?;
    Ok(ShapleySection {
        report,
        payments,
        degenerate,
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn aggregate_csv(jobs: &[&JobResult]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(AGGREGATE_HEADER.as_bytes());
    out.push(b'\n');
    {
        let mut wr = csv::Writer::from_writer(&mut out);
        wr.write_record([
            "round",
            "seeds",
            "utility_mean",
            "utility_std",
            "test_metric_mean",
            "test_metric_std",
        ])
        .map_err(csv_err)?;
        let len = jobs[0].utility.len();
        for t in 0..len {
            let u: Vec<f64> = jobs.iter().map(|j| j.utility[t]).collect();
            let m: Vec<f64> = jobs.iter().map(|j| j.metric[t]).collect();
            let (um, us) = mean_std(&u);
            let (mm, ms) = mean_std(&m);
            wr.write_record([
                t.to_string(),
                jobs.len().to_string(),
                um.to_string(),
                us.to_string(),
                mm.to_string(),
                ms.to_string(),
            ])
            .map_err(csv_err)?;
        }
        wr.flush()?;
    }
    Ok(out)
}

fn regret_summary(cfg: &ExperimentConfig, jobs: &[&JobResult]) -> Result<String> {
    let reports: Vec<&RegretReport> = jobs.iter().filter_map(|j| j.regret.as_ref()).collect();
    let regrets: Vec<f64> = reports.iter().map(|r| r.regret).collect();
    let (mean, std) = mean_std(&regrets);
    let bound = reports.first().map_or(f64::INFINITY, |r| r.bound);
    let per_seed: BTreeMap<String, &RegretReport> = jobs
        .iter()
        .filter_map(|j| j.regret.as_ref().map(|r| (j.seed.to_string(), r)))
        .collect();
    let finite = |x: f64| if x.is_finite() { json!(x) } else { Value::Null };
    let v = json!({
        "sampler": jobs[0].sampler.name(),
        "seeds": jobs.len(),
        "switch_budget": cfg.market.switch_budget,
        "mean_regret": mean,
        "std_regret": std,
        "bound": finite(bound),
        "margin": finite(bound - mean),
        "within_bound": mean <= bound,
        "per_seed": per_seed,
    });
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

/// Paths written by a successful run, in write order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub files: Vec<PathBuf>,
}

pub fn trace_file_name(sampler: SamplerKind, seed: u64) -> String {
    format!("trace_{}_seed{seed}.csv", sampler.name())
}

pub fn summary_file_name(sampler: SamplerKind, seed: u64) -> String {
    format!("summary_{}_seed{seed}.json", sampler.name())
}

pub fn aggregate_file_name(sampler: SamplerKind) -> String {
    format!("aggregate_{}.csv", sampler.name())
}

pub fn regret_file_name(sampler: SamplerKind) -> String {
    format!("regret_summary_{}.json", sampler.name())
}

/// Run every (sampler, seed) job and write the artifacts into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    validate(cfg)?;
    fs::create_dir_all(out)?;
    check_writable(out)?;

    let shapley: BTreeMap<u64, ShapleySection> = match cfg.analysis.shapley {
        Some(p) => cfg
            .seeds
            .par_iter()
            .map(|&s| Ok((s, shapley_for_seed(cfg, p, s)?)))
            .collect::<Result<_>>()?,
        None => BTreeMap::new(),
    };
    let grid: Vec<(SamplerKind, u64)> = cfg
        .samplers
        .iter()
        .flat_map(|&k| cfg.seeds.iter().map(move |&s| (k, s)))
        .collect();
    let jobs: Vec<JobResult> = grid
        .par_iter()
        .map(|&(k, s)| run_job(cfg, k, s, shapley.get(&s)))
        .collect::<Result<_>>()?;

    let mut files: Vec<(PathBuf, Vec<u8>)> = Vec::new();
    for job in &jobs {
        files.push((
            out.join(trace_file_name(job.sampler, job.seed)),
            job.trace_csv.clone(),
        ));
        files.push((
            out.join(summary_file_name(job.sampler, job.seed)),
            job.summary_json.clone().into_bytes(),
        ));
    }
    for &k in &cfg.samplers {
        let group: Vec<&JobResult> = jobs.iter().filter(|j| j.sampler == k).collect();
        files.push((out.join(aggregate_file_name(k)), aggregate_csv(&group)?));
        if cfg.analysis.regret {
            files.push((
                out.join(regret_file_name(k)),
                regret_summary(cfg, &group)?.into_bytes(),
            ));
        }
    }
    let mut written = Vec::with_capacity(files.len());
    for (path, bytes) in files {
        write_atomic(&path, &bytes)?;
        written.push(path);
    }
    Ok(RunReport {
        output_dir: out.to_path_buf(),
        files: written,
    })
}

fn check_writable(dir: &Path) -> Result<()> {
    let probe = dir.join(".osmd-market-write-check");
    fs::write(&probe, b"")?;
    fs::remove_file(&probe)?;
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("bad output path {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Machine-readable error object printed on stderr by the binary.
pub fn error_json(e: &Error) -> String {
    let mut v = json!({"error": e.kind(), "message": e.to_string()});
    match e {
        Error::Config { field, .. } => v["field"] = json!(field),
        Error::ConfigParse { line, column, .. } => {
            v["line"] = json!(line);
            v["column"] = json!(column);
        }
        _ => {}
    }
    v.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        r#"{
            "scenario": {"kind": "mixture_regression", "n": 1, "d": 2,
                "samples_per_provider": 3, "holdout_size": 3, "groups": 1,
                "consumer_group": 0, "squash": {"kind": "exp", "tau": 1.0}, "init": 0.0},
            "market": {"batch_size": 1, "rounds": 2, "eta": 0.5, "alpha": 0.5, "gamma": 0.1},
            "seeds": [3]
        }"#
    }

    #[test]
    fn minimal_parses_with_defaults() {
        let c = parse_config(minimal()).unwrap();
        assert_eq!(c.samplers, vec![SamplerKind::Osmd]);
        assert_eq!(c.market.switch_budget, 1);
        assert_eq!(c.revenue_pool, 1.0);
        assert_eq!(c.market_config(3).budget, 2);
    }

    #[test]
    fn mixture_preset_values() {
        let c = parse_config(r#"{"preset": "paper-mixture-a2", "seeds": [1]}"#).unwrap();
        assert_eq!(c.market.gamma, StepSchedule::Constant(0.01));
        assert_eq!(c.market.alpha, 0.01);
        assert_eq!(c.market.eta, 0.001);
        assert_eq!(c.market.rounds, 1500);
        assert_eq!(c.batch_size(), 4);
    }

    #[test]
    fn classification_preset_values() {
        let c = parse_config(r#"{"preset": "reference-classification", "seeds": [1]}"#).unwrap();
        assert_eq!(c.market.gamma, StepSchedule::Constant(0.1));
        assert_eq!(c.market.alpha, 0.01);
        assert_eq!(c.market.eta, 1.0);
        assert_eq!(c.market.rounds, 500);
        assert_eq!(c.batch_size(), 2);
    }

    #[test]
    fn user_keys_override_preset() {
        let c = parse_config(
            r#"{"preset": "paper-mixture-a2", "seeds": [1], "market": {"eta": 0.5},
                "scenario": {"d": 7}}"#,
        )
        .unwrap();
        assert_eq!(c.market.eta, 0.5);
        assert_eq!(c.market.rounds, 1500);
        match c.scenario {
            ScenarioSpec::MixtureRegression { d, n, .. } => assert_eq!((d, n), (7, 40)),
            _ => panic!("kind changed"),
        }
    }

    #[test]
    fn alpha_out_of_range() {
        let text = minimal().replace("\"alpha\": 0.5", "\"alpha\": 1.5");
        match parse_config(&text) {
            Err(Error::Config { field, message }) => {
                assert_eq!(field, "market.alpha");
                assert!(message.contains("outside [0, 1]"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_seeds() {
        let text = minimal().replace(",\n            \"seeds\": [3]", "");
        assert!(
            matches!(parse_config(&text), Err(Error::Config { field, .. }) if field == "seeds")
        );
        let text = minimal().replace("[3]", "[]");
        assert!(
            matches!(parse_config(&text), Err(Error::Config { field, .. }) if field == "seeds")
        );
    }

    #[test]
    fn unknown_key_names_its_path() {
        let text = minimal().replace("\"eta\"", "\"etta\": 1, \"eta\"");
        match parse_config(&text) {
            Err(Error::Config { field, message }) => {
                assert_eq!(field, "market.etta");
                assert!(message.contains("unknown field"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn syntax_error_has_position() {
        match parse_config("{\n  \"seeds\": [1,\n}") {
            Err(Error::ConfigParse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_preset() {
        assert!(parse_config(r#"{"preset": "nope", "seeds": [1]}"#).is_err());
    }

    #[test]
    fn error_json_shape() {
        let e = Error::config("market.alpha", "bad");
        let v: Value = serde_json::from_str(&error_json(&e)).unwrap();
        assert_eq!(v["error"], "config");
        assert_eq!(v["field"], "market.alpha");
    }
}
