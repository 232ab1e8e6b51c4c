//! Data generators, size/power experiments and the parametric bootstrap for
//! comparing response mechanisms.
//!
//! Every replication draws from its own ChaCha stream derived from the
//! master seed and the replication index, so results do not depend on the
//! execution strategy.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma, LogNormal};
use serde::{Deserialize, Serialize};

use crate::baseline::{self, TwoSampleData};
use crate::callback;
use crate::data::{Basis, CallbackDataset, CallbackUnit, FittedModel, Group, ModelSpec, ResponseParams, TestResult};
use crate::elr::{self, ElrOptions};
use crate::em::{EmOptions, FitProblem};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::stats;

/// Streams at or above this offset are reserved for null-calibration runs.
pub const NULL_STREAM_OFFSET: u64 = 1 << 40;

/// Outcome distribution of one group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Family {
    /// Exponential with the given rate.
    Exp { rate: f64 },
    /// Log-normal with mean and standard deviation on the log scale.
    LogNormal { mu: f64, sigma: f64 },
    Gamma { shape: f64, scale: f64 },
}

impl Family {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Family::Exp { rate } => rate > 0.0 && rate.is_finite(),
            Family::LogNormal { mu, sigma } => mu.is_finite() && sigma > 0.0 && sigma.is_finite(),
            Family::Gamma { shape, scale } => shape > 0.0 && scale > 0.0 && shape.is_finite() && scale.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid family parameters: {self}")))
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Family::Exp { rate } => 1.0 / rate,
            Family::LogNormal { mu, sigma } => (mu + sigma * sigma / 2.0).exp(),
            Family::Gamma { shape, scale } => shape * scale,
        }
    }

    /// The q(y) under which two members of this family satisfy the DRM.
    pub fn natural_q_basis(&self) -> Basis {
        match self {
            Family::Exp { .. } => Basis::Identity,
            Family::LogNormal { .. } | Family::Gamma { .. } => Basis::Log,
        }
    }

    pub fn sampler(&self) -> Result<Sampler> {
        self.validate()?;
        let map = |e: &dyn fmt::Display| Error::Config(format!("{self}: {e}"));
        Ok(match *self {
            Family::Exp { rate } => Sampler::Exp(Exp::new(rate).map_err(|e| map(&e))?),
            Family::LogNormal { mu, sigma } => Sampler::LogNormal(LogNormal::new(mu, sigma).map_err(|e| map(&e))?),
            Family::Gamma { shape, scale } => Sampler::Gamma(Gamma::new(shape, scale).map_err(|e| map(&e))?),
        })
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::Exp { rate } => write!(f, "Exp({rate})"),
            Family::LogNormal { mu, sigma } => write!(f, "LN({mu},{sigma})"),
            Family::Gamma { shape, scale } => write!(f, "Gamma({shape},{scale})"),
        }
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse family '{s}', expected e.g. exp(1), ln(0,1), gamma(2.5,1)"));
        let s_trim = s.trim();
        let open = s_trim.find('(').ok_or_else(bad)?;
        let inner = s_trim[open + 1..].strip_suffix(')').ok_or_else(bad)?;
        let args: Vec<f64> = inner
            .split(',')
            .map(|a| a.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        let fam = match (s_trim[..open].trim().to_ascii_lowercase().as_str(), args.as_slice()) {
            ("exp", [rate]) => Family::Exp { rate: *rate },
            ("ln" | "lognormal", [mu, sigma]) => Family::LogNormal { mu: *mu, sigma: *sigma },
            ("gamma", [shape, scale]) => Family::Gamma {
                shape: *shape,
                scale: *scale,
            },
            _ => return Err(bad()),
        };
        fam.validate()?;
        Ok(fam)
    }
}

impl From<Family> for String {
    fn from(f: Family) -> String {
        f.to_string()
    }
}

impl TryFrom<String> for Family {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// A validated sampler for one [`Family`].
#[derive(Debug, Clone, Copy)]
pub enum Sampler {
    Exp(Exp<f64>),
    LogNormal(LogNormal<f64>),
    Gamma(Gamma<f64>),
}

impl Distribution<f64> for Sampler {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Sampler::Exp(d) => d.sample(rng),
            Sampler::LogNormal(d) => d.sample(rng),
            Sampler::Gamma(d) => d.sample(rng),
        }
    }
}

/// Two-group callback data generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub f0: Family,
    pub f1: Family,
    pub phi0: ResponseParams,
    pub phi1: ResponseParams,
    pub r_basis: Basis,
    pub m: u32,
    pub n0: usize,
    pub n1: usize,
    pub seed: u64,
}

impl GeneratorConfig {
    /// Two callbacks, r(y) = log y, phi0 = (-0.5, 0.5, -0.5), phi1 = (0, 1, -0.5).
    pub fn reference_design(f0: Family, f1: Family, n_per_group: usize, seed: u64) -> Self {
        Self {
            f0,
            f1,
            phi0: ResponseParams::new(vec![-0.5, 0.5], vec![-0.5]),
            phi1: ResponseParams::new(vec![0.0, 1.0], vec![-0.5]),
            r_basis: Basis::Log,
            m: 2,
            n0: n_per_group,
            n1: n_per_group,
            seed,
        }
    }

    /// The matching homogeneous design with F0 replaced by F1.
    pub fn null_counterpart(&self) -> Self {
        Self {
            f0: self.f1,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.f0.validate()?;
        self.f1.validate()?;
        if self.m < 1 {
            return Err(Error::Config("m must be at least 1".into()));
        }
        if self.n0 == 0 || self.n1 == 0 {
            return Err(Error::Config("both group sizes must be positive".into()));
        }
        for (name, phi) in [("phi0", &self.phi0), ("phi1", &self.phi1)] {
            if phi.m() != self.m as usize || phi.beta.len() != self.r_basis.dim() {
                return Err(Error::Config(format!(
                    "{name} needs {} alphas and {} slope(s)",
                    self.m,
                    self.r_basis.dim()
                )));
            }
            if !phi.is_finite() {
                return Err(Error::Config(format!("{name} has non-finite entries")));
            }
        }
        Ok(())
    }

    /// Dataset drawn from the config's own seed.
    pub fn simulate(&self) -> Result<CallbackDataset> {
        self.simulate_with_rng(&mut ChaCha8Rng::seed_from_u64(self.seed))
    }

    /// Dataset for replication `stream` of this config.
    pub fn simulate_stream(&self, stream: u64) -> Result<CallbackDataset> {
        self.simulate_with_rng(&mut stream_rng(self.seed, stream))
    }

    pub fn simulate_with_rng<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<CallbackDataset> {
        self.validate()?;
        let mut units = Vec::with_capacity(self.n0 + self.n1);
        for (group, fam, n, phi) in [
            (Group::Zero, self.f0, self.n0, &self.phi0),
            (Group::One, self.f1, self.n1, &self.phi1),
        ] {
            let sampler = fam.sampler()?;
            for _ in 0..n {
                let y = sampler.sample(rng);
                units.push(draw_callback(rng, group, y, phi, self.r_basis, self.m)?);
            }
        }
        Ok(CallbackDataset::new(units, self.m))
    }
}

/// Walks attempts 1..m for one unit with outcome `y`.
fn draw_callback<R: Rng + ?Sized>(
    rng: &mut R,
    group: Group,
    y: f64,
    phi: &ResponseParams,
    r_basis: Basis,
    m: u32,
) -> Result<CallbackUnit> {
    let r = r_basis.eval(y)?;
    let slope = phi.slope(&r);
    for (k, alpha) in phi.alphas.iter().enumerate() {
        if rng.random::<f64>() < callback::logistic(alpha + slope) {
            return Ok(CallbackUnit::respondent(group, k as u32 + 1, y));
        }
    }
    Ok(CallbackUnit::nonrespondent(group, m))
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Homogeneity tests available to the experiment driver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ELR")]
    Elr,
    #[serde(rename = "t-test")]
    TTest,
    #[serde(rename = "Wilcoxon")]
    Wilcoxon,
    #[serde(rename = "KS")]
    Ks,
    #[serde(rename = "Cai's ELR")]
    CaiElr,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Elr, Method::TTest, Method::Wilcoxon, Method::Ks, Method::CaiElr];
    pub const BASELINES: [Method; 4] = [Method::TTest, Method::Wilcoxon, Method::Ks, Method::CaiElr];

    pub fn name(self) -> &'static str {
        match self {
            Method::Elr => "ELR",
            Method::TTest => "t-test",
            Method::Wilcoxon => "Wilcoxon",
            Method::Ks => "KS",
            Method::CaiElr => "Cai's ELR",
        }
    }

    /// Runs this test on `dataset`. Baselines see respondents only.
    pub fn run(self, dataset: &CallbackDataset, spec: &ModelSpec, em: &EmOptions) -> Result<TestResult> {
        if self == Method::Elr {
            let opts = ElrOptions {
                em: *em,
                execution: Execution::Sequential,
                ..ElrOptions::default()
            };
            return Ok(elr::elr_test(dataset, spec, &opts)?.test_result());
        }
        let data = TwoSampleData::from_dataset(dataset)?;
        match self {
            Method::TTest => baseline::t_test(&data),
            Method::Wilcoxon => baseline::wilcoxon_test(&data),
            Method::Ks => baseline::ks_test(&data),
            Method::CaiElr => baseline::cai_elr_test(&data, spec.q_basis),
            Method::Elr => unreachable!(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "elr" => Ok(Method::Elr),
            "t" | "t-test" | "ttest" => Ok(Method::TTest),
            "wilcoxon" | "wmw" => Ok(Method::Wilcoxon),
            "ks" => Ok(Method::Ks),
            "cai" | "cai-elr" | "cai's elr" => Ok(Method::CaiElr),
            _ => Err(Error::Config(format!("unknown method '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Calibration {
    /// Each method's own reference distribution.
    #[default]
    Asymptotic,
    /// Baseline critical values from simulated null statistics; the ELR
    /// keeps its chi-square reference.
    EmpiricalNull,
}

impl FromStr for Calibration {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "asymptotic" => Ok(Calibration::Asymptotic),
            "empirical-null" | "empirical_null" | "empirical" => Ok(Calibration::EmpiricalNull),
            _ => Err(Error::Config(format!("unknown calibration '{s}'"))),
        }
    }
}

impl fmt::Display for Calibration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Calibration::Asymptotic => "asymptotic",
            Calibration::EmpiricalNull => "empirical-null",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    /// q(y) used by the ELR and Cai's ELR.
    pub q_basis: Basis,
    pub methods: Vec<Method>,
    pub reps: usize,
    pub level: f64,
    pub calibration: Calibration,
    /// Null replications for empirical calibration; defaults to `reps`.
    pub null_reps: Option<usize>,
    pub em: EmOptions,
    pub execution: Execution,
}

impl ExperimentConfig {
    /// All five methods, the family's natural q(y), asymptotic calibration.
    pub fn new(generator: GeneratorConfig, reps: usize) -> Self {
        Self {
            q_basis: generator.f1.natural_q_basis(),
            generator,
            methods: Method::ALL.to_vec(),
            reps,
            level: 0.05,
            calibration: Calibration::Asymptotic,
            null_reps: None,
            em: EmOptions::default(),
            execution: Execution::Parallel,
        }
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec::new(self.generator.r_basis, self.q_basis, self.generator.m)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        if self.reps == 0 {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        if !(self.level > 0.0 && self.level <= 1.0) {
            return Err(Error::Config(format!("level must lie in (0, 1], got {}", self.level)));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods requested".into()));
        }
        if self.em.epsilon.is_nan() || self.em.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Per-method results of one replication, aligned with the method list.
#[derive(Debug, Clone, PartialEq)]
pub struct Replication {
    pub results: Vec<std::result::Result<TestResult, String>>,
}

/// Simulates `reps` datasets on streams `offset..offset + reps` and runs
/// every method on each.
pub fn run_replications(
    generator: &GeneratorConfig,
    spec: &ModelSpec,
    methods: &[Method],
    reps: usize,
    offset: u64,
    em: &EmOptions,
    execution: Execution,
) -> Vec<Replication> {
    par::map_indexed(reps, execution, |i| {
        let results = match generator.simulate_stream(offset + i as u64) {
            Ok(ds) => methods
                .iter()
                .map(|m| m.run(&ds, spec, em).map_err(|e| e.to_string()))
                .collect(),
            Err(e) => vec![Err(e.to_string()); methods.len()],
        };
        Replication { results }
    })
}

/// Ordering score for empirical calibration: larger is more extreme.
pub fn rejection_score(result: &TestResult) -> f64 {
    -result.p_value.ln()
}

/// The ceil((1 - level)(R + 1))-th smallest of `scores`; infinite when that
/// rank exceeds R, negative infinite when it is zero.
pub fn empirical_critical_value(scores: &[f64], level: f64) -> f64 {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((1.0 - level) * (sorted.len() as f64 + 1.0)).ceil() as usize;
    match rank {
        0 => f64::NEG_INFINITY,
        k if k > sorted.len() => f64::INFINITY,
        k => sorted[k - 1],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub rejections: usize,
    pub successes: usize,
    pub failures: usize,
    /// rejections / successes; absent when every replication failed.
    pub rejection_rate: Option<f64>,
    /// p-value threshold implied by the empirical critical value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub critical_p_value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub null_failures: Option<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub failure_messages: Vec<String>,
}

/// Wall-clock information, kept out of serialized reports so they stay
/// reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RuntimeInfo {
    pub seconds: f64,
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub design: String,
    pub n0: usize,
    pub n1: usize,
    pub q_basis: Basis,
    pub reps: usize,
    pub level: f64,
    pub calibration: Calibration,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub null_reps: Option<usize>,
    pub methods: Vec<MethodSummary>,
    #[serde(skip)]
    pub runtime: RuntimeInfo,
}

impl ExperimentReport {
    pub fn rate(&self, method: Method) -> Option<f64> {
        self.methods.iter().find(|s| s.method == method).and_then(|s| s.rejection_rate)
    }
}

/// Rejection rates of each method over seeded replications.
pub fn size_power_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let start = Instant::now();
    let spec = cfg.spec();
    let reps = run_replications(&cfg.generator, &spec, &cfg.methods, cfg.reps, 0, &cfg.em, cfg.execution);

    let mut critical: Vec<Option<(f64, usize)>> = vec![None; cfg.methods.len()];
    let mut null_reps = None;
    if cfg.calibration == Calibration::EmpiricalNull {
        let calibrated: Vec<(usize, Method)> = cfg
            .methods
            .iter()
            .copied()
            .enumerate()
            .filter(|(_, m)| *m != Method::Elr)
            .collect();
        if !calibrated.is_empty() {
            let r = cfg.null_reps.unwrap_or(cfg.reps);
            null_reps = Some(r);
            let null_methods: Vec<Method> = calibrated.iter().map(|(_, m)| *m).collect();
            let null = run_replications(
                &cfg.generator.null_counterpart(),
                &spec,
                &null_methods,
                r,
                NULL_STREAM_OFFSET,
                &cfg.em,
                cfg.execution,
            );
            for (j, (i, _)) in calibrated.iter().enumerate() {
                let scores: Vec<f64> = null
                    .iter()
                    .filter_map(|rep| rep.results[j].as_ref().ok().map(rejection_score))
                    .collect();
                let failures = r - scores.len();
                if scores.is_empty() {
                    return Err(Error::Degenerate(format!(
                        "every null replication failed for {}",
                        null_methods[j]
                    )));
                }
                critical[*i] = Some((empirical_critical_value(&scores, cfg.level), failures));
            }
        }
    }

    let methods = cfg
        .methods
        .iter()
        .enumerate()
        .map(|(i, &method)| {
            let mut summary = MethodSummary {
                method,
                rejections: 0,
                successes: 0,
                failures: 0,
                rejection_rate: None,
                critical_p_value: critical[i].map(|(c, _)| (-c).exp()),
                null_failures: critical[i].map(|(_, f)| f),
                failure_messages: Vec::new(),
            };
            for rep in &reps {
                match &rep.results[i] {
                    Ok(res) => {
                        summary.successes += 1;
                        let reject = match critical[i] {
                            Some((c, _)) => rejection_score(res) > c,
                            None => res.p_value <= cfg.level,
                        };
                        summary.rejections += reject as usize;
                    }
                    Err(msg) => {
                        summary.failures += 1;
                        if !summary.failure_messages.contains(msg) {
                            summary.failure_messages.push(msg.clone());
                        }
                    }
                }
            }
            if summary.successes > 0 {
                summary.rejection_rate = Some(summary.rejections as f64 / summary.successes as f64);
            }
            summary
        })
        .collect();

    Ok(ExperimentReport {
        design: format!("F0={} F1={}", cfg.generator.f0, cfg.generator.f1),
        n0: cfg.generator.n0,
        n1: cfg.generator.n1,
        q_basis: cfg.q_basis,
        reps: cfg.reps,
        level: cfg.level,
        calibration: cfg.calibration,
        seed: cfg.generator.seed,
        null_reps,
        methods,
        runtime: RuntimeInfo {
            seconds: start.elapsed().as_secs_f64(),
            threads: if cfg.execution.is_parallel() { rayon_threads() } else { 1 },
        },
    })
}

fn rayon_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOptions {
    pub b: usize,
    pub seed: u64,
    pub em: EmOptions,
    pub execution: Execution,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        Self {
            b: 200,
            seed: 0,
            em: EmOptions::default(),
            execution: Execution::Parallel,
        }
    }
}

/// Below this many successful refits the standard errors are flagged.
pub const LOW_PRECISION_B: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapRow {
    /// Component of phi0 - phi1, e.g. `alpha_1` or `beta`.
    pub component: String,
    pub estimate: f64,
    pub se: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub rows: Vec<BootstrapRow>,
    pub requested: usize,
    pub succeeded: usize,
    pub low_precision: bool,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub warnings: Vec<String>,
}

/// Parametric bootstrap of phi0 - phi1: outcomes are drawn from the fitted
/// discrete F0 and F1, callbacks from the fitted response models, and the
/// unrestricted model is refitted to each bootstrap sample.
pub fn bootstrap_response_comparison(
    dataset: &CallbackDataset,
    fitted: &FittedModel,
    opts: &BootstrapOptions,
) -> Result<BootstrapReport> {
    if opts.b < 2 {
        return Err(Error::Config("bootstrap needs B >= 2".into()));
    }
    if fitted.null_restricted {
        return Err(Error::Config("bootstrap needs the unrestricted fit".into()));
    }
    if fitted.dataset_fingerprint != dataset.fingerprint() {
        return Err(Error::MismatchedFits);
    }
    let spec = fitted.spec;
    let problem = FitProblem::new(dataset, &spec)?;
    let support = &problem.support.values;
    let f1_masses: Vec<f64> = fitted
        .masses
        .iter()
        .zip(&problem.support.q_features)
        .map(|(p, q)| p * fitted.theta.dot(q).exp())
        .collect();
    let pick0 = WeightedIndex::new(&fitted.masses).map_err(|e| Error::Degenerate(format!("F0 masses: {e}")))?;
    let pick1 = WeightedIndex::new(&f1_masses).map_err(|e| Error::Degenerate(format!("F1 masses: {e}")))?;
    let [n0, n1] = dataset.group_sizes();

    let diff = |a: &ResponseParams, b: &ResponseParams| -> Vec<f64> {
        a.to_vec().iter().zip(b.to_vec()).map(|(x, y)| x - y).collect()
    };
    let estimate = diff(&fitted.phi0, &fitted.phi1);

    let draws: Vec<Result<Vec<f64>>> = par::map_indexed(opts.b, opts.execution, |b| {
        let mut rng = stream_rng(opts.seed, b as u64);
        let mut units = Vec::with_capacity(n0 + n1);
        for (group, n, pick, phi) in [
            (Group::Zero, n0, &pick0, &fitted.phi0),
            (Group::One, n1, &pick1, &fitted.phi1),
        ] {
            for _ in 0..n {
                let y = support[pick.sample(&mut rng)];
                units.push(draw_callback(&mut rng, group, y, phi, spec.r_basis, spec.m)?);
            }
        }
        let boot = CallbackDataset::new(units, spec.m);
        let fit = FitProblem::new(&boot, &spec)?.fit(false, &opts.em)?;
        Ok(diff(&fit.phi0, &fit.phi1))
    });

    let mut warnings = Vec::new();
    let ok: Vec<Vec<f64>> = draws
        .into_iter()
        .filter_map(|d| match d {
            Ok(v) => Some(v),
            Err(e) => {
                let msg = format!("bootstrap refit failed: {e}");
                if !warnings.contains(&msg) {
                    warnings.push(msg);
                }
                None
            }
        })
        .collect();
    if ok.len() * 2 < opts.b || ok.len() < 2 {
        return Err(Error::BootstrapFailed {
            succeeded: ok.len(),
            requested: opts.b,
        });
    }
    let low_precision = ok.len() < LOW_PRECISION_B;
    if low_precision {
        warnings.push(format!("only {} bootstrap replicates; standard errors are imprecise", ok.len()));
    }
    let labels = fitted.phi0.labels();
    let rows = (0..estimate.len())
        .map(|c| {
            let vals: Vec<f64> = ok.iter().map(|v| v[c]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() as f64 - 1.0);
            let se = var.sqrt();
            let p_value = if se > 0.0 {
                stats::normal_two_sided(estimate[c] / se)
            } else if estimate[c] == 0.0 {
                1.0
            } else {
                0.0
            };
            BootstrapRow {
                component: labels[c].clone(),
                estimate: estimate[c],
                se,
                p_value,
            }
        })
        .collect();
    Ok(BootstrapReport {
        rows,
        requested: opts.b,
        succeeded: ok.len(),
        low_precision,
        warnings,
    })
}

/// Recodes raw attempt counts to m = 2 callback indicators: D = 1 within
/// the first `cut` attempts, D = 2 up to `max_attempts`, D = 3 for units
/// that never responded (`None`).
pub fn categorize_callbacks(raw: &[Option<u32>], cut: u32, max_attempts: u32) -> Result<Vec<u32>> {
    if cut < 1 {
        return Err(Error::Config("cut must be at least 1".into()));
    }
    raw.iter()
        .enumerate()
        .map(|(i, a)| match *a {
            None => Ok(3),
            Some(0) => Err(Error::InvalidData(format!("record {i}: attempt count must be positive"))),
            Some(a) if a <= cut => Ok(1),
            Some(a) if a <= max_attempts => Ok(2),
            Some(a) => Err(Error::InvalidData(format!(
                "record {i}: attempt {a} exceeds the maximum of {max_attempts}"
            ))),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp1() -> Family {
        Family::Exp { rate: 1.0 }
    }

    #[test]
    fn family_parsing() {
        assert_eq!("exp(1)".parse::<Family>().unwrap(), exp1());
        assert_eq!(
            "LN(0.2, 1)".parse::<Family>().unwrap(),
            Family::LogNormal { mu: 0.2, sigma: 1.0 }
        );
        assert_eq!(
            "gamma(2.5,1)".parse::<Family>().unwrap(),
            Family::Gamma { shape: 2.5, scale: 1.0 }
        );
        assert!("exp(-1)".parse::<Family>().is_err());
        assert!("beta(1,1)".parse::<Family>().is_err());
        assert_eq!(Family::Gamma { shape: 2.8, scale: 1.0 }.to_string(), "Gamma(2.8,1)");
    }

    #[test]
    fn generator_is_deterministic() {
        let g = GeneratorConfig::reference_design(exp1(), exp1(), 200, 42);
        assert_eq!(g.simulate().unwrap(), g.simulate().unwrap());
        assert_ne!(g.simulate_stream(1).unwrap(), g.simulate_stream(2).unwrap());
    }

    #[test]
    fn saturated_response_models() {
        let mut g = GeneratorConfig::reference_design(exp1(), exp1(), 100, 1);
        g.phi0 = ResponseParams::new(vec![60.0, 0.0], vec![0.0]);
        g.phi1 = ResponseParams::new(vec![-60.0, -60.0], vec![0.0]);
        let ds = g.simulate().unwrap();
        for u in &ds.units {
            match u.group {
                Group::Zero => assert_eq!(u.d, 1),
                Group::One => assert_eq!((u.d, u.y), (3, None)),
            }
        }
    }

    #[test]
    fn exponential_mean_within_four_se() {
        let mut g = GeneratorConfig::reference_design(Family::Exp { rate: 2.0 }, Family::Exp { rate: 2.0 }, 20_000, 3);
        g.phi0 = ResponseParams::new(vec![60.0, 60.0], vec![0.0]);
        let ds = g.simulate().unwrap();
        let ys = ds.observed_outcomes(Group::Zero);
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        let se = 0.5 / (ys.len() as f64).sqrt();
        assert!((mean - 0.5).abs() < 4.0 * se);
    }

    /// E[rho(Y; phi)] for Y ~ Exp(1) by composite Simpson on y = -ln(1 - u).
    fn expected_response(phi: &ResponseParams) -> f64 {
        let n = 20_000;
        let h = 1.0 / n as f64;
        let f = |u: f64| {
            let u = u.clamp(1e-15, 1.0 - 1e-15);
            let y = -(1.0 - u).ln();
            let mut surv = 1.0;
            for a in &phi.alphas {
                let pi = 1.0 / (1.0 + (-(a + phi.beta[0] * y.ln())).exp());
                surv *= 1.0 - pi;
            }
            1.0 - surv
        };
        let mut s = f(0.0) + f(1.0);
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn response_rate_matches_quadrature() {
        let g = GeneratorConfig::reference_design(exp1(), exp1(), 20_000, 8);
        let ds = g.simulate().unwrap();
        let [r0, r1] = ds.respondent_counts();
        for (obs, phi) in [(r0, &g.phi0), (r1, &g.phi1)] {
            let p = expected_response(phi);
            let rate = obs as f64 / 20_000.0;
            let se = (p * (1.0 - p) / 20_000.0).sqrt();
            assert!((rate - p).abs() < 4.0 * se, "{rate} vs {p}");
        }
    }

    #[test]
    fn empirical_quantile_rank() {
        let scores: Vec<f64> = (1..=19).map(|i| i as f64).collect();
        // ceil(0.95 * 20) = 19
        assert_eq!(empirical_critical_value(&scores, 0.05), 19.0);
        assert_eq!(empirical_critical_value(&scores, 0.5), 10.0);
        assert_eq!(empirical_critical_value(&scores[..5], 0.05), f64::INFINITY);
        assert_eq!(empirical_critical_value(&scores, 1.0), f64::NEG_INFINITY);
    }

    #[test]
    fn level_one_rejects_everything() {
        let g = GeneratorConfig::reference_design(exp1(), exp1(), 60, 2);
        for calibration in [Calibration::Asymptotic, Calibration::EmpiricalNull] {
            let cfg = ExperimentConfig {
                level: 1.0,
                calibration,
                ..ExperimentConfig::new(g.clone(), 4)
            };
            let rep = size_power_experiment(&cfg).unwrap();
            for s in &rep.methods {
                assert_eq!(s.rejection_rate, Some(1.0), "{}", s.method);
            }
        }
    }

    #[test]
    fn execution_strategy_does_not_change_report() {
        let g = GeneratorConfig::reference_design(exp1(), Family::Exp { rate: 0.8 }, 80, 5);
        let par = size_power_experiment(&ExperimentConfig::new(g.clone(), 6)).unwrap();
        let seq = size_power_experiment(&ExperimentConfig {
            execution: Execution::Sequential,
            ..ExperimentConfig::new(g, 6)
        })
        .unwrap();
        assert_eq!(par.methods, seq.methods);
    }

    #[test]
    fn categorization_rules() {
        let d = categorize_callbacks(&[Some(2), Some(3), Some(4), Some(10), None], 3, 10).unwrap();
        assert_eq!(d, vec![1, 1, 2, 2, 3]);
        assert!(categorize_callbacks(&[Some(0)], 3, 10).is_err());
        assert!(categorize_callbacks(&[Some(11)], 3, 10).is_err());
        assert!(categorize_callbacks(&[Some(1)], 0, 10).is_err());
    }

    #[test]
    fn bootstrap_minimal_b() {
        let g = GeneratorConfig::reference_design(exp1(), exp1(), 150, 4);
        let ds = g.simulate().unwrap();
        let spec = ModelSpec::new(Basis::Log, Basis::Identity, 2);
        let fit = FitProblem::new(&ds, &spec).unwrap().fit(false, &EmOptions::default()).unwrap();
        let rep = bootstrap_response_comparison(
            &ds,
            &fit,
            &BootstrapOptions {
                b: 2,
                seed: 1,
                ..BootstrapOptions::default()
            },
        )
        .unwrap();
        assert!(rep.low_precision);
        assert_eq!(rep.rows.len(), 3);
        assert_eq!(rep.rows[2].component, "beta");
        assert!(rep.rows.iter().all(|r| r.se.is_finite() && r.se >= 0.0));
        assert!(bootstrap_response_comparison(&ds, &fit, &BootstrapOptions { b: 1, ..BootstrapOptions::default() }).is_err());
    }
}
