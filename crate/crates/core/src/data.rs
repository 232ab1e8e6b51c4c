//! Domain types shared by every stage of the pipeline: callback units and
//! datasets, basis functions, model parameters and fitted models.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use arrayvec::ArrayVec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Basis evaluations r(y) or q(y). At most two components.
pub type Features = ArrayVec<f64, 2>;

/// Population label. The two samples are fixed by design, never inferred.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Group {
    Zero,
    One,
}

impl Group {
    pub fn index(self) -> usize {
        match self {
            Group::Zero => 0,
            Group::One => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Group> {
        match i {
            0 => Some(Group::Zero),
            1 => Some(Group::One),
            _ => None,
        }
    }
}

impl From<Group> for u8 {
    fn from(g: Group) -> u8 {
        g.index() as u8
    }
}

impl TryFrom<u8> for Group {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        Group::from_index(v as usize).ok_or_else(|| format!("group must be 0 or 1, got {v}"))
    }
}

/// Candidate basis functions for r(y) and q(y).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Basis {
    /// y
    Identity,
    /// log y
    Log,
    /// (y, log y)
    IdentityLog,
}

impl Basis {
    pub const ALL: [Basis; 3] = [Basis::Identity, Basis::Log, Basis::IdentityLog];

    pub fn dim(self) -> usize {
        match self {
            Basis::Identity | Basis::Log => 1,
            Basis::IdentityLog => 2,
        }
    }

    pub fn needs_positive(self) -> bool {
        !matches!(self, Basis::Identity)
    }

    pub fn eval(self, y: f64) -> Result<Features> {
        if !y.is_finite() || (self.needs_positive() && y <= 0.0) {
            return Err(Error::Domain { y, basis: self });
        }
        let mut out = Features::new();
        match self {
            Basis::Identity => out.push(y),
            Basis::Log => out.push(y.ln()),
            Basis::IdentityLog => {
                out.push(y);
                out.push(y.ln());
            }
        }
        Ok(out)
    }

    /// Q(y) = (1, q(y)).
    pub fn eval_with_intercept(self, y: f64) -> Result<ArrayVec<f64, 3>> {
        let mut out = ArrayVec::new();
        out.push(1.0);
        out.extend(self.eval(y)?);
        Ok(out)
    }
}

impl fmt::Display for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Basis::Identity => "y",
            Basis::Log => "log",
            Basis::IdentityLog => "y+log",
        })
    }
}

impl FromStr for Basis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "y" | "identity" => Ok(Basis::Identity),
            "log" | "log(y)" | "logy" => Ok(Basis::Log),
            "y+log" | "y,log" | "(y,log)" | "identity-and-log" | "y+log(y)" => {
                Ok(Basis::IdentityLog)
            }
            other => Err(Error::Config(format!("unknown basis '{other}'"))),
        }
    }
}

impl From<Basis> for String {
    fn from(b: Basis) -> String {
        b.to_string()
    }
}

impl TryFrom<String> for Basis {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub r_basis: Basis,
    pub q_basis: Basis,
    pub m: u32,
}

impl ModelSpec {
    pub fn new(r_basis: Basis, q_basis: Basis, m: u32) -> Self {
        Self { r_basis, q_basis, m }
    }

    /// Free parameters of the finite-dimensional part: q free DRM
    /// dimensions plus both response models. Eta and the masses are excluded.
    pub fn free_parameters(&self) -> usize {
        self.q_basis.dim() + 2 * (self.m as usize + self.r_basis.dim())
    }
}

/// One sampled unit. `y` is present exactly when the unit responded (`d <= m`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CallbackUnit {
    pub group: Group,
    pub d: u32,
    pub y: Option<f64>,
}

impl CallbackUnit {
    pub fn respondent(group: Group, d: u32, y: f64) -> Self {
        Self { group, d, y: Some(y) }
    }

    pub fn nonrespondent(group: Group, m: u32) -> Self {
        Self {
            group,
            d: m + 1,
            y: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallbackDataset {
    pub units: Vec<CallbackUnit>,
    pub m: u32,
}

/// A single invariant violation found by [`validate_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    MTooSmall { m: u32 },
    MMismatch { data: u32, spec: u32 },
    DOutOfRange { index: usize, d: u32 },
    MissingOutcome { index: usize },
    UnexpectedOutcome { index: usize },
    NonFiniteOutcome { index: usize },
    NonPositiveOutcome { index: usize, y: f64 },
    EmptyGroup { group: usize },
    NoRespondents { group: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MTooSmall { m } => write!(f, "m = {m} must be at least 2"),
            Violation::MMismatch { data, spec } => {
                write!(f, "dataset m = {data} differs from model m = {spec}")
            }
            Violation::DOutOfRange { index, d } => write!(f, "unit {index}: d out of range ({d})"),
            Violation::MissingOutcome { index } => {
                write!(f, "unit {index}: missing outcome for respondent")
            }
            Violation::UnexpectedOutcome { index } => {
                write!(f, "unit {index}: outcome present for nonrespondent")
            }
            Violation::NonFiniteOutcome { index } => write!(f, "unit {index}: non-finite outcome"),
            Violation::NonPositiveOutcome { index, y } => {
                write!(f, "unit {index}: non-positive outcome under log basis ({y})")
            }
            Violation::EmptyGroup { group } => write!(f, "group {group} has no units"),
            Violation::NoRespondents { group } => write!(f, "group {group} has no respondents"),
        }
    }
}

/// Checks every dataset invariant against `spec`. An empty list means valid.
pub fn validate_dataset(dataset: &CallbackDataset, spec: &ModelSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    let m = dataset.m;
    if m < 2 {
        out.push(Violation::MTooSmall { m });
    }
    if m != spec.m {
        out.push(Violation::MMismatch { data: m, spec: spec.m });
    }
    let needs_positive = spec.r_basis.needs_positive() || spec.q_basis.needs_positive();
    let mut sizes = [0usize; 2];
    let mut resp = [0usize; 2];
    for (index, u) in dataset.units.iter().enumerate() {
        sizes[u.group.index()] += 1;
        if u.d < 1 || u.d > m + 1 {
            out.push(Violation::DOutOfRange { index, d: u.d });
            continue;
        }
        match (u.d <= m, u.y) {
            (true, None) => out.push(Violation::MissingOutcome { index }),
            (false, Some(_)) => out.push(Violation::UnexpectedOutcome { index }),
            (true, Some(y)) => {
                resp[u.group.index()] += 1;
                if !y.is_finite() {
                    out.push(Violation::NonFiniteOutcome { index });
                } else if needs_positive && y <= 0.0 {
                    out.push(Violation::NonPositiveOutcome { index, y });
                }
            }
            (false, None) => {}
        }
    }
    for g in 0..2 {
        if sizes[g] == 0 {
            out.push(Violation::EmptyGroup { group: g });
        } else if resp[g] == 0 {
            out.push(Violation::NoRespondents { group: g });
        }
    }
    out
}

impl CallbackDataset {
    pub fn new(units: Vec<CallbackUnit>, m: u32) -> Self {
        Self { units, m }
    }

    /// Fails with the joined violation messages when the dataset is invalid.
    pub fn ensure_valid(&self, spec: &ModelSpec) -> Result<()> {
        let report = validate_dataset(self, spec);
        if report.is_empty() {
            Ok(())
        } else {
            let msgs: Vec<String> = report.iter().map(|v| v.to_string()).collect();
            Err(Error::InvalidData(msgs.join("; ")))
        }
    }

    /// N_0, N_1.
    pub fn group_sizes(&self) -> [usize; 2] {
        let mut s = [0; 2];
        for u in &self.units {
            s[u.group.index()] += 1;
        }
        s
    }

    /// n_0, n_1.
    pub fn respondent_counts(&self) -> [usize; 2] {
        let mut s = [0; 2];
        for u in self.units.iter().filter(|u| u.y.is_some()) {
            s[u.group.index()] += 1;
        }
        s
    }

    /// Respondents of group 0 followed by respondents of group 1, each in
    /// their original relative order.
    pub fn respondents(&self) -> impl Iterator<Item = &CallbackUnit> + '_ {
        [Group::Zero, Group::One].into_iter().flat_map(move |g| {
            self.units
                .iter()
                .filter(move |u| u.group == g && u.y.is_some())
        })
    }

    /// Observed outcomes of one group, in input order.
    pub fn observed_outcomes(&self, group: Group) -> Vec<f64> {
        self.units
            .iter()
            .filter(|u| u.group == group)
            .filter_map(|u| u.y)
            .collect()
    }

    /// Stable content hash used to check that two fits share a dataset.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.m.hash(&mut h);
        for u in &self.units {
            u.group.hash(&mut h);
            u.d.hash(&mut h);
            u.y.map(f64::to_bits).hash(&mut h);
        }
        h.finish()
    }
}

/// Callback model parameters phi = (alpha_1..alpha_m, beta).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseParams {
    pub alphas: Vec<f64>,
    pub beta: Vec<f64>,
}

impl ResponseParams {
    pub fn zeros(m: usize, dim_r: usize) -> Self {
        Self {
            alphas: vec![0.0; m],
            beta: vec![0.0; dim_r],
        }
    }

    pub fn new(alphas: Vec<f64>, beta: Vec<f64>) -> Self {
        Self { alphas, beta }
    }

    pub fn m(&self) -> usize {
        self.alphas.len()
    }

    /// Slope term beta' r(y).
    pub fn slope(&self, r: &[f64]) -> f64 {
        self.beta.iter().zip(r).map(|(b, x)| b * x).sum()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.alphas.iter().chain(&self.beta).copied().collect()
    }

    pub fn from_slice(x: &[f64], m: usize) -> Self {
        Self {
            alphas: x[..m].to_vec(),
            beta: x[m..].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.alphas.iter().chain(&self.beta).all(|x| x.is_finite())
    }

    /// Labels matching [`Self::to_vec`] order.
    pub fn labels(&self) -> Vec<String> {
        let mut out: Vec<String> = (1..=self.alphas.len()).map(|k| format!("alpha_{k}")).collect();
        if self.beta.len() == 1 {
            out.push("beta".into());
        } else {
            out.extend((1..=self.beta.len()).map(|j| format!("beta_{j}")));
        }
        out
    }
}

/// Density ratio parameters theta = (theta_0, theta_1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrmParams {
    pub theta0: f64,
    pub theta1: Vec<f64>,
}

impl DrmParams {
    pub fn zeros(dim_q: usize) -> Self {
        Self {
            theta0: 0.0,
            theta1: vec![0.0; dim_q],
        }
    }

    pub fn new(theta0: f64, theta1: Vec<f64>) -> Self {
        Self { theta0, theta1 }
    }

    /// theta' Q(y) for Q = (1, q(y)) given as a full feature vector.
    pub fn dot(&self, big_q: &[f64]) -> f64 {
        self.theta0 + self.theta1.iter().zip(&big_q[1..]).map(|(t, x)| t * x).sum::<f64>()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        std::iter::once(self.theta0).chain(self.theta1.iter().copied()).collect()
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Self {
            theta0: x[0],
            theta1: x[1..].to_vec(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.theta0 == 0.0 && self.theta1.iter().all(|&t| t == 0.0)
    }
}

/// Residuals of the two constraint sets at a fitted point.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintResiduals {
    /// sum p - 1
    pub c1_sum: f64,
    /// sum p exp(theta'Q) - 1
    pub c1_tilted_sum: f64,
    /// sum p rho(y; phi0) - eta0
    pub c2_eta0: f64,
    /// sum p exp(theta'Q) rho(y; phi1) - eta1
    pub c2_eta1: f64,
}

impl ConstraintResiduals {
    pub fn max_abs(&self) -> f64 {
        [self.c1_sum, self.c1_tilted_sum, self.c2_eta0, self.c2_eta1]
            .iter()
            .fold(0.0f64, |a, x| a.max(x.abs()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Log-EL after initialisation and after every EM cycle.
    pub log_el_trace: Vec<f64>,
    /// Per E-step: max over groups of |sum of weights - missing count|.
    pub weight_sum_residuals: Vec<f64>,
    pub theta_step_failures: usize,
    pub phi_step_failures: usize,
    pub residuals: ConstraintResiduals,
    pub messages: Vec<String>,
}

/// Output of one EM fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub spec: ModelSpec,
    pub null_restricted: bool,
    pub theta: DrmParams,
    pub phi0: ResponseParams,
    pub phi1: ResponseParams,
    pub eta0: f64,
    pub eta1: f64,
    /// Masses p over the pooled respondent support (group 0 first).
    pub masses: Vec<f64>,
    pub log_el: f64,
    pub iterations: usize,
    pub converged: bool,
    pub dataset_fingerprint: u64,
    pub diagnostics: FitDiagnostics,
}

/// Generic two-sample test outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub method: String,
    pub statistic: f64,
    /// Degrees of freedom of the reference distribution, when it has any.
    pub df: Option<f64>,
    pub p_value: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}
