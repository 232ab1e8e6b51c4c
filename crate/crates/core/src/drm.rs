//! Density ratio model on the pooled respondent support: the profiled
//! theta-objective, its maximiser, mass recovery and the implied CDFs.

use arrayvec::ArrayVec;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Basis, CallbackDataset, DrmParams, Group};
use crate::error::Result;
use crate::newton::{self, NewtonOptions, Objective};

/// Q(y) = (1, q(y)).
pub type QFeatures = ArrayVec<f64, 3>;

/// Respondent outcomes of both groups, group 0 first, with Q(y) cached.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledSupport {
    pub values: Vec<f64>,
    pub group: Vec<Group>,
    pub q_features: Vec<QFeatures>,
}

impl PooledSupport {
    pub fn from_dataset(dataset: &CallbackDataset, q_basis: Basis) -> Result<Self> {
        let mut s = Self {
            values: Vec::new(),
            group: Vec::new(),
            q_features: Vec::new(),
        };
        for u in dataset.respondents() {
            let y = u.y.expect("respondent has outcome");
            s.q_features.push(q_basis.eval_with_intercept(y)?);
            s.values.push(y);
            s.group.push(u.group);
        }
        Ok(s)
    }

    /// Support built from two fully observed samples.
    pub fn from_samples(x: &[f64], y: &[f64], q_basis: Basis) -> Result<Self> {
        let mut s = Self {
            values: Vec::with_capacity(x.len() + y.len()),
            group: Vec::with_capacity(x.len() + y.len()),
            q_features: Vec::with_capacity(x.len() + y.len()),
        };
        for (g, sample) in [(Group::Zero, x), (Group::One, y)] {
            for &val in sample {
                s.q_features.push(q_basis.eval_with_intercept(val)?);
                s.values.push(val);
                s.group.push(g);
            }
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Dimension of theta, i.e. 1 + dim q.
    pub fn theta_dim(&self) -> usize {
        self.q_features.first().map_or(1, |q| q.len())
    }
}

/// exp{theta' Q(y)}.
pub fn density_ratio(y: f64, theta: &DrmParams, q_basis: Basis) -> Result<f64> {
    let q = q_basis.eval_with_intercept(y)?;
    Ok(theta.dot(&q).exp())
}

fn dot(x: &[f64], q: &[f64]) -> f64 {
    x.iter().zip(q).map(|(a, b)| a * b).sum()
}

struct Profile<'a> {
    support: &'a PooledSupport,
    w: &'a [f64],
    v: &'a [f64],
    /// N_1 / N
    lambda: f64,
}

impl Profile<'_> {
    fn new<'a>(support: &'a PooledSupport, w: &'a [f64], v: &'a [f64], totals: [usize; 2]) -> Profile<'a> {
        let n = (totals[0] + totals[1]) as f64;
        Profile {
            support,
            w,
            v,
            lambda: totals[1] as f64 / n,
        }
    }

    /// log(1 + lambda (e^s - 1)) without overflow for large s.
    fn log_denominator(&self, s: f64) -> f64 {
        let l = self.lambda;
        if s > 0.0 {
            s + (l + (1.0 - l) * (-s).exp()).ln()
        } else {
            (l * s.exp_m1()).ln_1p()
        }
    }
}

impl Objective for Profile<'_> {
    fn value(&self, x: &DVector<f64>) -> f64 {
        let mut f = 0.0;
        for (j, q) in self.support.q_features.iter().enumerate() {
            let s = dot(x.as_slice(), q);
            let c = self.w[j] + self.v[j] + 1.0;
            let own = if self.support.group[j] == Group::One { 1.0 } else { 0.0 };
            f += -c * self.log_denominator(s) + (self.v[j] + own) * s;
        }
        f
    }

    fn derivatives(&self, x: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        let p = x.len();
        let l = self.lambda;
        let mut f = 0.0;
        let mut g = DVector::zeros(p);
        let mut h = DMatrix::zeros(p, p);
        for (j, q) in self.support.q_features.iter().enumerate() {
            let s = dot(x.as_slice(), q);
            let c = self.w[j] + self.v[j] + 1.0;
            let own = if self.support.group[j] == Group::One { 1.0 } else { 0.0 };
            f += -c * self.log_denominator(s) + (self.v[j] + own) * s;
            // t = lambda e^s / (1 + lambda (e^s - 1)), in (0, 1).
            let t = if s > 0.0 {
                l / (l + (1.0 - l) * (-s).exp())
            } else {
                let e = s.exp();
                l * e / (1.0 - l + l * e)
            };
            let gs = -c * t + self.v[j] + own;
            let hs = -c * t * (1.0 - t);
            for a in 0..p {
                g[a] += gs * q[a];
                for b in 0..p {
                    h[(a, b)] += hs * q[a] * q[b];
                }
            }
        }
        (f, g, h)
    }
}

/// Profiled theta-objective given E-step weights and group totals (N_0, N_1).
pub fn profile_objective(
    theta: &DrmParams,
    support: &PooledSupport,
    w: &[f64],
    v: &[f64],
    totals: [usize; 2],
) -> f64 {
    Profile::new(support, w, v, totals).value(&DVector::from_vec(theta.to_vec()))
}

/// Gradient of [`profile_objective`] with respect to theta.
pub fn profile_gradient(
    theta: &DrmParams,
    support: &PooledSupport,
    w: &[f64],
    v: &[f64],
    totals: [usize; 2],
) -> Vec<f64> {
    let (_, g, _) = Profile::new(support, w, v, totals).derivatives(&DVector::from_vec(theta.to_vec()));
    g.iter().copied().collect()
}

#[derive(Debug, Clone)]
pub struct ProfileFit {
    pub theta: DrmParams,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    /// The Hessian was singular somewhere on the path, e.g. a single atom.
    pub degenerate: bool,
}

/// Maximises the profiled objective by safeguarded Newton from `init`.
pub fn maximize_profile(
    support: &PooledSupport,
    w: &[f64],
    v: &[f64],
    totals: [usize; 2],
    init: &DrmParams,
) -> Result<ProfileFit> {
    let obj = Profile::new(support, w, v, totals);
    let res = newton::maximize(
        &obj,
        DVector::from_vec(init.to_vec()),
        NewtonOptions {
            polish_steps: 3,
            ..NewtonOptions::default()
        },
    )?;
    Ok(ProfileFit {
        theta: DrmParams::from_slice(res.x.as_slice()),
        value: res.value,
        grad_norm: res.grad_norm,
        iterations: res.iterations,
        degenerate: res.singular,
    })
}

/// Baseline masses p implied by theta and the weights.
pub fn recover_masses(
    theta: &DrmParams,
    support: &PooledSupport,
    w: &[f64],
    v: &[f64],
    totals: [usize; 2],
) -> Vec<f64> {
    let n = (totals[0] + totals[1]) as f64;
    let lambda = totals[1] as f64 / n;
    support
        .q_features
        .iter()
        .enumerate()
        .map(|(j, q)| {
            let s = theta.dot(q);
            let c = w[j] + v[j] + 1.0;
            if s > 0.0 {
                // Divide through by e^s to keep the denominator finite.
                c * (-s).exp() / (n * (lambda + (1.0 - lambda) * (-s).exp()))
            } else {
                c / (n * (1.0 + lambda * s.exp_m1()))
            }
        })
        .collect()
}

/// Right-continuous step function over sorted jump points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepCdf {
    pub points: Vec<f64>,
    pub values: Vec<f64>,
}

impl StepCdf {
    fn from_jumps(mut jumps: Vec<(f64, f64)>) -> Self {
        jumps.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut points: Vec<f64> = Vec::with_capacity(jumps.len());
        let mut values: Vec<f64> = Vec::with_capacity(jumps.len());
        let mut acc = 0.0;
        for (y, mass) in jumps {
            acc += mass;
            if points.last() == Some(&y) {
                *values.last_mut().unwrap() = acc;
            } else {
                points.push(y);
                values.push(acc);
            }
        }
        Self { points, values }
    }

    pub fn eval(&self, y: f64) -> f64 {
        let idx = self.points.partition_point(|&p| p <= y);
        if idx == 0 {
            0.0
        } else {
            self.values[idx - 1]
        }
    }
}

/// Estimated (F_0, F_1) as step CDFs on the pooled support.
pub fn cdf_estimates(masses: &[f64], theta: &DrmParams, support: &PooledSupport) -> (StepCdf, StepCdf) {
    let f0 = support.values.iter().zip(masses).map(|(&y, &p)| (y, p)).collect();
    let f1 = support
        .values
        .iter()
        .zip(masses)
        .zip(&support.q_features)
        .map(|((&y, &p), q)| (y, p * theta.dot(q).exp()))
        .collect();
    (StepCdf::from_jumps(f0), StepCdf::from_jumps(f1))
}
