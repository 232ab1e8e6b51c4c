//! Callback response model: attempt-level logistic probabilities, response
//! path probabilities and the person-attempt expansion used to fit the
//! response parameters by weighted logistic regression.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Basis, CallbackDataset, Features, Group, ResponseParams};
use crate::error::{Error, Result};
use crate::newton::{self, NewtonOptions, Objective};

/// Logistic function, branching on sign so that neither branch overflows.
#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(logistic(x)), accurate in both tails.
#[inline]
pub fn log_logistic(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// pi(y; alpha_k, beta) for a single attempt.
pub fn attempt_prob(y: f64, alpha_k: f64, beta: &[f64], r_basis: Basis) -> Result<f64> {
    let r = r_basis.eval(y)?;
    let slope: f64 = beta.iter().zip(&r).map(|(b, x)| b * x).sum();
    Ok(logistic(alpha_k + slope))
}

/// rho_k(y; phi): respond exactly at attempt `k` (1-based).
pub fn response_path_prob(y: f64, k: usize, phi: &ResponseParams, r_basis: Basis) -> Result<f64> {
    assert!(k >= 1 && k <= phi.m(), "attempt {k} outside 1..={}", phi.m());
    let r = r_basis.eval(y)?;
    Ok(path_log_prob(&r, k, phi).exp())
}

/// rho(y; phi) = 1 - prod_k (1 - pi_k).
pub fn overall_response_prob(y: f64, phi: &ResponseParams, r_basis: Basis) -> Result<f64> {
    let r = r_basis.eval(y)?;
    Ok(response_prob(&r, phi))
}

/// log rho_k from pre-evaluated features.
pub(crate) fn path_log_prob(r: &[f64], k: usize, phi: &ResponseParams) -> f64 {
    let s = phi.slope(r);
    let fails: f64 = phi.alphas[..k - 1]
        .iter()
        .map(|a| log_logistic(-(a + s)))
        .sum();
    fails + log_logistic(phi.alphas[k - 1] + s)
}

/// log of the probability of no response in any of the m attempts.
pub(crate) fn log_survival(r: &[f64], phi: &ResponseParams) -> f64 {
    let s = phi.slope(r);
    phi.alphas.iter().map(|a| log_logistic(-(a + s))).sum()
}

pub(crate) fn response_prob(r: &[f64], phi: &ResponseParams) -> f64 {
    -log_survival(r, phi).exp_m1()
}

/// One Bernoulli record of the person-attempt expansion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub y: f64,
    /// r(y), evaluated once.
    pub r: Features,
    /// 1-based attempt number.
    pub attempt: u32,
    pub responded: bool,
    pub weight: f64,
    /// Which group's response parameters this record informs.
    pub param_group: Group,
}

/// Observed-path records: for a respondent with D = k, failures at attempts
/// 1..k-1 and a success at k, each with unit weight.
pub(crate) fn observed_records(dataset: &CallbackDataset, r_basis: Basis) -> Result<Vec<AttemptRecord>> {
    let mut out = Vec::new();
    for u in dataset.respondents() {
        let y = u.y.expect("respondent has outcome");
        let r = r_basis.eval(y)?;
        for k in 1..=u.d {
            out.push(AttemptRecord {
                y,
                r: r.clone(),
                attempt: k,
                responded: k == u.d,
                weight: 1.0,
                param_group: u.group,
            });
        }
    }
    Ok(out)
}

/// Pseudo-nonrespondent records: every support point fails all m attempts
/// under `group`'s parameters, weighted by that point's E-step weight.
/// Zero weights emit nothing.
pub(crate) fn push_weighted_failures(
    out: &mut Vec<AttemptRecord>,
    support: &[(f64, Features)],
    weights: &[f64],
    group: Group,
    m: u32,
) {
    for ((y, r), &w) in support.iter().zip(weights) {
        if w > 0.0 {
            for k in 1..=m {
                out.push(AttemptRecord {
                    y: *y,
                    r: r.clone(),
                    attempt: k,
                    responded: false,
                    weight: w,
                    param_group: group,
                });
            }
        }
    }
}

/// Expands the respondents of `dataset` into Bernoulli attempt records.
///
/// `w` and `v` are E-step weights over all respondents (group 0 first) for
/// the group-0 and group-1 response models. Maximising the weighted
/// Bernoulli log-likelihood of the output, separately for each
/// `param_group`, maximises the expected response log-likelihood.
pub fn expand_person_attempts(
    dataset: &CallbackDataset,
    r_basis: Basis,
    w: &[f64],
    v: &[f64],
) -> Result<Vec<AttemptRecord>> {
    let n: usize = dataset.respondent_counts().iter().sum();
    if w.len() != n || v.len() != n {
        return Err(Error::InvalidData(format!(
            "expected {n} weights per model, got {} and {}",
            w.len(),
            v.len()
        )));
    }
    for (index, &weight) in w.iter().chain(v).enumerate() {
        if weight.is_nan() || weight < 0.0 {
            return Err(Error::NegativeWeight {
                index: index % n.max(1),
                weight,
            });
        }
    }
    let mut out = observed_records(dataset, r_basis)?;
    let support: Vec<(f64, Features)> = dataset
        .respondents()
        .map(|u| {
            let y = u.y.expect("respondent has outcome");
            r_basis.eval(y).map(|r| (y, r))
        })
        .collect::<Result<_>>()?;
    push_weighted_failures(&mut out, &support, w, Group::Zero, dataset.m);
    push_weighted_failures(&mut out, &support, v, Group::One, dataset.m);
    Ok(out)
}

/// Weighted Bernoulli log-likelihood of the records belonging to `group`.
pub fn expanded_loglik(records: &[AttemptRecord], group: Group, phi: &ResponseParams) -> f64 {
    records
        .iter()
        .filter(|rec| rec.param_group == group)
        .map(|rec| {
            let eta = phi.alphas[rec.attempt as usize - 1] + phi.slope(&rec.r);
            let l = if rec.responded {
                log_logistic(eta)
            } else {
                log_logistic(-eta)
            };
            rec.weight * l
        })
        .sum()
}

struct AttemptLogistic<'a> {
    records: Vec<&'a AttemptRecord>,
    m: usize,
}

impl AttemptLogistic<'_> {
    fn eta(&self, rec: &AttemptRecord, x: &DVector<f64>) -> f64 {
        let slope: f64 = rec.r.iter().enumerate().map(|(j, r)| x[self.m + j] * r).sum();
        x[rec.attempt as usize - 1] + slope
    }
}

impl Objective for AttemptLogistic<'_> {
    fn value(&self, x: &DVector<f64>) -> f64 {
        self.records
            .iter()
            .map(|rec| {
                let eta = self.eta(rec, x);
                let l = if rec.responded {
                    log_logistic(eta)
                } else {
                    log_logistic(-eta)
                };
                rec.weight * l
            })
            .sum()
    }

    fn derivatives(&self, x: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        let p = x.len();
        let dim_r = p - self.m;
        let mut f = 0.0;
        let mut g = DVector::zeros(p);
        // Attempt intercepts are one-hot, so their Hessian block is diagonal.
        let mut h_alpha = vec![0.0; self.m];
        let mut h_cross = DMatrix::<f64>::zeros(self.m, dim_r);
        let mut h_beta = DMatrix::<f64>::zeros(dim_r, dim_r);
        for rec in &self.records {
            let eta = self.eta(rec, x);
            let pi = logistic(eta);
            let k = rec.attempt as usize - 1;
            let w = rec.weight;
            let resid = if rec.responded {
                f += w * log_logistic(eta);
                1.0 - pi
            } else {
                f += w * log_logistic(-eta);
                -pi
            };
            let curv = w * pi * (1.0 - pi);
            g[k] += w * resid;
            h_alpha[k] += curv;
            for (i, ri) in rec.r.iter().enumerate() {
                g[self.m + i] += w * resid * ri;
                h_cross[(k, i)] += curv * ri;
                for (j, rj) in rec.r.iter().enumerate() {
                    h_beta[(i, j)] += curv * ri * rj;
                }
            }
        }
        let mut h = DMatrix::zeros(p, p);
        for k in 0..self.m {
            h[(k, k)] = -h_alpha[k];
            for i in 0..dim_r {
                h[(k, self.m + i)] = -h_cross[(k, i)];
                h[(self.m + i, k)] = -h_cross[(k, i)];
            }
        }
        for i in 0..dim_r {
            for j in 0..dim_r {
                h[(self.m + i, self.m + j)] = -h_beta[(i, j)];
            }
        }
        (f, g, h)
    }
}

/// Result of a weighted logistic fit of one group's response parameters.
#[derive(Debug, Clone)]
pub struct ResponseFit {
    pub phi: ResponseParams,
    pub loglik: f64,
    pub iterations: usize,
    /// The information matrix was numerically singular along the path.
    pub rank_deficient: bool,
}

/// Largest coefficient magnitude accepted before declaring separation.
const SEPARATION_BOUND: f64 = 50.0;

/// Maximises [`expanded_loglik`] for `group` by Newton's method from `warm`.
pub fn fit_response_model(
    records: &[AttemptRecord],
    group: Group,
    m: usize,
    warm: &ResponseParams,
) -> Result<ResponseFit> {
    fit_response_parts(&[records], group, m, warm)
}

/// As [`fit_response_model`], over records split across several slices.
pub(crate) fn fit_response_parts(
    parts: &[&[AttemptRecord]],
    group: Group,
    m: usize,
    warm: &ResponseParams,
) -> Result<ResponseFit> {
    let recs: Vec<&AttemptRecord> = parts
        .iter()
        .flat_map(|p| p.iter())
        .filter(|r| r.param_group == group)
        .collect();
    let mut succ = vec![0.0; m];
    let mut fail = vec![0.0; m];
    for rec in &recs {
        let k = rec.attempt as usize - 1;
        if rec.responded {
            succ[k] += rec.weight;
        } else {
            fail[k] += rec.weight;
        }
    }
    for k in 0..m {
        if succ[k] <= 0.0 || fail[k] <= 0.0 {
            let side = if succ[k] <= 0.0 { "no successes" } else { "no failures" };
            return Err(Error::Separation {
                group: group.index(),
                detail: format!("attempt {} has {side}; alpha_{} diverges", k + 1, k + 1),
            });
        }
    }
    let obj = AttemptLogistic { records: recs, m };
    let x0 = DVector::from_vec(warm.to_vec());
    let res = newton::maximize(&obj, x0, NewtonOptions::default()).map_err(|e| match e {
        Error::NoConvergence { last, .. }
            if last.iter().any(|x| x.abs() > SEPARATION_BOUND) =>
        {
            Error::Separation {
                group: group.index(),
                detail: "coefficients diverge".into(),
            }
        }
        other => other,
    })?;
    if res.x.amax() > SEPARATION_BOUND {
        return Err(Error::Separation {
            group: group.index(),
            detail: format!("coefficient magnitude {:.1} exceeds bound", res.x.amax()),
        });
    }
    Ok(ResponseFit {
        phi: ResponseParams::from_slice(res.x.as_slice(), m),
        loglik: res.value,
        iterations: res.iterations,
        rank_deficient: res.singular,
    })
}
