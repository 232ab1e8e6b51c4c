//! EM fitting of the joint callback / density-ratio model.
//!
//! Each cycle computes E-step weights for the latent outcomes of the
//! nonrespondents, then updates (theta, p) through the profiled DRM
//! objective, the response parameters by weighted logistic regression, and
//! finally eta from the response constraints. The log-EL never decreases.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::callback::{self, AttemptRecord, ResponseFit};
use crate::data::{
    CallbackDataset, ConstraintResiduals, DrmParams, Features, FitDiagnostics, FittedModel, Group,
    ModelSpec, ResponseParams,
};
use crate::drm::{self, PooledSupport};
use crate::error::{Error, Result};

/// Bounds applied to eta inside log(1 - eta).
const ETA_CLAMP: f64 = 1e-10;

/// Largest |theta'Q| accepted from the theta step.
const MAX_TILT_EXPONENT: f64 = 600.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    /// Stop when the log-EL increment falls below this value.
    pub epsilon: f64,
    pub max_iter: usize,
    /// Number of starting points; the first is always the default start.
    pub starts: usize,
    /// Seed for perturbed starting points.
    pub seed: u64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            max_iter: 5000,
            starts: 1,
            seed: 0,
        }
    }
}

/// Parameter values at one EM iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct EmState {
    pub theta: DrmParams,
    pub phi0: ResponseParams,
    pub phi1: ResponseParams,
    pub eta0: f64,
    pub eta1: f64,
    pub masses: Vec<f64>,
    pub log_el: f64,
    pub iter: usize,
}

impl EmState {
    pub fn from_fit(fit: &FittedModel) -> Self {
        Self {
            theta: fit.theta.clone(),
            phi0: fit.phi0.clone(),
            phi1: fit.phi1.clone(),
            eta0: fit.eta0,
            eta1: fit.eta1,
            masses: fit.masses.clone(),
            log_el: fit.log_el,
            iter: 0,
        }
    }
}

/// E-step weights over the pooled respondent support.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// Expected group-0 nonrespondents located at each support point.
    pub w: Vec<f64>,
    /// Expected group-1 nonrespondents located at each support point.
    pub v: Vec<f64>,
}

/// Dataset-dependent quantities reused by every EM cycle.
#[derive(Debug, Clone)]
pub struct FitProblem {
    pub spec: ModelSpec,
    pub support: PooledSupport,
    /// (y, r(y)) per support point.
    r_support: Vec<(f64, Features)>,
    /// Callback indicator per support point.
    d: Vec<u32>,
    observed: Vec<AttemptRecord>,
    /// N_0, N_1
    pub totals: [usize; 2],
    /// n_0, n_1
    pub respondents: [usize; 2],
    fingerprint: u64,
}

impl FitProblem {
    pub fn new(dataset: &CallbackDataset, spec: &ModelSpec) -> Result<Self> {
        dataset.ensure_valid(spec)?;
        let support = PooledSupport::from_dataset(dataset, spec.q_basis)?;
        let mut r_support = Vec::with_capacity(support.len());
        let mut d = Vec::with_capacity(support.len());
        for u in dataset.respondents() {
            let y = u.y.expect("respondent has outcome");
            r_support.push((y, spec.r_basis.eval(y)?));
            d.push(u.d);
        }
        Ok(Self {
            spec: *spec,
            support,
            r_support,
            d,
            observed: callback::observed_records(dataset, spec.r_basis)?,
            totals: dataset.group_sizes(),
            respondents: dataset.respondent_counts(),
            fingerprint: dataset.fingerprint(),
        })
    }

    pub fn n(&self) -> usize {
        self.support.len()
    }

    fn missing(&self, g: usize) -> usize {
        self.totals[g] - self.respondents[g]
    }

    fn m(&self) -> usize {
        self.spec.m as usize
    }

    /// Default start: phi = 0, theta = 0, uniform masses, eta = 1 - 2^-m.
    pub fn initial_state(&self) -> EmState {
        let m = self.m();
        let eta = 1.0 - 0.5f64.powi(m as i32);
        let mut s = EmState {
            theta: DrmParams::zeros(self.spec.q_basis.dim()),
            phi0: ResponseParams::zeros(m, self.spec.r_basis.dim()),
            phi1: ResponseParams::zeros(m, self.spec.r_basis.dim()),
            eta0: eta,
            eta1: eta,
            masses: vec![1.0 / self.n() as f64; self.n()],
            log_el: 0.0,
            iter: 0,
        };
        s.log_el = self.log_el(&s);
        s
    }

    fn perturbed_state(&self, rng: &mut ChaCha8Rng) -> Result<EmState> {
        let normal = Normal::new(0.0, 0.5).expect("valid sd");
        let mut s = self.initial_state();
        for phi in [&mut s.phi0, &mut s.phi1] {
            for a in phi.alphas.iter_mut().chain(phi.beta.iter_mut()) {
                *a = normal.sample(rng);
            }
        }
        let (e0, e1) = self.eta_update(&s.masses, &s.theta, &s.phi0, &s.phi1)?;
        s.eta0 = e0;
        s.eta1 = e1;
        s.log_el = self.log_el(&s);
        Ok(s)
    }

    /// Log-EL up to an additive constant.
    pub fn log_el(&self, state: &EmState) -> f64 {
        let mut total = 0.0;
        for (j, ((_, r), &d)) in self.r_support.iter().zip(&self.d).enumerate() {
            let phi = match self.support.group[j] {
                Group::Zero => &state.phi0,
                Group::One => &state.phi1,
            };
            total += callback::path_log_prob(r, d as usize, phi);
            total += state.masses[j].ln();
            if self.support.group[j] == Group::One {
                total += state.theta.dot(&self.support.q_features[j]);
            }
        }
        for (g, eta) in [(0, state.eta0), (1, state.eta1)] {
            let missing = self.missing(g);
            if missing > 0 {
                let eta = eta.clamp(ETA_CLAMP, 1.0 - ETA_CLAMP);
                total += missing as f64 * (1.0 - eta).ln();
            }
        }
        total
    }

    pub fn e_step(&self, state: &EmState) -> Result<Weights> {
        let n = self.n();
        let mut w = vec![0.0; n];
        let mut v = vec![0.0; n];
        let m0 = self.missing(0);
        if m0 > 0 {
            if state.eta0 >= 1.0 {
                return Err(Error::DegenerateEta {
                    group: 0,
                    eta: state.eta0,
                    missing: m0,
                });
            }
            let scale = m0 as f64 / (1.0 - state.eta0).max(ETA_CLAMP);
            for (j, (_, r)) in self.r_support.iter().enumerate() {
                let surv = callback::log_survival(r, &state.phi0).exp();
                w[j] = scale * state.masses[j] * surv;
            }
        }
        let m1 = self.missing(1);
        if m1 > 0 {
            if state.eta1 >= 1.0 {
                return Err(Error::DegenerateEta {
                    group: 1,
                    eta: state.eta1,
                    missing: m1,
                });
            }
            let scale = m1 as f64 / (1.0 - state.eta1).max(ETA_CLAMP);
            for (j, (_, r)) in self.r_support.iter().enumerate() {
                let surv = callback::log_survival(r, &state.phi1).exp();
                let tilt = state.theta.dot(&self.support.q_features[j]).exp();
                v[j] = scale * state.masses[j] * tilt * surv;
            }
        }
        Ok(Weights { w, v })
    }

    /// Largest deviation of the weight sums from the nonrespondent counts.
    pub fn weight_sum_residual(&self, weights: &Weights) -> f64 {
        let sw: f64 = weights.w.iter().sum();
        let sv: f64 = weights.v.iter().sum();
        (sw - self.missing(0) as f64)
            .abs()
            .max((sv - self.missing(1) as f64).abs())
    }

    /// Updates (theta, p) by maximising the profiled objective from `warm`.
    pub fn m_step_theta_masses(&self, weights: &Weights, warm: &DrmParams) -> Result<(DrmParams, Vec<f64>)> {
        let fit = drm::maximize_profile(&self.support, &weights.w, &weights.v, self.totals, warm)?;
        let masses = drm::recover_masses(&fit.theta, &self.support, &weights.w, &weights.v, self.totals);
        Ok((fit.theta, masses))
    }

    /// Masses for the null-restricted fit, theta fixed at zero.
    pub fn null_masses(&self, weights: &Weights) -> Vec<f64> {
        let n = (self.totals[0] + self.totals[1]) as f64;
        weights
            .w
            .iter()
            .zip(&weights.v)
            .map(|(w, v)| (w + v + 1.0) / n)
            .collect()
    }

    fn failure_records(&self, weights: &[f64], group: Group) -> Vec<AttemptRecord> {
        let mut out = Vec::with_capacity(self.n() * self.m());
        callback::push_weighted_failures(&mut out, &self.r_support, weights, group, self.spec.m);
        out
    }

    /// Weighted logistic updates of both response models, each from its warm start.
    pub fn m_step_response(
        &self,
        weights: &Weights,
        warm0: &ResponseParams,
        warm1: &ResponseParams,
    ) -> (Result<ResponseFit>, Result<ResponseFit>) {
        let fit = |wts: &[f64], group: Group, warm: &ResponseParams| {
            let failures = self.failure_records(wts, group);
            callback::fit_response_parts(&[&self.observed, &failures], group, self.m(), warm)
        };
        (
            fit(&weights.w, Group::Zero, warm0),
            fit(&weights.v, Group::One, warm1),
        )
    }

    /// Expected response log-likelihood for fixed weights.
    pub fn response_objective(&self, weights: &Weights, phi0: &ResponseParams, phi1: &ResponseParams) -> f64 {
        let f0 = self.failure_records(&weights.w, Group::Zero);
        let f1 = self.failure_records(&weights.v, Group::One);
        callback::expanded_loglik(&self.observed, Group::Zero, phi0)
            + callback::expanded_loglik(&f0, Group::Zero, phi0)
            + callback::expanded_loglik(&self.observed, Group::One, phi1)
            + callback::expanded_loglik(&f1, Group::One, phi1)
    }

    /// eta from the response constraints given masses, theta and phi.
    pub fn eta_update(
        &self,
        masses: &[f64],
        theta: &DrmParams,
        phi0: &ResponseParams,
        phi1: &ResponseParams,
    ) -> Result<(f64, f64)> {
        let mut e0 = 0.0;
        let mut e1 = 0.0;
        for (j, (_, r)) in self.r_support.iter().enumerate() {
            let tilt = theta.dot(&self.support.q_features[j]).exp();
            e0 += masses[j] * callback::response_prob(r, phi0);
            e1 += masses[j] * tilt * callback::response_prob(r, phi1);
        }
        for (group, value) in [(0, e0), (1, e1)] {
            if !(value > -1e-10 && value < 1.0 + 1e-10) {
                return Err(Error::EtaOutOfRange { group, value });
            }
        }
        Ok((e0, e1))
    }

    pub fn residuals(&self, state: &EmState) -> ConstraintResiduals {
        let mut sum = 0.0;
        let mut tilted = 0.0;
        let mut c20 = 0.0;
        let mut c21 = 0.0;
        for (j, (_, r)) in self.r_support.iter().enumerate() {
            let p = state.masses[j];
            let tilt = state.theta.dot(&self.support.q_features[j]).exp();
            sum += p;
            tilted += p * tilt;
            c20 += p * callback::response_prob(r, &state.phi0);
            c21 += p * tilt * callback::response_prob(r, &state.phi1);
        }
        ConstraintResiduals {
            c1_sum: sum - 1.0,
            c1_tilted_sum: tilted - 1.0,
            c2_eta0: c20 - state.eta0,
            c2_eta1: c21 - state.eta1,
        }
    }

    /// Masses are positive and finite, and every tilt exp(theta'Q) can be
    /// formed without overflow.
    fn representable(&self, theta: &DrmParams, masses: &[f64]) -> bool {
        masses.iter().all(|p| p.is_finite() && *p > 0.0)
            && self.support.q_features.iter().all(|q| theta.dot(q).abs() < MAX_TILT_EXPONENT)
    }

    /// One full EM cycle from `state`. Failed inner solves keep the
    /// previous block and are reported through `diag`.
    pub fn em_cycle(&self, state: &EmState, restricted: bool, diag: &mut FitDiagnostics) -> Result<EmState> {
        let weights = self.e_step(state)?;
        diag.weight_sum_residuals.push(self.weight_sum_residual(&weights));

        let (theta, masses) = if restricted {
            (DrmParams::zeros(self.spec.q_basis.dim()), self.null_masses(&weights))
        } else {
            match self.m_step_theta_masses(&weights, &state.theta) {
                Ok(tm) if self.representable(&tm.0, &tm.1) => tm,
                Ok(_) => {
                    diag.theta_step_failures += 1;
                    note(diag, "theta step left the representable range; kept previous iterate".into());
                    (state.theta.clone(), state.masses.clone())
                }
                Err(e) => {
                    diag.theta_step_failures += 1;
                    note(diag, format!("theta step kept previous iterate: {e}"));
                    (state.theta.clone(), state.masses.clone())
                }
            }
        };

        let (r0, r1) = self.m_step_response(&weights, &state.phi0, &state.phi1);
        let mut keep = |res: Result<ResponseFit>, old: &ResponseParams| match res {
            Ok(fit) => {
                if fit.rank_deficient {
                    note(diag, "response model information matrix is rank deficient".into());
                }
                fit.phi
            }
            Err(e) => {
                diag.phi_step_failures += 1;
                note(diag, format!("response step kept previous iterate: {e}"));
                old.clone()
            }
        };
        let phi0 = keep(r0, &state.phi0);
        let phi1 = keep(r1, &state.phi1);

        let (eta0, eta1) = self.eta_update(&masses, &theta, &phi0, &phi1)?;
        let mut next = EmState {
            theta,
            phi0,
            phi1,
            eta0,
            eta1,
            masses,
            log_el: 0.0,
            iter: state.iter + 1,
        };
        next.log_el = self.log_el(&next);
        Ok(next)
    }

    /// Runs EM from `init` until the log-EL increment drops below epsilon.
    pub fn run(&self, init: EmState, restricted: bool, opts: &EmOptions) -> Result<FittedModel> {
        let mut diag = FitDiagnostics::default();
        let mut state = init;
        state.log_el = self.log_el(&state);
        diag.log_el_trace.push(state.log_el);
        let mut best = state.clone();
        let mut converged = false;
        for _ in 0..opts.max_iter {
            let next = self.em_cycle(&state, restricted, &mut diag)?;
            diag.log_el_trace.push(next.log_el);
            let increment = next.log_el - state.log_el;
            if next.log_el >= best.log_el {
                best = next.clone();
            }
            state = next;
            if increment < opts.epsilon {
                converged = true;
                break;
            }
        }
        if !converged {
            note(&mut diag, format!("iteration cap {} reached", opts.max_iter));
        }
        diag.residuals = self.residuals(&best);
        Ok(FittedModel {
            spec: self.spec,
            null_restricted: restricted,
            theta: best.theta,
            phi0: best.phi0,
            phi1: best.phi1,
            eta0: best.eta0,
            eta1: best.eta1,
            masses: best.masses,
            log_el: best.log_el,
            iterations: state.iter,
            converged,
            dataset_fingerprint: self.fingerprint,
            diagnostics: diag,
        })
    }

    /// Runs EM from the default start plus `opts.starts - 1` perturbed
    /// starts and keeps the fit with the largest log-EL.
    pub fn fit(&self, restricted: bool, opts: &EmOptions) -> Result<FittedModel> {
        let mut best = self.run(self.initial_state(), restricted, opts)?;
        if opts.starts > 1 {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ self.fingerprint);
            for _ in 1..opts.starts {
                let init = self.perturbed_state(&mut rng)?;
                if let Ok(fit) = self.run(init, restricted, opts) {
                    if fit.log_el > best.log_el {
                        best = fit;
                    }
                }
            }
        }
        Ok(best)
    }
}

fn note(diag: &mut FitDiagnostics, msg: String) {
    // Keep each distinct message once.
    if !diag.messages.contains(&msg) {
        diag.messages.push(msg);
    }
}

/// Unrestricted fit.
pub fn fit_full(dataset: &CallbackDataset, spec: &ModelSpec, opts: &EmOptions) -> Result<FittedModel> {
    FitProblem::new(dataset, spec)?.fit(false, opts)
}

/// Fit under the homogeneity restriction theta = 0.
pub fn fit_null(dataset: &CallbackDataset, spec: &ModelSpec, opts: &EmOptions) -> Result<FittedModel> {
    FitProblem::new(dataset, spec)?.fit(true, opts)
}
