//! Empirical likelihood ratio test of homogeneity and BIC basis selection.

use serde::{Deserialize, Serialize};

use crate::data::{Basis, CallbackDataset, FittedModel, ModelSpec, TestResult};
use crate::em::{EmOptions, EmState, FitProblem};
use crate::error::{Error, Result};
use crate::par::{self, Execution};

pub use crate::stats::chi_sq_upper_tail;

/// Negative statistics below this are treated as a failed optimisation.
pub const NEGATIVE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElrOptions {
    pub em: EmOptions,
    /// Random restarts used when the unrestricted fit falls below the null.
    pub restarts: usize,
    pub execution: Execution,
}

impl Default for ElrOptions {
    fn default() -> Self {
        Self {
            em: EmOptions::default(),
            restarts: 3,
            execution: Execution::Parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElrOutcome {
    pub r_n: f64,
    pub df: usize,
    pub p_value: f64,
    pub full_fit: FittedModel,
    pub null_fit: FittedModel,
    /// True if a negative statistic had to be clamped to zero.
    pub clamped: bool,
    pub warnings: Vec<String>,
}

impl ElrOutcome {
    pub fn test_result(&self) -> TestResult {
        TestResult {
            method: "ELR".into(),
            statistic: self.r_n,
            df: Some(self.df as f64),
            p_value: self.p_value,
            warnings: self.warnings.clone(),
        }
    }
}

/// Twice the log-EL gap between the unrestricted and null fits, unclamped.
pub fn raw_statistic(full: &FittedModel, null: &FittedModel) -> Result<f64> {
    if full.dataset_fingerprint != null.dataset_fingerprint || full.spec != null.spec {
        return Err(Error::MismatchedFits);
    }
    if full.null_restricted || !null.null_restricted {
        return Err(Error::MismatchedFits);
    }
    Ok(2.0 * (full.log_el - null.log_el))
}

/// R_N clamped at zero, with a warning when the raw value was below
/// `-NEGATIVE_TOLERANCE`.
pub fn elr_statistic(full: &FittedModel, null: &FittedModel) -> Result<(f64, Option<String>)> {
    let raw = raw_statistic(full, null)?;
    let warning = (raw < -NEGATIVE_TOLERANCE).then(|| format!("negative statistic {raw:e} clamped to zero"));
    Ok((raw.max(0.0), warning))
}

/// Fits both models and refers R_N to chi-square with dim q(y) degrees of freedom.
pub fn elr_test(dataset: &CallbackDataset, spec: &ModelSpec, opts: &ElrOptions) -> Result<ElrOutcome> {
    let problem = FitProblem::new(dataset, spec)?;
    let (full, null) = par::join(
        opts.execution,
        || problem.fit(false, &opts.em),
        || problem.fit(true, &opts.em),
    );
    let (mut full, null) = (full?, null?);
    let mut warnings = Vec::new();

    if raw_statistic(&full, &null)? < -NEGATIVE_TOLERANCE {
        // Starting the unrestricted fit from the null solution guarantees
        // it cannot end below the null log-EL.
        let warm = problem.run(EmState::from_fit(&null), false, &opts.em)?;
        let restarts = problem.fit(
            false,
            &EmOptions {
                starts: opts.restarts + 1,
                ..opts.em
            },
        )?;
        for cand in [warm, restarts] {
            if cand.log_el > full.log_el {
                full = cand;
            }
        }
        warnings.push("unrestricted fit refitted after negative statistic".to_string());
    }

    let (r_n, clamp_warning) = elr_statistic(&full, &null)?;
    let clamped = clamp_warning.is_some();
    warnings.extend(clamp_warning);
    for fit in [&full, &null] {
        if !fit.converged {
            let kind = if fit.null_restricted { "null" } else { "unrestricted" };
            warnings.push(format!("{kind} fit hit the iteration cap"));
        }
    }
    let df = spec.q_basis.dim();
    Ok(ElrOutcome {
        r_n,
        df,
        p_value: chi_sq_upper_tail(r_n, df),
        full_fit: full,
        null_fit: null,
        clamped,
        warnings,
    })
}

/// One (r, q) combination in a BIC search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicCell {
    pub r_basis: Basis,
    pub q_basis: Basis,
    /// Free finite-dimensional parameters: dim q + 2 (m + dim r).
    pub k: usize,
    pub log_el: Option<f64>,
    pub bic: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicSelection {
    pub selected: ModelSpec,
    pub cells: Vec<BicCell>,
    pub warnings: Vec<String>,
}

/// Fits the unrestricted model for every (r, q) pair and picks the smallest
/// BIC = -2 log-EL + k log N. Ties go to smaller k, then candidate order.
pub fn bic_select(
    dataset: &CallbackDataset,
    m: u32,
    r_candidates: &[Basis],
    q_candidates: &[Basis],
    opts: &ElrOptions,
) -> Result<BicSelection> {
    if r_candidates.is_empty() || q_candidates.is_empty() {
        return Err(Error::Config("BIC search needs at least one candidate per basis".into()));
    }
    let pairs: Vec<(Basis, Basis)> = r_candidates
        .iter()
        .flat_map(|&r| q_candidates.iter().map(move |&q| (r, q)))
        .collect();
    let n_total = dataset.units.len() as f64;
    let cells: Vec<BicCell> = par::map_indexed(pairs.len(), opts.execution, |i| {
        let (r, q) = pairs[i];
        let spec = ModelSpec::new(r, q, m);
        let k = spec.free_parameters();
        let fit = FitProblem::new(dataset, &spec).and_then(|p| p.fit(false, &opts.em));
        match fit {
            Ok(fit) => BicCell {
                r_basis: r,
                q_basis: q,
                k,
                log_el: Some(fit.log_el),
                bic: Some(-2.0 * fit.log_el + k as f64 * n_total.ln()),
                error: None,
            },
            Err(e) => BicCell {
                r_basis: r,
                q_basis: q,
                k,
                log_el: None,
                bic: None,
                error: Some(e.to_string()),
            },
        }
    });

    let mut warnings = Vec::new();
    let mut best: Option<&BicCell> = None;
    for cell in &cells {
        let Some(bic) = cell.bic else {
            warnings.push(format!(
                "r={} q={} excluded: {}",
                cell.r_basis,
                cell.q_basis,
                cell.error.as_deref().unwrap_or("fit failed")
            ));
            continue;
        };
        let better = match best {
            None => true,
            Some(b) => {
                let bb = b.bic.expect("selected cells have a BIC");
                bic < bb || (bic == bb && cell.k < b.k)
            }
        };
        if better {
            best = Some(cell);
        }
    }
    let best = best.ok_or_else(|| Error::Degenerate("every BIC cell failed".into()))?;
    Ok(BicSelection {
        selected: ModelSpec::new(best.r_basis, best.q_basis, m),
        cells,
        warnings,
    })
}
