//! Classical two-sample tests applied to respondents' outcomes only.

use serde::{Deserialize, Serialize};

use crate::data::{Basis, CallbackDataset, DrmParams, Group, TestResult};
use crate::drm::{self, PooledSupport};
use crate::error::{Error, Result};
use crate::stats;

/// Observed outcomes of the two groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoSampleData {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl TwoSampleData {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.is_empty() || y.is_empty() {
            return Err(Error::Degenerate("both samples must be nonempty".into()));
        }
        Ok(Self { x, y })
    }

    /// Respondents' outcomes; nonrespondents are ignored.
    pub fn from_dataset(dataset: &CallbackDataset) -> Result<Self> {
        Self::new(
            dataset.observed_outcomes(Group::Zero),
            dataset.observed_outcomes(Group::One),
        )
    }

    pub fn swapped(&self) -> Self {
        Self {
            x: self.y.clone(),
            y: self.x.clone(),
        }
    }
}

fn mean_var(s: &[f64]) -> (f64, f64) {
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let ss: f64 = s.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, ss / (n - 1.0))
}

/// Welch's unequal-variance t-test, two-sided.
pub fn t_test(data: &TwoSampleData) -> Result<TestResult> {
    let (nx, ny) = (data.x.len(), data.y.len());
    if nx < 2 || ny < 2 {
        return Err(Error::Degenerate("t-test needs at least two values per group".into()));
    }
    let (mx, vx) = mean_var(&data.x);
    let (my, vy) = mean_var(&data.y);
    let a = vx / nx as f64;
    let b = vy / ny as f64;
    if a + b == 0.0 {
        return Err(Error::Degenerate("zero variance in both groups".into()));
    }
    let t = (mx - my) / (a + b).sqrt();
    let df = (a + b).powi(2) / (a * a / (nx as f64 - 1.0) + b * b / (ny as f64 - 1.0));
    Ok(TestResult {
        method: "t-test".into(),
        statistic: t,
        df: Some(df),
        p_value: stats::student_t_two_sided(t, df),
        warnings: Vec::new(),
    })
}

/// Mid-ranks of `values` within the pooled sample, plus the tie term sum(t^3 - t).
fn midranks(values: &[f64]) -> (Vec<f64>, f64) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        i = j + 1;
    }
    (ranks, ties)
}

/// Wilcoxon-Mann-Whitney rank-sum test with tie-corrected normal
/// approximation and continuity correction. The statistic is U for `x`.
pub fn wilcoxon_test(data: &TwoSampleData) -> Result<TestResult> {
    let nx = data.x.len() as f64;
    let ny = data.y.len() as f64;
    let pooled: Vec<f64> = data.x.iter().chain(&data.y).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let rank_sum: f64 = ranks[..data.x.len()].iter().sum();
    let u = rank_sum - nx * (nx + 1.0) / 2.0;
    let n = nx + ny;
    let mean = nx * ny / 2.0;
    let var = nx * ny / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
    let mut warnings = Vec::new();
    let p_value = if var <= 0.0 || !var.is_finite() {
        warnings.push("all observations tied".to_string());
        1.0
    } else {
        let z = ((u - mean).abs() - 0.5).max(0.0) / var.sqrt();
        stats::normal_two_sided(z)
    };
    Ok(TestResult {
        method: "Wilcoxon".into(),
        statistic: u,
        df: None,
        p_value,
        warnings,
    })
}

/// Two-sample Kolmogorov-Smirnov test with the asymptotic Kolmogorov p-value.
pub fn ks_test(data: &TwoSampleData) -> Result<TestResult> {
    let d = ks_distance(&data.x, &data.y);
    let nx = data.x.len() as f64;
    let ny = data.y.len() as f64;
    let ne = nx * ny / (nx + ny);
    Ok(TestResult {
        method: "KS".into(),
        statistic: d,
        df: None,
        p_value: stats::kolmogorov_sf(ne.sqrt() * d),
        warnings: Vec::new(),
    })
}

/// sup_t |F_x(t) - F_y(t)| over the empirical CDFs.
pub fn ks_distance(x: &[f64], y: &[f64]) -> f64 {
    let mut xs = x.to_vec();
    let mut ys = y.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (nx, ny) = (xs.len() as f64, ys.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < xs.len() && j < ys.len() {
        let t = xs[i].min(ys[j]);
        while i < xs.len() && xs[i] <= t {
            i += 1;
        }
        while j < ys.len() && ys[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / nx - j as f64 / ny).abs());
    }
    d
}

/// Complete-data empirical likelihood ratio test under the density ratio
/// model with basis `q_basis`.
pub fn cai_elr_test(data: &TwoSampleData, q_basis: Basis) -> Result<TestResult> {
    let support = PooledSupport::from_samples(&data.x, &data.y, q_basis)?;
    let zeros = vec![0.0; support.len()];
    let totals = [data.x.len(), data.y.len()];
    let fit = drm::maximize_profile(&support, &zeros, &zeros, totals, &DrmParams::zeros(q_basis.dim()))?;
    // The profiled objective is zero at theta = 0, so twice its maximum is
    // the log-EL ratio.
    let mut warnings = Vec::new();
    let raw = 2.0 * fit.value;
    if raw < -1e-8 {
        warnings.push(format!("negative statistic {raw:e} clamped"));
    }
    let statistic = raw.max(0.0);
    let df = q_basis.dim();
    Ok(TestResult {
        method: "Cai's ELR".into(),
        statistic,
        df: Some(df as f64),
        p_value: stats::chi_sq_upper_tail(statistic, df),
        warnings,
    })
}
