//! Post-run statistics: scaled errors, design summaries, the acceleration
//! factor, decay and rate fits, and the PAC sample-size calculator.

use std::collections::BTreeMap;

use crate::simulate::{DesignPoint, ReplicationResult};
use crate::{Error, Result};

/// `√n · |estimate − truth|`.
pub fn scaled_abs_error(estimate: f64, truth: f64, n: u64) -> Result<f64> {
    if n == 0 {
        return Err(Error::precondition("scaled error needs n >= 1"));
    }
    Ok((n as f64).sqrt() * (estimate - truth).abs())
}

/// Posterior-weighted average of `(1 + c)⁻¹` over the unbiased sources.
pub fn acceleration_factor(weights: &[f64], unbiased_mask: &[bool], c_values: &[f64]) -> Result<f64> {
    if weights.len() != unbiased_mask.len() || weights.len() != c_values.len() {
        return Err(Error::LengthMismatch {
            what: "acceleration inputs",
            got: unbiased_mask.len().min(c_values.len()),
            expected: weights.len(),
        });
    }
    if c_values.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
        return Err(Error::invalid("precision limits must be non-negative"));
    }
    let members: Vec<(f64, f64)> = weights
        .iter()
        .zip(unbiased_mask)
        .zip(c_values)
        .filter(|((_, &u), _)| u)
        .map(|((&w, _), &c)| (w, 1.0 / (1.0 + c)))
        .collect();
    if members.is_empty() {
        return Err(Error::NoUnbiasedSource);
    }
    let total: f64 = members.iter().map(|(w, _)| w).sum();
    if total > 0.0 {
        Ok(members.iter().map(|(w, f)| w * f).sum::<f64>() / total)
    } else {
        // Every unbiased weight underflowed; fall back to an even split.
        Ok(members.iter().map(|(_, f)| f).sum::<f64>() / members.len() as f64)
    }
}

/// Type-7 (linear interpolation) quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean and box-plot statistics of one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistributionSummary {
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl DistributionSummary {
    /// Summarizes `values`. The mean is taken over the sorted values, so
    /// the result does not depend on input order.
    pub fn from_values(mut values: Vec<f64>) -> Option<Self> {
        if values.is_empty() || values.iter().any(|v| v.is_nan()) {
            return None;
        }
        values.sort_by(f64::total_cmp);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        Some(Self {
            n: values.len(),
            mean,
            min: values[0],
            q1: quantile_sorted(&values, 0.25),
            median: quantile_sorted(&values, 0.5),
            q3: quantile_sorted(&values, 0.75),
            max: values[values.len() - 1],
        })
    }
}

/// Order-independent mean (sum of sorted values).
pub fn stable_mean(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub cell: usize,
    pub truth: f64,
    /// Scaled absolute errors of the sample mean; `None` if the cell was
    /// never assigned in any replication.
    pub standard_error: Option<DistributionSummary>,
    pub bma_error: Option<DistributionSummary>,
    /// Replications in which the cell stayed empty.
    pub missing: usize,
    pub mean_weights: Vec<f64>,
    /// Mean acceleration factor; `None` when no source is unbiased.
    pub mean_acceleration: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignSummary {
    pub replications: usize,
    pub cells: Vec<CellSummary>,
}

/// Aggregates replications of `design` into per-cell summaries.
pub fn summarize_design(design: &DesignPoint, results: &[ReplicationResult]) -> Result<DesignSummary> {
    if results.is_empty() {
        return Err(Error::precondition("cannot summarize zero replications"));
    }
    let ncells = design.environment.num_cells();
    let nsources = design.num_sources();
    let cells = (0..ncells)
        .map(|c| {
            let mask = design.unbiased_mask(c);
            let limits = design.precision_limits(c);
            let mut std_err = Vec::with_capacity(results.len());
            let mut bma_err = Vec::with_capacity(results.len());
            let mut weights = vec![Vec::with_capacity(results.len()); nsources];
            let mut accel = Vec::with_capacity(results.len());
            let mut missing = 0;
            let mut truth = design.environment.distributions()[c].mean();
            for r in results {
                let cell = r.cells.get(c).ok_or_else(|| Error::invalid("replication has too few cells"))?;
                truth = cell.truth;
                for (s, w) in cell.weights.weights().iter().enumerate() {
                    weights[s].push(*w);
                }
                if mask.iter().any(|&u| u) {
                    accel.push(acceleration_factor(cell.weights.weights(), &mask, &limits)?);
                }
                match cell.standard_estimate {
                    Some(m) if cell.count > 0 => {
                        std_err.push(scaled_abs_error(m, cell.truth, cell.count)?);
                        bma_err.push(scaled_abs_error(cell.bma_estimate, cell.truth, cell.count)?);
                    }
                    _ => missing += 1,
                }
            }
            Ok(CellSummary {
                cell: c,
                truth,
                standard_error: DistributionSummary::from_values(std_err),
                bma_error: DistributionSummary::from_values(bma_err),
                missing,
                mean_weights: weights.iter().map(|w| stable_mean(w)).collect(),
                mean_acceleration: (!accel.is_empty()).then(|| stable_mean(&accel)),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DesignSummary { replications: results.len(), cells })
}

/// Regressor used by a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateAxis {
    /// `log N`.
    LogN,
    /// `log(ℓ(N) / √N)` with `ℓ = log`.
    LogNWithEll,
    /// `ν_b · bias²` (decay fits of biased-source weights).
    PrecisionBiasSquared,
}

impl RateAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            RateAxis::LogN => "log_n",
            RateAxis::LogNWithEll => "log_n_with_ell",
            RateAxis::PrecisionBiasSquared => "nu_bias_squared",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub axis: RateAxis,
    pub points: usize,
}

/// Least squares line through `(x, y)`: `(slope, intercept, r²)`.
pub fn ols(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::precondition("least squares needs at least two paired points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::precondition("regressor has no spread"));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { (1.0 - ss_res / ss_tot).clamp(0.0, 1.0) } else { 1.0 };
    Ok((slope, intercept, r_squared))
}

/// Fits `log ᾱ_b = a + slope · ν_b bias²` over checkpoints. Trailing
/// checkpoints whose mean weight underflowed to zero are dropped.
pub fn decay_slope_fit(mean_alpha: &[f64], nu_values: &[f64], bias: f64) -> Result<RateFit> {
    if mean_alpha.len() != nu_values.len() {
        return Err(Error::LengthMismatch {
            what: "precision values",
            got: nu_values.len(),
            expected: mean_alpha.len(),
        });
    }
    let usable = mean_alpha.iter().take_while(|a| **a > 0.0).count();
    if usable < 3 {
        return Err(Error::precondition(format!(
            "decay fit needs at least 3 checkpoints with positive weight, got {usable}"
        )));
    }
    let x: Vec<f64> = nu_values[..usable].iter().map(|nu| nu * bias * bias).collect();
    let y: Vec<f64> = mean_alpha[..usable].iter().map(|a| a.ln()).collect();
    let (slope, intercept, r_squared) = ols(&x, &y)?;
    Ok(RateFit { slope, intercept, r_squared, axis: RateAxis::PrecisionBiasSquared, points: usable })
}

/// Fits `log mean|error|` against `log N` (or `log(log N / √N)`).
pub fn rate_regression(errors_by_n: &BTreeMap<u64, f64>, use_ell: bool) -> Result<RateFit> {
    if errors_by_n.len() < 3 {
        return Err(Error::precondition(format!(
            "rate regression needs at least 3 sample sizes, got {}",
            errors_by_n.len()
        )));
    }
    let mut x = Vec::with_capacity(errors_by_n.len());
    let mut y = Vec::with_capacity(errors_by_n.len());
    for (&n, &err) in errors_by_n {
        if !(err > 0.0 && err.is_finite()) {
            return Err(Error::invalid(format!("mean error at N = {n} must be positive, got {err}")));
        }
        let log_n = (n as f64).ln();
        let regressor = if use_ell {
            if n < 2 {
                return Err(Error::invalid("log-scaled axis needs N >= 2"));
            }
            log_n.ln() - 0.5 * log_n
        } else {
            log_n
        };
        x.push(regressor);
        y.push(err.ln());
    }
    let (slope, intercept, r_squared) = ols(&x, &y)?;
    let axis = if use_ell { RateAxis::LogNWithEll } else { RateAxis::LogN };
    Ok(RateFit { slope, intercept, r_squared, axis, points: x.len() })
}

/// Observations needed for precision `epsilon` when the rate is scaled by
/// `acceleration`: `⌈(A / ε²) log(1/ε)⌉`, at least 1.
pub fn pac_sample_size(epsilon: f64, acceleration: f64) -> Result<u64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::precondition(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    if !(acceleration > 0.0 && acceleration <= 1.0) {
        return Err(Error::precondition(format!("acceleration must lie in (0, 1], got {acceleration}")));
    }
    let n = (acceleration / (epsilon * epsilon) * (1.0 / epsilon).ln()).ceil();
    Ok((n as u64).max(1))
}
