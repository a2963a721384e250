//! Conjugate posteriors per source, posterior model weights, and the
//! model-averaged estimator.
//!
//! Under the Gaussian working model a source `s` with prior `N(ζ₀ˢ, 1/νˢ)`
//! has marginal likelihood proportional (up to a factor shared by all
//! sources) to `φ(m_t; ζ₀ˢ, σ²/N_t + 1/νˢ)`. The weights therefore only need
//! that one density per source, which is evaluated and normalized in the log
//! domain.

use std::f64::consts::PI;

use crate::model::{CellStats, SourcePrior, WorkingModel};
use crate::{Error, Result};

/// Constant in the exponential downweighting bound for biased sources.
pub const DOWNWEIGHT_RATE: f64 = 0.25;

/// Gaussian posterior on a cell mean under one source's prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourcePosterior {
    pub mean: f64,
    pub precision: f64,
}

/// Conjugate update of a source's prior with the cell's data.
///
/// With no data the posterior is the prior itself.
pub fn posterior_mean(
    stats: &CellStats,
    source: &SourcePrior,
    model: &WorkingModel,
    nu: f64,
) -> Result<SourcePosterior> {
    if !(nu.is_finite() && nu > 0.0) {
        return Err(Error::precondition(format!("prior precision must be positive, got {nu}")));
    }
    if stats.count() == 0 {
        return Ok(SourcePosterior { mean: source.prior_mean, precision: nu });
    }
    let data_precision = model.data_precision(stats.count());
    let precision = data_precision + nu;
    let sample_mean = stats.mean().expect("count >= 1");
    // Shrinkage form: exact when the sample mean equals the prior mean.
    let mean = source.prior_mean + data_precision / precision * (sample_mean - source.prior_mean);
    Ok(SourcePosterior { mean, precision })
}

/// Source-dependent part of the log marginal likelihood,
/// `log φ(m_t; ζ₀, σ²/N_t + 1/ν)`.
///
/// Returns `None` for an empty cell, where every source explains the (absent)
/// data equally well and the weights fall back to the prior model
/// probabilities.
pub fn log_marginal_kernel(
    stats: &CellStats,
    prior_mean: f64,
    nu: f64,
    model: &WorkingModel,
) -> Option<f64> {
    let mean = stats.mean()?;
    let v = model.variance() / stats.count() as f64 + 1.0 / nu;
    Some(-(mean - prior_mean).powi(2) / (2.0 * v) - 0.5 * (2.0 * PI * v).ln())
}

/// Posterior model probabilities over sources for one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    weights: Vec<f64>,
    log_kernels: Vec<f64>,
}

impl WeightVector {
    /// Normalizes `prior_s · exp(kernel_s)` with max-subtracted log-sum-exp.
    pub fn from_log_kernels(log_kernels: Vec<f64>, prior_model_probs: &[f64]) -> Result<Self> {
        validate_prior(prior_model_probs, log_kernels.len())?;
        if log_kernels.iter().any(|k| k.is_nan() || *k == f64::INFINITY) {
            return Err(Error::invalid("log kernels must not be NaN or +inf"));
        }
        let logs: Vec<f64> = log_kernels
            .iter()
            .zip(prior_model_probs)
            .map(|(&k, &p)| if p > 0.0 { p.ln() + k } else { f64::NEG_INFINITY })
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::invalid("every source has zero posterior mass"));
        }
        let unnormalized: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = unnormalized.iter().sum();
        let weights = unnormalized.into_iter().map(|u| u / total).collect();
        Ok(Self { weights, log_kernels })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_kernels(&self) -> &[f64] {
        &self.log_kernels
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Realized `log(α_a / α_b)`, computed from kernels so it stays finite
    /// when either weight underflows.
    pub fn log_odds(&self, a: usize, b: usize, prior_model_probs: &[f64]) -> f64 {
        (prior_model_probs[a].ln() + self.log_kernels[a])
            - (prior_model_probs[b].ln() + self.log_kernels[b])
    }
}

/// Uniform prior over `n` sources.
pub fn uniform_prior(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

fn validate_prior(prior_model_probs: &[f64], n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::EmptySources);
    }
    if prior_model_probs.len() != n {
        return Err(Error::LengthMismatch {
            what: "prior model probabilities",
            got: prior_model_probs.len(),
            expected: n,
        });
    }
    if prior_model_probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::invalid("prior model probabilities must be non-negative"));
    }
    let total: f64 = prior_model_probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("prior model probabilities sum to {total}, not 1")));
    }
    Ok(())
}

/// Posterior model probabilities `α_tˢ` for every source of a cell.
pub fn model_weights(
    stats: &CellStats,
    sources: &[SourcePrior],
    model: &WorkingModel,
    nus: &[f64],
    prior_model_probs: &[f64],
) -> Result<WeightVector> {
    if sources.is_empty() {
        return Err(Error::EmptySources);
    }
    if nus.len() != sources.len() {
        return Err(Error::LengthMismatch { what: "precisions", got: nus.len(), expected: sources.len() });
    }
    validate_prior(prior_model_probs, sources.len())?;
    if let Some(nu) = nus.iter().find(|nu| !(nu.is_finite() && **nu > 0.0)) {
        return Err(Error::precondition(format!("prior precision must be positive, got {nu}")));
    }
    if stats.count() == 0 {
        return Ok(WeightVector {
            weights: prior_model_probs.to_vec(),
            log_kernels: vec![0.0; sources.len()],
        });
    }
    let kernels = sources
        .iter()
        .zip(nus)
        .map(|(s, &nu)| log_marginal_kernel(stats, s.prior_mean, nu, model).expect("count >= 1"))
        .collect();
    WeightVector::from_log_kernels(kernels, prior_model_probs)
}

/// `Σ_s α_s ζ_tˢ`.
///
/// Accumulated as offsets from the heaviest source's mean, so agreeing
/// sources reproduce their common mean exactly.
pub fn bma_estimate(weights: &WeightVector, posteriors: &[SourcePosterior]) -> Result<f64> {
    if weights.len() != posteriors.len() {
        return Err(Error::LengthMismatch {
            what: "posteriors",
            got: posteriors.len(),
            expected: weights.len(),
        });
    }
    let w = weights.weights();
    let anchor = posteriors[argmax_weight(w)].mean;
    Ok(anchor + w.iter().zip(posteriors).map(|(a, p)| a * (p.mean - anchor)).sum::<f64>())
}

fn argmax_weight(w: &[f64]) -> usize {
    w.iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > w[best] { i } else { best })
}

/// Everything the estimator produces for one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellEstimate {
    pub nus: Vec<f64>,
    pub posteriors: Vec<SourcePosterior>,
    pub weights: WeightVector,
    pub estimate: f64,
}

/// Runs the full aggregation for one cell at a given design horizon.
pub fn estimate_cell(
    stats: &CellStats,
    sources: &[SourcePrior],
    model: &WorkingModel,
    design_horizon: u64,
    prior_model_probs: &[f64],
) -> Result<CellEstimate> {
    let nus = sources
        .iter()
        .map(|s| s.effective_precision(stats, design_horizon))
        .collect::<Result<Vec<_>>>()?;
    let posteriors = sources
        .iter()
        .zip(&nus)
        .map(|(s, &nu)| posterior_mean(stats, s, model, nu))
        .collect::<Result<Vec<_>>>()?;
    let weights = model_weights(stats, sources, model, &nus, prior_model_probs)?;
    let estimate = bma_estimate(&weights, &posteriors)?;
    Ok(CellEstimate { nus, posteriors, weights, estimate })
}

/// Arguments of the external-validity index: a source's bias against the
/// truth and its effective precision `p = ν / (1 + c)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvInputs {
    pub bias: f64,
    pub p: f64,
}

impl EvInputs {
    pub fn new(bias: f64, p: f64) -> Result<Self> {
        if !(p.is_finite() && p > 0.0) {
            return Err(Error::precondition(format!("effective precision must be positive, got {p}")));
        }
        if !bias.is_finite() {
            return Err(Error::invalid("bias must be finite"));
        }
        Ok(Self { bias, p })
    }

    /// Effective precision from a raw precision `nu` and limit ratio `c`.
    pub fn from_precision(bias: f64, nu: f64, c: f64) -> Result<Self> {
        Self::new(bias, nu / (1.0 + c))
    }
}

/// External-validity index `E(bias, p) = −p·bias² + log p`.
pub fn ev_index(inputs: EvInputs) -> Result<f64> {
    if !(inputs.p > 0.0) {
        return Err(Error::precondition(format!("p must be positive, got {}", inputs.p)));
    }
    Ok(-inputs.p * inputs.bias * inputs.bias + inputs.p.ln())
}

/// Leading-order prediction of `log(α_s / α_s2)`: half the index difference.
pub fn predicted_log_odds(s: EvInputs, s2: EvInputs) -> Result<f64> {
    Ok(0.5 * (ev_index(s)? - ev_index(s2)?))
}

/// Order bound on a biased source's weight.
///
/// Outside the diffuse regime the bound carries the prefactor
/// `ν_b / max_u ν_u`; when only a diffuse source competes it is the bare
/// exponential. Meant as a ceiling up to constants, not a prediction.
pub fn predicted_weight_bound(
    biased: EvInputs,
    nu_b: f64,
    max_unbiased_nu: f64,
    diffuse_regime: bool,
) -> Result<f64> {
    if biased.bias == 0.0 {
        return Err(Error::precondition("weight bound applies to biased sources only (bias = 0)"));
    }
    if !(nu_b > 0.0) {
        return Err(Error::precondition("biased source precision must be positive"));
    }
    let decay = (-DOWNWEIGHT_RATE * nu_b * biased.bias * biased.bias).exp();
    if diffuse_regime {
        Ok(decay)
    } else {
        if !(max_unbiased_nu > 0.0) {
            return Err(Error::precondition("unbiased source precision must be positive"));
        }
        Ok(nu_b / max_unbiased_nu * decay)
    }
}
