//! Treatment assignment rules.
//!
//! A policy maps the history it has seen so far to a probability vector over
//! arms. History-dependent rules (ε-greedy, Thompson, UCB) only see their own
//! per-arm statistics; their randomness comes entirely from the generator the
//! caller passes in, so a fixed stream reproduces a fixed assignment path.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::model::CellStats;
use crate::{Error, Result};

pub const DEFAULT_UCB_RHO: f64 = 1.0;
pub const DEFAULT_THOMPSON_PRIOR_PRECISION: f64 = 1e-6;

fn default_rho() -> f64 {
    DEFAULT_UCB_RHO
}

fn default_thompson_precision() -> f64 {
    DEFAULT_THOMPSON_PRIOR_PRECISION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    /// Fixed randomization probabilities.
    Rct { probs: Vec<f64> },
    /// Deterministic round robin: arm `(t − 1) mod arms` at step `t`.
    Alternating { arms: usize },
    /// Exploration rate `ε_t = min(1, ε₀ t^{−κ})` split evenly across arms.
    EpsilonGreedy { arms: usize, epsilon0: f64, decay: f64 },
    /// One posterior draw per arm from a Gaussian reference model; play the argmax.
    Thompson {
        arms: usize,
        #[serde(default)]
        prior_mean: f64,
        #[serde(default = "default_thompson_precision")]
        prior_precision: f64,
    },
    /// `mean + ρ √(2 log t / n)`, unexplored arms first.
    Ucb {
        arms: usize,
        #[serde(default = "default_rho")]
        rho: f64,
    },
}

impl PolicySpec {
    pub fn balanced_rct(arms: usize) -> Self {
        PolicySpec::Rct { probs: vec![1.0 / arms as f64; arms] }
    }

    pub fn num_arms(&self) -> usize {
        match self {
            PolicySpec::Rct { probs } => probs.len(),
            PolicySpec::Alternating { arms }
            | PolicySpec::EpsilonGreedy { arms, .. }
            | PolicySpec::Thompson { arms, .. }
            | PolicySpec::Ucb { arms, .. } => *arms,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_arms() == 0 {
            return Err(Error::invalid("policy needs at least one arm"));
        }
        match self {
            PolicySpec::Rct { probs } => {
                if probs.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
                    return Err(Error::invalid("RCT probabilities must all be positive"));
                }
                let total: f64 = probs.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid(format!("RCT probabilities sum to {total}, not 1")));
                }
            }
            PolicySpec::Alternating { .. } => {}
            PolicySpec::EpsilonGreedy { epsilon0, decay, .. } => {
                if !(epsilon0.is_finite() && *epsilon0 > 0.0) {
                    return Err(Error::invalid(format!("epsilon0 must be positive, got {epsilon0}")));
                }
                // κ ≥ 1 makes Σ ε_i converge, so some arm may stop being explored.
                if !(0.0..1.0).contains(decay) {
                    return Err(Error::invalid(format!(
                        "epsilon-greedy decay must lie in [0, 1) so exploration diverges, got {decay}"
                    )));
                }
            }
            PolicySpec::Thompson { prior_mean, prior_precision, .. } => {
                if !prior_mean.is_finite() || !(prior_precision.is_finite() && *prior_precision > 0.0) {
                    return Err(Error::invalid("Thompson reference prior needs a finite mean and positive precision"));
                }
            }
            PolicySpec::Ucb { rho, .. } => {
                if !(rho.is_finite() && *rho > 0.0) {
                    return Err(Error::invalid(format!("UCB coefficient must be positive, got {rho}")));
                }
            }
        }
        Ok(())
    }

    /// `ε_t` for the ε-greedy schedule; `None` for other policies.
    pub fn epsilon_at(&self, t: u64) -> Option<f64> {
        match *self {
            PolicySpec::EpsilonGreedy { epsilon0, decay, .. } => {
                Some(epsilon_schedule(epsilon0, decay, t))
            }
            _ => None,
        }
    }
}

fn epsilon_schedule(epsilon0: f64, decay: f64, t: u64) -> f64 {
    (epsilon0 * (t as f64).powf(-decay)).min(1.0)
}

/// The per-arm statistics a policy sees.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ArmHistory {
    arms: Vec<CellStats>,
}

impl ArmHistory {
    pub fn new(arms: usize) -> Self {
        Self { arms: vec![CellStats::new(); arms] }
    }

    pub fn from_stats(arms: Vec<CellStats>) -> Self {
        Self { arms }
    }

    pub fn record(&mut self, arm: usize, y: f64) -> Result<()> {
        self.arms
            .get_mut(arm)
            .ok_or_else(|| Error::invalid(format!("arm {arm} out of range")))?
            .record(y)
    }

    pub fn arm(&self, arm: usize) -> &CellStats {
        &self.arms[arm]
    }

    pub fn arms(&self) -> &[CellStats] {
        &self.arms
    }

    pub fn num_arms(&self) -> usize {
        self.arms.len()
    }
}

fn point_mass(arms: usize, at: usize) -> Vec<f64> {
    let mut p = vec![0.0; arms];
    p[at] = 1.0;
    p
}

// Lowest-index argmax; NaN never wins.
fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_value {
            best = i;
            best_value = v;
        }
    }
    best
}

fn empirical_best(history: &ArmHistory) -> usize {
    if let Some(unseen) = history.arms().iter().position(|s| s.count() == 0) {
        return unseen;
    }
    argmax(history.arms().iter().map(|s| s.mean().expect("seen arm")))
}

/// `δ_t(·)`: the assignment distribution at step `t` (1-based).
pub fn assignment_probabilities<R: Rng + ?Sized>(
    spec: &PolicySpec,
    history: &ArmHistory,
    t: u64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if t == 0 {
        return Err(Error::precondition("steps are numbered from 1"));
    }
    let arms = spec.num_arms();
    if history.num_arms() != arms {
        return Err(Error::LengthMismatch { what: "arm history", got: history.num_arms(), expected: arms });
    }
    let probs = match *spec {
        PolicySpec::Rct { ref probs } => probs.clone(),
        PolicySpec::Alternating { arms } => point_mass(arms, ((t - 1) % arms as u64) as usize),
        PolicySpec::EpsilonGreedy { arms, epsilon0, decay } => {
            let eps = epsilon_schedule(epsilon0, decay, t);
            let mut p = vec![eps / arms as f64; arms];
            p[empirical_best(history)] += 1.0 - eps;
            p
        }
        PolicySpec::Thompson { arms, prior_mean, prior_precision } => {
            let draws = history.arms().iter().map(|s| {
                // Reference model: unit-variance Gaussian outcomes.
                let precision = prior_precision + s.count() as f64;
                let mean = (prior_precision * prior_mean + s.outcome_sum()) / precision;
                let z: f64 = StandardNormal.sample(rng);
                mean + z / precision.sqrt()
            });
            let draws: Vec<f64> = draws.collect();
            point_mass(arms, argmax(draws))
        }
        PolicySpec::Ucb { arms, rho } => {
            let log_t = (t as f64).ln();
            let index = history.arms().iter().map(|s| match s.mean() {
                None => f64::INFINITY,
                Some(m) => m + rho * (2.0 * log_t / s.count() as f64).sqrt(),
            });
            point_mass(arms, argmax(index))
        }
    };
    Ok(probs)
}

/// Inverse-CDF draw of an arm from `probs` with `u ∈ [0, 1)`.
pub fn sample_assignment(probs: &[f64], u: f64) -> usize {
    let mut cumulative = 0.0;
    for (arm, &p) in probs.iter().enumerate() {
        cumulative += p;
        if u < cumulative {
            return arm;
        }
    }
    // Rounding left u above the total: take the last arm with mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Finite-horizon evidence that every arm's assignment probabilities keep
/// accumulating. Divergence itself cannot be observed at a finite horizon;
/// `growth_ok` is a doubling heuristic: the partial sum at the horizon must
/// exceed twice its value at a quarter of the horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceCheck {
    pub horizon: u64,
    pub partial_sum: f64,
    pub quarter_sum: f64,
    pub growth_ok: bool,
}

/// Runs the doubling test on per-step, per-arm lower bounds
/// `bound(i, arm)` for `i = 1..=horizon`. The reported partial sum is the
/// smallest per-arm sum.
pub fn divergence_from_bounds<F>(bound: F, arms: usize, horizon: u64) -> DivergenceCheck
where
    F: Fn(u64, usize) -> f64,
{
    let quarter = horizon / 4;
    let mut sums = vec![0.0; arms];
    let mut quarter_sums = vec![0.0; arms];
    for i in 1..=horizon {
        for (arm, sum) in sums.iter_mut().enumerate() {
            *sum += bound(i, arm);
        }
        if i == quarter {
            quarter_sums.clone_from(&sums);
        }
    }
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let partial_sum = min(&sums);
    let quarter_sum = min(&quarter_sums);
    DivergenceCheck { horizon, partial_sum, quarter_sum, growth_ok: partial_sum > 2.0 * quarter_sum }
}

/// Analytic divergence check for policies whose exploration floor does not
/// depend on the realized history. Thompson and UCB need an empirical
/// envelope over simulated runs instead (see `simulate::empirical_divergence`).
pub fn check_exploration_divergence(spec: &PolicySpec, horizon: u64) -> Result<DivergenceCheck> {
    if horizon < 100 {
        return Err(Error::precondition(format!("divergence check needs horizon >= 100, got {horizon}")));
    }
    spec.validate()?;
    let arms = spec.num_arms();
    let check = match spec {
        PolicySpec::Rct { probs } => divergence_from_bounds(|_, arm| probs[arm], arms, horizon),
        PolicySpec::Alternating { arms } => {
            let k = *arms as u64;
            divergence_from_bounds(|i, arm| f64::from((i - 1) % k == arm as u64), *arms, horizon)
        }
        PolicySpec::EpsilonGreedy { epsilon0, decay, arms } => divergence_from_bounds(
            |i, _| epsilon_schedule(*epsilon0, *decay, i) / *arms as f64,
            *arms,
            horizon,
        ),
        PolicySpec::Thompson { .. } | PolicySpec::Ucb { .. } => {
            return Err(Error::precondition(
                "history-dependent policy: divergence needs an empirical envelope from simulation",
            ))
        }
    };
    Ok(check)
}
