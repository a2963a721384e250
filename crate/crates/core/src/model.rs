//! Domain types shared by every other module: cells, prior sources, the
//! working likelihood, and per-cell sufficient statistics.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Lower bound applied to schedule-derived precisions so that a source
/// never ends up with zero (or negative) precision.
pub const PRECISION_FLOOR: f64 = 1e-6;

/// A (treatment, covariate) cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub treatment: usize,
    pub covariate: usize,
}

impl CellKey {
    pub fn new(treatment: usize, covariate: usize) -> Self {
        Self { treatment, covariate }
    }
}

/// Gaussian working likelihood with known variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkingModel {
    variance: f64,
}

impl WorkingModel {
    pub fn new(variance: f64) -> Result<Self> {
        if !(variance.is_finite() && variance > 0.0) {
            return Err(Error::invalid(format!(
                "working variance must be positive and finite, got {variance}"
            )));
        }
        Ok(Self { variance })
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    /// Precision contributed by `count` observations, `count / σ²`.
    pub fn data_precision(&self, count: u64) -> f64 {
        count as f64 / self.variance
    }
}

impl Default for WorkingModel {
    fn default() -> Self {
        Self { variance: 1.0 }
    }
}

/// How a source's precision `ν` evolves with the experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrecisionSchedule {
    /// Fixed precision `ν₀`, independent of the experiment's size.
    Constant { nu: f64 },
    /// `ν_t = e · N_t(d, x)`: grows with the arm's running count.
    LinearInArmCount { rate: f64 },
    /// `ν = e · T / arms`: proportional to the expected per-arm sample size
    /// at the design horizon, constant within a run.
    FixedAtDesign {
        rate: f64,
        #[serde(default = "default_arms")]
        arms: u32,
    },
}

fn default_arms() -> u32 {
    2
}

impl PrecisionSchedule {
    pub fn validate(&self) -> Result<()> {
        let (name, value) = match *self {
            PrecisionSchedule::Constant { nu } => ("nu", nu),
            PrecisionSchedule::LinearInArmCount { rate } => ("rate", rate),
            PrecisionSchedule::FixedAtDesign { rate, arms } => {
                if arms == 0 {
                    return Err(Error::invalid("fixed_at_design needs arms >= 1"));
                }
                ("rate", rate)
            }
        };
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::invalid(format!(
                "precision {name} must be positive and finite, got {value}"
            )));
        }
        Ok(())
    }
}

/// One prior evidence source for a single cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourcePrior {
    pub prior_mean: f64,
    pub schedule: PrecisionSchedule,
    /// Marks the source as diffuse: its precision never exceeds this cap.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diffuse_cap: Option<f64>,
}

impl SourcePrior {
    pub fn new(prior_mean: f64, schedule: PrecisionSchedule) -> Result<Self> {
        let source = Self { prior_mean, schedule, diffuse_cap: None };
        source.validate()?;
        Ok(source)
    }

    /// A diffuse source with constant precision `nu`, capped at `nu`.
    pub fn diffuse(prior_mean: f64, nu: f64) -> Result<Self> {
        let source = Self {
            prior_mean,
            schedule: PrecisionSchedule::Constant { nu },
            diffuse_cap: Some(nu),
        };
        source.validate()?;
        Ok(source)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.prior_mean.is_finite() {
            return Err(Error::invalid(format!("prior mean must be finite, got {}", self.prior_mean)));
        }
        self.schedule.validate()?;
        if let Some(cap) = self.diffuse_cap {
            if !(cap.is_finite() && cap > 0.0) {
                return Err(Error::invalid(format!("diffuse cap must be positive, got {cap}")));
            }
            match self.schedule {
                PrecisionSchedule::Constant { nu } if nu <= cap => {}
                PrecisionSchedule::Constant { nu } => {
                    return Err(Error::invalid(format!(
                        "diffuse source has precision {nu} above its cap {cap}"
                    )))
                }
                _ => {
                    return Err(Error::invalid(
                        "a diffuse source needs a constant precision schedule",
                    ))
                }
            }
        }
        Ok(())
    }

    pub fn is_diffuse(&self) -> bool {
        matches!(
            (self.schedule, self.diffuse_cap),
            (PrecisionSchedule::Constant { nu }, Some(cap)) if nu <= cap
        )
    }

    /// Prior precision `ν` in effect for a cell with statistics `stats` in a
    /// run of `design_horizon` steps.
    pub fn effective_precision(&self, stats: &CellStats, design_horizon: u64) -> Result<f64> {
        if design_horizon == 0 {
            return Err(Error::precondition("design horizon must be at least 1"));
        }
        let nu = match self.schedule {
            PrecisionSchedule::Constant { nu } => nu,
            PrecisionSchedule::LinearInArmCount { rate } => {
                (rate * stats.count() as f64).max(PRECISION_FLOOR)
            }
            PrecisionSchedule::FixedAtDesign { rate, arms } => {
                (rate * design_horizon as f64 / f64::from(arms)).max(PRECISION_FLOOR)
            }
        };
        if nu > 0.0 {
            Ok(nu)
        } else {
            Err(Error::invalid(format!("schedule produced non-positive precision {nu}")))
        }
    }

    /// `c = lim ν_t / N_t`.
    pub fn precision_limit(&self) -> PrecisionLimit {
        match self.schedule {
            PrecisionSchedule::Constant { .. } => PrecisionLimit(0.0),
            PrecisionSchedule::LinearInArmCount { rate }
            | PrecisionSchedule::FixedAtDesign { rate, .. } => PrecisionLimit(rate),
        }
    }
}

/// Limit of a source's precision relative to the arm's sample size.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct PrecisionLimit(pub f64);

impl PrecisionLimit {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Running sufficient statistics of one cell.
///
/// Sums are accumulated directly (not as a streaming mean) so results do not
/// depend on how a replication's updates are grouped.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CellStats {
    count: u64,
    outcome_sum: f64,
    outcome_sq_sum: f64,
}

impl CellStats {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds statistics from raw sums. `count == 0` requires zero sums.
    pub fn from_sums(count: u64, outcome_sum: f64, outcome_sq_sum: f64) -> Result<Self> {
        if !(outcome_sum.is_finite() && outcome_sq_sum.is_finite()) || outcome_sq_sum < 0.0 {
            return Err(Error::invalid("outcome sums must be finite, squared sum non-negative"));
        }
        if count == 0 && (outcome_sum != 0.0 || outcome_sq_sum != 0.0) {
            return Err(Error::invalid("empty cell must have zero sums"));
        }
        Ok(Self { count, outcome_sum, outcome_sq_sum })
    }

    pub fn from_outcomes<I: IntoIterator<Item = f64>>(outcomes: I) -> Result<Self> {
        outcomes.into_iter().try_fold(Self::new(), Self::with_outcome)
    }

    pub fn record(&mut self, y: f64) -> Result<()> {
        if !y.is_finite() {
            return Err(Error::invalid(format!("outcome must be finite, got {y}")));
        }
        self.count += 1;
        self.outcome_sum += y;
        self.outcome_sq_sum += y * y;
        Ok(())
    }

    pub fn with_outcome(mut self, y: f64) -> Result<Self> {
        self.record(y)?;
        Ok(self)
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn outcome_sum(&self) -> f64 {
        self.outcome_sum
    }

    pub fn outcome_sq_sum(&self) -> f64 {
        self.outcome_sq_sum
    }

    /// Sample mean `m_t`, defined once the cell has an observation.
    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.outcome_sum / self.count as f64)
    }

    /// Unbiased sample variance; diagnostics only.
    pub fn sample_variance(&self) -> Option<f64> {
        (self.count > 1).then(|| {
            let n = self.count as f64;
            ((self.outcome_sq_sum - self.outcome_sum * self.outcome_sum / n) / (n - 1.0)).max(0.0)
        })
    }
}
