//! Outcome environments and seeded Monte Carlo replication.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bma::{estimate_cell, uniform_prior, WeightVector};
use crate::model::{CellKey, CellStats, PrecisionSchedule, SourcePrior, WorkingModel};
use crate::policies::{
    assignment_probabilities, divergence_from_bounds, sample_assignment, ArmHistory,
    DivergenceCheck, PolicySpec,
};
use crate::rng::{stream, StreamPurpose};
use crate::{Error, Result};

/// Means of the control and treated arms in the reference design.
pub const PAPER_ARM_MEANS: [f64; 2] = [1.0, 1.3];
/// Prior-mean shift of the biased informative source.
pub const PAPER_BIAS: f64 = 1.0;
/// Precision of the diffuse baseline source.
pub const PAPER_DIFFUSE_NU: f64 = 1.0;
/// Sample-size grid of the reference design.
pub const PAPER_T_GRID: [u64; 5] = [50, 100, 250, 500, 750];
/// Evidence-scale grid of the reference design.
pub const PAPER_E_GRID: [f64; 3] = [0.5, 1.0, 2.0];
pub const PAPER_REPLICATIONS: u64 = 1000;

/// Distribution of a cell's potential outcome. Every variant has a finite
/// second moment and its mean is exactly the stored location.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum OutcomeDistribution {
    Gaussian { mean: f64, sd: f64 },
    Bernoulli { p: f64 },
    /// `mean − exp(shape²/2) + exp(shape·Z)`: right-skewed with the given mean.
    ShiftedLogNormal { mean: f64, shape: f64 },
    /// Degenerate distribution; used for noise-free checks.
    Constant { value: f64 },
}

impl OutcomeDistribution {
    pub fn mean(&self) -> f64 {
        match *self {
            OutcomeDistribution::Gaussian { mean, .. }
            | OutcomeDistribution::ShiftedLogNormal { mean, .. } => mean,
            OutcomeDistribution::Bernoulli { p } => p,
            OutcomeDistribution::Constant { value } => value,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            OutcomeDistribution::Gaussian { sd, .. } => sd * sd,
            OutcomeDistribution::Bernoulli { p } => p * (1.0 - p),
            OutcomeDistribution::ShiftedLogNormal { shape, .. } => {
                let s2 = shape * shape;
                (s2.exp() - 1.0) * s2.exp()
            }
            OutcomeDistribution::Constant { .. } => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OutcomeDistribution::Gaussian { mean, sd } => mean.is_finite() && sd.is_finite() && sd > 0.0,
            OutcomeDistribution::Bernoulli { p } => (0.0..=1.0).contains(&p),
            OutcomeDistribution::ShiftedLogNormal { mean, shape } => {
                mean.is_finite() && shape.is_finite() && shape > 0.0 && shape < 5.0
            }
            OutcomeDistribution::Constant { value } => value.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid outcome distribution {self:?}")))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            OutcomeDistribution::Gaussian { mean, sd } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + sd * z
            }
            OutcomeDistribution::Bernoulli { p } => {
                let hit = Bernoulli::new(p).expect("validated p").sample(rng);
                f64::from(u8::from(hit))
            }
            OutcomeDistribution::ShiftedLogNormal { mean, shape } => {
                let z: f64 = StandardNormal.sample(rng);
                mean - (0.5 * shape * shape).exp() + (shape * z).exp()
            }
            OutcomeDistribution::Constant { value } => value,
        }
    }
}

/// Outcome distributions for every (arm, covariate) cell plus the covariate
/// distribution. Cells are stored covariate-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    arms: usize,
    covariate_probs: Vec<f64>,
    cells: Vec<OutcomeDistribution>,
}

impl Environment {
    pub fn new(arms: usize, covariate_probs: Vec<f64>, cells: Vec<OutcomeDistribution>) -> Result<Self> {
        let env = Self { arms, covariate_probs, cells };
        env.validate()?;
        Ok(env)
    }

    /// No covariates: one distribution per arm.
    pub fn single(arms: Vec<OutcomeDistribution>) -> Result<Self> {
        Self::new(arms.len(), vec![1.0], arms)
    }

    pub fn validate(&self) -> Result<()> {
        if self.arms == 0 || self.covariate_probs.is_empty() {
            return Err(Error::invalid("environment needs at least one arm and one covariate value"));
        }
        if self.cells.len() != self.arms * self.covariate_probs.len() {
            return Err(Error::LengthMismatch {
                what: "environment cells",
                got: self.cells.len(),
                expected: self.arms * self.covariate_probs.len(),
            });
        }
        if self.covariate_probs.iter().any(|p| !(p.is_finite() && *p > 0.0))
            || (self.covariate_probs.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::invalid("covariate probabilities must be positive and sum to 1"));
        }
        self.cells.iter().try_for_each(OutcomeDistribution::validate)
    }

    pub fn arms(&self) -> usize {
        self.arms
    }

    pub fn covariates(&self) -> usize {
        self.covariate_probs.len()
    }

    pub fn covariate_probs(&self) -> &[f64] {
        &self.covariate_probs
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn cell_index(&self, key: CellKey) -> usize {
        key.covariate * self.arms + key.treatment
    }

    pub fn cell_key(&self, index: usize) -> CellKey {
        CellKey::new(index % self.arms, index / self.arms)
    }

    pub fn distribution(&self, key: CellKey) -> &OutcomeDistribution {
        &self.cells[self.cell_index(key)]
    }

    pub fn distributions(&self) -> &[OutcomeDistribution] {
        &self.cells
    }

    /// `θ(d, x)`.
    pub fn truth(&self, key: CellKey) -> f64 {
        self.distribution(key).mean()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelId {
    Model1,
    Model2,
    Model3,
    Custom,
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelId::Model1 => "model1",
            ModelId::Model2 => "model2",
            ModelId::Model3 => "model3",
            ModelId::Custom => "custom",
        })
    }
}

/// Reporting label for a source slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceRole {
    Diffuse,
    Unbiased,
    Biased,
    Other,
}

impl fmt::Display for SourceRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceRole::Diffuse => "diffuse",
            SourceRole::Unbiased => "unbiased",
            SourceRole::Biased => "biased",
            SourceRole::Other => "other",
        })
    }
}

/// One Monte Carlo configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignPoint {
    pub model_id: ModelId,
    pub horizon: u64,
    pub e: f64,
    pub environment: Environment,
    /// Sources for each cell, indexed like the environment's cells. Every
    /// cell has the same number of sources; slot `s` plays `roles[s]`.
    pub sources: Vec<Vec<SourcePrior>>,
    pub roles: Vec<SourceRole>,
    pub policy: PolicySpec,
    pub replications: u64,
    pub base_seed: u64,
    pub working_model: WorkingModel,
    pub prior_model_probs: Vec<f64>,
    /// Steps at which weights and estimates are also recorded, as if the
    /// experiment had been designed to stop there.
    pub checkpoints: Vec<u64>,
}

/// Tolerance below which a source counts as unbiased.
pub const UNBIASED_TOLERANCE: f64 = 1e-12;

impl DesignPoint {
    pub fn num_sources(&self) -> usize {
        self.roles.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.environment.validate()?;
        self.policy.validate()?;
        self.working_model_valid()?;
        if self.horizon == 0 {
            return Err(Error::invalid("horizon must be at least 1"));
        }
        if self.replications == 0 {
            return Err(Error::invalid("replications must be at least 1"));
        }
        if self.model_id != ModelId::Custom && self.horizon % 2 != 0 {
            return Err(Error::invalid(format!(
                "balanced reference designs need an even horizon, got {}",
                self.horizon
            )));
        }
        if self.policy.num_arms() != self.environment.arms() {
            return Err(Error::LengthMismatch {
                what: "policy arms",
                got: self.policy.num_arms(),
                expected: self.environment.arms(),
            });
        }
        if self.sources.len() != self.environment.num_cells() {
            return Err(Error::LengthMismatch {
                what: "per-cell source lists",
                got: self.sources.len(),
                expected: self.environment.num_cells(),
            });
        }
        let n = self.roles.len();
        if n == 0 {
            return Err(Error::EmptySources);
        }
        for cell in &self.sources {
            if cell.len() != n {
                return Err(Error::LengthMismatch { what: "sources in cell", got: cell.len(), expected: n });
            }
            cell.iter().try_for_each(SourcePrior::validate)?;
        }
        if self.prior_model_probs.len() != n {
            return Err(Error::LengthMismatch {
                what: "prior model probabilities",
                got: self.prior_model_probs.len(),
                expected: n,
            });
        }
        if self.checkpoints.iter().any(|&t| t == 0 || t > self.horizon) {
            return Err(Error::invalid("checkpoints must lie in [1, horizon]"));
        }
        Ok(())
    }

    fn working_model_valid(&self) -> Result<()> {
        WorkingModel::new(self.working_model.variance()).map(|_| ())
    }

    /// `θ(d, x) − ζ₀ˢ(d, x)` for each source of a cell. Only the simulator
    /// knows the truth; the estimator never sees these.
    pub fn source_biases(&self, cell: usize) -> Vec<f64> {
        let theta = self.environment.distributions()[cell].mean();
        self.sources[cell].iter().map(|s| theta - s.prior_mean).collect()
    }

    pub fn unbiased_mask(&self, cell: usize) -> Vec<bool> {
        self.source_biases(cell).iter().map(|b| b.abs() <= UNBIASED_TOLERANCE).collect()
    }

    pub fn precision_limits(&self, cell: usize) -> Vec<f64> {
        self.sources[cell].iter().map(|s| s.precision_limit().value()).collect()
    }

    /// Same design with a different horizon; checkpoints beyond it are dropped.
    pub fn with_horizon(&self, horizon: u64) -> Self {
        let mut d = self.clone();
        d.horizon = horizon;
        d.checkpoints.retain(|&t| t <= horizon);
        d
    }
}

/// The reference Monte Carlo designs: two Gaussian arms with means 1 and
/// 1.3, unit variance, and a balanced (alternating) assignment.
///
/// * Model 1: diffuse + unbiased informative source.
/// * Model 2: diffuse + biased informative source (prior mean shifted by +1).
/// * Model 3: diffuse + unbiased + biased.
///
/// Informative sources have precision `e · T / 2`; the diffuse source has
/// precision 1.
pub fn build_paper_model(model_id: ModelId, e: f64, horizon: u64) -> Result<DesignPoint> {
    let roles: Vec<SourceRole> = match model_id {
        ModelId::Model1 => vec![SourceRole::Diffuse, SourceRole::Unbiased],
        ModelId::Model2 => vec![SourceRole::Diffuse, SourceRole::Biased],
        ModelId::Model3 => vec![SourceRole::Diffuse, SourceRole::Unbiased, SourceRole::Biased],
        ModelId::Custom => {
            return Err(Error::invalid("build_paper_model only knows model1, model2 and model3"))
        }
    };
    if !(e.is_finite() && e > 0.0) {
        return Err(Error::invalid(format!("evidence scale e must be positive, got {e}")));
    }
    let environment = Environment::single(
        PAPER_ARM_MEANS.iter().map(|&mean| OutcomeDistribution::Gaussian { mean, sd: 1.0 }).collect(),
    )?;
    let informative = PrecisionSchedule::FixedAtDesign { rate: e, arms: 2 };
    let sources = PAPER_ARM_MEANS
        .iter()
        .map(|&theta| {
            roles
                .iter()
                .map(|role| match role {
                    SourceRole::Diffuse => SourcePrior::diffuse(theta, PAPER_DIFFUSE_NU),
                    SourceRole::Unbiased => SourcePrior::new(theta, informative),
                    SourceRole::Biased => SourcePrior::new(theta + PAPER_BIAS, informative),
                    SourceRole::Other => unreachable!(),
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let design = DesignPoint {
        model_id,
        horizon,
        e,
        environment,
        sources,
        prior_model_probs: uniform_prior(roles.len()),
        roles,
        policy: PolicySpec::Alternating { arms: 2 },
        replications: PAPER_REPLICATIONS,
        base_seed: 0,
        working_model: WorkingModel::default(),
        checkpoints: Vec::new(),
    };
    design.validate()?;
    Ok(design)
}

/// Per-cell snapshot at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSnapshot {
    pub count: u64,
    pub standard_estimate: Option<f64>,
    pub bma_estimate: f64,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub t: u64,
    pub cells: Vec<CellSnapshot>,
}

/// Final state of one cell after a replication.
#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub key: CellKey,
    pub count: u64,
    pub truth: f64,
    /// Sample mean; `None` when the cell was never assigned.
    pub standard_estimate: Option<f64>,
    pub bma_estimate: f64,
    pub weights: WeightVector,
    pub nus: Vec<f64>,
    pub posterior_means: Vec<f64>,
}

impl CellOutcome {
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationResult {
    pub rep_index: u64,
    pub cells: Vec<CellOutcome>,
    pub trajectory: Vec<Checkpoint>,
}

impl ReplicationResult {
    pub fn cell(&self, key: CellKey) -> Option<&CellOutcome> {
        self.cells.iter().find(|c| c.key == key)
    }
}

// The sequential experiment loop. `on_step` sees each assigned arm and the
// histories after the outcome has been recorded.
fn run_steps<F>(design: &DesignPoint, rep_index: u64, mut on_step: F) -> Result<Vec<ArmHistory>>
where
    F: FnMut(u64, usize, &[ArmHistory]) -> Result<()>,
{
    let env = &design.environment;
    let seed = design.base_seed;
    let mut outcome_rngs: Vec<ChaCha8Rng> = (0..env.num_cells())
        .map(|c| stream(seed, rep_index, StreamPurpose::Outcome, c as u64))
        .collect();
    let mut policy_rngs: Vec<ChaCha8Rng> = (0..env.covariates())
        .map(|x| stream(seed, rep_index, StreamPurpose::Policy, x as u64))
        .collect();
    let mut covariate_rng = stream(seed, rep_index, StreamPurpose::Covariate, 0);
    let mut histories = vec![ArmHistory::new(env.arms()); env.covariates()];
    let mut steps_seen = vec![0u64; env.covariates()];

    for t in 1..=design.horizon {
        let x = if env.covariates() == 1 {
            0
        } else {
            sample_assignment(env.covariate_probs(), covariate_rng.random())
        };
        steps_seen[x] += 1;
        let rng = &mut policy_rngs[x];
        let probs = assignment_probabilities(&design.policy, &histories[x], steps_seen[x], rng)?;
        let arm = sample_assignment(&probs, rng.random());
        let cell = env.cell_index(CellKey::new(arm, x));
        let y = env.distributions()[cell].sample(&mut outcome_rngs[cell]);
        histories[x].record(arm, y)?;
        on_step(t, arm, &histories)?;
    }
    Ok(histories)
}

fn cell_stats(histories: &[ArmHistory], key: CellKey) -> &CellStats {
    histories[key.covariate].arm(key.treatment)
}

/// Runs one replication with its own random streams.
pub fn run_replication(design: &DesignPoint, rep_index: u64) -> Result<ReplicationResult> {
    if rep_index >= design.replications {
        return Err(Error::precondition(format!(
            "replication index {rep_index} outside [0, {})",
            design.replications
        )));
    }
    let env = &design.environment;
    let mut trajectory = Vec::with_capacity(design.checkpoints.len());
    let histories = run_steps(design, rep_index, |t, _, histories| {
        if design.checkpoints.contains(&t) {
            let cells = (0..env.num_cells())
                .map(|c| {
                    let stats = cell_stats(histories, env.cell_key(c));
                    let est = estimate_cell(
                        stats,
                        &design.sources[c],
                        &design.working_model,
                        t,
                        &design.prior_model_probs,
                    )?;
                    Ok(CellSnapshot {
                        count: stats.count(),
                        standard_estimate: stats.mean(),
                        bma_estimate: est.estimate,
                        weights: est.weights.weights().to_vec(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            trajectory.push(Checkpoint { t, cells });
        }
        Ok(())
    })?;

    let cells = (0..env.num_cells())
        .map(|c| {
            let key = env.cell_key(c);
            let stats = cell_stats(&histories, key);
            let est = estimate_cell(
                stats,
                &design.sources[c],
                &design.working_model,
                design.horizon,
                &design.prior_model_probs,
            )?;
            Ok(CellOutcome {
                key,
                count: stats.count(),
                truth: env.truth(key),
                standard_estimate: stats.mean(),
                bma_estimate: est.estimate,
                posterior_means: est.posteriors.iter().map(|p| p.mean).collect(),
                nus: est.nus,
                weights: est.weights,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReplicationResult { rep_index, cells, trajectory })
}

fn thread_pool(parallelism: usize) -> Result<rayon::ThreadPool> {
    if parallelism == 0 {
        return Err(Error::invalid("parallelism must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))
}

/// All replications of a design, ordered by replication index. Results do
/// not depend on `parallelism`.
pub fn run_design(design: &DesignPoint, parallelism: usize) -> Result<Vec<ReplicationResult>> {
    design.validate()?;
    let pool = thread_pool(parallelism)?;
    pool.install(|| {
        (0..design.replications)
            .into_par_iter()
            .map(|r| run_replication(design, r))
            .collect()
    })
}

/// Divergence check for history-dependent policies: the per-step,
/// per-arm assignment frequency across `reps` simulated runs of `design`
/// (truncated or extended to `horizon`) serves as the lower envelope of
/// `δ_i(d)`.
pub fn empirical_divergence(
    design: &DesignPoint,
    horizon: u64,
    reps: u64,
    parallelism: usize,
) -> Result<DivergenceCheck> {
    if horizon < 100 {
        return Err(Error::precondition(format!("divergence check needs horizon >= 100, got {horizon}")));
    }
    let mut design = design.with_horizon(horizon);
    design.replications = reps.max(1);
    design.checkpoints.clear();
    design.validate()?;
    let arms = design.environment.arms();
    let pool = thread_pool(parallelism)?;
    let paths: Vec<Vec<u8>> = pool.install(|| {
        (0..design.replications)
            .into_par_iter()
            .map(|r| {
                let mut path = Vec::with_capacity(horizon as usize);
                run_steps(&design, r, |_, arm, _| {
                    path.push(arm as u8);
                    Ok(())
                })?;
                Ok(path)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut freq = vec![vec![0.0; arms]; horizon as usize];
    for path in &paths {
        for (i, &arm) in path.iter().enumerate() {
            freq[i][arm as usize] += 1.0;
        }
    }
    let n = paths.len() as f64;
    Ok(divergence_from_bounds(|i, arm| freq[(i - 1) as usize][arm] / n, arms, horizon))
}
