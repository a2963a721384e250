//! The run configuration document (TOML) and its validation.
//!
//! Every validation failure carries the path of the offending field, e.g.
//! `designs[0].sources[1].schedule`.

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;

use bma_core::bma::uniform_prior;
use bma_core::model::{PrecisionSchedule, SourcePrior, WorkingModel};
use bma_core::policies::PolicySpec;
use bma_core::simulate::{
    build_paper_model, DesignPoint, Environment, ModelId, OutcomeDistribution, SourceRole, PAPER_REPLICATIONS,
};
use serde::{Deserialize, Serialize};

pub const DEFAULT_SEED: u64 = 0;
pub const DEFAULT_OUT_DIR: &str = "out";
pub const SMOKE_REPLICATIONS: u64 = 10;

/// A validation or parse failure, located by field path.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("config is not valid TOML: {0}")]
    Syntax(String),
    #[error("{path}: {message}")]
    Field { path: String, message: String },
}

impl ConfigError {
    fn at(path: impl Into<String>, message: impl fmt::Display) -> Self {
        ConfigError::Field { path: path.into(), message: message.to_string() }
    }

    /// Path of the offending field, when known.
    pub fn path(&self) -> Option<&str> {
        match self {
            ConfigError::Field { path, .. } => Some(path),
            ConfigError::Syntax(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_replications")]
    pub replications: u64,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<OutputFormat>,
    #[serde(default)]
    pub designs: Vec<DesignConfig>,
    #[serde(default)]
    pub diagnose: DiagnoseConfig,
}

fn default_replications() -> u64 {
    PAPER_REPLICATIONS
}

fn default_parallelism() -> usize {
    1
}

fn default_out_dir() -> PathBuf {
    PathBuf::from(DEFAULT_OUT_DIR)
}

fn default_formats() -> Vec<OutputFormat> {
    vec![OutputFormat::Csv]
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            replications: default_replications(),
            base_seed: DEFAULT_SEED,
            parallelism: default_parallelism(),
            out_dir: default_out_dir(),
            formats: default_formats(),
            designs: Vec::new(),
            diagnose: DiagnoseConfig::default(),
        }
    }
}

/// One entry of `[[designs]]`: a reference model crossed with `e` and `T`
/// grids, or a custom environment with its own sources and policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub model_id: ModelId,
    /// Evidence scale grid; reference models only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub e: Vec<f64>,
    #[serde(rename = "T")]
    pub horizons: Vec<u64>,
    /// Overrides the reference models' alternating assignment; required for
    /// custom designs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PolicySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub environment: Option<EnvironmentConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<SourceConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_model_probs: Option<Vec<f64>>,
    #[serde(default = "default_working_variance")]
    pub working_variance: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub checkpoints: Vec<u64>,
}

fn default_working_variance() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentConfig {
    pub arms: usize,
    #[serde(default = "default_covariate_probs")]
    pub covariate_probs: Vec<f64>,
    /// Covariate-major: cell `(d, x)` is entry `x · arms + d`.
    pub cells: Vec<OutcomeDistribution>,
}

fn default_covariate_probs() -> Vec<f64> {
    vec![1.0]
}

/// One source, with a prior mean for every cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    #[serde(default = "default_role")]
    pub role: SourceRole,
    pub prior_means: Vec<f64>,
    pub schedule: PrecisionSchedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diffuse_cap: Option<f64>,
}

fn default_role() -> SourceRole {
    SourceRole::Other
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseConfig {
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Fixed acceleration for `pac`; when absent it is estimated per design.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acceleration: Option<f64>,
    /// Regress on `log(log N / √N)` instead of `log N`.
    #[serde(default)]
    pub use_ell: bool,
    #[serde(default = "default_divergence_horizon")]
    pub divergence_horizon: u64,
    /// Simulated runs behind the empirical envelope for Thompson and UCB.
    #[serde(default = "default_divergence_reps")]
    pub divergence_reps: u64,
}

fn default_epsilon() -> f64 {
    0.1
}

fn default_divergence_horizon() -> u64 {
    10_000
}

fn default_divergence_reps() -> u64 {
    200
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            epsilon: default_epsilon(),
            acceleration: None,
            use_ell: false,
            divergence_horizon: default_divergence_horizon(),
            divergence_reps: default_divergence_reps(),
        }
    }
}

/// Parses and validates a TOML document.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let message = e.into_inner().message().to_string();
        ConfigError::Field { path: if path == "." { "<root>".into() } else { path }, message }
    })?;
    config.validate()?;
    Ok(config)
}

/// Serializes back to TOML. Seeds above `i64::MAX` cannot be written.
pub fn to_toml(config: &RunConfig) -> Result<String, ConfigError> {
    toml::to_string(config).map_err(|e| ConfigError::at("<root>", e))
}

/// One fully specified grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSpec {
    /// Unique label, used in file names and CSV rows.
    pub id: String,
    /// Index into `RunConfig::designs`.
    pub design_index: usize,
    pub design: DesignPoint,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.replications == 0 {
            return Err(ConfigError::at("replications", "must be at least 1"));
        }
        if self.parallelism == 0 {
            return Err(ConfigError::at("parallelism", "must be at least 1"));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(ConfigError::at("out_dir", "must not be empty"));
        }
        if self.formats.is_empty() {
            return Err(ConfigError::at("formats", "at least one output format is required"));
        }
        self.diagnose.validate()?;
        let mut ids = BTreeSet::new();
        for (i, design) in self.designs.iter().enumerate() {
            design.validate(&format!("designs[{i}]"))?;
            let label = design.label(i);
            if !ids.insert(label.clone()) {
                return Err(ConfigError::at(format!("designs[{i}].id"), format!("duplicate design id {label:?}")));
            }
        }
        Ok(())
    }

    /// Every grid point of every design, in document order, with the run
    /// settings (replications, seed) applied.
    pub fn points(&self) -> Result<Vec<PointSpec>, ConfigError> {
        let mut out = Vec::new();
        for (i, design) in self.designs.iter().enumerate() {
            for (id, mut point) in design.points(i)? {
                point.replications = self.replications;
                point.base_seed = self.base_seed;
                out.push(PointSpec { id, design_index: i, design: point });
            }
        }
        Ok(out)
    }
}

impl DiagnoseConfig {
    fn validate(&self) -> Result<(), ConfigError> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(ConfigError::at("diagnose.epsilon", format!("must lie in (0, 1), got {}", self.epsilon)));
        }
        if let Some(a) = self.acceleration {
            if !(a > 0.0 && a <= 1.0) {
                return Err(ConfigError::at("diagnose.acceleration", format!("must lie in (0, 1], got {a}")));
            }
        }
        if self.divergence_horizon < 100 {
            return Err(ConfigError::at("diagnose.divergence_horizon", "must be at least 100"));
        }
        if self.divergence_reps == 0 {
            return Err(ConfigError::at("diagnose.divergence_reps", "must be at least 1"));
        }
        Ok(())
    }
}

impl DesignConfig {
    pub fn is_reference(&self) -> bool {
        self.model_id != ModelId::Custom
    }

    /// Design label: the explicit id, else the model name (`custom<i>` for
    /// unnamed custom designs).
    pub fn label(&self, index: usize) -> String {
        match (&self.id, self.model_id) {
            (Some(id), _) => id.clone(),
            (None, ModelId::Custom) => format!("custom{index}"),
            (None, model) => model.to_string(),
        }
    }

    fn validate(&self, path: &str) -> Result<(), ConfigError> {
        if let Some(id) = &self.id {
            if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(ConfigError::at(format!("{path}.id"), "use letters, digits, '_' or '-' only"));
            }
        }
        if self.horizons.is_empty() {
            return Err(ConfigError::at(format!("{path}.T"), "horizon grid must not be empty"));
        }
        for (j, &t) in self.horizons.iter().enumerate() {
            if t == 0 {
                return Err(ConfigError::at(format!("{path}.T[{j}]"), "horizon must be at least 1"));
            }
            if self.is_reference() && t % 2 != 0 {
                return Err(ConfigError::at(
                    format!("{path}.T[{j}]"),
                    format!("odd T = {t}; reference models need an even horizon so each arm gets T/2"),
                ));
            }
        }
        if !(self.working_variance.is_finite() && self.working_variance > 0.0) {
            return Err(ConfigError::at(format!("{path}.working_variance"), "must be positive"));
        }
        if let Some(policy) = &self.policy {
            policy.validate().map_err(|e| ConfigError::at(format!("{path}.policy"), e))?;
        }
        if self.is_reference() {
            if self.e.is_empty() {
                return Err(ConfigError::at(format!("{path}.e"), "evidence-scale grid must not be empty"));
            }
            for (j, &e) in self.e.iter().enumerate() {
                if !(e.is_finite() && e > 0.0) {
                    return Err(ConfigError::at(format!("{path}.e[{j}]"), format!("must be positive, got {e}")));
                }
            }
            if self.environment.is_some() || !self.sources.is_empty() || self.prior_model_probs.is_some() {
                return Err(ConfigError::at(
                    path,
                    "reference models fix their environment and sources; use model_id = \"custom\" to change them",
                ));
            }
            if let Some(policy) = &self.policy {
                if policy.num_arms() != 2 {
                    return Err(ConfigError::at(format!("{path}.policy"), "reference models have 2 arms"));
                }
            }
        } else {
            self.validate_custom(path)?;
        }
        // Building the first point catches any remaining cross-field issue.
        self.points(0).map_err(|e| match e {
            ConfigError::Field { path: p, message } if p.is_empty() => ConfigError::at(path, message),
            other => other,
        })?;
        Ok(())
    }

    fn validate_custom(&self, path: &str) -> Result<(), ConfigError> {
        if !self.e.is_empty() {
            return Err(ConfigError::at(
                format!("{path}.e"),
                "custom designs set precision through each source's schedule, not e",
            ));
        }
        let env = self
            .environment
            .as_ref()
            .ok_or_else(|| ConfigError::at(path, "missing field `environment` (required for custom designs)"))?;
        if self.policy.is_none() {
            return Err(ConfigError::at(path, "missing field `policy` (required for custom designs)"));
        }
        for (j, cell) in env.cells.iter().enumerate() {
            cell.validate().map_err(|e| ConfigError::at(format!("{path}.environment.cells[{j}]"), e))?;
        }
        let environment = self.build_environment(path)?;
        if self.sources.is_empty() {
            return Err(ConfigError::at(format!("{path}.sources"), "at least one source is required"));
        }
        for (s, source) in self.sources.iter().enumerate() {
            let spath = format!("{path}.sources[{s}]");
            source.schedule.validate().map_err(|e| ConfigError::at(format!("{spath}.schedule"), e))?;
            if source.prior_means.len() != environment.num_cells() {
                return Err(ConfigError::at(
                    format!("{spath}.prior_means"),
                    format!("expected one prior mean per cell ({}), got {}", environment.num_cells(), source.prior_means.len()),
                ));
            }
            for (c, &m) in source.prior_means.iter().enumerate() {
                SourcePrior { prior_mean: m, schedule: source.schedule, diffuse_cap: source.diffuse_cap }
                    .validate()
                    .map_err(|e| ConfigError::at(format!("{spath}.prior_means[{c}]"), e))?;
            }
        }
        if let Some(probs) = &self.prior_model_probs {
            let ppath = format!("{path}.prior_model_probs");
            if probs.len() != self.sources.len() {
                return Err(ConfigError::at(ppath, format!("expected {} entries, got {}", self.sources.len(), probs.len())));
            }
            if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(ConfigError::at(ppath, "must be non-negative and sum to 1"));
            }
        }
        Ok(())
    }

    fn build_environment(&self, path: &str) -> Result<Environment, ConfigError> {
        let env = self.environment.as_ref().expect("checked by caller");
        Environment::new(env.arms, env.covariate_probs.clone(), env.cells.clone())
            .map_err(|e| ConfigError::at(format!("{path}.environment"), e))
    }

    /// `(id, design)` for every grid point; replications and seed are left
    /// at their defaults for the caller to set.
    pub fn points(&self, index: usize) -> Result<Vec<(String, DesignPoint)>, ConfigError> {
        let label = self.label(index);
        let path = format!("designs[{index}]");
        let working_model =
            WorkingModel::new(self.working_variance).map_err(|e| ConfigError::at(format!("{path}.working_variance"), e))?;
        let mut out = Vec::new();
        if self.is_reference() {
            for &e in &self.e {
                for &t in &self.horizons {
                    let mut design =
                        build_paper_model(self.model_id, e, t).map_err(|err| ConfigError::at(&path, err))?;
                    if let Some(policy) = &self.policy {
                        design.policy = policy.clone();
                    }
                    design.working_model = working_model;
                    design.checkpoints = self.checkpoints.iter().copied().filter(|&c| c <= t).collect();
                    design.validate().map_err(|err| ConfigError::at(&path, err))?;
                    out.push((format!("{label}_e{e}_T{t}"), design));
                }
            }
        } else {
            let environment = self.build_environment(&path)?;
            let ncells = environment.num_cells();
            let sources: Vec<Vec<SourcePrior>> = (0..ncells)
                .map(|c| {
                    self.sources
                        .iter()
                        .map(|s| SourcePrior { prior_mean: s.prior_means[c], schedule: s.schedule, diffuse_cap: s.diffuse_cap })
                        .collect()
                })
                .collect();
            let roles: Vec<SourceRole> = self.sources.iter().map(|s| s.role).collect();
            let prior_model_probs = self.prior_model_probs.clone().unwrap_or_else(|| uniform_prior(roles.len()));
            for &t in &self.horizons {
                let design = DesignPoint {
                    model_id: ModelId::Custom,
                    horizon: t,
                    // Unused outside the reference models.
                    e: 0.0,
                    environment: environment.clone(),
                    sources: sources.clone(),
                    roles: roles.clone(),
                    policy: self.policy.clone().expect("checked by validate"),
                    replications: PAPER_REPLICATIONS,
                    base_seed: DEFAULT_SEED,
                    working_model,
                    prior_model_probs: prior_model_probs.clone(),
                    checkpoints: self.checkpoints.iter().copied().filter(|&c| c <= t).collect(),
                };
                design.validate().map_err(|err| ConfigError::at(&path, err))?;
                out.push((format!("{label}_T{t}"), design));
            }
        }
        Ok(out)
    }
}
