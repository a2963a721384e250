//! The `simulate`, `reproduce` and `diagnose` commands. Each writes its
//! files into an output directory together with a `manifest.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use bma_core::analysis::{
    decay_slope_fit, pac_sample_size, rate_regression, scaled_abs_error, stable_mean, summarize_design,
    DesignSummary, DistributionSummary,
};
use bma_core::policies::{check_exploration_divergence, PolicySpec};
use bma_core::simulate::{
    build_paper_model, empirical_divergence, run_design, DesignPoint, ModelId, ReplicationResult, PAPER_E_GRID,
    PAPER_T_GRID,
};
use serde::Serialize;
use serde_json::json;

use crate::config::{PointSpec, RunConfig};
use crate::output::{ensure_dir, fmt_f64, fmt_opt, write_json, Table};
use crate::CliError;

pub const QUANTILE_CONVENTION: &str = "type 7 (linear interpolation between order statistics)";

/// Which reference outputs `reproduce` writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    /// Mean posterior weights (`table1_alpha.csv`).
    Table1,
    /// Scaled-error summaries and per-replication box-plot data.
    Figures,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Diagnostic {
    /// Log-log error rate fits over each design's horizon grid.
    Rates,
    /// Exponential decay fits of biased-source weights.
    Decay,
    /// Doubling test on cumulative assignment probabilities.
    Divergence,
    /// PAC sample size from the acceleration factor.
    Pac,
}

impl Diagnostic {
    fn as_str(self) -> &'static str {
        match self {
            Diagnostic::Rates => "rates",
            Diagnostic::Decay => "decay",
            Diagnostic::Divergence => "divergence",
            Diagnostic::Pac => "pac",
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    software: &'static str,
    version: &'static str,
    command: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    variant: Option<&'a str>,
    base_seed: u64,
    replications: u64,
    grid: serde_json::Value,
    quantile_convention: &'static str,
    float_format: &'static str,
    files: Vec<String>,
    config: &'a RunConfig,
}

fn write_manifest(
    out_dir: &Path,
    config: &RunConfig,
    command: &str,
    variant: Option<&str>,
    grid: serde_json::Value,
    files: &[PathBuf],
) -> Result<PathBuf, CliError> {
    let manifest = Manifest {
        software: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        variant,
        base_seed: config.base_seed,
        replications: config.replications,
        grid,
        quantile_convention: QUANTILE_CONVENTION,
        float_format: "scientific notation, 17 significant digits",
        files: files
            .iter()
            .map(|f| f.strip_prefix(out_dir).unwrap_or(f).display().to_string())
            .collect(),
        config,
    };
    write_json(out_dir.join("manifest.json"), &manifest)
}

fn in_design<T>(label: &str, result: bma_core::Result<T>) -> Result<T, CliError> {
    result.map_err(|source| CliError::Design { design: label.to_string(), source })
}

fn run_point(id: &str, design: &DesignPoint, parallelism: usize) -> Result<(Vec<ReplicationResult>, DesignSummary), CliError> {
    let results = in_design(id, run_design(design, parallelism))?;
    let summary = in_design(id, summarize_design(design, &results))?;
    Ok((results, summary))
}

fn e_field(design: &DesignPoint) -> String {
    if design.model_id == ModelId::Custom {
        String::new()
    } else {
        fmt_f64(design.e)
    }
}

const BOX_COLUMNS: [&str; 6] = ["mean", "q1", "median", "q3", "min", "max"];

fn box_fields(d: Option<&DistributionSummary>) -> Vec<String> {
    match d {
        Some(d) => [d.mean, d.q1, d.median, d.q3, d.min, d.max].into_iter().map(fmt_f64).collect(),
        None => vec![String::new(); BOX_COLUMNS.len()],
    }
}

/// Runs every design point of `config`; writes `results_<id>.csv` per
/// point plus `summary.csv` and `weights.csv`.
pub fn simulate(config: &RunConfig, out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let points = config.points()?;
    if points.is_empty() {
        return Err(CliError::Usage("simulate needs at least one [[designs]] entry".into()));
    }
    ensure_dir(out_dir)?;
    let mut files = Vec::new();
    let mut summary_header: Vec<&str> =
        vec!["design", "model", "e", "T", "d", "x", "truth", "replications", "missing", "estimator"];
    summary_header.extend(BOX_COLUMNS);
    summary_header.push("mean_acceleration");
    let mut summary_csv = Table::create(out_dir.join("summary.csv"), &summary_header)?;
    let mut weights_csv = Table::create(
        out_dir.join("weights.csv"),
        &["design", "model", "e", "T", "d", "x", "source", "role", "mean_alpha"],
    )?;

    for PointSpec { id, design, .. } in &points {
        let (results, summary) = run_point(id, design, config.parallelism)?;
        let mut header: Vec<String> = ["rep", "d", "x", "N", "standard_estimate", "bma_estimate", "truth"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((0..design.num_sources()).map(|s| format!("alpha_{s}")));
        let mut table = Table::create(out_dir.join(format!("results_{id}.csv")), &header)?;
        for r in &results {
            for cell in &r.cells {
                let mut row = vec![
                    r.rep_index.to_string(),
                    cell.key.treatment.to_string(),
                    cell.key.covariate.to_string(),
                    cell.count.to_string(),
                    fmt_opt(cell.standard_estimate),
                    fmt_f64(cell.bma_estimate),
                    fmt_f64(cell.truth),
                ];
                row.extend(cell.weights.weights().iter().map(|&w| fmt_f64(w)));
                table.row(&row)?;
            }
        }
        files.push(table.finish()?);

        let base = [id.clone(), design.model_id.to_string(), e_field(design), design.horizon.to_string()];
        for cell in &summary.cells {
            let key = design.environment.cell_key(cell.cell);
            let place = [key.treatment.to_string(), key.covariate.to_string()];
            for (name, dist) in [("standard", &cell.standard_error), ("bma", &cell.bma_error)] {
                let mut row: Vec<String> = base.iter().chain(&place).cloned().collect();
                row.extend([
                    fmt_f64(cell.truth),
                    summary.replications.to_string(),
                    cell.missing.to_string(),
                    name.to_string(),
                ]);
                row.extend(box_fields(dist.as_ref()));
                row.push(fmt_opt(cell.mean_acceleration));
                summary_csv.row(&row)?;
            }
            for (s, &w) in cell.mean_weights.iter().enumerate() {
                let mut row: Vec<String> = base.iter().chain(&place).cloned().collect();
                row.extend([s.to_string(), design.roles[s].to_string(), fmt_f64(w)]);
                weights_csv.row(&row)?;
            }
        }
    }
    files.push(summary_csv.finish()?);
    files.push(weights_csv.finish()?);
    let grid = json!({ "points": points.iter().map(|p| p.id.as_str()).collect::<Vec<_>>() });
    files.push(write_manifest(out_dir, config, "simulate", None, grid, &files)?);
    Ok(files)
}

/// Re-runs the three reference models over the full `e × T` grid and
/// writes the weight table and scaled-error summaries for the control arm
/// (`d = 0`). Designs in `config` are ignored; its replication count, seed
/// and parallelism apply.
pub fn reproduce(config: &RunConfig, suite: Suite, out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    ensure_dir(out_dir)?;
    let want_table = matches!(suite, Suite::Table1 | Suite::All);
    let want_figures = matches!(suite, Suite::Figures | Suite::All);
    let models = [ModelId::Model1, ModelId::Model2, ModelId::Model3];
    let mut files = Vec::new();

    let mut table1 = want_table
        .then(|| Table::create(out_dir.join("table1_alpha.csv"), &["model", "e", "T", "source_role", "mean_alpha"]))
        .transpose()?;
    let mut scaled = if want_figures {
        let mut header = vec!["model", "e", "T", "estimator"];
        header.extend(BOX_COLUMNS);
        ensure_dir(&out_dir.join("figure_data"))?;
        Some(Table::create(out_dir.join("scaled_errors.csv"), &header)?)
    } else {
        None
    };

    for model in models {
        for e in PAPER_E_GRID {
            let mut figure = want_figures
                .then(|| {
                    Table::create(
                        out_dir.join("figure_data").join(format!("{model}_e{e}.csv")),
                        &["T", "N", "estimator", "rep", "scaled_error"],
                    )
                })
                .transpose()?;
            for t in PAPER_T_GRID {
                let id = format!("{model}_e{e}_T{t}");
                let mut design = in_design(&id, build_paper_model(model, e, t))?;
                design.replications = config.replications;
                design.base_seed = config.base_seed;
                let (results, summary) = run_point(&id, &design, config.parallelism)?;
                let control = &summary.cells[0];
                let lead = [model.to_string(), fmt_f64(e), t.to_string()];
                if let Some(table) = table1.as_mut() {
                    for (slot, role) in design.roles.iter().enumerate() {
                        let mut row = lead.to_vec();
                        row.extend([role.to_string(), fmt_f64(control.mean_weights[slot])]);
                        table.row(&row)?;
                    }
                }
                if let Some(table) = scaled.as_mut() {
                    for (name, dist) in [("standard", &control.standard_error), ("bma", &control.bma_error)] {
                        let mut row = lead.to_vec();
                        row.push(name.to_string());
                        row.extend(box_fields(dist.as_ref()));
                        table.row(&row)?;
                    }
                }
                if let Some(fig) = figure.as_mut() {
                    for r in &results {
                        let cell = &r.cells[0];
                        let Some(standard) = cell.standard_estimate else { continue };
                        for (name, estimate) in [("standard", standard), ("bma", cell.bma_estimate)] {
                            let err = in_design(&id, scaled_abs_error(estimate, cell.truth, cell.count))?;
                            fig.row(&[
                                t.to_string(),
                                cell.count.to_string(),
                                name.to_string(),
                                r.rep_index.to_string(),
                                fmt_f64(err),
                            ])?;
                        }
                    }
                }
            }
            if let Some(fig) = figure {
                files.push(fig.finish()?);
            }
        }
    }
    if let Some(table) = table1 {
        files.push(table.finish()?);
    }
    if let Some(table) = scaled {
        files.push(table.finish()?);
    }
    let suite_name = match suite {
        Suite::Table1 => "table1",
        Suite::Figures => "figures",
        Suite::All => "all",
    };
    let grid = json!({
        "models": models.iter().map(|m| m.to_string()).collect::<Vec<_>>(),
        "e": PAPER_E_GRID,
        "T": PAPER_T_GRID,
        "arm": 0,
    });
    files.push(write_manifest(out_dir, config, "reproduce", Some(suite_name), grid, &files)?);
    Ok(files)
}

/// Points of one design sharing everything but the horizon, sorted by `T`.
struct Series {
    label: String,
    points: Vec<PointSpec>,
}

fn series(config: &RunConfig) -> Result<Vec<Series>, CliError> {
    let mut groups: Vec<((usize, u64), Series)> = Vec::new();
    for p in config.points()? {
        let cfg = &config.designs[p.design_index];
        let custom = cfg.model_id == ModelId::Custom;
        let key = (p.design_index, if custom { 0 } else { p.design.e.to_bits() });
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, s)) => s.points.push(p),
            None => {
                let base = cfg.label(p.design_index);
                let label = if custom { base } else { format!("{base}_e{}", p.design.e) };
                groups.push((key, Series { label, points: vec![p] }));
            }
        }
    }
    Ok(groups
        .into_iter()
        .map(|(_, mut s)| {
            s.points.sort_by_key(|p| p.design.horizon);
            s
        })
        .collect())
}

fn policy_kind(policy: &PolicySpec) -> &'static str {
    match policy {
        PolicySpec::Rct { .. } => "rct",
        PolicySpec::Alternating { .. } => "alternating",
        PolicySpec::EpsilonGreedy { .. } => "epsilon_greedy",
        PolicySpec::Thompson { .. } => "thompson",
        PolicySpec::Ucb { .. } => "ucb",
    }
}

/// Runs one diagnostic over the designs of `config` and writes
/// `diagnostics.csv`.
pub fn diagnose(config: &RunConfig, which: Diagnostic, out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let needs_designs = !(which == Diagnostic::Pac && config.diagnose.acceleration.is_some());
    if needs_designs && config.designs.is_empty() {
        return Err(CliError::Usage(format!("{} needs at least one [[designs]] entry", which.as_str())));
    }
    ensure_dir(out_dir)?;
    let path = out_dir.join("diagnostics.csv");
    let file = match which {
        Diagnostic::Rates => diagnose_rates(config, path)?,
        Diagnostic::Decay => diagnose_decay(config, path)?,
        Diagnostic::Divergence => diagnose_divergence(config, path)?,
        Diagnostic::Pac => diagnose_pac(config, path)?,
    };
    let files = vec![file];
    let grid = json!({ "designs": config.designs.iter().enumerate().map(|(i, d)| d.label(i)).collect::<Vec<_>>() });
    let manifest = write_manifest(out_dir, config, "diagnose", Some(which.as_str()), grid, &files)?;
    Ok(vec![files[0].clone(), manifest])
}

fn diagnose_rates(config: &RunConfig, path: PathBuf) -> Result<PathBuf, CliError> {
    let all = series(config)?;
    // Fail before simulating anything if some cell has no unbiased source.
    for s in &all {
        let design = &s.points[0].design;
        for c in 0..design.environment.num_cells() {
            if !design.unbiased_mask(c).iter().any(|&u| u) {
                return Err(CliError::Design { design: s.label.clone(), source: bma_core::Error::NoUnbiasedSource });
            }
        }
    }
    let mut table = Table::create(
        path,
        &[
            "diagnostic", "design", "d", "x", "estimator", "axis", "slope", "intercept", "r_squared", "points",
            "mean_acceleration",
        ],
    )?;
    for s in &all {
        let ncells = s.points[0].design.environment.num_cells();
        let mut standard = vec![BTreeMap::new(); ncells];
        let mut bma = vec![BTreeMap::new(); ncells];
        let mut acceleration = vec![None; ncells];
        for p in &s.points {
            let (results, summary) = run_point(&p.id, &p.design, config.parallelism)?;
            for c in 0..ncells {
                let observed: Vec<_> = results.iter().map(|r| &r.cells[c]).filter(|cell| cell.count > 0).collect();
                if observed.is_empty() {
                    continue;
                }
                let mean_n = stable_mean(&observed.iter().map(|cell| cell.count as f64).collect::<Vec<_>>());
                let n = mean_n.round().max(1.0) as u64;
                let abs = |f: &dyn Fn(&bma_core::simulate::CellOutcome) -> f64| {
                    stable_mean(&observed.iter().map(|cell| (f(cell) - cell.truth).abs()).collect::<Vec<_>>())
                };
                standard[c].insert(n, abs(&|cell| cell.standard_estimate.expect("count > 0")));
                bma[c].insert(n, abs(&|cell| cell.bma_estimate));
                acceleration[c] = summary.cells[c].mean_acceleration;
            }
        }
        for c in 0..ncells {
            let key = s.points[0].design.environment.cell_key(c);
            for (name, errors) in [("standard", &standard[c]), ("bma", &bma[c])] {
                let fit = in_design(&s.label, rate_regression(errors, config.diagnose.use_ell))?;
                table.row(&[
                    "rates".into(),
                    s.label.clone(),
                    key.treatment.to_string(),
                    key.covariate.to_string(),
                    name.into(),
                    fit.axis.as_str().into(),
                    fmt_f64(fit.slope),
                    fmt_f64(fit.intercept),
                    fmt_f64(fit.r_squared),
                    fit.points.to_string(),
                    fmt_opt(acceleration[c]),
                ])?;
            }
        }
    }
    table.finish()
}

fn diagnose_decay(config: &RunConfig, path: PathBuf) -> Result<PathBuf, CliError> {
    let all = series(config)?;
    let has_biased = all.iter().any(|s| {
        let d = &s.points[0].design;
        (0..d.environment.num_cells()).any(|c| d.unbiased_mask(c).iter().any(|&u| !u))
    });
    if !has_biased {
        return Err(CliError::Usage("decay needs at least one biased source (prior mean away from the truth)".into()));
    }
    let mut table = Table::create(
        path,
        &["diagnostic", "design", "d", "x", "source", "role", "bias", "axis", "slope", "intercept", "r_squared", "points"],
    )?;
    for s in &all {
        let ncells = s.points[0].design.environment.num_cells();
        let nsources = s.points[0].design.num_sources();
        let mut alpha = vec![vec![Vec::new(); nsources]; ncells];
        let mut nus = vec![vec![Vec::new(); nsources]; ncells];
        for p in &s.points {
            let (results, summary) = run_point(&p.id, &p.design, config.parallelism)?;
            for c in 0..ncells {
                for src in 0..nsources {
                    alpha[c][src].push(summary.cells[c].mean_weights[src]);
                    nus[c][src].push(stable_mean(&results.iter().map(|r| r.cells[c].nus[src]).collect::<Vec<_>>()));
                }
            }
        }
        let design = &s.points[0].design;
        for c in 0..ncells {
            let key = design.environment.cell_key(c);
            let biases = design.source_biases(c);
            for (src, &bias) in biases.iter().enumerate() {
                if design.unbiased_mask(c)[src] {
                    continue;
                }
                let fit = in_design(&s.label, decay_slope_fit(&alpha[c][src], &nus[c][src], bias))?;
                table.row(&[
                    "decay".into(),
                    s.label.clone(),
                    key.treatment.to_string(),
                    key.covariate.to_string(),
                    src.to_string(),
                    design.roles[src].to_string(),
                    fmt_f64(bias),
                    fit.axis.as_str().into(),
                    fmt_f64(fit.slope),
                    fmt_f64(fit.intercept),
                    fmt_f64(fit.r_squared),
                    fit.points.to_string(),
                ])?;
            }
        }
    }
    table.finish()
}

fn diagnose_divergence(config: &RunConfig, path: PathBuf) -> Result<PathBuf, CliError> {
    let horizon = config.diagnose.divergence_horizon;
    let mut table = Table::create(
        path,
        &["diagnostic", "design", "policy", "method", "horizon", "partial_sum", "quarter_sum", "growth_ok"],
    )?;
    let points = config.points()?;
    for (i, cfg) in config.designs.iter().enumerate() {
        let label = cfg.label(i);
        let design = &points.iter().find(|p| p.design_index == i).expect("every design has a point").design;
        let (method, check) = match design.policy {
            PolicySpec::Thompson { .. } | PolicySpec::Ucb { .. } => (
                "empirical",
                in_design(
                    &label,
                    empirical_divergence(design, horizon, config.diagnose.divergence_reps, config.parallelism),
                )?,
            ),
            _ => ("analytic", in_design(&label, check_exploration_divergence(&design.policy, horizon))?),
        };
        table.row(&[
            "divergence".into(),
            label,
            policy_kind(&design.policy).into(),
            method.into(),
            check.horizon.to_string(),
            fmt_f64(check.partial_sum),
            fmt_f64(check.quarter_sum),
            check.growth_ok.to_string(),
        ])?;
    }
    table.finish()
}

fn diagnose_pac(config: &RunConfig, path: PathBuf) -> Result<PathBuf, CliError> {
    let epsilon = config.diagnose.epsilon;
    let mut table = Table::create(
        path,
        &["diagnostic", "design", "d", "x", "epsilon", "acceleration", "acceleration_source", "sample_size"],
    )?;
    if let Some(a) = config.diagnose.acceleration {
        let n = pac_sample_size(epsilon, a).map_err(|source| CliError::Design { design: "diagnose".into(), source })?;
        table.row(&[
            "pac".into(),
            String::new(),
            String::new(),
            String::new(),
            fmt_f64(epsilon),
            fmt_f64(a),
            "config".into(),
            n.to_string(),
        ])?;
        return table.finish();
    }
    for p in config.points()? {
        let (_, summary) = run_point(&p.id, &p.design, config.parallelism)?;
        for cell in &summary.cells {
            let a = cell
                .mean_acceleration
                .ok_or_else(|| CliError::Design { design: p.id.clone(), source: bma_core::Error::NoUnbiasedSource })?;
            let n = in_design(&p.id, pac_sample_size(epsilon, a))?;
            let key = p.design.environment.cell_key(cell.cell);
            table.row(&[
                "pac".into(),
                p.id.clone(),
                key.treatment.to_string(),
                key.covariate.to_string(),
                fmt_f64(epsilon),
                fmt_f64(a),
                "estimated".into(),
                n.to_string(),
            ])?;
        }
    }
    table.finish()
}
