//! Simulation-backed properties. Each test uses a fixed seed, so results are
//! reproducible; tolerances are set from the Monte Carlo standard error.

use std::collections::BTreeMap;

use bma_core::analysis::{decay_slope_fit, rate_regression, stable_mean, summarize_design};
use bma_core::bma::{model_weights, predicted_log_odds, predicted_weight_bound, uniform_prior, EvInputs};
use bma_core::model::{CellStats, PrecisionSchedule, SourcePrior, WorkingModel};
use bma_core::policies::PolicySpec;
use bma_core::rng::{stream, StreamPurpose};
use bma_core::simulate::{
    build_paper_model, run_design, DesignPoint, Environment, ModelId, OutcomeDistribution, SourceRole,
    PAPER_T_GRID,
};
use rand::Rng;
use rand_distr::StandardNormal;

const FOLDED_NORMAL_MEAN: f64 = 0.797_884_560_802_865_4;

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn two_arm_design(policy: PolicySpec, horizon: u64, reps: u64) -> DesignPoint {
    let environment = Environment::single(vec![
        OutcomeDistribution::Gaussian { mean: 1.0, sd: 1.0 },
        OutcomeDistribution::Gaussian { mean: 1.3, sd: 1.0 },
    ])
    .unwrap();
    let diffuse = |m| SourcePrior::diffuse(m, 1.0).unwrap();
    DesignPoint {
        model_id: ModelId::Custom,
        horizon,
        e: 1.0,
        environment,
        sources: vec![vec![diffuse(1.0)], vec![diffuse(1.3)]],
        roles: vec![SourceRole::Diffuse],
        policy,
        replications: reps,
        base_seed: 99,
        working_model: WorkingModel::default(),
        prior_model_probs: vec![1.0],
        checkpoints: Vec::new(),
    }
}

#[test]
fn rct_counts_concentrate_binomially() {
    let t = 750u64;
    let design = two_arm_design(PolicySpec::balanced_rct(2), t, 1000);
    let results = run_design(&design, workers()).unwrap();
    let band = 4.0 * (t as f64 / 4.0).sqrt();
    let inside = results
        .iter()
        .filter(|r| r.cells.iter().all(|c| (c.count as f64 - t as f64 / 2.0).abs() <= band))
        .count();
    assert!(inside as f64 >= 0.99 * results.len() as f64, "{inside} of {}", results.len());
}

#[test]
fn epsilon_greedy_keeps_exploring_every_arm() {
    let policy = PolicySpec::EpsilonGreedy { arms: 2, epsilon0: 1.0, decay: 0.5 };
    let mut design = two_arm_design(policy, 10_000, 100);
    design.checkpoints = vec![1_000];
    let results = run_design(&design, workers()).unwrap();
    for r in &results {
        let early = r.trajectory[0].cells.iter().map(|c| c.count).min().unwrap();
        let late = r.cells.iter().map(|c| c.count).min().unwrap();
        assert!(late > early, "rep {}: min count {early} -> {late}", r.rep_index);
    }
}

#[test]
fn standard_scaled_error_is_folded_normal_mean() {
    // R = 10⁴ puts the standard error near 0.006, well inside the ±0.02 band.
    let design = two_arm_design(PolicySpec::balanced_rct(2), 200, 10_000);
    let results = run_design(&design, workers()).unwrap();
    let summary = summarize_design(&design, &results).unwrap();
    for cell in &summary.cells {
        let mean = cell.standard_error.unwrap().mean;
        assert!((mean - FOLDED_NORMAL_MEAN).abs() < 0.02, "cell {}: {mean}", cell.cell);
    }
}

#[test]
fn standard_error_shrinks_at_root_n() {
    let mut errors = BTreeMap::new();
    for n in [25u64, 50, 125, 250, 375] {
        let mut design = build_paper_model(ModelId::Model1, 1.0, 2 * n).unwrap();
        design.replications = 1000;
        let results = run_design(&design, workers()).unwrap();
        let abs: Vec<f64> = results
            .iter()
            .map(|r| (r.cells[0].standard_estimate.unwrap() - r.cells[0].truth).abs())
            .collect();
        errors.insert(n, stable_mean(&abs));
    }
    let fit = rate_regression(&errors, false).unwrap();
    assert!((fit.slope + 0.5).abs() < 0.05, "slope {}", fit.slope);
}

#[test]
fn realized_log_odds_track_external_validity_prediction() {
    let (nu, n, reps) = (100.0, 10_000usize, 200u64);
    let sources = [
        SourcePrior::new(0.0, PrecisionSchedule::Constant { nu }).unwrap(),
        SourcePrior::new(1.0, PrecisionSchedule::Constant { nu }).unwrap(),
    ];
    let predicted =
        predicted_log_odds(EvInputs::new(0.0, nu).unwrap(), EvInputs::new(1.0, nu).unwrap()).unwrap();
    assert!((predicted - 50.0).abs() < 1e-12);
    let prior = uniform_prior(2);
    let realized: Vec<f64> = (0..reps)
        .map(|r| {
            let mut rng = stream(17, r, StreamPurpose::Outcome, 0);
            let stats =
                CellStats::from_outcomes((0..n).map(|_| rng.sample::<f64, _>(StandardNormal))).unwrap();
            let w = model_weights(&stats, &sources, &WorkingModel::default(), &[nu, nu], &prior).unwrap();
            w.log_odds(0, 1, &prior)
        })
        .collect();
    let mean = stable_mean(&realized);
    assert!((mean - predicted).abs() / predicted < 0.2, "mean realized log-odds {mean}");
}

fn mean_alpha_by_horizon(model: ModelId, e: f64, role: SourceRole) -> Vec<(u64, f64)> {
    PAPER_T_GRID
        .iter()
        .map(|&t| {
            let design = build_paper_model(model, e, t).unwrap();
            let slot = design.roles.iter().position(|r| *r == role).unwrap();
            let results = run_design(&design, workers()).unwrap();
            let summary = summarize_design(&design, &results).unwrap();
            (t, summary.cells[0].mean_weights[slot])
        })
        .collect()
}

#[test]
fn biased_weight_decays_exponentially_in_precision() {
    let e = 1.0;
    let points = mean_alpha_by_horizon(ModelId::Model2, e, SourceRole::Biased);
    let alpha: Vec<f64> = points.iter().map(|p| p.1).collect();
    let nu: Vec<f64> = points.iter().map(|p| e * p.0 as f64 / 2.0).collect();
    let fit = decay_slope_fit(&alpha, &nu, 1.0).unwrap();
    assert!(fit.slope < 0.0 && fit.r_squared > 0.9, "{fit:?}");
}

#[test]
fn biased_weight_respects_fitted_bound() {
    // Diffuse + biased only, so the bound is the bare exponential. The fitted
    // constants come from the whole horizon grid; the check is at T = 100,
    // where the biased source has ν = 25.
    let e = 0.5;
    let points = mean_alpha_by_horizon(ModelId::Model2, e, SourceRole::Biased);
    let alpha: Vec<f64> = points.iter().map(|p| p.1).collect();
    let nu: Vec<f64> = points.iter().map(|p| e * p.0 as f64 / 2.0).collect();
    let fit = decay_slope_fit(&alpha, &nu, 1.0).unwrap();
    let rate = -fit.slope;
    assert!(rate > 0.0);
    let (_, observed) = points[1];
    assert_eq!(points[1].0, 100);
    let scale = fit.intercept.exp();
    let fitted_bound = scale * (-rate * 25.0).exp();
    assert!(observed <= 1.5 * fitted_bound, "observed {observed}, fitted bound {fitted_bound}");

    let nominal = predicted_weight_bound(EvInputs::new(1.0, 25.0).unwrap(), 25.0, 25.0, true).unwrap();
    println!(
        "T=100: mean alpha_b {observed:.5}, fitted rate {rate:.4}, nominal e^(-nu/4) {nominal:.5}, ratio {:.2}",
        observed / nominal
    );
}

#[test]
fn run_design_matches_reference_weights() {
    let check = |model, e, t, role, want: f64| {
        let design = build_paper_model(model, e, t).unwrap();
        let slot = design.roles.iter().position(|r| *r == role).unwrap();
        let results = run_design(&design, workers()).unwrap();
        let got = summarize_design(&design, &results).unwrap().cells[0].mean_weights[slot];
        assert!((got - want).abs() < 0.03, "{model} e={e} T={t} {role}: {got} vs {want}");
    };
    check(ModelId::Model1, 0.5, 50, SourceRole::Unbiased, 0.714);
    check(ModelId::Model2, 0.5, 100, SourceRole::Biased, 0.006);
    check(ModelId::Model1, 2.0, 750, SourceRole::Unbiased, 0.911);
    check(ModelId::Model3, 0.5, 50, SourceRole::Biased, 0.034);
}
