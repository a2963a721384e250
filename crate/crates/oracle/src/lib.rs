//! Reference computations for tests.
//!
//! Everything here is deliberately computed from first principles: marginal
//! likelihoods and posterior moments come from numerically integrating the
//! Gaussian likelihood of each observation against the Gaussian prior,
//! never from the closed forms the library uses.

use std::f64::consts::PI;

// Gauss-Kronrod 7/15 nodes and weights on [-1, 1].
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = half * XGK[j];
        let pair = f(center - dx) + f(center + dx);
        kronrod += WGK[j] * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

fn adapt<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let (value, err) = gk15(f, a, b);
    // Halving the tolerance eventually asks for more than double precision
    // can deliver; stop once the error estimate is at roundoff level.
    let floor = 50.0 * f64::EPSILON * value.abs();
    if err <= tol.max(floor) || depth == 0 {
        return value;
    }
    let mid = 0.5 * (a + b);
    adapt(f, a, mid, 0.5 * tol, depth - 1) + adapt(f, mid, b, 0.5 * tol, depth - 1)
}

/// Adaptive Gauss-Kronrod integral of `f` over `[a, b]` to absolute tolerance `tol`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    // Start from a fixed partition so narrow peaks are never straddled by a
    // single coarse panel that happens to report a small error estimate.
    let panels = 64;
    let width = (b - a) / panels as f64;
    (0..panels)
        .map(|i| {
            let lo = a + width * i as f64;
            adapt(&f, lo, lo + width, tol / panels as f64, 30)
        })
        .sum()
}

fn log_normal_pdf(x: f64, mean: f64, variance: f64) -> f64 {
    -(x - mean).powi(2) / (2.0 * variance) - 0.5 * (2.0 * PI * variance).ln()
}

/// A Gaussian prior on the cell mean, as seen by the oracle.
#[derive(Debug, Clone, Copy)]
pub struct GaussianPrior {
    pub mean: f64,
    pub precision: f64,
}

/// Log of `∫ ∏ φ(y_i; θ, σ²) φ(θ; μ, 1/ν) dθ`, by quadrature.
///
/// The integrand is rescaled by its value at the crude mode so that products
/// of many small densities never underflow.
pub fn log_marginal_likelihood(outcomes: &[f64], variance: f64, prior: GaussianPrior) -> f64 {
    let log_integrand = |theta: f64| {
        outcomes
            .iter()
            .map(|&y| log_normal_pdf(y, theta, variance))
            .sum::<f64>()
            + log_normal_pdf(theta, prior.mean, 1.0 / prior.precision)
    };
    let (center, spread) = integration_window(outcomes, variance, prior);
    let shift = log_integrand(center);
    let (a, b) = (center - 40.0 * spread, center + 40.0 * spread);
    let mass = integrate(|t| (log_integrand(t) - shift).exp(), a, b, 1e-14 * spread);
    shift + mass.ln()
}

/// Posterior mean `∫ θ L(θ) π(θ) dθ / ∫ L(θ) π(θ) dθ`, by quadrature.
pub fn posterior_mean(outcomes: &[f64], variance: f64, prior: GaussianPrior) -> f64 {
    let log_integrand = |theta: f64| {
        outcomes
            .iter()
            .map(|&y| log_normal_pdf(y, theta, variance))
            .sum::<f64>()
            + log_normal_pdf(theta, prior.mean, 1.0 / prior.precision)
    };
    let (center, spread) = integration_window(outcomes, variance, prior);
    let shift = log_integrand(center);
    let (a, b) = (center - 40.0 * spread, center + 40.0 * spread);
    let tol = 1e-14 * spread;
    let mass = integrate(|t| (log_integrand(t) - shift).exp(), a, b, tol);
    // Integrate (θ - center) for accuracy when center is far from zero.
    let first = integrate(|t| (t - center) * (log_integrand(t) - shift).exp(), a, b, tol);
    center + first / mass
}

/// Posterior model probabilities computed from quadrature marginal likelihoods.
pub fn model_weights(
    outcomes: &[f64],
    variance: f64,
    priors: &[GaussianPrior],
    prior_model_probs: &[f64],
) -> Vec<f64> {
    let logs: Vec<f64> = priors
        .iter()
        .zip(prior_model_probs)
        .map(|(&p, &w)| w.ln() + log_marginal_likelihood(outcomes, variance, p))
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    unnorm.into_iter().map(|u| u / total).collect()
}

// Rough location and width of the posterior, only used to place the
// integration window; the quadrature does not depend on it being exact.
fn integration_window(outcomes: &[f64], variance: f64, prior: GaussianPrior) -> (f64, f64) {
    let n = outcomes.len() as f64;
    let sum: f64 = outcomes.iter().sum();
    let precision = n / variance + prior.precision;
    let center = (sum / variance + prior.precision * prior.mean) / precision;
    (center, precision.sqrt().recip())
}

/// Ordinary least squares slope computed from the normal equations in the
/// most naive way possible, for cross-checking fits.
pub fn naive_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let sx: f64 = x.iter().sum();
    let sy: f64 = y.iter().sum();
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}
