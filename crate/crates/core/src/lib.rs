//! Aggregating several prior evidence sources into one treatment-effect
//! estimate by Bayesian model averaging.
//!
//! Each source is a Gaussian prior on a cell mean `θ(d, x)`. Every source is
//! treated as its own model; the posterior model probabilities decide how
//! much each source's conjugate posterior mean contributes to the final
//! estimate. Sources whose prior mean is close to the truth and whose
//! precision is comparable to the experiment's sample size end up carrying
//! the weight, which speeds up learning, while biased sources are
//! discounted exponentially fast.
//!
//! Modules:
//!
//! * [`model`]: cells, sources, precision schedules, sufficient statistics.
//! * [`bma`]: conjugate posteriors, model weights, the aggregated estimator
//!   and the external-validity index.
//! * [`policies`]: assignment rules (RCT, alternation, ε-greedy, Thompson, UCB).
//! * [`simulate`]: outcome environments and seeded Monte Carlo replication.
//! * [`analysis`]: scaled errors, summaries, rate and decay fits.

pub mod analysis;
pub mod bma;
mod error;
pub mod model;
pub mod policies;
pub mod rng;
pub mod simulate;

pub use error::{Error, Result};
