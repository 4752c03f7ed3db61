//! Root-cause analysis for outliers in the prediction errors of black-box
//! time-series models.
//!
//! The pipeline is:
//!
//! 1. [`dataset`]: load covariates, the prediction target and the model's
//!    prediction errors, and unroll them into a lagged table of *players*
//!    `(variable, lag)`.
//! 2. [`discovery`]: estimate a time-respecting causal graph over the players
//!    with a PC search driven by Fisher-z partial-correlation tests.
//! 3. [`scm`]: fit a linear additive-noise structural causal model on that
//!    graph and recover the exogenous noise of any sample.
//! 4. [`attribution`]: score how unusual an error is and split that score
//!    across players with Shapley values over noise randomizations.
//!
//! [`synthgen`] and [`harness`] regenerate the synthetic benchmark scenarios
//! and run the accuracy experiments; [`cli`] wires everything into the
//! `cdrca` binary. The runnable programs under `examples/` walk through each
//! capability.

pub mod attribution;
pub mod cli;
pub mod dataset;
pub mod discovery;
pub mod error;
pub mod graph;
pub mod harness;
mod linalg;
pub mod rng;
pub mod scm;
pub mod synthgen;

pub use attribution::{
    aggregate_lags, counterfactual_score, normalize, shapley_attributions, shapley_weight,
    zscore_baseline, AttributionConfig, AttributionResult, OutlierScorer, ShapleyMode,
};
pub use dataset::{load_csv, to_lagged, LaggedDataset, Player, TargetSample, TimeSeriesDataset, VariableRole};
pub use discovery::{ci_test, discover_graph, CiTestResult, DiscoveryConfig, DiscoveryReport};
pub use error::{Error, Result};
pub use graph::{CausalGraph, EdgeInterventionSpec, Violation};
pub use scm::{estimate_ate, extract_noises, fit_scm, AteEstimate, AteMethod, NoiseKind, NoiseSource, Scm};
