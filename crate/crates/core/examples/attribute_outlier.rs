//! Explain one outlying prediction error end to end: learn a graph over the
//! lagged covariates, target and error, fit the model, then split the
//! outlier score across variables. The z-score baseline is shown alongside.
//!
//!     cargo run --release --example attribute_outlier

use cdrca::dataset::target_row;
use cdrca::harness::illustrative_training;
use cdrca::harness::IllustrativeSpec;
use cdrca::synthgen::{generate, prediction_errors, ModelKind, ScenarioSpec};
use cdrca::{
    discover_graph, fit_scm, shapley_attributions, to_lagged, zscore_baseline, AttributionConfig, AttributionResult,
    DiscoveryConfig, OutlierScorer, ShapleyMode,
};

fn show(label: &str, res: &AttributionResult) {
    println!("{label}:");
    let norm = res.normalized.clone().unwrap_or_else(|| vec![0.0; res.variables.len()]);
    for (v, (phi, n)) in res.variables.iter().zip(res.variable_phi.iter().zip(norm)) {
        println!("  {v:<3} phi={phi:>8.4}  normalized={n:>7.4}");
    }
}

fn main() -> cdrca::Result<()> {
    let spec = IllustrativeSpec::desk(11);
    let (predictor, train) = illustrative_training(&spec, 11)?;
    let lds = to_lagged(&train, spec.tau_max)?;
    let graph = discover_graph(&lds, &DiscoveryConfig::default())?.graph;
    let scm = fit_scm(&lds, &graph)?;
    let target = lds.error_player()?;
    let scorer = OutlierScorer::from_reference(&lds.column(target))?;

    let test = generate(&ScenarioSpec::new(ModelKind::Illustrative, 600, 12).with_injection("X1", 500, 20.0))?;
    let out = prediction_errors(&predictor, &test)?;
    let row = spec.target_time() - out.dropped;
    let sample = target_row(&to_lagged(&out.dataset, spec.tau_max)?, row)?;
    let cfg = AttributionConfig { samples: 4000, mode: ShapleyMode::Exact, seed: 1 };
    let res = shapley_attributions(&scm, &scorer, &sample, target, &cfg)?;

    println!("outlier score of r at t={}: {:.3}", sample.time_index, res.outlier_score);
    println!("{} of {} players can reach the error; {} coalitions evaluated", res.relevant_players, res.players.len(), res.subset_evaluations);
    show("shapley attribution", &res);
    show("z-score baseline", &zscore_baseline(&to_lagged(&out.dataset, 0)?, row)?);
    let covariates: Vec<String> = ["X1", "X2", "X3"].map(String::from).to_vec();
    println!("root cause among covariates: {:?}", res.top_variable(&covariates));
    Ok(())
}
