//! End-to-end experiments: the illustrative detection study, the
//! amplitude/coefficient sensitivity grids, the graph-intervention table and
//! the total-effect table.
//!
//! Every repeat owns seeds derived from the master seed and its grid
//! coordinates, so tables do not depend on worker count or cell order.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{shapley_attributions, zscore_baseline, AttributionConfig, AttributionResult, OutlierScorer, ShapleyMode};
use crate::dataset::{target_row, to_lagged, TimeSeriesDataset};
use crate::discovery::{discover_graph, DiscoveryConfig};
use crate::error::{Error, Result};
use crate::graph::{CausalGraph, EdgeInterventionSpec};
use crate::linalg::{mean, std_dev};
use crate::rng::derive_seed;
use crate::scm::{estimate_ate, fit_scm, AteEstimate, AteMethod, AteSource};
use crate::synthgen::{generate, prediction_errors, train_stub_predictor_with, true_graph, ModelKind, PredictorConfig, ScenarioSpec, StubPredictor};

/// Relevant-player count up to which the harness uses exact Shapley values.
pub const AUTO_EXACT_LIMIT: usize = 16;
/// Permutations used when the exact game would be too large.
pub const AUTO_PERMUTATIONS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Desk,
    Paper,
}

/// True iff `injected` is the unique argmax of the covariates' attributions.
pub fn detection_success(res: &AttributionResult, injected: &str, covariates: &[String]) -> bool {
    res.top_variable(covariates) == Some(injected)
}

/// Exact enumeration for small ancestor sets, sampled permutations beyond.
pub fn shapley_mode_for(relevant: usize) -> ShapleyMode {
    if relevant <= AUTO_EXACT_LIMIT {
        ShapleyMode::Exact
    } else {
        ShapleyMode::Permutations(AUTO_PERMUTATIONS)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCell {
    pub row: f64,
    pub col: f64,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub name: String,
    pub row_label: String,
    pub col_label: String,
    pub cells: Vec<AccuracyCell>,
}

impl AccuracyTable {
    fn from_outcomes(name: &str, row_label: &str, col_label: &str, rows: &[f64], cols: &[f64], outcomes: &[Vec<Vec<f64>>]) -> Self {
        let mut cells = Vec::new();
        for (i, &r) in rows.iter().enumerate() {
            for (j, &c) in cols.iter().enumerate() {
                let v = &outcomes[i][j];
                cells.push(AccuracyCell { row: r, col: c, mean: mean(v.iter().copied()), std: std_dev(v), n: v.len() });
            }
        }
        AccuracyTable { name: name.to_string(), row_label: row_label.to_string(), col_label: col_label.to_string(), cells }
    }

    pub fn get(&self, row: f64, col: f64) -> Option<&AccuracyCell> {
        self.cells.iter().find(|c| (c.row - row).abs() < 1e-9 && (c.col - col).abs() < 1e-9)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{},{},accuracy_mean,accuracy_std,n\n", self.row_label, self.col_label);
        for c in &self.cells {
            let _ = writeln!(s, "{},{},{:.6},{:.6},{}", c.row, c.col, c.mean, c.std, c.n);
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Which data the SCM of a sensitivity-grid repeat is fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitSource {
    /// The family's training model (coefficients of F1 or F2).
    TrainModel,
    /// Clean data from the test variant with the cell's β.
    TestModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub family: ModelKind,
    pub betas: Vec<f64>,
    pub zs: Vec<f64>,
    pub repeats: usize,
    pub samples: usize,
    pub known_graph: bool,
    pub fit_on: FitSource,
    pub train_length: usize,
    pub test_length: usize,
    pub injection_time: usize,
    pub tau_max: usize,
    pub seed: u64,
}

fn steps(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| ((lo + i as f64 * step) * 1e6).round() / 1e6).collect()
}

impl GridSpec {
    pub fn paper(family: ModelKind, seed: u64) -> Self {
        GridSpec {
            family,
            betas: steps(0.5, 3.0, 0.2),
            zs: steps(0.0, 10.0, 0.5),
            repeats: 50,
            samples: 50_000,
            known_graph: true,
            fit_on: FitSource::TestModel,
            train_length: 10_000,
            test_length: 600,
            injection_time: 500,
            tau_max: 2,
            seed,
        }
    }

    pub fn desk(family: ModelKind, seed: u64) -> Self {
        GridSpec { betas: vec![0.5, 1.5, 3.0], zs: vec![0.5, 2.0, 5.0], repeats: 20, samples: 5000, train_length: 4000, ..Self::paper(family, seed) }
    }

    pub fn for_scale(family: ModelKind, scale: Scale, seed: u64) -> Self {
        match scale {
            Scale::Desk => Self::desk(family, seed),
            Scale::Paper => Self::paper(family, seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.family.is_test_variant() {
            return Err(Error::Config(format!("{} is not a test variant", self.family)));
        }
        if self.repeats == 0 || self.samples == 0 || self.betas.is_empty() || self.zs.is_empty() {
            return Err(Error::Config("grid needs repeats >= 1, samples >= 1 and nonempty beta and Z lists".into()));
        }
        if let Some(b) = self.betas.iter().find(|b| !(0.5..=3.0).contains(*b)) {
            return Err(Error::Config(format!("beta {b} outside [0.5, 3.0]")));
        }
        if self.injection_time + self.tau_max >= self.test_length {
            return Err(Error::Config("injection time leaves no room for the outlier row".into()));
        }
        Ok(())
    }
}

/// Seed of one repeat's training data and outlier noise: shared across Z
/// so amplitude comparisons within a β use the same draws.
fn grid_seed(master: u64, beta: f64, rep: usize, stream: u64) -> u64 {
    derive_seed(master, &[beta.to_bits(), rep as u64, stream])
}

/// One repeat of a sensitivity-grid cell.
pub fn grid_repeat(spec: &GridSpec, beta: f64, z: f64, rep: usize) -> Result<bool> {
    let family = spec.family;
    let fit_spec = match spec.fit_on {
        FitSource::TrainModel => ScenarioSpec::new(family.train_model(), spec.train_length, grid_seed(spec.seed, beta, rep, 1)),
        FitSource::TestModel => ScenarioSpec::new(family, spec.train_length, grid_seed(spec.seed, beta, rep, 1)).with_beta(beta),
    };
    let train = generate(&fit_spec)?;
    let lds = to_lagged(&train, spec.tau_max)?;
    let graph = if spec.known_graph {
        true_graph(family, spec.tau_max)?
    } else {
        discover_graph(&lds, &DiscoveryConfig::default())?.graph
    };
    let scm = fit_scm(&lds, &graph)?;
    let target = lds.player_index(train.target_index(), 0);
    let scorer = OutlierScorer::from_reference(&lds.column(target))?;

    let injected = family.injected_variable().expect("test variants inject");
    let var = train.index_of(injected).expect("model variable");
    let delay = family.propagation_delay(var).ok_or_else(|| Error::Config(format!("{injected} does not reach the target")))?;
    let test = generate(
        &ScenarioSpec::new(family, spec.test_length, grid_seed(spec.seed, beta, rep, 2))
            .with_beta(beta)
            .with_injection(injected, spec.injection_time, z),
    )?;
    let sample = target_row(&to_lagged(&test, spec.tau_max)?, spec.injection_time + delay)?;
    let relevant = scm.graph().ancestors(target).len();
    let cfg = AttributionConfig {
        samples: spec.samples,
        mode: shapley_mode_for(relevant),
        seed: grid_seed(spec.seed, beta, rep, 3) ^ z.to_bits(),
    };
    let res = shapley_attributions(&scm, &scorer, &sample, target, &cfg)?;
    let covariates: Vec<String> = train.covariate_indices().iter().map(|&i| train.names()[i].clone()).collect();
    Ok(detection_success(&res, injected, &covariates))
}

pub fn run_sensitivity_grid(spec: &GridSpec) -> Result<AccuracyTable> {
    spec.validate()?;
    let tasks: Vec<(usize, usize, usize)> = (0..spec.betas.len())
        .flat_map(|i| (0..spec.zs.len()).flat_map(move |j| (0..spec.repeats).map(move |r| (i, j, r))))
        .collect();
    let results: Vec<bool> = tasks
        .par_iter()
        .map(|&(i, j, r)| grid_repeat(spec, spec.betas[i], spec.zs[j], r))
        .collect::<Result<_>>()?;
    let mut outcomes = vec![vec![Vec::with_capacity(spec.repeats); spec.zs.len()]; spec.betas.len()];
    for (&(i, j, _), ok) in tasks.iter().zip(results) {
        outcomes[i][j].push(if ok { 1.0 } else { 0.0 });
    }
    Ok(AccuracyTable::from_outcomes(&format!("grid-{}", spec.family), "beta", "z", &spec.betas, &spec.zs, &outcomes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionStudySpec {
    pub zs: Vec<f64>,
    pub ks: Vec<usize>,
    pub targets: usize,
    pub reps: usize,
    pub samples: usize,
    pub train_length: usize,
    pub seed: u64,
}

impl InterventionStudySpec {
    pub fn paper(seed: u64) -> Self {
        InterventionStudySpec { zs: vec![0.5, 0.7, 0.9], ks: vec![1, 2, 3], targets: 10, reps: 100, samples: 10_000, train_length: 10_000, seed }
    }

    pub fn desk(seed: u64) -> Self {
        InterventionStudySpec { reps: 20, samples: 5000, train_length: 4000, ..Self::paper(seed) }
    }

    pub fn for_scale(scale: Scale, seed: u64) -> Self {
        match scale {
            Scale::Desk => Self::desk(seed),
            Scale::Paper => Self::paper(seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ks.contains(&0) {
            return Err(Error::Config("edge interventions need k >= 1".into()));
        }
        if self.zs.is_empty() || self.ks.is_empty() || self.targets == 0 || self.reps == 0 || self.samples == 0 {
            return Err(Error::Config("intervention study needs nonempty grids and positive counts".into()));
        }
        if self.zs.iter().any(|z| !(*z > 0.0)) {
            return Err(Error::Config("intervention amplitudes must be positive".into()));
        }
        Ok(())
    }
}

/// Accuracy over the targets of one repeat of one (Z, k) cell.
pub fn intervention_repeat(spec: &InterventionStudySpec, z: f64, k: usize, rep: usize) -> Result<f64> {
    let model = ModelKind::Sim2Train;
    let data_seed = |stream: u64| derive_seed(spec.seed, &[z.to_bits(), rep as u64, stream]);
    let train = generate(&ScenarioSpec::new(model, spec.train_length, data_seed(1)))?;
    let lds = to_lagged(&train, 0)?;
    let graph = true_graph(model, 0)?.add_random_edges(&EdgeInterventionSpec { k, seed: derive_seed(spec.seed, &[k as u64, rep as u64, 7]) })?;
    let scm = fit_scm(&lds, &graph)?;
    let target = train.target_index();
    let scorer = OutlierScorer::from_reference(&lds.column(target))?;
    let covariates: Vec<String> = train.covariate_indices().iter().map(|&i| train.names()[i].clone()).collect();
    let mut hits = 0;
    for j in 0..spec.targets {
        let s = derive_seed(data_seed(2), &[j as u64]);
        let test = generate(&ScenarioSpec::new(model, 100, s).with_injection("X1", 50, z))?;
        let sample = target_row(&to_lagged(&test, 0)?, 50)?;
        let cfg = AttributionConfig { samples: spec.samples, mode: ShapleyMode::Exact, seed: derive_seed(s, &[k as u64]) };
        let res = shapley_attributions(&scm, &scorer, &sample, target, &cfg)?;
        if detection_success(&res, "X1", &covariates) {
            hits += 1;
        }
    }
    Ok(hits as f64 / spec.targets as f64)
}

pub fn run_graph_intervention(spec: &InterventionStudySpec) -> Result<AccuracyTable> {
    spec.validate()?;
    let tasks: Vec<(usize, usize, usize)> = (0..spec.zs.len())
        .flat_map(|i| (0..spec.ks.len()).flat_map(move |j| (0..spec.reps).map(move |r| (i, j, r))))
        .collect();
    let results: Vec<f64> = tasks
        .par_iter()
        .map(|&(i, j, r)| intervention_repeat(spec, spec.zs[i], spec.ks[j], r))
        .collect::<Result<_>>()?;
    let mut outcomes = vec![vec![Vec::with_capacity(spec.reps); spec.ks.len()]; spec.zs.len()];
    for (&(i, j, _), acc) in tasks.iter().zip(results) {
        outcomes[i][j].push(acc);
    }
    let ks: Vec<f64> = spec.ks.iter().map(|&k| k as f64).collect();
    Ok(AccuracyTable::from_outcomes("table1", "z", "k", &spec.zs, &ks, &outcomes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IllustrativeSpec {
    pub length: usize,
    pub trials: usize,
    pub samples: usize,
    pub seed: u64,
    pub tau_max: usize,
    pub alpha: f64,
    pub predictor: PredictorConfig,
    pub amplitude: f64,
    pub test_length: usize,
    pub injection_time: usize,
}

impl IllustrativeSpec {
    pub fn paper(seed: u64) -> Self {
        IllustrativeSpec {
            length: 20_000,
            trials: 50,
            samples: 10_000,
            seed,
            tau_max: 3,
            alpha: 0.01,
            predictor: PredictorConfig { horizon: 3, lags: 1 },
            amplitude: 20.0,
            test_length: 600,
            injection_time: 500,
        }
    }

    pub fn desk(seed: u64) -> Self {
        IllustrativeSpec { length: 5000, trials: 20, samples: 2000, ..Self::paper(seed) }
    }

    pub fn for_scale(scale: Scale, seed: u64) -> Self {
        match scale {
            Scale::Desk => Self::desk(seed),
            Scale::Paper => Self::paper(seed),
        }
    }

    /// Row of the outlier series whose error the shock reaches first.
    pub fn target_time(&self) -> usize {
        let delay = ModelKind::Illustrative.propagation_delay(0).expect("X1 reaches Y");
        self.injection_time + delay.max(self.predictor.horizon.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 || self.samples == 0 {
            return Err(Error::Config("illustrative run needs trials >= 1 and samples >= 1".into()));
        }
        if self.target_time() >= self.test_length {
            return Err(Error::Config("outlier row lies beyond the test series".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial: usize,
    pub cdrca_top: Option<String>,
    pub zscore_top: Option<String>,
    pub cdrca_normalized: Vec<(String, f64)>,
    pub zscore_normalized: Vec<(String, f64)>,
    pub outlier_score: f64,
    pub graph_edges: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IllustrativeReport {
    pub cdrca_tpr: f64,
    pub zscore_tpr: f64,
    pub trials: Vec<TrialOutcome>,
}

impl IllustrativeReport {
    pub fn summary_csv(&self) -> String {
        format!("method,tpr,trials\ncd-rca,{:.6},{n}\nz-score,{:.6},{n}\n", self.cdrca_tpr, self.zscore_tpr, n = self.trials.len())
    }

    pub fn trials_csv(&self) -> String {
        let names: Vec<&str> = self.trials.first().map(|t| t.cdrca_normalized.iter().map(|(n, _)| n.as_str()).collect()).unwrap_or_default();
        let mut s = String::from("trial,cdrca_top,zscore_top,outlier_score,graph_edges");
        for n in &names {
            let _ = write!(s, ",cdrca_{n}");
        }
        for n in &names {
            let _ = write!(s, ",zscore_{n}");
        }
        s.push('\n');
        for t in &self.trials {
            let _ = write!(
                s,
                "{},{},{},{:.6},{}",
                t.trial,
                t.cdrca_top.as_deref().unwrap_or("tie"),
                t.zscore_top.as_deref().unwrap_or("tie"),
                t.outlier_score,
                t.graph_edges
            );
            for (_, v) in &t.cdrca_normalized {
                let _ = write!(s, ",{v:.6}");
            }
            for (_, v) in &t.zscore_normalized {
                let _ = write!(s, ",{v:.6}");
            }
            s.push('\n');
        }
        s
    }
}

/// Training table for the illustrative study: the second half of a clean
/// series with the errors of a predictor trained on its first half.
pub fn illustrative_training(spec: &IllustrativeSpec, seed: u64) -> Result<(StubPredictor, TimeSeriesDataset)> {
    let series = generate(&ScenarioSpec::new(ModelKind::Illustrative, spec.length, seed))?;
    let predictor = train_stub_predictor_with(&series, &spec.predictor)?;
    let eval = series.slice_rows(spec.length / 2, spec.length)?;
    let labels = (spec.length / 2..spec.length).map(|t| t.to_string()).collect();
    Ok((predictor.clone(), prediction_errors(&predictor, &eval.with_time_labels(labels)?)?.dataset))
}

fn covariate_names(ds: &TimeSeriesDataset) -> Vec<String> {
    ds.covariate_indices().iter().map(|&i| ds.names()[i].clone()).collect()
}

fn normalized_pairs(res: &AttributionResult) -> Vec<(String, f64)> {
    let values = res.normalized.clone().unwrap_or_else(|| vec![0.0; res.variables.len()]);
    res.variables.iter().cloned().zip(values).collect()
}

pub fn illustrative_trial(spec: &IllustrativeSpec, trial: usize) -> Result<TrialOutcome> {
    let (predictor, train) = illustrative_training(spec, derive_seed(spec.seed, &[trial as u64, 1]))?;
    let lds = to_lagged(&train, spec.tau_max)?;
    let report = discover_graph(&lds, &DiscoveryConfig { alpha: spec.alpha, ..Default::default() })?;
    let scm = fit_scm(&lds, &report.graph)?;
    let target = lds.error_player()?;
    let scorer = OutlierScorer::from_reference(&lds.column(target))?;

    let test = generate(
        &ScenarioSpec::new(ModelKind::Illustrative, spec.test_length, derive_seed(spec.seed, &[trial as u64, 2]))
            .with_injection("X1", spec.injection_time, spec.amplitude),
    )?;
    let out = prediction_errors(&predictor, &test)?;
    let row = spec.target_time() - out.dropped;
    let sample = target_row(&to_lagged(&out.dataset, spec.tau_max)?, row)?;
    let relevant = scm.graph().ancestors(target).len();
    let cfg = AttributionConfig { samples: spec.samples, mode: shapley_mode_for(relevant), seed: derive_seed(spec.seed, &[trial as u64, 3]) };
    let res = shapley_attributions(&scm, &scorer, &sample, target, &cfg)?;
    let baseline = zscore_baseline(&to_lagged(&out.dataset, 0)?, row)?;
    let covariates = covariate_names(&train);
    Ok(TrialOutcome {
        trial,
        cdrca_top: res.top_variable(&covariates).map(str::to_string),
        zscore_top: baseline.top_variable(&covariates).map(str::to_string),
        cdrca_normalized: normalized_pairs(&res),
        zscore_normalized: normalized_pairs(&baseline),
        outlier_score: res.outlier_score,
        graph_edges: report.graph.n_edges(),
    })
}

pub fn run_illustrative(spec: &IllustrativeSpec) -> Result<IllustrativeReport> {
    spec.validate()?;
    let trials: Vec<TrialOutcome> = (0..spec.trials).into_par_iter().map(|t| illustrative_trial(spec, t)).collect::<Result<_>>()?;
    let rate = |f: &dyn Fn(&TrialOutcome) -> bool| trials.iter().filter(|t| f(t)).count() as f64 / trials.len() as f64;
    Ok(IllustrativeReport {
        cdrca_tpr: rate(&|t| t.cdrca_top.as_deref() == Some("X1")),
        zscore_tpr: rate(&|t| t.zscore_top.as_deref() == Some("X1")),
        trials,
    })
}

/// Total effects of X1, X2 and X3 on the target at lag 0 in the true model,
/// by path products and by paired interventional sampling.
pub fn run_ate_table(model: ModelKind, tau_max: usize, samples: usize, seed: u64) -> Result<Vec<AteEstimate>> {
    if !matches!(model, ModelKind::F1 | ModelKind::F2) {
        return Err(Error::Config(format!("total-effect table is defined for f1 and f2, not {model}")));
    }
    let scm = crate::synthgen::true_scm(model, None, tau_max)?;
    let target = scm.graph().find("X4", 0).expect("X4 exists");
    let mut out = Vec::new();
    for (i, source) in ["X1", "X2", "X3"].iter().enumerate() {
        let src = AteSource::Variable(source.to_string());
        out.push(estimate_ate(&scm, &src, target, AteMethod::PathProduct)?);
        out.push(estimate_ate(&scm, &src, target, AteMethod::InterventionalSampling { samples, seed: derive_seed(seed, &[i as u64]) })?);
    }
    Ok(out)
}

pub fn ate_table_csv(rows: &[AteEstimate]) -> String {
    let mut s = String::from("source,target,method,value,std_error,stationary\n");
    for r in rows {
        let source = match &r.source {
            AteSource::Player(p) => p.to_string(),
            AteSource::Variable(v) => v.clone(),
        };
        let method = match r.method {
            AteMethod::PathProduct => "path_product",
            AteMethod::InterventionalSampling { .. } => "interventional_sampling",
        };
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let _ = writeln!(s, "{source},{},{method},{:.6},{},{}", r.target, r.value, opt(r.std_error), opt(r.stationary));
    }
    s
}

/// Graph of a grid family, exposed for inspection tools.
pub fn family_graph(family: ModelKind, tau_max: usize) -> Result<CausalGraph> {
    true_graph(family, tau_max)
}
