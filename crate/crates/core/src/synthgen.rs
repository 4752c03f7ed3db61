//! Synthetic linear generators for the benchmark scenarios, the linear
//! stand-in for a black-box forecaster, and its prediction errors.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{lagged_players, TimeSeriesDataset, VariableRole};
use crate::error::{Error, Result};
use crate::graph::CausalGraph;
use crate::linalg::least_squares;
use crate::rng::rng_from_seed;
use crate::scm::{Mechanism, NoiseModel, Scm};

/// Steps simulated and discarded before the first stored sample.
pub const BURN_IN: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Illustrative,
    F1,
    F2,
    F1TestA,
    F1TestB,
    F1TestC,
    F2TestA,
    F2TestB,
    F2TestC,
    Sim2Train,
}

impl ModelKind {
    pub const ALL: [ModelKind; 10] = [
        ModelKind::Illustrative,
        ModelKind::F1,
        ModelKind::F2,
        ModelKind::F1TestA,
        ModelKind::F1TestB,
        ModelKind::F1TestC,
        ModelKind::F2TestA,
        ModelKind::F2TestB,
        ModelKind::F2TestC,
        ModelKind::Sim2Train,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::Illustrative => "illustrative",
            ModelKind::F1 => "f1",
            ModelKind::F2 => "f2",
            ModelKind::F1TestA => "f1-test-a",
            ModelKind::F1TestB => "f1-test-b",
            ModelKind::F1TestC => "f1-test-c",
            ModelKind::F2TestA => "f2-test-a",
            ModelKind::F2TestB => "f2-test-b",
            ModelKind::F2TestC => "f2-test-c",
            ModelKind::Sim2Train => "sim2-train",
        }
    }

    pub fn is_test_variant(self) -> bool {
        matches!(
            self,
            ModelKind::F1TestA | ModelKind::F1TestB | ModelKind::F1TestC | ModelKind::F2TestA | ModelKind::F2TestB | ModelKind::F2TestC
        )
    }

    /// Training model of a test variant's family.
    pub fn train_model(self) -> ModelKind {
        match self {
            ModelKind::F1TestA | ModelKind::F1TestB | ModelKind::F1TestC => ModelKind::F1,
            ModelKind::F2TestA | ModelKind::F2TestB | ModelKind::F2TestC => ModelKind::F2,
            other => other,
        }
    }

    /// Variable that receives the root-cause shock in this variant's equations.
    pub fn injected_variable(self) -> Option<&'static str> {
        match self {
            ModelKind::F1TestA | ModelKind::F2TestA | ModelKind::Illustrative | ModelKind::Sim2Train => Some("X1"),
            ModelKind::F1TestB | ModelKind::F1TestC | ModelKind::F2TestB | ModelKind::F2TestC => Some("X2"),
            ModelKind::F1 | ModelKind::F2 => None,
        }
    }

    pub fn variable_names(self) -> Vec<String> {
        let target = if self == ModelKind::Illustrative { "Y" } else { "X4" };
        ["X1", "X2", "X3", target].iter().map(|s| s.to_string()).collect()
    }

    pub fn roles(self) -> Vec<VariableRole> {
        vec![VariableRole::Covariate, VariableRole::Covariate, VariableRole::Covariate, VariableRole::Target]
    }

    /// Lag-1 matrix `A` and contemporaneous matrix `C` (row = effect,
    /// column = cause) of `x_t = C x_t + A x_{t-1} + n_t`.
    pub fn coefficients(self, beta: Option<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let mut a = DMatrix::zeros(4, 4);
        let mut c = DMatrix::zeros(4, 4);
        let beta = if self.is_test_variant() {
            let b = beta.ok_or_else(|| Error::Config(format!("model {self} needs --beta")))?;
            if !b.is_finite() {
                return Err(Error::Config("beta must be finite".into()));
            }
            b
        } else {
            0.0
        };
        let family = self.train_model();
        match family {
            ModelKind::Illustrative => {
                a[(0, 0)] = 0.8;
                a[(1, 0)] = 3.8;
                a[(1, 2)] = 0.8;
                a[(2, 2)] = 0.8;
                a[(3, 1)] = 3.8;
            }
            ModelKind::F1 => {
                a[(0, 0)] = 0.8;
                a[(1, 0)] = 0.8;
                a[(1, 2)] = 0.8;
                a[(2, 2)] = 0.8;
                a[(3, 1)] = 0.8;
            }
            ModelKind::F2 => {
                a[(0, 0)] = 0.2;
                a[(1, 0)] = 0.2;
                a[(1, 2)] = 0.4;
                a[(2, 2)] = 0.2;
                a[(3, 1)] = 0.1;
            }
            ModelKind::Sim2Train => {
                c[(1, 0)] = 3.8;
                c[(1, 2)] = 0.8;
                c[(3, 1)] = 3.8;
            }
            _ => unreachable!("train_model returns a base model"),
        }
        match self {
            ModelKind::F1TestA | ModelKind::F1TestC | ModelKind::F2TestA | ModelKind::F2TestC => a[(1, 0)] = beta,
            // The X4 coupling of this variant comes without a time index;
            // it is read as lag 1 like every other term of the family.
            ModelKind::F1TestB | ModelKind::F2TestB => a[(3, 1)] = beta,
            _ => {}
        }
        Ok((a, c))
    }

    /// Smallest number of time steps for a shock in `var` to reach the target.
    pub fn propagation_delay(self, var: usize) -> Option<usize> {
        let (a, c) = self.coefficients(Some(1.0)).ok()?;
        // Dijkstra on 4 nodes with weights 0 (contemporaneous) and 1 (lagged).
        let mut dist = [usize::MAX; 4];
        dist[var] = 0;
        for _ in 0..8 {
            for from in 0..4 {
                if dist[from] == usize::MAX {
                    continue;
                }
                for to in 0..4 {
                    if to != from && c[(to, from)] != 0.0 {
                        dist[to] = dist[to].min(dist[from]);
                    }
                    if to != from && a[(to, from)] != 0.0 {
                        dist[to] = dist[to].min(dist[from] + 1);
                    }
                }
            }
        }
        (dist[3] != usize::MAX).then_some(dist[3])
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        let alias = match norm.as_str() {
            "f1a" | "f1-testa" => "f1-test-a",
            "f1b" | "f1-testb" => "f1-test-b",
            "f1c" | "f1-testc" => "f1-test-c",
            "f2a" | "f2-testa" => "f2-test-a",
            "f2b" | "f2-testb" => "f2-test-b",
            "f2c" | "f2-testc" => "f2-test-c",
            "sim2" => "sim2-train",
            other => other,
        };
        ModelKind::ALL
            .iter()
            .copied()
            .find(|m| m.tag() == alias)
            .ok_or_else(|| Error::Config(format!("unknown model tag {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionSpec {
    pub variable: String,
    /// Index of the stored sample (row index for non-time-series models).
    pub time: usize,
    pub amplitude: f64,
}

impl FromStr for InjectionSpec {
    type Err = Error;

    /// `VAR:Z@T`, e.g. `X1:20@500`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("injection {s:?} is not of the form VAR:Z@T"));
        let (var, rest) = s.split_once(':').ok_or_else(bad)?;
        let (z, t) = rest.split_once('@').ok_or_else(bad)?;
        Ok(InjectionSpec {
            variable: var.trim().to_string(),
            amplitude: z.trim().parse().map_err(|_| bad())?,
            time: t.trim().parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub model: ModelKind,
    pub length: usize,
    pub beta: Option<f64>,
    pub injection: Option<InjectionSpec>,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(model: ModelKind, length: usize, seed: u64) -> Self {
        ScenarioSpec { model, length, beta: None, injection: None, seed }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = Some(beta);
        self
    }

    pub fn with_injection(mut self, variable: &str, time: usize, amplitude: f64) -> Self {
        self.injection = Some(InjectionSpec { variable: variable.to_string(), time, amplitude });
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.length < 100 {
            return Err(Error::Config(format!("series length {} is below the minimum of 100", self.length)));
        }
        if let Some(inj) = &self.injection {
            if !inj.amplitude.is_finite() {
                return Err(Error::Config("injection amplitude must be finite".into()));
            }
            if !self.model.variable_names().contains(&inj.variable) {
                return Err(Error::Config(format!("model {} has no variable {}", self.model, inj.variable)));
            }
            if inj.time >= self.length {
                return Err(Error::OutOfRange { index: inj.time, valid: format!("0..{}", self.length) });
            }
        }
        self.model.coefficients(self.beta).map(|_| ())
    }
}

/// Contemporaneous evaluation order shared by all models.
const ORDER: [usize; 4] = [0, 2, 1, 3];

pub fn generate(spec: &ScenarioSpec) -> Result<TimeSeriesDataset> {
    spec.validate()?;
    let (a, c) = spec.model.coefficients(spec.beta)?;
    let names = spec.model.variable_names();
    let inj = spec.injection.as_ref().map(|i| (names.iter().position(|n| *n == i.variable).expect("validated"), i.time, i.amplitude));
    let mut rng = rng_from_seed(spec.seed);
    let total = BURN_IN + spec.length;
    let mut values = DMatrix::zeros(spec.length, 4);
    let mut prev = [0.0; 4];
    for step in 0..total {
        // Draw order never depends on the injection.
        let noise: [f64; 4] = std::array::from_fn(|_| rng.gen::<f64>());
        let mut cur = [0.0; 4];
        for &i in &ORDER {
            let mut x = noise[i];
            for j in 0..4 {
                x += a[(i, j)] * prev[j] + c[(i, j)] * cur[j];
            }
            if let Some((v, t, z)) = inj {
                if v == i && step == BURN_IN + t {
                    x += z;
                }
            }
            cur[i] = x;
        }
        if step >= BURN_IN {
            for i in 0..4 {
                values[(step - BURN_IN, i)] = cur[i];
            }
        }
        prev = cur;
    }
    TimeSeriesDataset::new(names, spec.model.roles(), values)
}

/// The model's causal graph unrolled over `tau_max` lags.
pub fn true_graph(model: ModelKind, tau_max: usize) -> Result<CausalGraph> {
    let (a, c) = model.coefficients(Some(1.0))?;
    let players = lagged_players(&model.variable_names(), tau_max);
    let mut edges = Vec::new();
    for lag in 0..=tau_max {
        for i in 0..4 {
            for j in 0..4 {
                if c[(i, j)] != 0.0 {
                    edges.push((lag * 4 + j, lag * 4 + i));
                }
                if a[(i, j)] != 0.0 && lag < tau_max {
                    edges.push(((lag + 1) * 4 + j, lag * 4 + i));
                }
            }
        }
    }
    CausalGraph::with_edges(tau_max, players, edges)
}

/// Ground-truth SCM over the unrolled window with unit-uniform noise.
/// Players at the oldest lag of a lagged model are roots.
pub fn true_scm(model: ModelKind, beta: Option<f64>, tau_max: usize) -> Result<Scm> {
    let (a, c) = model.coefficients(beta)?;
    let graph = true_graph(model, tau_max)?;
    let mechanisms = (0..graph.n_players())
        .map(|p| {
            let (lag, i) = (p / 4, p % 4);
            let parents = graph.parents(p);
            let coefficients = parents
                .iter()
                .map(|&q| if q / 4 == lag { c[(i, q % 4)] } else { a[(i, q % 4)] })
                .collect();
            Mechanism { player: graph.players()[p].clone(), parents, coefficients, intercept: 0.0 }
        })
        .collect();
    let n = graph.n_players();
    Scm::from_parts(graph, mechanisms, NoiseModel::Uniform { low: vec![0.0; n], high: vec![1.0; n] })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    /// Steps ahead: the forecast of `Y_t` uses data up to `t - horizon`.
    pub horizon: usize,
    /// History length per input variable.
    pub lags: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig { horizon: 1, lags: 1 }
    }
}

/// Linear least-squares forecaster of the target from lagged inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubPredictor {
    pub inputs: Vec<String>,
    pub target: String,
    pub config: PredictorConfig,
    /// `(input, lag)` per coefficient.
    pub features: Vec<(String, usize)>,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub residual_variance: f64,
    pub training_rows: usize,
}

fn feature_list(inputs: &[String], cfg: &PredictorConfig) -> Vec<(String, usize)> {
    (0..cfg.lags).flat_map(|l| inputs.iter().map(move |n| (n.clone(), cfg.horizon + l))).collect()
}

pub fn train_stub_predictor(ds: &TimeSeriesDataset, tau_max: usize) -> Result<StubPredictor> {
    train_stub_predictor_with(ds, &PredictorConfig { horizon: 1, lags: tau_max.max(1) })
}

/// Fits on the first half of `ds`.
pub fn train_stub_predictor_with(ds: &TimeSeriesDataset, cfg: &PredictorConfig) -> Result<StubPredictor> {
    if cfg.horizon == 0 || cfg.lags == 0 {
        return Err(Error::Config("predictor horizon and lags must be at least 1".into()));
    }
    let mut inputs: Vec<String> = ds.covariate_indices().iter().map(|&i| ds.names()[i].clone()).collect();
    let target = ds.names()[ds.target_index()].clone();
    inputs.push(target.clone());
    let features = feature_list(&inputs, cfg);
    let half = ds.n_times() / 2;
    let start = cfg.horizon + cfg.lags - 1;
    if half <= start || half - start < 10 * (features.len() + 1) {
        return Err(Error::InsufficientSamples(format!(
            "training half has {half} rows; {} features need at least {}",
            features.len(),
            start + 10 * (features.len() + 1)
        )));
    }
    let x = design(ds, &features, start, half)?;
    let y = DVector::from_iterator(half - start, (start..half).map(|t| ds.values()[(t, ds.target_index())]));
    // Constant feature columns are dropped: their coefficient is zero.
    let keep: Vec<usize> = (0..features.len())
        .filter(|&j| {
            let col = x.column(j);
            let m = col.mean();
            col.iter().any(|v| (v - m).abs() > 1e-12 * (1.0 + m.abs()))
        })
        .collect();
    let reduced = DMatrix::from_fn(x.nrows(), keep.len() + 1, |i, j| if j == 0 { 1.0 } else { x[(i, keep[j - 1])] });
    let fit = least_squares(&reduced, &y, "predictor features")?;
    let mut coefficients = vec![0.0; features.len()];
    for (k, &j) in keep.iter().enumerate() {
        coefficients[j] = fit.coefficients[k + 1];
    }
    let n = fit.residuals.len();
    Ok(StubPredictor {
        inputs,
        target,
        config: *cfg,
        features,
        coefficients,
        intercept: fit.coefficients[0],
        residual_variance: fit.residuals.norm_squared() / n as f64,
        training_rows: n,
    })
}

fn design(ds: &TimeSeriesDataset, features: &[(String, usize)], start: usize, end: usize) -> Result<DMatrix<f64>> {
    let cols = features
        .iter()
        .map(|(n, lag)| ds.index_of(n).map(|i| (i, *lag)).ok_or_else(|| Error::Roles(format!("predictor input {n} is missing"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_fn(end - start, cols.len(), |r, j| ds.values()[(start + r - cols[j].1, cols[j].0)]))
}

impl StubPredictor {
    /// Number of leading rows without a full input window.
    pub fn warmup(&self) -> usize {
        self.config.horizon + self.config.lags - 1
    }

    pub fn predict(&self, ds: &TimeSeriesDataset) -> Result<Vec<f64>> {
        let start = self.warmup();
        if ds.n_times() <= start {
            return Err(Error::InsufficientSamples(format!("{} rows for a window of {start}", ds.n_times())));
        }
        let x = design(ds, &self.features, start, ds.n_times())?;
        let beta = DVector::from_column_slice(&self.coefficients);
        Ok((x * beta).iter().map(|v| v + self.intercept).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionOutput {
    /// Input rows that have a prediction, plus the error column `r`.
    pub dataset: TimeSeriesDataset,
    /// Leading rows dropped for lack of history.
    pub dropped: usize,
}

/// Appends `r = Y - Y_hat`. Rows keep their original time index as label.
pub fn prediction_errors(pred: &StubPredictor, ds: &TimeSeriesDataset) -> Result<PredictionOutput> {
    if ds.names()[ds.target_index()] != pred.target {
        return Err(Error::Roles(format!("predictor target {} is not the dataset target", pred.target)));
    }
    let yhat = pred.predict(ds)?;
    let dropped = pred.warmup();
    let labels: Vec<String> = match ds.time_labels() {
        Some(l) => l.to_vec(),
        None => (0..ds.n_times()).map(|t| t.to_string()).collect(),
    };
    let sliced = ds.slice_rows(dropped, ds.n_times())?.with_time_labels(labels[dropped..].to_vec())?;
    let y = sliced.column(sliced.target_index());
    let r: Vec<f64> = y.iter().zip(&yhat).map(|(a, b)| a - b).collect();
    Ok(PredictionOutput { dataset: sliced.with_column("r", VariableRole::PredictionError, &r)?, dropped })
}
