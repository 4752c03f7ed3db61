//! Linear additive-noise structural causal models over lagged players.
//!
//! Every player `p` is generated as `x_p = intercept_p + sum_q c_qp * x_q + n_p`
//! over its graph parents `q`. Fitting is ordinary least squares per player;
//! the residuals form the empirical noise distribution.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{LaggedDataset, Player, TargetSample};
use crate::error::{Error, Result};
use crate::graph::{CausalGraph, GraphFile};
use crate::linalg::{least_squares, mean, std_dev};
use crate::rng::{derived_rng, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mechanism {
    pub player: Player,
    /// Parent player indices, ascending.
    pub parents: Vec<usize>,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
}

impl Mechanism {
    fn predict(&self, values: &[f64]) -> f64 {
        self.parents.iter().zip(&self.coefficients).fold(self.intercept, |acc, (&q, c)| acc + c * values[q])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    EmpiricalRows,
    Gaussian,
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseModel {
    /// One residual row per training row; sampling draws whole rows.
    EmpiricalRows(DMatrix<f64>),
    /// Independent per-player normals.
    Gaussian { mean: Vec<f64>, sd: Vec<f64> },
    /// Independent per-player uniforms on `[low, high)`.
    Uniform { low: Vec<f64>, high: Vec<f64> },
}

impl NoiseModel {
    pub fn kind(&self) -> NoiseKind {
        match self {
            NoiseModel::EmpiricalRows(_) => NoiseKind::EmpiricalRows,
            NoiseModel::Gaussian { .. } => NoiseKind::Gaussian,
            NoiseModel::Uniform { .. } => NoiseKind::Uniform,
        }
    }

    fn from_residuals(kind: NoiseKind, residuals: DMatrix<f64>) -> Result<Self> {
        let p = residuals.ncols();
        let cols: Vec<Vec<f64>> = (0..p).map(|j| residuals.column(j).iter().copied().collect()).collect();
        Ok(match kind {
            NoiseKind::EmpiricalRows => NoiseModel::EmpiricalRows(residuals),
            NoiseKind::Gaussian => NoiseModel::Gaussian {
                mean: cols.iter().map(|c| mean(c.iter().copied())).collect(),
                sd: cols.iter().map(|c| std_dev(c)).collect(),
            },
            NoiseKind::Uniform => NoiseModel::Uniform {
                low: cols.iter().map(|c| c.iter().copied().fold(f64::INFINITY, f64::min)).collect(),
                high: cols.iter().map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect(),
            },
        })
    }

    fn validate(&self, n_players: usize) -> Result<()> {
        match self {
            NoiseModel::EmpiricalRows(m) => {
                if m.nrows() == 0 {
                    return Err(Error::InsufficientSamples("empirical noise matrix has no rows".into()));
                }
                if m.ncols() != n_players {
                    return Err(Error::Config(format!("noise matrix has {} columns for {n_players} players", m.ncols())));
                }
            }
            NoiseModel::Gaussian { mean, sd } => {
                if mean.len() != n_players || sd.len() != n_players {
                    return Err(Error::Config("gaussian noise parameters do not match the player count".into()));
                }
                if sd.iter().any(|s| !(*s > 0.0)) {
                    return Err(Error::Degenerate("gaussian noise needs sd > 0 for every player".into()));
                }
            }
            NoiseModel::Uniform { low, high } => {
                if low.len() != n_players || high.len() != n_players {
                    return Err(Error::Config("uniform noise parameters do not match the player count".into()));
                }
                if low.iter().zip(high).any(|(a, b)| !(a < b)) {
                    return Err(Error::Degenerate("uniform noise needs low < high for every player".into()));
                }
            }
        }
        Ok(())
    }

    /// Fill `out` with one joint noise draw.
    pub fn draw_row(&self, rng: &mut Rng, out: &mut [f64]) {
        match self {
            NoiseModel::EmpiricalRows(m) => {
                let k = rng.gen_range(0..m.nrows());
                for (j, o) in out.iter_mut().enumerate() {
                    *o = m[(k, j)];
                }
            }
            NoiseModel::Gaussian { mean, sd } => {
                for (j, o) in out.iter_mut().enumerate() {
                    *o = Normal::new(mean[j], sd[j]).expect("validated sd").sample(rng);
                }
            }
            NoiseModel::Uniform { low, high } => {
                for (j, o) in out.iter_mut().enumerate() {
                    *o = rng.gen_range(low[j]..high[j]);
                }
            }
        }
    }

    /// `n` joint draws as rows of a matrix.
    pub fn draw_rows(&self, n: usize, rng: &mut Rng) -> DMatrix<f64> {
        let p = match self {
            NoiseModel::EmpiricalRows(m) => m.ncols(),
            NoiseModel::Gaussian { mean, .. } => mean.len(),
            NoiseModel::Uniform { low, .. } => low.len(),
        };
        let mut out = DMatrix::zeros(n, p);
        let mut row = vec![0.0; p];
        for i in 0..n {
            self.draw_row(rng, &mut row);
            for j in 0..p {
                out[(i, j)] = row[j];
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSource {
    /// Joint draws from the noise model.
    Resample,
    /// The same noise vector for every sample.
    FixedRow(Vec<f64>),
    /// Players in `fixed` keep `values[p]`; the rest are drawn jointly.
    Hybrid { fixed: Vec<usize>, values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scm {
    graph: CausalGraph,
    mechanisms: Vec<Mechanism>,
    noise: NoiseModel,
    topo: Vec<usize>,
}

pub fn fit_scm(lds: &LaggedDataset, g: &CausalGraph) -> Result<Scm> {
    fit_scm_with(lds, g, NoiseKind::EmpiricalRows)
}

pub fn fit_scm_with(lds: &LaggedDataset, g: &CausalGraph, kind: NoiseKind) -> Result<Scm> {
    if g.players() != lds.players() {
        return Err(Error::Graph("graph players do not match the lagged dataset".into()));
    }
    if let Some(v) = g.validate().first() {
        return Err(Error::Graph(format!("invalid graph: {v}")));
    }
    let n = lds.n_rows();
    if n < 2 {
        return Err(Error::InsufficientSamples(format!("{n} rows")));
    }
    let rows = lds.rows();
    let fitted: Vec<(Mechanism, DVector<f64>)> = (0..lds.n_players())
        .into_par_iter()
        .map(|p| {
            let parents = g.parents(p);
            let y = DVector::from_column_slice(rows.column(p).as_slice());
            let design = DMatrix::from_fn(n, parents.len() + 1, |i, j| if j == 0 { 1.0 } else { rows[(i, parents[j - 1])] });
            let what = format!("parents of {}", lds.players()[p]);
            let fit = least_squares(&design, &y, &what)?;
            let mech = Mechanism {
                player: lds.players()[p].clone(),
                coefficients: fit.coefficients.iter().skip(1).copied().collect(),
                intercept: fit.coefficients[0],
                parents,
            };
            Ok((mech, fit.residuals))
        })
        .collect::<Result<_>>()?;
    let mut residuals = DMatrix::zeros(n, lds.n_players());
    let mut mechanisms = Vec::with_capacity(fitted.len());
    for (p, (m, r)) in fitted.into_iter().enumerate() {
        residuals.set_column(p, &r);
        mechanisms.push(m);
    }
    let noise = NoiseModel::from_residuals(kind, residuals)?;
    Scm::from_parts(g.clone(), mechanisms, noise)
}

impl Scm {
    /// Assemble a model from known mechanisms, checking them against the graph.
    pub fn from_parts(graph: CausalGraph, mechanisms: Vec<Mechanism>, noise: NoiseModel) -> Result<Scm> {
        if mechanisms.len() != graph.n_players() {
            return Err(Error::Config(format!("{} mechanisms for {} players", mechanisms.len(), graph.n_players())));
        }
        for (p, m) in mechanisms.iter().enumerate() {
            if m.player != graph.players()[p] {
                return Err(Error::Config(format!("mechanism {p} is for {}, expected {}", m.player, graph.players()[p])));
            }
            if m.parents != graph.parents(p) {
                return Err(Error::Config(format!("mechanism parents of {} do not match the graph", m.player)));
            }
            if m.coefficients.len() != m.parents.len() {
                return Err(Error::Config(format!("coefficient count mismatch for {}", m.player)));
            }
        }
        noise.validate(graph.n_players())?;
        let topo = graph.topological_order()?;
        Ok(Scm { graph, mechanisms, noise, topo })
    }

    pub fn graph(&self) -> &CausalGraph {
        &self.graph
    }

    pub fn mechanisms(&self) -> &[Mechanism] {
        &self.mechanisms
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn topological_order(&self) -> &[usize] {
        &self.topo
    }

    pub fn n_players(&self) -> usize {
        self.mechanisms.len()
    }

    pub fn coefficient(&self, from: usize, to: usize) -> Option<f64> {
        let m = &self.mechanisms[to];
        m.parents.iter().position(|&q| q == from).map(|i| m.coefficients[i])
    }

    /// Ancestral evaluation of one noise vector.
    pub fn evaluate(&self, noise: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_players()];
        self.evaluate_into(noise, &mut out);
        out
    }

    pub fn evaluate_into(&self, noise: &[f64], out: &mut [f64]) {
        for &p in &self.topo {
            out[p] = self.mechanisms[p].predict(out) + noise[p];
        }
    }

    /// Total effect of a unit change in each player's noise on `target`:
    /// the sum over directed paths of coefficient products, 1 for `target`.
    pub fn noise_weights(&self, target: usize) -> Vec<f64> {
        let mut w = vec![0.0; self.n_players()];
        w[target] = 1.0;
        for &p in self.topo.iter().rev() {
            if p == target {
                continue;
            }
            w[p] = self.graph.children(p).iter().map(|&c| self.coefficient(p, c).unwrap_or(0.0) * w[c]).sum();
        }
        w
    }

    pub fn sample(&self, source: &NoiseSource, n: usize, seed: u64) -> Result<DMatrix<f64>> {
        if n == 0 {
            return Err(Error::Config("sample count must be at least 1".into()));
        }
        let p = self.n_players();
        let (fixed_mask, fixed_values): (Vec<bool>, Option<&[f64]>) = match source {
            NoiseSource::Resample => (vec![false; p], None),
            NoiseSource::FixedRow(v) => (vec![true; p], Some(v)),
            NoiseSource::Hybrid { fixed, values } => {
                let mut mask = vec![false; p];
                for &q in fixed {
                    *mask.get_mut(q).ok_or(Error::OutOfRange { index: q, valid: format!("0..{p}") })? = true;
                }
                (mask, Some(values))
            }
        };
        if let Some(v) = fixed_values {
            if v.len() != p {
                return Err(Error::Config(format!("fixed noise vector has {} entries for {p} players", v.len())));
            }
        }
        let mut rng = derived_rng(seed, &[0x5ca1]);
        let mut out = DMatrix::zeros(n, p);
        let mut noise = vec![0.0; p];
        let mut vals = vec![0.0; p];
        let all_fixed = fixed_mask.iter().all(|&f| f);
        for i in 0..n {
            if !all_fixed {
                self.noise.draw_row(&mut rng, &mut noise);
            }
            if let Some(v) = fixed_values {
                for q in (0..p).filter(|&q| fixed_mask[q]) {
                    noise[q] = v[q];
                }
            }
            self.evaluate_into(&noise, &mut vals);
            for j in 0..p {
                out[(i, j)] = vals[j];
            }
        }
        Ok(out)
    }

    /// Long-run variable-to-variable total effects `(I - sum_l A_l)^-1`,
    /// where `A_l[i][j]` is the coefficient of variable `j` at lag `l` in the
    /// lag-0 mechanism of variable `i`.
    pub fn stationary_effects(&self) -> Result<DMatrix<f64>> {
        let tau = self.graph.tau_max();
        let v = self.n_players() / (tau + 1);
        let mut a = DMatrix::<f64>::zeros(v, v);
        for i in 0..v {
            let m = &self.mechanisms[i];
            for (&q, c) in m.parents.iter().zip(&m.coefficients) {
                a[(i, q % v)] += c;
            }
        }
        let lhs = DMatrix::<f64>::identity(v, v) - a;
        lhs.try_inverse().ok_or_else(|| Error::Degenerate("process is not stable: I - sum of lag matrices is singular".into()))
    }
}

pub fn extract_noises(scm: &Scm, sample: &TargetSample) -> Result<Vec<f64>> {
    let p = scm.n_players();
    if sample.values.len() != p {
        return Err(Error::Config(format!("sample has {} values for {p} players", sample.values.len())));
    }
    Ok((0..p).map(|q| sample.values[q] - scm.mechanisms[q].predict(&sample.values)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AteSource {
    Player(Player),
    /// All lags of a variable, shifted together.
    Variable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AteMethod {
    PathProduct,
    InterventionalSampling { samples: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteEstimate {
    pub source: AteSource,
    pub target: Player,
    pub value: f64,
    pub std_error: Option<f64>,
    pub method: AteMethod,
    /// Long-run effect between the variables, when the source is a variable.
    pub stationary: Option<f64>,
}

/// Average total effect of `do(source += 1)` on `target`.
pub fn estimate_ate(scm: &Scm, source: &AteSource, target: usize, method: AteMethod) -> Result<AteEstimate> {
    let g = scm.graph();
    let p = scm.n_players();
    if target >= p {
        return Err(Error::OutOfRange { index: target, valid: format!("0..{p}") });
    }
    let tau = g.tau_max();
    let v = p / (tau + 1);
    let sources: Vec<usize> = match source {
        AteSource::Player(pl) => {
            vec![g.find(&pl.name, pl.lag).ok_or_else(|| Error::Config(format!("unknown player {pl}")))?]
        }
        AteSource::Variable(name) => {
            let first = g.find(name, 0).ok_or_else(|| Error::Config(format!("unknown variable {name}")))?;
            (0..=tau).map(|l| l * v + first).collect()
        }
    };
    if sources.contains(&target) {
        return Err(Error::Config("ATE source and target must differ".into()));
    }
    let (value, std_error) = match method {
        AteMethod::PathProduct => {
            let w = scm.noise_weights(target);
            (sources.iter().map(|&s| w[s]).sum(), None)
        }
        AteMethod::InterventionalSampling { samples, seed } => {
            if samples < 2 {
                return Err(Error::Config("interventional ATE needs at least 2 samples".into()));
            }
            let mut rng = derived_rng(seed, &[0xa7e]);
            let draws = scm.noise().draw_rows(samples, &mut rng);
            let diffs: Vec<f64> = (0..samples)
                .into_par_iter()
                .map(|i| {
                    let mut noise: Vec<f64> = draws.row(i).iter().copied().collect();
                    let base = scm.evaluate(&noise)[target];
                    // A unit shift of a node's value is a unit shift of its noise.
                    for &s in &sources {
                        noise[s] += 1.0;
                    }
                    scm.evaluate(&noise)[target] - base
                })
                .collect();
            (mean(diffs.iter().copied()), Some(std_dev(&diffs) / (samples as f64).sqrt()))
        }
    };
    let stationary = match source {
        AteSource::Variable(_) => {
            let m = scm.stationary_effects().ok();
            m.map(|m| m[(target % v, sources.first().map_or(0, |s| s % v))])
        }
        AteSource::Player(_) => None,
    };
    Ok(AteEstimate { source: source.clone(), target: g.players()[target].clone(), value, std_error, method, stationary })
}

#[derive(Serialize, Deserialize)]
struct ScmFile {
    graph: GraphFile,
    mechanisms: Vec<MechanismRecord>,
    noise: NoiseRecord,
}

#[derive(Serialize, Deserialize)]
struct MechanismRecord {
    player: Player,
    parents: Vec<Player>,
    coefficients: Vec<f64>,
    intercept: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum NoiseRecord {
    EmpiricalRows { rows: usize, file: String },
    Gaussian { mean: Vec<f64>, sd: Vec<f64> },
    Uniform { low: Vec<f64>, high: Vec<f64> },
}

/// Path of the companion noise CSV for an SCM JSON file.
pub fn noise_csv_path(json_path: &Path) -> PathBuf {
    let stem = json_path.file_stem().and_then(|s| s.to_str()).unwrap_or("scm");
    json_path.with_file_name(format!("{stem}.noise.csv"))
}

impl Scm {
    /// Writes the model JSON and, for empirical noise, its companion CSV.
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let players = self.graph.players();
        let noise = match &self.noise {
            NoiseModel::EmpiricalRows(m) => {
                let csv_path = noise_csv_path(path);
                let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::Dataset(format!("{}: {e}", csv_path.display())))?;
                w.write_record(players.iter().map(ToString::to_string))?;
                for i in 0..m.nrows() {
                    w.write_record(m.row(i).iter().map(|x| x.to_string()))?;
                }
                w.flush().map_err(|e| Error::io(&csv_path, e))?;
                let file = csv_path.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                NoiseRecord::EmpiricalRows { rows: m.nrows(), file }
            }
            NoiseModel::Gaussian { mean, sd } => NoiseRecord::Gaussian { mean: mean.clone(), sd: sd.clone() },
            NoiseModel::Uniform { low, high } => NoiseRecord::Uniform { low: low.clone(), high: high.clone() },
        };
        let file = ScmFile {
            graph: GraphFile::from(&self.graph),
            mechanisms: self
                .mechanisms
                .iter()
                .map(|m| MechanismRecord {
                    player: m.player.clone(),
                    parents: m.parents.iter().map(|&q| players[q].clone()).collect(),
                    coefficients: m.coefficients.clone(),
                    intercept: m.intercept,
                })
                .collect(),
            noise,
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Scm> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ScmFile = serde_json::from_str(&text)?;
        let graph = CausalGraph::try_from(file.graph)?;
        let index: BTreeMap<&Player, usize> = graph.players().iter().enumerate().map(|(i, p)| (p, i)).collect();
        let mut mechanisms = Vec::with_capacity(file.mechanisms.len());
        for m in file.mechanisms {
            let parents = m
                .parents
                .iter()
                .map(|q| index.get(q).copied().ok_or_else(|| Error::Graph(format!("unknown parent {q}"))))
                .collect::<Result<Vec<_>>>()?;
            // Re-sort to the graph's ascending parent order.
            let mut pairs: Vec<(usize, f64)> = parents.into_iter().zip(m.coefficients).collect();
            pairs.sort_by_key(|x| x.0);
            mechanisms.push(Mechanism {
                player: m.player,
                parents: pairs.iter().map(|x| x.0).collect(),
                coefficients: pairs.iter().map(|x| x.1).collect(),
                intercept: m.intercept,
            });
        }
        let noise = match file.noise {
            NoiseRecord::EmpiricalRows { file: name, .. } => {
                let csv_path = path.with_file_name(name);
                let mut r = csv::Reader::from_path(&csv_path).map_err(|e| Error::Dataset(format!("{}: {e}", csv_path.display())))?;
                let mut data = Vec::new();
                let mut n = 0;
                for (i, rec) in r.records().enumerate() {
                    let rec = rec?;
                    for (j, cell) in rec.iter().enumerate() {
                        data.push(cell.trim().parse::<f64>().map_err(|_| Error::BadCell {
                            row: i + 1,
                            column: j.to_string(),
                            value: cell.to_string(),
                        })?);
                    }
                    n += 1;
                }
                let p = graph.n_players();
                if data.len() != n * p {
                    return Err(Error::Dataset(format!("{} does not have {p} columns per row", csv_path.display())));
                }
                NoiseModel::EmpiricalRows(DMatrix::from_row_slice(n, p, &data))
            }
            NoiseRecord::Gaussian { mean, sd } => NoiseModel::Gaussian { mean, sd },
            NoiseRecord::Uniform { low, high } => NoiseModel::Uniform { low, high },
        };
        Scm::from_parts(graph, mechanisms, noise)
    }
}
