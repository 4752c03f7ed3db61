//! Outlier scoring and Shapley attribution of an outlier to its players.
//!
//! The score of an error value is the negative log of its smoothed tail
//! probability under a reference distribution. The counterfactual score of a
//! player subset `U` re-draws the noise of the players in `U` jointly from the
//! noise model while every other player keeps the noise recovered from the
//! outlier sample. A player's attribution is its Shapley value for the game
//! `S(I) - S(I ∪ {p})`: positive values mean that replacing the player's
//! noise by a typical draw makes the outlier less extreme.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{LaggedDataset, Player, TargetSample};
use crate::error::{Error, Result};
use crate::linalg::{mean, std_dev};
use crate::rng::derived_rng;
use crate::scm::{extract_noises, NoiseSource, Scm};

/// Key for the noise rows shared by every subset of one attribution run.
const ROWS_KEY: u64 = 0x00c0_ffee;
const PERM_KEY: u64 = 0x9e4d;

/// Largest relevant-player count accepted in exact mode.
pub const EXACT_MAX_PLAYERS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierScorer {
    pub mean: f64,
    pub sd: f64,
    /// Sorted transformed reference values.
    reference: Vec<f64>,
}

impl OutlierScorer {
    /// z-transform fitted on `errors`, which also form the reference.
    pub fn from_reference(errors: &[f64]) -> Result<Self> {
        if errors.len() < 2 {
            return Err(Error::InsufficientSamples("scorer needs at least two reference errors".into()));
        }
        if errors.iter().any(|e| !e.is_finite()) {
            return Err(Error::Dataset("reference errors must be finite".into()));
        }
        let m = mean(errors.iter().copied());
        let sd = std_dev(errors);
        if !(sd > 0.0) {
            return Err(Error::Degenerate("reference errors have zero variance".into()));
        }
        let taus = errors.iter().map(|e| (e - m).abs() / sd).collect();
        Self::from_transformed(m, sd, taus)
    }

    /// Scorer with an explicit transform and already transformed reference.
    pub fn from_transformed(mean: f64, sd: f64, mut reference: Vec<f64>) -> Result<Self> {
        if !(sd > 0.0) {
            return Err(Error::Degenerate("scorer needs sd > 0".into()));
        }
        if reference.is_empty() {
            return Err(Error::InsufficientSamples("empty scorer reference".into()));
        }
        if reference.iter().any(|t| t.is_nan()) {
            return Err(Error::Dataset("NaN in scorer reference".into()));
        }
        reference.sort_by(f64::total_cmp);
        Ok(OutlierScorer { mean, sd, reference })
    }

    /// Reference drawn from the model itself rather than observed errors.
    pub fn from_scm(scm: &Scm, target: usize, n: usize, seed: u64) -> Result<Self> {
        let draws = scm.sample(&NoiseSource::Resample, n, seed)?;
        let values: Vec<f64> = draws.column(target).iter().copied().collect();
        Self::from_reference(&values)
    }

    pub fn n_reference(&self) -> usize {
        self.reference.len()
    }

    pub fn transform(&self, r: f64) -> f64 {
        (r - self.mean).abs() / self.sd
    }

    /// Add-one smoothed probability of a reference value at least as extreme.
    pub fn tail(&self, r: f64) -> f64 {
        // Values within rounding distance of a reference value count as ties,
        // so a recomputed training error ranks like the original.
        let t = self.transform(r);
        let t = t - 1e-9 * (1.0 + t);
        let below = self.reference.partition_point(|&x| x < t);
        let at_least = self.reference.len() - below;
        (1 + at_least) as f64 / (self.reference.len() + 1) as f64
    }

    pub fn score(&self, r: f64) -> f64 {
        -self.tail(r).ln()
    }
}

pub fn outlier_score(scorer: &OutlierScorer, r_star: f64) -> f64 {
    scorer.score(r_star)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreEstimate {
    pub score: f64,
    pub std_error: f64,
}

fn score_from_tails(tails: &[f64]) -> ScoreEstimate {
    let m = mean(tails.iter().copied());
    let se = if tails.len() > 1 { std_dev(tails) / (tails.len() as f64).sqrt() / m } else { 0.0 };
    ScoreEstimate { score: -m.ln(), std_error: se }
}

/// `S(r* | U)`: players in `subset` get jointly re-drawn noise, every other
/// player keeps `noise`, and the error is recomputed ancestrally.
pub fn counterfactual_score(
    scm: &Scm,
    scorer: &OutlierScorer,
    noise: &[f64],
    subset: &[usize],
    target: usize,
    samples: usize,
    seed: u64,
) -> Result<ScoreEstimate> {
    let p = scm.n_players();
    if samples == 0 {
        return Err(Error::Config("counterfactual score needs at least one sample".into()));
    }
    if noise.len() != p {
        return Err(Error::Config(format!("noise vector has {} entries for {p} players", noise.len())));
    }
    if let Some(&bad) = subset.iter().chain([&target]).find(|&&q| q >= p) {
        return Err(Error::OutOfRange { index: bad, valid: format!("0..{p}") });
    }
    if subset.is_empty() {
        let r = scm.evaluate(noise)[target];
        return Ok(ScoreEstimate { score: scorer.score(r), std_error: 0.0 });
    }
    let draws = scm.noise().draw_rows(samples, &mut derived_rng(seed, &[ROWS_KEY]));
    let tails: Vec<f64> = (0..samples)
        .into_par_iter()
        .map(|m| {
            let mut n = noise.to_vec();
            for &q in subset {
                n[q] = draws[(m, q)];
            }
            scorer.tail(scm.evaluate(&n)[target])
        })
        .collect();
    Ok(score_from_tails(&tails))
}

/// Shapley weight of a coalition of size `coalition` in a game with `players` players.
pub fn shapley_weight(players: usize, coalition: usize) -> f64 {
    assert!(coalition < players, "coalition must exclude the player");
    let mut c = 1.0_f64;
    // C(P-1, k) built incrementally to stay exact for small P.
    let k = coalition.min(players - 1 - coalition);
    for i in 0..k {
        c = c * (players - 1 - i) as f64 / (i + 1) as f64;
    }
    1.0 / (players as f64 * c.round())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapleyMode {
    Exact,
    Permutations(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributionConfig {
    /// Monte-Carlo draws per subset.
    pub samples: usize,
    pub mode: ShapleyMode,
    pub seed: u64,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig { samples: 10_000, mode: ShapleyMode::Exact, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionMethod {
    Shapley,
    Zscore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub method: AttributionMethod,
    /// Original time index of the explained row.
    pub target_index: usize,
    pub target: Player,
    pub outlier_score: f64,
    pub players: Vec<Player>,
    pub phi: Vec<f64>,
    pub phi_stderr: Vec<f64>,
    pub variables: Vec<String>,
    pub variable_phi: Vec<f64>,
    /// `None` when every attribution is zero.
    pub normalized: Option<Vec<f64>>,
    /// Outlier score minus the sum of attributions.
    pub efficiency_gap: f64,
    /// Players that can influence the target; all others have zero attribution.
    pub relevant_players: usize,
    pub subset_evaluations: usize,
    pub config: Option<AttributionConfig>,
}

impl AttributionResult {
    /// The variable among `candidates` with the strictly largest attribution.
    pub fn top_variable(&self, candidates: &[String]) -> Option<&str> {
        let mut best: Option<(usize, f64)> = None;
        let mut tied = false;
        for (i, v) in self.variables.iter().enumerate() {
            if !candidates.contains(v) {
                continue;
            }
            let phi = self.variable_phi[i];
            match best {
                Some((_, b)) if phi > b => {
                    best = Some((i, phi));
                    tied = false;
                }
                Some((_, b)) if phi == b => tied = true,
                None => best = Some((i, phi)),
                _ => {}
            }
        }
        match best {
            Some((i, _)) if !tied => Some(&self.variables[i]),
            _ => None,
        }
    }

    pub fn variable_phi_of(&self, name: &str) -> Option<f64> {
        self.variables.iter().position(|v| v == name).map(|i| self.variable_phi[i])
    }

    pub fn to_report_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct PlayerRow<'a> {
            name: &'a str,
            lag: usize,
            phi: f64,
            stderr: f64,
        }
        #[derive(Serialize)]
        struct VariableRow<'a> {
            name: &'a str,
            phi: f64,
            phi_normalized: Option<f64>,
        }
        #[derive(Serialize)]
        struct Report<'a> {
            method: AttributionMethod,
            target_index: usize,
            target: &'a Player,
            outlier_score: f64,
            players: Vec<PlayerRow<'a>>,
            variables: Vec<VariableRow<'a>>,
            normalization_skipped: bool,
            efficiency_gap: f64,
            relevant_players: usize,
            subset_evaluations: usize,
            config: Option<AttributionConfig>,
        }
        let report = Report {
            method: self.method,
            target_index: self.target_index,
            target: &self.target,
            outlier_score: self.outlier_score,
            players: self
                .players
                .iter()
                .enumerate()
                .map(|(i, p)| PlayerRow { name: &p.name, lag: p.lag, phi: self.phi[i], stderr: self.phi_stderr[i] })
                .collect(),
            variables: self
                .variables
                .iter()
                .enumerate()
                .map(|(i, v)| VariableRow {
                    name: v,
                    phi: self.variable_phi[i],
                    phi_normalized: self.normalized.as_ref().map(|n| n[i]),
                })
                .collect(),
            normalization_skipped: self.normalized.is_none(),
            efficiency_gap: self.efficiency_gap,
            relevant_players: self.relevant_players,
            subset_evaluations: self.subset_evaluations,
            config: self.config,
        };
        Ok(serde_json::to_string_pretty(&report)?)
    }
}

/// Sum per-player values over lags, keeping first-appearance variable order.
pub fn aggregate_lags(players: &[Player], phi: &[f64]) -> (Vec<String>, Vec<f64>) {
    aggregate_with(players, phi, |a, b| a + b, 0.0)
}

fn aggregate_with(players: &[Player], phi: &[f64], f: impl Fn(f64, f64) -> f64, init: f64) -> (Vec<String>, Vec<f64>) {
    let mut names: Vec<String> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    for (p, &v) in players.iter().zip(phi) {
        match names.iter().position(|n| *n == p.name) {
            Some(i) => values[i] = f(values[i], v),
            None => {
                names.push(p.name.clone());
                values.push(f(init, v));
            }
        }
    }
    (names, values)
}

/// Divide by the largest magnitude; `None` if every value is zero.
pub fn normalize(values: &[f64]) -> Option<Vec<f64>> {
    let m = values.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    (m > 0.0).then(|| values.iter().map(|v| v / m).collect())
}

/// Monte-Carlo differences `w_k * (draw_k - n*_k)` for the relevant players:
/// with linear mechanisms the counterfactual error is `r* + sum_{k in U} d_k`.
struct Game<'a> {
    scorer: &'a OutlierScorer,
    r_star: f64,
    /// `deltas[k]` holds the M differences of relevant player `k`.
    deltas: Vec<Vec<f64>>,
    samples: usize,
}

impl Game<'_> {
    fn score_of_sums(&self, acc: &[f64]) -> ScoreEstimate {
        let tails: Vec<f64> = acc.iter().map(|a| self.scorer.tail(self.r_star + a)).collect();
        score_from_tails(&tails)
    }

    fn empty(&self) -> ScoreEstimate {
        ScoreEstimate { score: self.scorer.score(self.r_star), std_error: 0.0 }
    }

    fn evaluate(&self, mask: u128) -> ScoreEstimate {
        if mask == 0 {
            return self.empty();
        }
        let mut acc = vec![0.0; self.samples];
        for (k, d) in self.deltas.iter().enumerate() {
            if mask >> k & 1 == 1 {
                for (a, x) in acc.iter_mut().zip(d) {
                    *a += x;
                }
            }
        }
        self.score_of_sums(&acc)
    }

    /// Every subset, walking each fixed chunk of masks in Gray-code order.
    fn evaluate_all(&self) -> Vec<ScoreEstimate> {
        let p = self.deltas.len();
        let low = p.min(10);
        let chunks = 1usize << (p - low);
        let per_chunk: Vec<Vec<(usize, ScoreEstimate)>> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let base = c << low;
                let mut acc = vec![0.0; self.samples];
                for k in low..p {
                    if base >> k & 1 == 1 {
                        for (a, x) in acc.iter_mut().zip(&self.deltas[k]) {
                            *a += x;
                        }
                    }
                }
                let mut out = Vec::with_capacity(1 << low);
                let mut gray = 0usize;
                for i in 0..(1usize << low) {
                    if i > 0 {
                        let b = i.trailing_zeros() as usize;
                        gray ^= 1 << b;
                        let sign = if gray >> b & 1 == 1 { 1.0 } else { -1.0 };
                        for (a, x) in acc.iter_mut().zip(&self.deltas[b]) {
                            *a += sign * x;
                        }
                    }
                    let mask = base | gray;
                    let s = if mask == 0 { self.empty() } else { self.score_of_sums(&acc) };
                    out.push((mask, s));
                }
                out
            })
            .collect();
        let mut values = vec![ScoreEstimate { score: 0.0, std_error: 0.0 }; 1 << p];
        for (mask, s) in per_chunk.into_iter().flatten() {
            values[mask] = s;
        }
        values
    }
}

/// Shapley attributions of the error (or any) player `target` in `sample`.
pub fn shapley_attributions(
    scm: &Scm,
    scorer: &OutlierScorer,
    sample: &TargetSample,
    target: usize,
    cfg: &AttributionConfig,
) -> Result<AttributionResult> {
    let p = scm.n_players();
    if target >= p {
        return Err(Error::OutOfRange { index: target, valid: format!("0..{p}") });
    }
    if cfg.samples == 0 {
        return Err(Error::Config("attribution needs at least one Monte-Carlo sample".into()));
    }
    let noise = match &sample.noises {
        Some(n) if n.len() == p => n.clone(),
        Some(n) => return Err(Error::Config(format!("sample noise has {} entries for {p} players", n.len()))),
        None => extract_noises(scm, sample)?,
    };
    // Players that are not ancestors of the target cannot move it.
    let relevant = scm.graph().ancestors(target);
    let n_rel = relevant.len();
    match cfg.mode {
        ShapleyMode::Exact if n_rel > EXACT_MAX_PLAYERS => {
            return Err(Error::Unsupported(format!(
                "exact Shapley values over {n_rel} players (limit {EXACT_MAX_PLAYERS}); use permutation sampling"
            )))
        }
        ShapleyMode::Permutations(0) => return Err(Error::Config("permutation mode needs K >= 1".into())),
        ShapleyMode::Permutations(_) if n_rel > 128 => {
            return Err(Error::Unsupported(format!("{n_rel} relevant players exceed the 128-player limit")))
        }
        _ => {}
    }
    let weights = scm.noise_weights(target);
    let draws = scm.noise().draw_rows(cfg.samples, &mut derived_rng(cfg.seed, &[ROWS_KEY]));
    let deltas: Vec<Vec<f64>> = relevant
        .iter()
        .map(|&q| (0..cfg.samples).map(|m| weights[q] * (draws[(m, q)] - noise[q])).collect())
        .collect();
    let game = Game { scorer, r_star: sample.values[target], deltas, samples: cfg.samples };

    let mut phi_rel = vec![0.0; n_rel];
    let mut se_rel = vec![0.0; n_rel];
    let (s_empty, s_all, evaluations) = match cfg.mode {
        ShapleyMode::Exact => {
            let values = game.evaluate_all();
            let w: Vec<f64> = (0..n_rel.max(1)).map(|k| if k < n_rel { shapley_weight(n_rel, k) } else { 0.0 }).collect();
            for k in 0..n_rel {
                let bit = 1usize << k;
                let (mut acc, mut var) = (0.0, 0.0);
                for mask in (0..values.len()).filter(|m| m & bit == 0) {
                    let wi = w[mask.count_ones() as usize];
                    let (a, b) = (values[mask], values[mask | bit]);
                    acc += wi * (a.score - b.score);
                    var += wi * wi * (a.std_error.powi(2) + b.std_error.powi(2));
                }
                phi_rel[k] = acc;
                se_rel[k] = var.sqrt();
            }
            (values[0].score, values[values.len() - 1].score, values.len())
        }
        ShapleyMode::Permutations(k_perms) => {
            let mut rng = derived_rng(cfg.seed, &[PERM_KEY]);
            let mut order: Vec<usize> = (0..n_rel).collect();
            let perms: Vec<Vec<usize>> = (0..k_perms)
                .map(|_| {
                    order.shuffle(&mut rng);
                    order.clone()
                })
                .collect();
            let mut masks: Vec<u128> = vec![0];
            for perm in &perms {
                let mut m = 0u128;
                for &k in perm {
                    m |= 1 << k;
                    masks.push(m);
                }
            }
            masks.sort_unstable();
            masks.dedup();
            let cache: BTreeMap<u128, ScoreEstimate> =
                masks.par_iter().map(|&m| (m, game.evaluate(m))).collect::<Vec<_>>().into_iter().collect();
            let mut contributions = vec![Vec::with_capacity(k_perms); n_rel];
            for perm in &perms {
                let mut m = 0u128;
                for &k in perm {
                    let before = cache[&m].score;
                    m |= 1 << k;
                    contributions[k].push(before - cache[&m].score);
                }
            }
            for k in 0..n_rel {
                phi_rel[k] = mean(contributions[k].iter().copied());
                se_rel[k] = std_dev(&contributions[k]) / (k_perms as f64).sqrt();
            }
            let full = if n_rel == 128 { u128::MAX } else { (1u128 << n_rel) - 1 };
            (cache[&0].score, cache[&full].score, cache.len())
        }
    };
    let _ = s_all;

    let mut phi = vec![0.0; p];
    let mut phi_stderr = vec![0.0; p];
    for (k, &q) in relevant.iter().enumerate() {
        phi[q] = phi_rel[k];
        phi_stderr[q] = se_rel[k];
    }
    let players = scm.graph().players().to_vec();
    let (variables, variable_phi) = aggregate_lags(&players, &phi);
    let normalized = normalize(&variable_phi);
    let total: f64 = phi.iter().sum();
    Ok(AttributionResult {
        method: AttributionMethod::Shapley,
        target_index: sample.time_index,
        target: players[target].clone(),
        outlier_score: s_empty,
        efficiency_gap: s_empty - total,
        players,
        phi,
        phi_stderr,
        variables,
        variable_phi,
        normalized,
        relevant_players: n_rel,
        subset_evaluations: evaluations,
        config: Some(*cfg),
    })
}

/// Per-player `|x* - mean| / sd` at `t_star`, aggregated by the maximum over lags.
pub fn zscore_baseline(lds: &LaggedDataset, t_star: usize) -> Result<AttributionResult> {
    let row = crate::dataset::target_row(lds, t_star)?;
    let p = lds.n_players();
    let mut phi = Vec::with_capacity(p);
    for q in 0..p {
        let col = lds.column(q);
        let sd = std_dev(&col);
        if !(sd > 0.0) {
            return Err(Error::Degenerate(format!("column {} has zero variance", lds.players()[q])));
        }
        phi.push((row.values[q] - mean(col.iter().copied())).abs() / sd);
    }
    let players = lds.players().to_vec();
    let (variables, variable_phi) = aggregate_with(&players, &phi, f64::max, f64::NEG_INFINITY);
    let normalized = normalize(&variable_phi);
    let target = lds
        .roles()
        .iter()
        .position(|r| *r == crate::dataset::VariableRole::Target)
        .map_or_else(|| players[0].clone(), |i| players[i].clone());
    Ok(AttributionResult {
        method: AttributionMethod::Zscore,
        target_index: t_star,
        target,
        outlier_score: 0.0,
        phi_stderr: vec![0.0; p],
        players,
        phi,
        variables,
        variable_phi,
        normalized,
        efficiency_gap: 0.0,
        relevant_players: p,
        subset_evaluations: 0,
        config: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::lagged_players;
    use crate::graph::CausalGraph;
    use crate::scm::{Mechanism, NoiseModel};
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn names(n: &[&str]) -> Vec<String> {
        n.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn score_hand_count() {
        let s = OutlierScorer::from_transformed(0.0, 1.0, vec![0.1, 0.5, 1.0, 2.0]).unwrap();
        assert!((s.score(1.5) - (-(0.4f64).ln())).abs() < 1e-12);
        assert!((s.score(-1.5) - 0.916_290_731_874_155).abs() < 1e-12);
    }

    #[test]
    fn score_at_mean_is_zero_and_above_all_is_log_n_plus_one() {
        let s = OutlierScorer::from_reference(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(s.score(3.0), 0.0);
        assert!((s.score(1e6) - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn scorer_rejects_constant_reference() {
        assert!(OutlierScorer::from_reference(&[2.0, 2.0, 2.0]).is_err());
        assert!(OutlierScorer::from_transformed(0.0, 1.0, vec![]).is_err());
    }

    #[test]
    fn weight_table_three_players() {
        let w: Vec<f64> = (0..3).map(|k| shapley_weight(3, k)).collect();
        assert!((w[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((w[1] - 1.0 / 6.0).abs() < 1e-15);
        assert!((w[2] - 1.0 / 3.0).abs() < 1e-15);
        assert!((w[0] + 2.0 * w[1] + w[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize(&[2.0, -1.0, 0.5]).unwrap(), vec![1.0, -0.5, 0.25]);
        assert_eq!(normalize(&[0.0, 3.0]).unwrap(), vec![0.0, 1.0]);
        assert!(normalize(&[0.0, 0.0]).is_none());
    }

    #[test]
    fn lag_sum() {
        let players = vec![Player::new("X1", 0), Player::new("Y", 0), Player::new("X1", 1), Player::new("Y", 1)];
        let (v, phi) = aggregate_lags(&players, &[0.2, 1.0, 0.3, -0.5]);
        assert_eq!(v, names(&["X1", "Y"]));
        assert!((phi[0] - 0.5).abs() < 1e-15);
        assert!((phi[1] - 0.5).abs() < 1e-15);
    }

    /// a -> b -> r plus an isolated c; noise rows from a fixed grid.
    fn chain() -> Scm {
        let players = lagged_players(&names(&["a", "b", "c", "r"]), 0);
        let g = CausalGraph::with_edges(0, players.clone(), [(0, 1), (1, 3)]).unwrap();
        let m = |i: usize, parents: Vec<usize>, c: Vec<f64>| Mechanism { player: players[i].clone(), parents, coefficients: c, intercept: 0.0 };
        let mut rows = Vec::new();
        for i in 0..200 {
            let x = (i as f64 * 0.618_033_988_7).fract() - 0.5;
            let y = (i as f64 * 0.414_213_562_3).fract() - 0.5;
            let z = (i as f64 * 0.732_050_807_5).fract() - 0.5;
            rows.extend_from_slice(&[x, y, z, 0.3 * (x - y)]);
        }
        let noise = NoiseModel::EmpiricalRows(DMatrix::from_row_slice(200, 4, &rows));
        Scm::from_parts(g, vec![m(0, vec![], vec![]), m(1, vec![0], vec![2.0]), m(2, vec![], vec![]), m(3, vec![1], vec![1.0])], noise).unwrap()
    }

    fn reference_of(scm: &Scm) -> OutlierScorer {
        let NoiseModel::EmpiricalRows(rows) = scm.noise() else { unreachable!() };
        let r: Vec<f64> = (0..rows.nrows()).map(|i| scm.evaluate(&rows.row(i).iter().copied().collect::<Vec<_>>())[3]).collect();
        OutlierScorer::from_reference(&r).unwrap()
    }

    fn outlier(scm: &Scm) -> TargetSample {
        let values = scm.evaluate(&[3.0, 0.0, 0.1, 0.0]);
        TargetSample::new(42, values)
    }

    #[test]
    fn empty_subset_reproduces_outlier_score() {
        let scm = chain();
        let scorer = reference_of(&scm);
        let s = outlier(&scm);
        let n = extract_noises(&scm, &s).unwrap();
        let cf = counterfactual_score(&scm, &scorer, &n, &[], 3, 50, 1).unwrap();
        assert!((cf.score - scorer.score(s.values[3])).abs() < 1e-9);
    }

    #[test]
    fn randomizing_everything_gives_about_log_two() {
        let scm = chain();
        let scorer = reference_of(&scm);
        let n = extract_noises(&scm, &outlier(&scm)).unwrap();
        let cf = counterfactual_score(&scm, &scorer, &n, &[0, 1, 2, 3], 3, 4000, 2).unwrap();
        assert!((cf.score - 2f64.ln()).abs() < 4.0 * cf.std_error + 0.02, "{cf:?}");
    }

    #[test]
    fn root_cause_dominates_and_dummy_is_zero() {
        let scm = chain();
        let scorer = reference_of(&scm);
        let cfg = AttributionConfig { samples: 500, mode: ShapleyMode::Exact, seed: 3 };
        let res = shapley_attributions(&scm, &scorer, &outlier(&scm), 3, &cfg).unwrap();
        assert_eq!(res.top_variable(&names(&["a", "b", "c"])), Some("a"));
        assert_eq!(res.phi[2], 0.0);
        assert_eq!(res.relevant_players, 3);
        // Telescoping over the shared cache.
        let s_all = counterfactual_score(&scm, &scorer, &extract_noises(&scm, &outlier(&scm)).unwrap(), &[0, 1, 3], 3, 500, 3).unwrap();
        let total: f64 = res.phi.iter().sum();
        assert!((total - (res.outlier_score - s_all.score)).abs() < 1e-9, "{total} vs {}", res.outlier_score - s_all.score);
        assert!((res.efficiency_gap - s_all.score).abs() < 1e-9);
    }

    #[test]
    fn shapley_cache_matches_direct_counterfactual_scores() {
        let scm = chain();
        let scorer = reference_of(&scm);
        let s = outlier(&scm);
        let n = extract_noises(&scm, &s).unwrap();
        let cfg = AttributionConfig { samples: 300, mode: ShapleyMode::Exact, seed: 8 };
        let w = scm.noise_weights(3);
        let draws = scm.noise().draw_rows(300, &mut derived_rng(8, &[ROWS_KEY]));
        let relevant = scm.graph().ancestors(3);
        let deltas = relevant.iter().map(|&q| (0..300).map(|m| w[q] * (draws[(m, q)] - n[q])).collect()).collect();
        let game = Game { scorer: &scorer, r_star: s.values[3], deltas, samples: cfg.samples };
        let all = game.evaluate_all();
        for mask in 1..all.len() {
            let subset: Vec<usize> = (0..relevant.len()).filter(|k| mask >> k & 1 == 1).map(|k| relevant[k]).collect();
            let direct = counterfactual_score(&scm, &scorer, &n, &subset, 3, 300, 8).unwrap();
            assert!((direct.score - all[mask].score).abs() < 1e-9, "mask {mask}");
            assert!((game.evaluate(mask as u128).score - all[mask].score).abs() < 1e-9);
        }
    }

    #[test]
    fn single_player_game() {
        // Only `a` moves r when b's noise is pinned by zero coefficients.
        let scm = chain();
        let scorer = reference_of(&scm);
        let s = outlier(&scm);
        let cfg = AttributionConfig { samples: 400, mode: ShapleyMode::Exact, seed: 4 };
        let res = shapley_attributions(&scm, &scorer, &s, 1, &cfg).unwrap();
        // Target b has ancestors {a, b}; c and r are dummies.
        assert_eq!(res.phi[2], 0.0);
        assert_eq!(res.phi[3], 0.0);
        assert_eq!(res.relevant_players, 2);
    }

    #[test]
    fn permutations_converge_to_exact() {
        let scm = chain();
        let scorer = reference_of(&scm);
        let s = outlier(&scm);
        let exact = shapley_attributions(&scm, &scorer, &s, 3, &AttributionConfig { samples: 300, mode: ShapleyMode::Exact, seed: 5 }).unwrap();
        let perm = shapley_attributions(&scm, &scorer, &s, 3, &AttributionConfig { samples: 300, mode: ShapleyMode::Permutations(300), seed: 5 }).unwrap();
        for q in 0..4 {
            let tol = 3.0 * (perm.phi_stderr[q].powi(2) + exact.phi_stderr[q].powi(2)).sqrt() + 1e-9;
            assert!((perm.phi[q] - exact.phi[q]).abs() <= tol, "player {q}: {} vs {}", perm.phi[q], exact.phi[q]);
        }
    }

    #[test]
    fn exact_mode_is_bitwise_reproducible_across_pools() {
        let scm = chain();
        let scorer = reference_of(&scm);
        let s = outlier(&scm);
        let cfg = AttributionConfig { samples: 200, mode: ShapleyMode::Exact, seed: 6 };
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| shapley_attributions(&scm, &scorer, &s, 3, &cfg).unwrap());
        let b = four.install(|| shapley_attributions(&scm, &scorer, &s, 3, &cfg).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn too_many_players_for_exact() {
        let names: Vec<String> = (0..21).map(|i| format!("v{i}")).collect();
        let players = lagged_players(&names, 0);
        let g = CausalGraph::with_edges(0, players.clone(), (0..20).map(|i| (i, 20))).unwrap();
        let mechanisms = (0..21)
            .map(|i| {
                let parents = if i == 20 { (0..20).collect() } else { vec![] };
                Mechanism { player: players[i].clone(), coefficients: vec![1.0; parents.len()], parents, intercept: 0.0 }
            })
            .collect();
        let scm = Scm::from_parts(g, mechanisms, NoiseModel::EmpiricalRows(DMatrix::from_element(2, 21, 1.0))).unwrap();
        let scorer = OutlierScorer::from_reference(&[0.0, 1.0]).unwrap();
        let s = TargetSample::new(0, scm.evaluate(&[0.0; 21]));
        let cfg = AttributionConfig { samples: 2, mode: ShapleyMode::Exact, seed: 0 };
        assert!(matches!(shapley_attributions(&scm, &scorer, &s, 20, &cfg), Err(Error::Unsupported(_))));
    }

    #[test]
    fn symmetric_players_share_attribution() {
        // a and b both feed r with unit weight and carry identical noise.
        let players = lagged_players(&names(&["a", "b", "r"]), 0);
        let g = CausalGraph::with_edges(0, players.clone(), [(0, 2), (1, 2)]).unwrap();
        let m = |i: usize, parents: Vec<usize>| Mechanism { player: players[i].clone(), coefficients: vec![1.0; parents.len()], parents, intercept: 0.0 };
        let rows: Vec<f64> = (0..100).flat_map(|i| {
            let x = (i as f64 * 0.618_033_988_7).fract() - 0.5;
            [x, -x, 0.0]
        }).collect();
        let scm = Scm::from_parts(g, vec![m(0, vec![]), m(1, vec![]), m(2, vec![0, 1])], NoiseModel::EmpiricalRows(DMatrix::from_row_slice(100, 3, &rows))).unwrap();
        let reference: Vec<f64> = (0..100).map(|i| (i as f64 * 0.1).sin()).collect();
        let scorer = OutlierScorer::from_reference(&reference).unwrap();
        let s = TargetSample::new(0, scm.evaluate(&[2.0, 2.0, 0.0]));
        let res = shapley_attributions(&scm, &scorer, &s, 2, &AttributionConfig { samples: 100, mode: ShapleyMode::Exact, seed: 1 }).unwrap();
        assert!((res.phi[0] - res.phi[1]).abs() < 1e-9);
    }

    #[test]
    fn zscore_picks_shifted_column() {
        use crate::dataset::{to_lagged, TimeSeriesDataset, VariableRole};
        let t = 200;
        let mut vals = DMatrix::from_fn(t, 3, |i, j| ((i * (j + 3)) as f64 * 0.37).sin());
        let sd = std_dev(&vals.column(1).iter().copied().collect::<Vec<_>>());
        vals[(100, 1)] += 10.0 * sd;
        let ds = TimeSeriesDataset::new(names(&["A", "B", "Y"]), vec![VariableRole::Covariate, VariableRole::Covariate, VariableRole::Target], vals).unwrap();
        let lds = to_lagged(&ds, 0).unwrap();
        let res = zscore_baseline(&lds, 100).unwrap();
        assert_eq!(res.normalized.as_ref().unwrap()[1], 1.0);
        assert_eq!(res.top_variable(&names(&["A", "B"])), Some("B"));
    }

    #[test]
    fn zscore_at_the_mean_is_zero() {
        use crate::dataset::{to_lagged, TimeSeriesDataset, VariableRole};
        let vals = DMatrix::from_row_slice(3, 2, &[1.0, 10.0, 2.0, 20.0, 3.0, 30.0]);
        let ds = TimeSeriesDataset::new(names(&["A", "Y"]), vec![VariableRole::Covariate, VariableRole::Target], vals).unwrap();
        let res = zscore_baseline(&to_lagged(&ds, 0).unwrap(), 1).unwrap();
        assert_eq!(res.variable_phi, vec![0.0, 0.0]);
        assert!(res.normalized.is_none());
    }

    #[test]
    fn ties_are_not_detections() {
        let players = vec![Player::new("A", 0), Player::new("B", 0)];
        let (variables, variable_phi) = aggregate_lags(&players, &[1.0, 1.0]);
        let res = AttributionResult {
            method: AttributionMethod::Shapley,
            target_index: 0,
            target: players[0].clone(),
            outlier_score: 0.0,
            phi: vec![1.0, 1.0],
            phi_stderr: vec![0.0; 2],
            players,
            normalized: normalize(&variable_phi),
            variables,
            variable_phi,
            efficiency_gap: 0.0,
            relevant_players: 2,
            subset_evaluations: 0,
            config: None,
        };
        assert_eq!(res.top_variable(&names(&["A", "B"])), None);
        assert!(res.to_report_json().unwrap().contains("\"phi_normalized\": 1.0"));
    }

    proptest! {
        #[test]
        fn score_is_bounded(r in -1e3f64..1e3, refs in proptest::collection::vec(-10.0f64..10.0, 2..50)) {
            prop_assume!(std_dev(&refs) > 1e-6);
            let s = OutlierScorer::from_reference(&refs).unwrap();
            let v = s.score(r);
            prop_assert!(v >= 0.0 && v <= ((refs.len() + 1) as f64).ln() + 1e-12);
        }

        #[test]
        fn scaling_keeps_argmax(phi in proptest::collection::vec(-5.0f64..5.0, 3), c in 0.01f64..100.0) {
            let players: Vec<Player> = ["A", "B", "C"].iter().map(|n| Player::new(*n, 0)).collect();
            let (_, a) = aggregate_lags(&players, &phi);
            let scaled: Vec<f64> = phi.iter().map(|x| x * c).collect();
            let (_, b) = aggregate_lags(&players, &scaled);
            let argmax = |v: &[f64]| v.iter().enumerate().max_by(|x, y| x.1.total_cmp(y.1)).map(|x| x.0);
            prop_assert_eq!(argmax(&a), argmax(&b));
            if let (Some(na), Some(nb)) = (normalize(&a), normalize(&b)) {
                for (x, y) in na.iter().zip(&nb) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn variable_sums_preserve_total(phi in proptest::collection::vec(-5.0f64..5.0, 6)) {
            let players = lagged_players(&["A".to_string(), "B".to_string(), "C".to_string()], 1);
            let (_, v) = aggregate_lags(&players, &phi);
            prop_assert!((v.iter().sum::<f64>() - phi.iter().sum::<f64>()).abs() < 1e-12);
        }
    }
}
