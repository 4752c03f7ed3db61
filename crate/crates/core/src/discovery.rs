//! PC-style causal discovery on the lagged table.
//!
//! The search works on the stationary window: it estimates the parents of
//! every lag-0 player among all other players, prunes adjacencies with
//! Fisher-z partial-correlation tests of growing conditioning-set size, then
//! orients edges. Cross-lag edges always point forward in time.
//! Contemporaneous edges are oriented by unshielded colliders and Meek's
//! rules; whatever is still undirected is resolved by player order and
//! reported as ambiguous. The lag-0 parent sets are finally shifted to every
//! older lag that fits in the window.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::cmp::Reverse;

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::dataset::{LaggedDataset, Player};
use crate::error::{Error, Result};
use crate::graph::CausalGraph;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryConfig {
    pub alpha: f64,
    pub max_cond_set: usize,
    pub forbid_future: bool,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        DiscoveryConfig { alpha: 0.01, max_cond_set: 3, forbid_future: true }
    }
}

impl DiscoveryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !self.forbid_future {
            return Err(Error::Unsupported("discovery only produces time-respecting graphs; forbid_future must be true".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiTestResult {
    pub partial_correlation: f64,
    pub p_value: f64,
    pub cond_set: Vec<usize>,
    pub n_effective: usize,
}

/// Correlation matrix of standardized columns; the basis for every test.
struct CorrelationCache {
    corr: DMatrix<f64>,
    n: usize,
}

impl CorrelationCache {
    fn new(lds: &LaggedDataset, players: &[usize]) -> Result<Self> {
        let n = lds.n_rows();
        let rows = lds.rows();
        let mut z = DMatrix::zeros(n, players.len());
        for (c, &p) in players.iter().enumerate() {
            let col = rows.column(p);
            let m = col.mean();
            let var = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
            if !(var > 1e-300) || var <= 1e-24 * m.abs().max(1.0).powi(2) {
                return Err(Error::Degenerate(format!("column {} has zero variance", lds.players()[p])));
            }
            let sd = var.sqrt();
            for t in 0..n {
                z[(t, c)] = (col[t] - m) / sd;
            }
        }
        let corr = (z.transpose() * &z) / n as f64;
        Ok(CorrelationCache { corr, n })
    }

    /// Partial correlation of `i` and `j` given `cond` (indices into the
    /// cache), through the residual covariances of both on `cond`.
    fn partial(&self, i: usize, j: usize, cond: &[usize]) -> Result<f64> {
        let c = &self.corr;
        if cond.is_empty() {
            return Ok(c[(i, j)].clamp(-1.0, 1.0));
        }
        let k = cond.len();
        let scc = DMatrix::from_fn(k, k, |a, b| c[(cond[a], cond[b])]);
        let chol = scc
            .cholesky()
            .ok_or_else(|| Error::Degenerate("conditioning set is collinear".into()))?;
        let sic = DVector::from_fn(k, |a, _| c[(i, cond[a])]);
        let sjc = DVector::from_fn(k, |a, _| c[(j, cond[a])]);
        let wi = chol.solve(&sic);
        let wj = chol.solve(&sjc);
        let vi = c[(i, i)] - sic.dot(&wi);
        let vj = c[(j, j)] - sjc.dot(&wj);
        let cij = c[(i, j)] - sic.dot(&wj);
        if vi <= 1e-10 || vj <= 1e-10 {
            return Err(Error::Degenerate("a tested variable is determined by the conditioning set".into()));
        }
        Ok((cij / (vi * vj).sqrt()).clamp(-1.0, 1.0))
    }

    fn test(&self, i: usize, j: usize, cond: &[usize]) -> Result<(f64, f64)> {
        if self.n <= cond.len() + 3 {
            return Err(Error::InsufficientSamples(format!(
                "{} rows for a conditioning set of size {}",
                self.n,
                cond.len()
            )));
        }
        let rho = self.partial(i, j, cond)?;
        Ok((rho, fisher_z_p_value(rho, self.n, cond.len())))
    }
}

/// Two-sided p-value of the Fisher z-transform of a partial correlation.
pub fn fisher_z_p_value(rho: f64, n: usize, cond_size: usize) -> f64 {
    if rho.abs() >= 1.0 {
        return 0.0;
    }
    let z = rho.atanh() * ((n - cond_size - 3) as f64).sqrt();
    erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

/// Conditional-independence test of players `i` and `j` given `cond`.
pub fn ci_test(lds: &LaggedDataset, i: usize, j: usize, cond: &[usize]) -> Result<CiTestResult> {
    let p = lds.n_players();
    if i == j || cond.contains(&i) || cond.contains(&j) {
        return Err(Error::Config("ci_test needs i != j and both outside the conditioning set".into()));
    }
    if let Some(bad) = [i, j].iter().chain(cond).find(|&&x| x >= p) {
        return Err(Error::OutOfRange { index: *bad, valid: format!("0..{p}") });
    }
    let mut involved = vec![i, j];
    involved.extend_from_slice(cond);
    let cache = CorrelationCache::new(lds, &involved)?;
    let local: Vec<usize> = (2..involved.len()).collect();
    let (rho, p_value) = cache.test(0, 1, &local)?;
    Ok(CiTestResult { partial_correlation: rho, p_value, cond_set: cond.to_vec(), n_effective: cache.n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguousEdge {
    pub from: Player,
    pub to: Player,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscoveryReport {
    pub graph: CausalGraph,
    /// Contemporaneous edges whose direction came from the tie-break.
    pub ambiguous: Vec<AmbiguousEdge>,
    pub tests_run: usize,
    pub degenerate_tests: usize,
    pub config: DiscoveryConfig,
}

#[derive(Serialize)]
struct ReportSidecar<'a> {
    ambiguous: &'a [AmbiguousEdge],
    tests_run: usize,
    degenerate_tests: usize,
    n_edges: usize,
    config: &'a DiscoveryConfig,
}

impl DiscoveryReport {
    pub fn sidecar_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ReportSidecar {
            ambiguous: &self.ambiguous,
            tests_run: self.tests_run,
            degenerate_tests: self.degenerate_tests,
            n_edges: self.graph.n_edges(),
            config: &self.config,
        })?)
    }
}

fn key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

struct Skeleton {
    n_vars: usize,
    /// Candidate neighbours of each lag-0 player.
    adj: Vec<BTreeSet<usize>>,
    sepsets: BTreeMap<(usize, usize), Vec<usize>>,
}

impl Skeleton {
    fn is_lag0(&self, x: usize) -> bool {
        x < self.n_vars
    }

    /// `Some(adjacent)` when the pair was part of the search, `None` for two
    /// lagged players, which are never tested.
    fn adjacent(&self, x: usize, y: usize) -> Option<bool> {
        if self.is_lag0(y) {
            Some(self.adj[y].contains(&x))
        } else if self.is_lag0(x) {
            Some(self.adj[x].contains(&y))
        } else {
            None
        }
    }
}

/// Outcome of testing one pair at one level.
struct PairOutcome {
    pair: (usize, usize),
    sepset: Option<Vec<usize>>,
    tests: usize,
    degenerate: usize,
}

pub fn discover_graph(lds: &LaggedDataset, cfg: &DiscoveryConfig) -> Result<DiscoveryReport> {
    cfg.validate()?;
    let n_vars = lds.n_vars();
    let n_players = lds.n_players();
    let all: Vec<usize> = (0..n_players).collect();
    let cache = CorrelationCache::new(lds, &all)?;

    let mut sk = Skeleton {
        n_vars,
        adj: (0..n_vars).map(|b| all.iter().copied().filter(|&a| a != b).collect()).collect(),
        sepsets: BTreeMap::new(),
    };
    let mut tests_run = 0;
    let mut degenerate_tests = 0;

    for level in 0..=cfg.max_cond_set {
        // Pairs are (other, lag-0 player); contemporaneous pairs appear once.
        let pairs: Vec<(usize, usize)> = (0..n_vars)
            .flat_map(|b| sk.adj[b].iter().copied().filter(move |&a| !(a < n_vars && a > b)).map(move |a| (a, b)))
            .collect();
        let any_testable = pairs.iter().any(|&(a, b)| {
            sk.adj[b].len() > level || (sk.is_lag0(a) && sk.adj[a].len() > level)
        });
        if !any_testable {
            break;
        }
        if cache.n <= level + 3 {
            if level == 0 {
                return Err(Error::InsufficientSamples(format!("{} rows", cache.n)));
            }
            break;
        }
        let frozen = &sk;
        let outcomes: Vec<PairOutcome> = pairs
            .par_iter()
            .map(|&(a, b)| {
                let mut pools: Vec<Vec<usize>> = vec![frozen.adj[b].iter().copied().filter(|&x| x != a).collect()];
                if frozen.is_lag0(a) {
                    pools.push(frozen.adj[a].iter().copied().filter(|&x| x != b).collect());
                }
                let mut out = PairOutcome { pair: (a, b), sepset: None, tests: 0, degenerate: 0 };
                let mut tried = BTreeSet::new();
                'pools: for pool in pools {
                    for cond in pool.into_iter().combinations(level) {
                        if !tried.insert(cond.clone()) {
                            continue;
                        }
                        out.tests += 1;
                        match cache.test(a, b, &cond) {
                            Ok((_, p)) if p > cfg.alpha => {
                                out.sepset = Some(cond);
                                break 'pools;
                            }
                            Ok(_) => {}
                            // A near-deterministic relation cannot separate.
                            Err(Error::Degenerate(_)) => out.degenerate += 1,
                            Err(e) => return Err(e),
                        }
                    }
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        for o in outcomes {
            tests_run += o.tests;
            degenerate_tests += o.degenerate;
            if let Some(s) = o.sepset {
                let (a, b) = o.pair;
                sk.adj[b].remove(&a);
                if sk.is_lag0(a) {
                    sk.adj[a].remove(&b);
                }
                sk.sepsets.insert(key(a, b), s);
            }
        }
    }

    let (lag0_edges, ambiguous_pairs) = orient(&sk);
    let graph = unroll(lds, &lag0_edges)?;
    let ambiguous = ambiguous_pairs
        .into_iter()
        .map(|(a, b)| AmbiguousEdge { from: lds.players()[a].clone(), to: lds.players()[b].clone() })
        .collect();
    Ok(DiscoveryReport { graph, ambiguous, tests_run, degenerate_tests, config: *cfg })
}

/// Directed edges into lag-0 players plus the tie-broken contemporaneous pairs.
fn orient(sk: &Skeleton) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let v = sk.n_vars;
    let mut lagged_parents: Vec<Vec<usize>> = vec![Vec::new(); v];
    let mut undirected: BTreeSet<(usize, usize)> = BTreeSet::new();
    for b in 0..v {
        for &a in &sk.adj[b] {
            if a >= v {
                lagged_parents[b].push(a);
            } else if a < b {
                undirected.insert((a, b));
            }
        }
    }
    let mut directed: BTreeSet<(usize, usize)> = BTreeSet::new();

    let is_undirected = |u: &BTreeSet<(usize, usize)>, x: usize, y: usize| u.contains(&key(x, y));
    let points_into = |d: &BTreeSet<(usize, usize)>, lp: &[Vec<usize>], a: usize, c: usize| -> bool {
        (a >= v && lp[c].contains(&a)) || d.contains(&(a, c))
    };

    // Unshielded colliders a -> c <- b.
    for c in 0..v {
        let nbrs: Vec<usize> = sk.adj[c].iter().copied().collect();
        for (&a, &b) in nbrs.iter().tuple_combinations() {
            if !(is_undirected(&undirected, a, c) || is_undirected(&undirected, b, c)) {
                continue;
            }
            if sk.adjacent(a, b) != Some(false) {
                continue;
            }
            let Some(sep) = sk.sepsets.get(&key(a, b)) else { continue };
            if sep.contains(&c) {
                continue;
            }
            for x in [a, b] {
                if x < v && undirected.remove(&key(x, c)) {
                    directed.insert((x, c));
                }
            }
        }
    }

    // Meek rules 1-3 until nothing changes.
    loop {
        let mut changed = false;
        let pairs: Vec<(usize, usize)> = undirected.iter().copied().collect();
        for (p, q) in pairs {
            for (x, y) in [(p, q), (q, p)] {
                if !undirected.contains(&key(x, y)) {
                    break;
                }
                let r1 = (0..v)
                    .chain(lagged_parents[x].iter().copied())
                    .any(|a| a != y && points_into(&directed, &lagged_parents, a, x) && sk.adjacent(a, y) == Some(false));
                let r2 = (0..v).any(|z| directed.contains(&(x, z)) && directed.contains(&(z, y)));
                let r3 = {
                    let zs: Vec<usize> = (0..v)
                        .filter(|&z| z != y && is_undirected(&undirected, x, z) && directed.contains(&(z, y)))
                        .collect();
                    zs.iter().tuple_combinations().any(|(&z, &w)| sk.adjacent(z, w) == Some(false))
                };
                if r1 || r2 || r3 {
                    undirected.remove(&key(x, y));
                    directed.insert((x, y));
                    changed = true;
                    break;
                }
            }
        }
        if !changed {
            break;
        }
    }

    // Resolve the rest along a topological order of the directed part.
    let mut indeg = vec![0usize; v];
    for &(_, b) in &directed {
        indeg[b] += 1;
    }
    let mut placed = vec![false; v];
    let mut pos = vec![0usize; v];
    let mut heap: BinaryHeap<Reverse<usize>> = (0..v).filter(|&i| indeg[i] == 0).map(Reverse).collect();
    for slot in 0..v {
        let u = loop {
            match heap.pop() {
                Some(Reverse(u)) if !placed[u] => break u,
                Some(_) => continue,
                // Only reachable if collider orientations conflicted into a
                // cycle; break it at the lowest unplaced player.
                None => break (0..v).find(|&i| !placed[i]).expect("slot < v"),
            }
        };
        placed[u] = true;
        pos[u] = slot;
        for &(a, b) in &directed {
            if a == u && !placed[b] {
                indeg[b] = indeg[b].saturating_sub(1);
                if indeg[b] == 0 {
                    heap.push(Reverse(b));
                }
            }
        }
    }
    let mut ambiguous = Vec::new();
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for &(a, b) in &directed {
        if pos[a] < pos[b] {
            edges.push((a, b));
        } else {
            edges.push((b, a));
            ambiguous.push((b, a));
        }
    }
    for &(a, b) in &undirected {
        let e = if pos[a] < pos[b] { (a, b) } else { (b, a) };
        edges.push(e);
        ambiguous.push(e);
    }
    for (b, ps) in lagged_parents.iter().enumerate() {
        edges.extend(ps.iter().map(|&a| (a, b)));
    }
    edges.sort_unstable();
    ambiguous.sort_unstable();
    (edges, ambiguous)
}

/// Shift each lag-0 parent set to every lag that still fits in the window.
fn unroll(lds: &LaggedDataset, lag0_edges: &[(usize, usize)]) -> Result<CausalGraph> {
    let v = lds.n_vars();
    let tau = lds.tau_max();
    let mut g = CausalGraph::new(tau, lds.players().to_vec());
    for &(a, b) in lag0_edges {
        let (var_a, lag_a) = (a % v, a / v);
        for s in 0..=(tau - lag_a) {
            g.insert_edge(lds.player_index(var_a, lag_a + s), lds.player_index(b, s))?;
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{to_lagged, TimeSeriesDataset, VariableRole};
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn dataset(cols: Vec<Vec<f64>>, names: &[&str]) -> TimeSeriesDataset {
        let t = cols[0].len();
        let m = DMatrix::from_fn(t, cols.len(), |i, j| cols[j][i]);
        let mut roles = vec![VariableRole::Covariate; cols.len()];
        *roles.last_mut().unwrap() = VariableRole::Target;
        TimeSeriesDataset::new(names.iter().map(|s| s.to_string()).collect(), roles, m).unwrap()
    }

    fn uniform(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_from_seed(seed);
        (0..n).map(|_| rng.gen::<f64>()).collect()
    }

    #[test]
    fn duplicated_column_is_fully_dependent() {
        let x = uniform(500, 1);
        let lds = to_lagged(&dataset(vec![x.clone(), x], &["A", "B"]), 0).unwrap();
        let r = ci_test(&lds, 0, 1, &[]).unwrap();
        assert!((r.partial_correlation.abs() - 1.0).abs() < 1e-12);
        assert!(r.p_value < 1e-12);
    }

    #[test]
    fn independent_columns_pass_at_one_percent_mostly() {
        // Under the null the p-value is uniform: expect ~99% above 0.01.
        let mut above = 0;
        for seed in 0..100u64 {
            let lds = to_lagged(&dataset(vec![uniform(10_000, 2 * seed), uniform(10_000, 2 * seed + 1)], &["A", "B"]), 0).unwrap();
            if ci_test(&lds, 0, 1, &[]).unwrap().p_value > 0.01 {
                above += 1;
            }
        }
        assert!(above >= 95, "{above} of 100 null tests had p > 0.01");
    }

    #[test]
    fn linear_dependence_detected() {
        let x1 = uniform(10_000, 3);
        let n = uniform(10_000, 4);
        let x2: Vec<f64> = x1.iter().zip(&n).map(|(a, e)| 3.8 * a + e).collect();
        let lds = to_lagged(&dataset(vec![x1, x2], &["X1", "X2"]), 0).unwrap();
        assert!(ci_test(&lds, 0, 1, &[]).unwrap().p_value < 1e-6);
    }

    #[test]
    fn conditioning_on_the_mediator_separates_a_chain() {
        let a = uniform(5000, 5);
        let b: Vec<f64> = a.iter().zip(uniform(5000, 6)).map(|(x, e)| 2.0 * x + e).collect();
        let c: Vec<f64> = b.iter().zip(uniform(5000, 7)).map(|(x, e)| -1.5 * x + e).collect();
        let lds = to_lagged(&dataset(vec![a, b, c], &["A", "B", "C"]), 0).unwrap();
        assert!(ci_test(&lds, 0, 2, &[]).unwrap().p_value < 1e-6);
        assert!(ci_test(&lds, 0, 2, &[1]).unwrap().p_value > 1e-3);
    }

    #[test]
    fn zero_variance_is_degenerate() {
        let lds = to_lagged(&dataset(vec![vec![1.0; 50], uniform(50, 8)], &["A", "B"]), 0).unwrap();
        assert!(matches!(ci_test(&lds, 0, 1, &[]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn too_few_rows_rejected() {
        let lds = to_lagged(&dataset(vec![uniform(4, 1), uniform(4, 2), uniform(4, 3)], &["A", "B", "C"]), 0).unwrap();
        assert!(matches!(ci_test(&lds, 0, 1, &[2]), Err(Error::InsufficientSamples(_))));
    }

    #[test]
    fn collider_is_oriented_and_graph_valid() {
        // A -> C <- B, all contemporaneous.
        let a = uniform(8000, 11);
        let b = uniform(8000, 12);
        let c: Vec<f64> = a.iter().zip(&b).zip(uniform(8000, 13)).map(|((x, y), e)| x + y + 0.5 * e).collect();
        let lds = to_lagged(&dataset(vec![a, b, c], &["A", "B", "C"]), 0).unwrap();
        let rep = discover_graph(&lds, &DiscoveryConfig::default()).unwrap();
        assert!(rep.graph.is_valid());
        assert_eq!(rep.graph.edges().iter().copied().collect::<Vec<_>>(), vec![(0, 2), (1, 2)]);
        assert!(rep.ambiguous.is_empty());
    }

    #[test]
    fn undirected_chain_uses_tie_break() {
        let a = uniform(8000, 21);
        let b: Vec<f64> = a.iter().zip(uniform(8000, 22)).map(|(x, e)| x + e).collect();
        let lds = to_lagged(&dataset(vec![a, b], &["A", "B"]), 0).unwrap();
        let rep = discover_graph(&lds, &DiscoveryConfig::default()).unwrap();
        assert_eq!(rep.graph.edges().iter().copied().collect::<Vec<_>>(), vec![(0, 1)]);
        assert_eq!(rep.ambiguous.len(), 1);
    }

    #[test]
    fn bad_alpha_rejected() {
        let lds = to_lagged(&dataset(vec![uniform(50, 1), uniform(50, 2)], &["A", "B"]), 0).unwrap();
        let cfg = DiscoveryConfig { alpha: 1.5, ..Default::default() };
        assert!(discover_graph(&lds, &cfg).is_err());
    }

    #[test]
    fn fisher_z_known_value() {
        // rho = 0.1, n = 103, no conditioning: z = atanh(0.1) * 10 = 1.00335
        let p = fisher_z_p_value(0.1, 103, 0);
        assert!((p - 0.31572).abs() < 1e-4, "{p}");
    }
}
