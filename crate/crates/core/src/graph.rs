//! Directed acyclic graphs over lagged players.
//!
//! Edges must respect time: an edge may leave a player at lag `l1` only
//! towards a player at lag `l2 <= l1`. Contemporaneous edges (equal lags)
//! are allowed as long as the graph stays acyclic.

use std::collections::{BTreeSet, BinaryHeap};
use std::cmp::Reverse;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::Player;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CausalGraph {
    tau_max: usize,
    players: Vec<Player>,
    edges: BTreeSet<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    SelfLoop(Player),
    /// Edge pointing from a more recent player to an older one.
    TimeOrder { from: Player, to: Player },
    /// Players that lie on at least one directed cycle.
    Cycle(Vec<Player>),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::SelfLoop(p) => write!(f, "self-loop on {p}"),
            Violation::TimeOrder { from, to } => write!(f, "edge {from} -> {to} points into the past"),
            Violation::Cycle(ps) => {
                let names: Vec<String> = ps.iter().map(ToString::to_string).collect();
                write!(f, "cycle through {}", names.join(", "))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeInterventionSpec {
    pub k: usize,
    pub seed: u64,
}

impl CausalGraph {
    pub fn new(tau_max: usize, players: Vec<Player>) -> Self {
        CausalGraph { tau_max, players, edges: BTreeSet::new() }
    }

    pub fn with_edges(tau_max: usize, players: Vec<Player>, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut g = CausalGraph::new(tau_max, players);
        for (a, b) in edges {
            g.insert_edge(a, b)?;
        }
        Ok(g)
    }

    pub fn tau_max(&self) -> usize {
        self.tau_max
    }

    pub fn players(&self) -> &[Player] {
        &self.players
    }

    pub fn n_players(&self) -> usize {
        self.players.len()
    }

    pub fn edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.edges.contains(&(from, to))
    }

    pub fn find(&self, name: &str, lag: usize) -> Option<usize> {
        self.players.iter().position(|p| p.name == name && p.lag == lag)
    }

    /// Adds an edge between known players. Validity is not checked here;
    /// see [`Self::validate`].
    pub fn insert_edge(&mut self, from: usize, to: usize) -> Result<bool> {
        let n = self.players.len();
        if from >= n || to >= n {
            return Err(Error::Graph(format!("edge ({from}, {to}) references a player outside 0..{n}")));
        }
        Ok(self.edges.insert((from, to)))
    }

    pub fn remove_edge(&mut self, from: usize, to: usize) -> bool {
        self.edges.remove(&(from, to))
    }

    /// Parents in ascending player order.
    pub fn parents(&self, node: usize) -> Vec<usize> {
        self.edges.iter().filter(|(_, b)| *b == node).map(|(a, _)| *a).collect()
    }

    pub fn children(&self, node: usize) -> Vec<usize> {
        self.edges.range((node, 0)..(node + 1, 0)).map(|(_, b)| *b).collect()
    }

    /// `true` if a directed path leads from `from` to `to` (including `from == to`).
    pub fn reaches(&self, from: usize, to: usize) -> bool {
        let mut seen = vec![false; self.n_players()];
        let mut stack = vec![from];
        while let Some(u) = stack.pop() {
            if u == to {
                return true;
            }
            if std::mem::replace(&mut seen[u], true) {
                continue;
            }
            stack.extend(self.children(u));
        }
        false
    }

    /// Ancestors of `node`, including `node`, in ascending order.
    pub fn ancestors(&self, node: usize) -> Vec<usize> {
        let mut seen = vec![false; self.n_players()];
        let mut stack = vec![node];
        while let Some(u) = stack.pop() {
            if std::mem::replace(&mut seen[u], true) {
                continue;
            }
            stack.extend(self.parents(u));
        }
        (0..self.n_players()).filter(|&i| seen[i]).collect()
    }

    pub fn is_time_respecting(&self, from: usize, to: usize) -> bool {
        self.players[from].lag >= self.players[to].lag
    }

    /// Every self-loop, time-order and cycle violation. Empty means valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for &(a, b) in &self.edges {
            if a == b {
                out.push(Violation::SelfLoop(self.players[a].clone()));
            } else if !self.is_time_respecting(a, b) {
                out.push(Violation::TimeOrder { from: self.players[a].clone(), to: self.players[b].clone() });
            }
        }
        let (_, leftover) = self.kahn();
        if !leftover.is_empty() {
            // Only nodes that can reach themselves are on a cycle; the rest
            // merely sit downstream of one.
            let on_cycle: Vec<Player> = leftover
                .into_iter()
                .filter(|&u| self.children(u).into_iter().any(|c| self.reaches(c, u)))
                .map(|u| self.players[u].clone())
                .collect();
            if !on_cycle.is_empty() {
                out.push(Violation::Cycle(on_cycle));
            }
        }
        out
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_empty()
    }

    fn kahn(&self) -> (Vec<usize>, Vec<usize>) {
        let n = self.n_players();
        let mut indeg = vec![0usize; n];
        for &(_, b) in &self.edges {
            indeg[b] += 1;
        }
        let mut heap: BinaryHeap<Reverse<usize>> = (0..n).filter(|&i| indeg[i] == 0).map(Reverse).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(Reverse(u)) = heap.pop() {
            order.push(u);
            for c in self.children(u) {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    heap.push(Reverse(c));
                }
            }
        }
        let leftover = (0..n).filter(|&i| indeg[i] > 0).collect();
        (order, leftover)
    }

    /// Topological order; ties go to the lower player index.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let (order, leftover) = self.kahn();
        if leftover.is_empty() {
            Ok(order)
        } else {
            Err(Error::Cyclic(leftover.into_iter().map(|i| self.players[i].to_string()).collect()))
        }
    }

    /// Absent, time-respecting edges whose insertion keeps the graph acyclic.
    pub fn admissible_additions(&self) -> Vec<(usize, usize)> {
        let n = self.n_players();
        let mut out = Vec::new();
        for a in 0..n {
            for b in 0..n {
                if a != b && !self.has_edge(a, b) && self.is_time_respecting(a, b) && !self.reaches(b, a) {
                    out.push((a, b));
                }
            }
        }
        out
    }

    /// Adds `spec.k` edges one at a time, each drawn uniformly among the
    /// admissible additions of the current graph.
    pub fn add_random_edges(&self, spec: &EdgeInterventionSpec) -> Result<CausalGraph> {
        if spec.k == 0 {
            return Err(Error::Config("edge intervention needs k >= 1".into()));
        }
        let mut rng = rng_from_seed(spec.seed);
        let mut g = self.clone();
        for added in 0..spec.k {
            let options = g.admissible_additions();
            let &(a, b) = options.choose(&mut rng).ok_or(Error::NotEnoughEdges {
                available: added,
                requested: spec.k,
            })?;
            g.edges.insert((a, b));
        }
        Ok(g)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&GraphFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: GraphFile = serde_json::from_str(text)?;
        file.try_into()
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
pub(crate) struct GraphFile {
    tau_max: usize,
    players: Vec<Player>,
    edges: Vec<EdgeRecord>,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct EdgeRecord {
    from: (String, usize),
    to: (String, usize),
}

impl From<&CausalGraph> for GraphFile {
    fn from(g: &CausalGraph) -> Self {
        let key = |i: usize| (g.players[i].name.clone(), g.players[i].lag);
        GraphFile {
            tau_max: g.tau_max,
            players: g.players.clone(),
            edges: g.edges.iter().map(|&(a, b)| EdgeRecord { from: key(a), to: key(b) }).collect(),
        }
    }
}

impl TryFrom<GraphFile> for CausalGraph {
    type Error = Error;

    fn try_from(f: GraphFile) -> Result<Self> {
        let mut g = CausalGraph::new(f.tau_max, f.players);
        for e in f.edges {
            let a = g.find(&e.from.0, e.from.1).ok_or_else(|| Error::Graph(format!("unknown player {}@{}", e.from.0, e.from.1)))?;
            let b = g.find(&e.to.0, e.to.1).ok_or_else(|| Error::Graph(format!("unknown player {}@{}", e.to.0, e.to.1)))?;
            g.insert_edge(a, b)?;
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::lagged_players;
    use proptest::prelude::*;

    fn four(tau: usize) -> Vec<Player> {
        let names: Vec<String> = ["X1", "X2", "X3", "X4"].iter().map(|s| s.to_string()).collect();
        lagged_players(&names, tau)
    }

    /// Lagged graph of the illustrative model at tau_max = 1.
    fn illustrative() -> CausalGraph {
        // players: X1@0..X4@0 = 0..3, X1@1..X4@1 = 4..7
        CausalGraph::with_edges(1, four(1), [(4, 0), (4, 1), (6, 1), (6, 2), (5, 3)]).unwrap()
    }

    #[test]
    fn empty_graph_is_valid() {
        assert!(CausalGraph::new(1, four(1)).validate().is_empty());
    }

    #[test]
    fn two_cycle_reported() {
        let g = CausalGraph::with_edges(0, four(0), [(0, 1), (1, 0)]).unwrap();
        let v = g.validate();
        assert_eq!(v.len(), 1);
        assert!(matches!(&v[0], Violation::Cycle(ps) if ps.len() == 2));
        assert!(g.topological_order().is_err());
    }

    #[test]
    fn future_to_past_reported() {
        let g = CausalGraph::with_edges(1, four(1), [(0, 4)]).unwrap();
        assert!(matches!(g.validate().as_slice(), [Violation::TimeOrder { .. }]));
    }

    #[test]
    fn chain_order() {
        let g = CausalGraph::with_edges(0, four(0), [(0, 1), (1, 3)]).unwrap();
        let order = g.topological_order().unwrap();
        let pos = |x| order.iter().position(|&o| o == x).unwrap();
        assert!(pos(0) < pos(1) && pos(1) < pos(3));
        assert_eq!(&order[..2], &[0, 1]);
    }

    #[test]
    fn no_edges_keeps_player_order() {
        let g = CausalGraph::new(1, four(1));
        assert_eq!(g.topological_order().unwrap(), (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn illustrative_order_respects_every_edge() {
        let g = illustrative();
        let order = g.topological_order().unwrap();
        let mut pos = vec![0; 8];
        for (i, &u) in order.iter().enumerate() {
            pos[u] = i;
        }
        for &(a, b) in g.edges() {
            assert!(pos[a] < pos[b], "{a} -> {b}");
        }
    }

    #[test]
    fn adding_edges_keeps_validity_and_is_reproducible() {
        let g = illustrative();
        let spec = EdgeInterventionSpec { k: 2, seed: 11 };
        let a = g.add_random_edges(&spec).unwrap();
        assert_eq!(a.n_edges(), g.n_edges() + 2);
        assert!(a.validate().is_empty());
        assert_eq!(a, g.add_random_edges(&spec).unwrap());
    }

    #[test]
    fn saturated_graph_cannot_grow() {
        // Complete DAG over two lag-0 players plus the only time-respecting
        // cross edges: nothing admissible remains.
        let names = vec!["A".to_string(), "B".to_string()];
        let g = CausalGraph::with_edges(0, lagged_players(&names, 0), [(0, 1)]).unwrap();
        assert!(g.admissible_additions().is_empty());
        assert!(matches!(
            g.add_random_edges(&EdgeInterventionSpec { k: 1, seed: 0 }),
            Err(Error::NotEnoughEdges { available: 0, requested: 1 })
        ));
    }

    #[test]
    fn k_zero_rejected() {
        assert!(illustrative().add_random_edges(&EdgeInterventionSpec { k: 0, seed: 0 }).is_err());
    }

    #[test]
    fn json_round_trip() {
        let g = illustrative();
        assert_eq!(CausalGraph::from_json(&g.to_json().unwrap()).unwrap(), g);
    }

    proptest! {
        #[test]
        fn random_additions_always_valid(k in 1usize..8, seed in 0u64..500) {
            let g = illustrative();
            let out = g.add_random_edges(&EdgeInterventionSpec { k, seed }).unwrap();
            prop_assert!(out.validate().is_empty());
            let order = out.topological_order().unwrap();
            let mut sorted = order.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..8).collect::<Vec<_>>());
        }
    }
}
