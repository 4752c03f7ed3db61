//! Robustness to a wrong graph: add k random edges to the true graph of the
//! non-temporal model before fitting, and measure detection accuracy.
//!
//!     cargo run --release --example edge_intervention

use cdrca::harness::{run_graph_intervention, InterventionStudySpec};
use cdrca::synthgen::{true_graph, ModelKind};
use cdrca::EdgeInterventionSpec;

fn main() -> cdrca::Result<()> {
    let g = true_graph(ModelKind::Sim2Train, 0)?;
    let perturbed = g.add_random_edges(&EdgeInterventionSpec { k: 2, seed: 3 })?;
    let added: Vec<String> = perturbed
        .edges()
        .difference(g.edges())
        .map(|&(a, b)| format!("{} -> {}", g.players()[a], g.players()[b]))
        .collect();
    println!("example perturbation adds {added:?}; still valid: {}", perturbed.is_valid());

    let table = run_graph_intervention(&InterventionStudySpec::desk(42))?;
    print!("{}", table.to_csv());
    Ok(())
}
