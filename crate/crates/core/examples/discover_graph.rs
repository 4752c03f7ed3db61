//! Learn the lagged causal graph of the illustrative system and compare it
//! with the true one.
//!
//!     cargo run --release --example discover_graph

use cdrca::synthgen::{generate, true_graph, ModelKind, ScenarioSpec};
use cdrca::{discover_graph, to_lagged, DiscoveryConfig};

fn main() -> cdrca::Result<()> {
    let ds = generate(&ScenarioSpec::new(ModelKind::Illustrative, 10_000, 1))?;
    let lds = to_lagged(&ds, 1)?;
    let report = discover_graph(&lds, &DiscoveryConfig::default())?;
    let truth = true_graph(ModelKind::Illustrative, 1)?;

    let players = report.graph.players();
    let found = report.graph.edges();
    let hits = found.iter().filter(|e| truth.edges().contains(e)).count();
    println!("{} tests, {} degenerate, {} ambiguous orientations", report.tests_run, report.degenerate_tests, report.ambiguous.len());
    for &(a, b) in found {
        let mark = if truth.edges().contains(&(a, b)) { "" } else { "   (spurious)" };
        println!("{} -> {}{mark}", players[a], players[b]);
    }
    println!("precision {:.2}, recall {:.2}", hits as f64 / found.len().max(1) as f64, hits as f64 / truth.n_edges() as f64);
    Ok(())
}
