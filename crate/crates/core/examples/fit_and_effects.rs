//! Fit a linear additive-noise model on the true graph, recover the noise of
//! one sample and estimate total effects two ways.
//!
//!     cargo run --release --example fit_and_effects

use cdrca::dataset::target_row;
use cdrca::harness::{ate_table_csv, run_ate_table};
use cdrca::synthgen::{generate, true_graph, ModelKind, ScenarioSpec};
use cdrca::{extract_noises, fit_scm, to_lagged};

fn main() -> cdrca::Result<()> {
    let ds = generate(&ScenarioSpec::new(ModelKind::F1, 5000, 3))?;
    let lds = to_lagged(&ds, 2)?;
    let scm = fit_scm(&lds, &true_graph(ModelKind::F1, 2)?)?;
    for m in scm.mechanisms().iter().filter(|m| m.player.lag == 0) {
        let parents: Vec<String> = m.parents.iter().map(|&p| scm.graph().players()[p].to_string()).collect();
        println!("{} = {:.3} + {:.3?} . {:?} + noise", m.player, m.intercept, m.coefficients, parents);
    }

    let sample = target_row(&lds, 1000)?;
    let noise = extract_noises(&scm, &sample)?;
    let rebuilt = scm.evaluate(&noise);
    let worst = rebuilt.iter().zip(&sample.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("noise of row 1000 rebuilds the sample to within {worst:.2e}");

    println!("\ntotal effects on X4 in the true model:");
    print!("{}", ate_table_csv(&run_ate_table(ModelKind::F1, 2, 20_000, 5)?));
    Ok(())
}
