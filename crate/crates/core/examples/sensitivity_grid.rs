//! Detection accuracy over shock size and coupling strength for one test
//! family (default f1a; any of f1a..f2c).
//!
//!     cargo run --release --example sensitivity_grid f1c

use cdrca::harness::{run_sensitivity_grid, GridSpec, Scale};
use cdrca::synthgen::ModelKind;

fn main() -> cdrca::Result<()> {
    let family: ModelKind = std::env::args().nth(1).unwrap_or_else(|| "f1a".into()).parse()?;
    let table = run_sensitivity_grid(&GridSpec::for_scale(family, Scale::Desk, 42))?;
    print!("{}", table.to_csv());
    Ok(())
}
