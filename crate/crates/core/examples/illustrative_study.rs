//! True-positive rate of the attribution versus the z-score baseline over
//! repeated illustrative trials. Pass `paper` for the full-size run.
//!
//!     cargo run --release --example illustrative_study [paper]

use cdrca::harness::{run_illustrative, IllustrativeSpec, Scale};

fn main() -> cdrca::Result<()> {
    let scale = if std::env::args().any(|a| a == "paper") { Scale::Paper } else { Scale::Desk };
    let spec = IllustrativeSpec::for_scale(scale, 42);
    let report = run_illustrative(&spec)?;
    print!("{}", report.trials_csv());
    println!("TPR: attribution {:.2}, z-score {:.2}", report.cdrca_tpr, report.zscore_tpr);
    Ok(())
}
