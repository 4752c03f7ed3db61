//! Simulate the illustrative system, train the stub predictor on the first
//! half and inspect its prediction errors around an injected shock.
//!
//!     cargo run --example generate_and_predict

use cdrca::synthgen::{generate, prediction_errors, train_stub_predictor_with, ModelKind, PredictorConfig, ScenarioSpec};

fn main() -> cdrca::Result<()> {
    let clean = generate(&ScenarioSpec::new(ModelKind::Illustrative, 4000, 7))?;
    let predictor = train_stub_predictor_with(&clean, &PredictorConfig { horizon: 3, lags: 1 })?;
    println!("predictor for {} from {:?}", predictor.target, predictor.features);
    println!("coefficients {:.3?}, residual variance {:.3}", predictor.coefficients, predictor.residual_variance);

    let shocked = generate(&ScenarioSpec::new(ModelKind::Illustrative, 600, 8).with_injection("X1", 500, 20.0))?;
    let out = prediction_errors(&predictor, &shocked)?;
    let r = out.dataset.column(out.dataset.error_index()?);
    let labels = out.dataset.time_labels().expect("errors keep time labels");
    println!("first {} rows dropped for warm-up", out.dropped);
    for (label, e) in labels.iter().zip(&r).skip(495 - out.dropped).take(10) {
        println!("t={label:>4}  r={e:>9.3}");
    }
    Ok(())
}
