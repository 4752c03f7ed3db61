use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub(crate) struct LeastSquares {
    pub coefficients: DVector<f64>,
    pub residuals: DVector<f64>,
}

/// Least squares via Householder QR. Columns whose pivot falls below a
/// relative threshold make the system rank-deficient.
pub(crate) fn least_squares(design: &DMatrix<f64>, y: &DVector<f64>, what: &str) -> Result<LeastSquares> {
    let (n, k) = design.shape();
    if n < k {
        return Err(Error::InsufficientSamples(format!("{what}: {n} rows for {k} unknowns")));
    }
    if k == 0 {
        return Ok(LeastSquares { coefficients: DVector::zeros(0), residuals: y.clone() });
    }
    let qr = design.clone().qr();
    let r = qr.r();
    let scale = (0..k).map(|i| r[(i, i)].abs()).fold(0.0_f64, f64::max).max(1.0);
    if (0..k).any(|i| r[(i, i)].abs() <= 1e-10 * scale) {
        return Err(Error::RankDeficient(what.to_string()));
    }
    let qty = qr.q().transpose() * y;
    let coefficients = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::RankDeficient(what.to_string()))?;
    let residuals = y - design * &coefficients;
    Ok(LeastSquares { coefficients, residuals })
}

pub(crate) fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Sample standard deviation (n - 1 denominator).
pub(crate) fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs.iter().copied());
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}
