//! Least-squares regression on small feature sets (normal equations with a
//! ridge fallback), shared by the particle solver, the Picard feature fits
//! and the tangent-process conditional means.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Ridge added to the Gram diagonal when the plain normal equations are
/// singular (collinear features, degenerate clouds).
pub const RIDGE_FALLBACK: f64 = 1e-8;

/// Solve `min_beta sum_r (y_r - x_r . beta)^2` for row-major `xs` with
/// `n_cols` features per row. Falls back to a ridge-regularized solve when
/// the Gram matrix is singular.
pub fn least_squares(xs: &[f64], ys: &[f64], n_cols: usize) -> Result<Vec<f64>> {
    least_squares_with_info(xs, ys, n_cols).map(|(beta, _)| beta)
}

/// As [`least_squares`], also reporting whether the ridge fallback fired
/// (rank-deficient normal equations).
pub fn least_squares_with_info(xs: &[f64], ys: &[f64], n_cols: usize) -> Result<(Vec<f64>, bool)> {
    if n_cols == 0 || xs.len() != ys.len() * n_cols || ys.is_empty() {
        return Err(Error::InvalidInput(format!(
            "least_squares: {} feature values, {} targets, {} columns",
            xs.len(),
            ys.len(),
            n_cols
        )));
    }
    if xs.iter().any(|v| !v.is_finite()) || ys.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("least_squares: non-finite entry".into()));
    }
    let n_rows = ys.len();
    let mut gram = DMatrix::<f64>::zeros(n_cols, n_cols);
    let mut rhs = DVector::<f64>::zeros(n_cols);
    for r in 0..n_rows {
        let row = &xs[r * n_cols..(r + 1) * n_cols];
        for i in 0..n_cols {
            rhs[i] += row[i] * ys[r];
            for j in i..n_cols {
                gram[(i, j)] += row[i] * row[j];
            }
        }
    }
    for i in 0..n_cols {
        for j in 0..i {
            gram[(i, j)] = gram[(j, i)];
        }
    }
    if let Some(beta) = gram.clone().lu().solve(&rhs) {
        if beta.iter().all(|v| v.is_finite()) {
            return Ok((beta.iter().copied().collect(), false));
        }
    }
    // Singular Gram: shrink toward zero just enough to invert.
    let scale = gram.diagonal().iter().fold(0.0f64, |a, &d| a.max(d)).max(1.0);
    let mut ridged = gram;
    for i in 0..n_cols {
        ridged[(i, i)] += RIDGE_FALLBACK * scale;
    }
    let beta = ridged
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::InvalidInput("least_squares: ridge solve failed".into()))?;
    Ok((beta.iter().copied().collect(), true))
}

/// Dot product of a fitted coefficient vector with a feature row.
pub fn predict(coef: &[f64], features: &[f64]) -> f64 {
    coef.iter().zip(features).map(|(c, x)| c * x).sum()
}
