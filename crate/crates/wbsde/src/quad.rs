//! Quadrature helpers: Gauss–Hermite rules for Gaussian expectations and
//! trapezoid rules for time integrals.

use crate::error::{Error, Result};

/// Gauss–Hermite rule of size `n`, returned in standard-normal form:
/// `E[f(xi)] ~ sum_i w_i f(x_i)` for `xi ~ N(0,1)`, with `sum_i w_i = 1`.
///
/// Nodes are the roots of the physicists' Hermite polynomial, found by
/// Newton iteration on the orthonormal recurrence; exact for polynomial
/// integrands of degree `2n - 1`.
pub fn gauss_hermite(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::InvalidInput("gauss_hermite: n = 0".into()));
    }
    const EPS: f64 = 3e-14;
    const PIM4: f64 = 0.751_125_544_464_942_5; // pi^(-1/4)
    const MAX_IT: usize = 40;

    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..m {
        // Stride-dependent initial guesses for roots in decreasing order.
        z = match i {
            0 => {
                let an = 2.0 * n as f64 + 1.0;
                an.sqrt() - 1.85575 * an.powf(-1.0 / 6.0)
            }
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        let mut converged = false;
        for _ in 0..MAX_IT {
            // Orthonormal Hermite recurrence up to degree n at z.
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / j as f64).sqrt() * p2 - (((j - 1) as f64) / j as f64).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() <= EPS {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NonConvergence { iterations: MAX_IT, gap: f64::NAN });
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    // Rescale from weight exp(-x^2) to the standard normal: node sqrt(2) x,
    // weight w / sqrt(pi).
    let spi = std::f64::consts::PI.sqrt();
    for i in 0..n {
        x[i] *= std::f64::consts::SQRT_2;
        w[i] /= spi;
    }
    // Ascending order is what grid consumers expect.
    x.reverse();
    w.reverse();
    Ok((x, w))
}

/// Expectation of `f` under `N(mean, std^2)` by a Gauss–Hermite rule.
pub fn gh_expect(nodes: &[f64], weights: &[f64], mean: f64, std: f64, f: impl Fn(f64) -> f64) -> f64 {
    nodes
        .iter()
        .zip(weights)
        .map(|(&x, &w)| w * f(mean + std * x))
        .sum()
}

/// Trapezoid rule on an arbitrary increasing grid.
pub fn trapezoid(ts: &[f64], ys: &[f64]) -> f64 {
    debug_assert_eq!(ts.len(), ys.len());
    let mut acc = 0.0;
    for k in 1..ts.len() {
        acc += 0.5 * (ys[k] + ys[k - 1]) * (ts[k] - ts[k - 1]);
    }
    acc
}

/// Trapezoid weights on `ts` restricted to `ts[k0..]`: the vector `c` with
/// `int_{ts[k0]}^{ts.last()} y dt ~ sum_k c[k] y[k0 + k]`.
pub fn trapezoid_weights(ts: &[f64], k0: usize) -> Vec<f64> {
    let tail = &ts[k0..];
    let n = tail.len();
    let mut c = vec![0.0; n];
    for k in 1..n {
        let h = tail[k] - tail[k - 1];
        c[k - 1] += 0.5 * h;
        c[k] += 0.5 * h;
    }
    c
}
