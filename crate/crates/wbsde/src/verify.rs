//! The defining backward identity as an executable check.
//!
//! A solution pair `(Y, Z)` is accepted when, along every admissible flow
//! `(mu_t)` driven by `dX = B(t, X) dt + dW`,
//!
//! ```text
//! Y(t, mu_t) = psi(mu_T) + E[ int_t^T f(r, X_r, mu_r, Y_r, Z(r, X_r, mu_r)) dr ]
//!                        - E[ int_t^T Z(r, X_r, mu_r) B(r, X_r) dr ]
//! ```
//!
//! [`wbsde_residual`] evaluates the two sides on a simulated flow by
//! trapezoid time-quadrature and reports per-time residuals with Monte
//! Carlo standard errors. [`comparison_check`] tests the ordering property
//! (ordered generators and terminals give ordered values) and
//! [`uniqueness_check`] the two-solution equality in its integrated form.
//! Neither produces a solution; all three only judge candidates.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::MeasureFlow;
use crate::functional::{GeneratorSpec, TerminalFunctional};
use crate::measure::DiscreteMeasure;
use crate::quad::trapezoid_weights;
use crate::solution::WbsdeSolution;

/// Spatial resolution of the per-knot kernel lattice; `Z(t, ., mu_t)` is
/// evaluated on this many points spanning the cloud and interpolated to the
/// particles.
const Z_LATTICE: usize = 129;
/// Grid-matching slack for time snapping and window comparisons.
const TIME_EPS: f64 = 1e-9;

/// Default verification tolerance: Monte Carlo noise plus first-order
/// time-discretization bias, kept as two separate named contributions.
pub fn default_tolerance(stderr: f64, dt: f64) -> f64 {
    3.0 * stderr + 0.5 * dt
}

// ---------------------------------------------------------------------------
// Residual report
// ---------------------------------------------------------------------------

/// One check time of a residual evaluation.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ResidualRow {
    pub t: f64,
    /// `|Y(t, mu_t) - [psi(mu_T) + E int f - E int Z B]|`.
    pub residual: f64,
    /// Path-level standard error of the right-hand side estimate.
    pub stderr: f64,
}

/// Integrability diagnostics for the `E[int |f| + |Z| dr] < infinity`
/// condition: desk-scale estimates plus a heavy-tail flag raised when the
/// per-path `|Z|` integral is dominated by late sample blocks.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct IntegrabilityDiag {
    pub mean_abs_f: f64,
    pub mean_abs_z: f64,
    pub diverging: bool,
}

/// Residual verdict for one (solution, generator, terminal, flow) tuple.
#[derive(Clone, Debug, Serialize)]
pub struct ResidualReport {
    pub label: String,
    pub tol: f64,
    pub rows: Vec<ResidualRow>,
    pub integrability: IntegrabilityDiag,
    /// True exactly when every row's residual is within `tol`.
    pub pass: bool,
}

impl ResidualReport {
    pub fn max_residual(&self) -> f64 {
        self.rows.iter().map(|r| r.residual).fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// CSV residual table: `time,residual,stderr,pass` per check time.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,residual,stderr,pass\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:.6},{:.9},{:.9},{}\n",
                r.t,
                r.residual,
                r.stderr,
                r.residual <= self.tol
            ));
        }
        out
    }
}

/// Per-knot pieces of the right-hand side along one flow.
struct KnotData {
    /// `Y(t_k, mu_k)`.
    y: f64,
    /// Per-path integrand `f - Z B` at this knot.
    g: Vec<f64>,
    /// Knot means of `|f|` and `|Z|` for the integrability estimate.
    abs_f: f64,
    abs_z: f64,
    /// Per-path `|Z|` at this knot (heavy-tail diagnostic).
    abs_z_path: Vec<f64>,
}

/// Evaluate `Z(t_k, ., m)` on a lattice spanning `xs` and interpolate to
/// each entry of `xs`; exact at lattice nodes, clamped at the hull.
fn z_on_paths(
    sol: &WbsdeSolution,
    t: f64,
    xs: &[f64],
    m: &DiscreteMeasure,
) -> Result<Vec<f64>> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &x in xs {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    if !(hi > lo) {
        hi = lo + 1e-6;
    }
    let step = (hi - lo) / (Z_LATTICE - 1) as f64;
    let lattice: Vec<f64> = (0..Z_LATTICE).map(|i| lo + step * i as f64).collect();
    let vals = sol.z_batch(t, &lattice, m)?;
    Ok(xs
        .iter()
        .map(|&x| {
            let s = ((x - lo) / step).clamp(0.0, (Z_LATTICE - 1) as f64);
            let i = (s.floor() as usize).min(Z_LATTICE - 2);
            let w = s - i as f64;
            vals[i] * (1.0 - w) + vals[i + 1] * w
        })
        .collect())
}

/// Snap check times onto the flow grid, restricted to `t >= t_min`.
fn snap_check_times(flow: &MeasureFlow, check_times: &[f64], t_min: f64) -> Result<Vec<usize>> {
    if check_times.is_empty() {
        return Err(Error::InvalidInput("need at least one check time".into()));
    }
    let mut idx = Vec::with_capacity(check_times.len());
    for &t in check_times {
        if t < t_min - TIME_EPS {
            return Err(Error::Domain(format!(
                "check time {t} precedes the admissible window start {t_min}"
            )));
        }
        idx.push(flow.time_index(t)?);
    }
    idx.sort_unstable();
    idx.dedup();
    Ok(idx)
}

/// Shared window validation: the flow must live inside the solution's time
/// window, and start no earlier than the solution (a `t0`-solution promises
/// nothing on flows born before `t0`).
fn check_window(sol: &WbsdeSolution, flow: &MeasureFlow) -> Result<()> {
    if flow.t0() < sol.t0() - TIME_EPS {
        return Err(Error::Domain(format!(
            "flow starts at {} but the solution is only defined on flows from {}",
            flow.t0(),
            sol.t0()
        )));
    }
    let t_last = *flow.times().last().expect("non-empty grid");
    if (t_last - sol.horizon()).abs() > TIME_EPS {
        return Err(Error::Domain(format!(
            "flow ends at {} but the backward identity closes at the horizon {}",
            t_last,
            sol.horizon()
        )));
    }
    Ok(())
}

/// Assemble per-knot data for `sol` along `flow` from knot `k_min` on.
fn knot_data(
    sol: &WbsdeSolution,
    f: &GeneratorSpec,
    flow: &MeasureFlow,
    k_min: usize,
) -> Result<Vec<Option<KnotData>>> {
    let times = flow.times();
    let n = flow.n_paths();
    (0..times.len())
        .into_par_iter()
        .map(|k| -> Result<Option<KnotData>> {
            if k < k_min {
                return Ok(None);
            }
            let t = times[k];
            let m = flow.marginal(k);
            let xs = flow.column(k);
            let y = sol.y(t, &m)?;
            let zs = z_on_paths(sol, t, &xs, &m)?;
            let mut g = Vec::with_capacity(n);
            let mut abs_f = 0.0;
            let mut abs_z = 0.0;
            let mut abs_z_path = Vec::with_capacity(n);
            for i in 0..n {
                let b = flow.drift().eval(t, xs[i]);
                let fv = f.eval(t, xs[i], &m, y, zs[i])?;
                g.push(fv - zs[i] * b);
                abs_f += fv.abs();
                abs_z += zs[i].abs();
                abs_z_path.push(zs[i].abs());
            }
            abs_f /= n as f64;
            abs_z /= n as f64;
            Ok(Some(KnotData { y, g, abs_f, abs_z, abs_z_path }))
        })
        .collect()
}

/// Evaluate the backward-identity residual of `(sol, f, psi)` along `flow`
/// at the given check times (which must lie on the flow grid).
///
/// For each check time the report row holds
/// `|Y(t, mu_t) - [psi(mu_T) + E int_t^T (f - Z B) dr]|` with the time
/// integral by trapezoid quadrature on the flow grid and the expectation by
/// the path average; the standard error is the path-level standard
/// deviation of the estimate, including the terminal functional's
/// linearized fluctuation when its flat derivative is analytic.
pub fn wbsde_residual(
    sol: &WbsdeSolution,
    f: &GeneratorSpec,
    psi: &TerminalFunctional,
    flow: &MeasureFlow,
    check_times: &[f64],
    tol: f64,
) -> Result<ResidualReport> {
    if !(tol > 0.0) || !tol.is_finite() {
        return Err(Error::InvalidInput(format!("tolerance must be positive, got {tol}")));
    }
    check_window(sol, flow)?;
    let idx = snap_check_times(flow, check_times, sol.t0())?;
    let times = flow.times();
    let nt = times.len();
    let n = flow.n_paths();
    let k_min = idx[0];

    let knots = knot_data(sol, f, flow, k_min)?;
    let terminal = flow.marginal(nt - 1);
    let psi_term = psi.eval(&terminal);
    // Delta-method terminal term: the psi(mu_T) fluctuation correlates with
    // the path integrals, so fold its linearization into the per-path sums.
    let prepared = if psi.has_analytic_derivatives() { Some(psi.prepare(&terminal)?) } else { None };
    let term_flat: Vec<f64> = match &prepared {
        Some(p) => (0..n).map(|i| p.flat(flow.state(i, nt - 1))).collect(),
        None => vec![0.0; n],
    };

    let mut rows = Vec::with_capacity(idx.len());
    for &k in &idx {
        let y = knots[k].as_ref().expect("computed from k_min").y;
        let (mean, sd) = if k == nt - 1 {
            // Empty integral: residual reduces to |Y(T, mu_T) - psi(mu_T)|.
            (0.0, sd_mean(&term_flat))
        } else {
            let w = trapezoid_weights(times, k);
            let mut s = vec![0.0; n];
            for (j, wj) in w.iter().enumerate() {
                let g = &knots[k + j].as_ref().expect("suffix knot").g;
                for i in 0..n {
                    s[i] += wj * g[i];
                }
            }
            for i in 0..n {
                s[i] += term_flat[i];
            }
            let mean_with_term: f64 = s.iter().sum::<f64>() / n as f64;
            let term_mean: f64 = term_flat.iter().sum::<f64>() / n as f64;
            (mean_with_term - term_mean, sd_mean(&s))
        };
        rows.push(ResidualRow { t: times[k], residual: (y - (psi_term + mean)).abs(), stderr: sd });
    }

    let integrability = integrability_diag(&knots, times, k_min, n);
    let pass = rows.iter().all(|r| r.residual <= tol);
    Ok(ResidualReport {
        label: format!("{}|{}|{}", f.name, psi.name, flow.drift().name()),
        tol,
        rows,
        integrability,
        pass,
    })
}

/// Standard error of the mean of `v`.
fn sd_mean(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (var / n).sqrt()
}

fn integrability_diag(
    knots: &[Option<KnotData>],
    times: &[f64],
    k_min: usize,
    n: usize,
) -> IntegrabilityDiag {
    let w = trapezoid_weights(times, k_min);
    let mut mean_abs_f = 0.0;
    let mut mean_abs_z = 0.0;
    let mut zeta = vec![0.0; n];
    for (j, wj) in w.iter().enumerate() {
        let kd = knots[k_min + j].as_ref().expect("suffix knot");
        mean_abs_f += wj * kd.abs_f;
        mean_abs_z += wj * kd.abs_z;
        for i in 0..n {
            zeta[i] += wj * kd.abs_z_path[i];
        }
    }
    // Heavy-tail flag: with an integrable kernel the per-path |Z| integral
    // has comparable block means; late-block domination marks divergence of
    // the running estimate in the sample size.
    let q = n / 4;
    let diverging = if q >= 2 {
        let block = |lo: usize, hi: usize| zeta[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
        let first = block(0, q);
        let last = block(3 * q, n);
        !last.is_finite() || last > 5.0 * first.max(1e-12)
    } else {
        !mean_abs_z.is_finite()
    };
    IntegrabilityDiag { mean_abs_f, mean_abs_z, diverging }
}

// ---------------------------------------------------------------------------
// Comparison principle
// ---------------------------------------------------------------------------

/// Margin trajectory of one flow in a comparison check.
#[derive(Clone, Debug, Serialize)]
pub struct ComparisonFlowRow {
    pub flow_index: usize,
    /// True when an ordering hypothesis failed on this flow; excluded flows
    /// do not count against the verdict.
    pub excluded: bool,
    pub note: String,
    /// `(t, Y2 - Y1)` at the check times.
    pub margins: Vec<(f64, f64)>,
    pub min_margin: f64,
}

/// Verdict of [`comparison_check`] over a corpus of flows.
#[derive(Clone, Debug, Serialize)]
pub struct ComparisonReport {
    pub label: String,
    pub tol: f64,
    pub rows: Vec<ComparisonFlowRow>,
    pub n_excluded: usize,
    pub pass: bool,
}

impl ComparisonReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Ordering check: with `f1 <= f2` along the flow (evaluated at the second
/// solution's arguments) and `psi1(mu_T) <= psi2(mu_T)`, the values must
/// order as `Y1(t, mu_t) <= Y2(t, mu_t) + tol` at every check time.
///
/// The hypotheses are verified numerically per flow; a flow that violates
/// them is excluded from the verdict and reported, never failed. Margins
/// are computed as `Y2 - Y1`, so swapping the solution pair negates every
/// margin exactly.
#[allow(clippy::too_many_arguments)]
pub fn comparison_check(
    sol1: &WbsdeSolution,
    sol2: &WbsdeSolution,
    f1: &GeneratorSpec,
    f2: &GeneratorSpec,
    psi1: &TerminalFunctional,
    psi2: &TerminalFunctional,
    flows: &[MeasureFlow],
    check_times: &[f64],
    tol: f64,
) -> Result<ComparisonReport> {
    if !(tol > 0.0) || !tol.is_finite() {
        return Err(Error::InvalidInput(format!("tolerance must be positive, got {tol}")));
    }
    if sol1.t0() > sol2.t0() + TIME_EPS {
        return Err(Error::Domain(format!(
            "comparison needs the first solution defined from the earlier time: t01 = {} > t02 = {}",
            sol1.t0(),
            sol2.t0()
        )));
    }
    if flows.is_empty() {
        return Err(Error::InvalidInput("need at least one flow".into()));
    }
    let rows: Vec<ComparisonFlowRow> = flows
        .par_iter()
        .enumerate()
        .map(|(fi, flow)| -> Result<ComparisonFlowRow> {
            check_window(sol1, flow)?;
            check_window(sol2, flow)?;
            let idx = snap_check_times(flow, check_times, sol2.t0())?;
            let times = flow.times();
            let nt = times.len();
            let n = flow.n_paths();
            let start = times
                .iter()
                .position(|&s| s >= sol2.t0() - TIME_EPS)
                .unwrap_or(0);

            // Terminal ordering hypothesis.
            let terminal = flow.marginal(nt - 1);
            let (p1, p2) = (psi1.eval(&terminal), psi2.eval(&terminal));
            if p1 > p2 + TIME_EPS {
                return Ok(ComparisonFlowRow {
                    flow_index: fi,
                    excluded: true,
                    note: format!("terminal ordering fails: psi1 = {p1} > psi2 = {p2}"),
                    margins: Vec::new(),
                    min_margin: f64::NAN,
                });
            }
            // Generator ordering hypothesis, evaluated at sol2's (Y, Z).
            for k in start..nt {
                let t = times[k];
                let m = flow.marginal(k);
                let xs = flow.column(k);
                let y2 = sol2.y(t, &m)?;
                let z2 = z_on_paths(sol2, t, &xs, &m)?;
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for i in 0..n {
                    m1 += f1.eval(t, xs[i], &m, y2, z2[i])?;
                    m2 += f2.eval(t, xs[i], &m, y2, z2[i])?;
                }
                if m1 > m2 + TIME_EPS * (n as f64) * (1.0 + m2.abs()) {
                    return Ok(ComparisonFlowRow {
                        flow_index: fi,
                        excluded: true,
                        note: format!(
                            "generator ordering fails at t = {t}: <f1> = {} > <f2> = {}",
                            m1 / n as f64,
                            m2 / n as f64
                        ),
                        margins: Vec::new(),
                        min_margin: f64::NAN,
                    });
                }
            }

            let mut margins = Vec::with_capacity(idx.len());
            let mut min_margin = f64::INFINITY;
            for &k in &idx {
                let m = flow.marginal(k);
                let margin = sol2.y(times[k], &m)? - sol1.y(times[k], &m)?;
                min_margin = min_margin.min(margin);
                margins.push((times[k], margin));
            }
            Ok(ComparisonFlowRow { flow_index: fi, excluded: false, note: String::new(), margins, min_margin })
        })
        .collect::<Result<Vec<_>>>()?;

    let n_excluded = rows.iter().filter(|r| r.excluded).count();
    let pass = rows.iter().filter(|r| !r.excluded).all(|r| r.min_margin >= -tol);
    Ok(ComparisonReport {
        label: format!("{}<={}", psi1.name, psi2.name),
        tol,
        rows,
        n_excluded,
        pass,
    })
}

// ---------------------------------------------------------------------------
// Uniqueness
// ---------------------------------------------------------------------------

/// Per-flow gaps of a two-solution uniqueness check.
#[derive(Clone, Debug, Serialize)]
pub struct UniquenessFlowRow {
    pub flow_index: usize,
    /// Max over check times of `|Y1 - Y2|` at the empirical marginals.
    pub max_y_gap: f64,
    /// `E int |(Z1 - Z2)(t, X_t, mu_t) B(t, X_t)| dt` along the flow: the
    /// almost-everywhere kernel equality in integrated form.
    pub zb_gap: f64,
    pub pass: bool,
}

/// Verdict of [`uniqueness_check`].
#[derive(Clone, Debug, Serialize)]
pub struct UniquenessReport {
    pub label: String,
    pub tol: f64,
    pub rows: Vec<UniquenessFlowRow>,
    pub pass: bool,
}

impl UniquenessReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Two residual-passing solutions of the same `(f, psi)` must agree: the
/// values at the flow marginals within `tol`, and the kernels in the
/// flow-weighted integrated sense. The precondition (both pass
/// [`wbsde_residual`] for this `f`, `psi`) is the caller's obligation; the
/// arguments name the shared data in the report label.
pub fn uniqueness_check(
    sol1: &WbsdeSolution,
    sol2: &WbsdeSolution,
    f: &GeneratorSpec,
    psi: &TerminalFunctional,
    flows: &[MeasureFlow],
    check_times: &[f64],
    tol: f64,
) -> Result<UniquenessReport> {
    if !(tol > 0.0) || !tol.is_finite() {
        return Err(Error::InvalidInput(format!("tolerance must be positive, got {tol}")));
    }
    if flows.is_empty() {
        return Err(Error::InvalidInput("need at least one flow".into()));
    }
    let t_min = sol1.t0().max(sol2.t0());
    let rows: Vec<UniquenessFlowRow> = flows
        .par_iter()
        .enumerate()
        .map(|(fi, flow)| -> Result<UniquenessFlowRow> {
            check_window(sol1, flow)?;
            check_window(sol2, flow)?;
            let idx = snap_check_times(flow, check_times, t_min)?;
            let times = flow.times();
            let n = flow.n_paths();
            let start = times.iter().position(|&s| s >= t_min - TIME_EPS).unwrap_or(0);

            let mut max_y_gap = 0.0f64;
            for &k in &idx {
                let m = flow.marginal(k);
                let gap = (sol1.y(times[k], &m)? - sol2.y(times[k], &m)?).abs();
                max_y_gap = max_y_gap.max(gap);
            }

            let w = trapezoid_weights(times, start);
            let mut zb = vec![0.0; n];
            for (j, wj) in w.iter().enumerate() {
                let k = start + j;
                let t = times[k];
                let m = flow.marginal(k);
                let xs = flow.column(k);
                let z1 = z_on_paths(sol1, t, &xs, &m)?;
                let z2 = z_on_paths(sol2, t, &xs, &m)?;
                for i in 0..n {
                    let b = flow.drift().eval(t, xs[i]);
                    zb[i] += wj * ((z1[i] - z2[i]) * b).abs();
                }
            }
            let zb_gap = zb.iter().sum::<f64>() / n as f64;
            let pass = max_y_gap <= tol && zb_gap <= tol;
            Ok(UniquenessFlowRow { flow_index: fi, max_y_gap, zb_gap, pass })
        })
        .collect::<Result<Vec<_>>>()?;

    let pass = rows.iter().all(|r| r.pass);
    Ok(UniquenessReport { label: format!("{}|{}", f.name, psi.name), tol, rows, pass })
}
