//! Closed-form and fixed-point solvers: the heat-semigroup pair for a
//! vanishing generator, additive state costs, the Feynman-Kac construction
//! for generators linear in `z` with its tangent processes, and the
//! entropic Gibbs fixed point for the `z^2/2` generator.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{uniform_grid, MeasureFlow, MkvDrift, DEFAULT_DT};
use crate::functional::{SmoothFn, TerminalFunctional};
use crate::linreg;
use crate::measure::{
    convolve, relative_entropy, DiscreteMeasure, GaussianSpec, GridDensity, DEFAULT_MAX_SUPPORT,
};
use crate::quad::{gauss_hermite, trapezoid};
use crate::rng::{path_rng, stream_rng, substream};
use crate::solution::{Provenance, WbsdeSolution};

/// Gauss-Hermite resolution for smooth Gaussian expectations.
pub const GH_NODES: usize = 64;

/// Nodes of the Gibbs quadrature grid.
pub const GIBBS_GRID_NODES: usize = 1024;

/// Default damping of the Gibbs fixed-point iteration.
pub const GIBBS_DEFAULT_DAMPING: f64 = 0.5;

/// Times closer than this to the horizon are treated as terminal.
const TERMINAL_EPS: f64 = 1e-14;

/// Standard-normal draws frozen at solve time, in antithetic pairs so that
/// odd integrands average to zero exactly.
fn frozen_antithetic(n_mc: usize, seed: u64, name: &str) -> Arc<Vec<f64>> {
    let mut rng = stream_rng(seed, name);
    let half = n_mc.div_ceil(2);
    let mut v = Vec::with_capacity(2 * half);
    for _ in 0..half {
        let z: f64 = StandardNormal.sample(&mut rng);
        v.push(z);
        v.push(-z);
    }
    Arc::new(v)
}

fn check_time_window(t: f64, horizon: f64) -> Result<f64> {
    if !(0.0..=horizon + TERMINAL_EPS).contains(&t) {
        return Err(Error::InvalidInput(format!(
            "time {t} outside the solution window [0, {horizon}]"
        )));
    }
    Ok((horizon - t).max(0.0))
}

/// Solution of the W-BSDE with zero generator:
/// `Y(t, m) = psi(m * N(0, T - t))` and
/// `Z(t, x, m) = E[d_m psi(nu, x + W)(W / (T - t))]` with `W ~ N(0, T - t)`
/// and `nu = m * N(0, T - t)`, both over `n_mc` frozen antithetic draws.
///
/// At `t = T` the value is `psi(m)` exactly; `Z` returns the spatial
/// gradient of the flat derivative when the functional declares it
/// analytically, and a domain error otherwise.
pub fn solve_zero_generator(
    psi: &TerminalFunctional,
    horizon: f64,
    n_mc: usize,
    seed: u64,
) -> Result<WbsdeSolution> {
    if !(horizon > 0.0) {
        return Err(Error::InvalidInput(format!("horizon must be positive, got {horizon}")));
    }
    if n_mc < 2 {
        return Err(Error::InvalidInput("need at least two Monte Carlo draws".into()));
    }
    let draws = frozen_antithetic(n_mc, seed, "zero-gen");

    let psi_y = psi.clone();
    let draws_y = draws.clone();
    let y = move |t: f64, m: &DiscreteMeasure| -> Result<f64> {
        let tau = check_time_window(t, horizon)?;
        if tau <= TERMINAL_EPS {
            return Ok(psi_y.eval(m));
        }
        let s = tau.sqrt();
        let noise = DiscreteMeasure::uniform(draws_y.iter().map(|w| w * s).collect())?;
        Ok(psi_y.eval(&convolve(m, &noise, DEFAULT_MAX_SUPPORT)?))
    };

    let psi_z = psi.clone();
    let z_batch = move |t: f64, xs: &[f64], m: &DiscreteMeasure| -> Result<Vec<f64>> {
        let tau = check_time_window(t, horizon)?;
        if tau <= TERMINAL_EPS {
            if !psi_z.has_analytic_derivs() {
                return Err(Error::Domain(
                    "Z at the terminal time needs the analytic spatial gradient of the flat \
                     derivative; this functional only offers finite differences"
                        .into(),
                ));
            }
            return xs.iter().map(|&x| psi_z.flat_grad(m, x)).collect();
        }
        let s = tau.sqrt();
        let noise = DiscreteMeasure::uniform(draws.iter().map(|w| w * s).collect())?;
        let nu = convolve(m, &noise, DEFAULT_MAX_SUPPORT)?;
        let prepared = psi_z.prepare(&nu)?;
        let inv = 1.0 / s;
        Ok(xs
            .par_iter()
            .map(|&x| {
                let mut acc = 0.0;
                for &w in draws.iter() {
                    acc += prepared.flat(x + s * w) * w * inv;
                }
                acc / draws.len() as f64
            })
            .collect())
    };

    Ok(WbsdeSolution::new(0.0, horizon, Provenance::Zero, y, z_batch))
}

/// Solution for the additive state-cost generator `f(t, x, m, y, z) = c(x)`:
/// the zero-generator pair plus the forcing layer
/// `Y_c(t, m) = int_t^T <c, m * N(0, s - t)> ds` and
/// `Z_c(t, x) = int_t^T E[c'(x + W_{s-t})] ds`
/// (the Gaussian Stein identity turns the score-weighted kernel into the
/// derivative form). All forcing integrals are deterministic quadrature:
/// Gauss-Hermite in space, trapezoid in time.
pub fn solve_state_cost_generator(
    psi: &TerminalFunctional,
    cost: &SmoothFn,
    horizon: f64,
    n_mc: usize,
    seed: u64,
) -> Result<WbsdeSolution> {
    let base = solve_zero_generator(psi, horizon, n_mc, seed)?;
    let (gh_x, gh_w) = gauss_hermite(GH_NODES)?;
    let gh = Arc::new((gh_x, gh_w));
    let time_panels = ((horizon / DEFAULT_DT).ceil() as usize).max(8);

    let cost_y = cost.clone();
    let gh_y = gh.clone();
    let base_y = base.clone();
    let y = move |t: f64, m: &DiscreteMeasure| -> Result<f64> {
        let tau = check_time_window(t, horizon)?;
        let ts = if tau <= TERMINAL_EPS {
            return base_y.y(t, m);
        } else {
            uniform_grid(t, horizon, tau / time_panels as f64)?
        };
        let vals: Vec<f64> = ts
            .iter()
            .map(|&s| {
                let u = (s - t).max(0.0).sqrt();
                m.integrate(|x| {
                    crate::quad::gh_expect(&gh_y.0, &gh_y.1, x, u, |y| cost_y.eval(y))
                })
            })
            .collect();
        Ok(base_y.y(t, m)? + trapezoid(&ts, &vals))
    };

    let cost_z = cost.clone();
    let base_z = base;
    let z_batch = move |t: f64, xs: &[f64], m: &DiscreteMeasure| -> Result<Vec<f64>> {
        let tau = check_time_window(t, horizon)?;
        let mut out = base_z.z_batch(t, xs, m)?;
        if tau <= TERMINAL_EPS {
            return Ok(out);
        }
        let ts = uniform_grid(t, horizon, tau / time_panels as f64)?;
        for (zi, &x) in out.iter_mut().zip(xs) {
            let vals: Vec<f64> = ts
                .iter()
                .map(|&s| {
                    let u = (s - t).max(0.0).sqrt();
                    crate::quad::gh_expect(&gh.0, &gh.1, x, u, |y| cost_z.d1(y))
                })
                .collect();
            *zi += trapezoid(&ts, &vals);
        }
        Ok(out)
    };

    Ok(WbsdeSolution::new(0.0, horizon, Provenance::StateCost, y, z_batch))
}

type DxDrift = Arc<dyn Fn(f64, f64, &DiscreteMeasure) -> f64 + Send + Sync>;

/// Separable factorization of `d_y d_m B(t, x, m)(y) = g(t, x) h(t, y)`.
/// The factored form is what lets the mean-field forcing of the tangent
/// system reduce to one conditional expectation per step.
#[derive(Clone)]
pub struct TangentForcing {
    pub g_factor: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    pub h_factor: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
}

impl TangentForcing {
    /// Forcing with no dependence on the receiving point: `d_y d_m B = h(t, y)`.
    pub fn uniform(h: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        Self { g_factor: Arc::new(|_, _| 1.0), h_factor: Arc::new(h) }
    }
}

/// Drift data for the tangent processes: the drift itself, its spatial
/// derivative, and the separable mixed derivative toward the measure.
#[derive(Clone)]
pub struct TangentDriftSpec {
    pub drift: MkvDrift,
    /// `dx B(t, x, m)`; `None` means identically zero.
    pub dx: Option<DxDrift>,
    /// Factors of `d_y d_m B`; `None` means no measure dependence.
    pub dm_dy: Option<TangentForcing>,
}

/// First-variation processes along a flow: `J` on the flow's own paths and
/// `Jbar` on an independent copy, with the copy's paths retained.
pub struct TangentProcessState {
    pub times: Vec<f64>,
    pub n_paths: usize,
    /// Row-major `n_paths x n_times`; multiplicative sensitivity on own path.
    pub j: Vec<f64>,
    /// Row-major `n_paths x n_times`; cross sensitivity on the copy.
    pub jbar: Vec<f64>,
    /// Row-major `n_paths x n_times`; the independent copy's paths.
    pub xbar: Vec<f64>,
}

impl TangentProcessState {
    pub fn j_at(&self, i: usize, k: usize) -> f64 {
        self.j[i * self.times.len() + k]
    }

    pub fn jbar_at(&self, i: usize, k: usize) -> f64 {
        self.jbar[i * self.times.len() + k]
    }

    pub fn xbar_at(&self, i: usize, k: usize) -> f64 {
        self.xbar[i * self.times.len() + k]
    }
}

/// Degree-3 polynomial features used for the conditional-mean regression.
fn poly_features(x: f64) -> [f64; 4] {
    [1.0, x, x * x, x * x * x]
}

/// Integrates the tangent processes along `flow`.
///
/// `J` solves `dJ = J dxB(s, X_s, nu_s) ds`, `J_t = 1`; since the equation
/// is a scalar linear ODE along each stored path, it is integrated exactly
/// as `exp` of the trapezoid quadrature of `dxB`.
///
/// `Jbar` starts at zero on an independent copy `Xbar` (same drift, frozen
/// to the flow's own marginals) and is Euler-integrated; its mean-field
/// forcing, the conditional mean of `Jbar h(s, Xbar_s)` given the flow
/// path, is estimated per step by least-squares regression on degree-3
/// polynomial features of the conditioning path's current state.
pub fn tangent_processes(
    flow: &MeasureFlow,
    spec: &TangentDriftSpec,
) -> Result<TangentProcessState> {
    let times = flow.times().to_vec();
    let n_times = times.len();
    let n = flow.n_paths();
    let marginals: Vec<DiscreteMeasure> = (0..n_times).map(|k| flow.marginal(k)).collect();

    // J by exact exponential integration of the sampled linear ODE.
    let j: Vec<f64> = match &spec.dx {
        None => vec![1.0; n * n_times],
        Some(dx) => {
            let rows: Vec<Vec<f64>> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let path = flow.path(i);
                    let mut acc = 0.0;
                    let mut row = Vec::with_capacity(n_times);
                    row.push(1.0);
                    for k in 0..n_times - 1 {
                        let h = times[k + 1] - times[k];
                        let a = dx(times[k], path[k], &marginals[k]);
                        let b = dx(times[k + 1], path[k + 1], &marginals[k + 1]);
                        acc += 0.5 * (a + b) * h;
                        row.push(acc.exp());
                    }
                    row
                })
                .collect();
            rows.into_iter().flatten().collect()
        }
    };

    // Independent copy riding the flow's own marginals.
    let copy_seed = substream(flow.seed(), "tangent-copy");
    let m0 = &marginals[0];
    let quantiles = m0.quantiles();
    let mut xbar_cols: Vec<Vec<f64>> = Vec::with_capacity(n_times);
    let mut xb: Vec<f64> = (0..n)
        .map(|i| {
            let mut rng = path_rng(copy_seed, i as u64);
            quantiles.quantile(rng.gen::<f64>())
        })
        .collect();
    let dws: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(copy_seed, i as u64);
            let _burn: f64 = rng.gen();
            (0..n_times - 1).map(|_| StandardNormal.sample(&mut rng)).collect()
        })
        .collect();
    xbar_cols.push(xb.clone());
    for k in 0..n_times - 1 {
        let h = times[k + 1] - times[k];
        let b = spec.drift.prepare(times[k], &marginals[k]);
        let sq = h.sqrt();
        for (i, x) in xb.iter_mut().enumerate() {
            *x += b(*x) * h + dws[i][k] * sq;
        }
        xbar_cols.push(xb.clone());
    }

    // Jbar by Euler with the regression-estimated conditional forcing.
    let mut jbar_cols: Vec<Vec<f64>> = Vec::with_capacity(n_times);
    let mut jb = vec![0.0; n];
    jbar_cols.push(jb.clone());
    for k in 0..n_times - 1 {
        let h = times[k + 1] - times[k];
        let t_k = times[k];
        let mut incr = vec![0.0; n];
        if let Some(dx) = &spec.dx {
            for i in 0..n {
                incr[i] += jb[i] * dx(t_k, xbar_cols[k][i], &marginals[k]);
            }
        }
        if let Some(f) = &spec.dm_dy {
            // Cross-sectional estimate of E[Jbar h(s, Xbar_s) | flow path],
            // regressed on the conditioning path's current state.
            let mut feats = Vec::with_capacity(n * 4);
            let mut targets = Vec::with_capacity(n);
            for i in 0..n {
                feats.extend_from_slice(&poly_features(flow.state(i, k)));
                targets.push(jb[i] * (f.h_factor)(t_k, xbar_cols[k][i]));
            }
            let coef = linreg::least_squares(&feats, &targets, 4)?;
            for i in 0..n {
                let a = linreg::predict(&coef, &poly_features(flow.state(i, k)));
                let g = (f.g_factor)(t_k, xbar_cols[k][i]);
                let j_own = self_j(&j, i, k, n_times);
                incr[i] += g * (a + j_own * (f.h_factor)(t_k, flow.state(i, k)));
            }
        }
        for i in 0..n {
            jb[i] += incr[i] * h;
        }
        jbar_cols.push(jb.clone());
    }

    let flip = |cols: Vec<Vec<f64>>| -> Vec<f64> {
        let mut out = vec![0.0; n * n_times];
        for (k, col) in cols.iter().enumerate() {
            for i in 0..n {
                out[i * n_times + k] = col[i];
            }
        }
        out
    };
    Ok(TangentProcessState {
        times,
        n_paths: n,
        j,
        jbar: flip(jbar_cols),
        xbar: flip(xbar_cols),
    })
}

fn self_j(j: &[f64], i: usize, k: usize, n_times: usize) -> f64 {
    j[i * n_times + k]
}

/// Drift data for the linear-in-`z` generator `f(t, x, m, y, z) = ell(t, x, m) z`.
#[derive(Clone)]
pub struct LinearDriftSpec {
    pub ell: MkvDrift,
    /// `dx ell`; `None` means zero (the drift does not vary in `x`).
    pub ell_dx: Option<DxDrift>,
    /// Separable factors of `d_y d_m ell`; `None` means measure-independent.
    pub dm_dy: Option<TangentForcing>,
}

/// Simulation budget for the Feynman-Kac construction.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LinearSim {
    pub dt: f64,
    pub n_paths: usize,
    pub n_picard: usize,
    pub seed: u64,
}

impl Default for LinearSim {
    fn default() -> Self {
        Self { dt: DEFAULT_DT, n_paths: 4_000, n_picard: 3, seed: 0 }
    }
}

struct LinearEngine {
    spec: LinearDriftSpec,
    psi: TerminalFunctional,
    horizon: f64,
    sim: LinearSim,
}

impl LinearEngine {
    /// Marginal flow of `dX = ell(s, X, nu_s) ds + dW` from `(t, m)`.
    fn marginals(&self, t: f64, m: &DiscreteMeasure) -> Result<(Vec<f64>, Vec<DiscreteMeasure>)> {
        let ts = uniform_grid(t, self.horizon, self.sim.dt)?;
        let out = crate::flow::simulate_mkv_flow(
            &self.spec.ell,
            m,
            t,
            &ts,
            self.sim.n_paths,
            self.sim.n_picard,
            substream(self.sim.seed, "linear-flow"),
        )?;
        let margs = (0..ts.len()).map(|k| out.flow.marginal(k)).collect();
        Ok((ts, margs))
    }

    fn y(&self, t: f64, m: &DiscreteMeasure) -> Result<f64> {
        let tau = check_time_window(t, self.horizon)?;
        if tau <= TERMINAL_EPS {
            return Ok(self.psi.eval(m));
        }
        let (_, margs) = self.marginals(t, m)?;
        Ok(self.psi.eval(margs.last().expect("grid is nonempty")))
    }

    /// Z by the derivative (tangent-process) assembly:
    /// `Z(t, x, m) = E[J_T dx d_m psi(nu_T)(X_T^{t,x})]
    ///             + E[Jbar_T dx d_m psi(nu_T)(Xbar_T)]`,
    /// the second term present only for measure-dependent drifts.
    fn z_batch(&self, t: f64, xs: &[f64], m: &DiscreteMeasure) -> Result<Vec<f64>> {
        let tau = check_time_window(t, self.horizon)?;
        if tau <= TERMINAL_EPS {
            return xs.iter().map(|&x| self.psi.flat_grad(m, x)).collect();
        }
        let (ts, margs) = self.marginals(t, m)?;
        let n_times = ts.len();
        let k_paths = self.sim.n_paths;
        let prepared = self.psi.prepare(margs.last().expect("nonempty"))?;

        // Per-step prepared drifts and shared Brownian increments for the
        // conditioning ensembles (same increments across the xs batch).
        let drifts: Vec<_> =
            (0..n_times - 1).map(|k| self.spec.ell.prepare(ts[k], &margs[k])).collect();
        let cond_seed = substream(self.sim.seed, "linear-z-cond");
        let dws: Vec<Vec<f64>> = (0..k_paths)
            .into_par_iter()
            .map(|i| {
                let mut rng = path_rng(cond_seed, i as u64);
                (0..n_times - 1).map(|_| StandardNormal.sample(&mut rng)).collect()
            })
            .collect();

        // Independent copy for the cross term, shared across the batch.
        let copy = if self.spec.dm_dy.is_some() {
            let copy_seed = substream(self.sim.seed, "linear-z-copy");
            let quantiles = m.quantiles();
            let mut xb: Vec<f64> = (0..k_paths)
                .map(|i| {
                    let mut rng = path_rng(copy_seed, i as u64);
                    quantiles.quantile(rng.gen::<f64>())
                })
                .collect();
            let cdws: Vec<Vec<f64>> = (0..k_paths)
                .into_par_iter()
                .map(|i| {
                    let mut rng = path_rng(copy_seed, i as u64);
                    let _burn: f64 = rng.gen();
                    (0..n_times - 1).map(|_| StandardNormal.sample(&mut rng)).collect()
                })
                .collect();
            let mut cols = Vec::with_capacity(n_times);
            cols.push(xb.clone());
            for k in 0..n_times - 1 {
                let h = ts[k + 1] - ts[k];
                let sq = h.sqrt();
                for (i, x) in xb.iter_mut().enumerate() {
                    *x += drifts[k](*x) * h + cdws[i][k] * sq;
                }
                cols.push(xb.clone());
            }
            Some(cols)
        } else {
            None
        };

        xs.par_iter()
            .map(|&x| {
                // Conditioning ensemble from x.
                let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n_times);
                let mut cur = vec![x; k_paths];
                cols.push(cur.clone());
                for k in 0..n_times - 1 {
                    let h = ts[k + 1] - ts[k];
                    let sq = h.sqrt();
                    for (i, v) in cur.iter_mut().enumerate() {
                        *v += drifts[k](*v) * h + dws[i][k] * sq;
                    }
                    cols.push(cur.clone());
                }

                // J along the conditioning paths (exact exponential form).
                let mut j_cols: Vec<Vec<f64>> = vec![vec![1.0; k_paths]];
                if let Some(dx) = &self.spec.ell_dx {
                    let mut acc = vec![0.0; k_paths];
                    for k in 0..n_times - 1 {
                        let h = ts[k + 1] - ts[k];
                        let mut col = Vec::with_capacity(k_paths);
                        for i in 0..k_paths {
                            let a = dx(ts[k], cols[k][i], &margs[k]);
                            let b = dx(ts[k + 1], cols[k + 1][i], &margs[k + 1]);
                            acc[i] += 0.5 * (a + b) * h;
                            col.push(acc[i].exp());
                        }
                        j_cols.push(col);
                    }
                } else {
                    for _ in 0..n_times - 1 {
                        j_cols.push(vec![1.0; k_paths]);
                    }
                }

                let mut z = 0.0;
                for i in 0..k_paths {
                    z += j_cols[n_times - 1][i] * prepared.flat_grad(cols[n_times - 1][i]);
                }
                z /= k_paths as f64;

                if let (Some(f), Some(xbar)) = (&self.spec.dm_dy, &copy) {
                    // Euler for Jbar with per-step regression forcing.
                    let mut jb = vec![0.0; k_paths];
                    for k in 0..n_times - 1 {
                        let h = ts[k + 1] - ts[k];
                        let mut feats = Vec::with_capacity(k_paths * 4);
                        let mut targets = Vec::with_capacity(k_paths);
                        for i in 0..k_paths {
                            feats.extend_from_slice(&poly_features(cols[k][i]));
                            targets.push(jb[i] * (f.h_factor)(ts[k], xbar[k][i]));
                        }
                        let coef = linreg::least_squares(&feats, &targets, 4)?;
                        let mut next = jb.clone();
                        for i in 0..k_paths {
                            let own_dx = self
                                .spec
                                .ell_dx
                                .as_ref()
                                .map(|dx| jb[i] * dx(ts[k], xbar[k][i], &margs[k]))
                                .unwrap_or(0.0);
                            let a = linreg::predict(&coef, &poly_features(cols[k][i]));
                            let g = (f.g_factor)(ts[k], xbar[k][i]);
                            let j_own = j_cols[k][i];
                            next[i] = jb[i]
                                + (own_dx + g * (a + j_own * (f.h_factor)(ts[k], cols[k][i]))) * h;
                        }
                        jb = next;
                    }
                    let mut cross = 0.0;
                    for i in 0..k_paths {
                        cross += jb[i] * prepared.flat_grad(xbar[n_times - 1][i]);
                    }
                    z += cross / k_paths as f64;
                }
                Ok(z)
            })
            .collect()
    }
}

/// Feynman-Kac solution for the generator `f = ell(t, x, m) z`:
/// `Y(t, m) = psi(nu_T)` where `nu` is the McKean-Vlasov flow of drift
/// `ell` started from `m` at `t`, and `Z` is assembled from the tangent
/// processes (own-path `J` term plus cross `Jbar` term).
///
/// A measure-dependent drift requires the terminal functional to declare
/// its analytic derivatives (the cross term integrates `dx d_m psi`).
pub fn solve_linear_generator(
    spec: &LinearDriftSpec,
    psi: &TerminalFunctional,
    horizon: f64,
    sim: &LinearSim,
) -> Result<WbsdeSolution> {
    if !(horizon > 0.0) {
        return Err(Error::InvalidInput(format!("horizon must be positive, got {horizon}")));
    }
    if spec.dm_dy.is_some() && !psi.has_analytic_derivs() {
        return Err(Error::Capability(
            "measure-dependent generator drift requires the analytic spatial gradient of the \
             terminal functional's flat derivative (dx d_m psi); this functional only offers \
             finite differences"
                .into(),
        ));
    }
    let engine = Arc::new(LinearEngine {
        spec: spec.clone(),
        psi: psi.clone(),
        horizon,
        sim: *sim,
    });
    let e_y = engine.clone();
    let e_z = engine;
    Ok(WbsdeSolution::new(
        0.0,
        horizon,
        Provenance::Linear,
        move |t, m| e_y.y(t, m),
        move |t, xs, m| e_z.z_batch(t, xs, m),
    ))
}

/// Score-form cross-check of the linear-generator `Z` for drifts that do
/// not vary in `x`: the transition kernel from `(t, x)` is then the
/// Gaussian `N(x + shift, T - t)` with `shift = int_t^T ell(s, nu_s) ds`,
/// so `Z(t, x, m) = E[d_m psi(nu_T)(x + shift + W) W / (T - t)]`.
pub fn linear_z_score_form(
    spec: &LinearDriftSpec,
    psi: &TerminalFunctional,
    horizon: f64,
    sim: &LinearSim,
    t: f64,
    x: f64,
    m: &DiscreteMeasure,
) -> Result<f64> {
    let tau = check_time_window(t, horizon)?;
    if tau <= TERMINAL_EPS {
        return Err(Error::Domain("score form is undefined at the terminal time".into()));
    }
    let engine = LinearEngine {
        spec: spec.clone(),
        psi: psi.clone(),
        horizon,
        sim: *sim,
    };
    let (ts, margs) = engine.marginals(t, m)?;
    // Left-point cumulative drift, matching the Euler discretization.
    let mut shift = 0.0;
    for k in 0..ts.len() - 1 {
        shift += spec.ell.prepare(ts[k], &margs[k])(0.0) * (ts[k + 1] - ts[k]);
    }
    let prepared = psi.prepare(margs.last().expect("nonempty"))?;
    let draws = frozen_antithetic(sim.n_paths, sim.seed, "linear-z-score");
    let s = tau.sqrt();
    let mut acc = 0.0;
    for &w in draws.iter() {
        acc += prepared.flat(x + shift + s * w) * w / s;
    }
    Ok(acc / draws.len() as f64)
}

/// Converged state of the Gibbs fixed-point iteration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GibbsState {
    /// The fixed-point density on its quadrature grid.
    pub nu: GridDensity,
    pub iterations: usize,
    /// Sup-norm residual of the undamped Gibbs map at the returned state.
    pub sup_gap: f64,
    /// Damping factor in effect when the iteration stopped.
    pub damping: f64,
    pub warnings: Vec<String>,
}

/// Quadratic-generator solution at one `(t, m)`: the value, the fixed-point
/// state, and the pointwise `Z` map.
pub struct QuadraticSolution {
    pub value: f64,
    pub state: GibbsState,
    z: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl QuadraticSolution {
    pub fn z(&self, x: f64) -> f64 {
        (self.z)(x)
    }
}

impl std::fmt::Debug for QuadraticSolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("QuadraticSolution")
            .field("value", &self.value)
            .field("state", &self.state)
            .finish()
    }
}

/// Entropy against `N(0, tau)` with the grid zero-padded so the Gaussian
/// tail outside it is below the coverage gate of `relative_entropy`.
fn entropy_padded(grid_left: f64, step: f64, values: &[f64], tau: f64) -> Result<f64> {
    let sigma = tau.sqrt();
    let target = 6.8 * sigma;
    let have = -grid_left;
    let extra = (((target - have) / step).ceil() as usize).max(0);
    let mut padded = vec![0.0; extra];
    padded.extend_from_slice(values);
    padded.extend(std::iter::repeat(0.0).take(extra));
    let g = GridDensity::new(grid_left - extra as f64 * step, step, padded)?;
    relative_entropy(&g, &GaussianSpec::new(0.0, tau)?)
}

/// Solves the W-BSDE with generator `z^2/2` at one `(t, m)` by the damped
/// fixed-point iteration on the Gibbs identity
/// `nu propto exp{ int d_m psi(nu * m)(z + x) m(dx) } N(0, T - t)(dz)`.
///
/// On convergence (`sup_gap <= tol`) the value is the entropic objective
/// `psi(nu * m) - D(nu | N(0, T - t))` and
/// `Z(x) = int dx d_m psi(nu * m)(z + x) nu(dz)`.
///
/// The objective is monitored every sweep; a damped step that decreases it
/// beyond quadrature tolerance halves the damping and is retried, so a
/// damping of 1 degrades gracefully on hard instances. A functional not
/// declared concave produces a warning, not an error.
#[allow(clippy::too_many_arguments)]
pub fn solve_quadratic(
    psi: &TerminalFunctional,
    t: f64,
    horizon: f64,
    m: &DiscreteMeasure,
    n_nodes: usize,
    damping: f64,
    tol: f64,
    max_iter: usize,
) -> Result<QuadraticSolution> {
    if !(0.0 < damping && damping <= 1.0) {
        return Err(Error::InvalidInput(format!("damping must lie in (0, 1], got {damping}")));
    }
    if n_nodes < 16 {
        return Err(Error::InvalidInput("Gibbs grid needs at least 16 nodes".into()));
    }
    let tau = check_time_window(t, horizon)?;
    let mut warnings = Vec::new();
    if !psi.concave {
        warnings.push(
            "terminal functional is not declared concave; the fixed point may not attain the \
             entropic supremum"
                .to_string(),
        );
    }

    if tau <= TERMINAL_EPS {
        // nu degenerates to the point mass at zero.
        let value = psi.eval(m);
        let prepared = psi.prepare(m)?;
        let z = Arc::new(move |x: f64| prepared.flat_grad(x));
        let nu = GridDensity::new(-0.5e-8, 1e-8, vec![1e8])?;
        return Ok(QuadraticSolution {
            value,
            state: GibbsState { nu, iterations: 0, sup_gap: 0.0, damping, warnings },
            z,
        });
    }

    let sigma = tau.sqrt();
    let left = -6.0 * sigma;
    let step = 12.0 * sigma / (n_nodes - 1) as f64;
    let zs: Vec<f64> = (0..n_nodes).map(|k| left + step * k as f64).collect();
    let gamma = GaussianSpec::new(0.0, tau)?;
    let log_gamma: Vec<f64> = zs.iter().map(|&z| gamma.pdf(z).ln()).collect();

    // Rectangle-rule normalization throughout, matching the conventions of
    // the grid-density container and the entropy quadrature.
    let normalize = move |v: &mut [f64]| {
        let total: f64 = step * v.iter().sum::<f64>();
        for x in v.iter_mut() {
            *x /= total;
        }
    };

    // Evaluates psi(nu * m) and the prepared functional at the convolution.
    let prepare_at = |nu_vals: &[f64]| -> Result<(crate::functional::PreparedPsi, f64)> {
        let nu_d = DiscreteMeasure::from_unnormalized(zs.clone(), nu_vals.to_vec())?;
        let conv = convolve(m, &nu_d, DEFAULT_MAX_SUPPORT)?;
        let prepared = psi.prepare(&conv)?;
        let value = prepared.value;
        Ok((prepared, value))
    };

    let objective = |nu_vals: &[f64]| -> Result<f64> {
        let (_, v) = prepare_at(nu_vals)?;
        Ok(v - entropy_padded(left, step, nu_vals, tau)?)
    };

    // Start from the reference Gaussian.
    let mut nu: Vec<f64> = zs.iter().map(|&z| gamma.pdf(z)).collect();
    normalize(&mut nu);
    let mut obj = objective(&nu)?;
    let mut damp = damping;
    let mut gap = f64::INFINITY;

    let m_pts = m.points().to_vec();
    let m_w = m.weights().to_vec();

    for it in 1..=max_iter {
        let (prepared, _) = prepare_at(&nu)?;
        let mut mapped: Vec<f64> = zs
            .par_iter()
            .enumerate()
            .map(|(k, &z)| {
                let mut phi = 0.0;
                for (&x, &w) in m_pts.iter().zip(&m_w) {
                    phi += w * prepared.flat(z + x);
                }
                phi + log_gamma[k]
            })
            .collect();
        let peak = mapped.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for v in mapped.iter_mut() {
            *v = (*v - peak).exp();
        }
        normalize(&mut mapped);

        gap = nu
            .iter()
            .zip(&mapped)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        if gap <= tol {
            nu = mapped;
            let value = objective(&nu)?;
            let (prepared, _) = prepare_at(&nu)?;
            let nu_grid = GridDensity::new(left, step, nu.clone())?;
            let (zs_c, nu_c) = (zs.clone(), nu.clone());
            let z = Arc::new(move |x: f64| {
                let mut acc = 0.0;
                for (&zk, &vk) in zs_c.iter().zip(&nu_c) {
                    acc += step * vk * prepared.flat_grad(zk + x);
                }
                acc
            });
            return Ok(QuadraticSolution {
                value,
                state: GibbsState { nu: nu_grid, iterations: it, sup_gap: gap, damping: damp, warnings },
                z,
            });
        }

        // Damped step with geometric back-off on objective decrease.
        loop {
            let cand: Vec<f64> =
                nu.iter().zip(&mapped).map(|(a, b)| (1.0 - damp) * a + damp * b).collect();
            let cand_obj = objective(&cand)?;
            if cand_obj + 1e-10 >= obj || damp <= 1e-6 {
                if cand_obj + 1e-10 < obj {
                    warnings.push(format!(
                        "iteration {it}: objective decreased by {:.3e} despite damping floor",
                        obj - cand_obj
                    ));
                }
                nu = cand;
                obj = cand_obj;
                break;
            }
            damp *= 0.5;
            warnings.push(format!(
                "iteration {it}: objective would decrease; damping lowered to {damp}"
            ));
        }
    }

    Err(Error::NonConvergence { iterations: max_iter, gap })
}

/// Packages the Gibbs fixed point as a full solution pair on `[0, horizon]`.
///
/// Each `Y` query runs the iteration at its own `(t, m)`; each `Z` batch
/// shares one converged state across all its points. Queries inherit the
/// solver's failure modes (non-convergence surfaces as an error, not a
/// poisoned value).
pub fn quadratic_wbsde_solution(
    psi: &TerminalFunctional,
    horizon: f64,
    n_nodes: usize,
    damping: f64,
    tol: f64,
    max_iter: usize,
) -> Result<WbsdeSolution> {
    check_time_window(0.0, horizon)?;
    let p_y = psi.clone();
    let y = move |t: f64, m: &DiscreteMeasure| {
        solve_quadratic(&p_y, t, horizon, m, n_nodes, damping, tol, max_iter).map(|s| s.value)
    };
    let p_z = psi.clone();
    let z_batch = move |t: f64, xs: &[f64], m: &DiscreteMeasure| {
        let sol = solve_quadratic(&p_z, t, horizon, m, n_nodes, damping, tol, max_iter)?;
        Ok(xs.iter().map(|&x| (sol.z)(x)).collect())
    };
    Ok(WbsdeSolution::new(0.0, horizon, Provenance::Quadratic, y, z_batch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{simulate_flow, DriftFn};
    use crate::functional::{functional_from_config, CylinderSpec, Outer};
    use crate::quad::gh_expect;
    use approx::assert_abs_diff_eq;
    use serde_json::json;

    fn tanh_linear() -> TerminalFunctional {
        functional_from_config("tanh-linear", &json!({"scale": 1.0})).unwrap()
    }

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    fn stderr(v: &[f64]) -> f64 {
        let m = mean(v);
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        (var / v.len() as f64).sqrt()
    }

    #[test]
    fn zero_generator_is_exact_at_the_terminal_time() {
        let psi = tanh_linear();
        let sol = solve_zero_generator(&psi, 1.0, 1000, 3).unwrap();
        let m = DiscreteMeasure::uniform(vec![-0.4, 0.2, 1.1]).unwrap();
        assert_eq!(sol.y(1.0, &m).unwrap(), psi.eval(&m));
        // Terminal Z falls back to the analytic spatial gradient.
        let z = sol.z(1.0, 0.3, &m).unwrap();
        assert_abs_diff_eq!(z, psi.flat_grad(&m, 0.3).unwrap(), epsilon = 1e-14);
    }

    #[test]
    fn odd_terminal_functional_vanishes_from_a_centered_start() {
        // E[tanh(W_1)] = 0 by symmetry; antithetic draws make it exact.
        let psi = tanh_linear();
        let sol = solve_zero_generator(&psi, 1.0, 4000, 7).unwrap();
        let y = sol.y(0.0, &DiscreteMeasure::dirac(0.0)).unwrap();
        assert_abs_diff_eq!(y, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_generator_z_matches_integration_by_parts() {
        // Score form E[tanh(x+W) W]/tau vs derivative form E[tanh'(x+W)].
        let psi = tanh_linear();
        let m = DiscreteMeasure::dirac(0.0);
        let (t, horizon, x) = (0.2, 1.0, 0.4);
        let tau: f64 = horizon - t;
        let mut score = Vec::new();
        let mut deriv = Vec::new();
        for rep in 0..6 {
            let sol = solve_zero_generator(&psi, horizon, 20_000, 100 + rep).unwrap();
            score.push(sol.z(t, x, &m).unwrap());
            let mut rng = stream_rng(200 + rep, "ibp");
            let vals: Vec<f64> = (0..20_000)
                .map(|_| {
                    let w: f64 = StandardNormal.sample(&mut rng);
                    let arg: f64 = x + tau.sqrt() * w;
                    1.0 - arg.tanh().powi(2)
                })
                .collect();
            deriv.push(mean(&vals));
        }
        let gap = (mean(&score) - mean(&deriv)).abs();
        let tol = 3.0 * (stderr(&score) + stderr(&deriv));
        assert!(gap <= tol, "estimator forms disagree: {gap} > {tol}");
    }

    #[test]
    fn value_is_stable_across_measure_representatives() {
        let psi = functional_from_config("logistic-cylinder", &json!({})).unwrap();
        let sol = solve_zero_generator(&psi, 1.0, 8_000, 11).unwrap();
        let n = 4_000;
        let mut rng = stream_rng(13, "representatives");
        let sample = |rng: &mut rand_chacha::ChaCha8Rng| {
            let pts: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
            DiscreteMeasure::uniform(pts).unwrap()
        };
        let y1 = sol.y(0.3, &sample(&mut rng)).unwrap();
        let y2 = sol.y(0.3, &sample(&mut rng)).unwrap();
        // Two empirical representatives of N(0,1) differ by O(n^{-1/2}) in W1.
        assert_abs_diff_eq!(y1, y2, epsilon = 0.05);
    }

    #[test]
    fn state_cost_layer_matches_the_sine_closed_form() {
        // cost = sin(a + b x): <cost, d_p * N(0,u)> = sin(a + b p) e^{-b^2 u / 2},
        // so the forcing integrals are elementary.
        let psi = tanh_linear();
        let (a, b) = (0.3, 1.2);
        let cost = SmoothFn::sine(1.0, b, a);
        let sol = solve_state_cost_generator(&psi, &cost, 1.0, 4000, 5).unwrap();
        let base = solve_zero_generator(&psi, 1.0, 4000, 5).unwrap();
        let (t, p) = (0.25, 0.7);
        let tau: f64 = 1.0 - t;
        let m = DiscreteMeasure::dirac(p);
        let forcing = (a + b * p).sin() * (1.0 - (-b * b * tau / 2.0).exp()) * 2.0 / (b * b);
        let got = sol.y(t, &m).unwrap() - base.y(t, &m).unwrap();
        assert_abs_diff_eq!(got, forcing, epsilon = 1e-5);

        let x = -0.4;
        let z_forcing =
            b * (a + b * x).cos() * (1.0 - (-b * b * tau / 2.0).exp()) * 2.0 / (b * b);
        let got_z = sol.z(t, x, &m).unwrap() - base.z(t, x, &m).unwrap();
        assert_abs_diff_eq!(got_z, z_forcing, epsilon = 1e-5);
    }

    #[test]
    fn trivial_tangent_processes_are_constant() {
        let mu0 = DiscreteMeasure::uniform(vec![-1.0, 1.0]).unwrap();
        let ts = uniform_grid(0.0, 0.5, 0.05).unwrap();
        let flow = simulate_flow(&DriftFn::constant(0.4).unwrap(), &mu0, 0.0, &ts, 64, 3).unwrap();
        let spec = TangentDriftSpec {
            drift: MkvDrift::from_plain(flow.drift()),
            dx: None,
            dm_dy: None,
        };
        let st = tangent_processes(&flow, &spec).unwrap();
        for i in 0..st.n_paths {
            for k in 0..st.times.len() {
                assert_eq!(st.j_at(i, k), 1.0);
                assert_eq!(st.jbar_at(i, k), 0.0);
            }
        }
    }

    #[test]
    fn own_tangent_matches_quadrature_along_stored_paths() {
        let kappa = 0.8;
        let drift = DriftFn::new("kappa-tanh", kappa, move |_, x: f64| kappa * x.tanh()).unwrap();
        let mu0 = DiscreteMeasure::uniform(vec![-0.5, 0.0, 0.5]).unwrap();
        let ts = uniform_grid(0.0, 0.6, 0.02).unwrap();
        let flow = simulate_flow(&drift, &mu0, 0.0, &ts, 32, 9).unwrap();
        let spec = TangentDriftSpec {
            drift: MkvDrift::from_plain(flow.drift()),
            dx: Some(Arc::new(move |_, x: f64, _: &DiscreteMeasure| {
                kappa * (1.0 - x.tanh().powi(2))
            })),
            dm_dy: None,
        };
        let st = tangent_processes(&flow, &spec).unwrap();
        for i in 0..8 {
            let path = flow.path(i);
            let vals: Vec<f64> =
                path.iter().map(|&x| kappa * (1.0 - x.tanh().powi(2))).collect();
            for k in [ts.len() / 2, ts.len() - 1] {
                let oracle = trapezoid(&ts[..=k], &vals[..=k]).exp();
                assert_abs_diff_eq!(st.j_at(i, k), oracle, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn cross_tangent_matches_particle_finite_difference() {
        // Drift b(t, x, m) = 0.5 <sin, m>: the cross sensitivity solves a
        // mean-field linear ODE. Oracle: n-particle system, perturb one
        // initial particle, finite-difference the others.
        let c = 0.5;
        let drift = MkvDrift::new("half-mean-sin", c, move |_, m: &DiscreteMeasure| {
            let v = c * m.integrate(f64::sin);
            Arc::new(move |_| v)
        })
        .unwrap();
        let mu0 = DiscreteMeasure::uniform(vec![-1.0, -0.3, 0.4, 1.1]).unwrap();
        let ts = uniform_grid(0.0, 0.5, 0.02).unwrap();
        let out = crate::flow::simulate_mkv_flow(&drift, &mu0, 0.0, &ts, 3_000, 2, 17).unwrap();
        let spec = TangentDriftSpec {
            drift: drift.clone(),
            dx: None,
            dm_dy: Some(TangentForcing::uniform(move |_, y: f64| c * y.cos())),
        };
        let st = tangent_processes(&out.flow, &spec).unwrap();
        let jbar_mean = mean(
            &(0..st.n_paths).map(|i| st.jbar_at(i, st.times.len() - 1)).collect::<Vec<_>>(),
        );

        // Particle finite difference with common random numbers.
        let n = 50;
        let reps = 200;
        let eps = 1e-4;
        let mut acc = Vec::new();
        let quant = mu0.quantiles();
        for rep in 0..reps {
            let mut rng = stream_rng(900 + rep, "fd-oracle");
            let x0: Vec<f64> = (0..n).map(|_| quant.quantile(rng.gen::<f64>())).collect();
            let dws: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    (0..ts.len() - 1)
                        .map(|_| StandardNormal.sample(&mut rng))
                        .collect()
                })
                .collect();
            let run = |shift: f64| -> Vec<f64> {
                let mut xs = x0.clone();
                xs[0] += shift;
                for k in 0..ts.len() - 1 {
                    let h = ts[k + 1] - ts[k];
                    let b = c * xs.iter().map(|x| x.sin()).sum::<f64>() / n as f64;
                    for (i, x) in xs.iter_mut().enumerate() {
                        *x += b * h + dws[i][k] * h.sqrt();
                    }
                }
                xs
            };
            let base = run(0.0);
            let pert = run(eps);
            for j in 1..n {
                acc.push(n as f64 * (pert[j] - base[j]) / eps);
            }
        }
        let fd = mean(&acc);
        assert_abs_diff_eq!(jbar_mean, fd, epsilon = 0.05);
    }

    #[test]
    fn linear_solver_with_zero_drift_reduces_to_the_heat_pair() {
        let psi = tanh_linear();
        let spec = LinearDriftSpec {
            ell: MkvDrift::new("zero", 0.0, |_, _| Arc::new(|_| 0.0)).unwrap(),
            ell_dx: None,
            dm_dy: None,
        };
        let sim = LinearSim { dt: 1e-2, n_paths: 20_000, n_picard: 0, seed: 21 };
        let lin = solve_linear_generator(&spec, &psi, 1.0, &sim).unwrap();
        let zero = solve_zero_generator(&psi, 1.0, 20_000, 22).unwrap();
        let m = DiscreteMeasure::uniform(vec![-0.6, 0.1, 0.9]).unwrap();
        let (yl, yz) = (lin.y(0.3, &m).unwrap(), zero.y(0.3, &m).unwrap());
        // Both are Monte Carlo with ~2e4 draws of a bounded functional.
        assert_abs_diff_eq!(yl, yz, epsilon = 0.02);
        let (zl, zz) = (lin.z(0.3, 0.5, &m).unwrap(), zero.z(0.3, 0.5, &m).unwrap());
        assert_abs_diff_eq!(zl, zz, epsilon = 0.03);
    }

    #[test]
    fn linear_solver_matches_quadrature_for_constant_drift() {
        let psi = tanh_linear();
        let ell = 0.7;
        let spec = LinearDriftSpec {
            ell: MkvDrift::new("const", ell, move |_, _| Arc::new(move |_| ell)).unwrap(),
            ell_dx: None,
            dm_dy: None,
        };
        let sim = LinearSim { dt: 1e-2, n_paths: 30_000, n_picard: 0, seed: 31 };
        let sol = solve_linear_generator(&spec, &psi, 1.0, &sim).unwrap();
        let t = 0.4;
        let tau: f64 = 1.0 - t;
        let got = sol.y(t, &DiscreteMeasure::dirac(0.0)).unwrap();
        let (gx, gw) = gauss_hermite(GH_NODES).unwrap();
        let oracle = gh_expect(&gx, &gw, ell * tau, tau.sqrt(), f64::tanh);
        // stderr of a bounded odd functional under 3e4 paths.
        assert_abs_diff_eq!(got, oracle, epsilon = 0.01);
    }

    #[test]
    fn two_z_assemblies_agree_for_constant_drift() {
        let psi = tanh_linear();
        let ell = 0.5;
        let spec = LinearDriftSpec {
            ell: MkvDrift::new("const", ell, move |_, _| Arc::new(move |_| ell)).unwrap(),
            ell_dx: None,
            dm_dy: None,
        };
        let m = DiscreteMeasure::uniform(vec![-0.4, 0.3]).unwrap();
        let (t, x) = (0.2, 0.6);
        let mut deriv_form = Vec::new();
        let mut score_form = Vec::new();
        for rep in 0..4 {
            let sim = LinearSim { dt: 1e-2, n_paths: 20_000, n_picard: 0, seed: 40 + rep };
            let sol = solve_linear_generator(&spec, &psi, 1.0, &sim).unwrap();
            deriv_form.push(sol.z(t, x, &m).unwrap());
            score_form.push(linear_z_score_form(&spec, &psi, 1.0, &sim, t, x, &m).unwrap());
        }
        let gap = (mean(&deriv_form) - mean(&score_form)).abs();
        let tol = 3.0 * (stderr(&deriv_form) + stderr(&score_form)) + 1e-4;
        assert!(gap <= tol, "assembly forms disagree: {gap} > {tol}");
    }

    #[test]
    fn measure_dependent_drift_without_analytic_derivatives_is_rejected() {
        let opaque = TerminalFunctional::from_eval(
            "opaque",
            |m: &DiscreteMeasure| m.integrate(f64::tanh),
            false,
            1.0,
        );
        let spec = LinearDriftSpec {
            ell: MkvDrift::new("mean", 1.0, |_, m: &DiscreteMeasure| {
                let v = m.mean().tanh();
                Arc::new(move |_| v)
            })
            .unwrap(),
            ell_dx: None,
            dm_dy: Some(TangentForcing::uniform(|_, y: f64| 1.0 - y.tanh().powi(2))),
        };
        let err = solve_linear_generator(&spec, &opaque, 1.0, &LinearSim::default()).unwrap_err();
        assert!(matches!(err, Error::Capability(_)), "got {err:?}");
    }

    #[test]
    fn constant_functional_fixes_the_gaussian_immediately() {
        let psi = TerminalFunctional::from_cylinder(
            "const",
            CylinderSpec::new(Outer::new(1, |_| 2.5, |_| vec![0.0]), vec![SmoothFn::tanh()])
                .unwrap(),
            true,
            2.5,
            Some(0.0),
        );
        let m = DiscreteMeasure::dirac(0.4);
        let sol = solve_quadratic(&psi, 0.5, 1.0, &m, 512, 1.0, 1e-10, 10).unwrap();
        assert!(sol.state.iterations <= 2);
        assert_abs_diff_eq!(sol.value, 2.5, epsilon = 1e-8);
        assert_abs_diff_eq!(sol.z(0.3), 0.0, epsilon = 1e-14);
        // The fixed point is the reference Gaussian itself.
        let tau: f64 = 0.5;
        let g = GaussianSpec::new(0.0, tau).unwrap();
        let nu = &sol.state.nu;
        // Differ only by the renormalization of the 6-sigma tail truncation.
        for k in (0..nu.values().len()).step_by(61) {
            assert_abs_diff_eq!(nu.values()[k], g.pdf(nu.node(k)), epsilon = 1e-7);
        }
    }

    #[test]
    fn linear_functional_reproduces_the_log_laplace_value() {
        // For psi = <g, m> the Gibbs map is constant in nu, so one full
        // sweep converges and the value is log int exp(int g(z+x) m(dx)) dgamma.
        let psi = tanh_linear();
        let m = DiscreteMeasure::uniform(vec![-0.5, 0.8]).unwrap();
        let (t, horizon) = (0.5, 1.0);
        let tau: f64 = horizon - t;
        let sol = solve_quadratic(&psi, t, horizon, &m, GIBBS_GRID_NODES, 1.0, 1e-10, 20).unwrap();
        assert!(sol.state.iterations <= 2, "took {} iterations", sol.state.iterations);
        let (gx, gw) = gauss_hermite(128).unwrap();
        let oracle = gh_expect(&gx, &gw, 0.0, tau.sqrt(), |z| {
            m.integrate(|x| (z + x).tanh()).exp()
        })
        .ln();
        assert_abs_diff_eq!(sol.value, oracle, epsilon = 1e-5);
    }

    #[test]
    fn gibbs_value_dominates_exponential_tilt_candidates() {
        let psi = functional_from_config(
            "concave-cylinder",
            &json!({"c0": 0.5, "a": 1.0, "b": 0.4}),
        )
        .unwrap();
        let m = DiscreteMeasure::uniform(vec![-0.7, 0.0, 0.5]).unwrap();
        let (t, horizon) = (0.4, 1.0);
        let tau: f64 = horizon - t;
        let sol =
            solve_quadratic(&psi, t, horizon, &m, GIBBS_GRID_NODES, 0.5, 1e-9, 200).unwrap();
        let sigma = tau.sqrt();
        let left = -6.0 * sigma;
        let step = 12.0 * sigma / (GIBBS_GRID_NODES - 1) as f64;
        let zs: Vec<f64> = (0..GIBBS_GRID_NODES).map(|k| left + step * k as f64).collect();
        let gamma = GaussianSpec::new(0.0, tau).unwrap();
        let mut rng = stream_rng(77, "tilt");
        for _ in 0..50 {
            let (a, b, c): (f64, f64, f64) =
                (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-2.0..2.0));
            let mut vals: Vec<f64> =
                zs.iter().map(|&z| (a * z.tanh() + b * (c * z).sin()).exp() * gamma.pdf(z)).collect();
            let total: f64 = step * vals.iter().sum::<f64>();
            for v in vals.iter_mut() {
                *v /= total;
            }
            let cand = DiscreteMeasure::from_unnormalized(zs.clone(), vals.clone()).unwrap();
            let conv = convolve(&m, &cand, DEFAULT_MAX_SUPPORT).unwrap();
            let obj =
                psi.eval(&conv) - entropy_padded(left, step, &vals, tau).unwrap();
            assert!(
                sol.value >= obj - 1e-6,
                "candidate beats the fixed point: {} > {}",
                obj,
                sol.value
            );
        }
    }

    #[test]
    fn quadratic_z_respects_the_gradient_bound() {
        let psi = tanh_linear();
        let m = DiscreteMeasure::uniform(vec![-1.0, 0.2, 0.9]).unwrap();
        let sol = solve_quadratic(&psi, 0.3, 1.0, &m, 512, 1.0, 1e-9, 50).unwrap();
        // |Z(x)| <= sup |dx d_m psi| = sup |tanh'| = 1.
        for x in [-2.0, -0.5, 0.0, 0.7, 2.3] {
            assert!(sol.z(x).abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn non_concave_functional_warns_but_runs() {
        let psi = functional_from_config("square-cylinder", &json!({"scale": 1.0})).unwrap();
        let m = DiscreteMeasure::dirac(0.1);
        let sol = solve_quadratic(&psi, 0.6, 1.0, &m, 512, 0.5, 1e-8, 300).unwrap();
        assert!(sol.state.warnings.iter().any(|w| w.contains("concave")));
        assert!(sol.state.sup_gap <= 1e-8);
    }

    #[test]
    fn exhausted_iteration_budget_reports_nonconvergence() {
        let psi = functional_from_config(
            "concave-cylinder",
            &json!({"c0": 0.0, "a": 1.5, "b": 0.8}),
        )
        .unwrap();
        let m = DiscreteMeasure::uniform(vec![-0.5, 0.5]).unwrap();
        let err = solve_quadratic(&psi, 0.0, 1.0, &m, 256, 0.5, 1e-14, 1).unwrap_err();
        assert!(matches!(err, Error::NonConvergence { .. }), "got {err:?}");
    }
}
