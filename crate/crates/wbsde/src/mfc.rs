//! Mean-field control over bounded feedback policies.
//!
//! The problem is to maximize `E[int_t^T L(s, X_s, mu_s, a_s) ds] +
//! psi(mu_T)` over feedback controls `a_s = alpha(s, X_s, mu_s)` with values
//! in a compact action set, where the state follows the controlled
//! McKean-Vlasov dynamics `dX = b(s, X, mu, a) ds + dW` and `mu_s` is the
//! law of `X_s`. Four operations connect this to the solution kernels of
//! the backward equations:
//!
//! * [`evaluate_control`] prices a fixed policy by particle simulation,
//! * [`feedback_from_z`] synthesizes the Hamiltonian feedback
//!   `argmax_a [L + b z]` from a solution kernel along the self-consistent
//!   controlled flow,
//! * [`verify_optimality`] checks the value identity `Y = J(alpha_hat)` and
//!   runs a challenger tournament under common random numbers,
//! * [`value_from_control`] and [`optimal_kernel`] rebuild the value map
//!   and its companion kernel from a given optimal policy.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{
    silverman_bandwidth, simulate_mkv_flow, uniform_grid, DriftFn, MeasureFlow, MkvDrift,
};
use crate::functional::TerminalFunctional;
use crate::measure::{wasserstein1, DiscreteMeasure};
use crate::quad::trapezoid_weights;
use crate::rng::{path_rng, substream};
use crate::solution::WbsdeSolution;

/// Tolerance slack on declared sup bounds, matching the flow simulators.
const BOUND_SLACK: f64 = 1e-9;
/// Padding beyond the cloud support for per-step kernel lattices.
const LATTICE_PAD: f64 = 1.0;
/// Central-difference step for the time-`t` panel of the kernel assembly.
const SPATIAL_STEP: f64 = 1e-3;
/// Spread threshold under which a realized drift counts as state-free,
/// enabling exact Gaussian scores in the kernel assembly.
const CONST_DRIFT_TOL: f64 = 1e-10;

/// Running reward or controlled drift field `(t, x, m, a) -> value`.
pub type ControlledField = Arc<dyn Fn(f64, f64, &DiscreteMeasure, f64) -> f64 + Send + Sync>;

/// Uniform action grid on a compact interval. The grid is both the search
/// set for Hamiltonian maximization and the sampling set for challenger
/// policies; evaluated policies are always projected onto its hull.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ActionGrid {
    lo: f64,
    hi: f64,
    n: usize,
}

impl ActionGrid {
    pub fn new(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::InvalidInput(format!(
                "action interval [{lo}, {hi}] must be bounded and nondegenerate"
            )));
        }
        if n < 2 {
            return Err(Error::InvalidInput("action grid needs at least two points".into()));
        }
        Ok(Self { lo, hi, n })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    #[allow(clippy::len_without_is_empty)] // construction guarantees n >= 2
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.n - 1) as f64
    }

    pub fn value(&self, k: usize) -> f64 {
        self.lo + self.step() * k as f64
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.n).map(|k| self.value(k)).collect()
    }

    /// Projects an action onto the hull `[lo, hi]`.
    pub fn clamp(&self, a: f64) -> f64 {
        a.clamp(self.lo, self.hi)
    }
}

/// Declared bounds of a control problem. `dm_l_bound = 0` declares the
/// running reward measure-free, which is what licenses the insertion-only
/// derivative channel in [`optimal_kernel`]; a nonzero declaration without
/// derivative data leaves value-only mode.
#[derive(Clone, Copy, Debug)]
pub struct MfcBounds {
    /// Sup norm of the running reward over the admissible domain.
    pub l_bound: f64,
    /// Sup norm of the controlled drift.
    pub b_bound: f64,
    /// Sup norm of the measure-slot flat derivative of the running reward.
    pub dm_l_bound: f64,
}

impl MfcBounds {
    fn validate(&self) -> Result<()> {
        for (name, v) in
            [("l_bound", self.l_bound), ("b_bound", self.b_bound), ("dm_l_bound", self.dm_l_bound)]
        {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// A mean-field control problem on `[0, horizon]`.
#[derive(Clone)]
pub struct MfcProblem {
    pub name: String,
    pub horizon: f64,
    /// Running reward `L(t, x, m, a)`.
    pub l: ControlledField,
    /// Controlled drift `b(t, x, m, a)`.
    pub b: ControlledField,
    pub actions: ActionGrid,
    pub psi: TerminalFunctional,
    pub bounds: MfcBounds,
}

impl MfcProblem {
    pub fn new(
        name: impl Into<String>,
        horizon: f64,
        l: ControlledField,
        b: ControlledField,
        actions: ActionGrid,
        psi: TerminalFunctional,
        bounds: MfcBounds,
    ) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidInput(format!("horizon must be positive, got {horizon}")));
        }
        bounds.validate()?;
        Ok(Self { name: name.into(), horizon, l, b, actions, psi, bounds })
    }

    /// Control Hamiltonian `h(t, x, m, z, a) = L + b z` before maximization.
    pub fn hamiltonian(&self, t: f64, x: f64, m: &DiscreteMeasure, z: f64, a: f64) -> f64 {
        (self.l)(t, x, m, a) + (self.b)(t, x, m, a) * z
    }

    /// Maximizing action of the Hamiltonian: a full grid scan followed by
    /// one parabolic refinement through the triple centred next to the best
    /// grid point, projected onto the hull. The refinement is exact for
    /// Hamiltonians quadratic in the action (any grid triple determines the
    /// same parabola), so e.g. `L = -a^2/2, b = a` recovers the clipped
    /// kernel `clamp(z)` without grid bias. Grid ties resolve to the
    /// smallest action, and the refined point is kept only when it does not
    /// score below the grid argmax.
    pub fn argmax_action(&self, t: f64, x: f64, m: &DiscreteMeasure, z: f64) -> f64 {
        let n = self.actions.len();
        let mut best = 0usize;
        let mut h_best = f64::NEG_INFINITY;
        for k in 0..n {
            let h = self.hamiltonian(t, x, m, z, self.actions.value(k));
            if h > h_best {
                best = k;
                h_best = h;
            }
        }
        let c = best.clamp(1, n - 2);
        let (am, a0, ap) =
            (self.actions.value(c - 1), self.actions.value(c), self.actions.value(c + 1));
        let hm = self.hamiltonian(t, x, m, z, am);
        let h0 = self.hamiltonian(t, x, m, z, a0);
        let hp = self.hamiltonian(t, x, m, z, ap);
        let curv = hm + hp - 2.0 * h0;
        if !(curv < 0.0) {
            return self.actions.value(best);
        }
        // Vertex offset in grid units; 1.5 covers reaching the hull edge
        // from the centre of an edge triple.
        let s = ((hm - hp) / (2.0 * curv)).clamp(-1.5, 1.5);
        let cand = self.actions.clamp(a0 + s * self.actions.step());
        if self.hamiltonian(t, x, m, z, cand) >= h_best {
            cand
        } else {
            self.actions.value(best)
        }
    }
}

impl std::fmt::Debug for MfcProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MfcProblem")
            .field("name", &self.name)
            .field("horizon", &self.horizon)
            .field("actions", &self.actions)
            .field("psi", &self.psi.name)
            .field("bounds", &self.bounds)
            .finish()
    }
}

/// A feedback policy `alpha(t, x, m)`. Evaluations are projected onto the
/// action hull, so every policy is admissible by construction.
#[derive(Clone)]
pub struct FeedbackControl {
    pub name: String,
    hull: (f64, f64),
    eval: Arc<dyn Fn(f64, f64, &DiscreteMeasure) -> f64 + Send + Sync>,
}

impl FeedbackControl {
    pub fn new(
        name: impl Into<String>,
        actions: &ActionGrid,
        eval: impl Fn(f64, f64, &DiscreteMeasure) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self { name: name.into(), hull: (actions.lo(), actions.hi()), eval: Arc::new(eval) }
    }

    /// The constant policy `a(t, x, m) = a` (projected onto the hull).
    pub fn constant(name: impl Into<String>, actions: &ActionGrid, a: f64) -> Self {
        Self::new(name, actions, move |_, _, _| a)
    }

    pub fn eval(&self, t: f64, x: f64, m: &DiscreteMeasure) -> f64 {
        (self.eval)(t, x, m).clamp(self.hull.0, self.hull.1)
    }
}

impl std::fmt::Debug for FeedbackControl {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeedbackControl").field("name", &self.name).field("hull", &self.hull).finish()
    }
}

/// Monte Carlo parameters shared by the control operations.
#[derive(Clone, Debug)]
pub struct MfcSim {
    /// Particles in every controlled flow.
    pub n_paths: usize,
    /// Euler step of the controlled flows.
    pub flow_dt: f64,
    /// Law fixed-point confirmation sweeps after the one-pass coupling
    /// (0 trusts the coupling without a gap certificate).
    pub n_picard: usize,
    /// Largest admissible sup-over-time W1 gap between the last two law
    /// iterates when `n_picard > 0`.
    pub mkv_tol: f64,
    /// Spatial lattice size per time step for kernel queries.
    pub z_lattice: usize,
    /// Atom cap when passing empirical marginals to kernel or value queries.
    pub thin_atoms: usize,
    /// Score-panel spacing of the kernel assembly.
    pub knot_dt: f64,
    /// Paths per probe point in the kernel assembly.
    pub kernel_paths: usize,
    pub seed: u64,
}

impl MfcSim {
    pub fn new(n_paths: usize, seed: u64) -> Self {
        Self {
            n_paths,
            flow_dt: 0.02,
            n_picard: 1,
            mkv_tol: 5e-3,
            z_lattice: 129,
            thin_atoms: 1024,
            knot_dt: 0.1,
            kernel_paths: 1000,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_paths < 2 || self.kernel_paths < 2 {
            return Err(Error::InvalidInput("need at least two paths".into()));
        }
        if !(self.flow_dt > 0.0) || !(self.knot_dt > 0.0) {
            return Err(Error::InvalidInput("time steps must be positive".into()));
        }
        if self.z_lattice < 2 || self.thin_atoms < 2 {
            return Err(Error::InvalidInput("lattice and atom caps need at least two points".into()));
        }
        Ok(())
    }
}

/// Caps an empirical measure at `cap` atoms by stratified quantile
/// resampling; smaller measures pass through unchanged.
fn thin_measure(m: &DiscreteMeasure, cap: usize) -> Result<DiscreteMeasure> {
    m.stratified(cap.min(m.len()))
}

/// The drift field induced by a policy: `x -> b(t, x, m, alpha(t, x, m))`.
fn controlled_drift(problem: &MfcProblem, alpha: &FeedbackControl) -> Result<MkvDrift> {
    let b = problem.b.clone();
    let alpha = alpha.clone();
    MkvDrift::new(
        format!("{}:{}", problem.name, alpha.name),
        problem.bounds.b_bound,
        move |t, m| {
            let b = b.clone();
            let alpha = alpha.clone();
            let m = m.clone();
            Arc::new(move |x| b(t, x, &m, alpha.eval(t, x, &m)))
        },
    )
}

/// Largest grid index whose time does not exceed `s` (clamped into the grid).
fn step_index(times: &[f64], s: f64) -> usize {
    times.iter().rposition(|&u| u <= s + 1e-12).unwrap_or(0)
}

/// Monte Carlo policy value `J(t, nu, alpha)` with its standard error.
///
/// The flow is simulated by the McKean-Vlasov particle scheme under the
/// seed in `sim`, so two policies evaluated with the same `sim` share their
/// Brownian inputs and their value difference is a common-random-number
/// estimate. When `n_picard > 0` the law fixed point must certify itself
/// within `mkv_tol` or the evaluation is refused as non-convergent.
pub fn evaluate_control(
    problem: &MfcProblem,
    t: f64,
    nu: &DiscreteMeasure,
    alpha: &FeedbackControl,
    sim: &MfcSim,
) -> Result<(f64, f64)> {
    sim.validate()?;
    let times = uniform_grid(t, problem.horizon, sim.flow_dt)?;
    let drift = controlled_drift(problem, alpha)?;
    let res = simulate_mkv_flow(&drift, nu, t, &times, sim.n_paths, sim.n_picard, sim.seed)?;
    if sim.n_picard > 0 && !(res.picard_gap <= sim.mkv_tol) {
        return Err(Error::NonConvergence { iterations: sim.n_picard, gap: res.picard_gap });
    }
    policy_value(problem, alpha, &res.flow)
}

/// Value and standard error read off an already simulated controlled flow.
///
/// The value is the trapezoid average of the running reward over the flow
/// grid plus the terminal functional at the realized terminal law. The
/// standard error covers the running-reward average and, when the terminal
/// functional carries analytic derivatives, a delta-method term for
/// `psi(mu_T)`; for opaque terminal functionals the terminal fluctuation is
/// not counted.
pub fn policy_value(
    problem: &MfcProblem,
    alpha: &FeedbackControl,
    flow: &MeasureFlow,
) -> Result<(f64, f64)> {
    let times = flow.times();
    let nt = times.len();
    if nt < 2 {
        return Err(Error::InvalidInput("flow needs at least two grid times".into()));
    }
    let marginals: Vec<DiscreteMeasure> = (0..nt).map(|k| flow.marginal(k)).collect();
    let tw = trapezoid_weights(times, 0);
    let terminal = &marginals[nt - 1];
    let psi_term = problem.psi.eval(terminal);
    let prepared = if problem.psi.has_analytic_derivatives() {
        Some(problem.psi.prepare(terminal)?)
    } else {
        None
    };
    let l_cap = problem.bounds.l_bound + BOUND_SLACK;

    // Per path: the reward integral, and the same plus the terminal
    // linearization (for the error estimate only).
    let pairs: Vec<(f64, f64)> = (0..flow.n_paths())
        .into_par_iter()
        .map(|i| {
            let mut run = 0.0;
            for (k, &w) in tw.iter().enumerate() {
                let x = flow.state(i, k);
                let m = &marginals[k];
                let a = alpha.eval(times[k], x, m);
                let lv = (problem.l)(times[k], x, m, a);
                if !lv.is_finite() || lv.abs() > l_cap {
                    return Err(Error::Config(format!(
                        "running reward violates declared bound {} at (t={}, x={x}, a={a}): value {lv}",
                        problem.bounds.l_bound, times[k]
                    )));
                }
                run += w * lv;
            }
            let with_terminal = match &prepared {
                Some(p) => run + p.flat(flow.state(i, nt - 1)),
                None => run,
            };
            Ok((run, with_terminal))
        })
        .collect::<Result<_>>()?;

    let n = pairs.len() as f64;
    let j = pairs.iter().map(|p| p.0).sum::<f64>() / n + psi_term;
    let err_mean = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let var = pairs.iter().map(|p| (p.1 - err_mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((j, (var / n).sqrt()))
}

/// The value map read back from a fixed policy, `Y_hat(t, nu) = J(t, nu,
/// alpha)`, with its standard error. The companion kernel is assembled
/// separately by [`optimal_kernel`], which needs derivative data that this
/// value query does not.
pub fn value_from_control(
    problem: &MfcProblem,
    alpha: &FeedbackControl,
    t: f64,
    nu: &DiscreteMeasure,
    sim: &MfcSim,
) -> Result<(f64, f64)> {
    evaluate_control(problem, t, nu, alpha, sim)
}

/// Per-step kernel lattice: `Z(s_k, x, nu_k)` sampled on a uniform spatial
/// grid, read back by linear interpolation with edge clamping.
#[derive(Clone)]
struct ZField {
    lo: f64,
    step: f64,
    vals: Vec<f64>,
}

impl ZField {
    fn interp(&self, x: f64) -> f64 {
        let n = self.vals.len();
        let u = ((x - self.lo) / self.step).clamp(0.0, (n - 1) as f64);
        let k = (u.floor() as usize).min(n - 2);
        let w = u - k as f64;
        self.vals[k] * (1.0 - w) + self.vals[k + 1] * w
    }
}

struct FeedbackCtx<'a> {
    problem: &'a MfcProblem,
    sol: &'a WbsdeSolution,
    sim: &'a MfcSim,
    times: &'a [f64],
    /// Frozen per-path inputs `(x0, normalized increments)`.
    inputs: &'a [(f64, Vec<f64>)],
}

fn build_field(ctx: &FeedbackCtx, s: f64, law: &DiscreteMeasure) -> Result<ZField> {
    let pts = law.points();
    let lo = pts.iter().cloned().fold(f64::INFINITY, f64::min) - LATTICE_PAD;
    let hi = pts.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + LATTICE_PAD;
    let n = ctx.sim.z_lattice;
    let step = (hi - lo) / (n - 1) as f64;
    let lattice: Vec<f64> = (0..n).map(|k| lo + step * k as f64).collect();
    let thin = thin_measure(law, ctx.sim.thin_atoms)?;
    let vals = ctx.sol.z_batch(s, &lattice, &thin)?;
    Ok(ZField { lo, step, vals })
}

/// Advances the particle cloud one Euler step under the Hamiltonian
/// feedback read from `field` against the frozen `law`.
fn controlled_step(
    ctx: &FeedbackCtx,
    k: usize,
    law: &DiscreteMeasure,
    field: &ZField,
    xs: &[f64],
) -> Result<Vec<f64>> {
    let dt = ctx.times[k + 1] - ctx.times[k];
    let sq = dt.sqrt();
    let s = ctx.times[k];
    let bb = ctx.problem.bounds.b_bound;
    xs.par_iter()
        .enumerate()
        .map(|(i, &x)| {
            let z = field.interp(x);
            let a = ctx.problem.argmax_action(s, x, law, z);
            let bx = (ctx.problem.b)(s, x, law, a);
            if !bx.is_finite() || bx.abs() > bb + BOUND_SLACK {
                return Err(Error::Config(format!(
                    "controlled drift violates declared bound {bb} at (t={s}, x={x}): value {bx}"
                )));
            }
            Ok(x + bx * dt + ctx.inputs[i].1[k] * sq)
        })
        .collect()
}

/// One-pass coupling: each step's law and kernel lattice come from the
/// current cloud, which is already self-consistent for an explicit Euler
/// particle system.
fn interleaved_sweep(
    ctx: &FeedbackCtx,
) -> Result<(Vec<Vec<f64>>, Vec<DiscreteMeasure>, Vec<ZField>)> {
    let nt = ctx.times.len();
    let mut xs: Vec<f64> = ctx.inputs.iter().map(|p| p.0).collect();
    let mut columns = Vec::with_capacity(nt);
    let mut laws = Vec::with_capacity(nt);
    let mut fields = Vec::with_capacity(nt);
    for k in 0..nt {
        let law = DiscreteMeasure::uniform(xs.clone())?;
        let field = build_field(ctx, ctx.times[k], &law)?;
        columns.push(xs.clone());
        if k + 1 < nt {
            xs = controlled_step(ctx, k, &law, &field, &xs)?;
        }
        laws.push(law);
        fields.push(field);
    }
    Ok((columns, laws, fields))
}

/// Sweep against a frozen law and lattice sequence (one Picard iteration of
/// the law-to-law map with the same Brownian inputs).
fn frozen_sweep(
    ctx: &FeedbackCtx,
    laws: &[DiscreteMeasure],
    fields: &[ZField],
) -> Result<Vec<Vec<f64>>> {
    let nt = ctx.times.len();
    let mut xs: Vec<f64> = ctx.inputs.iter().map(|p| p.0).collect();
    let mut columns = Vec::with_capacity(nt);
    for k in 0..nt {
        columns.push(xs.clone());
        if k + 1 < nt {
            xs = controlled_step(ctx, k, &laws[k], &fields[k], &xs)?;
        }
    }
    Ok(columns)
}

/// Synthesizes the Hamiltonian feedback `alpha_hat(s, x) = argmax_a [L(s,
/// x, nu_s, a) + b(s, x, nu_s, a) Z(s, x, nu_s)]` along the self-consistent
/// controlled flow and returns it together with the realized flow.
///
/// Per time step the kernel is sampled once on a spatial lattice (size
/// `sim.z_lattice`, support of the cloud padded by one unit) and read back
/// by linear interpolation; the measure argument of the returned policy is
/// frozen at the realized laws, so later evaluations ignore the measure
/// the caller passes. When `n_picard > 0` the law sequence is confirmed by
/// frozen-law sweeps under the same Brownian inputs and the sup-over-time
/// W1 gap must reach `mkv_tol`, otherwise the synthesis is refused as
/// non-convergent with that gap in the error.
pub fn feedback_from_z(
    problem: &MfcProblem,
    sol: &WbsdeSolution,
    t: f64,
    nu: &DiscreteMeasure,
    sim: &MfcSim,
) -> Result<(FeedbackControl, MeasureFlow)> {
    sim.validate()?;
    if t < sol.t0() - 1e-9 || problem.horizon > sol.horizon() + 1e-9 {
        return Err(Error::InvalidInput(format!(
            "solution window [{}, {}] does not cover the control window [{t}, {}]",
            sol.t0(),
            sol.horizon(),
            problem.horizon
        )));
    }
    let times = uniform_grid(t, problem.horizon, sim.flow_dt)?;
    let nt = times.len();

    // The synthesis flow rides its own substream. The per-step kernel
    // lattices respond to the realized empirical laws, so a field built and
    // evaluated on the same noise would be scored in sample and could beat
    // the true value; a later `evaluate_control` under `sim.seed` must see
    // noise independent of the field.
    let flow_seed = substream(sim.seed, "mfc-feedback-flow");
    let quantiles = nu.quantiles();
    let inputs: Vec<(f64, Vec<f64>)> = (0..sim.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(flow_seed, i as u64);
            let x0 = quantiles.quantile(rng.gen::<f64>());
            let dws: Vec<f64> = (0..nt - 1).map(|_| StandardNormal.sample(&mut rng)).collect();
            (x0, dws)
        })
        .collect();

    let ctx = FeedbackCtx { problem, sol, sim, times: &times, inputs: &inputs };
    let (mut columns, mut laws, mut fields) = interleaved_sweep(&ctx)?;
    let mut gap = f64::NAN;
    let mut iterations = 0;
    for it in 1..=sim.n_picard {
        let next = frozen_sweep(&ctx, &laws, &fields)?;
        let next_laws: Vec<DiscreteMeasure> =
            next.iter().map(|c| DiscreteMeasure::uniform(c.clone())).collect::<Result<_>>()?;
        gap = (0..nt).map(|k| wasserstein1(&laws[k], &next_laws[k])).fold(0.0f64, f64::max);
        let next_fields: Vec<ZField> = (0..nt)
            .into_par_iter()
            .map(|k| build_field(&ctx, times[k], &next_laws[k]))
            .collect::<Result<_>>()?;
        columns = next;
        laws = next_laws;
        fields = next_fields;
        iterations = it;
        if gap <= sim.mkv_tol {
            break;
        }
    }
    if sim.n_picard > 0 && !(gap <= sim.mkv_tol) {
        return Err(Error::NonConvergence { iterations, gap });
    }

    let feedback = {
        let actions = problem.actions.clone();
        let problem = problem.clone();
        let times = times.clone();
        let laws = laws.clone();
        FeedbackControl::new(
            format!("hamiltonian-feedback:{}", problem.name),
            &actions,
            move |s, x, _m| {
                let k = step_index(&times, s);
                let z = fields[k].interp(x);
                problem.argmax_action(times[k], x, &laws[k], z)
            },
        )
    };

    let drift = {
        let problem = problem.clone();
        let feedback = feedback.clone();
        let times = times.clone();
        DriftFn::new(
            format!("controlled:{}", problem.name),
            problem.bounds.b_bound,
            move |s, x| {
                let k = step_index(&times, s);
                let m = &laws[k];
                (problem.b)(s, x, m, feedback.eval(s, x, m))
            },
        )?
    };
    let mut paths = vec![0.0; sim.n_paths * nt];
    for (k, col) in columns.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            paths[i * nt + k] = v;
        }
    }
    let flow = MeasureFlow::from_parts(t, times, paths, sim.n_paths, drift, flow_seed);
    Ok((feedback, flow))
}

/// One challenger policy's evaluation against the synthesized feedback.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChallengerRecord {
    pub id: usize,
    /// Construction flavor: "negated", "cells", or "perturbed".
    pub kind: String,
    #[serde(rename = "J")]
    pub j: f64,
    /// Common-random-number advantage `J - J_opt`.
    pub delta: f64,
    /// Combined standard error of the two value estimates.
    pub stderr: f64,
}

/// Outcome of the optimality verification: the value identity and the
/// challenger tournament. Failed checks are entries here, never errors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimalityReport {
    #[serde(rename = "J_opt")]
    pub j_opt: f64,
    pub j_opt_stderr: f64,
    #[serde(rename = "Y")]
    pub y: f64,
    /// Absolute value gap `|Y - J_opt|`.
    pub gap: f64,
    pub value_tol: f64,
    pub value_pass: bool,
    /// Largest challenger advantage over the synthesized feedback.
    pub max_delta: f64,
    pub challenger_pass: bool,
    pub challengers: Vec<ChallengerRecord>,
    pub pass: bool,
}

impl OptimalityReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Piecewise-constant cell geometry on `[t0, t1] x [xlo, xhi]`; points
/// outside clamp to the border cells.
#[derive(Clone, Copy)]
struct CellGrid {
    t0: f64,
    t1: f64,
    xlo: f64,
    xhi: f64,
    nt: usize,
    nx: usize,
}

impl CellGrid {
    fn cell(&self, s: f64, x: f64) -> usize {
        let u = ((s - self.t0) / (self.t1 - self.t0) * self.nt as f64)
            .floor()
            .clamp(0.0, (self.nt - 1) as f64) as usize;
        let v = ((x - self.xlo) / (self.xhi - self.xlo) * self.nx as f64)
            .floor()
            .clamp(0.0, (self.nx - 1) as f64) as usize;
        u * self.nx + v
    }
}

/// Challenger policy family. Challenger 0 negates the feedback (a sign
/// corruption that wins decisively when the supplied kernel has the wrong
/// sign); odd ids are random piecewise-constant policies on a 4 x 8 `(t,
/// x)` cell grid with actions sampled from the grid; even ids perturb the
/// feedback by a random offset on one random cell.
fn challenger_policies(
    problem: &MfcProblem,
    alpha_hat: &FeedbackControl,
    t: f64,
    xlo: f64,
    xhi: f64,
    n: usize,
    seed: u64,
) -> Vec<(String, FeedbackControl)> {
    let base = substream(seed, "mfc-challengers");
    let grid = CellGrid { t0: t, t1: problem.horizon, xlo, xhi, nt: 4, nx: 8 };
    (0..n)
        .map(|i| {
            if i == 0 {
                let a = alpha_hat.clone();
                let fb = FeedbackControl::new("negated-feedback", &problem.actions, move |s, x, m| {
                    -a.eval(s, x, m)
                });
                return ("negated".to_string(), fb);
            }
            let mut rng = path_rng(base, i as u64);
            if i % 2 == 1 {
                let acts: Vec<f64> = (0..grid.nt * grid.nx)
                    .map(|_| problem.actions.value(rng.gen_range(0..problem.actions.len())))
                    .collect();
                let fb = FeedbackControl::new(
                    format!("cells-{i}"),
                    &problem.actions,
                    move |s, x, _| acts[grid.cell(s, x)],
                );
                ("cells".to_string(), fb)
            } else {
                let target = rng.gen_range(0..grid.nt * grid.nx);
                let width = problem.actions.hi() - problem.actions.lo();
                let delta = (rng.gen::<f64>() * 2.0 - 1.0) * width / 3.0;
                let a = alpha_hat.clone();
                let fb = FeedbackControl::new(
                    format!("perturbed-{i}"),
                    &problem.actions,
                    move |s, x, m| {
                        let v = a.eval(s, x, m);
                        if grid.cell(s, x) == target {
                            v + delta
                        } else {
                            v
                        }
                    },
                );
                ("perturbed".to_string(), fb)
            }
        })
        .collect()
}

/// Verifies that the solution kernel actually solves the control problem:
/// the value identity `Y(t, nu) = J(t, nu, alpha_hat)` within `tol`, and a
/// challenger tournament in which no policy may beat the synthesized
/// feedback by more than twice the combined standard error. All values are
/// simulated under one seed, so every comparison is a common-random-number
/// difference; check failures are report entries, never errors.
pub fn verify_optimality(
    problem: &MfcProblem,
    sol: &WbsdeSolution,
    t: f64,
    nu: &DiscreteMeasure,
    n_challengers: usize,
    sim: &MfcSim,
    tol: f64,
) -> Result<OptimalityReport> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("tolerance must be positive, got {tol}")));
    }
    let (alpha_hat, flow) = feedback_from_z(problem, sol, t, nu, sim)?;
    let (j_opt, se_opt) = evaluate_control(problem, t, nu, &alpha_hat, sim)?;
    let y = sol.y(t, &thin_measure(nu, sim.thin_atoms)?)?;

    let mut xlo = f64::INFINITY;
    let mut xhi = f64::NEG_INFINITY;
    for i in 0..flow.n_paths() {
        for &v in flow.path(i) {
            xlo = xlo.min(v);
            xhi = xhi.max(v);
        }
    }
    let challengers =
        challenger_policies(problem, &alpha_hat, t, xlo - 0.5, xhi + 0.5, n_challengers, sim.seed);
    let evals: Vec<(f64, f64)> = challengers
        .par_iter()
        .map(|(_, c)| evaluate_control(problem, t, nu, c, sim))
        .collect::<Result<_>>()?;

    let mut records = Vec::with_capacity(n_challengers);
    let mut max_delta = 0.0f64;
    let mut challenger_pass = true;
    for (i, ((kind, _), (j, se))) in challengers.iter().zip(&evals).enumerate() {
        let delta = j - j_opt;
        let stderr = (se * se + se_opt * se_opt).sqrt();
        if delta > 2.0 * stderr {
            challenger_pass = false;
        }
        max_delta = max_delta.max(delta);
        records.push(ChallengerRecord { id: i, kind: kind.clone(), j: *j, delta, stderr });
    }
    let gap = (y - j_opt).abs();
    let value_pass = gap <= tol;
    Ok(OptimalityReport {
        j_opt,
        j_opt_stderr: se_opt,
        y,
        gap,
        value_tol: tol,
        value_pass,
        max_delta,
        challenger_pass,
        challengers: records,
        pass: value_pass && challenger_pass,
    })
}

/// The weak dynamic-programming profile along a controlled flow:
/// `s_k -> E[int_t^{s_k} L dr] + Y(s_k, nu_{s_k})` on the flow grid. For an
/// optimal policy the profile is constant up to Monte Carlo and time
/// discretization error; a drifting profile witnesses suboptimality.
/// Returns the profile and the standard error of the accumulated reward at
/// the terminal knot (its largest value along the grid).
pub fn weak_dpp_profile(
    problem: &MfcProblem,
    sol: &WbsdeSolution,
    alpha: &FeedbackControl,
    flow: &MeasureFlow,
    sim: &MfcSim,
) -> Result<(Vec<f64>, f64)> {
    let times = flow.times();
    let nt = times.len();
    if nt < 2 {
        return Err(Error::InvalidInput("flow needs at least two grid times".into()));
    }
    let marginals: Vec<DiscreteMeasure> = (0..nt).map(|k| flow.marginal(k)).collect();
    let n = flow.n_paths();

    // Per-path cumulative trapezoid of the running reward.
    let cums: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut out = Vec::with_capacity(nt);
            let mut acc = 0.0;
            let mut prev = {
                let x = flow.state(i, 0);
                let m = &marginals[0];
                (problem.l)(times[0], x, m, alpha.eval(times[0], x, m))
            };
            out.push(0.0);
            for k in 1..nt {
                let x = flow.state(i, k);
                let m = &marginals[k];
                let cur = (problem.l)(times[k], x, m, alpha.eval(times[k], x, m));
                acc += 0.5 * (prev + cur) * (times[k] - times[k - 1]);
                out.push(acc);
                prev = cur;
            }
            out
        })
        .collect();

    let mut profile = Vec::with_capacity(nt);
    for k in 0..nt {
        let mean = cums.iter().map(|c| c[k]).sum::<f64>() / n as f64;
        let yk = sol.y(times[k], &thin_measure(&marginals[k], sim.thin_atoms)?)?;
        profile.push(mean + yk);
    }
    let last = nt - 1;
    let mean_last = cums.iter().map(|c| c[last]).sum::<f64>() / n as f64;
    let var =
        cums.iter().map(|c| (c[last] - mean_last).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    Ok((profile, (var / n as f64).sqrt()))
}

/// Assembles the companion kernel `Z_hat(t, x, nu)` of the value map of a
/// fixed policy at the probe points `xs`, from score-weighted derivative
/// channels along the controlled flow: the running-reward insertion channel
/// at every interior score knot plus the terminal channel of `psi`, each
/// riding a path restarted at the probe point; the time-`t` panel closes
/// with a spatial central difference. Scores are exact Gaussian when the
/// realized drift is numerically state-free on a detection lattice, and
/// common-random-number differences of a kernel-smoothed log density
/// otherwise.
///
/// Requires the running reward to be declared measure-free (`dm_l_bound =
/// 0`); a declared measure-slot derivative has no data channel here, so it
/// is refused as a missing capability and only value mode remains.
pub fn optimal_kernel(
    problem: &MfcProblem,
    alpha: &FeedbackControl,
    t: f64,
    nu: &DiscreteMeasure,
    xs: &[f64],
    sim: &MfcSim,
) -> Result<Vec<(f64, f64)>> {
    sim.validate()?;
    if problem.bounds.dm_l_bound != 0.0 {
        return Err(Error::Capability(
            "running reward declares a measure-slot derivative (dm_l_bound > 0) but no \
             derivative data channel exists; only value mode is available"
                .into(),
        ));
    }
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    let knots = uniform_grid(t, problem.horizon, sim.knot_dt)?;
    let sub = ((knots[1] - knots[0]) / sim.flow_dt).ceil().max(1.0) as usize;
    let mut fine = Vec::with_capacity((knots.len() - 1) * sub + 1);
    fine.push(knots[0]);
    for w in knots.windows(2) {
        for j in 1..=sub {
            fine.push(w[0] + (w[1] - w[0]) * j as f64 / sub as f64);
        }
    }
    let nk = knots.len();
    let nf = fine.len();

    // Realized laws along the policy's flow, thinned for reuse as drift and
    // channel arguments.
    let drift = controlled_drift(problem, alpha)?;
    let res = simulate_mkv_flow(
        &drift,
        nu,
        t,
        &fine,
        sim.n_paths,
        sim.n_picard,
        substream(sim.seed, "mfc-kernel-flow"),
    )?;
    if sim.n_picard > 0 && !(res.picard_gap <= sim.mkv_tol) {
        return Err(Error::NonConvergence { iterations: sim.n_picard, gap: res.picard_gap });
    }
    let flow = res.flow;
    let fine_laws: Vec<DiscreteMeasure> =
        (0..nf).map(|k| thin_measure(&flow.marginal(k), sim.thin_atoms)).collect::<Result<_>>()?;
    let prepared_psi = problem.psi.prepare(&thin_measure(&flow.marginal(nf - 1), sim.thin_atoms)?)?;
    let tw = trapezoid_weights(&knots, 0);

    // Realized drift along the frozen laws.
    let bhat = |k: usize, v: f64| -> Result<f64> {
        let s = fine[k];
        let law = &fine_laws[k];
        let bv = (problem.b)(s, v, law, alpha.eval(s, v, law));
        if !bv.is_finite() || bv.abs() > problem.bounds.b_bound + BOUND_SLACK {
            return Err(Error::Config(format!(
                "controlled drift violates declared bound {} at (t={s}, x={v}): value {bv}",
                problem.bounds.b_bound
            )));
        }
        Ok(bv)
    };

    // State-free detection: when the realized drift has no spread across a
    // wide lattice at every step, the transition from any probe point is
    // Gaussian with a deterministic mean shift and the score is exact.
    let pts = nu.points();
    let span = problem.horizon - t;
    let pad = 3.0 * span.sqrt() + 1.0;
    let det_lo = pts.iter().cloned().fold(f64::INFINITY, f64::min) - pad;
    let det_hi = pts.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + pad;
    let det: Vec<f64> = (0..9).map(|k| det_lo + (det_hi - det_lo) * k as f64 / 8.0).collect();
    let mut const_drift: Option<Vec<f64>> = Some(Vec::with_capacity(nf - 1));
    for k in 0..nf - 1 {
        let vals: Vec<f64> = det.iter().map(|&v| bhat(k, v)).collect::<Result<_>>()?;
        let spread =
            vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - vals.iter().cloned().fold(f64::INFINITY, f64::min);
        if spread <= CONST_DRIFT_TOL {
            if let Some(c) = const_drift.as_mut() {
                c.push(vals[0]);
            }
        } else {
            const_drift = None;
            break;
        }
    }

    // Frozen probe noise, shared across probe points.
    let n_half = (sim.kernel_paths / 2).max(1);
    let n_probe = 2 * n_half;
    let qseed = substream(sim.seed, "mfc-kernel-query");
    let dws: Vec<f64> = (0..n_half)
        .flat_map(|p| {
            let mut rng = path_rng(qseed, p as u64);
            (0..nf - 1)
                .map(|_| -> f64 { StandardNormal.sample(&mut rng) })
                .collect::<Vec<f64>>()
        })
        .collect();

    xs.par_iter()
        .map(|&x| kernel_at_probe(problem, alpha, &knots, &fine, sub, &fine_laws, &prepared_psi, &tw, &bhat, const_drift.as_deref(), x, n_probe, nf, nk, &dws))
        .collect()
}

/// Score-weighted channel sum for one probe point.
#[allow(clippy::too_many_arguments)]
fn kernel_at_probe(
    problem: &MfcProblem,
    alpha: &FeedbackControl,
    knots: &[f64],
    fine: &[f64],
    sub: usize,
    fine_laws: &[DiscreteMeasure],
    prepared_psi: &crate::functional::PreparedPsi,
    tw: &[f64],
    bhat: &dyn Fn(usize, f64) -> Result<f64>,
    const_drift: Option<&[f64]>,
    x: f64,
    n_probe: usize,
    nf: usize,
    nk: usize,
    dws: &[f64],
) -> Result<(f64, f64)> {
    let t = knots[0];
    let fd_step = 1e-3 * (1.0 + x.abs());
    let needs_fd = const_drift.is_none();
    let n_steps = nf - 1;

    let mut knot_states = vec![0.0; n_probe * nk];
    let mut knot_states_fd = if needs_fd { vec![0.0; n_probe * nk] } else { Vec::new() };
    for i in 0..n_probe {
        let pair = i / 2;
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        let (mut a, mut b) = (x, x + fd_step);
        knot_states[i * nk] = a;
        if needs_fd {
            knot_states_fd[i * nk] = b;
        }
        for s in 0..n_steps {
            let ds = fine[s + 1] - fine[s];
            let dw = sign * dws[pair * n_steps + s] * ds.sqrt();
            match const_drift {
                Some(c) => {
                    a += c[s] * ds + dw;
                }
                None => {
                    a += bhat(s, a)? * ds + dw;
                    b += bhat(s, b)? * ds + dw;
                }
            }
            if (s + 1) % sub == 0 {
                let r = (s + 1) / sub;
                knot_states[i * nk + r] = a;
                if needs_fd {
                    knot_states_fd[i * nk + r] = b;
                }
            }
        }
    }

    // Score weights per (path, knot >= 1): exact Gaussian against the
    // deterministic mean shift, or a common-random-number finite difference
    // of the kernel-smoothed log density in the starting point.
    let mut weights = vec![0.0; n_probe * nk];
    if let Some(c) = const_drift {
        let mut shift = 0.0;
        let mut shifts = vec![0.0; nk];
        for s in 0..n_steps {
            shift += c[s] * (fine[s + 1] - fine[s]);
            if (s + 1) % sub == 0 {
                shifts[(s + 1) / sub] = shift;
            }
        }
        for r in 1..nk {
            let tau = knots[r] - t;
            for i in 0..n_probe {
                weights[i * nk + r] = (knot_states[i * nk + r] - x - shifts[r]) / tau;
            }
        }
    } else {
        for r in 1..nk {
            let cloud: Vec<f64> = (0..n_probe).map(|i| knot_states[i * nk + r]).collect();
            let cloud_fd: Vec<f64> = (0..n_probe).map(|i| knot_states_fd[i * nk + r]).collect();
            let bw = silverman_bandwidth(&cloud)?;
            let log_kde = |cloud: &[f64], v: f64| -> f64 {
                let s: f64 = cloud.iter().map(|&c| (-0.5 * ((v - c) / bw).powi(2)).exp()).sum();
                s.max(1e-300).ln()
            };
            for i in 0..n_probe {
                let v = knot_states[i * nk + r];
                weights[i * nk + r] = (log_kde(&cloud_fd, v) - log_kde(&cloud, v)) / fd_step;
            }
        }
    }

    // Insertion channel of the measure-free running reward at knot r.
    let g = |r: usize, v: f64| -> f64 {
        let s = knots[r];
        let law = &fine_laws[r * sub];
        (problem.l)(s, v, law, alpha.eval(s, v, law))
    };
    let term0 = tw[0] * (g(0, x + SPATIAL_STEP) - g(0, x - SPATIAL_STEP)) / (2.0 * SPATIAL_STEP);

    let totals: Vec<f64> = (0..n_probe)
        .map(|i| {
            let mut acc = 0.0;
            for r in 1..nk {
                acc += tw[r] * g(r, knot_states[i * nk + r]) * weights[i * nk + r];
            }
            acc + prepared_psi.flat(knot_states[i * nk + nk - 1]) * weights[i * nk + nk - 1]
        })
        .collect();

    let pairs = n_probe / 2;
    let means: Vec<f64> = (0..pairs).map(|p| 0.5 * (totals[2 * p] + totals[2 * p + 1])).collect();
    let mean = means.iter().sum::<f64>() / pairs as f64;
    let se = if pairs > 1 {
        let var = means.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (pairs as f64 - 1.0);
        (var / pairs as f64).sqrt()
    } else {
        f64::NAN
    };
    Ok((term0 + mean, se))
}

/// The entropic benchmark: `L = -a^2/2`, `b = a`, actions on `[-3, 3]`, and
/// a given smooth terminal functional. Its Hamiltonian supremum
/// `sup_a (za - a^2/2) = z^2/2` matches the quadratic generator on
/// `|z| <= 3`, so wherever the kernel stays inside the action hull the
/// problem's value map coincides with the Gibbs fixed-point solution.
pub fn entropic_problem(psi: TerminalFunctional, horizon: f64) -> Result<MfcProblem> {
    let name = format!("entropic:{}", psi.name);
    MfcProblem::new(
        name,
        horizon,
        Arc::new(|_, _, _: &DiscreteMeasure, a: f64| -0.5 * a * a),
        Arc::new(|_, _, _: &DiscreteMeasure, a: f64| a),
        ActionGrid::new(-3.0, 3.0, 61)?,
        psi,
        MfcBounds { l_bound: 4.5, b_bound: 3.0, dm_l_bound: 0.0 },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explicit::quadratic_wbsde_solution;
    use crate::functional::functional_from_config;
    use crate::quad::{gauss_hermite, gh_expect};
    use crate::solution::Provenance;
    use serde_json::json;

    fn tanh_linear() -> TerminalFunctional {
        functional_from_config("tanh-linear", &json!({"scale": 1.0})).unwrap()
    }

    fn quick_sim(n_paths: usize, seed: u64) -> MfcSim {
        let mut sim = MfcSim::new(n_paths, seed);
        sim.n_picard = 0;
        sim
    }

    /// `b = const, L = L(t, x)`: the value is the same for every policy.
    fn control_irrelevant(drift: f64, horizon: f64) -> MfcProblem {
        MfcProblem::new(
            "control-irrelevant",
            horizon,
            Arc::new(|_, x: f64, _: &DiscreteMeasure, _| 0.4 * x.tanh()),
            Arc::new(move |_, _, _: &DiscreteMeasure, _| drift),
            ActionGrid::new(-1.0, 1.0, 21).unwrap(),
            tanh_linear(),
            MfcBounds { l_bound: 0.4, b_bound: drift.abs(), dm_l_bound: 0.0 },
        )
        .unwrap()
    }

    /// Closed-form solution of the control-irrelevant problem by Gaussian
    /// quadrature: `Y(t, m) = <u(t, .), m>` with
    /// `u(t, x) = int_t^T E[L(x + c(s-t) + W_{s-t})] ds + E[g(x + c tau + W_tau)]`
    /// on the same trapezoid grid the policy evaluation uses.
    fn control_irrelevant_solution(drift: f64, horizon: f64, flow_dt: f64) -> WbsdeSolution {
        let (gn, gw) = gauss_hermite(64).unwrap();
        let u = move |t: f64, x: f64, gn: &[f64], gw: &[f64]| -> f64 {
            let mut acc = 0.0;
            // The running window is empty at the terminal knot.
            if horizon - t > 1e-12 {
                let times = uniform_grid(t, horizon, flow_dt).unwrap();
                let tw = trapezoid_weights(&times, 0);
                for (k, &s) in times.iter().enumerate() {
                    let tau = s - t;
                    acc += tw[k]
                        * 0.4
                        * gh_expect(gn, gw, x + drift * tau, tau.max(0.0).sqrt(), f64::tanh);
                }
            }
            let tau = (horizon - t).max(0.0);
            acc + gh_expect(gn, gw, x + drift * tau, tau.sqrt(), f64::tanh)
        };
        let du = move |t: f64, x: f64, gn: &[f64], gw: &[f64]| -> f64 {
            let dtanh = |v: f64| 1.0 - v.tanh() * v.tanh();
            let mut acc = 0.0;
            if horizon - t > 1e-12 {
                let times = uniform_grid(t, horizon, flow_dt).unwrap();
                let tw = trapezoid_weights(&times, 0);
                for (k, &s) in times.iter().enumerate() {
                    let tau = s - t;
                    acc += tw[k] * 0.4 * gh_expect(gn, gw, x + drift * tau, tau.max(0.0).sqrt(), dtanh);
                }
            }
            let tau = (horizon - t).max(0.0);
            acc + gh_expect(gn, gw, x + drift * tau, tau.sqrt(), dtanh)
        };
        let (gn_y, gw_y) = (gn.clone(), gw.clone());
        let y = move |t: f64, m: &DiscreteMeasure| -> Result<f64> {
            Ok(m.integrate(|x| u(t, x, &gn_y, &gw_y)))
        };
        let z = move |t: f64, xs: &[f64], _m: &DiscreteMeasure| -> Result<Vec<f64>> {
            Ok(xs.iter().map(|&x| du(t, x, &gn, &gw)).collect())
        };
        WbsdeSolution::new(0.0, horizon, Provenance::Classical, y, z)
    }

    #[test]
    fn argmax_recovers_the_clipped_maximizer_for_the_entropic_hamiltonian() {
        let problem = entropic_problem(tanh_linear(), 0.5).unwrap();
        let m = DiscreteMeasure::dirac(0.0);
        for z in [-5.0, -1.23, -0.04, 0.0, 0.7, 2.96, 3.0, 4.2] {
            let a = problem.argmax_action(0.1, 0.3, &m, z);
            assert!(
                (a - z.clamp(-3.0, 3.0)).abs() <= 1e-9,
                "argmax at z={z} gave {a}"
            );
        }
    }

    #[test]
    fn zero_reward_and_constant_terminal_give_the_constant_value() {
        let psi = TerminalFunctional::from_eval("const", |_| 0.7, true, 0.7);
        let problem = MfcProblem::new(
            "flat",
            0.4,
            Arc::new(|_, _, _: &DiscreteMeasure, _| 0.0),
            Arc::new(|_, _, _: &DiscreteMeasure, _| 0.4),
            ActionGrid::new(-1.0, 1.0, 5).unwrap(),
            psi,
            MfcBounds { l_bound: 0.0, b_bound: 0.4, dm_l_bound: 0.0 },
        )
        .unwrap();
        let nu = DiscreteMeasure::uniform(vec![0.0, 1.0]).unwrap();
        let alpha = FeedbackControl::constant("zero", &problem.actions, 0.0);
        let mut sim = MfcSim::new(200, 7);
        sim.flow_dt = 0.05;
        sim.mkv_tol = 1e-12; // the one-pass coupling is already the fixed point
        let (j, se) = evaluate_control(&problem, 0.0, &nu, &alpha, &sim).unwrap();
        assert!((j - 0.7).abs() <= 1e-12, "J = {j}");
        assert_eq!(se, 0.0);
    }

    #[test]
    fn uncontrolled_value_matches_direct_quadrature() {
        let problem = MfcProblem::new(
            "driftless",
            0.6,
            Arc::new(|_, x: f64, _: &DiscreteMeasure, _| 0.5 * x.tanh()),
            Arc::new(|_, _, _: &DiscreteMeasure, _| 0.0),
            ActionGrid::new(-1.0, 1.0, 11).unwrap(),
            tanh_linear(),
            MfcBounds { l_bound: 0.5, b_bound: 0.0, dm_l_bound: 0.0 },
        )
        .unwrap();
        let nu = DiscreteMeasure::uniform(vec![-0.5, 0.4]).unwrap();
        let alpha = FeedbackControl::constant("any", &problem.actions, 0.3);
        let sim = quick_sim(4000, 11);
        let (j, se) = evaluate_control(&problem, 0.0, &nu, &alpha, &sim).unwrap();

        let (gn, gw) = gauss_hermite(64).unwrap();
        let times = uniform_grid(0.0, 0.6, sim.flow_dt).unwrap();
        let tw = trapezoid_weights(&times, 0);
        let mut oracle = 0.0;
        for (k, &s) in times.iter().enumerate() {
            oracle += tw[k] * 0.5 * nu.integrate(|v| gh_expect(&gn, &gw, v, s.sqrt(), f64::tanh));
        }
        oracle += nu.integrate(|v| gh_expect(&gn, &gw, v, 0.6f64.sqrt(), f64::tanh));
        assert!(
            (j - oracle).abs() <= 3.0 * se,
            "J = {j}, oracle = {oracle}, se = {se}"
        );
    }

    #[test]
    fn entropic_zero_control_matches_quadrature() {
        let problem = entropic_problem(tanh_linear(), 0.5).unwrap();
        let nu = DiscreteMeasure::uniform(vec![-0.2, 0.3]).unwrap();
        let alpha = FeedbackControl::constant("off", &problem.actions, 0.0);
        let sim = quick_sim(4000, 19);
        let (j, se) = evaluate_control(&problem, 0.0, &nu, &alpha, &sim).unwrap();
        let (j2, se2) = value_from_control(&problem, &alpha, 0.0, &nu, &sim).unwrap();
        assert_eq!(j, j2);
        assert_eq!(se, se2);

        // L vanishes at a = 0, so the value is the heat-convolved terminal.
        let (gn, gw) = gauss_hermite(64).unwrap();
        let oracle = nu.integrate(|v| gh_expect(&gn, &gw, v, 0.5f64.sqrt(), f64::tanh));
        assert!(
            (j - oracle).abs() <= 3.0 * se,
            "J = {j}, oracle = {oracle}, se = {se}"
        );
    }

    #[test]
    fn control_irrelevant_problem_ties_all_challengers() {
        let problem = control_irrelevant(0.25, 0.4);
        let sol = control_irrelevant_solution(0.25, 0.4, 0.02);
        let nu = DiscreteMeasure::uniform(vec![-0.3, 0.5]).unwrap();
        let mut sim = MfcSim::new(2000, 23);
        sim.n_picard = 1;
        sim.mkv_tol = 1e-12; // gap must be exactly zero for a state-free drift
        let report = verify_optimality(&problem, &sol, 0.0, &nu, 6, &sim, 0.05).unwrap();
        assert!(report.pass, "report: {report:?}");
        for rec in &report.challengers {
            assert!(
                rec.delta.abs() <= 1e-12,
                "challenger {} ({}) moved the value by {}",
                rec.id,
                rec.kind,
                rec.delta
            );
        }
    }

    #[test]
    fn entropic_feedback_passes_the_optimality_verification() {
        let problem = entropic_problem(tanh_linear(), 0.5).unwrap();
        let sol = quadratic_wbsde_solution(&problem.psi, 0.5, 512, 1.0, 1e-9, 80).unwrap();
        let nu = DiscreteMeasure::dirac(0.0);
        let sim = quick_sim(4000, 29);
        let report = verify_optimality(&problem, &sol, 0.0, &nu, 8, &sim, 0.02).unwrap();
        assert!(report.value_pass, "|Y - J| = {} (Y = {}, J = {})", report.gap, report.y, report.j_opt);
        assert!(report.challenger_pass, "max challenger delta {}", report.max_delta);
        assert!(report.pass);
        assert_eq!(report.challengers[0].kind, "negated");

        let js = report.to_json().unwrap();
        for key in ["\"J_opt\"", "\"Y\"", "\"gap\"", "\"challengers\"", "\"pass\"", "\"delta\""] {
            assert!(js.contains(key), "missing {key} in {js}");
        }
    }

    #[test]
    fn negated_kernel_is_caught_by_the_challenger_tournament() {
        let problem = entropic_problem(tanh_linear(), 0.5).unwrap();
        let sol = quadratic_wbsde_solution(&problem.psi, 0.5, 512, 1.0, 1e-9, 80).unwrap();
        let wrong = {
            let s = sol.clone();
            let sy = sol.clone();
            WbsdeSolution::new(
                0.0,
                0.5,
                Provenance::Quadratic,
                move |t, m| sy.y(t, m),
                move |t, xs: &[f64], m| Ok(s.z_batch(t, xs, m)?.into_iter().map(|z| -z).collect()),
            )
        };
        let nu = DiscreteMeasure::uniform(vec![-0.4, 0.0, 0.6]).unwrap();
        let sim = quick_sim(4000, 31);
        let report = verify_optimality(&problem, &wrong, 0.0, &nu, 4, &sim, 0.02).unwrap();
        assert!(!report.pass, "a negated kernel must not verify: {report:?}");
        let negated = &report.challengers[0];
        assert_eq!(negated.kind, "negated");
        assert!(
            negated.delta > 2.0 * negated.stderr,
            "the sign-restored challenger should win decisively, delta = {}, stderr = {}",
            negated.delta,
            negated.stderr
        );
    }

    #[test]
    fn weak_dynamic_programming_profile_is_flat_for_the_optimal_feedback() {
        let problem = entropic_problem(tanh_linear(), 0.5).unwrap();
        let sol = quadratic_wbsde_solution(&problem.psi, 0.5, 512, 1.0, 1e-9, 80).unwrap();
        let nu = DiscreteMeasure::uniform(vec![-0.1, 0.2]).unwrap();
        let sim = quick_sim(3000, 37);
        let (alpha_hat, flow) = feedback_from_z(&problem, &sol, 0.0, &nu, &sim).unwrap();
        let (profile, se) = weak_dpp_profile(&problem, &sol, &alpha_hat, &flow, &sim).unwrap();
        let drift: f64 =
            profile.iter().map(|v| (v - profile[0]).abs()).fold(0.0, f64::max);
        assert!(
            drift <= 3.0 * se + 0.03,
            "profile drifts by {drift} (se = {se}): {profile:?}"
        );
    }

    #[test]
    fn reward_shift_leaves_challenger_ordering_unchanged() {
        let horizon = 0.3;
        let mut reports = Vec::new();
        for shift in [0.0, 1.0] {
            let problem = MfcProblem::new(
                "entropic-shifted",
                horizon,
                Arc::new(move |_, _, _: &DiscreteMeasure, a: f64| shift - 0.5 * a * a),
                Arc::new(|_, _, _: &DiscreteMeasure, a: f64| a),
                ActionGrid::new(-3.0, 3.0, 61).unwrap(),
                tanh_linear(),
                MfcBounds { l_bound: 4.5 + shift, b_bound: 3.0, dm_l_bound: 0.0 },
            )
            .unwrap();
            // The Hamiltonian argmax is shift-invariant, so the same kernel
            // synthesizes the same feedback for both problems.
            let sol = quadratic_wbsde_solution(&problem.psi, horizon, 256, 1.0, 1e-9, 80).unwrap();
            let nu = DiscreteMeasure::uniform(vec![-0.2, 0.4]).unwrap();
            let mut sim = quick_sim(800, 41);
            sim.flow_dt = 0.05;
            reports.push(verify_optimality(&problem, &sol, 0.0, &nu, 5, &sim, 0.1).unwrap());
        }
        let (base, shifted) = (&reports[0], &reports[1]);
        for (a, b) in base.challengers.iter().zip(&shifted.challengers) {
            assert!(
                (a.delta - b.delta).abs() <= 1e-12,
                "challenger {} delta moved from {} to {} under a reward shift",
                a.id,
                a.delta,
                b.delta
            );
        }
    }

    #[test]
    fn synthesized_feedback_is_stable_across_seeds() {
        let problem = entropic_problem(tanh_linear(), 0.4).unwrap();
        let sol = quadratic_wbsde_solution(&problem.psi, 0.4, 512, 1.0, 1e-9, 80).unwrap();
        let nu = DiscreteMeasure::uniform(vec![-0.3, 0.5]).unwrap();
        let (fb1, _) = feedback_from_z(&problem, &sol, 0.0, &nu, &quick_sim(3000, 101)).unwrap();
        let (fb2, _) = feedback_from_z(&problem, &sol, 0.0, &nu, &quick_sim(3000, 202)).unwrap();
        for x in [-1.0, -0.3, 0.0, 0.5, 1.0] {
            let (a1, a2) = (fb1.eval(0.0, x, &nu), fb2.eval(0.0, x, &nu));
            assert!(
                (a1 - a2).abs() <= 0.05,
                "feedback at x={x} differs across seeds: {a1} vs {a2}"
            );
        }
    }

    #[test]
    fn synthesized_feedback_recovers_the_clipped_kernel() {
        let problem = entropic_problem(tanh_linear(), 0.4).unwrap();
        let sol = quadratic_wbsde_solution(&problem.psi, 0.4, 512, 1.0, 1e-9, 80).unwrap();
        let nu = DiscreteMeasure::uniform(vec![-0.1, 0.2]).unwrap();
        let sim = quick_sim(3000, 43);
        let (fb, flow) = feedback_from_z(&problem, &sol, 0.0, &nu, &sim).unwrap();
        let m0 = thin_measure(&flow.marginal(0), sim.thin_atoms).unwrap();
        for x in [-0.8, 0.0, 0.7] {
            let z = sol.z(0.0, x, &m0).unwrap();
            let a = fb.eval(0.0, x, &nu);
            assert!(
                (a - z.clamp(-3.0, 3.0)).abs() <= 0.02,
                "feedback at x={x} is {a}, clipped kernel is {}",
                z.clamp(-3.0, 3.0)
            );
        }
    }

    #[test]
    fn hamiltonian_feedback_is_consistent_along_the_realized_flow() {
        let problem = entropic_problem(tanh_linear(), 0.4).unwrap();
        let sol = quadratic_wbsde_solution(&problem.psi, 0.4, 512, 1.0, 1e-9, 80).unwrap();
        let nu = DiscreteMeasure::uniform(vec![-0.2, 0.3]).unwrap();
        let sim = quick_sim(2000, 47);
        let (fb, flow) = feedback_from_z(&problem, &sol, 0.0, &nu, &sim).unwrap();
        let times = flow.times();
        for k in [0, times.len() / 2] {
            let m = flow.marginal(k);
            let thin = thin_measure(&m, sim.thin_atoms).unwrap();
            let qv = thin.quantiles();
            let xs: Vec<f64> = (0..8).map(|j| qv.quantile((j as f64 + 0.5) / 8.0)).collect();
            let zs = sol.z_batch(times[k], &xs, &thin).unwrap();
            for (&x, &z) in xs.iter().zip(&zs) {
                let direct = problem.argmax_action(times[k], x, &thin, z);
                let used = fb.eval(times[k], x, &m);
                assert!(
                    (direct - used).abs() <= 0.03,
                    "at (t={}, x={x}): direct argmax {direct}, feedback {used}",
                    times[k]
                );
            }
        }
    }

    #[test]
    fn kernel_assembly_matches_quadrature_for_a_state_free_drift() {
        let problem = MfcProblem::new(
            "shifted-heat",
            0.5,
            Arc::new(|_, x: f64, _: &DiscreteMeasure, _| 0.5 * x.tanh()),
            Arc::new(|_, _, _: &DiscreteMeasure, _| 0.3),
            ActionGrid::new(-1.0, 1.0, 11).unwrap(),
            tanh_linear(),
            MfcBounds { l_bound: 0.5, b_bound: 0.3, dm_l_bound: 0.0 },
        )
        .unwrap();
        let nu = DiscreteMeasure::uniform(vec![-0.4, 0.6]).unwrap();
        let alpha = FeedbackControl::constant("any", &problem.actions, 0.2);
        let mut sim = quick_sim(2000, 53);
        sim.kernel_paths = 2000;
        let xs = [-0.5, 0.2, 0.9];
        let out = optimal_kernel(&problem, &alpha, 0.0, &nu, &xs, &sim).unwrap();

        let (gn, gw) = gauss_hermite(64).unwrap();
        let knots = uniform_grid(0.0, 0.5, sim.knot_dt).unwrap();
        let tw = trapezoid_weights(&knots, 0);
        let dtanh = |v: f64| 1.0 - v.tanh() * v.tanh();
        for (&x, &(z, se)) in xs.iter().zip(&out) {
            let mut oracle = 0.0;
            for (r, &s) in knots.iter().enumerate() {
                oracle += tw[r] * 0.5 * gh_expect(&gn, &gw, x + 0.3 * s, s.sqrt(), dtanh);
            }
            oracle += gh_expect(&gn, &gw, x + 0.3 * 0.5, 0.5f64.sqrt(), dtanh);
            assert!(
                (z - oracle).abs() <= 3.0 * se + 2e-3,
                "kernel at x={x}: {z} vs oracle {oracle} (se = {se})"
            );
        }
    }

    #[test]
    fn declared_measure_derivative_without_data_is_a_capability_error() {
        let mut problem = control_irrelevant(0.2, 0.4);
        problem.bounds.dm_l_bound = 0.5;
        let nu = DiscreteMeasure::uniform(vec![0.0, 0.4]).unwrap();
        let alpha = FeedbackControl::constant("any", &problem.actions, 0.0);
        let sim = quick_sim(500, 59);
        let err = optimal_kernel(&problem, &alpha, 0.0, &nu, &[0.0], &sim).unwrap_err();
        assert!(matches!(err, Error::Capability(_)), "got {err:?}");
        // Value mode stays available.
        let (j, _) = value_from_control(&problem, &alpha, 0.0, &nu, &sim).unwrap();
        assert!(j.is_finite());
    }

    #[test]
    fn entropic_value_from_the_optimal_control_matches_the_fixed_point() {
        let problem = entropic_problem(tanh_linear(), 0.5).unwrap();
        let sol = quadratic_wbsde_solution(&problem.psi, 0.5, 512, 1.0, 1e-9, 80).unwrap();
        let nu = DiscreteMeasure::dirac(0.0);
        let sim = quick_sim(4000, 61);
        let (alpha_hat, _) = feedback_from_z(&problem, &sol, 0.0, &nu, &sim).unwrap();
        let (y_hat, _) = value_from_control(&problem, &alpha_hat, 0.0, &nu, &sim).unwrap();
        let y = sol.y(0.0, &nu).unwrap();
        assert!(
            (y_hat - y).abs() <= 0.02,
            "reconstructed value {y_hat} vs fixed point {y}"
        );
    }

}
