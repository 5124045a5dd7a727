//! Picard fixed-point solver for separable generators `h(t, m, y) + P(t, x) z`:
//! the value map is iterated through the backward operator along drift-`P`
//! flows and represented as a linear model on measure features, the kernel
//! is assembled from score-weighted flat-derivative expectations, arbitrary
//! horizons are reached by concatenating short intervals, and the reduced
//! backward operator supplies an independent fixed-point verifier.

use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{silverman_bandwidth, simulate_flow, uniform_grid, DriftFn};
use crate::functional::{
    GeneratorKind, GeneratorSpec, PreparedPsi, SeparableBounds, SeparableSpec, SmoothFn,
    TerminalFunctional,
};
use crate::linreg;
use crate::measure::DiscreteMeasure;
use crate::quad::{trapezoid, trapezoid_weights};
use crate::rng::{mix_key, path_rng, stream_rng, substream};
use crate::solution::{Provenance, WbsdeSolution};

/// Single-shot solving is allowed only when `span * Lip_y(h)` stays below
/// this margin; the backward operator is then a strict sup-norm contraction
/// with room to spare. Longer windows must be split in time.
pub const SMALLNESS_MARGIN: f64 = 0.9;

/// Mixture weight for finite-difference flat derivatives of fitted or
/// opaque value maps, matching the measure library's default probe size.
const FLAT_EPS: f64 = 1e-3;

/// Central-difference step for spatial derivatives of flat-derivative maps.
const SPATIAL_STEP: f64 = 1e-3;

const TERMINAL_EPS: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Measure feature map
// ---------------------------------------------------------------------------

/// Linear model for a map `(t, m) -> real`: per-knot coefficients on the
/// feature vector `[1, m_1, m_2, m_3, m_4, <g_1, m>, ...]` (intercept, raw
/// moments one to four, and the configured test-function integrals), with
/// linear interpolation between knots.
#[derive(Clone)]
pub struct MeasureFeatureMap {
    time_knots: Vec<f64>,
    test_fns: Vec<SmoothFn>,
    coefficients: Vec<Vec<f64>>,
}

impl MeasureFeatureMap {
    pub fn new(time_knots: Vec<f64>, test_fns: Vec<SmoothFn>) -> Result<Self> {
        if time_knots.len() < 2 {
            return Err(Error::InvalidInput("feature map needs at least two knots".into()));
        }
        for w in time_knots.windows(2) {
            if w[1] - w[0] <= 0.0 {
                return Err(Error::InvalidInput("feature-map knots must increase".into()));
            }
        }
        let n = time_knots.len();
        let k = 5 + test_fns.len();
        Ok(Self { time_knots, test_fns, coefficients: vec![vec![0.0; k]; n] })
    }

    pub fn n_features(&self) -> usize {
        5 + self.test_fns.len()
    }

    pub fn knots(&self) -> &[f64] {
        &self.time_knots
    }

    pub fn coefficients(&self) -> &[Vec<f64>] {
        &self.coefficients
    }

    pub fn set_knot(&mut self, k: usize, coef: Vec<f64>) -> Result<()> {
        if coef.len() != self.n_features() {
            return Err(Error::InvalidInput(format!(
                "knot {k}: expected {} coefficients, got {}",
                self.n_features(),
                coef.len()
            )));
        }
        self.coefficients[k] = coef;
        Ok(())
    }

    /// Feature vector of a measure; finite for every finite measure.
    pub fn features(&self, m: &DiscreteMeasure) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.n_features());
        f.push(1.0);
        for a in 1..=4u32 {
            f.push(m.raw_moment(a));
        }
        for g in &self.test_fns {
            f.push(m.integrate(|x| g.eval(x)));
        }
        f
    }

    /// Feature vector of a unit mass at `v`, used by mixture shortcuts.
    pub fn dirac_features(&self, v: f64) -> Vec<f64> {
        let mut f = vec![1.0, v, v * v, v * v * v, v * v * v * v];
        for g in &self.test_fns {
            f.push(g.eval(v));
        }
        f
    }

    /// Knot index at or below `t` plus the interpolation weight; `t` is
    /// clamped to the knot window.
    fn locate(&self, t: f64) -> (usize, f64) {
        let ts = &self.time_knots;
        let last = ts.len() - 1;
        if t >= ts[last] - 1e-12 {
            return (last, 0.0);
        }
        if t <= ts[0] {
            return (0, 0.0);
        }
        let k = ts.iter().rposition(|&u| u <= t + 1e-12).unwrap_or(0).min(last - 1);
        (k, ((t - ts[k]) / (ts[k + 1] - ts[k])).clamp(0.0, 1.0))
    }

    /// Prediction from an explicit feature vector.
    pub fn eval_features(&self, t: f64, feats: &[f64]) -> f64 {
        let (k, w) = self.locate(t);
        let v = linreg::predict(&self.coefficients[k], feats);
        if w > 0.0 {
            (1.0 - w) * v + w * linreg::predict(&self.coefficients[k + 1], feats)
        } else {
            v
        }
    }

    pub fn eval(&self, t: f64, m: &DiscreteMeasure) -> f64 {
        self.eval_features(t, &self.features(m))
    }

    /// Flat derivative of the fitted map at `(t, base)` probed at `v`, by the
    /// finite-difference quotient through the mixture `(1-eps) m + eps d_v`.
    /// Mixture features mix linearly, so the quotient is evaluated from
    /// `base` and `dirac_features(v)` without rebuilding measures, and the
    /// result is exact for this model class at any `eps`.
    pub fn flat(&self, t: f64, base_feats: &[f64], dirac_feats: &[f64]) -> f64 {
        let mixed: Vec<f64> = base_feats
            .iter()
            .zip(dirac_feats)
            .map(|(&b, &d)| (1.0 - FLAT_EPS) * b + FLAT_EPS * d)
            .collect();
        (self.eval_features(t, &mixed) - self.eval_features(t, base_feats)) / FLAT_EPS
    }
}

// ---------------------------------------------------------------------------
// Simulation parameters and training corpus
// ---------------------------------------------------------------------------

/// Monte Carlo parameters for the Picard solver and its kernel assembly.
#[derive(Clone, Debug)]
pub struct PicardSim {
    /// Paths per inner flow.
    pub n_paths: usize,
    /// Spacing of the value map's time knots.
    pub knot_dt: f64,
    /// Euler step for the inner flows (each knot interval is subdivided).
    pub flow_dt: f64,
    pub seed: u64,
    /// Test functions for the `<g_i, m>` features; empty means `tanh`.
    pub test_fns: Vec<SmoothFn>,
}

impl Default for PicardSim {
    fn default() -> Self {
        Self { n_paths: 1000, knot_dt: 0.1, flow_dt: 0.02, seed: 0, test_fns: Vec::new() }
    }
}

impl PicardSim {
    fn effective_test_fns(&self) -> Vec<SmoothFn> {
        if self.test_fns.is_empty() {
            vec![SmoothFn::tanh()]
        } else {
            self.test_fns.clone()
        }
    }

    /// Sub-steps per knot interval.
    fn refine(&self) -> usize {
        (self.knot_dt / self.flow_dt).ceil().max(1.0) as usize
    }
}

/// Default training corpus: twenty Gaussians and two-component mixtures with
/// means in [-2, 2] and standard deviations in [0.3, 2], sixty-four atoms
/// each, drawn reproducibly from the seed.
pub fn default_training_measures(seed: u64) -> Vec<DiscreteMeasure> {
    let mut rng = stream_rng(seed, "picard-training");
    let mut out = Vec::with_capacity(20);
    for j in 0..20 {
        let mean = rng.gen_range(-2.0..2.0);
        let sd = rng.gen_range(0.3..2.0);
        let (mean2, sd2) = (rng.gen_range(-2.0..2.0), rng.gen_range(0.3..2.0));
        let mixture = j % 2 == 1;
        let atoms: Vec<f64> = (0..64)
            .map(|_| {
                let w: f64 = StandardNormal.sample(&mut rng);
                if mixture && rng.gen_bool(0.5) {
                    mean2 + sd2 * w
                } else {
                    mean + sd * w
                }
            })
            .collect();
        out.push(DiscreteMeasure::uniform(atoms).expect("non-empty atom list"));
    }
    out
}

// ---------------------------------------------------------------------------
// Smallness and contraction bookkeeping
// ---------------------------------------------------------------------------

/// The exponential weight used by the contraction norm: twice the declared
/// Lipschitz modulus of `h` in `y`, floored away from zero.
pub fn default_alpha(bounds: &SeparableBounds) -> f64 {
    (2.0 * bounds.h_lip_y).max(1e-6)
}

/// Whether `[t0, horizon]` is short enough for a single-shot solve under the
/// declared Lipschitz modulus.
pub fn smallness_ok(bounds: &SeparableBounds, t0: f64, horizon: f64) -> bool {
    (horizon - t0) * bounds.h_lip_y < SMALLNESS_MARGIN
}

/// Smallest interval count whose subintervals all pass [`smallness_ok`].
pub fn required_intervals(bounds: &SeparableBounds, t0: f64, horizon: f64) -> usize {
    let span = horizon - t0;
    if span <= 0.0 || bounds.h_lip_y == 0.0 {
        return 1;
    }
    (span * bounds.h_lip_y / SMALLNESS_MARGIN).ceil().max(1.0) as usize
}

/// One line of the iteration log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PicardIterRecord {
    pub iter: usize,
    pub gap: f64,
    /// Ratio to the previous gap; non-finite on the first iteration.
    pub rho: f64,
    pub wall_ms: u128,
}

/// Converged value map with its convergence record.
#[derive(Clone)]
pub struct PicardYMap {
    map: MeasureFeatureMap,
    pub t0: f64,
    pub horizon: f64,
    /// A priori bound `|psi| + span * |h|`; evaluations are clamped to it.
    pub value_bound: f64,
    pub iterations: usize,
    pub gaps: Vec<f64>,
    /// Largest observed gap ratio after the second iteration.
    pub rho: f64,
    log: Vec<PicardIterRecord>,
}

impl PicardYMap {
    /// Clamped model evaluation; `t` outside the window is clamped to it.
    pub fn eval(&self, t: f64, m: &DiscreteMeasure) -> f64 {
        self.map.eval(t, m).clamp(-self.value_bound, self.value_bound)
    }

    pub fn feature_map(&self) -> &MeasureFeatureMap {
        &self.map
    }

    pub fn log(&self) -> &[PicardIterRecord] {
        &self.log
    }

    /// Iteration log as JSON lines (one object per iteration).
    pub fn log_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in &self.log {
            out.push_str(&serde_json::to_string(rec).expect("plain record serializes"));
            out.push('\n');
        }
        out
    }
}

impl std::fmt::Debug for PicardYMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PicardYMap")
            .field("t0", &self.t0)
            .field("horizon", &self.horizon)
            .field("iterations", &self.iterations)
            .field("rho", &self.rho)
            .finish()
    }
}

// ---------------------------------------------------------------------------
// The Picard iteration
// ---------------------------------------------------------------------------

/// Flow data for one (knot, training measure) pair: marginals at the knots
/// from that knot to the horizon, their feature vectors, and the terminal
/// functional value. Flows do not depend on the iterate, so they are built
/// once and every sweep reuses them (common random numbers by construction).
struct InnerFlowData {
    marginals: Vec<DiscreteMeasure>,
    feats: Vec<Vec<f64>>,
    psi_terminal: f64,
}

/// Iterates the backward operator
/// `(Gamma y)(t, m) = psi(law_T) + int_t^T h(r, law_r, y(r, law_r)) dr`
/// along the drift-`P` flow started at `(t, m)`, refitting the value map on
/// the training measures each sweep, until the `e^{alpha (t - t0)}`-weighted
/// sup gap over knots and training measures drops below `tol`.
///
/// Preconditions: `alpha` above the declared Lipschitz modulus of `h` in
/// `y`, and the window short enough for [`smallness_ok`]; longer horizons
/// must go through [`solve_separable_chain`]. An empty `training` slice
/// selects [`default_training_measures`].
///
/// Budget exhaustion with geometrically shrinking gaps reports the iteration
/// count and final gap; non-geometric gaps report the whole gap sequence as
/// a configuration diagnostic.
#[allow(clippy::too_many_arguments)]
pub fn picard_solve_y(
    spec: &SeparableSpec,
    psi: &TerminalFunctional,
    t0: f64,
    horizon: f64,
    training: &[DiscreteMeasure],
    alpha: f64,
    tol: f64,
    max_iter: usize,
    sim: &PicardSim,
) -> Result<PicardYMap> {
    if !(horizon > t0) {
        return Err(Error::InvalidInput(format!("need horizon > t0, got [{t0}, {horizon}]")));
    }
    if !(alpha > spec.bounds.h_lip_y) {
        return Err(Error::InvalidInput(format!(
            "contraction weight alpha = {alpha} must exceed the declared Lipschitz modulus {}",
            spec.bounds.h_lip_y
        )));
    }
    if !(tol > 0.0) || max_iter < 2 {
        return Err(Error::InvalidInput("need tol > 0 and max_iter >= 2".into()));
    }
    if !smallness_ok(&spec.bounds, t0, horizon) {
        return Err(Error::Smallness(format!(
            "span {:.4} times Lipschitz modulus {:.4} reaches {:.4} >= {SMALLNESS_MARGIN}; \
             single-shot solving is refused, split the window into at least {} intervals \
             (solve_separable_chain)",
            horizon - t0,
            spec.bounds.h_lip_y,
            (horizon - t0) * spec.bounds.h_lip_y,
            required_intervals(&spec.bounds, t0, horizon)
        )));
    }
    let owned_training;
    let training = if training.is_empty() {
        owned_training = default_training_measures(substream(sim.seed, "picard-default-corpus"));
        &owned_training
    } else {
        training
    };
    let mut map =
        MeasureFeatureMap::new(uniform_grid(t0, horizon, sim.knot_dt)?, sim.effective_test_fns())?;
    let nf = map.n_features();
    if training.len() < nf {
        return Err(Error::InvalidInput(format!(
            "{} training measures cannot identify {nf} features",
            training.len()
        )));
    }
    let knots = map.knots().to_vec();
    let nk = knots.len();
    let refine = sim.refine();
    let value_bound = psi.bound + (horizon - t0) * spec.bounds.h_bound;

    // Training features and the fixed terminal fit.
    let train_feats: Vec<Vec<f64>> = training.iter().map(|m| map.features(m)).collect();
    let mut rows = Vec::with_capacity(training.len() * nf);
    for f in &train_feats {
        rows.extend_from_slice(f);
    }
    let psi_train: Vec<f64> = training.iter().map(|m| psi.eval(m)).collect();
    let terminal_coef = linreg::least_squares(&rows, &psi_train, nf)?;
    map.set_knot(nk - 1, terminal_coef)?;

    // Inner flows, one per (knot before the horizon, training measure).
    let drift = {
        let p = spec.p.clone();
        DriftFn::new("picard-inner-drift", spec.bounds.p_bound, move |t, x| p(t, x))?
    };
    let flow_seed = substream(sim.seed, "picard-inner-flows");
    let n_train = training.len();
    let flows: Vec<InnerFlowData> = (0..(nk - 1) * n_train)
        .into_par_iter()
        .map(|pair| {
            let (k, j) = (pair / n_train, pair % n_train);
            let fine = refined_grid(&knots[k..], refine);
            let flow = simulate_flow(
                &drift,
                &training[j],
                knots[k],
                &fine,
                sim.n_paths,
                mix_key(flow_seed, pair as u64),
            )?;
            let marginals: Vec<DiscreteMeasure> =
                (0..nk - k).map(|r| flow.marginal(r * refine)).collect();
            let feats = marginals.iter().map(|m| map.features(m)).collect();
            let psi_terminal = psi.eval(&marginals[nk - k - 1]);
            Ok(InnerFlowData { marginals, feats, psi_terminal })
        })
        .collect::<Result<_>>()?;

    let clamp = |v: f64| v.clamp(-value_bound, value_bound);
    let mut prev_pred: Vec<f64> = (0..(nk - 1) * n_train)
        .map(|pair| clamp(map.eval_features(knots[pair / n_train], &train_feats[pair % n_train])))
        .collect();

    let mut gaps: Vec<f64> = Vec::new();
    let mut log = Vec::new();
    let mut rho_max = f64::NAN;
    let started = Instant::now();
    for iter in 1..=max_iter {
        // Backward-operator targets on all (knot, training measure) pairs.
        let targets: Vec<f64> = (0..(nk - 1) * n_train)
            .into_par_iter()
            .map(|pair| {
                let k = pair / n_train;
                let data = &flows[pair];
                let hs: Vec<f64> = (0..nk - k)
                    .map(|r| {
                        let t_r = knots[k + r];
                        let y_r = clamp(map.eval_features(t_r, &data.feats[r]));
                        (spec.h)(t_r, &data.marginals[r], y_r)
                    })
                    .collect();
                data.psi_terminal + trapezoid(&knots[k..], &hs)
            })
            .collect();

        // Refit every interior knot.
        for k in 0..nk - 1 {
            let coef = linreg::least_squares(&rows, &targets[k * n_train..(k + 1) * n_train], nf)?;
            map.set_knot(k, coef)?;
        }

        // Weighted sup gap on the training pairs.
        let mut gap = 0.0f64;
        let mut pred = Vec::with_capacity(prev_pred.len());
        for (pair, prev) in prev_pred.iter().enumerate() {
            let (k, j) = (pair / n_train, pair % n_train);
            let v = clamp(map.eval_features(knots[k], &train_feats[j]));
            gap = gap.max(((knots[k] - t0) * alpha).exp() * (v - prev).abs());
            pred.push(v);
        }
        prev_pred = pred;

        let rho = if gaps.is_empty() { f64::NAN } else { gap / gaps.last().unwrap() };
        if iter > 2 && rho.is_finite() {
            rho_max = if rho_max.is_finite() { rho_max.max(rho) } else { rho };
        }
        gaps.push(gap);
        log.push(PicardIterRecord { iter, gap, rho, wall_ms: started.elapsed().as_millis() });

        if gap <= tol {
            return Ok(PicardYMap {
                map,
                t0,
                horizon,
                value_bound,
                iterations: iter,
                gaps,
                rho: rho_max,
                log,
            });
        }
    }

    // Budget exhausted: geometric gaps mean a genuine non-convergence at
    // this tolerance, anything else points at a misconfiguration.
    let geometric = gaps.windows(2).skip(1).all(|w| w[1] <= 0.999 * w[0]);
    if geometric {
        Err(Error::NonConvergence { iterations: max_iter, gap: *gaps.last().unwrap() })
    } else {
        let seq: Vec<String> = gaps.iter().map(|g| format!("{g:.3e}")).collect();
        Err(Error::Config(format!(
            "picard gaps are not geometric after {max_iter} sweeps: [{}]; check the declared \
             Lipschitz modulus and the contraction weight",
            seq.join(", ")
        )))
    }
}

/// `knots` refined into `refine` equal sub-steps per interval.
fn refined_grid(knots: &[f64], refine: usize) -> Vec<f64> {
    let mut fine = Vec::with_capacity((knots.len() - 1) * refine + 1);
    fine.push(knots[0]);
    for w in knots.windows(2) {
        for s in 1..=refine {
            fine.push(w[0] + (w[1] - w[0]) * s as f64 / refine as f64);
        }
    }
    fine
}

// ---------------------------------------------------------------------------
// Kernel assembly
// ---------------------------------------------------------------------------

/// Per-knot data shared by every query point of one kernel evaluation.
struct ZMeasurePrep {
    knots: Vec<f64>,
    tw: Vec<f64>,
    marginals: Vec<DiscreteMeasure>,
    base_feats: Vec<Vec<f64>>,
    y_vals: Vec<f64>,
    hdy_vals: Vec<f64>,
    prepared_psi: PreparedPsi,
}

/// Flat derivative of `h-hat(r, m) = h(r, m, Y(r, m))` at probe `v`: the
/// measure derivative of `h` plus the chain-rule term through the fitted
/// value map.
#[allow(clippy::too_many_arguments)]
fn dm_h_hat(
    spec: &SeparableSpec,
    y: &PicardYMap,
    t: f64,
    m: &DiscreteMeasure,
    base_feats: &[f64],
    y_val: f64,
    hdy_val: f64,
    v: f64,
) -> f64 {
    let direct = match &spec.dm_h {
        Some(dm) => dm(t, m, y_val, v),
        None => 0.0,
    };
    direct + hdy_val * y.feature_map().flat(t, base_feats, &y.feature_map().dirac_features(v))
}

fn require_dm_h(spec: &SeparableSpec) -> Result<()> {
    if spec.dm_h.is_none() && spec.bounds.dm_h_bound != 0.0 {
        return Err(Error::Capability(
            "h is declared measure-dependent (dm_h_bound > 0) but no flat derivative dm_h \
             was provided; supply dm_h or declare dm_h_bound = 0"
                .into(),
        ));
    }
    Ok(())
}

/// Score-weighted kernel of the separable solution at `(t, xs, m)`, with a
/// Monte Carlo standard error per point:
///
/// `Z(t, x, m) = E[ int_t^T dm-h-hat(r, law_r)(X_r^{t,x}) w_r dr
///                 + dm-psi(law_T)(X_T^{t,x}) w_T ]`
///
/// where the flow of `m` under drift `P` supplies the laws, the one-point
/// flow from `x` supplies the query paths, and the weights `w_r` are the
/// exact Gaussian score when `P` is constant or a common-random-numbers
/// kernel-density score otherwise. The time integrand at `r = t` has no
/// score limit, so that panel closes with a spatial central difference.
fn z_core(
    spec: &SeparableSpec,
    psi: &TerminalFunctional,
    y: &PicardYMap,
    sim: &PicardSim,
    t: f64,
    xs: &[f64],
    m: &DiscreteMeasure,
) -> Result<Vec<(f64, f64)>> {
    let horizon = y.horizon;
    if t < y.t0 - 1e-9 || t > horizon + 1e-9 {
        return Err(Error::InvalidInput(format!(
            "time {t} outside the solved window [{}, {horizon}]",
            y.t0
        )));
    }
    require_dm_h(spec)?;
    if t >= horizon - TERMINAL_EPS {
        let prepared = psi.prepare(m)?;
        return Ok(xs.iter().map(|&x| (prepared.flat_grad(x), 0.0)).collect());
    }

    let knots = uniform_grid(t, horizon, sim.knot_dt)?;
    let refine = sim.refine();
    let fine = refined_grid(&knots, refine);
    let nk = knots.len();
    let n_paths = (sim.n_paths.max(4) / 2) * 2; // even, for antithetic pairs

    // Flow of the measure argument under P.
    let drift = {
        let p = spec.p.clone();
        DriftFn::new("picard-z-measure-flow", spec.bounds.p_bound, move |s, v| p(s, v))?
    };
    let mflow =
        simulate_flow(&drift, m, t, &fine, sim.n_paths, substream(sim.seed, "picard-z-measure"))?;
    let marginals: Vec<DiscreteMeasure> = (0..nk).map(|r| mflow.marginal(r * refine)).collect();
    let fmap = y.feature_map();
    let base_feats: Vec<Vec<f64>> = marginals.iter().map(|mu| fmap.features(mu)).collect();
    let y_vals: Vec<f64> = (0..nk).map(|r| y.eval(knots[r], &marginals[r])).collect();
    let hdy_vals: Vec<f64> =
        (0..nk).map(|r| (spec.h_dy)(knots[r], &marginals[r], y_vals[r])).collect();
    let prepared_psi = psi.prepare(&marginals[nk - 1])?;
    let prep = ZMeasurePrep {
        tw: trapezoid_weights(&knots, 0),
        knots,
        marginals,
        base_feats,
        y_vals,
        hdy_vals,
        prepared_psi,
    };

    // Frozen standard-normal increments shared by every query point (common
    // random numbers), antithetic in pairs.
    let n_steps = fine.len() - 1;
    let noise_seed = substream(sim.seed, "picard-z-query");
    let dws: Vec<f64> = (0..n_paths / 2)
        .flat_map(|i| {
            let mut rng = path_rng(noise_seed, i as u64);
            (0..n_steps).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>()
        })
        .collect();

    xs.par_iter()
        .map(|&x| z_single_point(spec, y, &prep, &fine, refine, t, x, &dws, n_paths))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn z_single_point(
    spec: &SeparableSpec,
    y: &PicardYMap,
    prep: &ZMeasurePrep,
    fine: &[f64],
    refine: usize,
    t: f64,
    x: f64,
    dws: &[f64],
    n_paths: usize,
) -> Result<(f64, f64)> {
    let nk = prep.knots.len();
    let n_steps = fine.len() - 1;
    let fd_step = 1e-3 * (1.0 + x.abs());
    let needs_fd_flow = spec.p_const.is_none();

    // Euler paths from x (and from x + fd_step with the same noise when the
    // drift is not constant, for kernel-density score differences).
    let mut knot_states = vec![0.0; n_paths * nk];
    let mut knot_states_fd = if needs_fd_flow { vec![0.0; n_paths * nk] } else { Vec::new() };
    for i in 0..n_paths {
        let pair = i / 2;
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        let (mut a, mut b) = (x, x + fd_step);
        knot_states[i * nk] = a;
        if needs_fd_flow {
            knot_states_fd[i * nk] = b;
        }
        for s in 0..n_steps {
            let ds = fine[s + 1] - fine[s];
            let dw = sign * dws[pair * n_steps + s] * ds.sqrt();
            a += (spec.p)(fine[s], a) * ds + dw;
            if needs_fd_flow {
                b += (spec.p)(fine[s], b) * ds + dw;
            }
            if (s + 1) % refine == 0 {
                let r = (s + 1) / refine;
                knot_states[i * nk + r] = a;
                if needs_fd_flow {
                    knot_states_fd[i * nk + r] = b;
                }
            }
        }
    }

    // Score weights per (path, knot >= 1).
    let mut weights = vec![0.0; n_paths * nk];
    if let Some(c) = spec.p_const {
        for r in 1..nk {
            let tau = prep.knots[r] - t;
            for i in 0..n_paths {
                weights[i * nk + r] = (knot_states[i * nk + r] - x - c * tau) / tau;
            }
        }
    } else {
        // Common-random-numbers finite difference of the kernel-smoothed
        // log-density in the starting point.
        for r in 1..nk {
            let cloud: Vec<f64> = (0..n_paths).map(|i| knot_states[i * nk + r]).collect();
            let cloud_fd: Vec<f64> = (0..n_paths).map(|i| knot_states_fd[i * nk + r]).collect();
            let bw = silverman_bandwidth(&cloud)?;
            let log_kde = |cloud: &[f64], v: f64| -> f64 {
                let s: f64 = cloud.iter().map(|&c| (-0.5 * ((v - c) / bw).powi(2)).exp()).sum();
                s.max(1e-300).ln()
            };
            for i in 0..n_paths {
                let v = knot_states[i * nk + r];
                weights[i * nk + r] = (log_kde(&cloud_fd, v) - log_kde(&cloud, v)) / fd_step;
            }
        }
    }

    // The r = 0 panel is the spatial derivative of the flat integrand at the
    // base measure; the remaining panels are score-weighted path averages.
    let g0 = |v: f64| {
        dm_h_hat(
            spec,
            y,
            prep.knots[0],
            &prep.marginals[0],
            &prep.base_feats[0],
            prep.y_vals[0],
            prep.hdy_vals[0],
            v,
        )
    };
    let term0 = prep.tw[0] * (g0(x + SPATIAL_STEP) - g0(x - SPATIAL_STEP)) / (2.0 * SPATIAL_STEP);

    let totals: Vec<f64> = (0..n_paths)
        .map(|i| {
            let mut acc = 0.0;
            for r in 1..nk {
                let v = knot_states[i * nk + r];
                let g = dm_h_hat(
                    spec,
                    y,
                    prep.knots[r],
                    &prep.marginals[r],
                    &prep.base_feats[r],
                    prep.y_vals[r],
                    prep.hdy_vals[r],
                    v,
                );
                acc += prep.tw[r] * g * weights[i * nk + r];
            }
            acc + prep.prepared_psi.flat(knot_states[i * nk + nk - 1]) * weights[i * nk + nk - 1]
        })
        .collect();

    // Statistics over antithetic pair means.
    let pairs = n_paths / 2;
    let pair_means: Vec<f64> =
        (0..pairs).map(|p| 0.5 * (totals[2 * p] + totals[2 * p + 1])).collect();
    let mean = pair_means.iter().sum::<f64>() / pairs as f64;
    let var = pair_means.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
        / pairs.saturating_sub(1).max(1) as f64;
    Ok((term0 + mean, (var / pairs as f64).sqrt()))
}

/// One-point kernel evaluation with its Monte Carlo standard error.
pub fn z_score_assembly(
    spec: &SeparableSpec,
    psi: &TerminalFunctional,
    y: &PicardYMap,
    sim: &PicardSim,
    t: f64,
    x: f64,
    m: &DiscreteMeasure,
) -> Result<(f64, f64)> {
    Ok(z_core(spec, psi, y, sim, t, &[x], m)?[0])
}

/// Packages a converged value map and its score-weighted kernel as an
/// evaluable solution. The value side is the fitted map, except exactly at
/// the horizon where the terminal functional itself answers; the kernel
/// side runs the score assembly per query batch.
pub fn z_from_y(
    spec: &SeparableSpec,
    psi: &TerminalFunctional,
    y: &PicardYMap,
    sim: &PicardSim,
) -> Result<WbsdeSolution> {
    require_dm_h(spec)?;
    let (t0, horizon) = (y.t0, y.horizon);
    let (psi_y, ymap_y) = (psi.clone(), y.clone());
    let y_closure = move |t: f64, m: &DiscreteMeasure| -> Result<f64> {
        if t < t0 - 1e-9 || t > horizon + 1e-9 {
            return Err(Error::InvalidInput(format!(
                "time {t} outside the solved window [{t0}, {horizon}]"
            )));
        }
        if t >= horizon - TERMINAL_EPS {
            return Ok(psi_y.eval(m));
        }
        Ok(ymap_y.eval(t, m))
    };
    let (spec_z, psi_z, ymap_z, sim_z) = (spec.clone(), psi.clone(), y.clone(), sim.clone());
    let z_closure = move |t: f64, xs: &[f64], m: &DiscreteMeasure| -> Result<Vec<f64>> {
        Ok(z_core(&spec_z, &psi_z, &ymap_z, &sim_z, t, xs, m)?
            .into_iter()
            .map(|(z, _)| z)
            .collect())
    };
    Ok(WbsdeSolution::new(t0, horizon, Provenance::Picard, y_closure, z_closure))
}

// ---------------------------------------------------------------------------
// Concatenation in time
// ---------------------------------------------------------------------------

/// Glues solutions on adjacent subintervals into one solution on the union.
///
/// Preconditions: pieces ordered in time and adjacent (the horizon of each
/// is the next piece's start within 1e-9). The backward consistency
/// `Y_i(t_i, .) = Y_{i+1}(t_i, .)` is checked on the probe measures and a
/// mismatch above `knot_tol` is a gluing error. Queries at an interior knot
/// go to the later piece, whose value there is its exact terminal data.
pub fn concatenate_in_time(
    pieces: Vec<WbsdeSolution>,
    probes: &[DiscreteMeasure],
    knot_tol: f64,
) -> Result<WbsdeSolution> {
    if pieces.is_empty() {
        return Err(Error::InvalidInput("nothing to concatenate".into()));
    }
    if pieces.len() == 1 {
        return Ok(pieces.into_iter().next().expect("one piece"));
    }
    if probes.is_empty() {
        return Err(Error::InvalidInput("knot-continuity check needs probe measures".into()));
    }
    for w in pieces.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if (a.horizon() - b.t0()).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "pieces are not adjacent: horizon {} vs next start {}",
                a.horizon(),
                b.t0()
            )));
        }
        for (j, m) in probes.iter().enumerate() {
            let left = a.y(a.horizon(), m)?;
            let right = b.y(b.t0(), m)?;
            if (left - right).abs() > knot_tol {
                return Err(Error::Config(format!(
                    "gluing mismatch at knot t = {}: |Y_left - Y_right| = {:.3e} > {knot_tol:.3e} \
                     on probe {j}",
                    a.horizon(),
                    (left - right).abs()
                )));
            }
        }
    }
    let t0 = pieces[0].t0();
    let horizon = pieces[pieces.len() - 1].horizon();
    // Later piece wins at a shared knot; the last piece owns the horizon.
    let select = |pieces: &[WbsdeSolution], t: f64| -> Result<usize> {
        if t < pieces[0].t0() - 1e-9 || t > pieces[pieces.len() - 1].horizon() + 1e-9 {
            return Err(Error::InvalidInput(format!("time {t} outside the concatenated window")));
        }
        Ok(pieces.iter().rposition(|p| t >= p.t0() - 1e-9).unwrap_or(0))
    };
    let pieces_y = pieces.clone();
    let y = move |t: f64, m: &DiscreteMeasure| -> Result<f64> {
        let i = select(&pieces_y, t)?;
        pieces_y[i].y(t.clamp(pieces_y[i].t0(), pieces_y[i].horizon()), m)
    };
    let pieces_z = pieces;
    let z = move |t: f64, xs: &[f64], m: &DiscreteMeasure| -> Result<Vec<f64>> {
        let i = select(&pieces_z, t)?;
        pieces_z[i].z_batch(t.clamp(pieces_z[i].t0(), pieces_z[i].horizon()), xs, m)
    };
    Ok(WbsdeSolution::new(t0, horizon, Provenance::Picard, y, z))
}

/// Solves on `[t0, horizon]` by backward induction over `n_intervals` equal
/// subintervals: the last piece carries the true terminal functional, each
/// earlier piece the next piece's fitted value at the shared knot, and the
/// pieces are glued with [`concatenate_in_time`] (probes: the first five
/// training measures).
#[allow(clippy::too_many_arguments)]
pub fn solve_separable_chain(
    spec: &SeparableSpec,
    psi: &TerminalFunctional,
    t0: f64,
    horizon: f64,
    n_intervals: usize,
    training: &[DiscreteMeasure],
    alpha: f64,
    tol: f64,
    max_iter: usize,
    sim: &PicardSim,
    knot_tol: f64,
) -> Result<WbsdeSolution> {
    if n_intervals == 0 {
        return Err(Error::InvalidInput("need at least one interval".into()));
    }
    if n_intervals < required_intervals(&spec.bounds, t0, horizon) {
        return Err(Error::Smallness(format!(
            "{n_intervals} intervals leave subintervals too long; need at least {}",
            required_intervals(&spec.bounds, t0, horizon)
        )));
    }
    let span = (horizon - t0) / n_intervals as f64;
    let mut pieces_rev: Vec<WbsdeSolution> = Vec::with_capacity(n_intervals);
    let mut terminal = psi.clone();
    for i in (0..n_intervals).rev() {
        let (a, b) = (t0 + i as f64 * span, t0 + (i + 1) as f64 * span);
        let ymap = picard_solve_y(spec, &terminal, a, b, training, alpha, tol, max_iter, sim)?;
        pieces_rev.push(z_from_y(spec, &terminal, &ymap, sim)?);
        if i > 0 {
            let bound = ymap.value_bound;
            let next = ymap;
            terminal = TerminalFunctional::from_eval(
                format!("{}|t>={a:.4}", psi.name),
                move |m| next.eval(a, m),
                false,
                bound,
            );
        }
    }
    pieces_rev.reverse();
    let owned_probes;
    let probes: &[DiscreteMeasure] = if training.is_empty() {
        owned_probes = default_training_measures(substream(sim.seed, "picard-default-corpus"));
        &owned_probes[..5]
    } else {
        &training[..training.len().min(5)]
    };
    concatenate_in_time(pieces_rev, probes, knot_tol)
}

// ---------------------------------------------------------------------------
// Reduced backward operator
// ---------------------------------------------------------------------------

/// Whether the generator actually reads its `z` argument.
pub(crate) fn generator_reads_z(f: &GeneratorSpec) -> bool {
    match &f.kind {
        GeneratorKind::Zero => false,
        GeneratorKind::SeparableYZ(s) => s.bounds.p_bound != 0.0,
        GeneratorKind::LinearInZ { .. }
        | GeneratorKind::Quadratic
        | GeneratorKind::HamiltonianSup(_)
        | GeneratorKind::Custom(_) => true,
    }
}

/// Reduced backward operator along the pure-Brownian flow from `m`:
///
/// `Kbar = int_t^T < f(s, ., law_s, y(s, law_s), z(s, ., law_s)), law_s > ds
///         + psi(law_T)`
///
/// and its flat derivative `flatKbar` at probe `x`, by the score-weighted
/// formula with weights `(W_s - W_t)/(s - t)`: the inner integrand carries
/// the insertion channel `f` evaluated on a particle from `x` riding each
/// path's increments, the generator's own measure slot (the separable
/// variant's `dm_h`; identically zero generators contribute nothing), and
/// the chain rule through `y` (mixture finite differences on the supplied
/// map). The `s = t` panel has no score limit and closes with a spatial
/// central difference. A solution pair is a fixed point: `y = Kbar` and
/// `z = flatKbar` up to Monte Carlo error.
///
/// Scope: the flat output supports the zero and separable generators; other
/// variants would need the flat derivative of their own measure slot, which
/// they do not declare, and are refused. The sensitivity channel through
/// `z`'s measure argument multiplies `df/dz` and is omitted; it vanishes for
/// the supported fixed-point checks (`P = 0`), mirroring the construction's
/// one-sided treatment of the kernel.
#[allow(clippy::too_many_arguments)]
pub fn kbar_operator(
    f: &GeneratorSpec,
    psi: &TerminalFunctional,
    y: &(dyn Fn(f64, &DiscreteMeasure) -> Result<f64> + Sync),
    z: &(dyn Fn(f64, &[f64], &DiscreteMeasure) -> Result<Vec<f64>> + Sync),
    t: f64,
    m: &DiscreteMeasure,
    x: f64,
    horizon: f64,
    sim: &PicardSim,
) -> Result<(f64, f64)> {
    if !(horizon > t) {
        return Err(Error::InvalidInput(format!("need horizon > t, got [{t}, {horizon}]")));
    }
    // Measure-slot derivative of the generator and the y-chain coefficient.
    let separable: Option<&SeparableSpec> = match &f.kind {
        GeneratorKind::Zero => None,
        GeneratorKind::SeparableYZ(s) => {
            require_dm_h(s)?;
            Some(s)
        }
        _ => {
            return Err(Error::Capability(format!(
                "the reduced operator's flat derivative needs the generator's measure-slot \
                 flat derivative, which the {} variant does not declare; use a zero or \
                 separable generator",
                f.name
            )))
        }
    };

    let knots = uniform_grid(t, horizon, sim.knot_dt)?;
    let refine = sim.refine();
    let fine = refined_grid(&knots, refine);
    let nk = knots.len();
    let flow = simulate_flow(
        &DriftFn::zero(),
        m,
        t,
        &fine,
        sim.n_paths,
        substream(sim.seed, "kbar-flow"),
    )?;
    let needs_z = generator_reads_z(f);
    let n = flow.n_paths();

    // Marginals, value path, and per-knot generator averages.
    let marginals: Vec<DiscreteMeasure> = (0..nk).map(|r| flow.marginal(r * refine)).collect();
    let y_vals: Vec<f64> =
        knots.iter().zip(&marginals).map(|(&s, mu)| y(s, mu)).collect::<Result<_>>()?;
    let mut f_avgs = Vec::with_capacity(nk);
    for r in 0..nk {
        let atoms: Vec<f64> = (0..n).map(|i| flow.state(i, r * refine)).collect();
        let zs = if needs_z { z(knots[r], &atoms, &marginals[r])? } else { vec![0.0; n] };
        let mut acc = 0.0;
        for i in 0..n {
            acc += f.eval(knots[r], atoms[i], &marginals[r], y_vals[r], zs[i])?;
        }
        f_avgs.push(acc / n as f64);
    }
    let kbar = trapezoid(&knots, &f_avgs) + psi.eval(&marginals[nk - 1]);

    // Flat-derivative channels per knot: y-chain coefficient dh/dy and the
    // measure-slot derivative evaluated at probes.
    let hdy_vals: Vec<f64> = match separable {
        Some(s) => (0..nk).map(|r| (s.h_dy)(knots[r], &marginals[r], y_vals[r])).collect(),
        None => vec![0.0; nk],
    };
    // Mixture finite difference through the supplied value map.
    let flat_y = |r: usize, v: f64| -> Result<f64> {
        if hdy_vals[r] == 0.0 {
            return Ok(0.0);
        }
        let mixed = marginals[r].mix_dirac(FLAT_EPS, v)?;
        Ok((y(knots[r], &mixed)? - y_vals[r]) / FLAT_EPS)
    };
    let dm_slot = |r: usize, v: f64| -> f64 {
        match separable {
            Some(s) => match &s.dm_h {
                Some(dm) => dm(knots[r], &marginals[r], y_vals[r], v),
                None => 0.0,
            },
            None => 0.0,
        }
    };

    let tw = trapezoid_weights(&knots, 0);
    let prepared = psi.prepare(&marginals[nk - 1])?;
    let mut flat = 0.0;
    for r in 1..nk {
        let tau = knots[r] - t;
        let shifted: Vec<f64> =
            (0..n).map(|i| x + flow.state(i, r * refine) - flow.state(i, 0)).collect();
        let zs = if needs_z { z(knots[r], &shifted, &marginals[r])? } else { vec![0.0; n] };
        let mut acc = 0.0;
        for i in 0..n {
            let w = (flow.state(i, r * refine) - flow.state(i, 0)) / tau;
            let insertion = f.eval(knots[r], shifted[i], &marginals[r], y_vals[r], zs[i])?;
            let chain = hdy_vals[r] * flat_y(r, shifted[i])?;
            acc += (insertion + dm_slot(r, shifted[i]) + chain) * w;
        }
        flat += tw[r] * acc / n as f64;
        if r == nk - 1 {
            let mut pacc = 0.0;
            for (i, &s) in shifted.iter().enumerate() {
                let w = (flow.state(i, r * refine) - flow.state(i, 0)) / tau;
                pacc += prepared.flat(s) * w;
            }
            flat += pacc / n as f64;
        }
    }
    // s = t panel: spatial derivative of the full flat integrand at the
    // base measure.
    let panel0 = {
        let vs = [x + SPATIAL_STEP, x - SPATIAL_STEP];
        let zs = if needs_z { z(t, &vs, &marginals[0])? } else { vec![0.0; 2] };
        let mut g = [0.0; 2];
        for (j, &v) in vs.iter().enumerate() {
            g[j] = f.eval(t, v, &marginals[0], y_vals[0], zs[j])?
                + dm_slot(0, v)
                + hdy_vals[0] * flat_y(0, v)?;
        }
        (g[0] - g[1]) / (2.0 * SPATIAL_STEP)
    };
    flat += tw[0] * panel0;
    Ok((kbar, flat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explicit::solve_zero_generator;
    use crate::functional::{functional_from_config, CylinderSpec, Outer};
    use crate::particle::{aggregate_classical, solve_classical_bsde, BasisSpec};
    use crate::quad::{gauss_hermite, gh_expect};
    use approx::assert_abs_diff_eq;
    use serde_json::json;
    use std::sync::Arc;

    fn tanh_linear() -> TerminalFunctional {
        functional_from_config("tanh-linear", &json!({"scale": 1.0})).unwrap()
    }

    /// h = -lambda y + kappa <tanh, m>, drift coefficient p (constant).
    fn decay_spec(lambda: f64, kappa: f64, p: f64) -> SeparableSpec {
        SeparableSpec {
            h: Arc::new(move |_, m: &DiscreteMeasure, y: f64| {
                -lambda * y + kappa * m.integrate(f64::tanh)
            }),
            h_dy: Arc::new(move |_, _: &DiscreteMeasure, _| -lambda),
            dm_h: if kappa == 0.0 {
                None
            } else {
                Some(Arc::new(move |_, m: &DiscreteMeasure, _, v: f64| {
                    kappa * (v.tanh() - m.integrate(f64::tanh))
                }))
            },
            p: Arc::new(move |_, _| p),
            p_const: Some(p),
            bounds: SeparableBounds {
                h_bound: 3.0 * lambda + kappa.abs(),
                h_lip_y: lambda,
                h_lip_m: kappa.abs(),
                dm_h_bound: if kappa == 0.0 { 0.0 } else { 2.0 * kappa.abs() },
                dm_h_lip: kappa.abs(),
                h_dy_lip: 0.0,
                p_bound: p.abs(),
            },
        }
    }

    fn quick_sim(seed: u64) -> PicardSim {
        PicardSim { n_paths: 600, knot_dt: 0.1, flow_dt: 0.05, seed, test_fns: Vec::new() }
    }

    #[test]
    fn features_are_finite_and_prediction_is_linear_in_coefficients() {
        let fm0 = MeasureFeatureMap::new(vec![0.0, 0.5, 1.0], vec![SmoothFn::tanh()]).unwrap();
        for m in default_training_measures(7) {
            assert!(fm0.features(&m).iter().all(|v| v.is_finite()));
        }
        let m = DiscreteMeasure::uniform(vec![-0.4, 0.8, 1.3]).unwrap();
        let mut fa = fm0.clone();
        let mut fb = fm0.clone();
        let mut fsum = fm0;
        let (ca, cb): (Vec<f64>, Vec<f64>) = (
            (0..6).map(|i| 0.1 * i as f64).collect(),
            (0..6).map(|i| 0.3 - 0.05 * i as f64).collect(),
        );
        let csum: Vec<f64> = ca.iter().zip(&cb).map(|(a, b)| a + b).collect();
        for k in 0..3 {
            fa.set_knot(k, ca.clone()).unwrap();
            fb.set_knot(k, cb.clone()).unwrap();
            fsum.set_knot(k, csum.clone()).unwrap();
        }
        for &t in &[0.0, 0.23, 0.5, 0.77, 1.0] {
            assert_abs_diff_eq!(
                fa.eval(t, &m) + fb.eval(t, &m),
                fsum.eval(t, &m),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn zero_h_converges_immediately_to_the_drift_flow_value() {
        // h = 0: the fixed point is psi pushed through the drift-P flow, and
        // sweep two reuses sweep one's targets so the gap collapses.
        let spec = decay_spec(0.0, 0.0, 0.4);
        let psi = tanh_linear();
        let sim = quick_sim(3);
        let ymap = picard_solve_y(&spec, &psi, 0.0, 1.0, &[], 0.5, 1e-9, 10, &sim).unwrap();
        assert!(ymap.iterations <= 2, "iterations {}", ymap.iterations);
        let m = DiscreteMeasure::uniform(vec![-0.7, 0.1, 0.9]).unwrap();
        let (gx, gw) = gauss_hermite(64).unwrap();
        let oracle = m.integrate(|v| gh_expect(&gx, &gw, v + 0.4, 1.0, f64::tanh));
        assert_abs_diff_eq!(ymap.eval(0.0, &m), oracle, epsilon = 0.05);
    }

    #[test]
    fn linear_decay_matches_the_exponential_closed_form() {
        // h = -lambda y with constant terminal: Y(t, m) = c e^{-lambda (T-t)}.
        let (lambda, c) = (0.8, 1.3);
        let spec = decay_spec(lambda, 0.0, 0.0);
        let psi = TerminalFunctional::from_eval("const", move |_| c, true, c);
        let sim = quick_sim(5);
        let ymap = picard_solve_y(&spec, &psi, 0.0, 1.0, &[], 1.6, 1e-10, 40, &sim).unwrap();
        let m = DiscreteMeasure::uniform(vec![-1.0, 0.3]).unwrap();
        for &t in &[0.0, 0.3, 0.5, 0.8, 1.0] {
            let exact = c * (-lambda * (1.0 - t)).exp();
            assert_abs_diff_eq!(ymap.eval(t, &m), exact, epsilon = 5e-3);
        }
        // Boundedness a priori estimate holds on arbitrary measures.
        let wild = DiscreteMeasure::uniform(vec![-30.0, 55.0]).unwrap();
        assert!(ymap.eval(0.4, &wild).abs() <= psi.bound + spec.bounds.h_bound);
    }

    #[test]
    fn contraction_rate_stays_below_the_weighted_bound() {
        let lambda = 0.8;
        let spec = decay_spec(lambda, 0.3, 0.0);
        let psi = tanh_linear();
        let alpha = 2.0 * lambda;
        let ymap =
            picard_solve_y(&spec, &psi, 0.0, 1.0, &[], alpha, 1e-11, 60, &quick_sim(7)).unwrap();
        assert!(ymap.iterations >= 4, "need a few sweeps to measure a rate");
        assert!(
            ymap.rho <= lambda / alpha + 0.1,
            "measured contraction rate {} vs bound {}",
            ymap.rho,
            lambda / alpha
        );
        // Gaps decay geometrically once the iteration settles.
        for w in ymap.gaps.windows(2).skip(1) {
            assert!(w[1] <= 0.95 * w[0] + 1e-13, "gaps {:?}", ymap.gaps);
        }
    }

    #[test]
    fn smallness_violation_is_refused_with_an_interval_count() {
        let spec = decay_spec(2.0, 0.0, 0.0);
        let psi = tanh_linear();
        let err =
            picard_solve_y(&spec, &psi, 0.0, 1.0, &[], 4.0, 1e-8, 20, &quick_sim(9)).unwrap_err();
        assert!(matches!(err, Error::Smallness(_)), "got {err:?}");
        assert_eq!(required_intervals(&spec.bounds, 0.0, 1.0), 3);
        // alpha at or below the Lipschitz modulus is a precondition failure.
        let err =
            picard_solve_y(&spec, &psi, 0.0, 0.2, &[], 1.9, 1e-8, 20, &quick_sim(9)).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)), "got {err:?}");
    }

    #[test]
    fn iteration_log_is_json_lines() {
        let spec = decay_spec(0.6, 0.0, 0.0);
        let psi = tanh_linear();
        let ymap =
            picard_solve_y(&spec, &psi, 0.0, 1.0, &[], 1.2, 1e-9, 40, &quick_sim(11)).unwrap();
        let text = ymap.log_jsonl();
        assert_eq!(text.lines().count(), ymap.iterations);
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.get("iter").is_some() && v.get("gap").is_some());
            assert!(v.get("rho").is_some() && v.get("wall_ms").is_some());
        }
    }

    #[test]
    fn kernel_matches_the_classical_reduction() {
        // Measure-independent h = -lambda y with cylinder terminal: the
        // kernel collapses to the classical backward kernel
        // e^{-lambda (T-t)} E[tanh'(x + W_{T-t})].
        let lambda = 0.5;
        let spec = decay_spec(lambda, 0.0, 0.0);
        let psi = tanh_linear();
        let sim = PicardSim { n_paths: 4000, ..quick_sim(13) };
        let ymap = picard_solve_y(&spec, &psi, 0.0, 1.0, &[], 1.0, 1e-9, 40, &sim).unwrap();
        let m = DiscreteMeasure::uniform(vec![-0.9, 0.2, 1.1]).unwrap();
        let (gx, gw) = gauss_hermite(64).unwrap();
        for &x in &[-0.6, 0.0, 0.8] {
            let (z, stderr) = z_score_assembly(&spec, &psi, &ymap, &sim, 0.0, x, &m).unwrap();
            let closed =
                (-lambda).exp() * gh_expect(&gx, &gw, x, 1.0, |v| 1.0 - v.tanh().powi(2));
            assert!(
                (z - closed).abs() <= (3.0 * stderr).max(0.02),
                "x = {x}: kernel {z} vs closed form {closed} (stderr {stderr})"
            );
        }
        // Same number from an independently fitted one-particle regression.
        let gen = GeneratorSpec::separable("decay", spec.clone());
        let grid = uniform_grid(0.0, 1.0, 0.05).unwrap();
        let paths =
            solve_classical_bsde(&gen, &psi, 0.0, &grid, 12000, BasisSpec::default(), 15).unwrap();
        let lsmc = aggregate_classical(&paths).unwrap();
        let (z, stderr) = z_score_assembly(&spec, &psi, &ymap, &sim, 0.0, 0.0, &m).unwrap();
        let z_l = lsmc.z(0.0, 0.0, &DiscreteMeasure::dirac(0.0)).unwrap();
        assert!(
            (z - z_l).abs() <= (3.0 * stderr).max(0.08),
            "picard kernel {z} vs regression kernel {z_l}"
        );
    }

    #[test]
    fn kernel_is_shift_equivariant_for_translation_invariant_data() {
        // Variance terminal (translation invariant), h = 0, P = 0: the
        // kernel is 2(x - mean m) and shifting (x, m) together fixes it.
        let outer = Outer::new(2, |v| v[1] - v[0] * v[0], |v| vec![-2.0 * v[0], 1.0]);
        let ch1 = SmoothFn::new("x", |x| x, |_| 1.0, |_| 0.0, 10.0);
        let ch2 = SmoothFn::new("x^2", |x| x * x, |x| 2.0 * x, |_| 2.0, 100.0);
        let spec_c = CylinderSpec::new(outer, vec![ch1, ch2]).unwrap();
        let psi = TerminalFunctional::from_cylinder("variance", spec_c, false, 25.0, None);
        let spec = decay_spec(0.0, 0.0, 0.0);
        let sim = PicardSim { n_paths: 3000, ..quick_sim(17) };
        let ymap = picard_solve_y(&spec, &psi, 0.0, 0.8, &[], 0.5, 1e-9, 10, &sim).unwrap();
        let m = DiscreteMeasure::uniform(vec![-1.2, -0.1, 0.6, 1.5]).unwrap();
        let shift = 0.9;
        let shifted =
            DiscreteMeasure::uniform(m.points().iter().map(|p| p + shift).collect()).unwrap();
        let (z0, s0) = z_score_assembly(&spec, &psi, &ymap, &sim, 0.0, 0.4, &m).unwrap();
        let (z1, s1) =
            z_score_assembly(&spec, &psi, &ymap, &sim, 0.0, 0.4 + shift, &shifted).unwrap();
        let exact = 2.0 * (0.4 - m.mean());
        assert!((z0 - exact).abs() <= 3.0 * s0 + 0.05, "kernel {z0} vs exact {exact}");
        assert!(
            (z0 - z1).abs() <= 3.0 * (s0 + s1) + 0.05,
            "shift equivariance broken: {z0} vs {z1}"
        );
    }

    #[test]
    fn constant_data_gives_zero_kernel() {
        let spec = decay_spec(0.4, 0.0, 0.0);
        let psi = TerminalFunctional::from_eval("const", |_| 0.7, true, 0.7);
        let sim = quick_sim(19);
        let ymap = picard_solve_y(&spec, &psi, 0.0, 0.6, &[], 0.8, 1e-10, 30, &sim).unwrap();
        let m = DiscreteMeasure::uniform(vec![-0.3, 0.5]).unwrap();
        let (z, _) = z_score_assembly(&spec, &psi, &ymap, &sim, 0.0, 0.2, &m).unwrap();
        assert_abs_diff_eq!(z, 0.0, epsilon = 5e-6);
    }

    #[test]
    fn missing_measure_derivative_is_a_capability_error() {
        let mut spec = decay_spec(0.3, 0.5, 0.0);
        spec.dm_h = None; // declared measure-dependent but derivative withheld
        let psi = tanh_linear();
        let sim = quick_sim(21);
        let ymap = picard_solve_y(&spec, &psi, 0.0, 0.5, &[], 0.6, 1e-8, 30, &sim).unwrap();
        let err = z_from_y(&spec, &psi, &ymap, &sim).unwrap_err();
        assert!(matches!(err, Error::Capability(_)), "got {err:?}");
    }

    #[test]
    fn concatenation_reproduces_the_single_shot_solution() {
        // Deterministic instance (h measure-free, constant terminal): the
        // four-piece chain and the unsplit run must agree to the knot glue.
        let (lambda, c) = (0.5, 1.1);
        let spec = decay_spec(lambda, 0.0, 0.0);
        let psi = TerminalFunctional::from_eval("const", move |_| c, true, c);
        let sim = quick_sim(23);
        let whole = picard_solve_y(&spec, &psi, 0.0, 1.0, &[], 1.0, 1e-10, 40, &sim).unwrap();
        let chain =
            solve_separable_chain(&spec, &psi, 0.0, 1.0, 4, &[], 1.0, 1e-10, 40, &sim, 1e-3)
                .unwrap();
        let m = DiscreteMeasure::uniform(vec![0.0, 1.0]).unwrap();
        for &t in &[0.0, 0.4, 0.75, 1.0] {
            let (a, b) = (whole.eval(t, &m), chain.y(t, &m).unwrap());
            assert_abs_diff_eq!(a, b, epsilon = 2e-3);
            assert_abs_diff_eq!(b, c * (-lambda * (1.0 - t)).exp(), epsilon = 5e-3);
        }
        // Single-piece concatenation is the identity.
        let lone = z_from_y(&spec, &psi, &whole, &sim).unwrap();
        let glued = concatenate_in_time(vec![lone.clone()], &[m.clone()], 1e-9).unwrap();
        assert_eq!(glued.y(0.3, &m).unwrap(), lone.y(0.3, &m).unwrap());
        // Pieces that do not actually match at the knot are refused.
        let early = picard_solve_y(&spec, &psi, 0.0, 0.5, &[], 1.0, 1e-10, 40, &sim).unwrap();
        let late = picard_solve_y(&spec, &psi, 0.5, 1.0, &[], 1.0, 1e-10, 40, &sim).unwrap();
        let bad = concatenate_in_time(
            vec![
                z_from_y(&spec, &psi, &early, &sim).unwrap(),
                z_from_y(&spec, &psi, &late, &sim).unwrap(),
            ],
            &[m],
            1e-6,
        );
        // The early piece ends at psi while the late piece starts from the
        // decayed value, so the glue must fail at any tight tolerance.
        assert!(bad.is_err());
    }

    #[test]
    fn reduced_operator_fixes_the_picard_solution_and_flags_corruption() {
        let spec = decay_spec(0.7, 0.4, 0.0);
        let psi = tanh_linear();
        let sim = PicardSim { n_paths: 1500, ..quick_sim(27) };
        let ymap = picard_solve_y(&spec, &psi, 0.0, 1.0, &[], 1.4, 1e-9, 40, &sim).unwrap();
        let sol = z_from_y(&spec, &psi, &ymap, &sim).unwrap();
        let m = DiscreteMeasure::uniform(vec![-0.8, 0.0, 0.7]).unwrap();
        let f = GeneratorSpec::separable("decay", spec.clone());
        let y_fn = |t: f64, mm: &DiscreteMeasure| sol.y(t, mm);
        let z_fn = |t: f64, xs: &[f64], mm: &DiscreteMeasure| sol.z_batch(t, xs, mm);
        let ksim = PicardSim { n_paths: 1200, ..quick_sim(29) };
        let (kbar, flat) =
            kbar_operator(&f, &psi, &y_fn, &z_fn, 0.0, &m, 0.3, 1.0, &ksim).unwrap();
        let y0 = sol.y(0.0, &m).unwrap();
        let z0 = sol.z(0.0, 0.3, &m).unwrap();
        assert!((y0 - kbar).abs() <= 0.04, "fixed-point residual {} vs {}", y0, kbar);
        assert!((z0 - flat).abs() <= 0.1, "kernel residual {} vs {}", z0, flat);
        // A corrupted value map must fail the fixed-point test.
        let y_bad = |t: f64, mm: &DiscreteMeasure| sol.y(t, mm).map(|v| v + 0.1);
        let (kbar_bad, _) =
            kbar_operator(&f, &psi, &y_bad, &z_fn, 0.0, &m, 0.3, 1.0, &ksim).unwrap();
        let corrupted = (y0 + 0.1 - kbar_bad).abs();
        assert!(corrupted > 0.06, "corruption went undetected: residual {corrupted}");
    }

    #[test]
    fn zero_generator_reduced_operator_collapses_to_the_heat_solution() {
        let psi = tanh_linear();
        let f = GeneratorSpec::zero();
        let sim = PicardSim { n_paths: 8000, ..quick_sim(31) };
        let m = DiscreteMeasure::uniform(vec![-0.5, 0.4, 1.0]).unwrap();
        let y_fn = |_: f64, _: &DiscreteMeasure| Ok(0.0);
        let z_fn = |_: f64, xs: &[f64], _: &DiscreteMeasure| Ok(vec![0.0; xs.len()]);
        let (kbar, flat) =
            kbar_operator(&f, &psi, &y_fn, &z_fn, 0.0, &m, 0.2, 1.0, &sim).unwrap();
        let explicit = solve_zero_generator(&psi, 1.0, 40_000, 33).unwrap();
        assert_abs_diff_eq!(kbar, explicit.y(0.0, &m).unwrap(), epsilon = 0.02);
        assert_abs_diff_eq!(flat, explicit.z(0.0, 0.2, &m).unwrap(), epsilon = 0.07);
    }
}
