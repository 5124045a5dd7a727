//! The linear master equation on measures and its checks.
//!
//! A candidate value function `u(t, m)` is tested against
//!
//! ```text
//! d_t u + < d_x (du/dm) bbar + 1/2 d_xx (du/dm), m >
//!       + < Lbar(t, ., m, u, d_x du/dm), m > = 0,     u(T, .) = psi
//! ```
//!
//! three ways: [`pde_residual`] evaluates the left-hand side pointwise at a
//! `(t, m)` pair, [`ito_flow_check`] accumulates the chain-rule defect of
//! `u` along a simulated particle flow, and [`duality_equivalence_check`]
//! verifies that the PDE verdict matches the backward-identity verdict of
//! the induced pair `Y = u`, `Z = d_x du/dm` with driver
//! `f = Lbar + z bbar`.
//!
//! Candidates are time-dependent cylinder functions
//! `u(t, m) = phi(t, <h_1(t, .), m>, ..., <h_L(t, .), m>)`, for which every
//! derivative in the equation is an explicit channel sum.
//! [`transported_sine_case`] builds a closed-form solution (a drifted heat
//! propagation of a sine terminal plus an oscillatory source layer) used as
//! the exactness fixture.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::MeasureFlow;
use crate::functional::{CylinderSpec, GeneratorSpec, Outer, SmoothFn, TerminalFunctional};
use crate::measure::DiscreteMeasure;
use crate::solution::{Provenance, WbsdeSolution};
use crate::verify::{wbsde_residual, ResidualReport};

type TimeField = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
type OuterFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
type OuterGrad = Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>;

/// Finite-difference step for the outer function's explicit time partial
/// when no analytic form is declared.
const OUTER_DT_STEP: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Time-dependent cylinder candidates
// ---------------------------------------------------------------------------

/// A channel function `h(t, x)` with analytic space and time derivatives.
#[derive(Clone)]
pub struct TimeSmoothFn {
    pub name: String,
    f: TimeField,
    dx: TimeField,
    dxx: TimeField,
    dt: TimeField,
}

impl TimeSmoothFn {
    pub fn new(
        name: impl Into<String>,
        f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        dx: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        dxx: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        dt: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            f: Arc::new(f),
            dx: Arc::new(dx),
            dxx: Arc::new(dxx),
            dt: Arc::new(dt),
        }
    }

    /// Lift a time-independent channel; the time derivative is zero.
    pub fn from_smooth(s: &SmoothFn) -> Self {
        let (a, b, c) = (s.clone(), s.clone(), s.clone());
        Self::new(
            s.name.clone(),
            move |_, x| a.eval(x),
            move |_, x| b.d1(x),
            move |_, x| c.d2(x),
            |_, _| 0.0,
        )
    }

    pub fn eval(&self, t: f64, x: f64) -> f64 {
        (self.f)(t, x)
    }
    pub fn dx(&self, t: f64, x: f64) -> f64 {
        (self.dx)(t, x)
    }
    pub fn dxx(&self, t: f64, x: f64) -> f64 {
        (self.dxx)(t, x)
    }
    pub fn dt(&self, t: f64, x: f64) -> f64 {
        (self.dt)(t, x)
    }
}

/// `u(t, m) = phi(t, <h_1(t, .), m>, ..., <h_L(t, .), m>)`.
///
/// The flat derivative is `du/dm(t, m, x) = sum_l phi_l(t, s) h_l(t, x)`;
/// all equation terms reduce to channel sums against `m`.
#[derive(Clone)]
pub struct TimeCylinder {
    pub name: String,
    inner: Vec<TimeSmoothFn>,
    outer: OuterFn,
    outer_grad: OuterGrad,
    /// Explicit time partial of the outer at frozen channel values; finite
    /// differences when absent.
    outer_dt: Option<OuterFn>,
}

impl TimeCylinder {
    pub fn new(
        name: impl Into<String>,
        inner: Vec<TimeSmoothFn>,
        outer: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        outer_grad: impl Fn(f64, &[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Result<Self> {
        if inner.is_empty() {
            return Err(Error::InvalidInput("cylinder needs at least one channel".into()));
        }
        Ok(Self {
            name: name.into(),
            inner,
            outer: Arc::new(outer),
            outer_grad: Arc::new(outer_grad),
            outer_dt: None,
        })
    }

    pub fn with_outer_dt(
        mut self,
        dt: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.outer_dt = Some(Arc::new(dt));
        self
    }

    /// Single-channel candidate `u(t, m) = <h(t, .), m>`.
    pub fn linear(name: impl Into<String>, h: TimeSmoothFn) -> Self {
        Self::new(name, vec![h], |_, s| s[0], |_, _| vec![1.0])
            .expect("one channel is provided")
            .with_outer_dt(|_, _| 0.0)
    }

    /// Add a channel with a fixed linear outer weight: the perturbation
    /// `u + weight * <h, m>` used to test detector sensitivity.
    pub fn with_extra_channel(&self, h: TimeSmoothFn, weight: f64) -> Self {
        let mut inner = self.inner.clone();
        let base_len = inner.len();
        inner.push(h);
        let outer = self.outer.clone();
        let grad = self.outer_grad.clone();
        let out = Self {
            name: format!("{}+{}ch", self.name, weight),
            inner,
            outer: Arc::new(move |t, s: &[f64]| outer(t, &s[..base_len]) + weight * s[base_len]),
            outer_grad: Arc::new(move |t, s: &[f64]| {
                let mut g = grad(t, &s[..base_len]);
                g.push(weight);
                g
            }),
            outer_dt: None,
        };
        match self.outer_dt.clone() {
            Some(dt) => out.with_outer_dt(move |t, s: &[f64]| dt(t, &s[..base_len])),
            None => out,
        }
    }

    pub fn channels(&self, t: f64, m: &DiscreteMeasure) -> Vec<f64> {
        self.inner.iter().map(|h| m.integrate(|x| h.eval(t, x))).collect()
    }

    pub fn eval(&self, t: f64, m: &DiscreteMeasure) -> f64 {
        (self.outer)(t, &self.channels(t, m))
    }

    /// Channel values and outer gradient at `(t, m)`, shared by the batch
    /// evaluators so per-point work is a plain channel sum.
    fn prepared(&self, t: f64, m: &DiscreteMeasure) -> (Vec<f64>, Vec<f64>) {
        let s = self.channels(t, m);
        let g = (self.outer_grad)(t, &s);
        assert_eq!(g.len(), self.inner.len(), "outer gradient arity");
        (s, g)
    }

    /// `d_x du/dm` at one point.
    pub fn flat_dx(&self, t: f64, m: &DiscreteMeasure, x: f64) -> f64 {
        let (_, g) = self.prepared(t, m);
        self.inner.iter().zip(&g).map(|(h, gl)| gl * h.dx(t, x)).sum()
    }

    /// `d_x du/dm` on a batch of points with one shared preparation.
    pub fn flat_dx_batch(&self, t: f64, m: &DiscreteMeasure, xs: &[f64]) -> Vec<f64> {
        let (_, g) = self.prepared(t, m);
        xs.iter()
            .map(|&x| self.inner.iter().zip(&g).map(|(h, gl)| gl * h.dx(t, x)).sum())
            .collect()
    }

    /// Total time derivative: the outer's explicit partial plus the channel
    /// drift `sum_l phi_l <d_t h_l, m>`.
    pub fn du_dt(&self, t: f64, m: &DiscreteMeasure) -> f64 {
        let (s, g) = self.prepared(t, m);
        let explicit = match &self.outer_dt {
            Some(dt) => dt(t, &s),
            None => {
                let h = OUTER_DT_STEP;
                ((self.outer)(t + h, &s) - (self.outer)(t - h, &s)) / (2.0 * h)
            }
        };
        let channel_drift: f64 = self
            .inner
            .iter()
            .zip(&g)
            .map(|(hl, gl)| gl * m.integrate(|x| hl.dt(t, x)))
            .sum();
        explicit + channel_drift
    }
}

// ---------------------------------------------------------------------------
// Equation data
// ---------------------------------------------------------------------------

type BbarFn = Arc<dyn Fn(f64, f64, &DiscreteMeasure) -> f64 + Send + Sync>;
type LbarFn = Arc<dyn Fn(f64, f64, &DiscreteMeasure, f64, f64) -> f64 + Send + Sync>;

/// Coefficients of one master equation: transport field `bbar(t, x, m)`,
/// source `Lbar(t, x, m, r, p)` (with `r` the value and `p` the gradient
/// slot), terminal condition, and declared bounds.
#[derive(Clone)]
pub struct PdeData {
    pub name: String,
    pub horizon: f64,
    bbar: BbarFn,
    lbar: LbarFn,
    pub psi: TerminalFunctional,
    pub b_bound: f64,
    pub l_lip_y: f64,
}

impl PdeData {
    pub fn new(
        name: impl Into<String>,
        horizon: f64,
        bbar: impl Fn(f64, f64, &DiscreteMeasure) -> f64 + Send + Sync + 'static,
        lbar: impl Fn(f64, f64, &DiscreteMeasure, f64, f64) -> f64 + Send + Sync + 'static,
        psi: TerminalFunctional,
        b_bound: f64,
        l_lip_y: f64,
    ) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(Error::InvalidInput(format!("horizon must be positive, got {horizon}")));
        }
        if !b_bound.is_finite() || b_bound < 0.0 {
            return Err(Error::InvalidInput(format!("bbar bound must be finite, got {b_bound}")));
        }
        Ok(Self {
            name: name.into(),
            horizon,
            bbar: Arc::new(bbar),
            lbar: Arc::new(lbar),
            psi,
            b_bound,
            l_lip_y,
        })
    }

    pub fn bbar(&self, t: f64, x: f64, m: &DiscreteMeasure) -> f64 {
        (self.bbar)(t, x, m)
    }

    pub fn lbar(&self, t: f64, x: f64, m: &DiscreteMeasure, r: f64, p: f64) -> f64 {
        (self.lbar)(t, x, m, r, p)
    }

    /// The induced backward driver `f(t, x, m, y, z) = Lbar + z bbar`; its
    /// `z` slot is the gradient slot of the source plus the transport pairing.
    pub fn generator(&self) -> GeneratorSpec {
        let lbar = self.lbar.clone();
        let bbar = self.bbar.clone();
        GeneratorSpec::custom(
            format!("{}-driver", self.name),
            move |t, x, m, y, z| lbar(t, x, m, y, z) + z * bbar(t, x, m),
            self.l_lip_y,
            self.b_bound,
        )
    }

    /// Wrap a candidate as a solution pair `Y = u`, `Z = d_x du/dm`.
    pub fn solution_from(&self, u: &TimeCylinder) -> WbsdeSolution {
        let (uy, uz) = (u.clone(), u.clone());
        WbsdeSolution::new(
            0.0,
            self.horizon,
            Provenance::Classical,
            move |t, m| Ok(uy.eval(t, m)),
            move |t, xs, m| Ok(uz.flat_dx_batch(t, m, xs)),
        )
    }
}

// ---------------------------------------------------------------------------
// Checks
// ---------------------------------------------------------------------------

/// Left-hand side of the equation at one `(t, m)`; zero for a solution.
pub fn pde_residual(u: &TimeCylinder, data: &PdeData, t: f64, m: &DiscreteMeasure) -> f64 {
    let (s, g) = u.prepared(t, m);
    let uval = (u.outer)(t, &s);
    let spatial = m.integrate(|x| {
        let p: f64 = u.inner.iter().zip(&g).map(|(h, gl)| gl * h.dx(t, x)).sum();
        let pxx: f64 = u.inner.iter().zip(&g).map(|(h, gl)| gl * h.dxx(t, x)).sum();
        p * data.bbar(t, x, m) + 0.5 * pxx + data.lbar(t, x, m, uval, p)
    });
    u.du_dt(t, m) + spatial
}

/// Chain-rule defect of `u` along a simulated flow.
///
/// Per step the increment `u(t_{k+1}, mu_{k+1}) - u(t_k, mu_k)` is compared
/// against the expansion `[d_t u + <d_x du/dm B + 1/2 d_xx du/dm, mu_k>] dt`
/// plus the Brownian pairing `<d_x du/dm, dW>` reconstructed from the
/// stored paths (`dW = dX - B dt`). Subtracting the reconstructed
/// martingale leaves the pure discretization bias, so the maximum absolute
/// cumulative defect returned here scales linearly in the step and does not
/// stall at the Monte Carlo noise floor; a wrong gradient or a wrong
/// diffusion constant surfaces as a step-independent excess.
pub fn ito_flow_check(u: &TimeCylinder, flow: &MeasureFlow) -> f64 {
    let times = flow.times();
    let n = flow.n_paths() as f64;
    let mut cum = 0.0;
    let mut worst = 0.0f64;
    for k in 0..times.len() - 1 {
        let (t, t_next) = (times[k], times[k + 1]);
        let dt = t_next - t;
        let m = flow.marginal(k);
        let m_next = flow.marginal(k + 1);
        let (_, g) = u.prepared(t, &m);
        let mut drift_term = 0.0;
        let mut mart = 0.0;
        for i in 0..flow.n_paths() {
            let x = flow.state(i, k);
            let b = flow.drift().eval(t, x);
            let p: f64 = u.inner.iter().zip(&g).map(|(h, gl)| gl * h.dx(t, x)).sum();
            let pxx: f64 = u.inner.iter().zip(&g).map(|(h, gl)| gl * h.dxx(t, x)).sum();
            drift_term += p * b + 0.5 * pxx;
            let dw = flow.state(i, k + 1) - x - b * dt;
            mart += p * dw;
        }
        let pred = (u.du_dt(t, &m) + drift_term / n) * dt + mart / n;
        let actual = u.eval(t_next, &m_next) - u.eval(t, &m);
        cum += actual - pred;
        worst = worst.max(cum.abs());
    }
    worst
}

/// One flow's verdict pair in a duality check.
#[derive(Clone, Debug, Serialize)]
pub struct DualityFlowRow {
    pub flow_index: usize,
    /// Max `|pde_residual|` over the check times at the flow marginals.
    pub max_pde_residual: f64,
    pub pde_pass: bool,
    pub bsde_max_residual: f64,
    pub bsde_pass: bool,
    /// The two verdicts coincide (both pass or both fail).
    pub agree: bool,
}

/// Verdict of [`duality_equivalence_check`].
#[derive(Clone, Debug, Serialize)]
pub struct DualityReport {
    pub label: String,
    pub pde_tol: f64,
    pub bsde_tol: f64,
    pub rows: Vec<DualityFlowRow>,
    /// All flows agree between the two formulations.
    pub pass: bool,
    /// The underlying backward-identity reports, one per flow.
    pub bsde_reports: Vec<ResidualReport>,
}

impl DualityReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Equivalence of the two formulations on a candidate: for each flow the
/// pointwise equation residual (at the flow's marginals) and the backward
/// identity of the induced pair `(u, d_x du/dm)` with driver
/// `Lbar + z bbar` must reach the same verdict. A solution passes both; a
/// spoiled candidate must fail both.
pub fn duality_equivalence_check(
    u: &TimeCylinder,
    data: &PdeData,
    flows: &[MeasureFlow],
    check_times: &[f64],
    pde_tol: f64,
    bsde_tol: f64,
) -> Result<DualityReport> {
    if flows.is_empty() {
        return Err(Error::InvalidInput("need at least one flow".into()));
    }
    if !(pde_tol > 0.0) || !(bsde_tol > 0.0) {
        return Err(Error::InvalidInput(format!(
            "tolerances must be positive, got pde {pde_tol}, backward {bsde_tol}"
        )));
    }
    let sol = data.solution_from(u);
    let gen = data.generator();
    let mut rows = Vec::with_capacity(flows.len());
    let mut reports = Vec::with_capacity(flows.len());
    for (fi, flow) in flows.iter().enumerate() {
        let mut max_pde = 0.0f64;
        for &t in check_times {
            let k = flow.time_index(t)?;
            let m = flow.marginal(k);
            max_pde = max_pde.max(pde_residual(u, data, flow.times()[k], &m).abs());
        }
        let rep = wbsde_residual(&sol, &gen, &data.psi, flow, check_times, bsde_tol)?;
        let pde_pass = max_pde <= pde_tol;
        rows.push(DualityFlowRow {
            flow_index: fi,
            max_pde_residual: max_pde,
            pde_pass,
            bsde_max_residual: rep.max_residual(),
            bsde_pass: rep.pass,
            agree: pde_pass == rep.pass,
        });
        reports.push(rep);
    }
    let pass = rows.iter().all(|r| r.agree);
    Ok(DualityReport {
        label: format!("{}|{}", data.name, u.name),
        pde_tol,
        bsde_tol,
        rows,
        pass,
        bsde_reports: reports,
    })
}

// ---------------------------------------------------------------------------
// Closed-form fixture
// ---------------------------------------------------------------------------

/// Linear equation with constant transport `bbar = beta` and oscillatory
/// source `Lbar = c sin(omega x)`, terminal `<sin(nu .), m>`. The solution
/// is the drifted heat propagation of the sine plus the time-integrated
/// source layer, both in closed form:
///
/// ```text
/// u(t, m) = <g(t, .), m>,
/// g(t, x) = e^{-nu^2 tau / 2} sin(nu (x + beta tau))
///         + c [e^{a tau}(a sin(th + b tau) - b cos(th + b tau))
///              - (a sin th - b cos th)] / (a^2 + b^2)
/// ```
///
/// with `tau = T - t`, `th = omega x`, `a = -omega^2 / 2`, `b = omega beta`.
/// Substituting into the equation cancels exactly, so [`pde_residual`]
/// vanishes to rounding at every `(t, m)`.
pub fn transported_sine_case(
    beta: f64,
    nu: f64,
    omega: f64,
    c: f64,
    horizon: f64,
) -> Result<(TimeCylinder, PdeData)> {
    if !(horizon > 0.0) || nu == 0.0 || omega == 0.0 {
        return Err(Error::InvalidInput(
            "transported sine needs horizon > 0 and nonzero frequencies".into(),
        ));
    }
    let a = -0.5 * omega * omega;
    let b = omega * beta;
    let d = a * a + b * b;

    let g = move |t: f64, x: f64| -> f64 {
        let tau = horizon - t;
        let amp = (-0.5 * nu * nu * tau).exp();
        let th = omega * x;
        amp * (nu * (x + beta * tau)).sin()
            + c * ((a * tau).exp() * (a * (th + b * tau).sin() - b * (th + b * tau).cos())
                - (a * th.sin() - b * th.cos()))
                / d
    };
    let g_dx = move |t: f64, x: f64| -> f64 {
        let tau = horizon - t;
        let amp = (-0.5 * nu * nu * tau).exp();
        let th = omega * x;
        nu * amp * (nu * (x + beta * tau)).cos()
            + c * omega
                * ((a * tau).exp() * (a * (th + b * tau).cos() + b * (th + b * tau).sin())
                    - (a * th.cos() + b * th.sin()))
                / d
    };
    let g_dxx = move |t: f64, x: f64| -> f64 {
        let tau = horizon - t;
        let amp = (-0.5 * nu * nu * tau).exp();
        let th = omega * x;
        -nu * nu * amp * (nu * (x + beta * tau)).sin()
            + c * omega
                * omega
                * ((a * tau).exp() * (b * (th + b * tau).cos() - a * (th + b * tau).sin())
                    - (b * th.cos() - a * th.sin()))
                / d
    };
    let g_dt = move |t: f64, x: f64| -> f64 {
        let tau = horizon - t;
        let amp = (-0.5 * nu * nu * tau).exp();
        let th = omega * x;
        0.5 * nu * nu * amp * (nu * (x + beta * tau)).sin()
            - nu * beta * amp * (nu * (x + beta * tau)).cos()
            - c * (a * tau).exp() * (th + b * tau).sin()
    };

    let u = TimeCylinder::linear(
        "transported-sine",
        TimeSmoothFn::new("g", g, g_dx, g_dxx, g_dt),
    );

    let spec = CylinderSpec::new(Outer::identity(), vec![SmoothFn::sine(1.0, nu, 0.0)])?;
    let psi = TerminalFunctional::from_cylinder(
        format!("sine-mean({nu})"),
        spec,
        false,
        1.0,
        Some(nu.abs()),
    );
    let data = PdeData::new(
        "transported-sine",
        horizon,
        move |_, _, _| beta,
        move |_, x, _, _, _| c * (omega * x).sin(),
        psi,
        beta.abs(),
        0.0,
    )?;
    Ok((u, data))
}

/// The standard fixture parameters used across the test suite.
pub fn feynman_kac_case() -> (TimeCylinder, PdeData) {
    transported_sine_case(0.4, 0.9, 1.3, 0.3, 0.5).expect("fixture parameters are valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{simulate_flow, uniform_grid, DriftFn};

    fn probe_cloud(shift: f64) -> DiscreteMeasure {
        DiscreteMeasure::uniform((0..48).map(|i| shift - 1.175 + 0.05 * i as f64).collect())
            .unwrap()
    }

    fn constant_candidate(c: f64) -> TimeCylinder {
        TimeCylinder::linear(
            format!("const({c})"),
            TimeSmoothFn::new("const", move |_, _| c, |_, _| 0.0, |_, _| 0.0, |_, _| 0.0),
        )
    }

    fn zero_source_data(psi_const: f64) -> PdeData {
        PdeData::new(
            "driftless",
            0.5,
            |_, _, _| 0.0,
            |_, _, _, _, _| 0.0,
            TerminalFunctional::from_eval("const", move |_| psi_const, true, psi_const.abs()),
            0.0,
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn constants_solve_the_sourceless_equation_exactly() {
        let u = constant_candidate(0.7);
        let data = zero_source_data(0.7);
        assert_eq!(pde_residual(&u, &data, 0.2, &probe_cloud(0.0)), 0.0);
    }

    #[test]
    fn a_unit_source_is_a_unit_residual() {
        let u = constant_candidate(0.7);
        let data = PdeData::new(
            "unit-source",
            0.5,
            |_, _, _| 0.0,
            |_, _, _, _, _| 1.0,
            TerminalFunctional::from_eval("const", |_| 0.7, true, 0.7),
            0.0,
            0.0,
        )
        .unwrap();
        assert_eq!(pde_residual(&u, &data, 0.2, &probe_cloud(0.0)), 1.0);
    }

    #[test]
    fn the_transported_sine_solves_its_equation() {
        let (u, data) = feynman_kac_case();
        for &t in &[0.0, 0.17, 0.34, 0.5] {
            for &shift in &[0.0, -0.6, 1.1] {
                let m = probe_cloud(shift);
                let r = pde_residual(&u, &data, t, &m).abs();
                assert!(r <= 1e-12, "residual {r} at t={t}, shift={shift}");
            }
        }
        // Terminal consistency with the declared boundary condition.
        let m = probe_cloud(0.3);
        assert!((u.eval(0.5, &m) - data.psi.eval(&m)).abs() <= 1e-12);
    }

    #[test]
    fn the_heat_reduction_also_solves_its_equation() {
        let (u, data) = transported_sine_case(0.0, 0.9, 1.3, 0.0, 0.5).unwrap();
        let r = pde_residual(&u, &data, 0.21, &probe_cloud(0.4)).abs();
        assert!(r <= 1e-12, "residual {r}");
    }

    #[test]
    fn a_spoiled_candidate_is_detected_pointwise() {
        let (u, data) = feynman_kac_case();
        let spoiled = u.with_extra_channel(TimeSmoothFn::from_smooth(&SmoothFn::tanh()), 0.3);
        let r = pde_residual(&spoiled, &data, 0.2, &probe_cloud(0.0)).abs();
        assert!(r >= 1e-3, "spoiled residual {r} too small to detect");
    }

    #[test]
    fn the_residual_is_affine_in_the_source() {
        let (u, _) = feynman_kac_case();
        let mk = |amp: f64| {
            PdeData::new(
                "src",
                0.5,
                |_, _, _| 0.4,
                move |_, x: f64, _, _, _| amp * (1.3 * x).sin(),
                TerminalFunctional::from_eval("c", |_| 0.0, true, 0.0),
                0.4,
                0.0,
            )
            .unwrap()
        };
        let (t, m) = (0.2, probe_cloud(0.5));
        let r0 = pde_residual(&u, &mk(0.0), t, &m);
        let r1 = pde_residual(&u, &mk(0.3), t, &m);
        let r2 = pde_residual(&u, &mk(0.9), t, &m);
        let r12 = pde_residual(&u, &mk(1.2), t, &m);
        assert!((r12 - (r1 + r2 - r0)).abs() <= 1e-12);
    }

    fn fixture_flow(dt: f64, n: usize, seed: u64) -> MeasureFlow {
        let drift = DriftFn::constant(0.4).unwrap();
        let ts = uniform_grid(0.0, 0.5, dt).unwrap();
        simulate_flow(&drift, &probe_cloud(0.0), 0.0, &ts, n, seed).unwrap()
    }

    #[test]
    fn constants_have_zero_chain_rule_defect() {
        let u = constant_candidate(1.3);
        assert_eq!(ito_flow_check(&u, &fixture_flow(0.05, 400, 11)), 0.0);
    }

    #[test]
    fn the_chain_rule_tracks_the_solution_to_first_order() {
        let (u, _) = feynman_kac_case();
        let dev = ito_flow_check(&u, &fixture_flow(0.02, 4000, 11));
        assert!(dev <= 0.02, "chain-rule defect {dev}");
    }

    #[test]
    fn a_wrong_diffusion_constant_breaks_the_chain_rule() {
        let (u, _) = feynman_kac_case();
        // Same solution with the curvature channel doubled: the defect must
        // grow to the scale of the integrated curvature itself.
        let doubled = {
            let base = u.inner[0].clone();
            let b2 = base.clone();
            TimeCylinder::linear(
                "doubled-curvature",
                TimeSmoothFn::new(
                    "g2",
                    move |t, x| base.eval(t, x),
                    {
                        let b = u.inner[0].clone();
                        move |t, x| b.dx(t, x)
                    },
                    move |t, x| 2.0 * b2.dxx(t, x),
                    {
                        let b = u.inner[0].clone();
                        move |t, x| b.dt(t, x)
                    },
                ),
            )
        };
        let flow = fixture_flow(0.02, 4000, 11);
        let honest = ito_flow_check(&u, &flow);
        let broken = ito_flow_check(&doubled, &flow);
        assert!(
            broken >= 5.0 * honest.max(1e-4),
            "broken defect {broken} vs honest {honest}"
        );
    }

    #[test]
    fn halving_the_step_halves_the_chain_rule_defect() {
        // A high-curvature variant on a narrow cloud: the predictable drift
        // of u along the flow then changes by O(1) over the horizon, so the
        // left-endpoint quadrature bias dominates the Monte Carlo noise
        // floor and the defect is measurably first order in the step.
        let (u, _) = transported_sine_case(0.8, 1.2, 2.0, 1.0, 0.5).unwrap();
        let drift = DriftFn::constant(0.8).unwrap();
        let m0 = DiscreteMeasure::uniform(
            (0..48).map(|i| -0.885 + 0.2 * i as f64 / 47.0).collect(),
        )
        .unwrap();
        let run = |dt: f64| {
            let ts = uniform_grid(0.0, 0.5, dt).unwrap();
            let flow = simulate_flow(&drift, &m0, 0.0, &ts, 80000, 11).unwrap();
            ito_flow_check(&u, &flow)
        };
        let coarse = run(0.02);
        let fine = run(0.01);
        let ratio = fine / coarse;
        assert!(
            (0.3..=0.7).contains(&ratio),
            "defect ratio {ratio} (coarse {coarse}, fine {fine}) is not first order"
        );
    }

    #[test]
    fn both_formulations_accept_the_solution_and_reject_the_spoiled_one() {
        let (u, data) = feynman_kac_case();
        let flows = vec![fixture_flow(0.02, 3000, 5), fixture_flow(0.02, 3000, 6)];
        let ts = [0.0, 0.2, 0.4];
        let rep = duality_equivalence_check(&u, &data, &flows, &ts, 1e-6, 0.02).unwrap();
        assert!(rep.pass, "rows {:?}", rep.rows);
        for row in &rep.rows {
            assert!(row.pde_pass && row.bsde_pass, "row {row:?}");
        }

        let spoiled = u.with_extra_channel(TimeSmoothFn::from_smooth(&SmoothFn::tanh()), 0.3);
        let rep =
            duality_equivalence_check(&spoiled, &data, &flows, &ts, 1e-6, 0.02).unwrap();
        assert!(rep.pass, "verdicts must agree on the spoiled candidate too");
        for row in &rep.rows {
            assert!(!row.pde_pass && !row.bsde_pass, "row {row:?}");
        }
    }

    #[test]
    fn duality_reports_serialize() {
        let (u, data) = feynman_kac_case();
        let flows = vec![fixture_flow(0.05, 500, 5)];
        let rep = duality_equivalence_check(&u, &data, &flows, &[0.0], 1e-6, 0.1).unwrap();
        let v: serde_json::Value = serde_json::from_str(&rep.to_json().unwrap()).unwrap();
        assert!(v.get("rows").is_some());
    }
}
