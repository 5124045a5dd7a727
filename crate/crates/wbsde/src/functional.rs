//! Terminal functionals with analytic derivatives and the tagged family of
//! generators, including the Hamiltonian-sup generator of the control layer.
//!
//! Cylinder functionals `psi(m) = Phi(<g_1, m>, ..., <g_k, m>)` carry exact
//! linear functional derivatives:
//!
//! ```text
//! d_m psi(m)(x)      = sum_i d_i Phi(v) (g_i(x) - v_i)      (zero m-mean)
//! dx d_m psi(m)(x)   = sum_i d_i Phi(v) g_i'(x)
//! dxx d_m psi(m)(x)  = sum_i d_i Phi(v) g_i''(x)
//! ```
//!
//! with `v_i = <g_i, m>`. Custom functionals without analytic data fall back
//! to the finite-difference derivative from the measure module.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::measure::{flat_derivative_fd, DiscreteMeasure};

/// Default mixture step for finite-difference flat derivatives.
pub const FLAT_FD_EPS: f64 = 1e-3;
/// Default spatial step for finite-difference gradients of flat derivatives.
pub const SPATIAL_FD_STEP: f64 = 1e-4;

// ---------------------------------------------------------------------------
// Smooth scalar functions
// ---------------------------------------------------------------------------

type Scalar = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A smooth bounded test function with its first two derivatives.
#[derive(Clone)]
pub struct SmoothFn {
    pub name: String,
    f: Scalar,
    d1: Scalar,
    d2: Scalar,
    /// Sup-norm bound of `f`.
    pub bound: f64,
}

impl std::fmt::Debug for SmoothFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SmoothFn").field("name", &self.name).field("bound", &self.bound).finish()
    }
}

impl SmoothFn {
    pub fn new(
        name: impl Into<String>,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        d1: impl Fn(f64) -> f64 + Send + Sync + 'static,
        d2: impl Fn(f64) -> f64 + Send + Sync + 'static,
        bound: f64,
    ) -> Self {
        Self { name: name.into(), f: Arc::new(f), d1: Arc::new(d1), d2: Arc::new(d2), bound }
    }

    pub fn eval(&self, x: f64) -> f64 {
        (self.f)(x)
    }

    pub fn d1(&self, x: f64) -> f64 {
        (self.d1)(x)
    }

    pub fn d2(&self, x: f64) -> f64 {
        (self.d2)(x)
    }

    /// `a tanh(b x)`.
    pub fn scaled_tanh(a: f64, b: f64) -> Self {
        Self::new(
            format!("{a}*tanh({b}x)"),
            move |x| a * (b * x).tanh(),
            move |x| {
                let t = (b * x).tanh();
                a * b * (1.0 - t * t)
            },
            move |x| {
                let t = (b * x).tanh();
                -2.0 * a * b * b * t * (1.0 - t * t)
            },
            a.abs(),
        )
    }

    pub fn tanh() -> Self {
        Self::scaled_tanh(1.0, 1.0)
    }

    /// Centered logistic `1/(1+exp(-x)) - 1/2`.
    pub fn logistic() -> Self {
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        Self::new(
            "logistic",
            move |x| sig(x) - 0.5,
            move |x| {
                let s = sig(x);
                s * (1.0 - s)
            },
            move |x| {
                let s = sig(x);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            },
            0.5,
        )
    }

    /// `a sin(b x + c)`.
    pub fn sine(a: f64, b: f64, c: f64) -> Self {
        Self::new(
            format!("{a}*sin({b}x+{c})"),
            move |x| a * (b * x + c).sin(),
            move |x| a * b * (b * x + c).cos(),
            move |x| -a * b * b * (b * x + c).sin(),
            a.abs(),
        )
    }

    /// Gaussian bump `a exp(-x^2 / (2 w^2))`.
    pub fn bump(a: f64, w: f64) -> Self {
        let iv = 1.0 / (w * w);
        Self::new(
            format!("{a}*bump({w})"),
            move |x| a * (-0.5 * x * x * iv).exp(),
            move |x| -a * x * iv * (-0.5 * x * x * iv).exp(),
            move |x| a * iv * (x * x * iv - 1.0) * (-0.5 * x * x * iv).exp(),
            a.abs(),
        )
    }
}

// ---------------------------------------------------------------------------
// Cylinder specifications
// ---------------------------------------------------------------------------

/// Smooth outer map `Phi: R^k -> R` with gradient (and optional Hessian).
#[derive(Clone)]
pub struct Outer {
    pub k: usize,
    f: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    grad: Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
    hess: Option<Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>>,
}

impl Outer {
    pub fn new(
        k: usize,
        f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self { k, f: Arc::new(f), grad: Arc::new(grad), hess: None }
    }

    pub fn with_hessian(mut self, hess: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.hess = Some(Arc::new(hess));
        self
    }

    pub fn eval(&self, v: &[f64]) -> f64 {
        (self.f)(v)
    }

    pub fn grad(&self, v: &[f64]) -> Vec<f64> {
        (self.grad)(v)
    }

    pub fn hess(&self, v: &[f64]) -> Option<Vec<f64>> {
        self.hess.as_ref().map(|h| h(v))
    }

    /// `Phi(u) = u` on one channel.
    pub fn identity() -> Self {
        Self::new(1, |v| v[0], |_| vec![1.0]).with_hessian(|_| vec![0.0])
    }

    /// `Phi(u) = c0 + a u - b u^2` (concave for `b >= 0`).
    pub fn concave_quadratic(c0: f64, a: f64, b: f64) -> Self {
        Self::new(1, move |v| c0 + a * v[0] - b * v[0] * v[0], move |v| vec![a - 2.0 * b * v[0]])
            .with_hessian(move |_| vec![-2.0 * b])
    }

    /// `Phi(u) = u^2` (convex).
    pub fn square() -> Self {
        Self::new(1, |v| v[0] * v[0], |v| vec![2.0 * v[0]]).with_hessian(|_| vec![2.0])
    }

    /// Centered logistic of the first channel.
    pub fn logistic() -> Self {
        let sig = |u: f64| 1.0 / (1.0 + (-u).exp());
        Self::new(1, move |v| sig(v[0]) - 0.5, move |v| {
            let s = sig(v[0]);
            vec![s * (1.0 - s)]
        })
        .with_hessian(move |v| {
            let s = sig(v[0]);
            vec![s * (1.0 - s) * (1.0 - 2.0 * s)]
        })
    }
}

/// Cylinder functional data: `psi(m) = Phi(<g_1, m>, ..., <g_k, m>)`.
#[derive(Clone)]
pub struct CylinderSpec {
    pub outer: Outer,
    pub inner: Vec<SmoothFn>,
}

impl CylinderSpec {
    pub fn new(outer: Outer, inner: Vec<SmoothFn>) -> Result<Self> {
        if inner.is_empty() || outer.k != inner.len() {
            return Err(Error::InvalidInput(format!(
                "cylinder needs k >= 1 inner functions matching the outer arity, got {} vs {}",
                inner.len(),
                outer.k
            )));
        }
        Ok(Self { outer, inner })
    }

    /// Channel integrals `v_i = <g_i, m>`.
    pub fn channels(&self, m: &DiscreteMeasure) -> Vec<f64> {
        self.inner.iter().map(|g| m.integrate(|x| g.eval(x))).collect()
    }
}

/// Value and derivative bundle returned by [`cylinder_eval_and_derivs`].
#[derive(Clone, Copy, Debug)]
pub struct CylinderDerivs {
    pub value: f64,
    /// `d_m psi(m)(x)`, recentered to zero m-mean.
    pub flat: f64,
    /// `dx d_m psi(m)(x)`.
    pub flat_grad: f64,
    /// `dxx d_m psi(m)(x)`.
    pub flat_grad2: f64,
}

/// Evaluate a cylinder functional and its three derivative fields at `(m, x)`.
pub fn cylinder_eval_and_derivs(spec: &CylinderSpec, m: &DiscreteMeasure, x: f64) -> CylinderDerivs {
    let v = spec.channels(m);
    let value = spec.outer.eval(&v);
    let grad = spec.outer.grad(&v);
    let mut flat = 0.0;
    let mut flat_grad = 0.0;
    let mut flat_grad2 = 0.0;
    for ((gi, &dphi), &vi) in spec.inner.iter().zip(&grad).zip(&v) {
        flat += dphi * (gi.eval(x) - vi);
        flat_grad += dphi * gi.d1(x);
        flat_grad2 += dphi * gi.d2(x);
    }
    CylinderDerivs { value, flat, flat_grad, flat_grad2 }
}

// ---------------------------------------------------------------------------
// Terminal functionals
// ---------------------------------------------------------------------------

/// Flat-derivative evaluations of a functional at a fixed measure; built once
/// per measure so hot loops pay O(k) per point instead of O(|m|).
pub struct PreparedPsi {
    pub value: f64,
    pub analytic: bool,
    flat: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    flat_grad: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    flat_grad2: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl PreparedPsi {
    /// `d_m psi(m)(x)` at the prepared measure.
    pub fn flat(&self, x: f64) -> f64 {
        (self.flat)(x)
    }

    /// `dx d_m psi(m)(x)` at the prepared measure.
    pub fn flat_grad(&self, x: f64) -> f64 {
        (self.flat_grad)(x)
    }

    /// `dxx d_m psi(m)(x)` at the prepared measure.
    pub fn flat_grad2(&self, x: f64) -> f64 {
        (self.flat_grad2)(x)
    }
}

type MeasureFn = Arc<dyn Fn(&DiscreteMeasure) -> f64 + Send + Sync>;

/// A terminal functional `psi` with optional analytic derivative data.
#[derive(Clone)]
pub struct TerminalFunctional {
    pub name: String,
    eval: MeasureFn,
    cylinder: Option<CylinderSpec>,
    /// Declared concavity (spot-checked, not proven).
    pub concave: bool,
    /// Declared sup-norm bound of `eval`.
    pub bound: f64,
    /// Declared sup-norm bound of the flat derivative, when known.
    pub flat_bound: Option<f64>,
}

impl TerminalFunctional {
    /// Build from a cylinder spec with exact derivatives.
    pub fn from_cylinder(
        name: impl Into<String>,
        spec: CylinderSpec,
        concave: bool,
        bound: f64,
        flat_bound: Option<f64>,
    ) -> Self {
        let spec_eval = spec.clone();
        Self {
            name: name.into(),
            eval: Arc::new(move |m| {
                let v = spec_eval.channels(m);
                spec_eval.outer.eval(&v)
            }),
            cylinder: Some(spec),
            concave,
            bound,
            flat_bound,
        }
    }

    /// Build from an opaque evaluation map; derivatives fall back to finite
    /// differences.
    pub fn from_eval(
        name: impl Into<String>,
        eval: impl Fn(&DiscreteMeasure) -> f64 + Send + Sync + 'static,
        concave: bool,
        bound: f64,
    ) -> Self {
        Self {
            name: name.into(),
            eval: Arc::new(eval),
            cylinder: None,
            concave,
            bound,
            flat_bound: None,
        }
    }

    /// Whether derivative queries use exact cylinder formulas rather than
    /// finite-difference fallbacks.
    pub fn has_analytic_derivatives(&self) -> bool {
        self.cylinder.is_some()
    }

    pub fn eval(&self, m: &DiscreteMeasure) -> f64 {
        (self.eval)(m)
    }

    pub fn cylinder(&self) -> Option<&CylinderSpec> {
        self.cylinder.as_ref()
    }

    pub fn has_analytic_derivs(&self) -> bool {
        self.cylinder.is_some()
    }

    /// Freeze the measure argument: returns closures evaluating the value
    /// and flat-derivative fields at arbitrary points.
    ///
    /// Analytic (cylinder) functionals compute channel integrals once; the
    /// fallback uses finite differences with step [`FLAT_FD_EPS`], with the
    /// recentering average precomputed, and spatial steps [`SPATIAL_FD_STEP`].
    pub fn prepare(&self, m: &DiscreteMeasure) -> Result<PreparedPsi> {
        if let Some(spec) = &self.cylinder {
            let v = spec.channels(m);
            let value = spec.outer.eval(&v);
            let grad = spec.outer.grad(&v);
            let inner = spec.inner.clone();
            let (g2, i2) = (grad.clone(), inner.clone());
            let (g3, i3) = (grad.clone(), inner.clone());
            let flat = move |x: f64| -> f64 {
                inner
                    .iter()
                    .zip(&grad)
                    .zip(&v)
                    .map(|((gi, &d), &vi)| d * (gi.eval(x) - vi))
                    .sum()
            };
            let flat_grad =
                move |x: f64| -> f64 { i2.iter().zip(&g2).map(|(gi, &d)| d * gi.d1(x)).sum() };
            let flat_grad2 =
                move |x: f64| -> f64 { i3.iter().zip(&g3).map(|(gi, &d)| d * gi.d2(x)).sum() };
            return Ok(PreparedPsi {
                value,
                analytic: true,
                flat: Arc::new(flat),
                flat_grad: Arc::new(flat_grad),
                flat_grad2: Arc::new(flat_grad2),
            });
        }
        // Finite-difference fallback: precompute the recentering average.
        let eval = self.eval.clone();
        let m_own = m.clone();
        let value = eval(&m_own);
        let raw = move |y: f64, eval: &MeasureFn, m: &DiscreteMeasure, base: f64| -> f64 {
            (eval(&m.mix_dirac(FLAT_FD_EPS, y).expect("valid eps")) - base) / FLAT_FD_EPS
        };
        let mut avg = 0.0;
        for (&p, &w) in m_own.points().iter().zip(m_own.weights()) {
            if w > 0.0 {
                avg += w * raw(p, &eval, &m_own, value);
            }
        }
        let (e1, m1) = (eval.clone(), m_own.clone());
        let flat = Arc::new(move |x: f64| raw(x, &e1, &m1, value) - avg);
        let flat_c = flat.clone();
        let flat_grad = Arc::new(move |x: f64| {
            (flat_c(x + SPATIAL_FD_STEP) - flat_c(x - SPATIAL_FD_STEP)) / (2.0 * SPATIAL_FD_STEP)
        });
        let flat_c2 = flat.clone();
        let flat_grad2 = Arc::new(move |x: f64| {
            (flat_c2(x + SPATIAL_FD_STEP) - 2.0 * flat_c2(x) + flat_c2(x - SPATIAL_FD_STEP))
                / (SPATIAL_FD_STEP * SPATIAL_FD_STEP)
        });
        Ok(PreparedPsi { value, analytic: false, flat, flat_grad, flat_grad2 })
    }

    /// `d_m psi(m)(x)`: analytic when available, else finite differences.
    pub fn flat(&self, m: &DiscreteMeasure, x: f64) -> Result<f64> {
        if let Some(spec) = &self.cylinder {
            return Ok(cylinder_eval_and_derivs(spec, m, x).flat);
        }
        let eval = self.eval.clone();
        flat_derivative_fd(&move |m: &DiscreteMeasure| eval(m), m, x, FLAT_FD_EPS)
    }

    /// `dx d_m psi(m)(x)`.
    pub fn flat_grad(&self, m: &DiscreteMeasure, x: f64) -> Result<f64> {
        if let Some(spec) = &self.cylinder {
            return Ok(cylinder_eval_and_derivs(spec, m, x).flat_grad);
        }
        let h = SPATIAL_FD_STEP;
        Ok((self.flat(m, x + h)? - self.flat(m, x - h)?) / (2.0 * h))
    }

    /// Midpoint concavity spot-check on random measure pairs: returns false
    /// if `psi((m1+m2)/2) < (psi(m1)+psi(m2))/2 - 1e-10` for any sampled pair.
    pub fn spot_check_concavity(&self, seed: u64, trials: usize) -> bool {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(seed, "concavity-spot-check");
        for _ in 0..trials {
            let sample = |rng: &mut rand_chacha::ChaCha8Rng| {
                let n = rng.gen_range(1..=8usize);
                let pts: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let ws: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
                DiscreteMeasure::from_unnormalized(pts, ws).expect("valid random measure")
            };
            let m1 = sample(&mut rng);
            let m2 = sample(&mut rng);
            let mid = m1.mix(&m2, 0.5).expect("valid mixture");
            if self.eval(&mid) < 0.5 * (self.eval(&m1) + self.eval(&m2)) - 1e-10 {
                return false;
            }
        }
        true
    }
}

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

type MeasureField = Arc<dyn Fn(f64, f64, &DiscreteMeasure) -> f64 + Send + Sync>;
type ActionField = Arc<dyn Fn(f64, f64, &DiscreteMeasure, f64) -> f64 + Send + Sync>;
type YField = Arc<dyn Fn(f64, &DiscreteMeasure, f64) -> f64 + Send + Sync>;
type TxField = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Declared bounds and Lipschitz moduli of a separable generator
/// `f(t,x,m,y,z) = h(t,m,y) + P(t,x) z`, consumed by the Picard smallness
/// check.
#[derive(Clone, Copy, Debug)]
pub struct SeparableBounds {
    /// Sup-norm of `h`.
    pub h_bound: f64,
    /// Lipschitz modulus of `h` in `y` (the paper's |f'|).
    pub h_lip_y: f64,
    /// Lipschitz modulus of `h` in `m` for W1 (the paper's generic C).
    pub h_lip_m: f64,
    /// Sup-norm of the flat derivative of `h`.
    pub dm_h_bound: f64,
    /// Lipschitz modulus of the flat derivative in its arguments.
    pub dm_h_lip: f64,
    /// Lipschitz modulus of `dh/dy`.
    pub h_dy_lip: f64,
    /// Sup-norm of the drift coefficient `P`.
    pub p_bound: f64,
}

/// Separable generator data `h(t, m, y) + P(t, x) z`.
#[derive(Clone)]
pub struct SeparableSpec {
    pub h: YField,
    /// `dh/dy`, needed to assemble the flat derivative of `h(t, m, Y(t,m))`.
    pub h_dy: YField,
    /// Analytic `d_m h(t,m,y)(x)` when available; finite differences otherwise.
    pub dm_h: Option<Arc<dyn Fn(f64, &DiscreteMeasure, f64, f64) -> f64 + Send + Sync>>,
    /// Drift coefficient `P(t, x)` multiplying `z`.
    pub p: TxField,
    /// When `P` is a constant, exact Gaussian scores are available.
    pub p_const: Option<f64>,
    pub bounds: SeparableBounds,
}

/// Hamiltonian-sup generator data: running reward `L`, drift coefficient `b`,
/// and a finite action grid.
#[derive(Clone)]
pub struct HamiltonianSpec {
    pub l: ActionField,
    pub b: ActionField,
    pub actions: Vec<f64>,
}

/// Tagged generator variants of the backward equation driver `f(t,x,m,y,z)`.
#[derive(Clone)]
pub enum GeneratorKind {
    /// `f = 0`.
    Zero,
    /// `f = ell(t, x, m) z`.
    LinearInZ { ell: MeasureField },
    /// `f = h(t, m, y) + P(t, x) z`.
    SeparableYZ(SeparableSpec),
    /// `f = z^2 / 2`.
    Quadratic,
    /// `f = sup_a [ L(t,x,m,a) + b(t,x,m,a) z ]`.
    HamiltonianSup(HamiltonianSpec),
    /// Arbitrary driver closure with caller-declared moduli; the escape
    /// hatch for drivers assembled from problem data (e.g. `L + z b`).
    Custom(DriverField),
}

/// Full driver signature `(t, x, m, y, z) -> value`.
pub type DriverField = Arc<dyn Fn(f64, f64, &DiscreteMeasure, f64, f64) -> f64 + Send + Sync>;

/// A generator with declared global bounds.
#[derive(Clone)]
pub struct GeneratorSpec {
    pub name: String,
    pub kind: GeneratorKind,
    /// Declared Lipschitz modulus in `y` (0 when f does not depend on y).
    pub lip_y: f64,
    /// Declared Lipschitz modulus in `z` (infinity for the quadratic variant).
    pub lip_z: f64,
}

/// Result of maximizing `L + b z` over the action grid.
#[derive(Clone, Copy, Debug)]
pub struct HamiltonianMax {
    pub f_value: f64,
    pub argmax_action: f64,
    /// Raised when two grid actions tie within 1e-12 relative tolerance
    /// (the model assumes a unique maximizer).
    pub tie: bool,
}

/// Exhaustive maximization of `L(t,x,m,a) + b(t,x,m,a) z` over the action
/// grid; ties are broken by the smallest action and flagged.
pub fn hamiltonian_max(
    spec: &HamiltonianSpec,
    t: f64,
    x: f64,
    m: &DiscreteMeasure,
    z: f64,
) -> Result<HamiltonianMax> {
    if spec.actions.is_empty() {
        return Err(Error::InvalidInput("hamiltonian_max: empty action grid".into()));
    }
    let mut best = f64::NEG_INFINITY;
    let mut arg = spec.actions[0];
    let mut tie = false;
    let mut first = true;
    for &a in &spec.actions {
        let val = (spec.l)(t, x, m, a) + (spec.b)(t, x, m, a) * z;
        if first {
            best = val;
            arg = a;
            first = false;
            continue;
        }
        let tol = 1e-12 * (1.0 + best.abs());
        if val > best + tol {
            best = val;
            arg = a;
            tie = false;
        } else if (val - best).abs() <= tol {
            tie = true;
        }
    }
    Ok(HamiltonianMax { f_value: best, argmax_action: arg, tie })
}

impl GeneratorSpec {
    pub fn zero() -> Self {
        Self { name: "zero".into(), kind: GeneratorKind::Zero, lip_y: 0.0, lip_z: 0.0 }
    }

    pub fn quadratic() -> Self {
        Self { name: "quadratic".into(), kind: GeneratorKind::Quadratic, lip_y: 0.0, lip_z: f64::INFINITY }
    }

    pub fn linear_in_z(
        name: impl Into<String>,
        ell: impl Fn(f64, f64, &DiscreteMeasure) -> f64 + Send + Sync + 'static,
        ell_bound: f64,
    ) -> Self {
        Self {
            name: name.into(),
            kind: GeneratorKind::LinearInZ { ell: Arc::new(ell) },
            lip_y: 0.0,
            lip_z: ell_bound,
        }
    }

    pub fn separable(name: impl Into<String>, spec: SeparableSpec) -> Self {
        let lip_y = spec.bounds.h_lip_y;
        let lip_z = spec.bounds.p_bound;
        Self { name: name.into(), kind: GeneratorKind::SeparableYZ(spec), lip_y, lip_z }
    }

    pub fn hamiltonian_sup(name: impl Into<String>, spec: HamiltonianSpec, lip_z: f64) -> Self {
        Self { name: name.into(), kind: GeneratorKind::HamiltonianSup(spec), lip_y: 0.0, lip_z }
    }

    pub fn custom(
        name: impl Into<String>,
        f: impl Fn(f64, f64, &DiscreteMeasure, f64, f64) -> f64 + Send + Sync + 'static,
        lip_y: f64,
        lip_z: f64,
    ) -> Self {
        Self { name: name.into(), kind: GeneratorKind::Custom(Arc::new(f)), lip_y, lip_z }
    }

    /// Evaluate the driver `f(t, x, m, y, z)`.
    pub fn eval(&self, t: f64, x: f64, m: &DiscreteMeasure, y: f64, z: f64) -> Result<f64> {
        match &self.kind {
            GeneratorKind::Zero => Ok(0.0),
            GeneratorKind::LinearInZ { ell } => Ok(ell(t, x, m) * z),
            GeneratorKind::SeparableYZ(s) => Ok((s.h)(t, m, y) + (s.p)(t, x) * z),
            GeneratorKind::Quadratic => Ok(0.5 * z * z),
            GeneratorKind::HamiltonianSup(h) => Ok(hamiltonian_max(h, t, x, m, z)?.f_value),
            GeneratorKind::Custom(f) => Ok(f(t, x, m, y, z)),
        }
    }
}

// ---------------------------------------------------------------------------
// Registry of named built-ins
// ---------------------------------------------------------------------------

fn param(params: &serde_json::Value, key: &str, default: f64) -> f64 {
    params.get(key).and_then(|v| v.as_f64()).unwrap_or(default)
}

/// Construct a named terminal functional from declarative config parameters.
///
/// Built-ins: `tanh-linear` (scale), `logistic-cylinder`, `square-cylinder`
/// (scale), `concave-cylinder` (c0, a, b), `two-channel`.
pub fn functional_from_config(name: &str, params: &serde_json::Value) -> Result<TerminalFunctional> {
    match name {
        "tanh-linear" => {
            let scale = param(params, "scale", 1.0);
            let spec = CylinderSpec::new(Outer::identity(), vec![SmoothFn::scaled_tanh(scale, 1.0)])?;
            Ok(TerminalFunctional::from_cylinder(
                format!("tanh-linear({scale})"),
                spec,
                true,
                scale.abs(),
                Some(2.0 * scale.abs()),
            ))
        }
        "logistic-cylinder" => {
            let spec = CylinderSpec::new(Outer::logistic(), vec![SmoothFn::tanh()])?;
            Ok(TerminalFunctional::from_cylinder("logistic-cylinder", spec, false, 0.5, Some(0.5)))
        }
        "square-cylinder" => {
            let scale = param(params, "scale", 1.0);
            let spec = CylinderSpec::new(Outer::square(), vec![SmoothFn::scaled_tanh(scale, 1.0)])?;
            Ok(TerminalFunctional::from_cylinder(
                format!("square-cylinder({scale})"),
                spec,
                false,
                scale * scale,
                Some(4.0 * scale * scale),
            ))
        }
        "concave-cylinder" => {
            let c0 = param(params, "c0", 0.0);
            let a = param(params, "a", 1.0);
            let b = param(params, "b", 0.5);
            if b < 0.0 {
                return Err(Error::Config("concave-cylinder needs b >= 0".into()));
            }
            let spec = CylinderSpec::new(Outer::concave_quadratic(c0, a, b), vec![SmoothFn::tanh()])?;
            let bound = c0.abs() + a.abs() + b;
            Ok(TerminalFunctional::from_cylinder(
                format!("concave-cylinder({c0},{a},{b})"),
                spec,
                true,
                bound,
                Some(2.0 * (a.abs() + 2.0 * b)),
            ))
        }
        "two-channel" => {
            let outer = Outer::new(2, |v| v[0].sin() + v[1] * v[1], |v| vec![v[0].cos(), 2.0 * v[1]])
                .with_hessian(|v| vec![-v[0].sin(), 0.0, 0.0, 2.0]);
            let spec = CylinderSpec::new(outer, vec![SmoothFn::tanh(), SmoothFn::logistic()])?;
            Ok(TerminalFunctional::from_cylinder("two-channel", spec, false, 1.0 + 0.25, Some(4.0)))
        }
        other => Err(Error::Config(format!("unknown terminal functional '{other}'"))),
    }
}

/// Construct a named generator from declarative config parameters.
///
/// Built-ins: `zero`, `quadratic`, `constant-linear` (c), `tanh-linear-z`
/// (kappa), `entropic-control` (a_min, a_max, n_actions).
pub fn generator_from_config(name: &str, params: &serde_json::Value) -> Result<GeneratorSpec> {
    match name {
        "zero" => Ok(GeneratorSpec::zero()),
        "quadratic" => Ok(GeneratorSpec::quadratic()),
        "constant-linear" => {
            let c = param(params, "c", 0.5);
            Ok(GeneratorSpec::linear_in_z(format!("constant-linear({c})"), move |_, _, _| c, c.abs()))
        }
        "tanh-linear-z" => {
            let kappa = param(params, "kappa", 0.5);
            Ok(GeneratorSpec::linear_in_z(
                format!("tanh-linear-z({kappa})"),
                move |_, x, _| kappa * x.tanh(),
                kappa.abs(),
            ))
        }
        "entropic-control" => {
            let a_min = param(params, "a_min", -3.0);
            let a_max = param(params, "a_max", 3.0);
            let n = params.get("n_actions").and_then(|v| v.as_u64()).unwrap_or(61) as usize;
            if n < 2 || a_max <= a_min {
                return Err(Error::Config("entropic-control needs n_actions >= 2, a_max > a_min".into()));
            }
            let step = (a_max - a_min) / (n - 1) as f64;
            let actions: Vec<f64> = (0..n).map(|k| a_min + k as f64 * step).collect();
            let spec = HamiltonianSpec {
                l: Arc::new(|_, _, _, a| -0.5 * a * a),
                b: Arc::new(|_, _, _, a| a),
                actions,
            };
            Ok(GeneratorSpec::hamiltonian_sup(
                format!("entropic-control[{a_min},{a_max}]x{n}"),
                spec,
                a_max.abs().max(a_min.abs()),
            ))
        }
        other => Err(Error::Config(format!("unknown generator '{other}'"))),
    }
}

/// Names of all registry functionals with analytic derivatives; used by the
/// cross-module derivative validation tests.
pub fn registry_functional_names() -> &'static [&'static str] {
    &["tanh-linear", "logistic-cylinder", "square-cylinder", "concave-cylinder", "two-channel"]
}
