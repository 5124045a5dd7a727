//! The n-particle backward system behind the measure-valued equation:
//! driftless particles carry an empirical measure, the common value `Yn`
//! and the rescaled per-particle kernels `nZ^i` are estimated by backward
//! least-squares regression, and an exact nested-Monte-Carlo oracle covers
//! the quadratic generator where the regression scheme does not apply.

use std::sync::Arc;
use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::validate_grid;
use crate::functional::{GeneratorKind, GeneratorSpec, TerminalFunctional};
use crate::linreg;
use crate::measure::DiscreteMeasure;
use crate::rng::{mix_key, path_rng, substream};
use crate::solution::{Provenance, WbsdeSolution};

/// Largest particle count accepted by the exact quadratic oracle; its inner
/// Monte Carlo variance grows exponentially with `n * sup|psi|`.
pub const QUADRATIC_EXACT_MAX_N: usize = 16;

/// Regression basis: symmetric cloud moments crossed with own-particle
/// monomials. Feature `(a, b)` is `moment_a(cloud) * x_own^b` with
/// `moment_0 = 1`, so the default 3 x 3 layout yields 16 features and the
/// `b = 0` slice is the purely symmetric sub-basis used for the common value.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BasisSpec {
    pub moment_degree: usize,
    pub own_degree: usize,
}

impl Default for BasisSpec {
    fn default() -> Self {
        Self { moment_degree: 3, own_degree: 3 }
    }
}

impl BasisSpec {
    pub fn n_features(&self) -> usize {
        (self.moment_degree + 1) * (self.own_degree + 1)
    }

    pub fn n_symmetric(&self) -> usize {
        self.moment_degree + 1
    }

    pub fn describe(&self) -> String {
        format!(
            "cloud moments 0..={} crossed with own monomials 0..={}",
            self.moment_degree, self.own_degree
        )
    }

    /// Powers `[1, m_1, ..., m_deg]` of the cloud's raw moments.
    fn moment_vector(&self, cloud: &[f64]) -> Vec<f64> {
        let n = cloud.len() as f64;
        let mut mom = vec![1.0; self.moment_degree + 1];
        for &x in cloud {
            let mut p = 1.0;
            for slot in mom.iter_mut().skip(1) {
                p *= x;
                *slot += p;
            }
        }
        for slot in mom.iter_mut().skip(1) {
            *slot = (*slot - 1.0) / n;
        }
        mom
    }

    fn moment_vector_of(&self, m: &DiscreteMeasure) -> Vec<f64> {
        let mut mom = vec![1.0; self.moment_degree + 1];
        for (a, slot) in mom.iter_mut().enumerate().skip(1) {
            *slot = m.raw_moment(a as u32);
        }
        mom
    }

    /// Full crossed feature row for own-position `x` against `moments`.
    fn fill_features(&self, moments: &[f64], x: f64, out: &mut [f64]) {
        let ob = self.own_degree + 1;
        let mut own = 1.0;
        for b in 0..ob {
            for (a, &ma) in moments.iter().enumerate() {
                out[a * ob + b] = ma * own;
            }
            own *= x;
        }
    }
}

/// Range of the training clouds' raw moments, kept so aggregated solutions
/// can flag evaluation far outside the regression's supported region.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MomentHull {
    /// Per moment order `1..=deg`: smallest value seen during training.
    pub lo: Vec<f64>,
    /// Per moment order `1..=deg`: largest value seen during training.
    pub hi: Vec<f64>,
}

impl MomentHull {
    fn new(deg: usize) -> Self {
        Self { lo: vec![f64::INFINITY; deg], hi: vec![f64::NEG_INFINITY; deg] }
    }

    fn absorb(&mut self, moments: &[f64]) {
        for a in 0..self.lo.len() {
            self.lo[a] = self.lo[a].min(moments[a + 1]);
            self.hi[a] = self.hi[a].max(moments[a + 1]);
        }
    }

    /// True when every raw moment of `m` lies inside the training range
    /// widened by half its span on each side.
    pub fn contains(&self, m: &DiscreteMeasure) -> bool {
        for a in 0..self.lo.len() {
            let v = m.raw_moment((a + 1) as u32);
            let pad = 0.5 * (self.hi[a] - self.lo[a]) + 1e-9;
            if v < self.lo[a] - pad || v > self.hi[a] + pad {
                return false;
            }
        }
        true
    }
}

/// Backward-regression estimates of the n-particle system on a time grid.
pub struct ParticleBsdePaths {
    pub n: usize,
    pub times: Vec<f64>,
    /// Common value path: outer-MC mean of the fitted conditional value at
    /// each knot; the terminal entry is the mean of `psi` over the clouds.
    pub yn: Vec<f64>,
    /// Spread of the realized per-sample values divided by sqrt(n_outer).
    pub yn_stderr: Vec<f64>,
    /// Row-major `n x n_times`: outer-MC means of the fitted `nZ^i`.
    pub zn: Vec<f64>,
    pub basis_spec: String,
    pub seed: u64,
    /// Knot indices where the regression needed the ridge fallback.
    pub ridge_knots: Vec<usize>,
    basis: BasisSpec,
    /// Per interior knot: coefficients of the symmetric value fit.
    y_coefs: Vec<Vec<f64>>,
    /// Per interior knot: coefficients of the crossed kernel fit.
    z_coefs: Vec<Vec<f64>>,
    terminal: TerminalFunctional,
    hull: MomentHull,
    /// Row-major `n x n_times` positions of outer sample 0, for in-sample
    /// evaluation checks.
    first_paths: Vec<f64>,
    /// Fitted value for outer sample 0 at every knot (terminal: `psi`).
    fitted_first: Vec<f64>,
}

impl std::fmt::Debug for ParticleBsdePaths {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParticleBsdePaths")
            .field("n", &self.n)
            .field("n_times", &self.times.len())
            .field("basis", &self.basis_spec)
            .field("seed", &self.seed)
            .finish()
    }
}

impl ParticleBsdePaths {
    pub fn zn_at(&self, i: usize, k: usize) -> f64 {
        self.zn[i * self.times.len() + k]
    }

    pub fn moment_hull(&self) -> &MomentHull {
        &self.hull
    }

    /// Positions of outer sample 0's cloud at knot `k`.
    pub fn first_cloud(&self, k: usize) -> Vec<f64> {
        let nt = self.times.len();
        (0..self.n).map(|i| self.first_paths[i * nt + k]).collect()
    }

    pub fn fitted_first(&self) -> &[f64] {
        &self.fitted_first
    }
}

/// Initial particle positions for a cloud of size `n` drawn from `m`:
/// `m`'s own atoms in insertion order when it is uniform with exactly `n`
/// of them (so relabeling tests are meaningful), stratified quantiles
/// otherwise.
pub fn initial_cloud(m: &DiscreteMeasure, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidInput("particle count must be >= 1".into()));
    }
    let uniform = m.len() == n
        && m.weights().iter().all(|&w| (w - 1.0 / n as f64).abs() <= 1e-12);
    if uniform {
        return Ok(m.points().to_vec());
    }
    Ok(m.stratified(n)?.points().to_vec())
}

/// Rank of each particle after sorting by initial position (ties by index);
/// noise streams are keyed by rank so relabeling the initial atoms permutes
/// trajectories instead of rewiring them.
fn position_ranks(x0: &[f64]) -> Vec<u64> {
    let mut idx: Vec<usize> = (0..x0.len()).collect();
    idx.sort_by(|&a, &b| x0[a].partial_cmp(&x0[b]).expect("finite positions").then(a.cmp(&b)));
    let mut rank = vec![0u64; x0.len()];
    for (r, &i) in idx.iter().enumerate() {
        rank[i] = r as u64;
    }
    rank
}

/// Solves the n-particle backward system
/// `Yn_t = psi(mu^n_T) + (1/n) sum_i int_t^T f(s, X^i_s, mu^n_s, Yn_s, nZ^i_s) ds - martingale`
/// with driftless particles `X^i` by backward Euler:
/// the realized value is propagated per outer sample, the `y` argument of
/// `f` comes from a symmetric-feature regression, and `nZ^i` from the
/// martingale-increment regression of `n * value * dW^i / dt` on the
/// crossed basis.
///
/// The initial cloud comes from [`initial_cloud`] and is shared by all
/// outer samples, so `yn[0]` estimates the value at that empirical measure.
#[allow(clippy::too_many_arguments)]
pub fn solve_n_particle(
    f: &GeneratorSpec,
    psi: &TerminalFunctional,
    n: usize,
    mu0: &DiscreteMeasure,
    times: &[f64],
    n_outer: usize,
    basis: BasisSpec,
    seed: u64,
) -> Result<ParticleBsdePaths> {
    if matches!(f.kind, GeneratorKind::Quadratic) {
        return Err(Error::Capability(
            "the quadratic generator is not Lipschitz in z; use the exact particle oracle \
             (quadratic_particle_exact) instead of the regression scheme"
                .into(),
        ));
    }
    validate_grid(times, times[0])?;
    if n_outer < 8 {
        return Err(Error::InvalidInput("need at least 8 outer samples".into()));
    }
    let x0 = initial_cloud(mu0, n)?;
    let ranks = position_ranks(&x0);
    // order[r] = label of the particle with rank r; iterating particles in
    // rank order makes every floating-point accumulation independent of how
    // the initial atoms were labeled, so relabeling runs agree bitwise.
    let mut order = vec![0usize; n];
    for (i, &r) in ranks.iter().enumerate() {
        order[r as usize] = i;
    }
    let nt = times.len();
    let fwd_seed = substream(seed, "particle-forward");

    // Forward driftless particles, row-major [sample][particle][time].
    let paths: Vec<f64> = (0..n_outer)
        .into_par_iter()
        .flat_map_iter(|s| {
            let sample_seed = mix_key(fwd_seed, s as u64);
            let mut block = Vec::with_capacity(n * nt);
            for i in 0..n {
                let mut rng = path_rng(sample_seed, ranks[i]);
                let mut x = x0[i];
                block.push(x);
                for k in 0..nt - 1 {
                    let dw: f64 = StandardNormal.sample(&mut rng);
                    x += dw * (times[k + 1] - times[k]).sqrt();
                    block.push(x);
                }
            }
            block
        })
        .collect();
    let at = |s: usize, i: usize, k: usize| paths[(s * n + i) * nt + k];

    // Terminal values and prepared functionals per sample.
    let terminal: Vec<(f64, crate::functional::PreparedPsi)> = (0..n_outer)
        .into_par_iter()
        .map(|s| {
            let cloud: Vec<f64> = order.iter().map(|&i| at(s, i, nt - 1)).collect();
            let m = DiscreteMeasure::uniform(cloud)?;
            let prepared = psi.prepare(&m)?;
            Ok((prepared.value, prepared))
        })
        .collect::<Result<_>>()?;

    let nf = basis.n_features();
    let ns = basis.n_symmetric();
    let mut values: Vec<f64> = terminal.iter().map(|t| t.0).collect();
    let mut yn = vec![0.0; nt];
    let mut yn_stderr = vec![0.0; nt];
    let mut zn = vec![0.0; n * nt];
    let mut y_coefs: Vec<Vec<f64>> = vec![Vec::new(); nt - 1];
    let mut z_coefs: Vec<Vec<f64>> = vec![Vec::new(); nt - 1];
    let mut ridge_knots = Vec::new();
    let mut fitted_first = vec![0.0; nt];
    let mut hull = MomentHull::new(basis.moment_degree);

    let stats = |v: &[f64]| -> (f64, f64) {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var =
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        (mean, (var / v.len() as f64).sqrt())
    };

    let (tm, ts) = stats(&values);
    yn[nt - 1] = tm;
    yn_stderr[nt - 1] = ts;
    fitted_first[nt - 1] = values[0];
    for i in 0..n {
        let col: Vec<f64> =
            (0..n_outer).map(|s| terminal[s].1.flat_grad(at(s, i, nt - 1))).collect();
        zn[i * nt + nt - 1] = col.iter().sum::<f64>() / n_outer as f64;
    }

    // Per-sample moment vectors at one knot, accumulated in rank order.
    let moments_at = |k: usize| -> Vec<Vec<f64>> {
        (0..n_outer)
            .into_par_iter()
            .map(|s| {
                let cloud: Vec<f64> = order.iter().map(|&i| at(s, i, k)).collect();
                basis.moment_vector(&cloud)
            })
            .collect()
    };
    for m in moments_at(nt - 1) {
        hull.absorb(&m);
    }

    for k in (0..nt - 1).rev() {
        let dt = times[k + 1] - times[k];
        let moments = moments_at(k);
        for m in &moments {
            hull.absorb(m);
        }

        // Pre-fit of the next-knot values on the symmetric features: it
        // supplies the y argument of the generator and centers the kernel
        // targets, so it must not see this knot's generator increment.
        let mut y_feats = vec![0.0; n_outer * ns];
        for (s, m) in moments.iter().enumerate() {
            y_feats[s * ns..(s + 1) * ns].copy_from_slice(&m[..ns]);
        }
        let (yc_pre, pre_ridge) = linreg::least_squares_with_info(&y_feats, &values, ns)?;
        let y_pre: Vec<f64> = (0..n_outer)
            .map(|s| linreg::predict(&yc_pre, &y_feats[s * ns..(s + 1) * ns]))
            .collect();

        // Kernel regression on centered martingale increments, one row per
        // (sample, rank). Centering by the pre-fit leaves the projection
        // unchanged (the pre-fit is measurable at this knot) but shrinks
        // the target variance to the one-step scale.
        let mut z_feats = vec![0.0; n_outer * n * nf];
        let mut z_targets = vec![0.0; n_outer * n];
        for s in 0..n_outer {
            for (r, &i) in order.iter().enumerate() {
                let row = s * n + r;
                basis.fill_features(
                    &moments[s],
                    at(s, i, k),
                    &mut z_feats[row * nf..(row + 1) * nf],
                );
                let dw = at(s, i, k + 1) - at(s, i, k);
                z_targets[row] = n as f64 * (values[s] - y_pre[s]) * dw / dt;
            }
        }
        let (zc, z_ridge) = linreg::least_squares_with_info(&z_feats, &z_targets, nf)?;

        // Generator step on the realized values.
        let zero_gen = matches!(f.kind, GeneratorKind::Zero);
        if !zero_gen {
            let increments: Vec<f64> = (0..n_outer)
                .into_par_iter()
                .map(|s| {
                    let cloud: Vec<f64> = order.iter().map(|&i| at(s, i, k)).collect();
                    let m = DiscreteMeasure::uniform(cloud.clone())?;
                    let mut acc = 0.0;
                    for (r, &x) in cloud.iter().enumerate() {
                        let row = s * n + r;
                        let nz = linreg::predict(&zc, &z_feats[row * nf..(row + 1) * nf]);
                        acc += f.eval(times[k], x, &m, y_pre[s], nz)?;
                    }
                    Ok(acc / n as f64 * dt)
                })
                .collect::<Result<_>>()?;
            for (s, inc) in increments.iter().enumerate() {
                values[s] += inc;
            }
        }

        // Value fit at this knot, re-estimated after the generator step so
        // the stored coefficients describe the full backward update.
        let (yc, y_hat, y_ridge) = if zero_gen {
            (yc_pre, y_pre, pre_ridge)
        } else {
            let (yc2, r2) = linreg::least_squares_with_info(&y_feats, &values, ns)?;
            let y2 = (0..n_outer)
                .map(|s| linreg::predict(&yc2, &y_feats[s * ns..(s + 1) * ns]))
                .collect();
            (yc2, y2, pre_ridge || r2)
        };
        if y_ridge || z_ridge {
            ridge_knots.push(k);
        }

        let (_, vs) = stats(&values);
        yn[k] = y_hat.iter().sum::<f64>() / n_outer as f64;
        yn_stderr[k] = vs;
        fitted_first[k] = y_hat[0];
        for (r, &i) in order.iter().enumerate() {
            let mut acc = 0.0;
            for s in 0..n_outer {
                let row = s * n + r;
                acc += linreg::predict(&zc, &z_feats[row * nf..(row + 1) * nf]);
            }
            zn[i * nt + k] = acc / n_outer as f64;
        }
        y_coefs[k] = yc;
        z_coefs[k] = zc;
    }

    let first_paths: Vec<f64> =
        (0..n).flat_map(|i| (0..nt).map(move |k| at(0, i, k))).collect();

    ridge_knots.reverse();
    Ok(ParticleBsdePaths {
        n,
        times: times.to_vec(),
        yn,
        yn_stderr,
        zn,
        basis_spec: basis.describe(),
        seed,
        ridge_knots,
        basis,
        y_coefs,
        z_coefs,
        terminal: psi.clone(),
        hull,
        first_paths,
        fitted_first,
    })
}

/// Scalar (one-particle) backward solver: the degenerate-cloud case of
/// [`solve_n_particle`], for measure-independent data. Same code path, so
/// the reduction is exact by construction.
pub fn solve_classical_bsde(
    f: &GeneratorSpec,
    psi: &TerminalFunctional,
    x0: f64,
    times: &[f64],
    n_outer: usize,
    basis: BasisSpec,
    seed: u64,
) -> Result<ParticleBsdePaths> {
    solve_n_particle(f, psi, 1, &DiscreteMeasure::dirac(x0), times, n_outer, basis, seed)
}

fn hull_gate(m: &DiscreteMeasure, hull: &MomentHull) -> Result<()> {
    if !hull.contains(m) {
        return Err(Error::Domain(
            "measure's moments fall outside the training clouds' moment hull; the regression \
             has no support there"
                .into(),
        ));
    }
    Ok(())
}

/// Index of the knot at or just below `t`, with the linear-interpolation
/// weight toward the next knot.
fn locate(t: f64, times: &[f64]) -> Result<(usize, f64)> {
    let last = times.len() - 1;
    if t < times[0] - 1e-9 || t > times[last] + 1e-9 {
        return Err(Error::InvalidInput(format!(
            "time {t} outside the solved window [{}, {}]",
            times[0], times[last]
        )));
    }
    if t >= times[last] - 1e-9 {
        return Ok((last, 0.0));
    }
    let k = times.iter().rposition(|&u| u <= t + 1e-9).unwrap_or(0).min(last - 1);
    let w = ((t - times[k]) / (times[k + 1] - times[k])).clamp(0.0, 1.0);
    Ok((k, w))
}

fn aggregate_with(paths: &ParticleBsdePaths, provenance: Provenance) -> Result<WbsdeSolution> {
    let times = Arc::new(paths.times.clone());
    let t0 = times[0];
    let horizon = *times.last().expect("validated grid");
    let basis = paths.basis;
    let hull = paths.hull.clone();
    let psi = paths.terminal.clone();
    let y_coefs = Arc::new(paths.y_coefs.clone());
    let z_coefs = Arc::new(paths.z_coefs.clone());

    let (times_y, hull_y, psi_y, basis_y) = (times.clone(), hull.clone(), psi.clone(), basis);
    let yc = y_coefs.clone();
    let y = move |t: f64, m: &DiscreteMeasure| -> Result<f64> {
        hull_gate(m, &hull_y)?;
        let (k, w) = locate(t, &times_y)?;
        let mom = basis_y.moment_vector_of(m);
        let eval_knot = |k: usize| -> f64 {
            if k == times_y.len() - 1 {
                psi_y.eval(m)
            } else {
                linreg::predict(&yc[k], &mom[..basis_y.n_symmetric()])
            }
        };
        let v = eval_knot(k);
        Ok(if w > 0.0 { (1.0 - w) * v + w * eval_knot(k + 1) } else { v })
    };

    let zc = z_coefs;
    let z_batch = move |t: f64, xs: &[f64], m: &DiscreteMeasure| -> Result<Vec<f64>> {
        hull_gate(m, &hull)?;
        let (k, w) = locate(t, &times)?;
        let mom = basis.moment_vector_of(m);
        let mut feats = vec![0.0; basis.n_features()];
        let prepared =
            if k == times.len() - 1 || w > 0.0 && k + 1 == times.len() - 1 {
                Some(psi.prepare(m)?)
            } else {
                None
            };
        let mut eval_knot = |k: usize, x: f64| -> f64 {
            if k == times.len() - 1 {
                prepared.as_ref().expect("prepared at terminal").flat_grad(x)
            } else {
                basis.fill_features(&mom, x, &mut feats);
                linreg::predict(&zc[k], &feats)
            }
        };
        Ok(xs
            .iter()
            .map(|&x| {
                let v = eval_knot(k, x);
                if w > 0.0 { (1.0 - w) * v + w * eval_knot(k + 1, x) } else { v }
            })
            .collect())
    };

    Ok(WbsdeSolution::new(t0, horizon, provenance, y, z_batch))
}

/// Turns the fitted regression functionals into an evaluable solution:
/// `Y(t, m)` re-runs the symmetric fit on `m`'s moments, `Z(t, x, m)` the
/// crossed fit at `(x, m)`, both linearly interpolated between knots.
/// Evaluation outside the training clouds' widened moment hull is refused
/// with a domain error rather than silently extrapolated.
pub fn aggregate_solution(paths: &ParticleBsdePaths) -> Result<WbsdeSolution> {
    aggregate_with(paths, Provenance::Particle)
}

/// [`aggregate_solution`] for a classically trained (one-particle,
/// measure-independent) run.
pub fn aggregate_classical(paths: &ParticleBsdePaths) -> Result<WbsdeSolution> {
    aggregate_with(paths, Provenance::Classical)
}

/// Exact nested-Monte-Carlo oracle for the quadratic generator `z^2/2`:
/// with the cloud `x_1..x_n` at time-to-maturity `tau`,
/// `Yn = (1/n) log E[exp(n psi(mu^n_T))]` and
/// `nZ^i = E[dx d_m psi(mu^n_T)(X^i_T) exp(n psi)] / E[exp(n psi)]`,
/// both over `n_inner` common draws with log-sum-exp stabilization
/// (finite whenever `n * sup|psi|` fits the double exponent budget).
pub fn quadratic_particle_exact(
    psi: &TerminalFunctional,
    n: usize,
    tau: f64,
    m: &DiscreteMeasure,
    n_inner: usize,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    if n == 0 || n > QUADRATIC_EXACT_MAX_N {
        return Err(Error::InvalidInput(format!(
            "quadratic oracle handles 1..={QUADRATIC_EXACT_MAX_N} particles, got {n}"
        )));
    }
    if !(tau >= 0.0) {
        return Err(Error::InvalidInput(format!("time to maturity must be >= 0, got {tau}")));
    }
    if n_inner < 2 {
        return Err(Error::InvalidInput("need at least two inner draws".into()));
    }
    let x0 = initial_cloud(m, n)?;
    if tau == 0.0 {
        let m0 = DiscreteMeasure::uniform(x0.clone())?;
        let prepared = psi.prepare(&m0)?;
        return Ok((prepared.value, x0.iter().map(|&x| prepared.flat_grad(x)).collect()));
    }
    let sq = tau.sqrt();
    let rng_seed = substream(seed, "quadratic-exact");

    // Per inner draw: the log weight n*psi and the n gradient evaluations.
    let rows: Vec<(f64, Vec<f64>)> = (0..n_inner)
        .into_par_iter()
        .map(|j| {
            let mut rng = path_rng(rng_seed, j as u64);
            let cloud: Vec<f64> = x0
                .iter()
                .map(|&x| {
                    let w: f64 = StandardNormal.sample(&mut rng);
                    x + sq * w
                })
                .collect();
            let mt = DiscreteMeasure::uniform(cloud.clone())?;
            let prepared = psi.prepare(&mt)?;
            let grads = cloud.iter().map(|&x| prepared.flat_grad(x)).collect();
            Ok((n as f64 * prepared.value, grads))
        })
        .collect::<Result<_>>()?;

    let peak = rows.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    let mut numer = vec![0.0; n];
    for (s, grads) in &rows {
        let w = (s - peak).exp();
        denom += w;
        for (acc, g) in numer.iter_mut().zip(grads) {
            *acc += w * g;
        }
    }
    let yn = (peak + (denom / n_inner as f64).ln()) / n as f64;
    let nz = numer.iter().map(|v| v / denom).collect();
    Ok((yn, nz))
}

/// One row of a particle-count convergence study.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub seed: u64,
    pub y0_estimate: f64,
    pub reference: f64,
    pub abs_error: f64,
    pub runtime_ms: u128,
}

/// Convergence study over particle counts with a per-cloud reference value.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvergenceStudy {
    pub rows: Vec<ConvergenceRow>,
    /// Slope of log(abs_error) against log(n); the conjectured value for
    /// smooth data is -1/2, reported rather than asserted.
    pub fitted_rate: f64,
}

impl ConvergenceStudy {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,seed,Y0_estimate,reference,abs_error,runtime_ms\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.12e},{:.12e},{:.12e},{}\n",
                r.n, r.seed, r.y0_estimate, r.reference, r.abs_error, r.runtime_ms
            ));
        }
        out
    }
}

/// Runs [`solve_n_particle`] for each count in `ns` and compares `yn[0]`
/// with `reference(n, initial cloud)`; the fitted log-log error slope is
/// the measured convergence rate.
#[allow(clippy::too_many_arguments)]
pub fn convergence_study(
    f: &GeneratorSpec,
    psi: &TerminalFunctional,
    mu0: &DiscreteMeasure,
    ns: &[usize],
    times: &[f64],
    n_outer: usize,
    basis: BasisSpec,
    seed: u64,
    reference: &(dyn Fn(usize, &DiscreteMeasure) -> Result<f64> + Sync),
) -> Result<ConvergenceStudy> {
    if ns.is_empty() {
        return Err(Error::InvalidInput("convergence study needs at least one count".into()));
    }
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let start = Instant::now();
        let paths = solve_n_particle(f, psi, n, mu0, times, n_outer, basis, seed)?;
        let runtime_ms = start.elapsed().as_millis();
        let cloud = DiscreteMeasure::uniform(initial_cloud(mu0, n)?)?;
        let reference_value = reference(n, &cloud)?;
        rows.push(ConvergenceRow {
            n,
            seed,
            y0_estimate: paths.yn[0],
            reference: reference_value,
            abs_error: (paths.yn[0] - reference_value).abs(),
            runtime_ms,
        });
    }
    let mut feats = Vec::with_capacity(rows.len() * 2);
    let mut targets = Vec::with_capacity(rows.len());
    for r in &rows {
        feats.extend_from_slice(&[1.0, (r.n as f64).ln()]);
        targets.push(r.abs_error.max(1e-300).ln());
    }
    let fitted_rate = if rows.len() >= 2 {
        linreg::least_squares(&feats, &targets, 2)?[1]
    } else {
        f64::NAN
    };
    Ok(ConvergenceStudy { rows, fitted_rate })
}
