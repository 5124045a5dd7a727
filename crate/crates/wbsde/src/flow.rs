//! Simulation of non-degenerate measure flows, McKean-Vlasov flows,
//! exponential-martingale reweighting, and transition-kernel scores.
//!
//! All flows have unit diffusion. A flow started at `t0` is constant on
//! `[0, t0]`: queries below `t0` return the initial marginal exactly.

use std::io::{Read as _, Write as _};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{wasserstein1, DiscreteMeasure};
use crate::rng::path_rng;

/// Default Euler step used by callers that do not choose their own grid.
pub const DEFAULT_DT: f64 = 1e-2;

/// Slack applied to declared drift bounds before rejecting a sample.
const BOUND_SLACK: f64 = 1e-9;

type PlainDrift = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
type PreparedDrift = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
type MkvPrepare = Arc<dyn Fn(f64, &DiscreteMeasure) -> PreparedDrift + Send + Sync>;

/// Bounded Borel drift `b(t, x)` with a declared sup bound.
#[derive(Clone)]
pub struct DriftFn {
    name: String,
    eval: PlainDrift,
    bound: f64,
}

impl DriftFn {
    pub fn new(
        name: impl Into<String>,
        bound: f64,
        eval: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        if !bound.is_finite() || bound < 0.0 {
            return Err(Error::InvalidInput(format!(
                "drift bound must be finite and nonnegative, got {bound}"
            )));
        }
        Ok(Self { name: name.into(), eval: Arc::new(eval), bound })
    }

    pub fn zero() -> Self {
        Self::new("zero", 0.0, |_, _| 0.0).expect("constant bounds are valid")
    }

    pub fn constant(c: f64) -> Result<Self> {
        Self::new(format!("const({c})"), c.abs(), move |_, _| c)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn eval(&self, t: f64, x: f64) -> f64 {
        (self.eval)(t, x)
    }

    /// Sampled check that `|eval| <= bound` on the product lattice `ts x xs`.
    pub fn validate_on_lattice(&self, ts: &[f64], xs: &[f64]) -> Result<()> {
        for &t in ts {
            for &x in xs {
                let b = self.eval(t, x);
                if !b.is_finite() || b.abs() > self.bound + BOUND_SLACK {
                    return Err(Error::Config(format!(
                        "drift '{}' violates declared bound {} at (t={t}, x={x}): value {b}",
                        self.name, self.bound
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Measure-dependent drift `b(t, x, m)` for McKean-Vlasov simulation.
///
/// `prepare(t, m)` freezes the measure argument and returns the per-point
/// map `x -> b(t, x, m)`; any integrals against `m` are computed once per
/// Euler step instead of once per particle.
#[derive(Clone)]
pub struct MkvDrift {
    name: String,
    prepare: MkvPrepare,
    bound: f64,
}

impl MkvDrift {
    pub fn new(
        name: impl Into<String>,
        bound: f64,
        prepare: impl Fn(f64, &DiscreteMeasure) -> PreparedDrift + Send + Sync + 'static,
    ) -> Result<Self> {
        if !bound.is_finite() || bound < 0.0 {
            return Err(Error::InvalidInput(format!(
                "drift bound must be finite and nonnegative, got {bound}"
            )));
        }
        Ok(Self { name: name.into(), prepare: Arc::new(prepare), bound })
    }

    /// Wraps a measure-independent drift; `prepare` ignores the measure.
    pub fn from_plain(drift: &DriftFn) -> Self {
        let eval = drift.eval.clone();
        Self {
            name: drift.name.clone(),
            bound: drift.bound,
            prepare: Arc::new(move |t, _| {
                let eval = eval.clone();
                Arc::new(move |x| eval(t, x))
            }),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn prepare(&self, t: f64, m: &DiscreteMeasure) -> PreparedDrift {
        (self.prepare)(t, m)
    }
}

/// Sampled path matrix of a unit-diffusion flow on a fixed time grid.
#[derive(Clone)]
pub struct MeasureFlow {
    t0: f64,
    times: Vec<f64>,
    /// Row-major `n_paths x n_times`.
    paths: Vec<f64>,
    n_paths: usize,
    drift: DriftFn,
    seed: u64,
}

impl std::fmt::Debug for MeasureFlow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MeasureFlow")
            .field("t0", &self.t0)
            .field("n_paths", &self.n_paths)
            .field("n_times", &self.times.len())
            .field("drift", &self.drift.name)
            .field("seed", &self.seed)
            .finish()
    }
}

#[derive(Serialize, Deserialize)]
struct FlowMetadata {
    t0: f64,
    times: Vec<f64>,
    n_paths: usize,
    drift_name: String,
    seed: u64,
}

impl MeasureFlow {
    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn drift(&self) -> &DriftFn {
        &self.drift
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Assembles a flow from externally simulated columns (row-major path
    /// matrix). The caller owns the consistency of `paths` with `drift`;
    /// the drift is kept for metadata and later evaluations along the flow.
    pub(crate) fn from_parts(
        t0: f64,
        times: Vec<f64>,
        paths: Vec<f64>,
        n_paths: usize,
        drift: DriftFn,
        seed: u64,
    ) -> Self {
        debug_assert_eq!(paths.len(), n_paths * times.len());
        Self { t0, times, paths, n_paths, drift, seed }
    }

    /// Path `i` as a slice over all grid times.
    pub fn path(&self, i: usize) -> &[f64] {
        let n = self.times.len();
        &self.paths[i * n..(i + 1) * n]
    }

    /// State of path `i` at grid index `k`.
    pub fn state(&self, i: usize, k: usize) -> f64 {
        self.paths[i * self.times.len() + k]
    }

    /// Column `k` of the path matrix.
    pub fn column(&self, k: usize) -> Vec<f64> {
        let n = self.times.len();
        (0..self.n_paths).map(|i| self.paths[i * n + k]).collect()
    }

    /// Empirical marginal at grid index `k`, with uniform weights.
    pub fn marginal(&self, k: usize) -> DiscreteMeasure {
        DiscreteMeasure::uniform(self.column(k)).expect("path columns are finite and nonempty")
    }

    /// Grid index whose time matches `t` within `1e-9`.
    ///
    /// Times below `t0` resolve to index 0: the flow is constant on `[0, t0]`.
    pub fn time_index(&self, t: f64) -> Result<usize> {
        if t < self.t0 {
            if t < 0.0 {
                return Err(Error::InvalidInput(format!("negative time {t}")));
            }
            return Ok(0);
        }
        self.times
            .iter()
            .position(|&s| (s - t).abs() <= 1e-9)
            .ok_or_else(|| Error::InvalidInput(format!("time {t} is not on the flow grid")))
    }

    /// Empirical marginal at time `t` (grid times and `[0, t0]` only).
    pub fn marginal_at(&self, t: f64) -> Result<DiscreteMeasure> {
        Ok(self.marginal(self.time_index(t)?))
    }

    /// Writes `<base>.bin` (little-endian f64 path matrix, row-major) and
    /// `<base>.json` (grid, drift name, seed).
    pub fn save(&self, base: &Path) -> Result<()> {
        let meta = FlowMetadata {
            t0: self.t0,
            times: self.times.clone(),
            n_paths: self.n_paths,
            drift_name: self.drift.name.clone(),
            seed: self.seed,
        };
        let json = serde_json::to_string_pretty(&meta)?;
        std::fs::write(base.with_extension("json"), json)?;
        let mut bytes = Vec::with_capacity(self.paths.len() * 8);
        for &v in &self.paths {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(base.with_extension("bin"))?;
        f.write_all(&bytes)?;
        Ok(())
    }

    /// Inverse of [`MeasureFlow::save`]. The caller resupplies the drift;
    /// its name must match the stored metadata.
    pub fn load(base: &Path, drift: DriftFn) -> Result<Self> {
        let json = std::fs::read_to_string(base.with_extension("json"))?;
        let meta: FlowMetadata = serde_json::from_str(&json)?;
        if meta.drift_name != drift.name {
            return Err(Error::Config(format!(
                "stored flow used drift '{}' but '{}' was supplied",
                meta.drift_name, drift.name
            )));
        }
        let mut bytes = Vec::new();
        std::fs::File::open(base.with_extension("bin"))?.read_to_end(&mut bytes)?;
        let expected = meta.n_paths * meta.times.len() * 8;
        if bytes.len() != expected {
            return Err(Error::InvalidInput(format!(
                "path matrix has {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        let paths = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk size is 8")))
            .collect();
        Ok(Self {
            t0: meta.t0,
            times: meta.times,
            paths,
            n_paths: meta.n_paths,
            drift,
            seed: meta.seed,
        })
    }
}

pub(crate) fn validate_grid(times: &[f64], t0: f64) -> Result<()> {
    if times.len() < 2 {
        return Err(Error::InvalidInput("time grid needs at least two points".into()));
    }
    if (times[0] - t0).abs() > 1e-12 {
        return Err(Error::InvalidInput(format!(
            "time grid must start at t0={t0}, starts at {}",
            times[0]
        )));
    }
    for w in times.windows(2) {
        if w[1] - w[0] <= 0.0 {
            return Err(Error::InvalidInput("time grid must be strictly increasing".into()));
        }
    }
    Ok(())
}

/// Uniform grid from `t0` to `t1` with step at most `dt`.
pub fn uniform_grid(t0: f64, t1: f64, dt: f64) -> Result<Vec<f64>> {
    if !(t1 > t0) || !(dt > 0.0) {
        return Err(Error::InvalidInput(format!(
            "need t1 > t0 and dt > 0, got t0={t0}, t1={t1}, dt={dt}"
        )));
    }
    let n = ((t1 - t0) / dt).ceil() as usize;
    let n = n.max(1);
    let step = (t1 - t0) / n as f64;
    Ok((0..=n).map(|k| t0 + step * k as f64).collect())
}

/// Lattice of x-values covering the support of `mu0` widened by
/// `6 * sqrt(horizon)` on each side, for drift bound checks.
fn drift_check_lattice(mu0: &DiscreteMeasure, horizon: f64) -> Vec<f64> {
    let pts = mu0.points();
    let lo = pts.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = pts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let pad = 6.0 * horizon.max(0.0).sqrt() + 1.0;
    let (a, b) = (lo - pad, hi + pad);
    let n = 33;
    (0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect()
}

/// Euler-Maruyama simulation of `dX = b(t, X) dt + dW` from i.i.d. `mu0`
/// draws. Deterministic given `seed`; each path owns its own RNG stream,
/// so results do not depend on the number of worker threads.
pub fn simulate_flow(
    drift: &DriftFn,
    mu0: &DiscreteMeasure,
    t0: f64,
    times: &[f64],
    n_paths: usize,
    seed: u64,
) -> Result<MeasureFlow> {
    validate_grid(times, t0)?;
    if n_paths < 2 {
        return Err(Error::InvalidInput("need at least two paths".into()));
    }
    let horizon = times[times.len() - 1] - t0;
    drift.validate_on_lattice(times, &drift_check_lattice(mu0, horizon))?;

    let n_times = times.len();
    let quantiles = mu0.quantiles();
    let rows: Vec<Vec<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(seed, i as u64);
            let mut row = Vec::with_capacity(n_times);
            let mut x = quantiles.quantile(rng.gen::<f64>());
            row.push(x);
            for k in 0..n_times - 1 {
                let dt = times[k + 1] - times[k];
                let dw: f64 = StandardNormal.sample(&mut rng);
                x += drift.eval(times[k], x) * dt + dw * dt.sqrt();
                row.push(x);
            }
            row
        })
        .collect();

    let mut paths = Vec::with_capacity(n_paths * n_times);
    for row in rows {
        paths.extend_from_slice(&row);
    }
    Ok(MeasureFlow { t0, times: times.to_vec(), paths, n_paths, drift: drift.clone(), seed })
}

/// McKean-Vlasov flow with its Picard diagnostic.
pub struct MkvFlowResult {
    pub flow: MeasureFlow,
    /// Sup-over-time W1 distance between the final two law iterates.
    /// `NaN` when `n_picard = 0` (no pair of iterates to compare).
    pub picard_gap: f64,
}

/// Simulates `dX = b(t, X, law(X)) dt + dW` by freezing the empirical law
/// within each Euler step (one-pass particle coupling), then iterating the
/// law-to-law map `n_picard` times with the same Brownian increments.
///
/// With a measure-independent drift the output is bit-identical to
/// [`simulate_flow`] under the same seed.
pub fn simulate_mkv_flow(
    drift: &MkvDrift,
    mu0: &DiscreteMeasure,
    t0: f64,
    times: &[f64],
    n_paths: usize,
    n_picard: usize,
    seed: u64,
) -> Result<MkvFlowResult> {
    validate_grid(times, t0)?;
    if n_paths < 2 {
        return Err(Error::InvalidInput("need at least two paths".into()));
    }
    let n_times = times.len();
    let quantiles = mu0.quantiles();

    // Same per-path draw order as simulate_flow: initial uniform, then one
    // standard normal per step. This is what makes the plain-drift
    // reduction exact.
    let inputs: Vec<(f64, Vec<f64>)> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(seed, i as u64);
            let x0 = quantiles.quantile(rng.gen::<f64>());
            let dws: Vec<f64> =
                (0..n_times - 1).map(|_| StandardNormal.sample(&mut rng)).collect();
            (x0, dws)
        })
        .collect();
    let x0: Vec<f64> = inputs.iter().map(|p| p.0).collect();

    // One sweep of the particle system against a frozen marginal sequence.
    // `frozen = None` means the one-pass coupling: each step uses the
    // current cloud's own empirical law.
    let sweep = |frozen: Option<&Vec<DiscreteMeasure>>| -> Result<Vec<Vec<f64>>> {
        let mut xs = x0.clone();
        let mut columns = vec![xs.clone()];
        for k in 0..n_times - 1 {
            let m = match frozen {
                Some(laws) => laws[k].clone(),
                None => DiscreteMeasure::uniform(xs.clone())?,
            };
            let b = drift.prepare(times[k], &m);
            let dt = times[k + 1] - times[k];
            let sq = dt.sqrt();
            xs.par_iter_mut().enumerate().try_for_each(|(i, x)| {
                let bx = b(*x);
                if !bx.is_finite() || bx.abs() > drift.bound + BOUND_SLACK {
                    return Err(Error::Config(format!(
                        "drift '{}' violates declared bound {} at (t={}, x={x}): value {bx}",
                        drift.name, drift.bound, times[k]
                    )));
                }
                *x += bx * dt + inputs[i].1[k] * sq;
                Ok(())
            })?;
            columns.push(xs.clone());
        }
        Ok(columns)
    };

    let mut columns = sweep(None)?;
    let mut gap = f64::NAN;
    for _ in 0..n_picard {
        let laws: Vec<DiscreteMeasure> = columns
            .iter()
            .map(|c| DiscreteMeasure::uniform(c.clone()))
            .collect::<Result<_>>()?;
        let next = sweep(Some(&laws))?;
        gap = 0.0;
        for k in 0..n_times {
            let prev = DiscreteMeasure::uniform(columns[k].clone())?;
            let cur = DiscreteMeasure::uniform(next[k].clone())?;
            gap = gap.max(wasserstein1(&prev, &cur));
        }
        columns = next;
    }

    let mut paths = vec![0.0; n_paths * n_times];
    for (k, col) in columns.iter().enumerate() {
        for i in 0..n_paths {
            paths[i * n_times + k] = col[i];
        }
    }
    let drift_stub = DriftFn::new(drift.name.clone(), drift.bound, |_, _| {
        panic!("McKean-Vlasov flows do not expose a plain (t, x) drift")
    })?;
    Ok(MkvFlowResult {
        flow: MeasureFlow {
            t0,
            times: times.to_vec(),
            paths,
            n_paths,
            drift: drift_stub,
            seed,
        },
        picard_gap: gap,
    })
}

/// Per-path exponential-martingale weights on the flow's grid.
pub struct GirsanovWeight {
    times: Vec<f64>,
    /// Row-major `n_paths x n_times`, all entries positive, column 0 all 1.
    weights: Vec<f64>,
    n_paths: usize,
}

impl GirsanovWeight {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    /// Weight of path `i` at grid index `k`.
    pub fn weight(&self, i: usize, k: usize) -> f64 {
        self.weights[i * self.times.len() + k]
    }

    /// Weight column at grid index `k`.
    pub fn column(&self, k: usize) -> Vec<f64> {
        let n = self.times.len();
        (0..self.n_paths).map(|i| self.weights[i * n + k]).collect()
    }
}

/// Discrete exponential-martingale weights turning `flow`'s path law into
/// the law of the same initial condition driven by `target_drift`.
///
/// Brownian increments are reconstructed from the stored paths and the
/// flow's own drift; per step the log-weight gains
/// `(b_tgt - b) dW - (b_tgt - b)^2 dt / 2`.
pub fn girsanov_weights(flow: &MeasureFlow, target_drift: &DriftFn) -> Result<GirsanovWeight> {
    let times = flow.times();
    let n_times = times.len();
    let xs: Vec<f64> = flow.column(0);
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let horizon = times[n_times - 1] - flow.t0();
    let pad = 6.0 * horizon.sqrt() + 1.0;
    let lattice: Vec<f64> =
        (0..33).map(|k| (lo - pad) + (hi - lo + 2.0 * pad) * k as f64 / 32.0).collect();
    target_drift.validate_on_lattice(times, &lattice)?;

    let rows: Vec<Vec<f64>> = (0..flow.n_paths())
        .into_par_iter()
        .map(|i| {
            let path = flow.path(i);
            let mut log_w = 0.0;
            let mut row = Vec::with_capacity(n_times);
            row.push(1.0);
            for k in 0..n_times - 1 {
                let dt = times[k + 1] - times[k];
                let x = path[k];
                let b = flow.drift().eval(times[k], x);
                let dw = path[k + 1] - x - b * dt;
                let diff = target_drift.eval(times[k], x) - b;
                log_w += diff * dw - 0.5 * diff * diff * dt;
                row.push(log_w.exp());
            }
            row
        })
        .collect();

    let mut weights = Vec::with_capacity(flow.n_paths() * n_times);
    for row in rows {
        weights.extend_from_slice(&row);
    }
    Ok(GirsanovWeight { times: times.to_vec(), weights, n_paths: flow.n_paths() })
}

/// Spatial score `(d/dx) log p(s, y | t, x)` of the constant-drift
/// unit-diffusion transition kernel `Normal(x + c (s - t), s - t)`.
pub fn gaussian_score(s: f64, y: f64, t: f64, x: f64, drift_const: f64) -> Result<f64> {
    if !(s > t) {
        return Err(Error::Domain(format!("score needs s > t, got s={s}, t={t}")));
    }
    let tau = s - t;
    Ok((y - x - drift_const * tau) / tau)
}

/// Silverman's bandwidth rule for a Gaussian KDE: `0.9 min(sd, iqr/1.34) n^{-1/5}`.
pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::InvalidInput("bandwidth rule needs at least two samples".into()));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |u: f64| sorted[((u * n) as usize).min(sorted.len() - 1)];
    let iqr = q(0.75) - q(0.25);
    let scale = var.sqrt().min(iqr / 1.34).max(1e-12);
    Ok(0.9 * scale * n.powf(-0.2))
}

/// Kernel estimate of the spatial score `(d/dx) log p(s, y | t, x)` for the
/// flow's drift, via a common-random-numbers finite difference in `x`.
///
/// Re-simulates `flow.n_paths()` paths from `x` at `t` (and from `x + h`
/// with identical increments), smooths both terminal clouds with a Gaussian
/// kernel of width `bandwidth`, and differences the log-densities at `y`.
pub fn kde_score(
    flow: &MeasureFlow,
    s: f64,
    y: f64,
    t: f64,
    x: f64,
    bandwidth: f64,
) -> Result<f64> {
    if !(s > t) {
        return Err(Error::Domain(format!("score needs s > t, got s={s}, t={t}")));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::Domain(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let dt = flow.times()[1] - flow.times()[0];
    let grid = uniform_grid(t, s, dt.min(s - t))?;
    let n_steps = grid.len() - 1;
    let n = flow.n_paths();
    let seed = crate::rng::substream(flow.seed(), "kde-score");
    let h = 1e-3 * (1.0 + x.abs());

    let terminals: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(seed, i as u64);
            let (mut a, mut b) = (x, x + h);
            for k in 0..n_steps {
                let step = grid[k + 1] - grid[k];
                let dw: f64 = StandardNormal.sample(&mut rng);
                let dw = dw * step.sqrt();
                a += flow.drift().eval(grid[k], a) * step + dw;
                b += flow.drift().eval(grid[k], b) * step + dw;
            }
            (a, b)
        })
        .collect();

    let kernel_sum = |pick: fn(&(f64, f64)) -> f64| -> f64 {
        terminals
            .iter()
            .map(|p| {
                let u = (y - pick(p)) / bandwidth;
                (-0.5 * u * u).exp()
            })
            .sum::<f64>()
    };
    let p0 = kernel_sum(|p| p.0);
    let p1 = kernel_sum(|p| p.1);
    if p0 <= 0.0 || p1 <= 0.0 {
        return Err(Error::DomainCoverage(format!(
            "no kernel mass near y={y}; enlarge bandwidth or paths"
        )));
    }
    Ok((p1.ln() - p0.ln()) / h)
}
