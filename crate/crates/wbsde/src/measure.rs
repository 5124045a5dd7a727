//! Algebra of probability measures on the real line: weighted particle
//! clouds, convolution, exact 1-D transport distance, relative entropy
//! against Gaussian references, and numeric linear functional derivatives.
//!
//! Measures are particle clouds because every flow in this crate is sample
//! generated; densities on uniform grids exist solely for entropy
//! quadrature, which is meaningless on purely atomic inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on the support size produced by [`convolve`].
pub const DEFAULT_MAX_SUPPORT: usize = 200_000;

/// Compensated (Neumaier) sum; keeps weight validation exact enough for
/// clouds with hundreds of thousands of atoms.
pub fn kahan_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut s = 0.0;
    let mut c = 0.0;
    for x in xs {
        let t = s + x;
        if s.abs() >= x.abs() {
            c += (s - t) + x;
        } else {
            c += (x - t) + s;
        }
        s = t;
    }
    s + c
}

// ---------------------------------------------------------------------------
// DiscreteMeasure
// ---------------------------------------------------------------------------

/// A probability measure with finite support: `sum_i weights[i] delta_{points[i]}`.
///
/// Weights are non-negative and sum to 1 within `1e-12`; atom order is
/// preserved by all operations that do not need sorting.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "RawDiscreteMeasure")]
pub struct DiscreteMeasure {
    points: Vec<f64>,
    weights: Vec<f64>,
}

#[derive(Deserialize)]
struct RawDiscreteMeasure {
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl TryFrom<RawDiscreteMeasure> for DiscreteMeasure {
    type Error = Error;
    fn try_from(raw: RawDiscreteMeasure) -> Result<Self> {
        DiscreteMeasure::new(raw.points, raw.weights)
    }
}

impl DiscreteMeasure {
    /// Validated constructor: equal non-zero lengths, finite points,
    /// non-negative weights summing to 1 within 1e-12.
    pub fn new(points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() || points.len() != weights.len() {
            return Err(Error::InvalidInput(format!(
                "measure needs equal non-zero lengths, got {} points, {} weights",
                points.len(),
                weights.len()
            )));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidInput("non-finite point".into()));
        }
        for &w in &weights {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidInput(format!("bad weight {w}")));
            }
        }
        let sum = kahan_sum(weights.iter().copied());
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!(
                "weights sum to {sum}, expected 1 within 1e-12"
            )));
        }
        Ok(Self { points, weights })
    }

    /// Constructor that rescales non-negative weights with any positive sum.
    pub fn from_unnormalized(points: Vec<f64>, mut weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidInput("bad weight in unnormalized input".into()));
        }
        let sum = kahan_sum(weights.iter().copied());
        if !(sum > 0.0) {
            return Err(Error::InvalidInput("weights sum to zero".into()));
        }
        for w in &mut weights {
            *w /= sum;
        }
        Self::new(points, weights)
    }

    /// Point mass at `x`.
    pub fn dirac(x: f64) -> Self {
        Self { points: vec![x], weights: vec![1.0] }
    }

    /// Uniform weights on the given support.
    pub fn uniform(points: Vec<f64>) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::InvalidInput("uniform measure on empty support".into()));
        }
        let w = 1.0 / n as f64;
        Self::new(points, vec![w; n])
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `int g dm` as an exact weighted sum over atoms.
    pub fn integrate(&self, g: impl Fn(f64) -> f64) -> f64 {
        kahan_sum(self.points.iter().zip(&self.weights).map(|(&x, &w)| w * g(x)))
    }

    pub fn mean(&self) -> f64 {
        self.integrate(|x| x)
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.integrate(|x| (x - m) * (x - m))
    }

    /// Raw moment `int x^k dm`.
    pub fn raw_moment(&self, k: u32) -> f64 {
        self.integrate(|x| x.powi(k as i32))
    }

    /// The mixture `(1 - lambda) self + lambda other`.
    pub fn mix(&self, other: &Self, lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Domain(format!("mixture weight {lambda} outside [0,1]")));
        }
        let mut points = self.points.clone();
        let mut weights: Vec<f64> = self.weights.iter().map(|w| w * (1.0 - lambda)).collect();
        points.extend_from_slice(&other.points);
        weights.extend(other.weights.iter().map(|w| w * lambda));
        Self::from_unnormalized(points, weights)
    }

    /// The mixture `(1 - eps) m + eps delta_x`.
    pub fn mix_dirac(&self, eps: f64, x: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eps) {
            return Err(Error::Domain(format!("mixture weight {eps} outside [0,1]")));
        }
        let mut points = self.points.clone();
        let mut weights: Vec<f64> = self.weights.iter().map(|w| w * (1.0 - eps)).collect();
        points.push(x);
        weights.push(eps);
        Self::new(points, weights)
    }

    /// Sorted-quantile view for repeated quantile lookups.
    pub fn quantiles(&self) -> QuantileView<'_> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.points[a].total_cmp(&self.points[b]));
        let mut cum = Vec::with_capacity(self.len());
        let mut acc = 0.0;
        for &i in &idx {
            acc += self.weights[i];
            cum.push(acc);
        }
        if let Some(last) = cum.last_mut() {
            *last = 1.0;
        }
        QuantileView { m: self, idx, cum }
    }

    /// Deterministic stratified reduction to `n` atoms: quantiles at the
    /// midpoints `(k + 1/2)/n`, uniform weights. Identity when `n >= len`.
    pub fn stratified(&self, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidInput("stratified to zero atoms".into()));
        }
        if n >= self.len() {
            return Ok(self.clone());
        }
        let qv = self.quantiles();
        let pts: Vec<f64> = (0..n).map(|k| qv.quantile((k as f64 + 0.5) / n as f64)).collect();
        Self::uniform(pts)
    }

    /// Two-column text serialization: one `point weight` pair per line.
    pub fn to_two_column(&self) -> String {
        let mut out = String::new();
        for (p, w) in self.points.iter().zip(&self.weights) {
            out.push_str(&format!("{p} {w}\n"));
        }
        out
    }

    pub fn from_two_column(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let (Some(p), Some(w)) = (it.next(), it.next()) else {
                return Err(Error::InvalidInput(format!("line {}: expected two columns", lineno + 1)));
            };
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::InvalidInput(format!("line {}: {e}", lineno + 1)))
            };
            points.push(parse(p)?);
            weights.push(parse(w)?);
        }
        Self::new(points, weights)
    }
}

/// Precomputed sorted view of a measure for quantile evaluation.
pub struct QuantileView<'a> {
    m: &'a DiscreteMeasure,
    idx: Vec<usize>,
    cum: Vec<f64>,
}

impl QuantileView<'_> {
    /// Left-continuous generalized inverse of the CDF at `u` in [0, 1].
    pub fn quantile(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        let pos = self.cum.partition_point(|&c| c < u);
        let pos = pos.min(self.idx.len() - 1);
        self.m.points[self.idx[pos]]
    }
}

// ---------------------------------------------------------------------------
// GridDensity & GaussianSpec
// ---------------------------------------------------------------------------

/// A density on a uniform grid: node `k` sits at `left + k step` and carries
/// density `values[k]`; rectangle-rule mass `step * sum(values)` is 1.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "RawGridDensity")]
pub struct GridDensity {
    left: f64,
    step: f64,
    values: Vec<f64>,
}

#[derive(Deserialize)]
struct RawGridDensity {
    left: f64,
    step: f64,
    values: Vec<f64>,
}

impl TryFrom<RawGridDensity> for GridDensity {
    type Error = Error;
    fn try_from(raw: RawGridDensity) -> Result<Self> {
        GridDensity::new(raw.left, raw.step, raw.values)
    }
}

impl GridDensity {
    pub fn new(left: f64, step: f64, values: Vec<f64>) -> Result<Self> {
        if !(step > 0.0) || !left.is_finite() || values.is_empty() {
            return Err(Error::InvalidInput("grid density needs step > 0 and nodes".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput("negative or non-finite density value".into()));
        }
        let mass = step * kahan_sum(values.iter().copied());
        if (mass - 1.0).abs() > 1e-8 {
            return Err(Error::InvalidInput(format!(
                "grid density mass {mass}, expected 1 within 1e-8"
            )));
        }
        Ok(Self { left, step, values })
    }

    /// Rectangle-sample a density on `n` nodes starting at `left` and
    /// renormalize; for smooth densities whose mass is inside the grid the
    /// adjustment is at rounding level.
    pub fn discretize(f: impl Fn(f64) -> f64, left: f64, step: f64, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidInput("discretize on zero nodes".into()));
        }
        let mut values: Vec<f64> = (0..n).map(|k| f(left + k as f64 * step).max(0.0)).collect();
        let mass = step * kahan_sum(values.iter().copied());
        if !(mass > 0.0) {
            return Err(Error::InvalidInput("density mass is zero on the grid".into()));
        }
        for v in &mut values {
            *v /= mass;
        }
        Self::new(left, step, values)
    }

    pub fn left(&self) -> f64 {
        self.left
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn node(&self, k: usize) -> f64 {
        self.left + k as f64 * self.step
    }

    pub fn right(&self) -> f64 {
        self.node(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Parameters of a Gaussian reference law `N(mean, variance)`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub mean: f64,
    pub variance: f64,
}

impl GaussianSpec {
    pub fn new(mean: f64, variance: f64) -> Result<Self> {
        if !(variance > 0.0) || !mean.is_finite() || !variance.is_finite() {
            return Err(Error::InvalidInput(format!(
                "gaussian spec needs finite mean and variance > 0, got ({mean}, {variance})"
            )));
        }
        Ok(Self { mean, variance })
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let d = x - self.mean;
        (-d * d / (2.0 * self.variance)).exp() / (2.0 * std::f64::consts::PI * self.variance).sqrt()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        normal_cdf((x - self.mean) / self.variance.sqrt())
    }
}

/// Complementary error function (rational Chebyshev fit, relative error
/// below 1.2e-7; used only for tail-mass coverage checks).
pub fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let poly = -z * z - 1.265_512_23
        + t * (1.000_023_68
            + t * (0.374_091_96
                + t * (0.096_784_18
                    + t * (-0.186_288_06
                        + t * (0.278_868_07
                            + t * (-1.135_203_98
                                + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77))))))));
    let ans = t * poly.exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Law of `X + X'` for independent `X ~ m`, `X' ~ m2`.
///
/// All pairs are enumerated when `|m| * |m2| <= max_support`; otherwise the
/// product is thinned by a seed-free deterministic stride chosen coprime to
/// `|m2|` so the selection is stratified across both factors, and the
/// selected weights are renormalized.
pub fn convolve(m: &DiscreteMeasure, m2: &DiscreteMeasure, max_support: usize) -> Result<DiscreteMeasure> {
    if max_support == 0 {
        return Err(Error::InvalidInput("convolve: max_support must be >= 1".into()));
    }
    let (n1, n2) = (m.len(), m2.len());
    let total = n1.checked_mul(n2).ok_or_else(|| Error::InvalidInput("convolve: support overflow".into()))?;
    if total <= max_support {
        let mut points = Vec::with_capacity(total);
        let mut weights = Vec::with_capacity(total);
        for (x, w) in m.points.iter().zip(&m.weights) {
            for (y, v) in m2.points.iter().zip(&m2.weights) {
                points.push(x + y);
                weights.push(w * v);
            }
        }
        return DiscreteMeasure::from_unnormalized(points, weights);
    }
    // Deterministic stratified thinning of the pair lattice.
    let mut stride = total.div_ceil(max_support);
    fn gcd(mut a: usize, mut b: usize) -> usize {
        while b != 0 {
            (a, b) = (b, a % b);
        }
        a
    }
    while gcd(stride, n2) != 1 {
        stride += 1;
    }
    let kept = total.div_ceil(stride);
    let mut points = Vec::with_capacity(kept);
    let mut weights = Vec::with_capacity(kept);
    let mut k = 0usize;
    while k < total {
        let (i, j) = (k / n2, k % n2);
        points.push(m.points[i] + m2.points[j]);
        weights.push(m.weights[i] * m2.weights[j]);
        k += stride;
    }
    DiscreteMeasure::from_unnormalized(points, weights)
}

/// Exact 1-D Wasserstein-1 distance via the quantile-function L1 distance
/// computed on the merged weight partition of the two CDFs.
pub fn wasserstein1(m: &DiscreteMeasure, m2: &DiscreteMeasure) -> f64 {
    let qa = m.quantiles();
    let qb = m2.quantiles();
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut prev = 0.0f64;
    let mut acc = 0.0f64;
    loop {
        let ca = qa.cum[ia];
        let cb = qb.cum[ib];
        let c = ca.min(cb);
        let xa = qa.m.points[qa.idx[ia]];
        let xb = qb.m.points[qb.idx[ib]];
        acc += (c - prev).max(0.0) * (xa - xb).abs();
        prev = c;
        if c >= 1.0 {
            break;
        }
        if ca <= c {
            ia = (ia + 1).min(qa.idx.len() - 1);
        }
        if cb <= c {
            ib = (ib + 1).min(qb.idx.len() - 1);
        }
    }
    acc
}

/// Relative entropy `D(m | gamma) = int log(dm/dgamma) dm` by rectangle
/// quadrature on the grid.
///
/// Returns `+infinity` when `m` puts mass where the discretized Gaussian
/// density is below 1e-300. The grid must cover the Gaussian up to tail mass
/// 1e-10 on each side, otherwise a domain-coverage error is raised.
pub fn relative_entropy(m: &GridDensity, gamma: &GaussianSpec) -> Result<f64> {
    let half = 0.5 * m.step();
    let tail = gamma.cdf(m.left() - half) + (1.0 - gamma.cdf(m.right() + half));
    if tail >= 1e-10 {
        return Err(Error::DomainCoverage(format!(
            "grid [{}, {}] leaves Gaussian tail mass {tail:.3e} uncovered",
            m.left(),
            m.right()
        )));
    }
    let mut acc = 0.0;
    for (k, &v) in m.values().iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        let g = gamma.pdf(m.node(k));
        if g < 1e-300 {
            return Ok(f64::INFINITY);
        }
        acc += m.step() * v * (v / g).ln();
    }
    // Quadrature can dip a hair below zero for m ~ gamma; clamp rounding only.
    Ok(if acc < 0.0 && acc > -1e-12 { 0.0 } else { acc })
}

/// Finite-difference linear functional derivative of `U` at `(m, x)`:
/// `[U((1-eps) m + eps delta_x) - U(m)] / eps`, recentered by its m-average
/// so the zero-mean normalization `int dU dm = 0` holds exactly on `m`.
pub fn flat_derivative_fd(
    u: &dyn Fn(&DiscreteMeasure) -> f64,
    m: &DiscreteMeasure,
    x: f64,
    eps: f64,
) -> Result<f64> {
    if !(eps > 0.0 && eps <= 0.1) {
        return Err(Error::Domain(format!("flat derivative step {eps} outside (0, 0.1]")));
    }
    let base = u(m);
    let raw = |y: f64| -> Result<f64> { Ok((u(&m.mix_dirac(eps, y)?) - base) / eps) };
    let at_x = raw(x)?;
    let mut avg = 0.0;
    for (&p, &w) in m.points().iter().zip(m.weights()) {
        if w == 0.0 {
            continue;
        }
        avg += w * raw(p)?;
    }
    Ok(at_x - avg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    /// Exact min-cost assignment (Hungarian with potentials). Test-only LP
    /// oracle: a transport problem with rational weights expands to unit
    /// masses and becomes an assignment problem.
    fn hungarian(cost: &[Vec<f64>]) -> f64 {
        let n = cost.len();
        let inf = f64::INFINITY;
        let mut u = vec![0.0f64; n + 1];
        let mut v = vec![0.0f64; n + 1];
        let mut p = vec![0usize; n + 1];
        let mut way = vec![0usize; n + 1];
        for i in 1..=n {
            p[0] = i;
            let mut j0 = 0usize;
            let mut minv = vec![inf; n + 1];
            let mut used = vec![false; n + 1];
            loop {
                used[j0] = true;
                let i0 = p[j0];
                let mut delta = inf;
                let mut j1 = 0usize;
                for j in 1..=n {
                    if used[j] {
                        continue;
                    }
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
                for j in 0..=n {
                    if used[j] {
                        u[p[j]] += delta;
                        v[j] -= delta;
                    } else {
                        minv[j] -= delta;
                    }
                }
                j0 = j1;
                if p[j0] == 0 {
                    break;
                }
            }
            loop {
                let j1 = way[j0];
                p[j0] = p[j1];
                j0 = j1;
                if j0 == 0 {
                    break;
                }
            }
        }
        (1..=n).map(|j| cost[p[j] - 1][j - 1]).sum()
    }

    /// Transport LP by unit-mass expansion: weights must be multiples of 1/q.
    fn transport_lp(m: &DiscreteMeasure, m2: &DiscreteMeasure, q: usize) -> f64 {
        let expand = |m: &DiscreteMeasure| -> Vec<f64> {
            let mut units = Vec::new();
            for (&p, &w) in m.points().iter().zip(m.weights()) {
                let k = (w * q as f64).round() as usize;
                units.extend(std::iter::repeat(p).take(k));
            }
            assert_eq!(units.len(), q, "weights must be multiples of 1/q");
            units
        };
        let a = expand(m);
        let b = expand(m2);
        let cost: Vec<Vec<f64>> =
            a.iter().map(|&x| b.iter().map(|&y| (x - y).abs()).collect()).collect();
        hungarian(&cost) / q as f64
    }

    fn random_measure(rng: &mut impl Rng, max_atoms: usize) -> DiscreteMeasure {
        let n = rng.gen_range(1..=max_atoms);
        let points: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        DiscreteMeasure::from_unnormalized(points, weights).unwrap()
    }

    #[test]
    fn validation_rejects_malformed_measures() {
        assert!(DiscreteMeasure::new(vec![], vec![]).is_err());
        assert!(DiscreteMeasure::new(vec![0.0], vec![0.5]).is_err());
        assert!(DiscreteMeasure::new(vec![0.0, 1.0], vec![1.5, -0.5]).is_err());
        assert!(DiscreteMeasure::new(vec![f64::NAN], vec![1.0]).is_err());
        assert!(DiscreteMeasure::new(vec![0.0, 1.0], vec![0.5, 0.5]).is_ok());
    }

    #[test]
    fn convolve_with_dirac_is_identity() {
        let m = DiscreteMeasure::new(vec![-1.0, 0.5, 2.0], vec![0.2, 0.3, 0.5]).unwrap();
        let c = convolve(&DiscreteMeasure::dirac(0.0), &m, DEFAULT_MAX_SUPPORT).unwrap();
        assert_eq!(c.points(), m.points());
        for (a, b) in c.weights().iter().zip(m.weights()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn convolve_two_uniform_pairs_by_hand() {
        let m = DiscreteMeasure::new(vec![0.0, 1.0], vec![0.5, 0.5]).unwrap();
        let m2 = DiscreteMeasure::new(vec![0.0, 2.0], vec![0.5, 0.5]).unwrap();
        let c = convolve(&m, &m2, DEFAULT_MAX_SUPPORT).unwrap();
        let mut pairs: Vec<(f64, f64)> =
            c.points().iter().copied().zip(c.weights().iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let expect = [(0.0, 0.25), (1.0, 0.25), (2.0, 0.25), (3.0, 0.25)];
        for ((p, w), (ep, ew)) in pairs.iter().zip(expect) {
            assert_abs_diff_eq!(*p, ep, epsilon = 1e-15);
            assert_abs_diff_eq!(*w, ew, epsilon = 1e-15);
        }
    }

    #[test]
    fn convolve_gaussian_samples_add_moments() {
        let (a, s) = (0.3f64, 0.49f64);
        let (b, t) = (-0.2f64, 0.25f64);
        let mut rng = crate::rng::stream_rng(11, "convolve-moments");
        let n = 2000usize;
        let na = Normal::new(a, s.sqrt()).unwrap();
        let nb = Normal::new(b, t.sqrt()).unwrap();
        let xs: Vec<f64> = (0..n).map(|_| na.sample(&mut rng)).collect();
        let ys: Vec<f64> = (0..n).map(|_| nb.sample(&mut rng)).collect();
        let ma = DiscreteMeasure::uniform(xs).unwrap();
        let mb = DiscreteMeasure::uniform(ys).unwrap();
        // 4e6 pairs exceeds the default cap, so this also exercises thinning.
        let c = convolve(&ma, &mb, DEFAULT_MAX_SUPPORT).unwrap();
        assert!(c.len() <= DEFAULT_MAX_SUPPORT);
        let se_mean = ((s + t) / n as f64).sqrt();
        let se_var = (2.0 / (n as f64 - 1.0)).sqrt() * (s + t);
        assert_abs_diff_eq!(c.mean(), a + b, epsilon = 3.0 * se_mean);
        assert_abs_diff_eq!(c.variance(), s + t, epsilon = 3.0 * se_var);
        // Thinning itself moves moments only marginally relative to all-pairs.
        let exact = convolve(&ma, &mb, usize::MAX / 2).unwrap();
        assert_abs_diff_eq!(c.mean(), exact.mean(), epsilon = 0.02);
        assert_abs_diff_eq!(c.variance(), exact.variance(), epsilon = 0.05);
    }

    #[test]
    fn convolve_is_commutative_up_to_reordering() {
        let mut rng = crate::rng::stream_rng(5, "convolve-comm");
        for _ in 0..20 {
            let m = random_measure(&mut rng, 12);
            let m2 = random_measure(&mut rng, 12);
            let ab = convolve(&m, &m2, DEFAULT_MAX_SUPPORT).unwrap();
            let ba = convolve(&m2, &m, DEFAULT_MAX_SUPPORT).unwrap();
            let key = |c: &DiscreteMeasure| {
                let mut v: Vec<(f64, f64)> =
                    c.points().iter().copied().zip(c.weights().iter().copied()).collect();
                v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
                v
            };
            for (x, y) in key(&ab).iter().zip(key(&ba)) {
                assert_abs_diff_eq!(x.0, y.0, epsilon = 1e-12);
                assert_abs_diff_eq!(x.1, y.1, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn wasserstein_diracs_and_self() {
        let d = wasserstein1(&DiscreteMeasure::dirac(-1.5), &DiscreteMeasure::dirac(2.0));
        assert_abs_diff_eq!(d, 3.5, epsilon = 1e-15);
        let m = DiscreteMeasure::new(vec![0.0, 1.0, 4.0], vec![0.2, 0.5, 0.3]).unwrap();
        assert_abs_diff_eq!(wasserstein1(&m, &m), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn wasserstein_matches_lp_oracle_on_four_point_instances() {
        // Hand-picked 4-point instance, weights in multiples of 1/8.
        let m = DiscreteMeasure::new(vec![-2.0, -0.5, 0.5, 3.0], vec![0.125, 0.375, 0.25, 0.25]).unwrap();
        let m2 = DiscreteMeasure::new(vec![-1.0, 0.0, 1.0, 2.0], vec![0.25, 0.25, 0.375, 0.125]).unwrap();
        let got = wasserstein1(&m, &m2);
        let lp = transport_lp(&m, &m2, 8);
        assert_abs_diff_eq!(got, lp, epsilon = 1e-10);

        // Randomized instances with weights in multiples of 1/16.
        let mut rng = crate::rng::stream_rng(23, "w1-lp");
        for _ in 0..20 {
            let build = |rng: &mut rand_chacha::ChaCha8Rng| {
                let n = rng.gen_range(1..=4usize);
                let pts: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
                let mut units = vec![0usize; n];
                for _ in 0..16 {
                    units[rng.gen_range(0..n)] += 1;
                }
                let w: Vec<f64> = units.iter().map(|&u| u as f64 / 16.0).collect();
                let (pts, w): (Vec<f64>, Vec<f64>) =
                    pts.into_iter().zip(w).filter(|(_, w)| *w > 0.0).unzip();
                DiscreteMeasure::new(pts, w).unwrap()
            };
            let a = build(&mut rng);
            let b = build(&mut rng);
            assert_abs_diff_eq!(wasserstein1(&a, &b), transport_lp(&a, &b, 16), epsilon = 1e-10);
        }
    }

    #[test]
    fn wasserstein_triangle_inequality() {
        let mut rng = crate::rng::stream_rng(7, "w1-triangle");
        for _ in 0..100 {
            let a = random_measure(&mut rng, 10);
            let b = random_measure(&mut rng, 10);
            let c = random_measure(&mut rng, 10);
            let ab = wasserstein1(&a, &b);
            let bc = wasserstein1(&b, &c);
            let ac = wasserstein1(&a, &c);
            assert!(ac <= ab + bc + 1e-10, "triangle violated: {ac} > {ab} + {bc}");
        }
    }

    #[test]
    fn relative_entropy_of_gaussian_against_itself_is_zero() {
        let gamma = GaussianSpec::new(0.0, 1.0).unwrap();
        let grid = GridDensity::discretize(|x| gamma.pdf(x), -9.0, 0.005, 3601).unwrap();
        let d = relative_entropy(&grid, &gamma).unwrap();
        assert_abs_diff_eq!(d, 0.0, epsilon = 1e-8);
    }

    #[test]
    fn relative_entropy_matches_gaussian_kl_closed_form() {
        let sigma2 = 0.49;
        let mu1 = 0.8;
        let gamma = GaussianSpec::new(0.0, sigma2).unwrap();
        let shifted = GaussianSpec::new(mu1, sigma2).unwrap();
        let grid = GridDensity::discretize(|x| shifted.pdf(x), -8.0, 0.004, 4501).unwrap();
        let d = relative_entropy(&grid, &gamma).unwrap();
        assert_abs_diff_eq!(d, mu1 * mu1 / (2.0 * sigma2), epsilon = 1e-6);
    }

    #[test]
    fn relative_entropy_disjoint_support_is_infinite() {
        let gamma = GaussianSpec::new(0.0, 0.0025).unwrap();
        // m concentrated far in the Gaussian's tail: density below 1e-300.
        let m = GridDensity::discretize(
            |x| if (x - 30.0).abs() < 0.5 { 1.0 } else { 0.0 },
            -1.0,
            0.01,
            3301,
        )
        .unwrap();
        assert!(relative_entropy(&m, &gamma).unwrap().is_infinite());
    }

    #[test]
    fn relative_entropy_rejects_narrow_grids() {
        let gamma = GaussianSpec::new(0.0, 1.0).unwrap();
        let grid = GridDensity::discretize(|x| gamma.pdf(x), -2.0, 0.01, 401).unwrap();
        assert!(matches!(relative_entropy(&grid, &gamma), Err(Error::DomainCoverage(_))));
    }

    #[test]
    fn relative_entropy_is_nonnegative() {
        let gamma = GaussianSpec::new(0.1, 0.8).unwrap();
        let mut rng = crate::rng::stream_rng(3, "entropy-nonneg");
        for _ in 0..10 {
            let a: f64 = rng.gen_range(0.3..2.0);
            let c: f64 = rng.gen_range(-0.5..0.5);
            let f = move |x: f64| (-a * (x - c) * (x - c)).exp();
            let grid = GridDensity::discretize(f, -10.0, 0.005, 4001).unwrap();
            let d = relative_entropy(&grid, &gamma).unwrap();
            assert!(d >= 0.0, "entropy {d} < 0");
        }
    }

    #[test]
    fn flat_derivative_of_linear_functional() {
        let m = DiscreteMeasure::new(vec![-1.0, 0.0, 2.0], vec![0.25, 0.5, 0.25]).unwrap();
        let u = |m: &DiscreteMeasure| m.integrate(f64::tanh);
        let x = 0.7;
        let got = flat_derivative_fd(&u, &m, x, 1e-3).unwrap();
        let expect = x.tanh() - m.integrate(f64::tanh);
        assert_abs_diff_eq!(got, expect, epsilon = 1e-3);
    }

    #[test]
    fn flat_derivative_of_constant_is_zero() {
        let m = DiscreteMeasure::uniform(vec![0.0, 1.0]).unwrap();
        let u = |_: &DiscreteMeasure| 4.2;
        assert_abs_diff_eq!(flat_derivative_fd(&u, &m, 0.3, 1e-3).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn flat_derivative_of_squared_cylinder_chain_rule() {
        let mut rng = crate::rng::stream_rng(17, "flat-cylinder");
        let u = |m: &DiscreteMeasure| {
            let v = m.integrate(f64::tanh);
            v * v
        };
        for _ in 0..5 {
            let m = random_measure(&mut rng, 8);
            let x: f64 = rng.gen_range(-2.0..2.0);
            let v = m.integrate(f64::tanh);
            let expect = 2.0 * v * (x.tanh() - v);
            let got = flat_derivative_fd(&u, &m, x, 1e-5).unwrap();
            assert_abs_diff_eq!(got, expect, epsilon = 1e-3);
        }
    }

    #[test]
    fn flat_derivative_error_halves_with_eps() {
        // First-order accuracy: error(eps/2) / error(eps) in [0.3, 0.7].
        let m = DiscreteMeasure::new(vec![-0.8, 0.4, 1.1], vec![0.3, 0.4, 0.3]).unwrap();
        let u = |m: &DiscreteMeasure| {
            let v = m.integrate(f64::tanh);
            v * v
        };
        let x = 0.9f64;
        let v = m.integrate(f64::tanh);
        let exact = 2.0 * v * (x.tanh() - v);
        let e1 = (flat_derivative_fd(&u, &m, x, 1e-2).unwrap() - exact).abs();
        let e2 = (flat_derivative_fd(&u, &m, x, 5e-3).unwrap() - exact).abs();
        let ratio = e2 / e1;
        assert!((0.3..=0.7).contains(&ratio), "halving ratio {ratio}");
    }

    #[test]
    fn flat_derivative_rejects_bad_eps() {
        let m = DiscreteMeasure::dirac(0.0);
        let u = |_: &DiscreteMeasure| 0.0;
        assert!(flat_derivative_fd(&u, &m, 0.0, 0.0).is_err());
        assert!(flat_derivative_fd(&u, &m, 0.0, 0.2).is_err());
    }

    #[test]
    fn quantiles_and_stratified_reduction() {
        let m = DiscreteMeasure::new(vec![2.0, -1.0, 0.0], vec![0.25, 0.5, 0.25]).unwrap();
        let qv = m.quantiles();
        assert_eq!(qv.quantile(0.2), -1.0);
        assert_eq!(qv.quantile(0.6), 0.0);
        assert_eq!(qv.quantile(0.9), 2.0);
        let s = m.stratified(2).unwrap();
        assert_eq!(s.len(), 2);
        // Midpoint quantiles at u = 0.25, 0.75.
        assert_eq!(s.points(), &[-1.0, 0.25_f64.mul_add(0.0, 0.0)]);
    }

    #[test]
    fn two_column_and_json_round_trips() {
        let m = DiscreteMeasure::new(vec![0.125, -3.5], vec![0.75, 0.25]).unwrap();
        let text = m.to_two_column();
        let back = DiscreteMeasure::from_two_column(&text).unwrap();
        assert_eq!(m.points(), back.points());
        assert_eq!(m.weights(), back.weights());
        let js = serde_json::to_string(&m).unwrap();
        let back: DiscreteMeasure = serde_json::from_str(&js).unwrap();
        assert_eq!(m.points(), back.points());
        // Deserialization enforces invariants.
        let bad = r#"{"points":[0.0],"weights":[0.5]}"#;
        assert!(serde_json::from_str::<DiscreteMeasure>(bad).is_err());
        let g = GridDensity::new(-1.0, 0.5, vec![0.5, 1.0, 0.5]).unwrap();
        let js = serde_json::to_string(&g).unwrap();
        let gb: GridDensity = serde_json::from_str(&js).unwrap();
        assert_eq!(g.values(), gb.values());
    }
}
