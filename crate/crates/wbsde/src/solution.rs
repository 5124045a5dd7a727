//! The common solution interface: a value map `Y(t, m)` on measures and a
//! pointwise map `Z(t, x, m)` produced by the various solvers.

use std::sync::Arc;

use crate::error::Result;
use crate::measure::DiscreteMeasure;

/// Which construction produced a solution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    /// Heat-semigroup pushforward of the terminal functional (no generator).
    Zero,
    /// Feynman-Kac construction for a generator linear in `z`.
    Linear,
    /// Additive state-cost generator layered on the zero-generator solution.
    StateCost,
    /// Entropic fixed point for the `z^2/2` generator.
    Quadratic,
    /// Contraction iteration for Lipschitz separable generators.
    Picard,
    /// Aggregated n-particle regression solution.
    Particle,
    /// Aggregation of a classical (measure-independent) solver.
    Classical,
}

type YFn = Arc<dyn Fn(f64, &DiscreteMeasure) -> Result<f64> + Send + Sync>;
type ZBatchFn = Arc<dyn Fn(f64, &[f64], &DiscreteMeasure) -> Result<Vec<f64>> + Send + Sync>;

/// A solution pair. `Y` is evaluated per measure; `Z` is evaluated in
/// batches of spatial points so implementations can amortize any
/// per-measure preparation (flow simulation, functional channel sums).
#[derive(Clone)]
pub struct WbsdeSolution {
    t0: f64,
    horizon: f64,
    provenance: Provenance,
    y: YFn,
    z_batch: ZBatchFn,
}

impl WbsdeSolution {
    pub fn new(
        t0: f64,
        horizon: f64,
        provenance: Provenance,
        y: impl Fn(f64, &DiscreteMeasure) -> Result<f64> + Send + Sync + 'static,
        z_batch: impl Fn(f64, &[f64], &DiscreteMeasure) -> Result<Vec<f64>> + Send + Sync + 'static,
    ) -> Self {
        Self { t0, horizon, provenance, y: Arc::new(y), z_batch: Arc::new(z_batch) }
    }

    /// Earliest time the solution is defined at.
    pub fn t0(&self) -> f64 {
        self.t0
    }

    /// Terminal time `T`.
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn y(&self, t: f64, m: &DiscreteMeasure) -> Result<f64> {
        (self.y)(t, m)
    }

    pub fn z_batch(&self, t: f64, xs: &[f64], m: &DiscreteMeasure) -> Result<Vec<f64>> {
        (self.z_batch)(t, xs, m)
    }

    pub fn z(&self, t: f64, x: f64, m: &DiscreteMeasure) -> Result<f64> {
        Ok(self.z_batch(t, &[x], m)?[0])
    }
}

impl std::fmt::Debug for WbsdeSolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WbsdeSolution")
            .field("t0", &self.t0)
            .field("horizon", &self.horizon)
            .field("provenance", &self.provenance)
            .finish()
    }
}
