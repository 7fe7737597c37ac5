//! Registered experiments, grouped by the layer they exercise.

pub mod conditioning;
pub mod flat;
pub mod geometric;

use rand::Rng;

use super::{ExperimentConfig, Outcome, Result};
use crate::conditional::ResamplePlan;
use crate::geometry::{EmbeddedManifold, Vector};
use crate::ito_map::{scheme_by_name, ItoMap, Scheme, SolutionBundle};
use crate::wiener::{gaussian_vector, sample_noise_stream, NoisePath, TimeGrid};

/// Noise stream families, so different roles never share draws.
pub(crate) const BASE: u64 = 0;
pub(crate) const ALT: u64 = 1;
pub(crate) const TEST: u64 = 2;
pub(crate) const AUX: u64 = 3;

/// Paths kept for `--dump-paths`.
pub(crate) const DUMP_LIMIT: usize = 10;

pub(crate) struct Setup<'m, const D: usize> {
    pub cfg: &'m ExperimentConfig,
    pub m: &'m dyn EmbeddedManifold<D>,
    pub scheme: Box<dyn Scheme<D>>,
    pub x0: Vector<D>,
    pub grid: TimeGrid,
}

impl<'m, const D: usize> Setup<'m, D> {
    pub fn new(cfg: &'m ExperimentConfig, m: &'m dyn EmbeddedManifold<D>, x0: Vector<D>) -> Result<Self> {
        Ok(Setup { cfg, m, scheme: scheme_by_name(&cfg.scheme)?, x0, grid: cfg.grid()? })
    }

    pub fn map(&self) -> Result<ItoMap<'_, D>> {
        Ok(ItoMap::new(self.m, self.scheme.as_ref(), self.x0)?)
    }

    pub fn noise(&self, stream: u64, p: usize) -> NoisePath<D> {
        sample_noise_stream(self.cfg.seed, &[stream, p as u64], self.grid)
    }

    /// Base sample `p` with both transport frames.
    pub fn bundle(&self, map: &ItoMap<'_, D>, stream: u64, p: usize) -> Result<SolutionBundle<D>> {
        Ok(map.solve_full(self.noise(stream, p))?)
    }

    pub fn plan<'a>(
        &self,
        map: ItoMap<'a, D>,
        base: &'a SolutionBundle<D>,
        stream: u64,
        p: usize,
    ) -> Result<ResamplePlan<'a, D>> {
        let tag = (stream << 32) | p as u64;
        Ok(ResamplePlan::new(map, base, self.cfg.n_resamples, self.cfg.seed, tag)?.with_tolerance(self.cfg.gate()))
    }

    pub fn horizon(&self) -> f64 {
        self.grid.horizon()
    }

    /// Index of the grid point nearest `fraction · T`.
    pub fn at(&self, fraction: f64) -> usize {
        self.grid.index_of(fraction * self.grid.horizon())
    }

    /// A point `retract(x₀, P(x₀)g)` with Gaussian `g`.
    pub fn random_point(&self, rng: &mut impl Rng) -> Result<Vector<D>> {
        let g: Vector<D> = gaussian_vector(rng, 1.0);
        Ok(self.m.retract(&self.x0, &(self.m.tangent_projection(&self.x0) * g))?)
    }

    /// Uniformly oriented unit tangent vector at `x`.
    pub fn random_unit_tangent(&self, rng: &mut impl Rng, x: &Vector<D>) -> Vector<D> {
        loop {
            let g: Vector<D> = gaussian_vector(rng, 1.0);
            let v = self.m.tangent_projection(x) * g;
            if v.norm() > 1e-3 {
                return v / v.norm();
            }
        }
    }

    pub fn keep_path(&self, out: &mut Outcome, p: usize, path: &[Vector<D>]) {
        if self.cfg.dump_paths && p < DUMP_LIMIT {
            out.paths.push((p, path.iter().map(|x| x.iter().copied().collect()).collect()));
        }
    }
}

/// `max` that propagates NaN, so a broken computation can never pass a bound.
pub(crate) fn worst(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(0.0, |a, b| if a.is_nan() || b.is_nan() { f64::NAN } else { a.max(b) })
}
