//! Experiments registered by name.

use super::config::{ExperimentConfig, Profile};
use super::experiments::{conditioning, flat, geometric};
use super::{HarnessError, Outcome, Result};
use crate::geometry::{with_manifold, EmbeddedManifold, ManifoldTask, Vector};

pub trait Experiment: Send + Sync {
    fn id(&self) -> &'static str;
    /// One line describing the identity under test.
    fn summary(&self) -> &'static str;
    /// Library operations the experiment drives (see [`ALL_OPS`]).
    fn exercises(&self) -> &'static [&'static str];
    fn profile(&self) -> Profile {
        Profile::default()
    }
    fn run(&self, cfg: &ExperimentConfig) -> Result<Outcome>;
}

/// Body of an experiment, generic over the ambient dimension.
pub trait OnManifold: Sync {
    fn run_on<const D: usize>(
        &self,
        cfg: &ExperimentConfig,
        m: &dyn EmbeddedManifold<D>,
        x0: Vector<D>,
    ) -> Result<Outcome>;
}

struct Dispatch<'a, E> {
    exp: &'a E,
    cfg: &'a ExperimentConfig,
}

impl<E: OnManifold> ManifoldTask for Dispatch<'_, E> {
    type Output = Result<Outcome>;
    fn run<const D: usize>(self, m: &dyn EmbeddedManifold<D>, x0: Vector<D>) -> Result<Outcome> {
        self.exp.run_on(self.cfg, m, x0)
    }
}

/// Run `exp` on the configured manifold.
pub fn dispatch<E: OnManifold>(exp: &E, cfg: &ExperimentConfig) -> Result<Outcome> {
    with_manifold(cfg.manifold_spec(), Dispatch { exp, cfg })
}

/// Operations of the Itô-map, Bismut and conditioning layers that the
/// registry must cover between them.
pub const ALL_OPS: &[&str] = &[
    "solve_sde",
    "parallel_transport",
    "damped_transport",
    "derivative_TI",
    "bismut_inner",
    "project_TIbar",
    "Y_map",
    "conditional_TIbar",
    "resample_noise",
    "conditional_expectation",
    "lemma6_check",
    "pathspace_divergence",
    "prop7_check",
    "weak_derivative",
    "conditional_chaos",
];

pub static REGISTRY: &[&dyn Experiment] = &[
    &geometric::BrownianMarginal,
    &geometric::TransportIsometry,
    &geometric::DampedClosedForm,
    &geometric::TiDerivativeFd,
    &geometric::TibarRightInverse,
    &flat::FlatIbp,
    &conditioning::Lemma6,
    &conditioning::Prop7Eq5,
    &conditioning::DivergenceEq6Ibp,
    &conditioning::Prop9Pairing,
    &flat::ChaosFlat,
    &conditioning::ChaosConditionalEq4,
    &geometric::Sde2Residual,
];

pub fn lookup(id: &str) -> Result<&'static dyn Experiment> {
    REGISTRY
        .iter()
        .copied()
        .find(|e| e.id() == id)
        .ok_or_else(|| HarnessError::UnknownExperiment(id.to_string()))
}
