//! Experiment configuration: registry defaults, then a TOML file, then CLI
//! flags. File keys and flag names are the same kebab-case words.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::geometry::ManifoldSpec;
use crate::ito_map::SCHEMES;
use crate::wiener::TimeGrid;

pub const DEFAULT_MANIFOLD: &str = "sphere:2";
pub const DEFAULT_SEED: u64 = 1;
pub const DEFAULT_GATE_FACTOR: f64 = 20.0;
pub const DEFAULT_Z_MAX: f64 = 3.0;

/// Per-experiment sizes used when neither file nor CLI sets them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Profile {
    pub horizon: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub n_resamples: usize,
    /// Additive allowance for discretization bias in two-sided checks.
    pub budget: f64,
}

impl Default for Profile {
    fn default() -> Self {
        Profile { horizon: 1.0, dt: 1e-3, n_paths: 10_000, n_resamples: 256, budget: 0.0 }
    }
}

/// Optional settings, as read from a file or from flags.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Overrides {
    pub experiment: Option<String>,
    pub manifold: Option<String>,
    pub scheme: Option<String>,
    pub horizon: Option<f64>,
    pub dt: Option<f64>,
    pub n_paths: Option<usize>,
    pub n_resamples: Option<usize>,
    pub seed: Option<u64>,
    pub z_max: Option<f64>,
    pub budget: Option<f64>,
    pub gate_factor: Option<f64>,
    pub out: Option<PathBuf>,
    pub dump_paths: Option<bool>,
}

impl Overrides {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// `other` wins wherever it is set.
    pub fn merge(self, other: Overrides) -> Overrides {
        Overrides {
            experiment: other.experiment.or(self.experiment),
            manifold: other.manifold.or(self.manifold),
            scheme: other.scheme.or(self.scheme),
            horizon: other.horizon.or(self.horizon),
            dt: other.dt.or(self.dt),
            n_paths: other.n_paths.or(self.n_paths),
            n_resamples: other.n_resamples.or(self.n_resamples),
            seed: other.seed.or(self.seed),
            z_max: other.z_max.or(self.z_max),
            budget: other.budget.or(self.budget),
            gate_factor: other.gate_factor.or(self.gate_factor),
            out: other.out.or(self.out),
            dump_paths: other.dump_paths.or(self.dump_paths),
        }
    }
}

/// Fully resolved configuration of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct ExperimentConfig {
    pub experiment: String,
    pub manifold: String,
    pub scheme: String,
    pub horizon: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub n_resamples: usize,
    pub seed: u64,
    pub z_max: f64,
    pub budget: f64,
    pub gate_factor: f64,
    pub out: Option<PathBuf>,
    pub dump_paths: bool,
}

impl ExperimentConfig {
    /// Defaults for `experiment` from the registry, then `overrides`.
    pub fn resolve(experiment: &str, overrides: &Overrides) -> Result<Self, HarnessError> {
        let exp = super::registry::lookup(experiment)?;
        let p = exp.profile();
        let cfg = ExperimentConfig {
            experiment: experiment.to_string(),
            manifold: overrides.manifold.clone().unwrap_or_else(|| DEFAULT_MANIFOLD.to_string()),
            scheme: overrides.scheme.clone().unwrap_or_else(|| SCHEMES[0].to_string()),
            horizon: overrides.horizon.unwrap_or(p.horizon),
            dt: overrides.dt.unwrap_or(p.dt),
            n_paths: overrides.n_paths.unwrap_or(p.n_paths),
            n_resamples: overrides.n_resamples.unwrap_or(p.n_resamples),
            seed: overrides.seed.unwrap_or(DEFAULT_SEED),
            z_max: overrides.z_max.unwrap_or(DEFAULT_Z_MAX),
            budget: overrides.budget.unwrap_or(p.budget),
            gate_factor: overrides.gate_factor.unwrap_or(DEFAULT_GATE_FACTOR),
            out: overrides.out.clone(),
            dump_paths: overrides.dump_paths.unwrap_or(false),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults for `experiment` with no overrides.
    pub fn defaults(experiment: &str) -> Result<Self, HarnessError> {
        Self::resolve(experiment, &Overrides::default())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |what: &str| Err(HarnessError::Config(what.to_string()));
        super::registry::lookup(&self.experiment)?;
        ManifoldSpec::parse(&self.manifold).map_err(|e| HarnessError::Config(e.to_string()))?;
        if !SCHEMES.contains(&self.scheme.as_str()) {
            return Err(HarnessError::Config(format!("unknown scheme `{}`", self.scheme)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad("horizon must be positive");
        }
        if !(self.dt > 0.0 && self.dt <= self.horizon) {
            return bad("dt must be positive and at most the horizon");
        }
        if self.n_paths == 0 {
            return bad("n-paths must be positive");
        }
        if self.n_resamples < 2 {
            return bad("n-resamples must be at least 2");
        }
        if !(self.z_max > 0.0) {
            return bad("z-max must be positive");
        }
        if !(self.budget >= 0.0) {
            return bad("budget must be non-negative");
        }
        if !(self.gate_factor > 0.0) {
            return bad("gate-factor must be positive");
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid, HarnessError> {
        TimeGrid::with_step(self.horizon, self.dt).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn manifold_spec(&self) -> ManifoldSpec {
        ManifoldSpec::parse(&self.manifold).expect("validated")
    }

    /// Resampler path-reproduction gate `gate_factor · dt^{1/2} · dt`.
    pub fn gate(&self) -> f64 {
        self.gate_factor * self.dt.sqrt() * self.dt
    }
}
