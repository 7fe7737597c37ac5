//! Named, reproducible experiments with CSV and text reports.

pub mod config;
pub mod experiments;
pub mod registry;

use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

pub use config::{ExperimentConfig, Overrides, Profile};
pub use registry::{lookup, Experiment, ALL_OPS, REGISTRY};

use crate::conditional::ConditionalError;
use crate::geometry::GeometryError;
use crate::ito_map::ItoError;
use crate::bismut::BismutError;
use crate::stats::{fit_slope, z_score, MeanSe};
use crate::wiener::WienerError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("unknown experiment `{0}`")]
    UnknownExperiment(String),
    #[error("config: {0}")]
    Config(String),
    #[error("sweep: {0}")]
    Sweep(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Ito(#[from] ItoError),
    #[error(transparent)]
    Wiener(#[from] WienerError),
    #[error(transparent)]
    Bismut(#[from] BismutError),
    #[error(transparent)]
    Conditional(#[from] ConditionalError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// One two-sided or bounded check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub check_id: String,
    pub lhs: f64,
    pub rhs: f64,
    pub se_lhs: f64,
    pub se_rhs: f64,
    pub z: f64,
    pub n_paths: usize,
    pub n_resamples: usize,
    pub dt: f64,
    pub seed: u64,
    pub pass: bool,
    /// Standard error of `lhs − rhs` (paired where the sides share samples).
    #[serde(skip)]
    pub se_diff: f64,
}

impl CheckRow {
    fn base(cfg: &ExperimentConfig, id: &str) -> Self {
        CheckRow {
            check_id: id.to_string(),
            lhs: f64::NAN,
            rhs: f64::NAN,
            se_lhs: 0.0,
            se_rhs: 0.0,
            z: f64::NAN,
            n_paths: cfg.n_paths,
            n_resamples: cfg.n_resamples,
            dt: cfg.dt,
            seed: cfg.seed,
            pass: false,
            se_diff: 0.0,
        }
    }

    fn decide(mut self, cfg: &ExperimentConfig, budget: f64) -> Self {
        let diff = self.lhs - self.rhs;
        self.z = z_score(diff, self.se_diff);
        self.pass = diff.abs() <= cfg.z_max * self.se_diff + budget;
        self
    }

    /// Paired samples: element `p` of `lhs` and `rhs` come from the same draw.
    pub fn paired(cfg: &ExperimentConfig, id: &str, lhs: &[f64], rhs: &[f64]) -> Self {
        Self::paired_with_budget(cfg, id, lhs, rhs, cfg.budget)
    }

    pub fn paired_with_budget(cfg: &ExperimentConfig, id: &str, lhs: &[f64], rhs: &[f64], budget: f64) -> Self {
        let l = MeanSe::of(lhs);
        let r = MeanSe::of(rhs);
        let d: Vec<f64> = lhs.iter().zip(rhs).map(|(a, b)| a - b).collect();
        let ds = MeanSe::of(&d);
        let mut row = Self::base(cfg, id);
        row.n_paths = lhs.len();
        row.lhs = l.mean;
        row.rhs = r.mean;
        row.se_lhs = l.std_error;
        row.se_rhs = r.std_error;
        row.se_diff = ds.std_error;
        row.decide(cfg, budget)
    }

    /// Two independent estimates, or an estimate against a constant (`se_rhs = 0`).
    pub fn independent(
        cfg: &ExperimentConfig,
        id: &str,
        lhs: (f64, f64),
        rhs: (f64, f64),
        budget: f64,
    ) -> Self {
        let mut row = Self::base(cfg, id);
        row.lhs = lhs.0;
        row.se_lhs = lhs.1;
        row.rhs = rhs.0;
        row.se_rhs = rhs.1;
        row.se_diff = lhs.1.hypot(rhs.1);
        row.decide(cfg, budget)
    }

    /// Deterministic `value ≤ bound`.
    pub fn bound(cfg: &ExperimentConfig, id: &str, value: f64, bound: f64) -> Self {
        let mut row = Self::base(cfg, id);
        row.lhs = value;
        row.rhs = bound;
        row.pass = value <= bound;
        row
    }

    /// Statistical one-sided `lhs ≥ rhs − z_max·se`.
    pub fn at_least(cfg: &ExperimentConfig, id: &str, lhs: (f64, f64), rhs: f64) -> Self {
        let mut row = Self::base(cfg, id);
        row.lhs = lhs.0;
        row.se_lhs = lhs.1;
        row.rhs = rhs;
        row.se_diff = lhs.1;
        row.z = z_score(lhs.0 - rhs, lhs.1);
        row.pass = lhs.0 >= rhs - cfg.z_max * lhs.1;
        row
    }

    pub fn with_counts(mut self, n_paths: usize, n_resamples: usize) -> Self {
        self.n_paths = n_paths;
        self.n_resamples = n_resamples;
        self
    }
}

/// An estimated quantity reported alongside the checks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateRow {
    pub experiment: String,
    pub quantity: String,
    pub estimate: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
}

/// What an experiment returns before timing and I/O.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub rows: Vec<CheckRow>,
    pub estimates: Vec<EstimateRow>,
    /// Worst resampled-path deviation, for experiments that resample.
    pub max_gate_deviation: Option<f64>,
    /// `(path index, points)` for `--dump-paths`.
    pub paths: Vec<(usize, Vec<Vec<f64>>)>,
}

impl Outcome {
    pub fn push(&mut self, row: CheckRow) {
        self.rows.push(row);
    }

    pub fn estimate(&mut self, cfg: &ExperimentConfig, quantity: &str, s: MeanSe) {
        self.estimates.push(EstimateRow {
            experiment: cfg.experiment.clone(),
            quantity: quantity.to_string(),
            estimate: s.mean,
            std_error: s.std_error,
            n_paths: s.n,
            dt: cfg.dt,
            seed: cfg.seed,
        });
    }

    pub fn note_deviation(&mut self, d: f64) {
        self.max_gate_deviation = Some(self.max_gate_deviation.map_or(d, |m| m.max(d)));
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub rows: Vec<CheckRow>,
    pub estimates: Vec<EstimateRow>,
    pub max_gate_deviation: Option<f64>,
    pub paths: Vec<(usize, Vec<Vec<f64>>)>,
    pub wall_time: Duration,
}

impl ExperimentReport {
    pub fn passed(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.pass)
    }

    pub fn row(&self, id: &str) -> Option<&CheckRow> {
        self.rows.iter().find(|r| r.check_id == id)
    }

    pub fn checks_csv(&self) -> Result<String> {
        to_csv(&self.rows)
    }

    pub fn estimates_csv(&self) -> Result<String> {
        to_csv(&self.estimates)
    }

    /// Aligned text for humans; the only output that carries wall time.
    pub fn summary(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(s, "experiment  {}", c.experiment);
        let _ = writeln!(
            s,
            "manifold    {}  scheme {}  T {}  dt {}  paths {}  resamples {}  seed {}",
            c.manifold, c.scheme, c.horizon, c.dt, c.n_paths, c.n_resamples, c.seed
        );
        if let Some(d) = self.max_gate_deviation {
            let _ = writeln!(s, "resampler   max deviation {d:.3e} (gate {:.3e})", c.gate());
        }
        let width = self.rows.iter().map(|r| r.check_id.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(
            s,
            "{:<width$}  {:>13}  {:>13}  {:>10}  {:>10}  {:>8}  result",
            "check", "lhs", "rhs", "se_lhs", "se_rhs", "z"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<width$}  {:>13.6e}  {:>13.6e}  {:>10.3e}  {:>10.3e}  {:>8.3}  {}",
                r.check_id,
                r.lhs,
                r.rhs,
                r.se_lhs,
                r.se_rhs,
                r.z,
                if r.pass { "pass" } else { "FAIL" }
            );
        }
        for e in &self.estimates {
            let _ = writeln!(s, "estimate    {} = {:.6e} ± {:.2e}", e.quantity, e.estimate, e.std_error);
        }
        let passed = self.rows.iter().filter(|r| r.pass).count();
        let _ = writeln!(
            s,
            "{} of {} checks passed in {:.2}s: {}",
            passed,
            self.rows.len(),
            self.wall_time.as_secs_f64(),
            if self.passed() { "PASS" } else { "FAIL" }
        );
        s
    }

    /// Write `<id>_checks.csv`, `<id>_estimates.csv`, `<id>_summary.txt` and,
    /// when paths were dumped, `<id>_paths.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let id = &self.config.experiment;
        std::fs::write(dir.join(format!("{id}_checks.csv")), self.checks_csv()?)?;
        std::fs::write(dir.join(format!("{id}_estimates.csv")), self.estimates_csv()?)?;
        std::fs::write(dir.join(format!("{id}_summary.txt")), self.summary())?;
        if !self.paths.is_empty() {
            let mut w = csv::Writer::from_writer(Vec::new());
            let d = self.paths[0].1.first().map_or(0, |p| p.len());
            let mut header = vec!["path".to_string(), "step".to_string(), "t".to_string()];
            header.extend((0..d).map(|a| format!("x{a}")));
            w.write_record(&header)?;
            for (p, pts) in &self.paths {
                for (i, x) in pts.iter().enumerate() {
                    let mut rec = vec![p.to_string(), i.to_string(), (i as f64 * self.config.dt).to_string()];
                    rec.extend(x.iter().map(|c| c.to_string()));
                    w.write_record(&rec)?;
                }
            }
            let bytes = w.into_inner().map_err(|e| HarnessError::Io(e.into_error()))?;
            std::fs::write(dir.join(format!("{id}_paths.csv")), bytes)?;
        }
        Ok(())
    }
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Run the configured experiment; writes reports when `config.out` is set.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let exp = lookup(&config.experiment)?;
    let start = Instant::now();
    let outcome = exp.run(config)?;
    let report = ExperimentReport {
        config: config.clone(),
        rows: outcome.rows,
        estimates: outcome.estimates,
        max_gate_deviation: outcome.max_gate_deviation,
        paths: outcome.paths,
        wall_time: start.elapsed(),
    };
    if let Some(dir) = &config.out {
        report.write(dir)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Dt,
    NPaths,
}

impl std::str::FromStr for SweepParam {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dt" => Ok(SweepParam::Dt),
            "n-paths" | "n_paths" => Ok(SweepParam::NPaths),
            other => Err(HarnessError::Sweep(format!("unknown sweep parameter `{other}` (dt or n-paths)"))),
        }
    }
}

/// Reports for each swept value and the fitted convergence rate.
#[derive(Debug, Clone)]
pub struct SweepReport {
    pub param: SweepParam,
    pub values: Vec<f64>,
    pub reports: Vec<ExperimentReport>,
    /// Check row the rate is measured on (the experiment's first row).
    pub tracked: String,
    /// `(x, y)` pairs fitted: `(log dt, log |bias|)` or `(log n, log SE)`.
    pub points: Vec<(f64, f64)>,
    pub slope: f64,
    pub slope_se: f64,
    pub convergence: CheckRow,
}

/// Slope windows for the two sweep kinds.
pub const BIAS_SLOPE: (f64, f64) = (0.7, 1.3);
pub const SE_SLOPE: (f64, f64) = (-0.6, -0.4);

impl SweepReport {
    pub fn passed(&self) -> bool {
        self.convergence.pass
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let name = match self.param {
            SweepParam::Dt => "dt",
            SweepParam::NPaths => "n-paths",
        };
        let _ = writeln!(s, "sweep {} over {name}, tracking `{}`", self.reports[0].config.experiment, self.tracked);
        for (v, (x, y)) in self.values.iter().zip(&self.points) {
            let _ = writeln!(s, "  {name} = {v:<10}  log x {x:>9.4}  log y {y:>9.4}");
        }
        let (lo, hi) = match self.param {
            SweepParam::Dt => BIAS_SLOPE,
            SweepParam::NPaths => SE_SLOPE,
        };
        let _ = writeln!(
            s,
            "slope {:.3} ± {:.3} (window [{lo}, {hi}]): {}",
            self.slope,
            self.slope_se,
            if self.passed() { "PASS" } else { "FAIL" }
        );
        s
    }
}

/// Rerun an experiment for each value of `param` and fit the convergence rate
/// of its first check: `|lhs − rhs|` against `dt`, or the standard error of
/// `lhs − rhs` against `n_paths`.
pub fn sweep(config: &ExperimentConfig, param: SweepParam, values: &[f64]) -> Result<SweepReport> {
    if values.len() < 2 {
        return Err(HarnessError::Sweep("need at least two values".into()));
    }
    let mut reports = Vec::with_capacity(values.len());
    for &v in values {
        let mut cfg = config.clone();
        match param {
            SweepParam::Dt => cfg.dt = v,
            SweepParam::NPaths => {
                if v < 1.0 || v.fract() != 0.0 {
                    return Err(HarnessError::Sweep(format!("n-paths value {v} is not a positive integer")));
                }
                cfg.n_paths = v as usize;
            }
        }
        cfg.out = config.out.as_ref().map(|d| d.join(format!("{}_{v}", match param {
            SweepParam::Dt => "dt",
            SweepParam::NPaths => "n_paths",
        })));
        reports.push(run_experiment(&cfg)?);
    }
    let tracked = reports[0].rows.first().map(|r| r.check_id.clone()).unwrap_or_default();
    let mut points = Vec::with_capacity(values.len());
    for (v, r) in values.iter().zip(&reports) {
        let row = r.row(&tracked).ok_or_else(|| HarnessError::Sweep("tracked row missing".into()))?;
        let y = match param {
            SweepParam::Dt => (row.lhs - row.rhs).abs(),
            SweepParam::NPaths => row.se_diff,
        };
        points.push((v.ln(), y.ln()));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let (slope, slope_se) = fit_slope(&xs, &ys);
    let (lo, hi) = match param {
        SweepParam::Dt => BIAS_SLOPE,
        SweepParam::NPaths => SE_SLOPE,
    };
    let mut convergence = CheckRow::base(config, &format!("{tracked}_slope"));
    convergence.lhs = slope;
    convergence.se_lhs = slope_se;
    convergence.rhs = 0.5 * (lo + hi);
    convergence.se_diff = slope_se;
    convergence.z = z_score(slope - convergence.rhs, slope_se);
    convergence.pass = slope.is_finite() && (lo..=hi).contains(&slope);
    Ok(SweepReport { param, values: values.to_vec(), reports, tracked, points, slope, slope_se, convergence })
}

/// Run `f` for each path index in parallel, results in index order.
pub fn ensemble<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}
