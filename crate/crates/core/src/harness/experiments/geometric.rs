//! Pathwise checks of the Itô map, transport and the Bismut calculus, and
//! the Brownian marginal law.

use super::{worst, Setup, ALT, AUX, BASE};
use crate::bismut::{bismut_inner, conditional_tibar, project_tibar, y_map, BismutVector};
use crate::conditional::path_function_derivative;
use crate::geometry::{sde2_residual, EmbeddedManifold, GeometryError, Matrix, Vector, FD_STEP};
use crate::harness::config::Profile;
use crate::harness::registry::{dispatch, Experiment, OnManifold};
use crate::harness::{ensemble, CheckRow, ExperimentConfig, Outcome, Result};
use crate::bismut::PathFunction;
use crate::ito_map::{damped_transport, parallel_transport, ItoError, ItoEuler, ItoMap};
use crate::stats::{fit_slope, MeanSe};
use crate::wiener::{derive_rng, gaussian_vector, h_inner, CameronMartin, NoisePath, TimeGrid};

fn random_h<const D: usize>(grid: TimeGrid, seed: u64, tags: &[u64]) -> CameronMartin<D> {
    let mut rng = derive_rng(seed, tags);
    let a: Vector<D> = gaussian_vector(&mut rng, 1.0);
    let b: Vector<D> = gaussian_vector(&mut rng, 1.0);
    let k = 1.0 + (tags.last().copied().unwrap_or(0) % 3) as f64;
    CameronMartin::from_fn(grid, |t| a + b * (std::f64::consts::PI * k * t).sin())
}

pub struct BrownianMarginal;

impl Experiment for BrownianMarginal {
    fn id(&self) -> &'static str {
        "brownian_marginal"
    }
    fn summary(&self) -> &'static str {
        "E<x_T, x_0> = exp(-nT/2) and the zonal second moment; Stratonovich vs Ito-Euler"
    }
    fn exercises(&self) -> &'static [&'static str] {
        &["solve_sde"]
    }
    fn profile(&self) -> Profile {
        Profile { budget: 0.02, ..Profile::default() }
    }
    fn run(&self, cfg: &ExperimentConfig) -> Result<Outcome> {
        dispatch(self, cfg)
    }
}

impl OnManifold for BrownianMarginal {
    fn run_on<const D: usize>(&self, cfg: &ExperimentConfig, m: &dyn EmbeddedManifold<D>, x0: Vector<D>) -> Result<Outcome> {
        let s = Setup::new(cfg, m, x0)?;
        let map = s.map()?;
        let ito = ItoMap::new(m, &ItoEuler, x0)?;
        let samples = ensemble(cfg.n_paths, |p| {
            let path = map.solve_path(&s.noise(BASE, p))?;
            let z = path[path.len() - 1].dot(&x0);
            let alt = ito.solve_path(&s.noise(ALT, p))?;
            let zi = alt[alt.len() - 1].dot(&x0);
            let kept = (cfg.dump_paths && p < super::DUMP_LIMIT).then_some(path);
            Ok((z, zi, kept))
        })?;
        let mut out = Outcome::default();
        for (p, (_, _, kept)) in samples.iter().enumerate() {
            if let Some(path) = kept {
                s.keep_path(&mut out, p, path);
            }
        }
        let n = m.intrinsic_dim() as f64;
        let t = s.horizon();
        let z: Vec<f64> = samples.iter().map(|x| x.0).collect();
        let z2: Vec<f64> = z.iter().map(|v| v * v).collect();
        let zi: Vec<f64> = samples.iter().map(|x| x.1).collect();
        let (mz, mz2, mzi) = (MeanSe::of(&z), MeanSe::of(&z2), MeanSe::of(&zi));
        out.push(CheckRow::independent(cfg, "mean_cos_decay", (mz.mean, mz.std_error), ((-n * t / 2.0).exp(), 0.0), cfg.budget));
        let second = 1.0 / (n + 1.0) + n / (n + 1.0) * (-(n + 1.0) * t).exp();
        out.push(CheckRow::independent(cfg, "second_moment_decay", (mz2.mean, mz2.std_error), (second, 0.0), cfg.budget));
        out.push(CheckRow::independent(
            cfg,
            "ito_euler_cross_check",
            (mz.mean, mz.std_error),
            (mzi.mean, mzi.std_error),
            cfg.budget,
        ));
        out.estimate(cfg, "mean_cos", mz);
        out.estimate(cfg, "second_moment", mz2);
        out.estimate(cfg, "mean_cos_ito_euler", mzi);
        Ok(out)
    }
}

pub struct Sde2Residual;

impl Experiment for Sde2Residual {
    fn id(&self) -> &'static str {
        "sde2_residual"
    }
    fn summary(&self) -> &'static str {
        "covariant derivative of y -> X(y)e vanishes when e is orthogonal to ker X(x)"
    }
    fn exercises(&self) -> &'static [&'static str] {
        &[]
    }
    fn profile(&self) -> Profile {
        Profile { n_paths: 100, ..Profile::default() }
    }
    fn run(&self, cfg: &ExperimentConfig) -> Result<Outcome> {
        dispatch(self, cfg)
    }
}

impl OnManifold for Sde2Residual {
    fn run_on<const D: usize>(&self, cfg: &ExperimentConfig, m: &dyn EmbeddedManifold<D>, x0: Vector<D>) -> Result<Outcome> {
        let s = Setup::new(cfg, m, x0)?;
        let residuals = ensemble(cfg.n_paths, |p| {
            let mut rng = derive_rng(cfg.seed, &[AUX, p as u64]);
            let x = s.random_point(&mut rng)?;
            let e = s.random_unit_tangent(&mut rng, &x);
            Ok(sde2_residual(m, &x, &e, FD_STEP)?)
        })?;
        let mut out = Outcome::default();
        out.push(CheckRow::bound(cfg, "max_residual", worst(residuals.iter().copied()), 1e-6).with_counts(cfg.n_paths, 0));
        let rejected = matches!(sde2_residual(m, &x0, &x0, FD_STEP), Err(GeometryError::KernelDirection { .. }));
        out.push(CheckRow::bound(cfg, "kernel_direction_rejected", if rejected { 0.0 } else { 1.0 }, 0.0));
        Ok(out)
    }
}

pub struct TransportIsometry;

impl Experiment for TransportIsometry {
    fn id(&self) -> &'static str {
        "transport_isometry"
    }
    fn summary(&self) -> &'static str {
        "discrete parallel transport is isometric and rotates correctly along a great circle"
    }
    fn exercises(&self) -> &'static [&'static str] {
        &["solve_sde", "parallel_transport"]
    }
    fn profile(&self) -> Profile {
        Profile { n_paths: 100, ..Profile::default() }
    }
    fn run(&self, cfg: &ExperimentConfig) -> Result<Outcome> {
        dispatch(self, cfg)
    }
}

impl OnManifold for TransportIsometry {
    fn run_on<const D: usize>(&self, cfg: &ExperimentConfig, m: &dyn EmbeddedManifold<D>, x0: Vector<D>) -> Result<Outcome> {
        let s = Setup::new(cfg, m, x0)?;
        let map = s.map()?;
        let n = m.intrinsic_dim();
        let per_path = ensemble(cfg.n_paths, |p| {
            let mut b = map.solve(s.noise(BASE, p))?;
            parallel_transport(m, &mut b)?;
            let mut rng = derive_rng(cfg.seed, &[AUX, p as u64]);
            let u = s.random_unit_tangent(&mut rng, &x0);
            let v = s.random_unit_tangent(&mut rng, &x0) * 2.0;
            let inner = worst((0..b.path.len()).map(|i| (b.transport(i, &u).dot(&b.transport(i, &v)) - u.dot(&v)).abs()));
            Ok((b.isometry_defect(), inner))
        })?;
        let mut out = Outcome::default();
        let tol = 10.0 * cfg.dt;
        out.push(CheckRow::bound(cfg, "gram_defect", worst(per_path.iter().map(|x| x.0)), tol).with_counts(cfg.n_paths, 0));
        out.push(CheckRow::bound(cfg, "inner_products", worst(per_path.iter().map(|x| x.1)), tol).with_counts(cfg.n_paths, 0));

        // σ(s) = cos(s) x₀ + sin(s) a is a unit-speed geodesic; its velocity
        // and every tangent direction orthogonal to the plane are parallel
        let basis = m.tangent_basis(&x0);
        let a = basis.column(0).into_owned();
        let grid = s.grid;
        let path: Vec<Vector<D>> = (0..=grid.steps()).map(|i| x0 * grid.time(i).cos() + a * grid.time(i).sin()).collect();
        let mut g = map.bundle_for_path(NoisePath::zero(grid), path);
        parallel_transport(m, &mut g)?;
        let mut err: f64 = 0.0;
        for i in 0..=grid.steps() {
            let t = grid.time(i);
            err = err.max((g.transport(i, &a) - (a * t.cos() - x0 * t.sin())).norm());
            for k in 1..n {
                let e = basis.column(k).into_owned();
                err = err.max((g.transport(i, &e) - e).norm());
            }
        }
        out.push(CheckRow::bound(cfg, "great_circle_rotation", err, tol).with_counts(1, 0));

        let jump = TimeGrid::new(1.0, 2)?;
        let mut bad = map.bundle_for_path(NoisePath::zero(jump), vec![x0, a, -x0]);
        let lost = matches!(parallel_transport(m, &mut bad), Err(ItoError::RankLoss { .. }));
        out.push(CheckRow::bound(cfg, "rank_loss_detected", if lost { 0.0 } else { 1.0 }, 0.0).with_counts(1, 0));
        Ok(out)
    }
}

/// Delegates to the wrapped manifold but reports zero Ricci curvature.
struct RicciFree<'a, const D: usize>(&'a dyn EmbeddedManifold<D>);

impl<const D: usize> EmbeddedManifold<D> for RicciFree<'_, D> {
    fn name(&self) -> String {
        format!("{} (Ric = 0)", self.0.name())
    }
    fn intrinsic_dim(&self) -> usize {
        self.0.intrinsic_dim()
    }
    fn constraint_residual(&self, x: &Vector<D>) -> f64 {
        self.0.constraint_residual(x)
    }
    fn tangent_projection(&self, x: &Vector<D>) -> Matrix<D> {
        self.0.tangent_projection(x)
    }
    fn diffusion(&self, x: &Vector<D>) -> Matrix<D> {
        self.0.diffusion(x)
    }
    fn diffusion_dir(&self, x: &Vector<D>, v: &Vector<D>) -> Matrix<D> {
        self.0.diffusion_dir(x, v)
    }
    fn kernel_complement(&self, x: &Vector<D>) -> Matrix<D> {
        self.0.kernel_complement(x)
    }
    fn kernel_complement_dir(&self, x: &Vector<D>, v: &Vector<D>) -> Matrix<D> {
        self.0.kernel_complement_dir(x, v)
    }
    fn ricci(&self, _x: &Vector<D>) -> Matrix<D> {
        Matrix::<D>::zeros()
    }
    fn retract(&self, x: &Vector<D>, v: &Vector<D>) -> std::result::Result<Vector<D>, GeometryError> {
        self.0.retract(x, v)
    }
    fn retract_dir(&self, x: &Vector<D>, u: &Vector<D>, dx: &Vector<D>, du: &Vector<D>) -> Vector<D> {
        self.0.retract_dir(x, u, dx, du)
    }
}

pub struct DampedClosedForm;

impl Experiment for DampedClosedForm {
    fn id(&self) -> &'static str {
        "damped_closed_form"
    }
    fn summary(&self) -> &'static str {
        "damped transport on the round sphere is exp(-(n-1)s/2) times parallel transport"
    }
    fn exercises(&self) -> &'static [&'static str] {
        &["solve_sde", "parallel_transport", "damped_transport"]
    }
    fn profile(&self) -> Profile {
        Profile { n_paths: 100, ..Profile::default() }
    }
    fn run(&self, cfg: &ExperimentConfig) -> Result<Outcome> {
        dispatch(self, cfg)
    }
}

impl OnManifold for DampedClosedForm {
    fn run_on<const D: usize>(&self, cfg: &ExperimentConfig, m: &dyn EmbeddedManifold<D>, x0: Vector<D>) -> Result<Outcome> {
        let s = Setup::new(cfg, m, x0)?;
        let map = s.map()?;
        let n = m.intrinsic_dim();
        let flat = RicciFree(m);
        let rate = (n as f64 - 1.0) / 2.0;
        let per_path = ensemble(cfg.n_paths, |p| {
            let mut b = map.solve_full(s.noise(BASE, p))?;
            let mut err: f64 = 0.0;
            for i in 0..b.path.len() {
                let decay = (-rate * b.noise.grid.time(i)).exp();
                for k in 0..n {
                    let u = b.basis0.column(k).into_owned();
                    err = err.max((b.damped(i, &u) - b.transport(i, &u) * decay).norm());
                }
            }
            damped_transport(&flat, &mut b)?;
            let same = worst(b.damped_frames.iter().zip(&b.frames).map(|(w, f)| (w - f).norm()));
            Ok((err, same))
        })?;
        let mut out = Outcome::default();
        out.push(CheckRow::bound(cfg, "damped_vs_closed_form", worst(per_path.iter().map(|x| x.0)), 1e-2).with_counts(cfg.n_paths, 0));
        out.push(CheckRow::bound(cfg, "zero_ricci_is_transport", worst(per_path.iter().map(|x| x.1)), 0.0).with_counts(cfg.n_paths, 0));
        Ok(out)
    }
}

pub struct TiDerivativeFd;

impl Experiment for TiDerivativeFd {
    fn id(&self) -> &'static str {
        "ti_derivative_fd"
    }
    fn summary(&self) -> &'static str {
        "variational derivative TI(h) against finite differences of the Ito map; chain rule and reverse mode"
    }
    fn exercises(&self) -> &'static [&'static str] {
        &["solve_sde", "derivative_TI"]
    }
    fn profile(&self) -> Profile {
        Profile { n_paths: 20, ..Profile::default() }
    }
    fn run(&self, cfg: &ExperimentConfig) -> Result<Outcome> {
        dispatch(self, cfg)
    }
}

impl OnManifold for TiDerivativeFd {
    fn run_on<const D: usize>(&self, cfg: &ExperimentConfig, m: &dyn EmbeddedManifold<D>, x0: Vector<D>) -> Result<Outcome> {
        const EPS: f64 = 1e-5;
        let s = Setup::new(cfg, m, x0)?;
        let map = s.map()?;
        let grid = s.grid;
        let last = grid.steps();
        let phi = PathFunction::<D>::terminal(
            grid,
            |x| x[0].sin() + x[D - 1] * x[D - 1],
            |x| {
                let mut g = Vector::<D>::zeros();
                g[0] = x[0].cos();
                g[D - 1] += 2.0 * x[D - 1];
                g
            },
        );
        let rows = ensemble(cfg.n_paths, |p| {
            let b = map.solve(s.noise(BASE, p))?;
            let h = random_h::<D>(grid, cfg.seed, &[AUX, p as u64]);
            let h2 = random_h::<D>(grid, cfg.seed, &[ALT, p as u64]);
            let v = map.tangent(&b.noise, &b.path, &h);
            let plus = map.solve_path(&b.noise.shifted(&h, EPS))?;
            let minus = map.solve_path(&b.noise.shifted(&h, -EPS))?;
            let fd = m.tangent_projection(&b.path[last]) * (plus[last] - minus[last]) / (2.0 * EPS);
            let rel = (v[last] - fd).norm() / v[last].norm();

            let tangency = worst(b.path.iter().zip(&v).map(|(x, vi)| (vi - m.tangent_projection(x) * vi).norm()));
            let v2 = map.tangent(&b.noise, &b.path, &h2);
            let v12 = map.tangent(&b.noise, &b.path, &h.linear_comb(1.0, &h2, 1.0));
            let linear = worst(v12.iter().zip(&v).zip(&v2).map(|((a, b), c)| (a - b - c).norm()));

            let chain = path_function_derivative(&phi, &map, &b, &h);
            let chain_fd = (phi.eval(&plus) - phi.eval(&minus)) / (2.0 * EPS);
            let chain_rel = (chain - chain_fd).abs() / chain.abs().max(1e-12);

            let grad = map.gradient(&b.noise, &b.path, &[(last, phi.0.body_grad(&[b.path[last]])[0])]);
            let reverse: f64 = grad.iter().zip(&h.deriv).map(|(g, d)| g.dot(d)).sum::<f64>() * grid.dt();
            let adjoint = (reverse - chain).abs() / chain.abs().max(1e-12);
            Ok([rel, tangency, linear, chain_rel, adjoint])
        })?;
        let col = |k: usize| worst(rows.iter().map(|r| r[k]));
        let mut out = Outcome::default();
        let n = cfg.n_paths;
        out.push(CheckRow::bound(cfg, "fd_relative_error", col(0), 1e-3).with_counts(n, 0));
        out.push(CheckRow::bound(cfg, "tangency", col(1), 1e-8).with_counts(n, 0));
        out.push(CheckRow::bound(cfg, "linearity", col(2), 1e-10).with_counts(n, 0));
        out.push(CheckRow::bound(cfg, "chain_rule_fd", col(3), 1e-3).with_counts(n, 0));
        out.push(CheckRow::bound(cfg, "reverse_mode_adjoint", col(4), 1e-9).with_counts(n, 0));

        let still = map.solve(NoisePath::zero(grid))?;
        let e = m.tangent_basis(&x0).column(0).into_owned();
        let v = map.tangent(&still.noise, &still.path, &CameronMartin::constant(grid, e));
        let frozen = worst(v.iter().enumerate().map(|(i, vi)| (vi - e * grid.time(i)).norm()));
        out.push(CheckRow::bound(cfg, "zero_noise_linear_growth", frozen, 1e-12).with_counts(1, 0));
        let zero = map.tangent(&still.noise, &still.path, &CameronMartin::zero(grid));
        out.push(CheckRow::bound(cfg, "zero_direction", worst(zero.iter().map(|v| v.norm())), 0.0).with_counts(1, 0));
        Ok(out)
    }
}

pub struct TibarRightInverse;

impl Experiment for TibarRightInverse {
    fn id(&self) -> &'static str {
        "tibar_right_inverse"
    }
    fn summary(&self) -> &'static str {
        "projection onto Bismut vectors, its right inverse Y, the damped metric, and E{TI(h) | x} by resampling"
    }
    fn exercises(&self) -> &'static [&'static str] {
        &[
            "solve_sde",
            "parallel_transport",
            "damped_transport",
            "derivative_TI",
            "bismut_inner",
            "project_TIbar",
            "Y_map",
            "conditional_TIbar",
            "resample_noise",
        ]
    }
    fn profile(&self) -> Profile {
        Profile { n_paths: 20, n_resamples: 64, ..Profile::default() }
    }
    fn run(&self, cfg: &ExperimentConfig) -> Result<Outcome> {
        dispatch(self, cfg)
    }
}

struct TibarPath {
    right_inverse: f64,
    isometry: f64,
    idempotent: f64,
    contraction: f64,
    unit_norm: f64,
    polarization: f64,
    kernel_zero: f64,
    cond_terminal: (f64, f64),
    cond_middle: (f64, f64),
    se_small: f64,
    se_large: f64,
    linearity: f64,
    zero: f64,
    deviation: f64,
}

impl OnManifold for TibarRightInverse {
    fn run_on<const D: usize>(&self, cfg: &ExperimentConfig, m: &dyn EmbeddedManifold<D>, x0: Vector<D>) -> Result<Outcome> {
        let s = Setup::new(cfg, m, x0)?;
        let map = s.map()?;
        let grid = s.grid;
        let dt = grid.dt();
        let last = grid.steps();
        let mid = s.at(0.5);
        let per_path = ensemble(cfg.n_paths, |p| -> Result<TibarPath> {
            let b = s.bundle(&map, BASE, p)?;
            let mut rng = derive_rng(cfg.seed, &[AUX, p as u64]);
            let tangent: Vec<Vector<D>> = b
                .path
                .iter()
                .take(last)
                .map(|x| m.tangent_projection(x) * gaussian_vector::<D, _>(&mut rng, 1.0))
                .collect();
            let v = BismutVector::from_damped_derivative(&b, tangent)?;
            let y = y_map(m, &b, &v)?;
            let right_inverse = project_tibar(m, &b, &y)?.sup_distance(&v);
            let vv = bismut_inner(&v, &v)?;
            let isometry = (h_inner(&y, &y)? - vv).abs();

            let h = random_h::<D>(grid, cfg.seed, &[ALT, p as u64]);
            let ph = project_tibar(m, &b, &h)?;
            let k1 = y_map(m, &b, &ph)?;
            let k2 = y_map(m, &b, &project_tibar(m, &b, &k1)?)?;
            let idempotent = worst(k1.deriv.iter().zip(&k2.deriv).map(|(a, c)| (a - c).norm()));
            let contraction = bismut_inner(&ph, &ph)? - h_inner(&h, &h)?;

            let e = b.basis0.column(0).into_owned();
            let unit = BismutVector::from_damped_derivative(&b, (0..last).map(|i| b.transport(i, &e)).collect())?;
            let unit_norm = (bismut_inner(&unit, &unit)? - grid.horizon()).abs();
            let sum = v.linear_comb(1.0, &unit, 1.0)?;
            let diff = v.linear_comb(1.0, &unit, -1.0)?;
            let polarization =
                (0.25 * (bismut_inner(&sum, &sum)? - bismut_inner(&diff, &diff)?) - bismut_inner(&v, &unit)?).abs();

            let kernel_h = CameronMartin {
                grid,
                deriv: b
                    .path
                    .iter()
                    .take(last)
                    .map(|x| (Matrix::<D>::identity() - m.kernel_complement(x)) * gaussian_vector::<D, _>(&mut rng, 1.0))
                    .collect(),
            };
            let kernel_zero = worst(project_tibar(m, &b, &kernel_h)?.values.iter().map(|v| v.norm()));

            let plan = s.plan(map, &b, BASE, p)?;
            let est = conditional_tibar(&h, &plan)?;
            let along = |vals: &[Vector<D>], i: usize| vals[i].dot(&b.transport(i, &e));
            let cond_terminal = (along(&est.values, last), along(&ph.values, last));
            let cond_middle = (along(&est.values, mid), along(&ph.values, mid));
            let se_large = est.std_error.as_ref().map_or(f64::NAN, |se| se[last]);
            let mut small_plan = plan.clone();
            small_plan.n_resamples = (cfg.n_resamples / 4).max(2);
            let small = conditional_tibar(&h, &small_plan)?;
            let se_small = small.std_error.as_ref().map_or(f64::NAN, |se| se[last]);

            let h2 = random_h::<D>(grid, cfg.seed, &[BASE, p as u64]);
            let e2 = conditional_tibar(&h2, &plan)?;
            let e12 = conditional_tibar(&h.linear_comb(1.0, &h2, 1.0), &plan)?;
            let linearity = e12.sup_distance(&est.linear_comb(1.0, &e2, 1.0)?);
            let zero = worst(conditional_tibar(&CameronMartin::zero(grid), &plan)?.values.iter().map(|v| v.norm()));
            let deviation = plan.for_each(|_| Ok(()))?.max_deviation;
            Ok(TibarPath {
                right_inverse,
                isometry,
                idempotent,
                contraction,
                unit_norm,
                polarization,
                kernel_zero,
                cond_terminal,
                cond_middle,
                se_small,
                se_large,
                linearity,
                zero,
                deviation,
            })
        })?;
        let n = cfg.n_paths;
        let mut out = Outcome::default();
        let col = |f: fn(&TibarPath) -> f64| worst(per_path.iter().map(f));
        out.push(CheckRow::bound(cfg, "right_inverse_sup_error", col(|r| r.right_inverse), 1e-2).with_counts(n, 0));
        out.push(CheckRow::bound(cfg, "y_isometry", col(|r| r.isometry), 1e-10).with_counts(n, 0));
        out.push(CheckRow::bound(cfg, "y_tibar_idempotent", col(|r| r.idempotent), 10.0 * dt).with_counts(n, 0));
        out.push(CheckRow::bound(
            cfg,
            "projection_norm_nonincreasing",
            per_path.iter().map(|r| r.contraction).fold(f64::NEG_INFINITY, f64::max),
            10.0 * dt,
        ).with_counts(n, 0));
        out.push(CheckRow::bound(cfg, "transported_unit_norm", col(|r| r.unit_norm), 1e-10).with_counts(n, 0));
        out.push(CheckRow::bound(cfg, "polarization", col(|r| r.polarization), 1e-12).with_counts(n, 0));
        out.push(CheckRow::bound(cfg, "kernel_direction_projects_to_zero", col(|r| r.kernel_zero), 1e-12).with_counts(n, 0));

        let still = map.solve_full(NoisePath::zero(grid))?;
        let e = m.tangent_basis(&x0).column(0).into_owned();
        let v = project_tibar(m, &still, &CameronMartin::constant(grid, e))?;
        let nd = m.intrinsic_dim() as f64;
        let t = grid.horizon();
        let want = if nd > 1.0 { 2.0 / (nd - 1.0) * (1.0 - (-(nd - 1.0) * t / 2.0).exp()) } else { t };
        out.push(CheckRow::bound(cfg, "zero_noise_closed_form", (v.values[last] - e * want).norm(), 2.0 * dt).with_counts(1, 0));

        let a = BismutVector::zero(&still);
        let other = s.bundle(&map, ALT, 0)?;
        let mismatch = bismut_inner(&a, &BismutVector::zero(&other)).is_err();
        out.push(CheckRow::bound(cfg, "bundle_mismatch_rejected", if mismatch { 0.0 } else { 1.0 }, 0.0).with_counts(1, 0));

        let lhs: Vec<f64> = per_path.iter().map(|r| r.cond_terminal.0).collect();
        let rhs: Vec<f64> = per_path.iter().map(|r| r.cond_terminal.1).collect();
        out.push(CheckRow::paired(cfg, "conditional_matches_projection_T", &lhs, &rhs));
        let lhs: Vec<f64> = per_path.iter().map(|r| r.cond_middle.0).collect();
        let rhs: Vec<f64> = per_path.iter().map(|r| r.cond_middle.1).collect();
        out.push(CheckRow::paired(cfg, "conditional_matches_projection_mid", &lhs, &rhs));

        let small = MeanSe::of(&per_path.iter().map(|r| r.se_small).collect::<Vec<_>>()).mean;
        let large = MeanSe::of(&per_path.iter().map(|r| r.se_large).collect::<Vec<_>>()).mean;
        let counts = [((cfg.n_resamples / 4).max(2) as f64).ln(), (cfg.n_resamples as f64).ln()];
        let (slope, _) = fit_slope(&counts, &[small.ln(), large.ln()]);
        let mut rate = CheckRow::bound(cfg, "resample_se_rate", slope, -0.4);
        rate.rhs = -0.5;
        rate.pass = (-0.6..=-0.4).contains(&slope);
        out.push(rate);
        out.push(CheckRow::bound(cfg, "conditional_linearity", col(|r| r.linearity), 1e-10));
        out.push(CheckRow::bound(cfg, "conditional_zero_field", col(|r| r.zero), 0.0));
        let dev = col(|r| r.deviation);
        out.note_deviation(dev);
        out.push(CheckRow::bound(cfg, "resampler_gate", dev, cfg.gate()));
        Ok(out)
    }
}
