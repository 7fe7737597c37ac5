//! Flat Wiener space: integration by parts and chaos projection.

use rand::Rng;

use super::{worst, Setup, AUX, BASE, TEST};
use crate::geometry::{EmbeddedManifold, Matrix, Vector};
use crate::harness::config::Profile;
use crate::harness::registry::{dispatch, Experiment, OnManifold};
use crate::harness::{ensemble, CheckRow, ExperimentConfig, Outcome, Result};
use crate::stats::MeanSe;
use crate::wiener::{
    chaos_project, derive_rng, flat_divergence, gaussian_vector, iterated_integral, AdaptedRule, AnticipatingRule,
    CameronMartin, CellPartition, ChaosKernel, CylindricalFunction, Direction, FlatField, Functional, NoisePath,
    Omega, WienerError,
};

/// `ḣ_i = tanh(B_{t_i})` componentwise.
struct TanhOfB;

impl<const D: usize> Direction<D> for TanhOfB {
    fn realize(&self, omega: &Omega<'_, D>) -> CameronMartin<D> {
        let grid = omega.grid();
        let mut b = Vector::<D>::zeros();
        let mut deriv = Vec::with_capacity(grid.steps());
        for db in &omega.noise.increments {
            deriv.push(b.map(f64::tanh));
            b += db;
        }
        CameronMartin { grid, deriv }
    }
}

fn test_functions<const D: usize>(q: usize, h: usize, t: usize) -> Vec<(&'static str, CylindricalFunction<D>)> {
    let e = |k: usize| crate::geometry::unit::<D>(k);
    vec![
        ("linear", CylindricalFunction::new(vec![t], |p| p[0][0], move |_| vec![e(0)])),
        (
            "sin_plus_linear",
            CylindricalFunction::new(
                vec![h, t],
                |p| p[0][0].sin() + p[1][1],
                move |p| vec![e(0) * p[0][0].cos(), e(1)],
            ),
        ),
        (
            "gaussian_bump",
            CylindricalFunction::new(
                vec![t],
                |p: &[Vector<D>]| (-0.5 * p[0].norm_squared()).exp(),
                |p: &[Vector<D>]| vec![p[0] * -(-0.5 * p[0].norm_squared()).exp()],
            ),
        ),
        ("dot_product", CylindricalFunction::new(vec![q, t], |p: &[Vector<D>]| p[0].dot(&p[1]), |p| vec![p[1], p[0]])),
        (
            "cos_times_last",
            CylindricalFunction::new(
                vec![h, t],
                |p| p[0][0].cos() * p[1][D - 1],
                move |p| vec![e(0) * (-p[0][0].sin() * p[1][D - 1]), e(D - 1) * p[0][0].cos()],
            ),
        ),
        ("square_norm", CylindricalFunction::new(vec![t], |p: &[Vector<D>]| p[0].norm_squared(), |p| vec![p[0] * 2.0])),
    ]
}

pub struct FlatIbp;

impl Experiment for FlatIbp {
    fn id(&self) -> &'static str {
        "flat_ibp"
    }
    fn summary(&self) -> &'static str {
        "E[d^H f(V)] = -E[f div V] for cylindrical f and adapted V on flat Wiener space"
    }
    fn exercises(&self) -> &'static [&'static str] {
        &[]
    }
    fn run(&self, cfg: &ExperimentConfig) -> Result<Outcome> {
        dispatch(self, cfg)
    }
}

impl OnManifold for FlatIbp {
    fn run_on<const D: usize>(&self, cfg: &ExperimentConfig, m: &dyn EmbeddedManifold<D>, x0: Vector<D>) -> Result<Outcome> {
        let s = Setup::new(cfg, m, x0)?;
        let grid = s.grid;
        let (q, h, t) = (s.at(0.25), s.at(0.5), grid.steps());
        let fs = test_functions::<D>(q, h, t);
        let mut rng = derive_rng(cfg.seed, &[AUX]);
        let (a, b): (Vector<D>, Vector<D>) = (gaussian_vector(&mut rng, 1.0), gaussian_vector(&mut rng, 1.0));
        let fixed = CameronMartin::from_fn(grid, |t| a + b * (2.0 * std::f64::consts::PI * t).sin());
        let weight = CylindricalFunction::<D>::new(
            vec![h],
            |p| p[0][0].cos(),
            |p| vec![crate::geometry::unit::<D>(0) * -p[0][0].sin()],
        );
        let adapted = TanhOfB;
        let fields: Vec<(&str, FlatField<'_, D>)> = vec![
            ("fixed", FlatField::plain(&fixed)),
            ("adapted", FlatField::plain(&adapted)),
            ("weighted", FlatField::new().with(Some(&weight), &fixed)),
            ("sum", FlatField::new().with(None, &fixed).with(Some(&weight), &adapted)),
        ];
        let samples = ensemble(cfg.n_paths, |p| {
            let noise = s.noise(BASE, p);
            let omega = Omega::flat(&noise);
            let mut row = Vec::with_capacity(fs.len() * fields.len());
            for (_, v) in &fields {
                let dir = v.realize(&omega)?;
                let div = flat_divergence(v, &omega)?;
                for (_, f) in &fs {
                    row.push((f.h_derivative(&omega, &dir)?, -f.value(&omega)? * div));
                }
            }
            Ok(row)
        })?;
        let mut out = Outcome::default();
        let mut k = 0;
        for (vname, _) in &fields {
            for (fname, _) in &fs {
                let lhs: Vec<f64> = samples.iter().map(|r| r[k].0).collect();
                let rhs: Vec<f64> = samples.iter().map(|r| r[k].1).collect();
                out.push(CheckRow::paired_with_budget(cfg, &format!("{fname}_{vname}"), &lhs, &rhs, 0.0));
                k += 1;
            }
        }

        let future = AnticipatingRule(AdaptedRule::new(move |_, omega: &Omega<'_, D>| omega.noise.value_at(t)));
        let noise = s.noise(BASE, 0);
        let rejected = matches!(
            flat_divergence(&FlatField::plain(&future), &Omega::flat(&noise)),
            Err(WienerError::NotInSpan(_))
        );
        out.push(CheckRow::bound(cfg, "anticipating_rejected", if rejected { 0.0 } else { 1.0 }, 0.0).with_counts(1, 0));
        Ok(out)
    }
}

fn random_first<const D: usize>(cells: &CellPartition, rng: &mut impl Rng) -> ChaosKernel<D> {
    ChaosKernel::First { cells: cells.clone(), values: (0..cells.len()).map(|_| gaussian_vector(rng, 1.0)).collect() }
}

fn random_second<const D: usize>(cells: &CellPartition, rng: &mut impl Rng) -> ChaosKernel<D> {
    let l = cells.len();
    let mut values = vec![vec![Matrix::<D>::zeros(); l]; l];
    for c in 0..l {
        for d in c..l {
            let g = Matrix::<D>::from_fn(|_, _| gaussian_vector::<1, _>(rng, 1.0)[0]);
            let g = if c == d { (g + g.transpose()) * 0.5 } else { g };
            values[c][d] = g;
            values[d][c] = g.transpose();
        }
    }
    ChaosKernel::Second { cells: cells.clone(), values }
}

/// `⟨α, β⟩` in `L²`, off-diagonal for order 2; `0` across orders.
pub(crate) fn kernel_inner<const D: usize>(a: &ChaosKernel<D>, b: &ChaosKernel<D>, dt: f64) -> f64 {
    match (a, b) {
        (ChaosKernel::First { cells, values: va }, ChaosKernel::First { values: vb, .. }) => (0..cells.len())
            .map(|c| va[c].dot(&vb[c]) * cells.range(c).len() as f64 * dt)
            .sum(),
        (ChaosKernel::Second { cells, values: va }, ChaosKernel::Second { values: vb, .. }) => {
            let mut s = 0.0;
            for c in 0..cells.len() {
                for d in 0..cells.len() {
                    let lc = cells.range(c).len() as f64;
                    let ld = cells.range(d).len() as f64;
                    let pairs = if c == d { lc * lc - lc } else { lc * ld };
                    s += va[c][d].dot(&vb[c][d]) * pairs * dt * dt;
                }
            }
            s
        }
        _ => 0.0,
    }
}

/// Sample covariance of `f` and `g` with the standard error of the
/// product mean.
pub(crate) fn covariance(f: &[f64], g: &[f64]) -> (f64, f64) {
    let mf = MeanSe::of(f).mean;
    let mg = MeanSe::of(g).mean;
    let prods: Vec<f64> = f.iter().zip(g).map(|(a, b)| (a - mf) * (b - mg)).collect();
    let s = MeanSe::of(&prods);
    let n = f.len() as f64;
    (s.mean * n / (n - 1.0), s.std_error)
}

fn max_abs<const D: usize>(k: &ChaosKernel<D>) -> f64 {
    match k {
        ChaosKernel::First { values, .. } => worst(values.iter().map(|v| v.amax())),
        ChaosKernel::Second { values, .. } => worst(values.iter().flatten().map(|v| v.amax())),
    }
}

pub struct ChaosFlat;

/// Number of cells in the step-kernel basis.
const CELLS: usize = 4;

impl Experiment for ChaosFlat {
    fn id(&self) -> &'static str {
        "chaos_flat"
    }
    fn summary(&self) -> &'static str {
        "chaos projection recovers known first and second order kernels on flat Wiener space"
    }
    fn exercises(&self) -> &'static [&'static str] {
        &[]
    }
    fn profile(&self) -> Profile {
        Profile { dt: 1e-2, ..Profile::default() }
    }
    fn run(&self, cfg: &ExperimentConfig) -> Result<Outcome> {
        dispatch(self, cfg)
    }
}

impl OnManifold for ChaosFlat {
    fn run_on<const D: usize>(&self, cfg: &ExperimentConfig, m: &dyn EmbeddedManifold<D>, x0: Vector<D>) -> Result<Outcome> {
        let s = Setup::new(cfg, m, x0)?;
        let grid = s.grid;
        let dt = grid.dt();
        let cells = CellPartition::uniform(grid, CELLS);
        let mut rng = derive_rng(cfg.seed, &[AUX]);
        let alpha = random_first::<D>(&cells, &mut rng);
        let beta = random_second::<D>(&cells, &mut rng);
        let (na, nb) = (alpha.l2_norm_sq(grid), beta.l2_norm_sq(grid));
        let t = grid.steps();

        let draw = |stream: u64| {
            ensemble(cfg.n_paths, |p| {
                let noise: NoisePath<D> = s.noise(stream, p);
                let i1 = iterated_integral(1, &alpha, &noise)?;
                let i2 = iterated_integral(2, &beta, &noise)?;
                let bt = noise.value_at(t);
                let nonlinear = bt[0].sin() + (bt[D - 1] * bt[D - 1]) * 0.5 + (noise.value_at(t / 2)[0]).tanh();
                Ok((noise, i1, i2, nonlinear))
            })
        };
        let test = draw(BASE)?;
        let train = draw(TEST)?;
        let f: Vec<f64> = test.iter().map(|x| 1.0 + x.1 + x.2).collect();
        let i1: Vec<f64> = test.iter().map(|x| x.1).collect();
        let i2: Vec<f64> = test.iter().map(|x| x.2).collect();
        let with = |vals: &[f64]| -> Vec<(&NoisePath<D>, f64)> { test.iter().map(|x| &x.0).zip(vals.iter().copied()).collect() };

        let mut out = Outcome::default();
        let k1 = chaos_project(&with(&f), 1, &cells)?;
        let (_, se1) = covariance(&f, &i1);
        out.push(CheckRow::independent(cfg, "first_order_coefficient", (kernel_inner(&k1.kernel, &alpha, dt) / na, se1 / na), (1.0, 0.0), 0.0));
        let k2 = chaos_project(&with(&f), 2, &cells)?;
        let (_, se2) = covariance(&f, &i2);
        out.push(CheckRow::independent(
            cfg,
            "second_order_coefficient",
            (kernel_inner(&k2.kernel, &beta, dt) / nb, se2 / (2.0 * nb)),
            (1.0, 0.0),
            0.0,
        ));
        let only2 = chaos_project(&with(&i2), 1, &cells)?;
        let (_, se) = covariance(&i2, &i1);
        out.push(CheckRow::independent(cfg, "cross_order_zero", (kernel_inner(&only2.kernel, &alpha, dt) / na, se / na), (0.0, 0.0), 0.0));
        let ones = vec![3.5; f.len()];
        let c1 = max_abs(&chaos_project(&with(&ones), 1, &cells)?.kernel);
        let c2 = max_abs(&chaos_project(&with(&ones), 2, &cells)?.kernel);
        out.push(CheckRow::bound(cfg, "constant_has_zero_kernels", c1.max(c2), 0.0));
        let tiny = chaos_project(&with(&f)[..3], 1, &cells);
        let rejected = matches!(tiny, Err(WienerError::EnsembleTooSmall { .. }));
        out.push(CheckRow::bound(cfg, "small_ensemble_rejected", if rejected { 0.0 } else { 1.0 }, 0.0).with_counts(3, 0));

        // kernels trained on an independent ensemble; residual variance
        // on the test ensemble must not grow as orders are added
        let train_g: Vec<f64> = train.iter().map(|x| x.3).collect();
        let train_pairs: Vec<(&NoisePath<D>, f64)> = train.iter().map(|x| &x.0).zip(train_g.iter().copied()).collect();
        let g1 = chaos_project(&train_pairs, 1, &cells)?.kernel;
        let g2 = chaos_project(&train_pairs, 2, &cells)?.kernel;
        let parts = test
            .iter()
            .map(|x| Ok((x.3, iterated_integral(1, &g1, &x.0)?, iterated_integral(2, &g2, &x.0)?)))
            .collect::<std::result::Result<Vec<_>, WienerError>>()?;
        let g: Vec<f64> = parts.iter().map(|p| p.0).collect();
        let mean = |v: &[f64]| MeanSe::of(v).mean;
        let r0: Vec<f64> = g.iter().map(|x| x - mean(&g)).collect();
        let res1: Vec<f64> = parts.iter().map(|p| p.0 - p.1).collect();
        let r1: Vec<f64> = res1.iter().map(|x| x - mean(&res1)).collect();
        let res2: Vec<f64> = parts.iter().map(|p| p.0 - p.1 - p.2).collect();
        let r2: Vec<f64> = res2.iter().map(|x| x - mean(&res2)).collect();
        let drop = |a: &[f64], b: &[f64]| {
            let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * x - y * y).collect();
            let s = MeanSe::of(&d);
            (s.mean, s.std_error)
        };
        out.push(CheckRow::at_least(cfg, "residual_drops_order1", drop(&r0, &r1), 0.0));
        out.push(CheckRow::at_least(cfg, "residual_drops_order2", drop(&r1, &r2), 0.0));
        out.estimate(cfg, "residual_var_order0", MeanSe::of(&r0.iter().map(|x| x * x).collect::<Vec<_>>()));
        out.estimate(cfg, "residual_var_order1", MeanSe::of(&r1.iter().map(|x| x * x).collect::<Vec<_>>()));
        out.estimate(cfg, "residual_var_order2", MeanSe::of(&r2.iter().map(|x| x * x).collect::<Vec<_>>()));
        Ok(out)
    }
}
