//! Flat Wiener space `C₀R^D` sampled on a uniform time grid.
//!
//! Paths are stored as Brownian increments. Cameron–Martin vectors are stored
//! as their step-wise derivative, so `h(t_i) = Σ_{j<i} ḣ_j dt` and the
//! H-inner product is the Riemann sum of `⟨ḣ1, ḣ2⟩`.

use nalgebra::SMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::geometry::{Matrix, Vector};
use crate::stats::MeanSe;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum WienerError {
    #[error("time grids differ")]
    GridMismatch,
    #[error("integrand is not adapted")]
    NotAdapted,
    #[error("chaos order {0} is not supported (orders 1 and 2 only)")]
    UnsupportedOrder(usize),
    #[error("ensemble of {got} samples is too small for {needed} basis functions")]
    EnsembleTooSmall { got: usize, needed: usize },
    #[error("vector field has a term outside the supported span: {0}")]
    NotInSpan(&'static str),
    #[error("path functional evaluated without a path or linearization")]
    MissingPath,
    #[error("invalid time grid: horizon {horizon}, steps {steps}")]
    InvalidGrid { horizon: f64, steps: usize },
}

/// Uniform partition of `[0, T]` into `steps` intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self, WienerError> {
        if !(horizon > 0.0 && horizon.is_finite()) || steps == 0 {
            return Err(WienerError::InvalidGrid { horizon, steps });
        }
        Ok(TimeGrid { horizon, steps })
    }

    /// Grid with step as close to `dt` as an integer step count allows.
    pub fn with_step(horizon: f64, dt: f64) -> Result<Self, WienerError> {
        if !(dt > 0.0) {
            return Err(WienerError::InvalidGrid { horizon, steps: 0 });
        }
        Self::new(horizon, ((horizon / dt).round() as usize).max(1))
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        self.horizon * i as f64 / self.steps as f64
    }

    /// Grid index closest to time `t`.
    pub fn index_of(&self, t: f64) -> usize {
        ((t / self.horizon * self.steps as f64).round() as usize).min(self.steps)
    }
}

/// Mix a seed and a sequence of tags into an independent generator stream.
///
/// Used as `derive_rng(seed, &[path_index, resample_index])` so that every
/// ensemble member owns its stream regardless of which worker evaluates it.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix(seed ^ 0x5EED_0F_7A7B5);
    for &t in tags {
        state = splitmix(state ^ splitmix(t.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    ChaCha8Rng::seed_from_u64(state)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn gaussian_vector<const D: usize, R: rand::Rng>(rng: &mut R, scale: f64) -> Vector<D> {
    Vector::<D>::from_fn(|_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

/// A Brownian path through its increments `ΔB_i = B_{t_{i+1}} - B_{t_i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath<const D: usize> {
    pub grid: TimeGrid,
    pub increments: Vec<Vector<D>>,
}

impl<const D: usize> NoisePath<D> {
    pub fn zero(grid: TimeGrid) -> Self {
        NoisePath { grid, increments: vec![Vector::zeros(); grid.steps()] }
    }

    /// `B_{t_i}`.
    pub fn value_at(&self, i: usize) -> Vector<D> {
        self.increments[..i].iter().sum()
    }

    /// `B_{t_0}, …, B_{t_N}`.
    pub fn values(&self) -> Vec<Vector<D>> {
        let mut out = Vec::with_capacity(self.increments.len() + 1);
        let mut acc = Vector::<D>::zeros();
        out.push(acc);
        for d in &self.increments {
            acc += d;
            out.push(acc);
        }
        out
    }

    /// The shifted path `ω + εh`.
    pub fn shifted(&self, h: &CameronMartin<D>, eps: f64) -> Self {
        let dt = self.grid.dt();
        NoisePath {
            grid: self.grid,
            increments: self
                .increments
                .iter()
                .zip(&h.deriv)
                .map(|(b, hd)| b + hd * (eps * dt))
                .collect(),
        }
    }
}

/// Sample `N` i.i.d. `N(0, dt I)` increments from a fresh stream.
pub fn sample_noise<const D: usize>(seed: u64, grid: TimeGrid) -> NoisePath<D> {
    sample_noise_stream(seed, &[], grid)
}

pub fn sample_noise_stream<const D: usize>(seed: u64, tags: &[u64], grid: TimeGrid) -> NoisePath<D> {
    let mut rng = derive_rng(seed, tags);
    let scale = grid.dt().sqrt();
    NoisePath {
        grid,
        increments: (0..grid.steps()).map(|_| gaussian_vector(&mut rng, scale)).collect(),
    }
}

/// Element of `H = L₀^{2,1}R^D` through its step-wise derivative.
#[derive(Debug, Clone, PartialEq)]
pub struct CameronMartin<const D: usize> {
    pub grid: TimeGrid,
    pub deriv: Vec<Vector<D>>,
}

impl<const D: usize> CameronMartin<D> {
    pub fn zero(grid: TimeGrid) -> Self {
        CameronMartin { grid, deriv: vec![Vector::zeros(); grid.steps()] }
    }

    pub fn from_fn(grid: TimeGrid, f: impl Fn(f64) -> Vector<D>) -> Self {
        CameronMartin { grid, deriv: (0..grid.steps()).map(|i| f(grid.time(i))).collect() }
    }

    pub fn constant(grid: TimeGrid, v: Vector<D>) -> Self {
        CameronMartin { grid, deriv: vec![v; grid.steps()] }
    }

    /// `h(t_i)`.
    pub fn value_at(&self, i: usize) -> Vector<D> {
        self.deriv[..i].iter().sum::<Vector<D>>() * self.grid.dt()
    }

    pub fn linear_comb(&self, a: f64, other: &Self, b: f64) -> Self {
        CameronMartin {
            grid: self.grid,
            deriv: self.deriv.iter().zip(&other.deriv).map(|(x, y)| x * a + y * b).collect(),
        }
    }

    pub fn scaled(&self, a: f64) -> Self {
        CameronMartin { grid: self.grid, deriv: self.deriv.iter().map(|x| x * a).collect() }
    }

    pub fn norm(&self) -> f64 {
        h_inner(self, self).map(f64::sqrt).unwrap_or(f64::NAN)
    }
}

/// `⟨h1, h2⟩_H = Σ ⟨ḣ1_i, ḣ2_i⟩ dt`.
pub fn h_inner<const D: usize>(
    h1: &CameronMartin<D>,
    h2: &CameronMartin<D>,
) -> Result<f64, WienerError> {
    if h1.grid != h2.grid {
        return Err(WienerError::GridMismatch);
    }
    let terms: Vec<f64> = h1.deriv.iter().zip(&h2.deriv).map(|(a, b)| a.dot(b)).collect();
    Ok(crate::stats::pairwise_sum(&terms) * h1.grid.dt())
}

/// `L(R^D, R^P)`-valued step process.
///
/// `adapted` records whether `values[i]` was computed from `increments[..i]`
/// only; the Itô integral refuses processes that are not.
#[derive(Debug, Clone, PartialEq)]
pub struct StepProcess<const P: usize, const D: usize> {
    pub grid: TimeGrid,
    pub values: Vec<SMatrix<f64, P, D>>,
    pub adapted: bool,
}

impl<const P: usize, const D: usize> StepProcess<P, D> {
    pub fn adapted(grid: TimeGrid, values: Vec<SMatrix<f64, P, D>>) -> Self {
        StepProcess { grid, values, adapted: true }
    }

    pub fn constant(grid: TimeGrid, value: SMatrix<f64, P, D>) -> Self {
        Self::adapted(grid, vec![value; grid.steps()])
    }

    /// `Σ |α_i|² dt` (Frobenius norm).
    pub fn l2_norm_sq(&self) -> f64 {
        self.values.iter().map(|a| a.norm_squared()).sum::<f64>() * self.grid.dt()
    }
}

/// Left-point Itô sum `Σ α_i(ΔB_i)`.
pub fn ito_integral<const P: usize, const D: usize>(
    alpha: &StepProcess<P, D>,
    omega: &NoisePath<D>,
) -> Result<nalgebra::SVector<f64, P>, WienerError> {
    if !alpha.adapted {
        return Err(WienerError::NotAdapted);
    }
    if alpha.grid != omega.grid {
        return Err(WienerError::GridMismatch);
    }
    Ok(alpha.values.iter().zip(&omega.increments).map(|(a, db)| a * db).sum())
}

/// Computes tangent paths `TI(h)` of an Itô map along a given noise. Provided
/// by the `ito_map` module; declared here so path functionals can be
/// differentiated through the flat calculus.
pub trait Linearization<const D: usize>: Send + Sync {
    fn tangent_path(
        &self,
        noise: &NoisePath<D>,
        path: &[Vector<D>],
        h: &CameronMartin<D>,
    ) -> Vec<Vector<D>>;
}

/// One realized sample `ω`: the noise, and when an Itô map is in play, the
/// solution path `I(ω)` and a way to differentiate it.
#[derive(Clone, Copy)]
pub struct Omega<'a, const D: usize> {
    pub noise: &'a NoisePath<D>,
    pub path: &'a [Vector<D>],
    pub linearization: Option<&'a dyn Linearization<D>>,
}

impl<'a, const D: usize> Omega<'a, D> {
    pub fn flat(noise: &'a NoisePath<D>) -> Self {
        Omega { noise, path: &[], linearization: None }
    }

    pub fn grid(&self) -> TimeGrid {
        self.noise.grid
    }
}

/// A differentiable scalar functional on Wiener space.
pub trait Functional<const D: usize>: Send + Sync {
    fn value(&self, omega: &Omega<'_, D>) -> Result<f64, WienerError>;
    /// `d^H F(h)` at `omega`.
    fn h_derivative(&self, omega: &Omega<'_, D>, h: &CameronMartin<D>) -> Result<f64, WienerError>;
}

type Body<const D: usize> = Box<dyn Fn(&[Vector<D>]) -> f64 + Send + Sync>;
type BodyGrad<const D: usize> = Box<dyn Fn(&[Vector<D>]) -> Vec<Vector<D>> + Send + Sync>;

/// `f(ω) = body(B_{t_1}, …, B_{t_k})` with an analytic gradient.
pub struct CylindricalFunction<const D: usize> {
    pub times: Vec<usize>,
    body: Body<D>,
    grad: BodyGrad<D>,
}

impl<const D: usize> CylindricalFunction<D> {
    pub fn new(
        times: Vec<usize>,
        body: impl Fn(&[Vector<D>]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&[Vector<D>]) -> Vec<Vector<D>> + Send + Sync + 'static,
    ) -> Self {
        CylindricalFunction { times, body: Box::new(body), grad: Box::new(grad) }
    }

    pub fn constant(c: f64) -> Self {
        Self::new(vec![], move |_| c, |_| vec![])
    }

    pub fn body(&self, points: &[Vector<D>]) -> f64 {
        (self.body)(points)
    }

    pub fn body_grad(&self, points: &[Vector<D>]) -> Vec<Vector<D>> {
        (self.grad)(points)
    }

    /// Largest relative mismatch between `body_grad` and central differences
    /// of `body` at `points`.
    pub fn gradient_defect(&self, points: &[Vector<D>], eps: f64) -> f64 {
        let grad = self.body_grad(points);
        let mut worst: f64 = 0.0;
        let mut p = points.to_vec();
        for (j, g) in grad.iter().enumerate() {
            for a in 0..D {
                let orig = p[j][a];
                p[j][a] = orig + eps;
                let up = self.body(&p);
                p[j][a] = orig - eps;
                let down = self.body(&p);
                p[j][a] = orig;
                let fd = (up - down) / (2.0 * eps);
                worst = worst.max((fd - g[a]).abs() / (1.0 + g[a].abs()));
            }
        }
        worst
    }

    fn points(&self, omega: &NoisePath<D>) -> Vec<Vector<D>> {
        let values = omega.values();
        self.times.iter().map(|&i| values[i]).collect()
    }
}

impl<const D: usize> Functional<D> for CylindricalFunction<D> {
    fn value(&self, omega: &Omega<'_, D>) -> Result<f64, WienerError> {
        Ok(self.body(&self.points(omega.noise)))
    }

    fn h_derivative(&self, omega: &Omega<'_, D>, h: &CameronMartin<D>) -> Result<f64, WienerError> {
        h_derivative(self, omega.noise, h)
    }
}

/// `d^H f(h) = Σ_j ∂_j body(B_{t_1}, …) · h(t_j)`.
pub fn h_derivative<const D: usize>(
    f: &CylindricalFunction<D>,
    omega: &NoisePath<D>,
    h: &CameronMartin<D>,
) -> Result<f64, WienerError> {
    if omega.grid != h.grid {
        return Err(WienerError::GridMismatch);
    }
    let grad = f.body_grad(&f.points(omega));
    Ok(f.times.iter().zip(&grad).map(|(&i, g)| g.dot(&h.value_at(i))).sum())
}

/// Rule producing a Cameron–Martin direction from a sample. Adapted rules
/// read only `increments[..i]` and `path[..=i]` when producing `ḣ_i`.
pub trait Direction<const D: usize>: Send + Sync {
    fn realize(&self, omega: &Omega<'_, D>) -> CameronMartin<D>;
    fn is_adapted(&self) -> bool {
        true
    }
}

impl<const D: usize> Direction<D> for CameronMartin<D> {
    fn realize(&self, _omega: &Omega<'_, D>) -> CameronMartin<D> {
        self.clone()
    }
}

/// Adapted direction given step-wise by `ḣ_i = rule(i, omega)`; the rule
/// must respect adaptedness.
pub struct AdaptedRule<const D: usize> {
    rule: Box<dyn Fn(usize, &Omega<'_, D>) -> Vector<D> + Send + Sync>,
}

impl<const D: usize> AdaptedRule<D> {
    pub fn new(rule: impl Fn(usize, &Omega<'_, D>) -> Vector<D> + Send + Sync + 'static) -> Self {
        AdaptedRule { rule: Box::new(rule) }
    }
}

impl<const D: usize> Direction<D> for AdaptedRule<D> {
    fn realize(&self, omega: &Omega<'_, D>) -> CameronMartin<D> {
        let grid = omega.grid();
        CameronMartin { grid, deriv: (0..grid.steps()).map(|i| (self.rule)(i, omega)).collect() }
    }
}

/// Direction read off an arbitrary (possibly anticipating) rule; accepted by
/// nothing that needs adaptedness.
pub struct AnticipatingRule<const D: usize>(pub AdaptedRule<D>);

impl<const D: usize> Direction<D> for AnticipatingRule<D> {
    fn realize(&self, omega: &Omega<'_, D>) -> CameronMartin<D> {
        self.0.realize(omega)
    }
    fn is_adapted(&self) -> bool {
        false
    }
}

/// One summand `g · U` of a flat H-vector field.
pub struct FieldTerm<'f, const D: usize> {
    pub coeff: Option<&'f dyn Functional<D>>,
    pub direction: &'f dyn Direction<D>,
}

/// Finite sum `Σ g_j U_j` with differentiable coefficients and adapted
/// directions: the span on which the flat divergence is computed.
#[derive(Default)]
pub struct FlatField<'f, const D: usize> {
    pub terms: Vec<FieldTerm<'f, D>>,
}

impl<'f, const D: usize> FlatField<'f, D> {
    pub fn new() -> Self {
        FlatField { terms: Vec::new() }
    }

    pub fn plain(direction: &'f dyn Direction<D>) -> Self {
        Self::new().with(None, direction)
    }

    pub fn with(mut self, coeff: Option<&'f dyn Functional<D>>, direction: &'f dyn Direction<D>) -> Self {
        self.terms.push(FieldTerm { coeff, direction });
        self
    }

    /// The field evaluated at one sample, as a Cameron–Martin vector.
    pub fn realize(&self, omega: &Omega<'_, D>) -> Result<CameronMartin<D>, WienerError> {
        let mut out = CameronMartin::zero(omega.grid());
        for t in &self.terms {
            let g = match t.coeff {
                Some(c) => c.value(omega)?,
                None => 1.0,
            };
            out = out.linear_comb(1.0, &t.direction.realize(omega), g);
        }
        Ok(out)
    }
}

/// Flat divergence: `div(g·U) = -g Σ ⟨U_i, ΔB_i⟩ + d^H g(U)`, extended linearly.
///
/// Sign convention: `E[d^H f(V)] = -E[f div V]`, so `-div` is the Skorokhod
/// integral.
pub fn flat_divergence<const D: usize>(
    field: &FlatField<'_, D>,
    omega: &Omega<'_, D>,
) -> Result<f64, WienerError> {
    let mut total = 0.0;
    for t in &field.terms {
        if !t.direction.is_adapted() {
            return Err(WienerError::NotInSpan("direction is not adapted"));
        }
        let u = t.direction.realize(omega);
        if u.grid != omega.grid() {
            return Err(WienerError::GridMismatch);
        }
        let ito: f64 = u.deriv.iter().zip(&omega.noise.increments).map(|(a, b)| a.dot(b)).sum();
        total += match t.coeff {
            None => -ito,
            Some(g) => -g.value(omega)? * ito + g.h_derivative(omega, &u)?,
        };
    }
    Ok(total)
}

/// Partition of the grid into consecutive cells `[bounds[c], bounds[c+1])`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellPartition {
    pub bounds: Vec<usize>,
}

impl CellPartition {
    pub fn uniform(grid: TimeGrid, cells: usize) -> Self {
        let n = grid.steps();
        let cells = cells.clamp(1, n);
        CellPartition { bounds: (0..=cells).map(|c| c * n / cells).collect() }
    }

    pub fn len(&self) -> usize {
        self.bounds.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self, c: usize) -> std::ops::Range<usize> {
        self.bounds[c]..self.bounds[c + 1]
    }
}

/// Chaos kernel constant on the cells (order 1) or cell pairs (order 2).
///
/// Order-2 values are bilinear forms with `values[c][c'] = values[c'][c]ᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub enum ChaosKernel<const D: usize> {
    First { cells: CellPartition, values: Vec<Vector<D>> },
    Second { cells: CellPartition, values: Vec<Vec<Matrix<D>>> },
}

impl<const D: usize> ChaosKernel<D> {
    pub fn order(&self) -> usize {
        match self {
            ChaosKernel::First { .. } => 1,
            ChaosKernel::Second { .. } => 2,
        }
    }

    /// `‖α‖²` in `L²([0,T]^k)`, off-diagonal (`i ≠ j`) for order 2.
    pub fn l2_norm_sq(&self, grid: TimeGrid) -> f64 {
        let dt = grid.dt();
        match self {
            ChaosKernel::First { cells, values } => (0..cells.len())
                .map(|c| values[c].norm_squared() * cells.range(c).len() as f64 * dt)
                .sum(),
            ChaosKernel::Second { cells, values } => {
                let mut s = 0.0;
                for c in 0..cells.len() {
                    for d in 0..cells.len() {
                        let lc = cells.range(c).len() as f64;
                        let ld = cells.range(d).len() as f64;
                        let pairs = if c == d { lc * lc - lc } else { lc * ld };
                        s += values[c][d].norm_squared() * pairs * dt * dt;
                    }
                }
                s
            }
        }
    }
}

/// Per-cell increments `Z_c` and within-cell quadratic sums `Σ ΔB ΔBᵀ`.
pub struct CellFeatures<const D: usize> {
    pub z: Vec<Vector<D>>,
    pub diag: Vec<Matrix<D>>,
}

impl<const D: usize> CellFeatures<D> {
    pub fn of(cells: &CellPartition, increments: &[Vector<D>]) -> Self {
        let mut z = Vec::with_capacity(cells.len());
        let mut diag = Vec::with_capacity(cells.len());
        for c in 0..cells.len() {
            let mut zc = Vector::<D>::zeros();
            let mut dc = Matrix::<D>::zeros();
            for db in &increments[cells.range(c)] {
                zc += db;
                dc += db * db.transpose();
            }
            z.push(zc);
            diag.push(dc);
        }
        CellFeatures { z, diag }
    }

    /// `I¹` of a cell kernel against these features.
    pub fn first(&self, values: &[Vector<D>]) -> f64 {
        self.z.iter().zip(values).map(|(z, a)| a.dot(z)).sum()
    }

    /// `Σ_{i≠j} α(s_i, s_j)(ΔB_i, ΔB_j)` for a cell kernel.
    pub fn second(&self, values: &[Vec<Matrix<D>>]) -> f64 {
        let l = self.z.len();
        let mut s = 0.0;
        for c in 0..l {
            for d in 0..l {
                s += self.z[c].dot(&(values[c][d] * self.z[d]));
            }
            s -= values[c][c].component_mul(&self.diag[c]).sum();
        }
        s
    }
}

/// `I^k(α)` with the symmetric-kernel normalization `I²(α) = 2 Σ_{i<j}`,
/// so that `E[I²(α)²] = 2‖α‖²`.
pub fn iterated_integral<const D: usize>(
    order: usize,
    kernel: &ChaosKernel<D>,
    omega: &NoisePath<D>,
) -> Result<f64, WienerError> {
    if order != kernel.order() {
        return Err(WienerError::UnsupportedOrder(order));
    }
    match kernel {
        ChaosKernel::First { cells, values } => Ok(CellFeatures::of(cells, &omega.increments).first(values)),
        ChaosKernel::Second { cells, values } => {
            Ok(CellFeatures::of(cells, &omega.increments).second(values))
        }
    }
}

/// Kernel estimate with per-entry standard errors (same layout as `kernel`).
#[derive(Debug, Clone)]
pub struct KernelEstimate<const D: usize> {
    pub kernel: ChaosKernel<D>,
    pub std_error: ChaosKernel<D>,
}

/// Project `f` onto the order-`k` chaos over a step-kernel basis by
/// covariance against the (mutually orthogonal) discrete basis elements.
///
/// `ensemble` pairs each sample's increments with `f(ω)`.
pub fn chaos_project<const D: usize>(
    ensemble: &[(&NoisePath<D>, f64)],
    order: usize,
    cells: &CellPartition,
) -> Result<KernelEstimate<D>, WienerError> {
    let l = cells.len();
    let needed = match order {
        1 => l * D,
        2 => l * D * (l * D + 1) / 2,
        k => return Err(WienerError::UnsupportedOrder(k)),
    };
    if ensemble.len() <= needed + 1 {
        return Err(WienerError::EnsembleTooSmall { got: ensemble.len(), needed });
    }
    let Some((first, _)) = ensemble.first() else {
        return Err(WienerError::EnsembleTooSmall { got: 0, needed });
    };
    let grid = first.grid;
    let dt = grid.dt();
    let features: Vec<(CellFeatures<D>, f64)> = ensemble
        .iter()
        .map(|(w, f)| (CellFeatures::of(cells, &w.increments), *f))
        .collect();
    // centred about a mean anchored at the first sample, so a constant
    // functional has exactly zero covariance with every basis element
    let anchor = features[0].1;
    let shift = MeanSe::of(&features.iter().map(|(_, f)| f - anchor).collect::<Vec<_>>()).mean;
    let n = features.len() as f64;
    let estimate = |feature: &dyn Fn(&CellFeatures<D>) -> f64, norm: f64| {
        let phi: Vec<f64> = features.iter().map(|(cf, _)| feature(cf)).collect();
        let phi_mean = MeanSe::of(&phi).mean;
        let products: Vec<f64> = features
            .iter()
            .zip(&phi)
            .map(|((_, f), p)| (f - anchor - shift) * (p - phi_mean))
            .collect();
        let s = MeanSe::of(&products);
        (s.mean * n / (n - 1.0) / norm, s.std_error / norm)
    };
    let len = |c: usize| cells.range(c).len() as f64 * dt;
    match order {
        1 => {
            let mut values = Vec::with_capacity(l);
            let mut ses = Vec::with_capacity(l);
            for c in 0..l {
                let mut v = Vector::<D>::zeros();
                let mut e = Vector::<D>::zeros();
                for a in 0..D {
                    let (m, s) = estimate(&|cf| cf.z[c][a], len(c));
                    v[a] = m;
                    e[a] = s;
                }
                values.push(v);
                ses.push(e);
            }
            Ok(KernelEstimate {
                kernel: ChaosKernel::First { cells: cells.clone(), values },
                std_error: ChaosKernel::First { cells: cells.clone(), values: ses },
            })
        }
        _ => {
            let mut values = vec![vec![Matrix::<D>::zeros(); l]; l];
            let mut ses = vec![vec![Matrix::<D>::zeros(); l]; l];
            for c in 0..l {
                for d in c..l {
                    for a in 0..D {
                        for b in 0..D {
                            if c == d && b < a {
                                continue;
                            }
                            let (m, s) = if c == d {
                                let n = cells.range(c).len() as f64;
                                let q = (n * n - n) * dt * dt;
                                estimate(&|cf| cf.z[c][a] * cf.z[c][b] - cf.diag[c][(a, b)], 2.0 * q)
                            } else {
                                estimate(&|cf| cf.z[c][a] * cf.z[d][b], 2.0 * len(c) * len(d))
                            };
                            values[c][d][(a, b)] = m;
                            ses[c][d][(a, b)] = s;
                            values[d][c][(b, a)] = m;
                            ses[d][c][(b, a)] = s;
                        }
                    }
                }
            }
            Ok(KernelEstimate {
                kernel: ChaosKernel::Second { cells: cells.clone(), values },
                std_error: ChaosKernel::Second { cells: cells.clone(), values: ses },
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn grid() -> TimeGrid {
        TimeGrid::new(1.0, 100).unwrap()
    }

    #[test]
    fn sample_noise_is_deterministic() {
        let a: NoisePath<3> = sample_noise(7, grid());
        let b: NoisePath<3> = sample_noise(7, grid());
        assert_eq!(a, b);
        let c: NoisePath<3> = sample_noise(8, grid());
        assert_ne!(a, c);
    }

    #[test]
    fn h_inner_examples() {
        let g = grid();
        let e1 = Vector::<3>::x();
        let h = CameronMartin::constant(g, e1);
        assert_abs_diff_eq!(h_inner(&h, &h).unwrap(), 1.0, epsilon = 1e-12);
        let k = CameronMartin::constant(g, Vector::<3>::y());
        assert_eq!(h_inner(&h, &k).unwrap(), 0.0);
        let s = CameronMartin::from_fn(g, |t| e1 * t);
        // left-point Riemann sum of ∫ s ds on 100 cells
        assert_abs_diff_eq!(h_inner(&s, &h).unwrap(), 0.5 - 0.5 / 100.0, epsilon = 1e-12);
        let other = CameronMartin::constant(TimeGrid::new(1.0, 50).unwrap(), e1);
        assert_eq!(h_inner(&h, &other), Err(WienerError::GridMismatch));
    }

    #[test]
    fn ito_integral_telescopes() {
        let w: NoisePath<3> = sample_noise(1, grid());
        let alpha = StepProcess::<1, 3>::constant(grid(), SMatrix::<f64, 1, 3>::new(1.0, 0.0, 0.0));
        let got = ito_integral(&alpha, &w).unwrap()[0];
        assert_abs_diff_eq!(got, w.value_at(100)[0], epsilon = 1e-13);
        let mut bad = alpha.clone();
        bad.adapted = false;
        assert_eq!(ito_integral(&bad, &w), Err(WienerError::NotAdapted));
    }

    #[test]
    fn h_derivative_examples() {
        let g = grid();
        let w: NoisePath<3> = sample_noise(3, g);
        let f = CylindricalFunction::<3>::new(vec![100], |p| p[0][0], |_| vec![Vector::x()]);
        let h = CameronMartin::constant(g, Vector::x());
        assert_abs_diff_eq!(h_derivative(&f, &w, &h).unwrap(), 1.0, epsilon = 1e-12);

        let c = CylindricalFunction::<3>::constant(4.0);
        assert_eq!(h_derivative(&c, &w, &h).unwrap(), 0.0);

        // f = (B_{1/2}^1)^2 and h(1/2) = e1  ->  2 B_{1/2}^1
        let sq = CylindricalFunction::<3>::new(
            vec![50],
            |p| p[0][0] * p[0][0],
            |p| vec![Vector::x() * (2.0 * p[0][0])],
        );
        let h2 = CameronMartin::from_fn(g, |t| if t < 0.5 { Vector::x() * 2.0 } else { Vector::zeros() });
        assert_abs_diff_eq!(h2.value_at(50), Vector::x(), epsilon = 1e-12);
        let got = h_derivative(&sq, &w, &h2).unwrap();
        assert_abs_diff_eq!(got, 2.0 * w.value_at(50)[0], epsilon = 1e-12);
        let eps = 1e-4;
        let fd = (sq.body(&[w.shifted(&h2, eps).value_at(50)]) - sq.body(&[w.shifted(&h2, -eps).value_at(50)]))
            / (2.0 * eps);
        assert!((fd - got).abs() <= 1e-6 * (1.0 + got.abs()));
    }

    #[test]
    fn flat_divergence_of_constant_direction() {
        let g = grid();
        let w: NoisePath<3> = sample_noise(5, g);
        let h = CameronMartin::constant(g, Vector::x());
        let field = FlatField::plain(&h);
        let d = flat_divergence(&field, &Omega::flat(&w)).unwrap();
        assert_abs_diff_eq!(d, -w.value_at(100)[0], epsilon = 1e-13);

        let one = CylindricalFunction::<3>::constant(1.0);
        let with_one = FlatField::new().with(Some(&one), &h);
        assert_abs_diff_eq!(flat_divergence(&with_one, &Omega::flat(&w)).unwrap(), d, epsilon = 1e-13);

        let anticipating = AnticipatingRule(AdaptedRule::new(|_, o: &Omega<'_, 3>| o.noise.value_at(o.grid().steps())));
        let field = FlatField::plain(&anticipating);
        assert!(matches!(flat_divergence(&field, &Omega::flat(&w)), Err(WienerError::NotInSpan(_))));
    }

    #[test]
    fn second_order_integral_of_one_is_hermite() {
        let g = grid();
        let w: NoisePath<1> = sample_noise(11, g);
        let cells = CellPartition::uniform(g, 4);
        let ones = vec![vec![Matrix::<1>::identity(); 4]; 4];
        let i2 = iterated_integral(2, &ChaosKernel::Second { cells, values: ones }, &w).unwrap();
        let bt = w.value_at(100)[0];
        let qv: f64 = w.increments.iter().map(|d| d[0] * d[0]).sum();
        assert_abs_diff_eq!(i2, bt * bt - qv, epsilon = 1e-12);
        let err = iterated_integral(1, &ChaosKernel::<1>::First { cells: CellPartition::uniform(g, 1), values: vec![Vector::zeros()] }, &w);
        assert!(err.is_ok());
        let err = iterated_integral(3, &ChaosKernel::<1>::First { cells: CellPartition::uniform(g, 1), values: vec![Vector::zeros()] }, &w);
        assert_eq!(err, Err(WienerError::UnsupportedOrder(3)));
    }

    #[test]
    fn chaos_project_rejects_small_ensembles() {
        let g = grid();
        let paths: Vec<NoisePath<3>> = (0..5).map(|k| sample_noise_stream(1, &[k], g)).collect();
        let ens: Vec<_> = paths.iter().map(|p| (p, 1.0)).collect();
        let cells = CellPartition::uniform(g, 4);
        assert!(matches!(chaos_project(&ens, 1, &cells), Err(WienerError::EnsembleTooSmall { .. })));
        assert!(matches!(chaos_project(&ens, 3, &cells), Err(WienerError::UnsupportedOrder(3))));
    }

    proptest! {
        #[test]
        fn h_inner_is_symmetric_bilinear(a in prop::collection::vec(-2.0f64..2.0, 30), b in prop::collection::vec(-2.0f64..2.0, 30), s in -3.0f64..3.0) {
            let g = TimeGrid::new(1.0, 10).unwrap();
            let mk = |v: &[f64]| CameronMartin { grid: g, deriv: v.chunks(3).map(|c| Vector::<3>::new(c[0], c[1], c[2])).collect() };
            let (ha, hb) = (mk(&a), mk(&b));
            let ab = h_inner(&ha, &hb).unwrap();
            prop_assert!((ab - h_inner(&hb, &ha).unwrap()).abs() < 1e-12);
            let lhs = h_inner(&ha.linear_comb(s, &hb, 1.0), &hb).unwrap();
            prop_assert!((lhs - (s * ab + h_inner(&hb, &hb).unwrap())).abs() < 1e-10);
            prop_assert!(h_inner(&ha, &ha).unwrap() >= 0.0);
        }

        #[test]
        fn h_derivative_matches_finite_differences(seed in 0u64..500, c in 0.2f64..2.0) {
            let g = TimeGrid::new(1.0, 40).unwrap();
            let w: NoisePath<3> = sample_noise(seed, g);
            let f = CylindricalFunction::<3>::new(
                vec![10, 40],
                move |p| (c * p[0][0]).sin() * p[1][1] + (-p[1].norm_squared()).exp(),
                move |p| vec![
                    Vector::<3>::new(c * (c * p[0][0]).cos() * p[1][1], 0.0, 0.0),
                    Vector::<3>::new(0.0, (c * p[0][0]).sin(), 0.0) - p[1] * (2.0 * (-p[1].norm_squared()).exp()),
                ],
            );
            let h = CameronMartin::from_fn(g, |t| Vector::<3>::new(1.0, t, -t * t));
            let got = h_derivative(&f, &w, &h).unwrap();
            let eps = 1e-4;
            let fd = (f.value(&Omega::flat(&w.shifted(&h, eps))).unwrap()
                - f.value(&Omega::flat(&w.shifted(&h, -eps))).unwrap()) / (2.0 * eps);
            prop_assert!((fd - got).abs() <= 1e-6 * (1.0 + got.abs()));
        }
    }
}
