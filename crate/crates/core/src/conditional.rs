//! Conditioning on the solution path by resampling the redundant noise.
//!
//! Given a base sample with path `x`, a resample replaces the kernel part of
//! each increment: `ΔB'_i = K⊥(x_i)ΔB_i + K(x_i)Δβ'_i`. The filtered
//! integrator only sees `K⊥ΔB`, so every resample re-solves to the same path
//! and averages over resamples estimate `E{· | x}`.

use rayon::prelude::*;
use thiserror::Error;

use crate::bismut::{
    path_fingerprint, BismutError, BismutVector, HVectorField, PathDirection, PathFunction, PathMeasurable,
};
use crate::geometry::{Matrix, Vector};
use crate::ito_map::{ItoError, ItoMap, SolutionBundle};
use crate::stats::MeanSe;
use crate::wiener::{
    derive_rng, flat_divergence, gaussian_vector, CellFeatures, ChaosKernel, CameronMartin, Direction, FlatField,
    Functional, Linearization, NoisePath, Omega, StepProcess, WienerError,
};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ConditionalError {
    #[error("resample {resample} left the base path by {deviation:e} (gate {gate:e}); dt too coarse or integrator not kernel-blind")]
    ResamplerInvalid { resample: usize, deviation: f64, gate: f64 },
    #[error("need at least 2 resamples, got {0}")]
    TooFewResamples(usize),
    #[error("chaos order {0} is not supported (orders 1 and 2 only)")]
    UnsupportedOrder(usize),
    #[error(transparent)]
    Ito(#[from] ItoError),
    #[error(transparent)]
    Bismut(#[from] BismutError),
    #[error(transparent)]
    Wiener(#[from] WienerError),
}

/// Path-reproduction gate `20 · dt^{1/2} · dt`.
pub fn default_gate(dt: f64) -> f64 {
    20.0 * dt.sqrt() * dt
}

/// Resampling recipe for one base sample.
#[derive(Clone)]
pub struct ResamplePlan<'a, const D: usize> {
    pub map: ItoMap<'a, D>,
    pub base: &'a SolutionBundle<D>,
    pub n_resamples: usize,
    pub seed: u64,
    /// Distinguishes base samples that share a seed (the ensemble index).
    pub stream: u64,
    pub tolerance: f64,
    /// Multiplier on the fresh kernel noise; 0 is the diagnostic mode.
    pub fresh_scale: f64,
    /// `K⊥(x_i)ΔB_i`, shared by every resample.
    pub filtered: Vec<Vector<D>>,
    kernel: Vec<Matrix<D>>,
}

/// One re-solved resample.
pub struct Resample<const D: usize> {
    pub noise: NoisePath<D>,
    pub path: Vec<Vector<D>>,
    pub deviation: f64,
}

/// Per-resample results with the worst path deviation seen.
pub struct Resampled<T> {
    pub values: Vec<T>,
    pub max_deviation: f64,
}

impl<'a, const D: usize> ResamplePlan<'a, D> {
    pub fn new(
        map: ItoMap<'a, D>,
        base: &'a SolutionBundle<D>,
        n_resamples: usize,
        seed: u64,
        stream: u64,
    ) -> Result<Self, ConditionalError> {
        if n_resamples < 2 {
            return Err(ConditionalError::TooFewResamples(n_resamples));
        }
        let mut filtered = Vec::with_capacity(base.steps());
        let mut kernel = Vec::with_capacity(base.steps());
        for (x, db) in base.path.iter().zip(&base.noise.increments) {
            let kp = map.manifold.kernel_complement(x);
            filtered.push(kp * db);
            kernel.push(Matrix::<D>::identity() - kp);
        }
        Ok(ResamplePlan {
            map,
            base,
            n_resamples,
            seed,
            stream,
            tolerance: default_gate(base.dt()),
            fresh_scale: 1.0,
            filtered,
            kernel,
        })
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    /// Resamples keep `K⊥ΔB` and drop the kernel noise entirely.
    pub fn without_fresh_noise(mut self) -> Self {
        self.fresh_scale = 0.0;
        self
    }

    /// `ΔB'` for resample `k`.
    pub fn resample_noise(&self, k: usize) -> NoisePath<D> {
        let grid = self.base.noise.grid;
        let mut rng = derive_rng(self.seed, &[self.stream, 1 + k as u64]);
        let scale = grid.dt().sqrt() * self.fresh_scale;
        let increments = self
            .filtered
            .iter()
            .zip(&self.kernel)
            .map(|(u, kp)| u + kp * gaussian_vector::<D, _>(&mut rng, scale))
            .collect();
        NoisePath { grid, increments }
    }

    /// Re-solve resample `k` and enforce the gate.
    pub fn resolve(&self, k: usize) -> Result<Resample<D>, ConditionalError> {
        let noise = self.resample_noise(k);
        let path = self.map.solve_path(&noise)?;
        let deviation =
            path.iter().zip(&self.base.path).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        if !(deviation <= self.tolerance) {
            return Err(ConditionalError::ResamplerInvalid { resample: k, deviation, gate: self.tolerance });
        }
        Ok(Resample { noise, path, deviation })
    }

    /// Evaluate `f` on every resample, in resample order.
    pub fn for_each<T: Send>(
        &self,
        f: impl Fn(&Omega<'_, D>) -> Result<T, ConditionalError> + Sync,
    ) -> Result<Resampled<T>, ConditionalError> {
        let lin: &dyn Linearization<D> = &self.map;
        let out: Vec<(T, f64)> = (0..self.n_resamples)
            .into_par_iter()
            .map(|k| {
                let r = self.resolve(k)?;
                let omega = Omega { noise: &r.noise, path: &r.path, linearization: Some(lin) };
                Ok((f(&omega)?, r.deviation))
            })
            .collect::<Result<_, ConditionalError>>()?;
        let max_deviation = out.iter().map(|(_, d)| *d).fold(0.0, f64::max);
        Ok(Resampled { values: out.into_iter().map(|(v, _)| v).collect(), max_deviation })
    }

    /// The base sample as an [`Omega`].
    pub fn base_omega(&self) -> Omega<'_, D> {
        Omega { noise: &self.base.noise, path: &self.base.path, linearization: Some(&self.map) }
    }
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionalEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_used: usize,
}

impl ConditionalEstimate {
    pub fn of(samples: &[f64]) -> Self {
        let s = MeanSe::of(samples);
        ConditionalEstimate { value: s.mean, std_error: s.std_error, n_used: s.n }
    }

    pub fn exact(value: f64) -> Self {
        ConditionalEstimate { value, std_error: 0.0, n_used: 0 }
    }
}

/// `E{f | x}` at the plan's base path.
pub fn conditional_expectation<const D: usize>(
    f: impl Fn(&Omega<'_, D>) -> Result<f64, ConditionalError> + Sync,
    plan: &ResamplePlan<'_, D>,
) -> Result<ConditionalEstimate, ConditionalError> {
    Ok(ConditionalEstimate::of(&plan.for_each(f)?.values))
}

/// Estimates of both sides of an identity from one set of resamples, with
/// the paired difference `lhs_k − rhs_k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedEstimate {
    pub lhs: ConditionalEstimate,
    pub rhs: ConditionalEstimate,
    pub diff: ConditionalEstimate,
    pub max_deviation: f64,
}

impl PairedEstimate {
    fn of(pairs: &Resampled<(f64, f64)>) -> Self {
        let l: Vec<f64> = pairs.values.iter().map(|p| p.0).collect();
        let r: Vec<f64> = pairs.values.iter().map(|p| p.1).collect();
        let d: Vec<f64> = pairs.values.iter().map(|p| p.0 - p.1).collect();
        PairedEstimate {
            lhs: ConditionalEstimate::of(&l),
            rhs: ConditionalEstimate::of(&r),
            diff: ConditionalEstimate::of(&d),
            max_deviation: pairs.max_deviation,
        }
    }
}

/// Scalar integrand `α(ω) ∈ (R^D)*` for `∫ α dB`, one vector per step.
pub trait Integrand<const D: usize>: Send + Sync {
    /// `α_0, …, α_{N−1}`; entry `i` may depend on `increments[..i]` and `path[..=i]`.
    fn integrand(&self, omega: &Omega<'_, D>) -> Vec<Vector<D>>;
    fn is_adapted(&self) -> bool {
        true
    }
}

impl<const D: usize> Integrand<D> for StepProcess<1, D> {
    fn integrand(&self, _omega: &Omega<'_, D>) -> Vec<Vector<D>> {
        self.values.iter().map(|a| a.transpose()).collect()
    }
    fn is_adapted(&self) -> bool {
        self.adapted
    }
}

type IntegrandRule<const D: usize> = Box<dyn Fn(&Omega<'_, D>) -> Vec<Vector<D>> + Send + Sync>;

/// Integrand from a closure; the closure is trusted to be adapted.
pub struct AdaptedIntegrand<const D: usize> {
    rule: IntegrandRule<D>,
}

impl<const D: usize> AdaptedIntegrand<D> {
    pub fn new(rule: impl Fn(&Omega<'_, D>) -> Vec<Vector<D>> + Send + Sync + 'static) -> Self {
        AdaptedIntegrand { rule: Box::new(rule) }
    }

    /// Step-wise form `α_i = rule(i, ω)`.
    pub fn stepwise(rule: impl Fn(usize, &Omega<'_, D>) -> Vector<D> + Send + Sync + 'static) -> Self {
        Self::new(move |omega| (0..omega.noise.increments.len()).map(|i| rule(i, omega)).collect())
    }
}

impl<const D: usize> Integrand<D> for AdaptedIntegrand<D> {
    fn integrand(&self, omega: &Omega<'_, D>) -> Vec<Vector<D>> {
        (self.rule)(omega)
    }
}

/// Both sides of `E{∫α dB | x} = ∫ E{α | x} K⊥(x) dB`.
///
/// Per resample, `lhs_k = Σ α_i(ω_k)·ΔB'_i` and `rhs_k = Σ α_i(ω_k)·K⊥(x_i)ΔB_i`,
/// so the mean of `rhs_k` is the right side with the inner conditional
/// expectation estimated from the same resamples.
pub fn lemma6_check<const D: usize>(
    alpha: &dyn Integrand<D>,
    plan: &ResamplePlan<'_, D>,
) -> Result<PairedEstimate, ConditionalError> {
    if !alpha.is_adapted() {
        return Err(WienerError::NotAdapted.into());
    }
    let pairs = plan.for_each(|omega| {
        let a = alpha.integrand(omega);
        let lhs = a.iter().zip(&omega.noise.increments).map(|(a, b)| a.dot(b)).sum();
        let rhs = a.iter().zip(&plan.filtered).map(|(a, u)| a.dot(u)).sum();
        Ok((lhs, rhs))
    })?;
    Ok(PairedEstimate::of(&pairs))
}

fn pullback_divergence<const D: usize>(
    v: &HVectorField<D>,
    plan: &ResamplePlan<'_, D>,
    omega: &Omega<'_, D>,
) -> Result<f64, ConditionalError> {
    let Some(pb) = v.pullback(plan.map.manifold)? else {
        return Ok(0.0);
    };
    let field = FlatField::new().with(pb.coeff.map(|g| g as &dyn Functional<D>), &pb.direction);
    Ok(flat_divergence(&field, omega)?)
}

/// `div V(x) = E{div I*(Y V) | x}`.
pub fn pathspace_divergence<const D: usize>(
    v: &HVectorField<D>,
    plan: &ResamplePlan<'_, D>,
) -> Result<ConditionalEstimate, ConditionalError> {
    if matches!(v, HVectorField::Zero) {
        return Ok(ConditionalEstimate::exact(0.0));
    }
    // surface unsupported fields before resampling
    v.pullback(plan.map.manifold)?;
    conditional_expectation(|omega| pullback_divergence(v, plan, omega), plan)
}

/// Flat H-vector field `U(ω) = g(I(ω)) h(I(ω))` that is measurable with
/// respect to the solution path. Its conditional image is known in closed
/// form, `T̄I(U)(σ) = g(σ) T̄I_σ(h(σ))`.
#[derive(Clone)]
pub struct PathField<const D: usize> {
    pub coeff: Option<std::sync::Arc<PathFunction<D>>>,
    pub direction: PathDirection<D>,
}

impl<const D: usize> PathField<D> {
    pub fn conditional_image(&self) -> HVectorField<D> {
        HVectorField::Projected { coeff: self.coeff.clone(), direction: self.direction.clone() }
    }

    /// `div U(ω)` in the flat sense.
    pub fn flat_divergence(&self, omega: &Omega<'_, D>) -> Result<f64, WienerError> {
        let dir = PathMeasurable { direction: self.direction.clone() };
        let field = FlatField::new().with(self.coeff.as_deref().map(|g| g as &dyn Functional<D>), &dir);
        flat_divergence(&field, omega)
    }
}

/// Both sides of `E{div U | x} = div T̄I(U)`.
pub fn prop7_check<const D: usize>(
    u: &PathField<D>,
    plan: &ResamplePlan<'_, D>,
) -> Result<PairedEstimate, ConditionalError> {
    let v = u.conditional_image();
    let pairs = plan.for_each(|omega| Ok((u.flat_divergence(omega)?, pullback_divergence(&v, plan, omega)?)))?;
    Ok(PairedEstimate::of(&pairs))
}

/// `T̄I(U)(x) = E{TI(U) | x}` by resampling, with per-step standard errors.
pub fn conditional_tibar<const D: usize>(
    u: &dyn Direction<D>,
    plan: &ResamplePlan<'_, D>,
) -> Result<BismutVector<D>, ConditionalError> {
    let base = plan.base;
    let tangents = plan.for_each(|omega| {
        let h = u.realize(omega);
        Ok(plan.map.tangent(omega.noise, omega.path, &h))
    })?;
    let (mean, se) = mean_paths(&tangents.values);
    let mut v = BismutVector::from_values(base, mean)?;
    v.std_error = Some(se);
    Ok(v)
}

fn mean_paths<const D: usize>(samples: &[Vec<Vector<D>>]) -> (Vec<Vector<D>>, Vec<f64>) {
    let len = samples[0].len();
    let mut mean = Vec::with_capacity(len);
    let mut se = Vec::with_capacity(len);
    let mut column = vec![0.0; samples.len()];
    for i in 0..len {
        let mut m = Vector::<D>::zeros();
        let mut s2 = 0.0;
        for a in 0..D {
            for (c, s) in column.iter_mut().zip(samples) {
                *c = s[i][a];
            }
            let ms = MeanSe::of(&column);
            m[a] = ms.mean;
            s2 += ms.std_error * ms.std_error;
        }
        mean.push(m);
        se.push(s2.sqrt());
    }
    (mean, se)
}

/// Riesz representative of the weak derivative `(df)_σ = E{d(I*f) | σ} ∘ Y_σ`
/// with respect to `⟨·,·⟩_σ`: `𝔻w/ds = P Yᵀ E{∇_{ΔB}(I*f) | σ}`.
pub fn weak_derivative<const D: usize>(
    f: &PathFunction<D>,
    plan: &ResamplePlan<'_, D>,
) -> Result<BismutVector<D>, ConditionalError> {
    let m = plan.map.manifold;
    let grads = plan.for_each(|omega| {
        let points = f.points(omega.path);
        let g = f.0.body_grad(&points);
        let cot: Vec<(usize, Vector<D>)> = f.times().iter().copied().zip(g).collect();
        Ok(plan.map.gradient(omega.noise, omega.path, &cot))
    })?;
    let (mean, se) = mean_paths(&grads.values);
    let b = plan
        .base
        .path
        .iter()
        .zip(&mean)
        .map(|(x, g)| m.tangent_projection(x) * (m.right_inverse(x).transpose() * g))
        .collect();
    let mut w = BismutVector::from_damped_derivative(plan.base, b)?;
    debug_assert_eq!(w.fingerprint, path_fingerprint(&plan.base.path));
    w.std_error = Some(se);
    Ok(w)
}

/// `J^k(α) = E{I^k(α) | x}` by iterating the conditional stochastic integral identity:
/// `J¹ = Σ α_i·ũ_i` and `J² = Σ_{i≠j} α(i,j)(ũ_i, ũ_j)` with `ũ = K⊥(x)ΔB`.
pub fn conditional_chaos<const D: usize>(
    kernel: &ChaosKernel<D>,
    plan: &ResamplePlan<'_, D>,
) -> Result<f64, ConditionalError> {
    match kernel {
        ChaosKernel::First { cells, values } => Ok(CellFeatures::of(cells, &plan.filtered).first(values)),
        ChaosKernel::Second { cells, values } => Ok(CellFeatures::of(cells, &plan.filtered).second(values)),
    }
}

/// [`conditional_chaos`] for an order given separately from the kernel.
pub fn conditional_chaos_order<const D: usize>(
    order: usize,
    kernel: &ChaosKernel<D>,
    plan: &ResamplePlan<'_, D>,
) -> Result<f64, ConditionalError> {
    if order == 0 || order > 2 || order != kernel.order() {
        return Err(ConditionalError::UnsupportedOrder(order));
    }
    conditional_chaos(kernel, plan)
}

/// `d(I*f)(h)` at a sample, via the tangent path.
pub fn path_function_derivative<const D: usize>(
    f: &PathFunction<D>,
    map: &ItoMap<'_, D>,
    bundle: &SolutionBundle<D>,
    h: &CameronMartin<D>,
) -> f64 {
    let v = map.tangent(&bundle.noise, &bundle.path, h);
    f.derivative_along(&bundle.path, &v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bismut::project_tibar;
    use crate::geometry::{EmbeddedManifold, Sphere};
    use crate::ito_map::{FilteredHeun, RawHeun};
    use crate::wiener::{sample_noise, TimeGrid};

    const S: Sphere<3> = Sphere::<3>;

    fn pole() -> Vector<3> {
        Vector::<3>::new(0.0, 0.0, 1.0)
    }

    fn setup(steps: usize, seed: u64) -> (ItoMap<'static, 3>, SolutionBundle<3>) {
        let g = TimeGrid::new(1.0, steps).unwrap();
        let map = ItoMap::new(&S, &FilteredHeun, pole()).unwrap();
        let b = map.solve_full(sample_noise(seed, g)).unwrap();
        (map, b)
    }

    #[test]
    fn filtered_part_is_kept_exactly() {
        let (map, b) = setup(200, 1);
        let plan = ResamplePlan::new(map, &b, 8, 5, 0).unwrap();
        let noise = plan.resample_noise(3);
        for (i, x) in b.path.iter().enumerate().take(200) {
            let kp = S.kernel_complement(x);
            assert!((kp * noise.increments[i] - plan.filtered[i]).norm() < 1e-15);
        }
        assert!(ResamplePlan::new(map, &b, 1, 5, 0).is_err());
    }

    #[test]
    fn resampled_paths_reproduce_the_base_path() {
        let (map, b) = setup(1000, 2);
        let plan = ResamplePlan::new(map, &b, 16, 7, 0).unwrap();
        let r = plan.for_each(|_| Ok(())).unwrap();
        assert!(r.max_deviation < 1e-12, "{}", r.max_deviation);
        let quiet = ResamplePlan::new(map, &b, 2, 7, 0).unwrap().without_fresh_noise();
        assert!(quiet.resolve(0).unwrap().deviation < 1e-12);
    }

    #[test]
    fn raw_heun_trips_the_gate() {
        let g = TimeGrid::new(1.0, 1000).unwrap();
        let map = ItoMap::new(&S, &RawHeun, pole()).unwrap();
        let b = map.solve_full(sample_noise(3, g)).unwrap();
        let plan = ResamplePlan::new(map, &b, 4, 7, 0).unwrap();
        assert!(matches!(plan.resolve(0), Err(ConditionalError::ResamplerInvalid { .. })));
    }

    #[test]
    fn kernel_resample_covariance() {
        let (map, b) = setup(50, 4);
        let plan = ResamplePlan::new(map, &b, 4000, 9, 0).unwrap();
        let i = 20;
        let x = b.path[i];
        let k = Matrix::<3>::identity() - S.kernel_complement(&x);
        let dt = b.dt();
        let samples: Vec<Matrix<3>> = (0..plan.n_resamples)
            .map(|r| {
                let u = k * plan.resample_noise(r).increments[i];
                u * u.transpose() / dt
            })
            .collect();
        for a in 0..3 {
            for c in 0..3 {
                let vals: Vec<f64> = samples.iter().map(|m| m[(a, c)]).collect();
                let s = MeanSe::of(&vals);
                assert!((s.mean - k[(a, c)]).abs() <= 3.0 * s.std_error + 1e-12, "{a}{c}: {} vs {}", s.mean, k[(a, c)]);
            }
        }
    }

    #[test]
    fn path_measurable_functions_are_fixed_points() {
        let (map, b) = setup(300, 5);
        let plan = ResamplePlan::new(map, &b, 16, 1, 0).unwrap();
        let est = conditional_expectation(|w| Ok(w.path.last().unwrap()[0]), &plan).unwrap();
        assert!((est.value - b.path[300][0]).abs() < 1e-12);
        assert!(est.std_error < 1e-12);
    }

    #[test]
    fn kernel_integrand_has_zero_rhs() {
        let (map, b) = setup(300, 6);
        let plan = ResamplePlan::new(map, &b, 64, 2, 0).unwrap();
        let alpha = AdaptedIntegrand::stepwise(|i, w: &Omega<'_, 3>| {
            let x = w.path[i];
            (Matrix::<3>::identity() - S.kernel_complement(&x)) * Vector::x()
        });
        let r = lemma6_check(&alpha, &plan).unwrap();
        assert!(r.rhs.value.abs() < 1e-12);
        assert!(r.lhs.value.abs() <= 4.0 * r.lhs.std_error);
    }

    #[test]
    fn zero_field_divergence_is_exact() {
        let (map, b) = setup(100, 7);
        let plan = ResamplePlan::new(map, &b, 4, 2, 0).unwrap();
        assert_eq!(pathspace_divergence(&HVectorField::Zero, &plan).unwrap(), ConditionalEstimate::exact(0.0));
    }

    #[test]
    fn deterministic_direction_divergence_is_path_measurable() {
        let (map, b) = setup(200, 8);
        let plan = ResamplePlan::new(map, &b, 8, 2, 0).unwrap();
        let h = CameronMartin::from_fn(b.noise.grid, |t| Vector::<3>::new(1.0, t, 0.5));
        let d = pathspace_divergence(&HVectorField::projected(PathDirection::Fixed(h.clone())), &plan).unwrap();
        let want: f64 = -(0..200).map(|i| h.deriv[i].dot(&plan.filtered[i])).sum::<f64>();
        assert!((d.value - want).abs() < 1e-12 && d.std_error < 1e-12);
    }

    #[test]
    fn conditional_tibar_matches_projection() {
        let (map, b) = setup(1000, 9);
        let plan = ResamplePlan::new(map, &b, 64, 3, 0).unwrap();
        let h = CameronMartin::constant(b.noise.grid, Vector::<3>::new(1.0, 0.0, 0.0));
        let est = conditional_tibar(&h, &plan).unwrap();
        let exact = project_tibar(&S, &b, &h).unwrap();
        let se = est.std_error.as_ref().unwrap();
        for i in (0..=1000).step_by(100) {
            let d = (est.values[i] - exact.values[i]).norm();
            assert!(d <= 4.0 * se[i] + 5e-3, "step {i}: {d} vs se {}", se[i]);
        }
        let zero = conditional_tibar(&CameronMartin::zero(b.noise.grid), &plan).unwrap();
        assert!(zero.values.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn chaos_order_limits() {
        let (map, b) = setup(10, 10);
        let plan = ResamplePlan::new(map, &b, 4, 2, 0).unwrap();
        let cells = crate::wiener::CellPartition::uniform(b.noise.grid, 2);
        let k = ChaosKernel::First { cells, values: vec![Vector::x(); 2] };
        assert!(conditional_chaos_order(3, &k, &plan).is_err());
        let j = conditional_chaos_order(1, &k, &plan).unwrap();
        let want: f64 = plan.filtered.iter().map(|u| u[0]).sum();
        assert!((j - want).abs() < 1e-12);
    }
}
