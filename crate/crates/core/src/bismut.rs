//! Bismut tangent vectors along a realized path: the damped metric, the
//! projection `T̄I_σ` from Cameron–Martin space, its right inverse `Y_σ`, and
//! H-vector fields built from explicit rules.

use std::hash::{Hash, Hasher};
use std::sync::Arc;

use thiserror::Error;

use crate::geometry::{EmbeddedManifold, Matrix, Vector};
use crate::ito_map::SolutionBundle;
use crate::stats::pairwise_sum;
use crate::wiener::{CameronMartin, CylindricalFunction, Direction, Functional, Omega, TimeGrid, WienerError};

pub use crate::conditional::conditional_tibar;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BismutError {
    #[error("Bismut vectors live over different paths")]
    BundleMismatch,
    #[error("bundle is missing damped transport frames")]
    MissingFrames,
    #[error("expected {expected} entries, got {got}")]
    Length { expected: usize, got: usize },
    #[error("damped step is singular at step {0}")]
    Singular(usize),
    #[error("field `{0}` has no pullback in the flat divergence span")]
    UnsupportedPullback(String),
    #[error(transparent)]
    Wiener(#[from] WienerError),
}

/// Identifies a path bit-for-bit, so vectors over different paths never mix.
pub fn path_fingerprint<const D: usize>(path: &[Vector<D>]) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    path.len().hash(&mut h);
    for x in path {
        for c in x.iter() {
            c.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

/// Tangent vector field `v` along a path with `v_0 = 0`, stored with its
/// damped derivative `b = 𝔻v/ds` (one value per step).
#[derive(Debug, Clone, PartialEq)]
pub struct BismutVector<const D: usize> {
    pub fingerprint: u64,
    pub dt: f64,
    pub b: Vec<Vector<D>>,
    pub values: Vec<Vector<D>>,
    /// Per-step standard error of `values` for Monte Carlo estimates.
    pub std_error: Option<Vec<f64>>,
}

fn damping<const D: usize>(bundle: &SolutionBundle<D>, i: usize) -> Matrix<D> {
    Matrix::<D>::identity() - bundle.ricci_frame[i] * (0.5 * bundle.dt())
}

fn require_damped<const D: usize>(bundle: &SolutionBundle<D>) -> Result<(), BismutError> {
    if bundle.has_damped() {
        Ok(())
    } else {
        Err(BismutError::MissingFrames)
    }
}

impl<const D: usize> BismutVector<D> {
    pub fn zero(bundle: &SolutionBundle<D>) -> Self {
        BismutVector {
            fingerprint: path_fingerprint(&bundle.path),
            dt: bundle.dt(),
            b: vec![Vector::zeros(); bundle.steps()],
            values: vec![Vector::zeros(); bundle.path.len()],
            std_error: None,
        }
    }

    /// Integrate `𝔻v/ds = b` from `v_0 = 0`: in transport-frame coordinates
    /// `c_{i+1} = (I − ½dt Ric♯_{i+1})(c_i + dt ∥_iᵀ b_i)`.
    pub fn from_damped_derivative(bundle: &SolutionBundle<D>, b: Vec<Vector<D>>) -> Result<Self, BismutError> {
        require_damped(bundle)?;
        if b.len() != bundle.steps() {
            return Err(BismutError::Length { expected: bundle.steps(), got: b.len() });
        }
        let dt = bundle.dt();
        let mut values = Vec::with_capacity(b.len() + 1);
        let mut c = Vector::<D>::zeros();
        values.push(c);
        for (i, bi) in b.iter().enumerate() {
            c = damping(bundle, i + 1) * (c + bundle.frames[i].transpose() * bi * dt);
            values.push(bundle.frames[i + 1] * c);
        }
        Ok(BismutVector { fingerprint: path_fingerprint(&bundle.path), dt, b, values, std_error: None })
    }

    /// Exact inverse of [`Self::from_damped_derivative`].
    pub fn from_values(bundle: &SolutionBundle<D>, values: Vec<Vector<D>>) -> Result<Self, BismutError> {
        require_damped(bundle)?;
        if values.len() != bundle.path.len() {
            return Err(BismutError::Length { expected: bundle.path.len(), got: values.len() });
        }
        let dt = bundle.dt();
        let coords: Vec<Vector<D>> = values.iter().zip(&bundle.frames).map(|(v, f)| f.transpose() * v).collect();
        let mut b = Vec::with_capacity(bundle.steps());
        for i in 0..bundle.steps() {
            let inv = damping(bundle, i + 1).try_inverse().ok_or(BismutError::Singular(i))?;
            let local = (inv * coords[i + 1] - coords[i]) / dt;
            b.push(bundle.frames[i] * local);
        }
        Ok(BismutVector { fingerprint: path_fingerprint(&bundle.path), dt, b, values, std_error: None })
    }

    pub fn is_zero(&self) -> bool {
        self.b.iter().all(|x| x.iter().all(|c| *c == 0.0))
    }

    pub fn linear_comb(&self, a: f64, other: &Self, c: f64) -> Result<Self, BismutError> {
        if self.fingerprint != other.fingerprint {
            return Err(BismutError::BundleMismatch);
        }
        Ok(BismutVector {
            fingerprint: self.fingerprint,
            dt: self.dt,
            b: self.b.iter().zip(&other.b).map(|(x, y)| x * a + y * c).collect(),
            values: self.values.iter().zip(&other.values).map(|(x, y)| x * a + y * c).collect(),
            std_error: None,
        })
    }

    /// `max_i |v_i − w_i|`.
    pub fn sup_distance(&self, other: &Self) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }
}

/// `⟨v¹, v²⟩_σ = Σ ⟨b¹_i, b²_i⟩ dt`.
pub fn bismut_inner<const D: usize>(v1: &BismutVector<D>, v2: &BismutVector<D>) -> Result<f64, BismutError> {
    if v1.fingerprint != v2.fingerprint || v1.b.len() != v2.b.len() {
        return Err(BismutError::BundleMismatch);
    }
    let terms: Vec<f64> = v1.b.iter().zip(&v2.b).map(|(a, b)| a.dot(b)).collect();
    Ok(pairwise_sum(&terms) * v1.dt)
}

/// `T̄I_σ(h)`: the Bismut vector with `𝔻v/ds = X(σ)ḣ`.
pub fn project_tibar<const D: usize>(
    m: &dyn EmbeddedManifold<D>,
    bundle: &SolutionBundle<D>,
    h: &CameronMartin<D>,
) -> Result<BismutVector<D>, BismutError> {
    if h.grid != bundle.noise.grid {
        return Err(WienerError::GridMismatch.into());
    }
    let b = bundle.path.iter().zip(&h.deriv).map(|(x, hd)| m.diffusion(x) * hd).collect();
    BismutVector::from_damped_derivative(bundle, b)
}

/// `Y_σ(v)` with `ḣ_i = Y_{x_i} b_i`.
pub fn y_map<const D: usize>(
    m: &dyn EmbeddedManifold<D>,
    bundle: &SolutionBundle<D>,
    v: &BismutVector<D>,
) -> Result<CameronMartin<D>, BismutError> {
    if v.fingerprint != path_fingerprint(&bundle.path) {
        return Err(BismutError::BundleMismatch);
    }
    Ok(CameronMartin {
        grid: bundle.noise.grid,
        deriv: bundle.path.iter().zip(&v.b).map(|(x, b)| m.right_inverse(x) * b).collect(),
    })
}

/// Cylindrical function on path space, `f(σ) = φ(σ_{t_1}, …, σ_{t_k})`.
///
/// As a functional on Wiener space it is `I*f`, differentiated through the
/// Itô map: `d(I*f)(h) = Σ_j ∂_jφ · TI_{t_j}(h)`.
pub struct PathFunction<const D: usize>(pub CylindricalFunction<D>);

impl<const D: usize> PathFunction<D> {
    pub fn new(
        times: Vec<usize>,
        body: impl Fn(&[Vector<D>]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&[Vector<D>]) -> Vec<Vector<D>> + Send + Sync + 'static,
    ) -> Self {
        PathFunction(CylindricalFunction::new(times, body, grad))
    }

    /// `φ(σ_T)` on a grid.
    pub fn terminal(
        grid: TimeGrid,
        phi: impl Fn(&Vector<D>) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&Vector<D>) -> Vector<D> + Send + Sync + 'static,
    ) -> Self {
        Self::new(vec![grid.steps()], move |p| phi(&p[0]), move |p| vec![grad(&p[0])])
    }

    pub fn times(&self) -> &[usize] {
        &self.0.times
    }

    pub fn points(&self, path: &[Vector<D>]) -> Vec<Vector<D>> {
        self.0.times.iter().map(|&i| path[i]).collect()
    }

    pub fn eval(&self, path: &[Vector<D>]) -> f64 {
        self.0.body(&self.points(path))
    }

    /// `df_σ(v) = Σ_j ∂_jφ · v_{t_j}` for a tangent path `v`.
    pub fn derivative_along(&self, path: &[Vector<D>], v: &[Vector<D>]) -> f64 {
        let grad = self.0.body_grad(&self.points(path));
        self.0.times.iter().zip(&grad).map(|(&i, g)| g.dot(&v[i])).sum()
    }
}

impl<const D: usize> Functional<D> for PathFunction<D> {
    fn value(&self, omega: &Omega<'_, D>) -> Result<f64, WienerError> {
        if omega.path.is_empty() {
            return Err(WienerError::MissingPath);
        }
        Ok(self.eval(omega.path))
    }

    fn h_derivative(&self, omega: &Omega<'_, D>, h: &CameronMartin<D>) -> Result<f64, WienerError> {
        let lin = omega.linearization.ok_or(WienerError::MissingPath)?;
        if omega.path.is_empty() {
            return Err(WienerError::MissingPath);
        }
        let v = lin.tangent_path(omega.noise, omega.path, h);
        Ok(self.derivative_along(omega.path, &v))
    }
}

type StepRule<const D: usize> = Arc<dyn Fn(usize, &[Vector<D>]) -> Vector<D> + Send + Sync>;

/// Cameron–Martin direction read off the path: fixed, or `ḣ_i = rule(i, σ_{0..=i})`.
#[derive(Clone)]
pub enum PathDirection<const D: usize> {
    Fixed(CameronMartin<D>),
    Adapted(StepRule<D>),
}

impl<const D: usize> PathDirection<D> {
    pub fn adapted(rule: impl Fn(usize, &[Vector<D>]) -> Vector<D> + Send + Sync + 'static) -> Self {
        PathDirection::Adapted(Arc::new(rule))
    }

    pub fn at(&self, grid: TimeGrid, path: &[Vector<D>]) -> CameronMartin<D> {
        match self {
            PathDirection::Fixed(h) => h.clone(),
            PathDirection::Adapted(rule) => CameronMartin {
                grid,
                deriv: (0..grid.steps()).map(|i| rule(i, &path[..=i])).collect(),
            },
        }
    }
}

/// `ω ↦ h(I(ω))` as a flat direction; adapted since `ḣ_i` sees `x_0..x_i`.
pub struct PathMeasurable<const D: usize> {
    pub direction: PathDirection<D>,
}

impl<const D: usize> Direction<D> for PathMeasurable<D> {
    fn realize(&self, omega: &Omega<'_, D>) -> CameronMartin<D> {
        self.direction.at(omega.grid(), omega.path)
    }
}

/// Flat direction `ω ↦ Y_{x(ω)} X_{x(ω)} ḣ(x(ω))`, the pullback `I*(Y T̄I(h))`.
pub struct FilteredPullback<'a, const D: usize> {
    pub manifold: &'a dyn EmbeddedManifold<D>,
    pub direction: &'a PathDirection<D>,
}

impl<const D: usize> Direction<D> for FilteredPullback<'_, D> {
    fn realize(&self, omega: &Omega<'_, D>) -> CameronMartin<D> {
        let mut h = self.direction.at(omega.grid(), omega.path);
        for (d, x) in h.deriv.iter_mut().zip(omega.path) {
            *d = self.manifold.right_inverse(x) * (self.manifold.diffusion(x) * *d);
        }
        h
    }
}

type ExplicitRule<const D: usize> = Arc<dyn Fn(&SolutionBundle<D>) -> Result<BismutVector<D>, BismutError> + Send + Sync>;

/// H-vector field on path space, evaluated lazily per path.
///
/// `Projected` fields `σ ↦ g(σ) T̄I_σ(h(σ))` are regular by construction and
/// pull back to the flat span (cylindrical coefficient times an adapted
/// direction). `Explicit` rules can be evaluated but not pulled back.
#[derive(Clone)]
pub enum HVectorField<const D: usize> {
    Zero,
    Projected { coeff: Option<Arc<PathFunction<D>>>, direction: PathDirection<D> },
    Explicit { name: String, rule: ExplicitRule<D> },
}

/// `I*(Y V)` in the flat divergence span.
pub struct Pullback<'a, const D: usize> {
    pub coeff: Option<&'a PathFunction<D>>,
    pub direction: FilteredPullback<'a, D>,
}

impl<const D: usize> HVectorField<D> {
    pub fn projected(direction: PathDirection<D>) -> Self {
        HVectorField::Projected { coeff: None, direction }
    }

    pub fn weighted(coeff: PathFunction<D>, direction: PathDirection<D>) -> Self {
        HVectorField::Projected { coeff: Some(Arc::new(coeff)), direction }
    }

    pub fn explicit(
        name: &str,
        rule: impl Fn(&SolutionBundle<D>) -> Result<BismutVector<D>, BismutError> + Send + Sync + 'static,
    ) -> Self {
        HVectorField::Explicit { name: name.to_string(), rule: Arc::new(rule) }
    }

    pub fn evaluate(
        &self,
        m: &dyn EmbeddedManifold<D>,
        bundle: &SolutionBundle<D>,
    ) -> Result<BismutVector<D>, BismutError> {
        match self {
            HVectorField::Zero => {
                require_damped(bundle)?;
                Ok(BismutVector::zero(bundle))
            }
            HVectorField::Projected { coeff, direction } => {
                let h = direction.at(bundle.noise.grid, &bundle.path);
                let v = project_tibar(m, bundle, &h)?;
                match coeff {
                    None => Ok(v),
                    Some(g) => {
                        let s = g.eval(&bundle.path);
                        v.linear_comb(s, &v, 0.0)
                    }
                }
            }
            HVectorField::Explicit { rule, .. } => rule(bundle),
        }
    }

    /// `None` for the zero field.
    pub fn pullback<'a>(&'a self, m: &'a dyn EmbeddedManifold<D>) -> Result<Option<Pullback<'a, D>>, BismutError> {
        match self {
            HVectorField::Zero => Ok(None),
            HVectorField::Projected { coeff, direction } => Ok(Some(Pullback {
                coeff: coeff.as_deref(),
                direction: FilteredPullback { manifold: m, direction },
            })),
            HVectorField::Explicit { name, .. } => Err(BismutError::UnsupportedPullback(name.clone())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Sphere;
    use crate::ito_map::{FilteredHeun, ItoMap};
    use crate::wiener::{sample_noise, NoisePath, TimeGrid};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn pole() -> Vector<3> {
        Vector::<3>::new(0.0, 0.0, 1.0)
    }

    fn bundle(seed: Option<u64>, steps: usize) -> SolutionBundle<3> {
        let g = TimeGrid::new(1.0, steps).unwrap();
        let map = ItoMap::new(&Sphere::<3>, &FilteredHeun, pole()).unwrap();
        let noise = match seed {
            Some(s) => sample_noise(s, g),
            None => NoisePath::zero(g),
        };
        map.solve_full(noise).unwrap()
    }

    fn random_tangent(b: &SolutionBundle<3>, seed: u64) -> Vec<Vector<3>> {
        let mut rng = crate::wiener::derive_rng(seed, &[]);
        (0..b.steps())
            .map(|i| {
                let w = Vector::<3>::from_fn(|_, _| rng.random_range(-1.0..1.0));
                Sphere::<3>.tangent_projection(&b.path[i]) * w
            })
            .collect()
    }

    #[test]
    fn transported_unit_has_norm_horizon() {
        let b = bundle(Some(1), 200);
        let e = Vector::<3>::x();
        let steps: Vec<_> = (0..b.steps()).map(|i| b.transport(i, &e)).collect();
        let v = BismutVector::from_damped_derivative(&b, steps).unwrap();
        assert!((bismut_inner(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        let z = BismutVector::zero(&b);
        assert_eq!(bismut_inner(&z, &z).unwrap(), 0.0);
    }

    #[test]
    fn polarization_identity() {
        let b = bundle(Some(2), 100);
        let v = BismutVector::from_damped_derivative(&b, random_tangent(&b, 1)).unwrap();
        let w = BismutVector::from_damped_derivative(&b, random_tangent(&b, 2)).unwrap();
        let sum = v.linear_comb(1.0, &w, 1.0).unwrap();
        let diff = v.linear_comb(1.0, &w, -1.0).unwrap();
        let pol = 0.25 * (bismut_inner(&sum, &sum).unwrap() - bismut_inner(&diff, &diff).unwrap());
        assert!((pol - bismut_inner(&v, &w).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn mismatched_paths_rejected() {
        let v = BismutVector::zero(&bundle(Some(1), 10));
        let w = BismutVector::zero(&bundle(Some(2), 10));
        assert_eq!(bismut_inner(&v, &w), Err(BismutError::BundleMismatch));
    }

    #[test]
    fn projection_examples() {
        let s = Sphere::<3>;
        let b = bundle(None, 1000);
        let g = b.noise.grid;
        assert!(project_tibar(&s, &b, &CameronMartin::zero(g)).unwrap().is_zero());
        // normal direction at the pole lies in ker X
        assert!(project_tibar(&s, &b, &CameronMartin::constant(g, pole())).unwrap().is_zero());
        let v = project_tibar(&s, &b, &CameronMartin::constant(g, Vector::x())).unwrap();
        let want = 2.0 * (1.0 - (-0.5f64).exp());
        assert!((v.values[1000][0] - want).abs() < 2.0 * g.dt());
    }

    #[test]
    fn values_round_trip() {
        let b = bundle(Some(4), 300);
        let v = BismutVector::from_damped_derivative(&b, random_tangent(&b, 5)).unwrap();
        let back = BismutVector::from_values(&b, v.values.clone()).unwrap();
        for (x, y) in v.b.iter().zip(&back.b) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-9);
        }
    }

    #[test]
    fn right_inverse_and_isometry() {
        let s = Sphere::<3>;
        let b = bundle(Some(6), 1000);
        let v = BismutVector::from_damped_derivative(&b, random_tangent(&b, 7)).unwrap();
        let h = y_map(&s, &b, &v).unwrap();
        let back = project_tibar(&s, &b, &h).unwrap();
        assert!(back.sup_distance(&v) < 1e-12);
        let hn = crate::wiener::h_inner(&h, &h).unwrap();
        assert!((hn - bismut_inner(&v, &v).unwrap()).abs() < 1e-12);
        assert!(y_map(&s, &b, &BismutVector::zero(&b)).unwrap().deriv.iter().all(|d| d.norm() == 0.0));
    }

    #[test]
    fn explicit_fields_do_not_pull_back() {
        let f = HVectorField::<3>::explicit("custom", |b| Ok(BismutVector::zero(b)));
        assert!(matches!(f.pullback(&Sphere::<3>), Err(BismutError::UnsupportedPullback(_))));
        assert!(HVectorField::<3>::Zero.pullback(&Sphere::<3>).unwrap().is_none());
    }
}
