//! The Itô map `ω ↦ x.(ω)` of `dx = X(x) ∘ dB`, its derivative `TI(h)`, and
//! Levi-Civita and damped parallel translation along the solution.
//!
//! Integrators are interchangeable [`Scheme`] strategies selected by name.

use thiserror::Error;

use crate::geometry::{unit, EmbeddedManifold, GeometryError, Matrix, Vector};
use crate::wiener::{CameronMartin, Linearization, NoisePath};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ItoError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("transport frame lost rank at step {step}")]
    RankLoss { step: usize },
    #[error("starting point is off the manifold (residual {0:e})")]
    BadStart(f64),
    #[error("bundle is missing {0}")]
    Incomplete(&'static str),
    #[error("unknown scheme `{0}`")]
    UnknownScheme(String),
}

/// One-step integrator for `dx = X(x) ∘ dB` on an embedded manifold.
pub trait Scheme<const D: usize>: Send + Sync {
    fn name(&self) -> &'static str;

    fn step(
        &self,
        m: &dyn EmbeddedManifold<D>,
        x: &Vector<D>,
        db: &Vector<D>,
        dt: f64,
    ) -> Result<Vector<D>, GeometryError>;

    /// Differential of `step` at `(x, db)` applied to `(v, ddb)`, `v ∈ T_xM`.
    fn step_tangent(
        &self,
        m: &dyn EmbeddedManifold<D>,
        x: &Vector<D>,
        db: &Vector<D>,
        dt: f64,
        v: &Vector<D>,
        ddb: &Vector<D>,
    ) -> Vector<D>;
}

/// Stratonovich Heun predictor–corrector with retraction, driven by the
/// increment filtered through `K⊥(x)`. Since `X(x)K⊥(x) = X(x)` the
/// predictor is the textbook one; the filter makes the step exactly blind to
/// the redundant noise `K(x)ΔB`.
#[derive(Debug, Clone, Copy, Default)]
pub struct FilteredHeun;

/// The same predictor–corrector fed the raw increment. Kernel noise enters the
/// corrector at `O(dt)` per step, so resampled noise does not reproduce the
/// path; kept to exercise the resampler gate.
#[derive(Debug, Clone, Copy, Default)]
pub struct RawHeun;

/// Itô–Euler step `retract(x, X(x)ΔB + b(x)dt)` with the Itô drift
/// `b = ½ Σ_j dX[X e_j] e_j`. Cross-check for the Stratonovich integrators.
#[derive(Debug, Clone, Copy, Default)]
pub struct ItoEuler;

fn heun_step<const D: usize>(
    m: &dyn EmbeddedManifold<D>,
    x: &Vector<D>,
    w: &Vector<D>,
) -> Result<Vector<D>, GeometryError> {
    let x0 = m.diffusion(x);
    let predictor = m.retract(x, &(x0 * w))?;
    let avg = (x0 + m.diffusion(&predictor)) * 0.5;
    m.retract(x, &(avg * w))
}

fn heun_tangent<const D: usize>(
    m: &dyn EmbeddedManifold<D>,
    x: &Vector<D>,
    w: &Vector<D>,
    v: &Vector<D>,
    dw: &Vector<D>,
) -> Vector<D> {
    let x0 = m.diffusion(x);
    let dx0 = m.diffusion_dir(x, v);
    let p = x0 * w;
    let dp = dx0 * w + x0 * dw;
    // predictor retraction cannot fail here: the step already succeeded
    let xs = match m.retract(x, &p) {
        Ok(xs) => xs,
        Err(_) => return Vector::zeros(),
    };
    let dxs = m.retract_dir(x, &p, v, &dp);
    let xs_m = m.diffusion(&xs);
    let dxs_m = m.diffusion_dir(&xs, &dxs);
    let q = (x0 + xs_m) * w * 0.5;
    let dq = (dx0 + dxs_m) * w * 0.5 + (x0 + xs_m) * dw * 0.5;
    m.retract_dir(x, &q, v, &dq)
}

impl<const D: usize> Scheme<D> for FilteredHeun {
    fn name(&self) -> &'static str {
        "heun"
    }

    fn step(
        &self,
        m: &dyn EmbeddedManifold<D>,
        x: &Vector<D>,
        db: &Vector<D>,
        _dt: f64,
    ) -> Result<Vector<D>, GeometryError> {
        heun_step(m, x, &(m.kernel_complement(x) * db))
    }

    fn step_tangent(
        &self,
        m: &dyn EmbeddedManifold<D>,
        x: &Vector<D>,
        db: &Vector<D>,
        _dt: f64,
        v: &Vector<D>,
        ddb: &Vector<D>,
    ) -> Vector<D> {
        let k = m.kernel_complement(x);
        let w = k * db;
        let dw = m.kernel_complement_dir(x, v) * db + k * ddb;
        heun_tangent(m, x, &w, v, &dw)
    }
}

impl<const D: usize> Scheme<D> for RawHeun {
    fn name(&self) -> &'static str {
        "heun_raw"
    }

    fn step(
        &self,
        m: &dyn EmbeddedManifold<D>,
        x: &Vector<D>,
        db: &Vector<D>,
        _dt: f64,
    ) -> Result<Vector<D>, GeometryError> {
        heun_step(m, x, db)
    }

    fn step_tangent(
        &self,
        m: &dyn EmbeddedManifold<D>,
        x: &Vector<D>,
        db: &Vector<D>,
        _dt: f64,
        v: &Vector<D>,
        ddb: &Vector<D>,
    ) -> Vector<D> {
        heun_tangent(m, x, db, v, ddb)
    }
}

/// `½ Σ_j dX(x)[X(x) e_j] e_j`.
pub fn ito_drift<const D: usize>(m: &dyn EmbeddedManifold<D>, x: &Vector<D>) -> Vector<D> {
    let xm = m.diffusion(x);
    let mut drift = Vector::<D>::zeros();
    for j in 0..D {
        let e = unit::<D>(j);
        drift += m.diffusion_dir(x, &(xm * e)) * e;
    }
    drift * 0.5
}

impl<const D: usize> Scheme<D> for ItoEuler {
    fn name(&self) -> &'static str {
        "ito_euler"
    }

    fn step(
        &self,
        m: &dyn EmbeddedManifold<D>,
        x: &Vector<D>,
        db: &Vector<D>,
        dt: f64,
    ) -> Result<Vector<D>, GeometryError> {
        m.retract(x, &(m.diffusion(x) * db + ito_drift(m, x) * dt))
    }

    fn step_tangent(
        &self,
        m: &dyn EmbeddedManifold<D>,
        x: &Vector<D>,
        db: &Vector<D>,
        dt: f64,
        v: &Vector<D>,
        ddb: &Vector<D>,
    ) -> Vector<D> {
        const H: f64 = 1e-6;
        let u = m.diffusion(x) * db + ito_drift(m, x) * dt;
        let drift_dir = (ito_drift(m, &(x + v * H)) - ito_drift(m, &(x - v * H))) / (2.0 * H);
        let du = m.diffusion_dir(x, v) * db + m.diffusion(x) * ddb + drift_dir * dt;
        m.retract_dir(x, &u, v, &du)
    }
}

/// Registered integrator names; the first is the default.
pub const SCHEMES: &[&str] = &["heun", "heun_raw", "ito_euler"];

pub fn scheme_by_name<const D: usize>(name: &str) -> Result<Box<dyn Scheme<D>>, ItoError> {
    match name {
        "heun" => Ok(Box::new(FilteredHeun)),
        "heun_raw" => Ok(Box::new(RawHeun)),
        "ito_euler" => Ok(Box::new(ItoEuler)),
        other => Err(ItoError::UnknownScheme(other.to_string())),
    }
}

/// One realized evaluation of the Itô map.
///
/// Frames are ambient `D × D` matrices whose first `n` columns are the images
/// of the orthonormal basis `basis0` of `T_{x₀}M`. `ricci_frame[i]` is `Ric♯`
/// at `x_i` in the coordinates of `frames[i]`.
#[derive(Debug, Clone)]
pub struct SolutionBundle<const D: usize> {
    pub noise: NoisePath<D>,
    pub path: Vec<Vector<D>>,
    pub basis0: Matrix<D>,
    pub intrinsic_dim: usize,
    pub frames: Vec<Matrix<D>>,
    pub damped_frames: Vec<Matrix<D>>,
    pub ricci_frame: Vec<Matrix<D>>,
}

impl<const D: usize> SolutionBundle<D> {
    pub fn dt(&self) -> f64 {
        self.noise.grid.dt()
    }

    pub fn steps(&self) -> usize {
        self.noise.grid.steps()
    }

    pub fn has_frames(&self) -> bool {
        self.frames.len() == self.path.len()
    }

    pub fn has_damped(&self) -> bool {
        self.damped_frames.len() == self.path.len()
    }

    /// `∥_i u` for `u ∈ T_{x₀}M`.
    pub fn transport(&self, i: usize, u: &Vector<D>) -> Vector<D> {
        self.frames[i] * (self.basis0.transpose() * u)
    }

    /// `W_i u` for `u ∈ T_{x₀}M`.
    pub fn damped(&self, i: usize, u: &Vector<D>) -> Vector<D> {
        self.damped_frames[i] * (self.basis0.transpose() * u)
    }

    /// `max_i ‖∥_iᵀ∥_i − I‖` over the tangent block.
    pub fn isometry_defect(&self) -> f64 {
        let n = self.intrinsic_dim;
        self.frames
            .iter()
            .map(|f| {
                let g = f.transpose() * f;
                let mut worst: f64 = 0.0;
                for a in 0..n {
                    for b in 0..n {
                        let want = if a == b { 1.0 } else { 0.0 };
                        worst = worst.max((g[(a, b)] - want).abs());
                    }
                }
                worst
            })
            .fold(0.0, f64::max)
    }
}

/// An Itô map: manifold, integrator and starting point.
#[derive(Clone, Copy)]
pub struct ItoMap<'a, const D: usize> {
    pub manifold: &'a dyn EmbeddedManifold<D>,
    pub scheme: &'a dyn Scheme<D>,
    pub x0: Vector<D>,
}

impl<'a, const D: usize> ItoMap<'a, D> {
    pub fn new(
        manifold: &'a dyn EmbeddedManifold<D>,
        scheme: &'a dyn Scheme<D>,
        x0: Vector<D>,
    ) -> Result<Self, ItoError> {
        let r = manifold.constraint_residual(&x0);
        if r > crate::geometry::CONSTRAINT_TOL {
            return Err(ItoError::BadStart(r));
        }
        Ok(ItoMap { manifold, scheme, x0 })
    }

    pub fn solve_path(&self, noise: &NoisePath<D>) -> Result<Vec<Vector<D>>, ItoError> {
        let dt = noise.grid.dt();
        let mut path = Vec::with_capacity(noise.increments.len() + 1);
        let mut x = self.x0;
        path.push(x);
        for db in &noise.increments {
            x = self.scheme.step(self.manifold, &x, db, dt)?;
            path.push(x);
        }
        Ok(path)
    }

    /// Solve and wrap in a bundle without frames.
    pub fn solve(&self, noise: NoisePath<D>) -> Result<SolutionBundle<D>, ItoError> {
        let path = self.solve_path(&noise)?;
        Ok(SolutionBundle {
            noise,
            path,
            basis0: self.manifold.tangent_basis(&self.x0),
            intrinsic_dim: self.manifold.intrinsic_dim(),
            frames: Vec::new(),
            damped_frames: Vec::new(),
            ricci_frame: Vec::new(),
        })
    }

    /// Solve and compute both transport frames.
    pub fn solve_full(&self, noise: NoisePath<D>) -> Result<SolutionBundle<D>, ItoError> {
        let mut b = self.solve(noise)?;
        parallel_transport(self.manifold, &mut b)?;
        damped_transport(self.manifold, &mut b)?;
        Ok(b)
    }

    /// Bundle for a path supplied directly (deterministic test curves).
    pub fn bundle_for_path(&self, noise: NoisePath<D>, path: Vec<Vector<D>>) -> SolutionBundle<D> {
        SolutionBundle {
            noise,
            basis0: self.manifold.tangent_basis(&path[0]),
            path,
            intrinsic_dim: self.manifold.intrinsic_dim(),
            frames: Vec::new(),
            damped_frames: Vec::new(),
            ricci_frame: Vec::new(),
        }
    }

    /// Solution of the discrete variational equation `v_0 = 0`,
    /// `v_{i+1} = d step(x_i, ΔB_i)[v_i, ḣ_i dt]`.
    pub fn tangent(&self, noise: &NoisePath<D>, path: &[Vector<D>], h: &CameronMartin<D>) -> Vec<Vector<D>> {
        let dt = noise.grid.dt();
        let mut out = Vec::with_capacity(path.len());
        let mut v = Vector::<D>::zeros();
        out.push(v);
        for i in 0..noise.increments.len() {
            let next = self.scheme.step_tangent(
                self.manifold,
                &path[i],
                &noise.increments[i],
                dt,
                &v,
                &(h.deriv[i] * dt),
            );
            v = self.manifold.tangent_projection(&path[i + 1]) * next;
            out.push(v);
        }
        out
    }

    /// H-gradient of `ω ↦ Σ_j ⟨c_j, x_{t_j}(ω)⟩` by reverse accumulation:
    /// returns `g` with `dF(h) = Σ_i ⟨g_i, ḣ_i⟩ dt`.
    pub fn gradient(
        &self,
        noise: &NoisePath<D>,
        path: &[Vector<D>],
        cotangents: &[(usize, Vector<D>)],
    ) -> Vec<Vector<D>> {
        let n = noise.increments.len();
        let dt = noise.grid.dt();
        let mut seed = vec![Vector::<D>::zeros(); n + 1];
        for (i, c) in cotangents {
            seed[*i] += self.manifold.tangent_projection(&path[*i]) * c;
        }
        let mut grad = vec![Vector::<D>::zeros(); n];
        let mut lambda = seed[n];
        for i in (0..n).rev() {
            let x = &path[i];
            let db = &noise.increments[i];
            let p = self.manifold.tangent_projection(x);
            let zero = Vector::<D>::zeros();
            let mut jx = Matrix::<D>::zeros();
            let mut jb = Matrix::<D>::zeros();
            for k in 0..D {
                let e = unit::<D>(k);
                let pe = p * e;
                jx.set_column(k, &self.scheme.step_tangent(self.manifold, x, db, dt, &pe, &zero));
                jb.set_column(k, &self.scheme.step_tangent(self.manifold, x, db, dt, &zero, &e));
            }
            grad[i] = jb.transpose() * lambda;
            lambda = jx.transpose() * lambda + seed[i];
        }
        grad
    }
}

impl<const D: usize> Linearization<D> for ItoMap<'_, D> {
    fn tangent_path(&self, noise: &NoisePath<D>, path: &[Vector<D>], h: &CameronMartin<D>) -> Vec<Vector<D>> {
        self.tangent(noise, path, h)
    }
}

/// Solve `dx = X(x) ∘ dB` from `x0` along `noise` with the default integrator.
pub fn solve_sde<const D: usize>(
    m: &dyn EmbeddedManifold<D>,
    noise: NoisePath<D>,
    x0: Vector<D>,
) -> Result<SolutionBundle<D>, ItoError> {
    ItoMap::new(m, &FilteredHeun, x0)?.solve(noise)
}

/// Polar factor of the tangent block of `g` by Newton–Schulz iteration.
fn orthonormalize<const D: usize>(mut g: Matrix<D>, n: usize) -> Option<Matrix<D>> {
    let defect = |g: &Matrix<D>| {
        let gram = g.transpose() * g;
        let mut worst: f64 = 0.0;
        for a in 0..n {
            for b in 0..n {
                let want = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((gram[(a, b)] - want).abs());
            }
        }
        worst
    };
    if defect(&g) > 0.5 {
        return None;
    }
    let mut ident = Matrix::<D>::zeros();
    for a in 0..n {
        ident[(a, a)] = 1.0;
    }
    for _ in 0..20 {
        if defect(&g) < 1e-15 {
            return Some(g);
        }
        let gram = g.transpose() * g;
        g = g * (ident * 3.0 - gram) * 0.5;
    }
    (defect(&g) < 1e-12).then_some(g)
}

/// Levi-Civita transport frames by projection onto the next tangent space
/// followed by symmetric re-orthonormalization.
pub fn parallel_transport<const D: usize>(
    m: &dyn EmbeddedManifold<D>,
    bundle: &mut SolutionBundle<D>,
) -> Result<(), ItoError> {
    let n = bundle.intrinsic_dim;
    let mut frames = Vec::with_capacity(bundle.path.len());
    let mut f = bundle.basis0;
    frames.push(f);
    for (i, x) in bundle.path.iter().enumerate().skip(1) {
        let g = m.tangent_projection(x) * f;
        f = orthonormalize(g, n).ok_or(ItoError::RankLoss { step: i })?;
        frames.push(f);
    }
    bundle.frames = frames;
    Ok(())
}

/// Damped translation `W_{i+1} = (I − ½dt Ric♯) ∥-step(W_i)`, `W_0 = id`.
pub fn damped_transport<const D: usize>(
    m: &dyn EmbeddedManifold<D>,
    bundle: &mut SolutionBundle<D>,
) -> Result<(), ItoError> {
    if !bundle.has_frames() {
        return Err(ItoError::Incomplete("transport frames"));
    }
    let n = bundle.intrinsic_dim;
    let dt = bundle.dt();
    let mut ident = Matrix::<D>::zeros();
    for a in 0..n {
        ident[(a, a)] = 1.0;
    }
    let ricci_frame: Vec<Matrix<D>> = bundle
        .path
        .iter()
        .zip(&bundle.frames)
        .map(|(x, f)| f.transpose() * m.ricci(x) * f)
        .collect();
    let mut coeff = ident;
    let mut damped = Vec::with_capacity(bundle.path.len());
    damped.push(bundle.frames[0] * coeff);
    for i in 1..bundle.path.len() {
        coeff = (ident - ricci_frame[i] * (0.5 * dt)) * coeff;
        damped.push(bundle.frames[i] * coeff);
    }
    bundle.damped_frames = damped;
    bundle.ricci_frame = ricci_frame;
    Ok(())
}

/// `TI_t(h)` along the bundle's noise and path.
pub fn derivative_ti<const D: usize>(
    map: &ItoMap<'_, D>,
    bundle: &SolutionBundle<D>,
    h: &CameronMartin<D>,
) -> Vec<Vector<D>> {
    map.tangent(&bundle.noise, &bundle.path, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Sphere;
    use crate::wiener::{sample_noise, TimeGrid};
    use approx::assert_abs_diff_eq;

    fn pole() -> Vector<3> {
        Vector::<3>::new(0.0, 0.0, 1.0)
    }

    #[test]
    fn zero_noise_gives_constant_path() {
        let g = TimeGrid::new(1.0, 50).unwrap();
        let b = solve_sde(&Sphere::<3>, NoisePath::zero(g), pole()).unwrap();
        assert!(b.path.iter().all(|x| *x == pole()));
    }

    #[test]
    fn paths_stay_on_sphere() {
        let g = TimeGrid::new(1.0, 1000).unwrap();
        for name in SCHEMES {
            let scheme = scheme_by_name::<3>(name).unwrap();
            let map = ItoMap::new(&Sphere::<3>, scheme.as_ref(), pole()).unwrap();
            let path = map.solve_path(&sample_noise(3, g)).unwrap();
            for x in &path {
                assert!((x.norm() - 1.0).abs() < 1e-12, "{name}");
            }
        }
        assert!(scheme_by_name::<3>("rk4").is_err());
    }

    #[test]
    fn constant_path_has_identity_frames() {
        let g = TimeGrid::new(1.0, 20).unwrap();
        let s = Sphere::<3>;
        let mut b = solve_sde(&s, NoisePath::zero(g), pole()).unwrap();
        parallel_transport(&s, &mut b).unwrap();
        for f in &b.frames {
            assert_abs_diff_eq!(*f, b.basis0, epsilon = 1e-15);
        }
    }

    #[test]
    fn great_circle_transport_matches_rotation() {
        // σ(s) = (sin s, 0, cos s): e_y is parallel, and the unit velocity
        // (cos s, 0, −sin s) is parallel along the geodesic.
        let steps = 1000;
        let g = TimeGrid::new(1.0, steps).unwrap();
        let s = Sphere::<3>;
        let map = ItoMap::new(&s, &FilteredHeun, pole()).unwrap();
        let path: Vec<_> = (0..=steps).map(|i| {
            let t = g.time(i);
            Vector::<3>::new(t.sin(), 0.0, t.cos())
        }).collect();
        let mut b = map.bundle_for_path(NoisePath::zero(g), path);
        parallel_transport(&s, &mut b).unwrap();
        let ex = Vector::<3>::x();
        let ey = Vector::<3>::y();
        let mut worst: f64 = 0.0;
        for i in 0..=steps {
            let t = g.time(i);
            let want = Vector::<3>::new(t.cos(), 0.0, -t.sin());
            worst = worst.max((b.transport(i, &ex) - want).norm());
            worst = worst.max((b.transport(i, &ey) - ey).norm());
        }
        assert!(worst < 10.0 * g.dt(), "transport error {worst}");
    }

    #[test]
    fn rank_loss_is_reported() {
        let g = TimeGrid::new(1.0, 2).unwrap();
        let s = Sphere::<3>;
        let map = ItoMap::new(&s, &FilteredHeun, pole()).unwrap();
        let path = vec![pole(), Vector::<3>::x(), -pole()];
        let mut b = map.bundle_for_path(NoisePath::zero(g), path);
        assert_eq!(parallel_transport(&s, &mut b), Err(ItoError::RankLoss { step: 1 }));
    }

    #[test]
    fn damped_requires_frames() {
        let g = TimeGrid::new(1.0, 2).unwrap();
        let s = Sphere::<3>;
        let mut b = solve_sde(&s, NoisePath::zero(g), pole()).unwrap();
        assert_eq!(damped_transport(&s, &mut b), Err(ItoError::Incomplete("transport frames")));
    }

    #[test]
    fn zero_noise_derivative_is_linear_in_time() {
        let g = TimeGrid::new(1.0, 100).unwrap();
        let s = Sphere::<3>;
        let map = ItoMap::new(&s, &FilteredHeun, pole()).unwrap();
        let b = map.solve(NoisePath::zero(g)).unwrap();
        let v = derivative_ti(&map, &b, &CameronMartin::constant(g, Vector::x()));
        for (i, vi) in v.iter().enumerate() {
            assert_abs_diff_eq!(*vi, Vector::x() * g.time(i), epsilon = 1e-12);
        }
        let zero = derivative_ti(&map, &b, &CameronMartin::zero(g));
        assert!(zero.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn gradient_is_adjoint_of_tangent() {
        let g = TimeGrid::new(1.0, 200).unwrap();
        let s = Sphere::<3>;
        for name in SCHEMES {
            let scheme = scheme_by_name::<3>(name).unwrap();
            let map = ItoMap::new(&s, scheme.as_ref(), pole()).unwrap();
            let b = map.solve(sample_noise(9, g)).unwrap();
            let h = CameronMartin::from_fn(g, |t| Vector::<3>::new(t.cos(), 1.0 - t, 0.3));
            let c1 = Vector::<3>::new(0.2, -1.0, 0.5);
            let c2 = Vector::<3>::new(1.0, 0.4, 0.0);
            let v = derivative_ti(&map, &b, &h);
            let forward = c1.dot(&v[100]) + c2.dot(&v[200]);
            let grad = map.gradient(&b.noise, &b.path, &[(100, c1), (200, c2)]);
            let reverse: f64 = grad.iter().zip(&h.deriv).map(|(a, b)| a.dot(b)).sum::<f64>() * g.dt();
            assert!((forward - reverse).abs() < 1e-10 * (1.0 + forward.abs()), "{name}: {forward} vs {reverse}");
        }
    }
}
