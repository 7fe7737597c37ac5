//! Embedded Riemannian manifolds and the coefficients of the gradient
//! Brownian system `dx = X(x) ∘ dB` they carry.
//!
//! A manifold lives in a fixed ambient space `R^D`. Every linear map is
//! represented by its ambient `D × D` matrix; maps defined only on a tangent
//! space (`Y_x`, `Ric♯`) are extended by zero on the normal space.
//!
//! The unit sphere is the concrete instance. New manifolds plug in by
//! implementing [`EmbeddedManifold`]; the checked free functions in this module
//! validate inputs against the constraint tolerance before delegating.

use nalgebra::{SMatrix, SVector};
use thiserror::Error;

/// Ambient vector.
pub type Vector<const D: usize> = SVector<f64, D>;
/// Ambient linear map.
pub type Matrix<const D: usize> = SMatrix<f64, D, D>;

/// Standard basis vector `e_k`.
pub fn unit<const D: usize>(k: usize) -> Vector<D> {
    let mut e = Vector::<D>::zeros();
    e[k] = 1.0;
    e
}

/// Tolerance for on-manifold and tangency checks.
pub const CONSTRAINT_TOL: f64 = 1e-10;

/// Central-difference step used by [`sde2_residual`].
pub const FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GeometryError {
    #[error("point violates the manifold constraint by {residual:e}")]
    ConstraintViolation { residual: f64 },
    #[error("vector is not tangent: normal component {normal:e}")]
    NotTangent { normal: f64 },
    #[error("degenerate retraction step (|x + v| = {norm:e})")]
    DegenerateStep { norm: f64 },
    #[error("direction has a component {component:e} in ker X(x)")]
    KernelDirection { component: f64 },
    #[error("unknown manifold `{0}`")]
    UnknownManifold(String),
}

/// An isometrically embedded compact manifold together with the coefficient
/// map `X(x): R^D -> T_xM` of its gradient Brownian system.
///
/// The `*_dir` methods are directional derivatives in a tangent direction and
/// are what the variational equation of the Itô map is built from.
pub trait EmbeddedManifold<const D: usize>: Send + Sync {
    fn name(&self) -> String;

    fn intrinsic_dim(&self) -> usize;

    /// Distance of `x` from satisfying the defining constraint.
    fn constraint_residual(&self, x: &Vector<D>) -> f64;

    /// Orthogonal projection of `R^D` onto `T_xM`.
    fn tangent_projection(&self, x: &Vector<D>) -> Matrix<D>;

    /// `X(x)`.
    fn diffusion(&self, x: &Vector<D>) -> Matrix<D>;

    /// `dX(x)[v]` for tangent `v`.
    fn diffusion_dir(&self, x: &Vector<D>, v: &Vector<D>) -> Matrix<D>;

    /// `Y_x = X(x)*`, zero on the normal space.
    fn right_inverse(&self, x: &Vector<D>) -> Matrix<D> {
        self.diffusion(x).transpose() * self.tangent_projection(x)
    }

    /// `K⊥(x)`, the projection onto `(ker X(x))⊥`.
    fn kernel_complement(&self, x: &Vector<D>) -> Matrix<D>;

    /// `dK⊥(x)[v]`.
    fn kernel_complement_dir(&self, x: &Vector<D>, v: &Vector<D>) -> Matrix<D>;

    /// `Ric♯_x` as an ambient matrix vanishing on the normal space.
    fn ricci(&self, x: &Vector<D>) -> Matrix<D>;

    fn retract(&self, x: &Vector<D>, v: &Vector<D>) -> Result<Vector<D>, GeometryError>;

    /// Differential of `(x, u) -> retract(x, u)` applied to `(dx, du)`.
    fn retract_dir(&self, x: &Vector<D>, u: &Vector<D>, dx: &Vector<D>, du: &Vector<D>)
        -> Vector<D>;

    /// Columns `0..n` hold an orthonormal basis of `T_xM`; the rest are zero.
    fn tangent_basis(&self, x: &Vector<D>) -> Matrix<D> {
        let p = self.tangent_projection(x);
        let n = self.intrinsic_dim();
        let mut basis = Matrix::<D>::zeros();
        let mut found = 0;
        for j in 0..D {
            if found == n {
                break;
            }
            let mut c = p.column(j).into_owned();
            for k in 0..found {
                let b = basis.column(k).into_owned();
                c -= b * b.dot(&c);
            }
            let norm = c.norm();
            if norm > 1e-6 {
                basis.set_column(found, &(c / norm));
                found += 1;
            }
        }
        basis
    }
}

/// Unit sphere `S^{D-1} ⊂ R^D` with `X(x) = I - x xᵀ`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sphere<const D: usize>;

impl<const D: usize> Sphere<D> {
    pub fn new() -> Self {
        Sphere
    }

    /// North pole `e_{D-1}`.
    pub fn pole(&self) -> Vector<D> {
        let mut x = Vector::<D>::zeros();
        x[D - 1] = 1.0;
        x
    }
}

impl<const D: usize> EmbeddedManifold<D> for Sphere<D> {
    fn name(&self) -> String {
        format!("sphere:{}", D - 1)
    }

    fn intrinsic_dim(&self) -> usize {
        D - 1
    }

    fn constraint_residual(&self, x: &Vector<D>) -> f64 {
        (x.norm() - 1.0).abs()
    }

    fn tangent_projection(&self, x: &Vector<D>) -> Matrix<D> {
        Matrix::<D>::identity() - x * x.transpose()
    }

    fn diffusion(&self, x: &Vector<D>) -> Matrix<D> {
        self.tangent_projection(x)
    }

    fn diffusion_dir(&self, x: &Vector<D>, v: &Vector<D>) -> Matrix<D> {
        -(v * x.transpose() + x * v.transpose())
    }

    fn right_inverse(&self, x: &Vector<D>) -> Matrix<D> {
        self.tangent_projection(x)
    }

    fn kernel_complement(&self, x: &Vector<D>) -> Matrix<D> {
        self.tangent_projection(x)
    }

    fn kernel_complement_dir(&self, x: &Vector<D>, v: &Vector<D>) -> Matrix<D> {
        self.diffusion_dir(x, v)
    }

    fn ricci(&self, x: &Vector<D>) -> Matrix<D> {
        self.tangent_projection(x) * (D as f64 - 2.0)
    }

    fn retract(&self, x: &Vector<D>, v: &Vector<D>) -> Result<Vector<D>, GeometryError> {
        // chart domain is the open hemisphere around x; tangent steps never leave it
        let y = x + v;
        let norm = y.norm();
        if norm < 1e-8 || x.dot(&y) <= 1e-8 * norm {
            return Err(GeometryError::DegenerateStep { norm });
        }
        Ok(y / norm)
    }

    fn retract_dir(
        &self,
        x: &Vector<D>,
        u: &Vector<D>,
        dx: &Vector<D>,
        du: &Vector<D>,
    ) -> Vector<D> {
        let y = x + u;
        let norm = y.norm();
        let yhat = y / norm;
        let dy = dx + du;
        (dy - yhat * yhat.dot(&dy)) / norm
    }
}

/// Runtime description of a manifold, parsed from strings like `sphere:2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ManifoldSpec {
    Sphere { dim: usize },
}

/// Largest sphere dimension with a compiled ambient size.
pub const MAX_SPHERE_DIM: usize = 5;

impl ManifoldSpec {
    pub fn parse(name: &str) -> Result<Self, GeometryError> {
        let unknown = || GeometryError::UnknownManifold(name.to_string());
        let (kind, dim) = name.split_once(':').ok_or_else(unknown)?;
        let dim: usize = dim.trim().parse().map_err(|_| unknown())?;
        match kind.trim() {
            "sphere" if (1..=MAX_SPHERE_DIM).contains(&dim) => Ok(ManifoldSpec::Sphere { dim }),
            _ => Err(unknown()),
        }
    }

    pub fn intrinsic_dim(&self) -> usize {
        match self {
            ManifoldSpec::Sphere { dim } => *dim,
        }
    }

    pub fn ambient_dim(&self) -> usize {
        match self {
            ManifoldSpec::Sphere { dim } => dim + 1,
        }
    }
}

impl std::fmt::Display for ManifoldSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ManifoldSpec::Sphere { dim } => write!(f, "sphere:{dim}"),
        }
    }
}

/// Work that is generic over the ambient dimension, run against a manifold
/// chosen at runtime.
pub trait ManifoldTask {
    type Output;
    fn run<const D: usize>(self, manifold: &dyn EmbeddedManifold<D>, base: Vector<D>)
        -> Self::Output;
}

/// Resolve `spec` to a concrete manifold and run `task` on it, starting from
/// the manifold's canonical base point.
pub fn with_manifold<T: ManifoldTask>(spec: ManifoldSpec, task: T) -> T::Output {
    match spec {
        ManifoldSpec::Sphere { dim: 1 } => task.run::<2>(&Sphere::<2>, Sphere::<2>.pole()),
        ManifoldSpec::Sphere { dim: 2 } => task.run::<3>(&Sphere::<3>, Sphere::<3>.pole()),
        ManifoldSpec::Sphere { dim: 3 } => task.run::<4>(&Sphere::<4>, Sphere::<4>.pole()),
        ManifoldSpec::Sphere { dim: 4 } => task.run::<5>(&Sphere::<5>, Sphere::<5>.pole()),
        ManifoldSpec::Sphere { dim: 5 } => task.run::<6>(&Sphere::<6>, Sphere::<6>.pole()),
        ManifoldSpec::Sphere { dim } => unreachable!("sphere:{dim} rejected at parse time"),
    }
}

fn check_point<const D: usize>(
    m: &dyn EmbeddedManifold<D>,
    x: &Vector<D>,
) -> Result<(), GeometryError> {
    let residual = m.constraint_residual(x);
    if residual > CONSTRAINT_TOL {
        return Err(GeometryError::ConstraintViolation { residual });
    }
    Ok(())
}

/// Normal component of `v` at `x`.
pub fn normal_component<const D: usize>(
    m: &dyn EmbeddedManifold<D>,
    x: &Vector<D>,
    v: &Vector<D>,
) -> f64 {
    (v - m.tangent_projection(x) * v).norm()
}

pub fn check_tangent<const D: usize>(
    m: &dyn EmbeddedManifold<D>,
    x: &Vector<D>,
    v: &Vector<D>,
) -> Result<(), GeometryError> {
    let normal = normal_component(m, x, v);
    if normal > CONSTRAINT_TOL * (1.0 + v.norm()) {
        return Err(GeometryError::NotTangent { normal });
    }
    Ok(())
}

/// The matrix of `X(x)`.
pub fn diffusion_coeff<const D: usize>(
    m: &dyn EmbeddedManifold<D>,
    x: &Vector<D>,
) -> Result<Matrix<D>, GeometryError> {
    check_point(m, x)?;
    Ok(m.diffusion(x))
}

/// The matrix of `Y_x = X(x)*`.
pub fn right_inverse_y<const D: usize>(
    m: &dyn EmbeddedManifold<D>,
    x: &Vector<D>,
) -> Result<Matrix<D>, GeometryError> {
    check_point(m, x)?;
    Ok(m.right_inverse(x))
}

pub fn kernel_complement_proj<const D: usize>(
    m: &dyn EmbeddedManifold<D>,
    x: &Vector<D>,
) -> Result<Matrix<D>, GeometryError> {
    check_point(m, x)?;
    Ok(m.kernel_complement(x))
}

pub fn ricci_op<const D: usize>(
    m: &dyn EmbeddedManifold<D>,
    x: &Vector<D>,
) -> Result<Matrix<D>, GeometryError> {
    check_point(m, x)?;
    Ok(m.ricci(x))
}

pub fn retract<const D: usize>(
    m: &dyn EmbeddedManifold<D>,
    x: &Vector<D>,
    v: &Vector<D>,
) -> Result<Vector<D>, GeometryError> {
    check_point(m, x)?;
    m.retract(x, v)
}

/// Norm of the covariant derivative of the vector field `y -> X(y)e` at `x`,
/// taken over an orthonormal basis of directions in `T_xM`.
///
/// Derivatives are central differences along retraction curves, projected back
/// to `T_xM`. Requires `e ⊥ ker X(x)`.
pub fn sde2_residual<const D: usize>(
    m: &dyn EmbeddedManifold<D>,
    x: &Vector<D>,
    e: &Vector<D>,
    fd_step: f64,
) -> Result<f64, GeometryError> {
    check_point(m, x)?;
    let kernel_part = (e - m.kernel_complement(x) * e).norm();
    if kernel_part > CONSTRAINT_TOL * (1.0 + e.norm()) {
        return Err(GeometryError::KernelDirection { component: kernel_part });
    }
    let p = m.tangent_projection(x);
    let basis = m.tangent_basis(x);
    let mut total = 0.0;
    for k in 0..m.intrinsic_dim() {
        let w = basis.column(k).into_owned();
        let fwd = m.retract(x, &(w * fd_step))?;
        let bwd = m.retract(x, &(w * -fd_step))?;
        let deriv = (m.diffusion(&fwd) * e - m.diffusion(&bwd) * e) / (2.0 * fd_step);
        total += (p * deriv).norm_squared();
    }
    Ok(total.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn v3(a: f64, b: f64, c: f64) -> Vector<3> {
        Vector::<3>::new(a, b, c)
    }

    #[test]
    fn diffusion_examples() {
        let s = Sphere::<3>;
        let pole = v3(0.0, 0.0, 1.0);
        let x = diffusion_coeff(&s, &pole).unwrap();
        assert_abs_diff_eq!(x * v3(1.0, 0.0, 0.0), v3(1.0, 0.0, 0.0), epsilon = 1e-15);
        assert_abs_diff_eq!(x * pole, Vector::<3>::zeros(), epsilon = 1e-15);

        let d = v3(1.0, 1.0, 1.0) / 3f64.sqrt();
        let got = diffusion_coeff(&s, &d).unwrap() * v3(1.0, 0.0, 0.0);
        assert_abs_diff_eq!(got, v3(2.0 / 3.0, -1.0 / 3.0, -1.0 / 3.0), epsilon = 1e-15);
    }

    #[test]
    fn off_manifold_point_rejected() {
        let s = Sphere::<3>;
        let err = diffusion_coeff(&s, &v3(0.0, 0.0, 1.1)).unwrap_err();
        assert!(matches!(err, GeometryError::ConstraintViolation { .. }));
    }

    #[test]
    fn y_fixes_tangent_vectors() {
        let s = Sphere::<3>;
        let pole = v3(0.0, 0.0, 1.0);
        let y = right_inverse_y(&s, &pole).unwrap();
        assert_abs_diff_eq!(y * v3(1.0, 2.0, 0.0), v3(1.0, 2.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn kernel_complement_at_pole() {
        let s = Sphere::<3>;
        let pole = v3(0.0, 0.0, 1.0);
        let k = kernel_complement_proj(&s, &pole).unwrap();
        assert_abs_diff_eq!(k, Matrix::<3>::identity() - pole * pole.transpose());
        assert_abs_diff_eq!(k * pole, Vector::<3>::zeros());
    }

    #[test]
    fn ricci_is_constant_curvature() {
        let pole3 = v3(0.0, 0.0, 1.0);
        let r2 = ricci_op(&Sphere::<3>, &pole3).unwrap();
        assert_abs_diff_eq!(r2 * v3(1.0, -2.0, 0.0), v3(1.0, -2.0, 0.0), epsilon = 1e-15);
        let p4 = Sphere::<4>.pole();
        let r3 = ricci_op(&Sphere::<4>, &p4).unwrap();
        let u = Vector::<4>::new(0.3, 1.0, -0.5, 0.0);
        assert_abs_diff_eq!(r3 * u, u * 2.0, epsilon = 1e-15);
    }

    #[test]
    fn retract_examples() {
        let s = Sphere::<3>;
        let pole = v3(0.0, 0.0, 1.0);
        assert_eq!(retract(&s, &pole, &Vector::zeros()).unwrap(), pole);
        let got = retract(&s, &v3(1.0, 0.0, 0.0), &v3(0.0, 1.0, 0.0)).unwrap();
        assert_abs_diff_eq!(got, v3(1.0, 1.0, 0.0) / 2f64.sqrt(), epsilon = 1e-15);
        let err = retract(&s, &pole, &(pole * -2.0)).unwrap_err();
        assert!(matches!(err, GeometryError::DegenerateStep { .. }));
        assert!(retract(&s, &pole, &-pole).is_err());
    }

    #[test]
    fn sde2_residual_at_pole() {
        let s = Sphere::<3>;
        let pole = v3(0.0, 0.0, 1.0);
        let r = sde2_residual(&s, &pole, &v3(1.0, 0.0, 0.0), FD_STEP).unwrap();
        assert!(r <= 1e-6, "residual {r}");
        let err = sde2_residual(&s, &pole, &pole, FD_STEP).unwrap_err();
        assert!(matches!(err, GeometryError::KernelDirection { .. }));
    }

    #[test]
    fn tangent_basis_is_orthonormal() {
        let s = Sphere::<4>;
        let x = Vector::<4>::new(0.5, -0.5, 0.5, 0.5);
        let b = s.tangent_basis(&x);
        for j in 0..3 {
            assert_abs_diff_eq!(b.column(j).dot(&x), 0.0, epsilon = 1e-14);
            for k in 0..3 {
                let want = if j == k { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(b.column(j).dot(&b.column(k)), want, epsilon = 1e-14);
            }
        }
        assert_eq!(b.column(3).norm(), 0.0);
    }

    #[test]
    fn spec_parsing() {
        assert_eq!(ManifoldSpec::parse("sphere:2").unwrap(), ManifoldSpec::Sphere { dim: 2 });
        assert!(ManifoldSpec::parse("torus:2").is_err());
        assert!(ManifoldSpec::parse("sphere:0").is_err());
        assert!(ManifoldSpec::parse("sphere").is_err());
    }
}
