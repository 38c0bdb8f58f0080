//! Flow-map Jacobian, Cauchy-Green stretching and the finite-time instability exponent.

use rayon::prelude::*;
use thiserror::Error;

use crate::advection::{advect_grid, AdvectionConfig, FlowMap};
use crate::field::{diff_axis, Axis, GridShape, ScalarField, VectorField2};
use crate::scalar::Real;

/// Floor applied to the Cauchy-Green eigenvalue before taking its logarithm.
pub const EPS_LAMBDA: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StabilityError {
    #[error("seed grid {width}x{height} is too small to differentiate (need 2x2)")]
    GridTooSmall { width: usize, height: usize },
}

/// Per-seed entries of the flow-map Jacobian `d(x_t, y_t) / d(x_0, y_0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianField<T> {
    shape: GridShape,
    pub j11: Vec<T>,
    pub j12: Vec<T>,
    pub j21: Vec<T>,
    pub j22: Vec<T>,
}

impl<T: Real> JacobianField<T> {
    pub fn new(shape: GridShape, j11: Vec<T>, j12: Vec<T>, j21: Vec<T>, j22: Vec<T>) -> Self {
        for j in [&j11, &j12, &j21, &j22] {
            assert_eq!(j.len(), shape.len(), "jacobian plane length");
        }
        Self { shape, j11, j12, j21, j22 }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    /// Row-major `[[j11, j12], [j21, j22]]` at a seed index.
    pub fn matrix(&self, i: usize) -> [[T; 2]; 2] {
        [[self.j11[i], self.j12[i]], [self.j21[i], self.j22[i]]]
    }
}

/// Instability exponent per seed, `log(sqrt(lambda)) / tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityField<T> {
    phi: ScalarField<T>,
    tau: T,
}

impl<T: Real> StabilityField<T> {
    pub fn new(phi: ScalarField<T>, tau: T) -> Self {
        assert!(tau > T::zero(), "horizon must be positive");
        Self { phi, tau }
    }

    pub fn shape(&self) -> GridShape {
        self.phi.shape()
    }

    pub fn phi(&self) -> &ScalarField<T> {
        &self.phi
    }

    pub fn values(&self) -> &[T] {
        self.phi.values()
    }

    pub fn tau(&self) -> T {
        self.tau
    }
}

/// Central differences of the advected end points with respect to the seed lattice,
/// one-sided on the lattice border. The lattice spacing is the seed stride.
pub fn jacobian_of_flow_map<T: Real>(map: &FlowMap<T>) -> Result<JacobianField<T>, StabilityError> {
    let (w, h) = map.seed_dims();
    let shape = GridShape::new(w, h)
        .map_err(|_| StabilityError::GridTooSmall { width: w, height: h })?;
    let spacing = T::lit(map.stride() as f64);
    let j11 = diff_axis(map.x_final(), w, h, Axis::X, spacing);
    let j12 = diff_axis(map.x_final(), w, h, Axis::Y, spacing);
    let j21 = diff_axis(map.y_final(), w, h, Axis::X, spacing);
    let j22 = diff_axis(map.y_final(), w, h, Axis::Y, spacing);
    Ok(JacobianField { shape, j11, j12, j21, j22 })
}

/// Largest eigenvalue of `J^T J` for a single 2x2 Jacobian.
///
/// With `C = [[a, b], [b, d]]` the discriminant `tr^2 - 4 det` equals `(a - d)^2 + 4 b^2`,
/// which is evaluated in that form so it cannot go negative or cancel.
#[inline]
pub fn max_eigenvalue_2x2<T: Real>(j: [[T; 2]; 2]) -> T {
    let [[j11, j12], [j21, j22]] = j;
    let a = j11 * j11 + j21 * j21;
    let b = j11 * j12 + j21 * j22;
    let d = j12 * j12 + j22 * j22;
    let two = T::lit(2.0);
    let diff = a - d;
    let disc = (diff * diff + T::lit(4.0) * b * b).max(T::zero());
    ((a + d) + disc.sqrt()) / two
}

/// Per-seed largest eigenvalue of the Cauchy-Green tensor `J^T J`; always `>= 0`.
pub fn max_eigenvalue_ctc<T: Real>(j: &JacobianField<T>) -> ScalarField<T> {
    let values: Vec<T> = (0..j.shape.len())
        .into_par_iter()
        .map(|i| max_eigenvalue_2x2(j.matrix(i)).max(T::zero()))
        .collect();
    ScalarField::new(j.shape, values).expect("finite jacobian gives finite eigenvalues")
}

/// `phi = log(sqrt(lambda)) / tau`, with `lambda` floored at [`EPS_LAMBDA`].
///
/// Panics if `tau` is not positive.
pub fn stability_exponent<T: Real>(lambda: &ScalarField<T>, tau: T) -> StabilityField<T> {
    assert!(tau > T::zero() && tau.is_finite(), "horizon must be positive");
    let floor = T::lit(EPS_LAMBDA);
    let two_tau = T::lit(2.0) * tau;
    let phi: Vec<T> = lambda
        .values()
        .par_iter()
        .map(|&l| l.max(floor).ln() / two_tau)
        .collect();
    StabilityField::new(
        ScalarField::new(lambda.shape(), phi).expect("floored logarithm is finite"),
        tau,
    )
}

/// Advection, Jacobian, eigen-analysis and exponent in one call.
pub fn compute_stability<T: Real>(
    field: &VectorField2<T>,
    cfg: &AdvectionConfig<T>,
) -> Result<StabilityField<T>, StabilityError> {
    let map = advect_grid(field, cfg);
    let jac = jacobian_of_flow_map(&map)?;
    let lambda = max_eigenvalue_ctc(&jac);
    Ok(stability_exponent(&lambda, cfg.horizon()))
}
