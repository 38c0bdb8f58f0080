//! Particle advection through a steady velocity field with classical RK4.
//!
//! The mean field of a window has no time axis left, so the integrated ODE is
//! `dx/dt = u(x, y)`, `dy/dt = v(x, y)` with the seed position as initial value.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{BoundaryPolicy, VectorField2};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdvectionError {
    #[error("integration horizon must be positive and finite, got {0}")]
    InvalidHorizon(f64),
    #[error("RK4 step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("seed stride must be at least 1")]
    InvalidStride,
}

/// Integration horizon, RK4 step, seeding density and boundary handling.
///
/// The constructor shrinks `step` so the horizon is covered by a whole number of steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AdvectionConfigRaw<T>", into = "AdvectionConfigRaw<T>")]
#[serde(bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct AdvectionConfig<T> {
    horizon: T,
    step: T,
    steps: usize,
    seed_stride: usize,
    boundary: BoundaryPolicy,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct AdvectionConfigRaw<T> {
    horizon_tau: T,
    step_h: T,
    seed_stride: usize,
    #[serde(default)]
    boundary: BoundaryPolicy,
}

impl<T: Real> TryFrom<AdvectionConfigRaw<T>> for AdvectionConfig<T> {
    type Error = AdvectionError;

    fn try_from(raw: AdvectionConfigRaw<T>) -> Result<Self, Self::Error> {
        Self::new(raw.horizon_tau, raw.step_h, raw.seed_stride, raw.boundary)
    }
}

impl<T: Real> From<AdvectionConfig<T>> for AdvectionConfigRaw<T> {
    fn from(c: AdvectionConfig<T>) -> Self {
        Self { horizon_tau: c.horizon, step_h: c.step, seed_stride: c.seed_stride, boundary: c.boundary }
    }
}

impl<T: Real> AdvectionConfig<T> {
    pub const DEFAULT_STEP: f64 = 0.25;

    pub fn new(
        horizon: T,
        step: T,
        seed_stride: usize,
        boundary: BoundaryPolicy,
    ) -> Result<Self, AdvectionError> {
        if !(horizon.is_finite() && horizon > T::zero()) {
            return Err(AdvectionError::InvalidHorizon(horizon.to_f64_lossy()));
        }
        if !(step.is_finite() && step > T::zero()) {
            return Err(AdvectionError::InvalidStep(step.to_f64_lossy()));
        }
        if seed_stride == 0 {
            return Err(AdvectionError::InvalidStride);
        }
        let ratio = (horizon / step).to_f64_lossy();
        // tolerate ratios like 1/0.01 that land a hair above an integer
        let steps = ((ratio * (1.0 - 1e-12)).ceil() as usize).max(1);
        let step = horizon / T::lit(steps as f64);
        Ok(Self { horizon, step, steps, seed_stride, boundary })
    }

    /// Dense seeding, quarter-frame steps, clamp boundary.
    pub fn with_horizon(horizon: T) -> Result<Self, AdvectionError> {
        Self::new(horizon, T::lit(Self::DEFAULT_STEP), 1, BoundaryPolicy::Clamp)
    }

    pub fn horizon(&self) -> T {
        self.horizon
    }

    pub fn step(&self) -> T {
        self.step
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn seed_stride(&self) -> usize {
        self.seed_stride
    }

    pub fn boundary(&self) -> BoundaryPolicy {
        self.boundary
    }

    pub fn with_seed_stride(mut self, stride: usize) -> Result<Self, AdvectionError> {
        if stride == 0 {
            return Err(AdvectionError::InvalidStride);
        }
        self.seed_stride = stride;
        Ok(self)
    }

    pub fn with_boundary(mut self, boundary: BoundaryPolicy) -> Self {
        self.boundary = boundary;
        self
    }
}

/// Classical fourth-order Runge-Kutta for an autonomous planar ODE, `steps` steps of `h`.
#[inline]
pub fn rk4<T: Real>(
    mut x: T,
    mut y: T,
    h: T,
    steps: usize,
    velocity: impl Fn(T, T) -> (T, T),
) -> (T, T) {
    let two = T::lit(2.0);
    let six = T::lit(6.0);
    let half = h / two;
    for _ in 0..steps {
        let (k1x, k1y) = velocity(x, y);
        let (k2x, k2y) = velocity(x + half * k1x, y + half * k1y);
        let (k3x, k3y) = velocity(x + half * k2x, y + half * k2y);
        let (k4x, k4y) = velocity(x + h * k3x, y + h * k3y);
        x = x + h * (k1x + two * (k2x + k3x) + k4x) / six;
        y = y + h * (k1y + two * (k2y + k3y) + k4y) / six;
    }
    (x, y)
}

/// Position after integrating from `(x0, y0)` over the configured horizon.
pub fn advect_point<T: Real>(
    field: &VectorField2<T>,
    x0: T,
    y0: T,
    cfg: &AdvectionConfig<T>,
) -> (T, T) {
    let policy = cfg.boundary;
    rk4(x0, y0, cfg.step, cfg.steps, |x, y| field.sample(x, y, policy))
}

/// Seed positions and their advected end points on the seed grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMap<T> {
    seed_width: usize,
    seed_height: usize,
    stride: usize,
    x_seed: Vec<T>,
    y_seed: Vec<T>,
    x_final: Vec<T>,
    y_final: Vec<T>,
}

impl<T: Real> FlowMap<T> {
    /// Builds a flow map from explicit end points on a regular seed lattice with spacing
    /// `stride`; mostly useful for analytic maps in tests.
    pub fn from_finals(
        seed_width: usize,
        seed_height: usize,
        stride: usize,
        x_final: Vec<T>,
        y_final: Vec<T>,
    ) -> Self {
        let n = seed_width * seed_height;
        assert_eq!(x_final.len(), n);
        assert_eq!(y_final.len(), n);
        let (x_seed, y_seed) = seed_lattice(seed_width, seed_height, stride);
        Self { seed_width, seed_height, stride, x_seed, y_seed, x_final, y_final }
    }

    /// `(width, height)` of the seed lattice.
    pub fn seed_dims(&self) -> (usize, usize) {
        (self.seed_width, self.seed_height)
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn x_seed(&self) -> &[T] {
        &self.x_seed
    }

    pub fn y_seed(&self) -> &[T] {
        &self.y_seed
    }

    pub fn x_final(&self) -> &[T] {
        &self.x_final
    }

    pub fn y_final(&self) -> &[T] {
        &self.y_final
    }
}

fn seed_lattice<T: Real>(sw: usize, sh: usize, stride: usize) -> (Vec<T>, Vec<T>) {
    (0..sw * sh)
        .map(|i| {
            let (ix, iy) = (i % sw, i / sw);
            (T::lit((ix * stride) as f64), T::lit((iy * stride) as f64))
        })
        .unzip()
}

/// Advects one particle per `seed_stride` x `seed_stride` block, seeded at the block's
/// top-left pixel centre. Seed lattice dims are `ceil(width / stride) x ceil(height / stride)`.
pub fn advect_grid<T: Real>(field: &VectorField2<T>, cfg: &AdvectionConfig<T>) -> FlowMap<T> {
    let shape = field.shape();
    let stride = cfg.seed_stride;
    let sw = shape.width.div_ceil(stride);
    let sh = shape.height.div_ceil(stride);
    let (x_seed, y_seed) = seed_lattice::<T>(sw, sh, stride);
    let (x_final, y_final): (Vec<T>, Vec<T>) = x_seed
        .par_iter()
        .zip(y_seed.par_iter())
        .map(|(&x, &y)| advect_point(field, x, y, cfg))
        .unzip();
    FlowMap { seed_width: sw, seed_height: sh, stride, x_seed, y_seed, x_final, y_final }
}
