//! Regular-grid scalar and vector fields, bilinear sampling and finite differences.
//!
//! Storage is row-major, `index = y * width + x`, with `x` pointing right and `y` pointing
//! down (image convention). Grid node `(x, y)` is the centre of pixel `(x, y)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("grid must be at least 2x2, got {width}x{height}")]
    InvalidShape { width: usize, height: usize },
    #[error("expected {expected} samples, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    pub width: usize,
    pub height: usize,
}

impl GridShape {
    pub fn new(width: usize, height: usize) -> Result<Self, FieldError> {
        if width < 2 || height < 2 {
            return Err(FieldError::InvalidShape { width, height });
        }
        Ok(Self { width, height })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index % self.width, index / self.width)
    }
}

fn check_finite<T: Real>(values: &[T]) -> Result<(), FieldError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(FieldError::NonFinite { index }),
        None => Ok(()),
    }
}

fn check_len(shape: GridShape, got: usize) -> Result<(), FieldError> {
    if got != shape.len() {
        return Err(FieldError::LengthMismatch { expected: shape.len(), got });
    }
    Ok(())
}

/// Dense 2-vector field `(u, v)` in pixels per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField2<T> {
    shape: GridShape,
    u: Vec<T>,
    v: Vec<T>,
}

impl<T: Real> VectorField2<T> {
    pub fn new(shape: GridShape, u: Vec<T>, v: Vec<T>) -> Result<Self, FieldError> {
        check_len(shape, u.len())?;
        check_len(shape, v.len())?;
        check_finite(&u)?;
        check_finite(&v)?;
        Ok(Self { shape, u, v })
    }

    pub fn zeros(shape: GridShape) -> Self {
        Self::uniform(shape, T::zero(), T::zero())
    }

    pub fn uniform(shape: GridShape, u: T, v: T) -> Self {
        assert!(u.is_finite() && v.is_finite(), "uniform velocity must be finite");
        Self { shape, u: vec![u; shape.len()], v: vec![v; shape.len()] }
    }

    /// Builds a field by evaluating `f(x, y)` at every node.
    ///
    /// Panics if `f` returns a non-finite component.
    pub fn from_fn(shape: GridShape, f: impl Fn(T, T) -> (T, T) + Sync) -> Self {
        let (u, v): (Vec<T>, Vec<T>) = (0..shape.len())
            .into_par_iter()
            .map(|i| {
                let (x, y) = shape.coords(i);
                f(T::lit(x as f64), T::lit(y as f64))
            })
            .unzip();
        Self::new(shape, u, v).expect("from_fn produced a non-finite velocity")
    }

    #[inline]
    pub fn shape(&self) -> GridShape {
        self.shape
    }

    #[inline]
    pub fn u(&self) -> &[T] {
        &self.u
    }

    #[inline]
    pub fn v(&self) -> &[T] {
        &self.v
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (T, T) {
        let i = self.shape.index(x, y);
        (self.u[i], self.v[i])
    }

    pub fn into_parts(self) -> (GridShape, Vec<T>, Vec<T>) {
        (self.shape, self.u, self.v)
    }

    /// Largest vector magnitude over the grid.
    pub fn max_speed(&self) -> T {
        self.u
            .iter()
            .zip(&self.v)
            .map(|(&a, &b)| a.hypot(b))
            .fold(T::zero(), T::max)
    }

    #[inline]
    pub fn sample(&self, x: T, y: T, policy: BoundaryPolicy) -> (T, T) {
        sample_bilinear(self, x, y, policy)
    }
}

/// Dense scalar field; carries instability exponents, magnified maps and masks.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField<T> {
    shape: GridShape,
    values: Vec<T>,
}

impl<T: Real> ScalarField<T> {
    pub fn new(shape: GridShape, values: Vec<T>) -> Result<Self, FieldError> {
        check_len(shape, values.len())?;
        check_finite(&values)?;
        Ok(Self { shape, values })
    }

    pub fn constant(shape: GridShape, value: T) -> Self {
        assert!(value.is_finite());
        Self { shape, values: vec![value; shape.len()] }
    }

    pub fn from_fn(shape: GridShape, f: impl Fn(T, T) -> T + Sync) -> Self {
        let values: Vec<T> = (0..shape.len())
            .into_par_iter()
            .map(|i| {
                let (x, y) = shape.coords(i);
                f(T::lit(x as f64), T::lit(y as f64))
            })
            .collect();
        Self::new(shape, values).expect("from_fn produced a non-finite value")
    }

    #[inline]
    pub fn shape(&self) -> GridShape {
        self.shape
    }

    #[inline]
    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.values[self.shape.index(x, y)]
    }

    /// `(min, max)` over all samples.
    pub fn min_max(&self) -> (T, T) {
        self.values.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
    }

    #[inline]
    pub fn sample(&self, x: T, y: T, policy: BoundaryPolicy) -> T {
        let s = Stencil::new(self.shape, x, y, policy);
        s.apply(&self.values)
    }
}

/// How samples outside `[0, width-1] x [0, height-1]` are resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryPolicy {
    /// Coordinates are clamped to the domain: the edge value extends outward.
    #[default]
    Clamp,
    /// Nodes outside the domain are zero.
    Zero,
    /// Coordinates mirror about the first and last node.
    Reflect,
}

impl std::str::FromStr for BoundaryPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "clamp" => Ok(Self::Clamp),
            "zero" => Ok(Self::Zero),
            "reflect" => Ok(Self::Reflect),
            other => Err(format!("unknown boundary policy '{other}'")),
        }
    }
}

/// One axis of a bilinear stencil: the two bracketing nodes, whether each is inside the
/// domain, and the fractional offset from the lower node.
#[derive(Debug, Clone, Copy)]
struct AxisStencil<T> {
    i0: usize,
    i1: usize,
    in0: bool,
    in1: bool,
    frac: T,
}

impl<T: Real> AxisStencil<T> {
    fn new(coord: T, n: usize, policy: BoundaryPolicy) -> Self {
        let last = T::lit((n - 1) as f64);
        match policy {
            BoundaryPolicy::Clamp => Self::inside(clamp_coord(coord, last), n),
            BoundaryPolicy::Reflect => {
                let c = if coord.is_finite() {
                    let period = last + last;
                    let mut m = coord % period;
                    if m < T::zero() {
                        m = m + period;
                    }
                    if m > last {
                        m = period - m;
                    }
                    clamp_coord(m, last)
                } else {
                    clamp_coord(coord, last)
                };
                Self::inside(c, n)
            }
            BoundaryPolicy::Zero => {
                let outside = Self { i0: 0, i1: 0, in0: false, in1: false, frac: T::zero() };
                if !coord.is_finite() || coord <= -T::one() || coord >= last + T::one() {
                    return outside;
                }
                let fl = coord.floor();
                let frac = coord - fl;
                // fl is in [-1, n-1]
                let lo = fl.to_i64().unwrap_or(-1);
                let hi = lo + 1;
                let valid = |i: i64| i >= 0 && (i as usize) < n;
                Self {
                    i0: lo.max(0) as usize,
                    i1: (hi.max(0) as usize).min(n - 1),
                    in0: valid(lo),
                    in1: valid(hi),
                    frac,
                }
            }
        }
    }

    fn inside(c: T, n: usize) -> Self {
        let fl = c.floor();
        let mut i0 = fl.to_usize().unwrap_or(0).min(n - 1);
        if i0 == n - 1 {
            i0 = n - 2;
        }
        let frac = c - T::lit(i0 as f64);
        Self { i0, i1: i0 + 1, in0: true, in1: true, frac }
    }
}

fn clamp_coord<T: Real>(c: T, last: T) -> T {
    if c.is_nan() {
        T::zero()
    } else {
        c.max(T::zero()).min(last)
    }
}

/// Precomputed bilinear weights for a query point; reused for the `u` and `v` planes.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stencil<T> {
    width: usize,
    x: AxisStencil<T>,
    y: AxisStencil<T>,
}

impl<T: Real> Stencil<T> {
    #[inline]
    pub(crate) fn new(shape: GridShape, x: T, y: T, policy: BoundaryPolicy) -> Self {
        Self {
            width: shape.width,
            x: AxisStencil::new(x, shape.width, policy),
            y: AxisStencil::new(y, shape.height, policy),
        }
    }

    #[inline]
    pub(crate) fn apply(&self, plane: &[T]) -> T {
        let node = |ix: usize, inx: bool, iy: usize, iny: bool| {
            if inx && iny {
                plane[iy * self.width + ix]
            } else {
                T::zero()
            }
        };
        let (ax, ay) = (&self.x, &self.y);
        let f00 = node(ax.i0, ax.in0, ay.i0, ay.in0);
        let f10 = node(ax.i1, ax.in1, ay.i0, ay.in0);
        let f01 = node(ax.i0, ax.in0, ay.i1, ay.in1);
        let f11 = node(ax.i1, ax.in1, ay.i1, ay.in1);
        let (fx, fy) = (ax.frac, ay.frac);
        let gx = T::one() - fx;
        let gy = T::one() - fy;
        gy * (gx * f00 + fx * f10) + fy * (gx * f01 + fx * f11)
    }
}

/// Bilinear interpolation of `(u, v)` at the real coordinate `(x, y)`.
///
/// Total: out-of-domain and non-finite coordinates are resolved by `policy`, and the
/// result is always finite. Returns node values exactly at integer in-domain coordinates.
#[inline]
pub fn sample_bilinear<T: Real>(
    field: &VectorField2<T>,
    x: T,
    y: T,
    policy: BoundaryPolicy,
) -> (T, T) {
    let s = Stencil::new(field.shape, x, y, policy);
    (s.apply(&field.u), s.apply(&field.v))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Axis {
    X,
    Y,
}

/// Central differences along one axis, one-sided at the borders, divided by `spacing`.
pub(crate) fn diff_axis<T: Real>(
    values: &[T],
    width: usize,
    height: usize,
    axis: Axis,
    spacing: T,
) -> Vec<T> {
    debug_assert!(width >= 2 && height >= 2);
    let two = T::lit(2.0);
    let mut out = vec![T::zero(); values.len()];
    out.par_chunks_mut(width).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let at = |xx: usize, yy: usize| values[yy * width + xx];
            *o = match axis {
                Axis::X => {
                    if x == 0 {
                        (at(1, y) - at(0, y)) / spacing
                    } else if x == width - 1 {
                        (at(x, y) - at(x - 1, y)) / spacing
                    } else {
                        (at(x + 1, y) - at(x - 1, y)) / (two * spacing)
                    }
                }
                Axis::Y => {
                    if y == 0 {
                        (at(x, 1) - at(x, 0)) / spacing
                    } else if y == height - 1 {
                        (at(x, y) - at(x, y - 1)) / spacing
                    } else {
                        (at(x, y + 1) - at(x, y - 1)) / (two * spacing)
                    }
                }
            };
        }
    });
    out
}

/// `(d/dx, d/dy)` by central differences in the interior and one-sided differences at
/// the borders, unit grid spacing.
pub fn gradient_central<T: Real>(field: &ScalarField<T>) -> (ScalarField<T>, ScalarField<T>) {
    let GridShape { width, height } = field.shape;
    let gx = diff_axis(&field.values, width, height, Axis::X, T::one());
    let gy = diff_axis(&field.values, width, height, Axis::Y, T::one());
    (
        ScalarField { shape: field.shape, values: gx },
        ScalarField { shape: field.shape, values: gy },
    )
}
