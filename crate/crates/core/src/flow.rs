//! Dense optical flow (coarse-to-fine Horn-Schunck with warping) and the temporal mean
//! of the flow over a window of `tau` frames.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{gradient_central, BoundaryPolicy, GridShape, ScalarField, Stencil, VectorField2};
use crate::scalar::{CompensatedSum, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: GridShape, right: GridShape },
    #[error("invalid flow parameters: {0}")]
    InvalidParams(String),
    #[error("intensity {value} at index {index} outside [0, 1]")]
    IntensityOutOfRange { index: usize, value: f64 },
    #[error("expected {expected} samples, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("window already holds {tau} flows")]
    WindowFull { tau: usize },
    #[error("window holds {count} of {tau} flows")]
    WindowIncomplete { count: usize, tau: usize },
    #[error("window length must be at least 1")]
    InvalidWindow,
}

/// Grayscale frame with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame<T> {
    shape: GridShape,
    intensity: Vec<T>,
}

/// Rec. 601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

impl<T: Real> Frame<T> {
    pub fn new(shape: GridShape, intensity: Vec<T>) -> Result<Self, FlowError> {
        if intensity.len() != shape.len() {
            return Err(FlowError::LengthMismatch { expected: shape.len(), got: intensity.len() });
        }
        if let Some(index) = intensity.iter().position(|v| !(*v >= T::zero() && *v <= T::one())) {
            let value = intensity[index].to_f64_lossy();
            return Err(FlowError::IntensityOutOfRange { index, value });
        }
        Ok(Self { shape, intensity })
    }

    /// From 8-bit (or wider) gray levels, scaled by `maxval`.
    pub fn from_gray(shape: GridShape, levels: &[u16], maxval: u16) -> Result<Self, FlowError> {
        let m = T::lit(maxval.max(1) as f64);
        let v = levels.iter().map(|&l| (T::lit(l as f64) / m).min(T::one())).collect();
        Self::new(shape, v)
    }

    /// From interleaved RGB levels, converted with [`LUMA`].
    pub fn from_rgb(shape: GridShape, rgb: &[u16], maxval: u16) -> Result<Self, FlowError> {
        if rgb.len() != 3 * shape.len() {
            return Err(FlowError::LengthMismatch { expected: 3 * shape.len(), got: rgb.len() });
        }
        let m = maxval.max(1) as f64;
        let v = rgb
            .chunks_exact(3)
            .map(|p| {
                let l = (LUMA[0] * p[0] as f64 + LUMA[1] * p[1] as f64 + LUMA[2] * p[2] as f64) / m;
                T::lit(l.clamp(0.0, 1.0))
            })
            .collect();
        Self::new(shape, v)
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn intensity(&self) -> &[T] {
        &self.intensity
    }

    pub fn get(&self, x: usize, y: usize) -> T {
        self.intensity[self.shape.index(x, y)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct FlowParams<T> {
    /// Horn-Schunck `alpha` in 8-bit intensity units; the estimator uses
    /// `alpha = smoothness_weight / 255` on `[0, 1]` frames.
    pub smoothness_weight: T,
    pub pyramid_levels: usize,
    pub pyramid_scale: T,
    pub iterations_per_level: usize,
    /// Inner iterations stop once the largest per-pixel update falls below this.
    pub convergence_eps: T,
}

impl<T: Real> Default for FlowParams<T> {
    fn default() -> Self {
        Self {
            smoothness_weight: T::lit(40.0),
            pyramid_levels: 3,
            pyramid_scale: T::lit(0.5),
            iterations_per_level: 100,
            convergence_eps: T::lit(1e-4),
        }
    }
}

impl<T: Real> FlowParams<T> {
    pub fn validate(&self) -> Result<(), FlowError> {
        let bad = |m: &str| Err(FlowError::InvalidParams(m.into()));
        if !(self.smoothness_weight > T::zero() && self.smoothness_weight.is_finite()) {
            return bad("smoothness_weight must be positive");
        }
        if self.pyramid_levels == 0 {
            return bad("pyramid_levels must be >= 1");
        }
        if !(self.pyramid_scale > T::zero() && self.pyramid_scale < T::one()) {
            return bad("pyramid_scale must lie in (0, 1)");
        }
        if self.iterations_per_level == 0 {
            return bad("iterations_per_level must be >= 1");
        }
        if !(self.convergence_eps > T::zero() && self.convergence_eps.is_finite()) {
            return bad("convergence_eps must be positive");
        }
        Ok(())
    }
}

/// Levels are not built below this side length.
const MIN_LEVEL_SIDE: usize = 8;
/// Inner iterations between re-warps of the second frame.
const ITERATIONS_PER_WARP: usize = 10;

fn gaussian_kernel<T: Real>(sigma: f64) -> Vec<T> {
    let r = (2.5 * sigma).ceil().max(1.0) as i64;
    let w: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| T::lit(v / s)).collect()
}

/// Separable convolution with edge replication.
fn blur<T: Real>(img: &[T], shape: GridShape, kernel: &[T]) -> Vec<T> {
    let GridShape { width, height } = shape;
    let r = (kernel.len() / 2) as i64;
    let mut tmp = vec![T::zero(); img.len()];
    tmp.par_chunks_mut(width).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (k, &w) in kernel.iter().enumerate() {
                let xx = (x as i64 + k as i64 - r).clamp(0, width as i64 - 1) as usize;
                acc = acc + w * img[y * width + xx];
            }
            *o = acc;
        }
    });
    let mut out = vec![T::zero(); img.len()];
    out.par_chunks_mut(width).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (k, &w) in kernel.iter().enumerate() {
                let yy = (y as i64 + k as i64 - r).clamp(0, height as i64 - 1) as usize;
                acc = acc + w * tmp[yy * width + x];
            }
            *o = acc;
        }
    });
    out
}

/// Resamples `img` onto `to`, node `(x, y)` reading source coordinate `(x / s, y / s)`.
fn resample<T: Real>(img: &[T], from: GridShape, to: GridShape, scale: T) -> Vec<T> {
    let mut out = vec![T::zero(); to.len()];
    out.par_chunks_mut(to.width).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let sx = T::lit(x as f64) / scale;
            let sy = T::lit(y as f64) / scale;
            *o = Stencil::new(from, sx, sy, BoundaryPolicy::Clamp).apply(img);
        }
    });
    out
}

struct Level<T> {
    shape: GridShape,
    prev: Vec<T>,
    next: Vec<T>,
}

fn build_pyramid<T: Real>(prev: &Frame<T>, next: &Frame<T>, params: &FlowParams<T>) -> Vec<Level<T>> {
    let s = params.pyramid_scale;
    let sf = s.to_f64_lossy();
    let kernel = gaussian_kernel::<T>(0.6 * (1.0 / (sf * sf) - 1.0).sqrt());
    let mut levels = vec![Level {
        shape: prev.shape,
        prev: prev.intensity.clone(),
        next: next.intensity.clone(),
    }];
    while levels.len() < params.pyramid_levels {
        let top = levels.last().expect("non-empty");
        let w = (top.shape.width as f64 * sf).ceil() as usize;
        let h = (top.shape.height as f64 * sf).ceil() as usize;
        if w < MIN_LEVEL_SIDE || h < MIN_LEVEL_SIDE {
            break;
        }
        let to = GridShape { width: w, height: h };
        let down = |img: &[T]| resample(&blur(img, top.shape, &kernel), top.shape, to, s);
        let level = Level { shape: to, prev: down(&top.prev), next: down(&top.next) };
        levels.push(level);
    }
    levels
}

/// Horn-Schunck neighbour average: 1/6 on edge neighbours, 1/12 on corners, replicated
/// at the border.
fn neighbour_mean<T: Real>(f: &[T], shape: GridShape) -> Vec<T> {
    let GridShape { width, height } = shape;
    let (w_edge, w_corner) = (T::lit(1.0 / 6.0), T::lit(1.0 / 12.0));
    let mut out = vec![T::zero(); f.len()];
    out.par_chunks_mut(width).enumerate().for_each(|(y, row)| {
        let ym = y.saturating_sub(1);
        let yp = (y + 1).min(height - 1);
        for (x, o) in row.iter_mut().enumerate() {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(width - 1);
            let at = |xx: usize, yy: usize| f[yy * width + xx];
            let edges = at(xm, y) + at(xp, y) + at(x, ym) + at(x, yp);
            let corners = at(xm, ym) + at(xp, ym) + at(xm, yp) + at(xp, yp);
            *o = w_edge * edges + w_corner * corners;
        }
    });
    out
}

/// Refines `(u, v)` on one pyramid level.
fn refine_level<T: Real>(level: &Level<T>, u: &mut Vec<T>, v: &mut Vec<T>, params: &FlowParams<T>) {
    let shape = level.shape;
    let alpha = params.smoothness_weight / T::lit(255.0);
    let alpha2 = alpha * alpha;
    let half = T::lit(0.5);
    let mut remaining = params.iterations_per_level;
    while remaining > 0 {
        let inner = remaining.min(ITERATIONS_PER_WARP);
        remaining -= inner;

        // linearise the data term about the current flow; pixels whose match falls
        // outside the frame carry no data term and are filled in by smoothness
        let (w_max, h_max) = (T::lit((shape.width - 1) as f64), T::lit((shape.height - 1) as f64));
        let (warped, inside): (Vec<T>, Vec<bool>) = (0..shape.len())
            .into_par_iter()
            .map(|i| {
                let (x, y) = shape.coords(i);
                let sx = T::lit(x as f64) + u[i];
                let sy = T::lit(y as f64) + v[i];
                let ok = sx >= T::zero() && sx <= w_max && sy >= T::zero() && sy <= h_max;
                (Stencil::new(shape, sx, sy, BoundaryPolicy::Clamp).apply(&level.next), ok)
            })
            .unzip();
        let avg: Vec<T> = level.prev.iter().zip(&warped).map(|(&a, &b)| half * (a + b)).collect();
        let avg = ScalarField::new(shape, avg).expect("finite intensities");
        let (gx, gy) = gradient_central(&avg);
        let keep = |g: &[T]| -> Vec<T> { g.iter().zip(&inside).map(|(&a, &k)| if k { a } else { T::zero() }).collect() };
        let (ix, iy) = (keep(gx.values()), keep(gy.values()));
        let it: Vec<T> = warped.iter().zip(&level.prev).map(|(&b, &a)| b - a).collect();
        let it = keep(&it);
        let (u0, v0) = (u.clone(), v.clone());

        for _ in 0..inner {
            let ubar = neighbour_mean(u, shape);
            let vbar = neighbour_mean(v, shape);
            let (nu, nv): (Vec<T>, Vec<T>) = (0..shape.len())
                .into_par_iter()
                .map(|i| {
                    let residual = ix[i] * (ubar[i] - u0[i]) + iy[i] * (vbar[i] - v0[i]) + it[i];
                    let k = residual / (alpha2 + ix[i] * ix[i] + iy[i] * iy[i]);
                    (ubar[i] - ix[i] * k, vbar[i] - iy[i] * k)
                })
                .unzip();
            let change = nu
                .iter()
                .zip(u.iter())
                .chain(nv.iter().zip(v.iter()))
                .map(|(&a, &b)| (a - b).abs())
                .fold(T::zero(), T::max);
            *u = nu;
            *v = nv;
            if change < params.convergence_eps {
                break;
            }
        }
    }
}

/// Dense flow such that `prev(x, y) ~ next(x + u, y + v)`.
pub fn estimate_flow<T: Real>(
    prev: &Frame<T>,
    next: &Frame<T>,
    params: &FlowParams<T>,
) -> Result<VectorField2<T>, FlowError> {
    if prev.shape != next.shape {
        return Err(FlowError::ShapeMismatch { left: prev.shape, right: next.shape });
    }
    params.validate()?;
    let levels = build_pyramid(prev, next, params);
    let scale = params.pyramid_scale;
    let coarsest = levels.last().expect("at least one level");
    let mut u = vec![T::zero(); coarsest.shape.len()];
    let mut v = vec![T::zero(); coarsest.shape.len()];
    let mut shape = coarsest.shape;
    for level in levels.iter().rev() {
        if level.shape != shape {
            u = resample(&u, shape, level.shape, T::one() / scale).into_iter().map(|a| a / scale).collect();
            v = resample(&v, shape, level.shape, T::one() / scale).into_iter().map(|a| a / scale).collect();
            shape = level.shape;
        }
        refine_level(level, &mut u, &mut v, params);
    }
    Ok(VectorField2::new(shape, u, v).expect("flow stays finite"))
}

/// Running sums for the per-pixel temporal mean over a window of `tau` flows.
#[derive(Debug, Clone)]
pub struct MeanFlowAccumulator<T> {
    shape: GridShape,
    tau: usize,
    count: usize,
    sum_u: Vec<CompensatedSum<T>>,
    sum_v: Vec<CompensatedSum<T>>,
}

impl<T: Real> MeanFlowAccumulator<T> {
    pub fn new(shape: GridShape, tau: usize) -> Result<Self, FlowError> {
        if tau == 0 {
            return Err(FlowError::InvalidWindow);
        }
        let zero = vec![CompensatedSum::new(); shape.len()];
        Ok(Self { shape, tau, count: 0, sum_u: zero.clone(), sum_v: zero })
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_full(&self) -> bool {
        self.count == self.tau
    }

    pub fn accumulate(&mut self, flow: &VectorField2<T>) -> Result<(), FlowError> {
        if self.count == self.tau {
            return Err(FlowError::WindowFull { tau: self.tau });
        }
        if flow.shape() != self.shape {
            return Err(FlowError::ShapeMismatch { left: self.shape, right: flow.shape() });
        }
        for (s, &x) in self.sum_u.iter_mut().zip(flow.u()) {
            s.add(x);
        }
        for (s, &x) in self.sum_v.iter_mut().zip(flow.v()) {
            s.add(x);
        }
        self.count += 1;
        Ok(())
    }

    /// Current per-pixel sums `(sum_u, sum_v)`.
    pub fn sums(&self) -> (Vec<T>, Vec<T>) {
        (
            self.sum_u.iter().map(CompensatedSum::value).collect(),
            self.sum_v.iter().map(CompensatedSum::value).collect(),
        )
    }

    /// `(sum_u / tau, sum_v / tau)`; only once the window is full.
    pub fn finalize_mean(&self) -> Result<VectorField2<T>, FlowError> {
        if self.count < self.tau {
            return Err(FlowError::WindowIncomplete { count: self.count, tau: self.tau });
        }
        let n = T::lit(self.tau as f64);
        let (su, sv) = self.sums();
        let u = su.into_iter().map(|s| s / n).collect();
        let v = sv.into_iter().map(|s| s / n).collect();
        Ok(VectorField2::new(self.shape, u, v).expect("mean of finite flows"))
    }

    pub fn reset(&mut self) {
        self.count = 0;
        self.sum_u.fill(CompensatedSum::new());
        self.sum_v.fill(CompensatedSum::new());
    }
}

/// Mean over the most recent `tau` flows, emitted after every push once `tau` are held.
#[derive(Debug, Clone)]
pub struct SlidingMeanFlow<T> {
    tau: usize,
    window: VecDeque<VectorField2<T>>,
}

impl<T: Real> SlidingMeanFlow<T> {
    pub fn new(tau: usize) -> Result<Self, FlowError> {
        if tau == 0 {
            return Err(FlowError::InvalidWindow);
        }
        Ok(Self { tau, window: VecDeque::with_capacity(tau) })
    }

    pub fn push(&mut self, flow: VectorField2<T>) -> Result<Option<VectorField2<T>>, FlowError> {
        if let Some(first) = self.window.front() {
            if first.shape() != flow.shape() {
                return Err(FlowError::ShapeMismatch { left: first.shape(), right: flow.shape() });
            }
        }
        if self.window.len() == self.tau {
            self.window.pop_front();
        }
        self.window.push_back(flow);
        if self.window.len() < self.tau {
            return Ok(None);
        }
        let mut acc = MeanFlowAccumulator::new(self.window[0].shape(), self.tau)?;
        for f in &self.window {
            acc.accumulate(f)?;
        }
        acc.finalize_mean().map(Some)
    }
}
