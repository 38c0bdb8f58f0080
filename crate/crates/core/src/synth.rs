//! Synthetic scenes with known ground truth: analytic velocity fields built from
//! additive elements, and textured frame sequences warped through them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advection::rk4;
use crate::field::{BoundaryPolicy, GridShape, VectorField2};
use crate::flow::Frame;
use crate::saliency::BBox;
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("element {index} ({kind}) out of bounds: {reason}")]
    SpecOutOfBounds { index: usize, kind: &'static str, reason: String },
    #[error("scene spec parse error: {0}")]
    Parse(String),
    #[error("need at least 2 frames, got {0}")]
    TooFewFrames(usize),
}

/// One additive velocity contribution. Directions are normalised on use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Element {
    /// Constant velocity, everywhere or inside `bbox`.
    UniformLane {
        magnitude: f64,
        direction: [f64; 2],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bbox: Option<BBox>,
    },
    /// Hyperbolic point `(x - cx, -(y - cy))`, faded by a Gaussian of width `radius`.
    Saddle { center: [f64; 2], radius: f64, magnitude: f64 },
    /// Rigid rotation about `center` at angular rate `magnitude`.
    Rotation { center: [f64; 2], magnitude: f64 },
    /// Velocity along `direction` growing linearly across it at rate `magnitude`.
    Shear { center: [f64; 2], magnitude: f64, direction: [f64; 2] },
    /// Flux-conserving funnel: the full cross-section of `bbox` converges to half its
    /// width around the box centre while speed doubles from `magnitude`.
    BottleneckChannel { bbox: BBox, magnitude: f64, direction: [f64; 2] },
    /// Adds `-2 * magnitude * direction` inside `bbox`, reversing a matching lane.
    CounterflowBand { bbox: BBox, magnitude: f64, direction: [f64; 2] },
    /// Zero-mean uniform perturbation in `[-magnitude, magnitude]` per component.
    NoisePatch { bbox: BBox, magnitude: f64, rng_seed: u64 },
}

/// Half-thickness of a counterflow boundary box, in pixels.
const SHEAR_LAYER_HALF: usize = 1;

impl Element {
    pub fn kind(&self) -> &'static str {
        match self {
            Element::UniformLane { .. } => "uniform_lane",
            Element::Saddle { .. } => "saddle",
            Element::Rotation { .. } => "rotation",
            Element::Shear { .. } => "shear",
            Element::BottleneckChannel { .. } => "bottleneck_channel",
            Element::CounterflowBand { .. } => "counterflow_band",
            Element::NoisePatch { .. } => "noise_patch",
        }
    }

    fn check(&self, shape: GridShape) -> Result<(), String> {
        let (w, h) = (shape.width as f64, shape.height as f64);
        let bbox_ok = |b: &BBox| {
            if b.w == 0 || b.h == 0 || b.x + b.w > shape.width || b.y + b.h > shape.height {
                Err(format!("bbox {:?} not inside {}x{}", <[usize; 4]>::from(*b), shape.width, shape.height))
            } else {
                Ok(())
            }
        };
        let center_ok = |c: &[f64; 2]| {
            if c[0] >= 0.0 && c[0] <= w - 1.0 && c[1] >= 0.0 && c[1] <= h - 1.0 {
                Ok(())
            } else {
                Err(format!("center {c:?} outside the frame"))
            }
        };
        let dir_ok = |d: &[f64; 2]| {
            let n = d[0].hypot(d[1]);
            if n.is_finite() && n > 0.0 {
                Ok(())
            } else {
                Err("direction must be a non-zero vector".to_string())
            }
        };
        let mag_ok = |m: f64| if m.is_finite() { Ok(()) } else { Err("magnitude must be finite".to_string()) };
        match self {
            Element::UniformLane { magnitude, direction, bbox } => {
                mag_ok(*magnitude)?;
                dir_ok(direction)?;
                bbox.as_ref().map_or(Ok(()), bbox_ok)
            }
            Element::Saddle { center, radius, magnitude } => {
                mag_ok(*magnitude)?;
                center_ok(center)?;
                if !(radius.is_finite() && *radius > 0.0) {
                    return Err("radius must be positive".into());
                }
                Ok(())
            }
            Element::Rotation { center, magnitude } => {
                mag_ok(*magnitude)?;
                center_ok(center)
            }
            Element::Shear { center, magnitude, direction } => {
                mag_ok(*magnitude)?;
                dir_ok(direction)?;
                center_ok(center)
            }
            Element::BottleneckChannel { bbox, magnitude, direction }
            | Element::CounterflowBand { bbox, magnitude, direction } => {
                mag_ok(*magnitude)?;
                dir_ok(direction)?;
                bbox_ok(bbox)
            }
            Element::NoisePatch { bbox, magnitude, .. } => {
                mag_ok(*magnitude)?;
                bbox_ok(bbox)
            }
        }
    }

    /// Adds this element's velocity to `(u, v)`.
    fn add_to(&self, shape: GridShape, u: &mut [f64], v: &mut [f64]) {
        let unit = |d: &[f64; 2]| {
            let n = d[0].hypot(d[1]);
            (d[0] / n, d[1] / n)
        };
        let each = |u: &mut [f64], v: &mut [f64], region: Option<&BBox>, f: &(dyn Fn(f64, f64) -> (f64, f64) + Sync)| {
            u.par_iter_mut().zip(v.par_iter_mut()).enumerate().for_each(|(i, (ui, vi))| {
                let (x, y) = shape.coords(i);
                if let Some(b) = region {
                    if x < b.x || x >= b.x + b.w || y < b.y || y >= b.y + b.h {
                        return;
                    }
                }
                let (a, c) = f(x as f64, y as f64);
                *ui += a;
                *vi += c;
            });
        };
        match self {
            Element::UniformLane { magnitude, direction, bbox } => {
                let (dx, dy) = unit(direction);
                let (a, c) = (magnitude * dx, magnitude * dy);
                each(u, v, bbox.as_ref(), &|_, _| (a, c));
            }
            Element::Saddle { center, radius, magnitude } => {
                let (cx, cy, r2) = (center[0], center[1], 2.0 * radius * radius);
                each(u, v, None, &|x, y| {
                    let (px, py) = (x - cx, y - cy);
                    let g = magnitude * (-(px * px + py * py) / r2).exp();
                    (g * px, -g * py)
                });
            }
            Element::Rotation { center, magnitude } => {
                let (cx, cy) = (center[0], center[1]);
                each(u, v, None, &|x, y| (-magnitude * (y - cy), magnitude * (x - cx)));
            }
            Element::Shear { center, magnitude, direction } => {
                let (dx, dy) = unit(direction);
                let (cx, cy) = (center[0], center[1]);
                each(u, v, None, &|x, y| {
                    let across = -(x - cx) * dy + (y - cy) * dx;
                    (magnitude * across * dx, magnitude * across * dy)
                });
            }
            Element::BottleneckChannel { bbox, magnitude, direction } => {
                let funnel = Funnel::new(bbox, *magnitude, unit(direction));
                each(u, v, Some(bbox), &|x, y| funnel.velocity(x, y));
            }
            Element::CounterflowBand { bbox, magnitude, direction } => {
                let (dx, dy) = unit(direction);
                let (a, c) = (-2.0 * magnitude * dx, -2.0 * magnitude * dy);
                each(u, v, Some(bbox), &|_, _| (a, c));
            }
            Element::NoisePatch { bbox, magnitude, rng_seed } => {
                // drawn sequentially in raster order of the patch so the stream is fixed
                let mut rng = ChaCha8Rng::seed_from_u64(*rng_seed);
                let m = magnitude.abs();
                for y in bbox.y..bbox.y + bbox.h {
                    for x in bbox.x..bbox.x + bbox.w {
                        let i = shape.index(x, y);
                        let (a, c) = if m > 0.0 {
                            (rng.gen_range(-m..=m), rng.gen_range(-m..=m))
                        } else {
                            (0.0, 0.0)
                        };
                        u[i] += a;
                        v[i] += c;
                    }
                }
            }
        }
    }

    fn salient_boxes(&self, shape: GridShape) -> Vec<BBox> {
        match self {
            Element::Saddle { center, radius, .. } => {
                let (cx, cy) = (center[0].round() as i64, center[1].round() as i64);
                let r = radius.ceil() as i64;
                clip_box(shape, cx - r, cy - r, cx + r + 1, cy + r + 1).into_iter().collect()
            }
            Element::BottleneckChannel { bbox, direction, .. } => {
                let n = direction[0].hypot(direction[1]);
                let along_x = (direction[0] / n).abs() >= (direction[1] / n).abs();
                let f = Funnel::new(bbox, 1.0, (direction[0] / n, direction[1] / n));
                // the converging half of the constriction, across the full channel
                let (s0, s1) = (-f.ell * FUNNEL_GT_UPSTREAM, f.ell * FUNNEL_GT_DOWNSTREAM);
                let (a, b) = if along_x {
                    let sign = direction[0].signum();
                    let (p, q) = (f.cx + sign * s0, f.cx + sign * s1);
                    (p.min(q), p.max(q))
                } else {
                    let sign = direction[1].signum();
                    let (p, q) = (f.cy + sign * s0, f.cy + sign * s1);
                    (p.min(q), p.max(q))
                };
                let (lo, hi) = (a.round() as i64, b.round() as i64 + 1);
                let bx = bbox.x as i64;
                let by = bbox.y as i64;
                let (bx1, by1) = (bx + bbox.w as i64, by + bbox.h as i64);
                let b = if along_x {
                    clip_box(shape, lo.max(bx), by, hi.min(bx1), by1)
                } else {
                    clip_box(shape, bx, lo.max(by), bx1, hi.min(by1))
                };
                b.into_iter().collect()
            }
            Element::CounterflowBand { bbox, direction, .. } => {
                let t = SHEAR_LAYER_HALF as i64;
                let (x0, y0) = (bbox.x as i64, bbox.y as i64);
                let (x1, y1) = (x0 + bbox.w as i64, y0 + bbox.h as i64);
                let boxes = if direction[0].abs() >= direction[1].abs() {
                    [clip_box(shape, x0, y0 - t, x1, y0 + t), clip_box(shape, x0, y1 - t, x1, y1 + t)]
                } else {
                    [clip_box(shape, x0 - t, y0, x0 + t, y1), clip_box(shape, x1 - t, y0, x1 + t, y1)]
                };
                boxes.into_iter().flatten().collect()
            }
            Element::NoisePatch { bbox, .. } => vec![*bbox],
            _ => Vec::new(),
        }
    }
}

/// Half-open pixel box clipped to the frame; `None` when empty.
fn clip_box(shape: GridShape, x0: i64, y0: i64, x1: i64, y1: i64) -> Option<BBox> {
    let x0 = x0.clamp(0, shape.width as i64);
    let y0 = y0.clamp(0, shape.height as i64);
    let x1 = x1.clamp(0, shape.width as i64);
    let y1 = y1.clamp(0, shape.height as i64);
    (x1 > x0 && y1 > y0).then(|| BBox::new(x0 as usize, y0 as usize, (x1 - x0) as usize, (y1 - y0) as usize))
}

/// Ground-truth extent of the constriction along the channel, in units of the
/// transition length, upstream and downstream of the throat.
const FUNNEL_GT_UPSTREAM: f64 = 2.0;
const FUNNEL_GT_DOWNSTREAM: f64 = 0.5;

/// Streamwise speed `U(s) = m (1.5 + 0.5 tanh(s / ell))`; the cross-stream component
/// `-n U'(s)` keeps the field divergence-free, so the channel narrows by `U(-inf) / U(inf)`.
struct Funnel {
    cx: f64,
    cy: f64,
    ell: f64,
    m: f64,
    d: (f64, f64),
}

impl Funnel {
    fn new(bbox: &BBox, m: f64, d: (f64, f64)) -> Self {
        let cx = bbox.x as f64 + (bbox.w as f64 - 1.0) / 2.0;
        let cy = bbox.y as f64 + (bbox.h as f64 - 1.0) / 2.0;
        let length = d.0.abs() * bbox.w as f64 + d.1.abs() * bbox.h as f64;
        Self { cx, cy, ell: length / 8.0, m, d }
    }

    fn velocity(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = self.d;
        let (px, py) = (x - self.cx, y - self.cy);
        let s = px * dx + py * dy;
        let n = -px * dy + py * dx;
        let t = (s / self.ell).tanh();
        let along = self.m * (1.5 + 0.5 * t);
        let across = -n * self.m * 0.5 * (1.0 - t * t) / self.ell;
        (along * dx - across * dy, along * dy + across * dx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: GridShape,
    #[serde(rename = "element", default)]
    pub elements: Vec<Element>,
}

impl SceneSpec {
    pub fn new(shape: GridShape, elements: Vec<Element>) -> Self {
        Self { shape, elements }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.shape.width < 2 || self.shape.height < 2 {
            return Err(SynthError::Parse(format!("shape {}x{} too small", self.shape.width, self.shape.height)));
        }
        for (index, e) in self.elements.iter().enumerate() {
            e.check(self.shape)
                .map_err(|reason| SynthError::SpecOutOfBounds { index, kind: e.kind(), reason })?;
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, SynthError> {
        let spec: Self = toml::from_str(text).map_err(|e| SynthError::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scene spec is always representable")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub salient_boxes: Vec<BBox>,
    /// The generating element when the scene is a single closed-form field.
    pub analytic_field: Option<Element>,
}

/// Names of the fixtures shipped with the crate.
pub const FIXTURES: [&str; 3] = ["bottleneck-64", "counterflow-64", "noise-injection-64"];

/// A shipped fixture by name.
pub fn fixture(name: &str) -> Option<SceneSpec> {
    let text = match name {
        "bottleneck-64" => include_str!("../fixtures/bottleneck-64.toml"),
        "counterflow-64" => include_str!("../fixtures/counterflow-64.toml"),
        "noise-injection-64" => include_str!("../fixtures/noise-injection-64.toml"),
        _ => return None,
    };
    Some(SceneSpec::from_toml_str(text).expect("shipped fixtures are valid"))
}

fn render_f64(spec: &SceneSpec) -> Result<(Vec<f64>, Vec<f64>, GroundTruth), SynthError> {
    spec.validate()?;
    let n = spec.shape.len();
    let (mut u, mut v) = (vec![0.0; n], vec![0.0; n]);
    let mut salient_boxes = Vec::new();
    for e in &spec.elements {
        e.add_to(spec.shape, &mut u, &mut v);
        salient_boxes.extend(e.salient_boxes(spec.shape));
    }
    let analytic_field = match spec.elements.as_slice() {
        [e] if !matches!(e, Element::NoisePatch { .. }) => Some(e.clone()),
        _ => None,
    };
    Ok((u, v, GroundTruth { salient_boxes, analytic_field }))
}

/// Sum of the element contributions, in element order, plus the ground truth.
pub fn render_field<T: Real>(spec: &SceneSpec) -> Result<(VectorField2<T>, GroundTruth), SynthError> {
    let (u, v, gt) = render_f64(spec)?;
    let conv = |a: Vec<f64>| a.into_iter().map(T::lit).collect();
    let field = VectorField2::new(spec.shape, conv(u), conv(v))
        .map_err(|e| SynthError::Parse(format!("non-finite field: {e}")))?;
    Ok((field, gt))
}

/// Seeded texture periodic over the frame: a sum of plane waves whose wavelengths
/// lie between 6 and 16 px, rescaled to `[0.05, 0.95]` on the pixel grid.
#[derive(Debug, Clone)]
pub struct Texture {
    width: f64,
    height: f64,
    waves: Vec<(f64, f64, f64)>,
    scale: f64,
}

const TEXTURE_WAVES: usize = 32;
const TEXTURE_MIN_WAVELENGTH: f64 = 6.0;
const TEXTURE_MAX_WAVELENGTH: f64 = 16.0;

impl Texture {
    pub fn new(shape: GridShape, seed: u64) -> Self {
        let (w, h) = (shape.width as f64, shape.height as f64);
        let mut candidates = Vec::new();
        let kx_max = (w / TEXTURE_MIN_WAVELENGTH).floor() as i64;
        let ky_max = (h / TEXTURE_MIN_WAVELENGTH).floor() as i64;
        for ky in 0..=ky_max {
            for kx in -kx_max..=kx_max {
                if ky == 0 && kx <= 0 {
                    continue;
                }
                let f = ((kx as f64 / w).powi(2) + (ky as f64 / h).powi(2)).sqrt();
                let wl = 1.0 / f;
                if (TEXTURE_MIN_WAVELENGTH..=TEXTURE_MAX_WAVELENGTH).contains(&wl) {
                    candidates.push((kx, ky));
                }
            }
        }
        if candidates.is_empty() {
            candidates.push((1, 0));
            candidates.push((0, 1));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves: Vec<(f64, f64, f64)> = (0..TEXTURE_WAVES)
            .map(|_| {
                let (kx, ky) = candidates[rng.gen_range(0..candidates.len())];
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                (kx as f64, ky as f64, phase)
            })
            .collect();
        let mut t = Self { width: w, height: h, waves, scale: 1.0 };
        let peak = (0..shape.len())
            .map(|i| {
                let (x, y) = shape.coords(i);
                t.raw(x as f64, y as f64).abs()
            })
            .fold(0.0, f64::max);
        t.scale = if peak > 0.0 { 0.45 / peak } else { 0.0 };
        t
    }

    fn raw(&self, x: f64, y: f64) -> f64 {
        let tau = std::f64::consts::TAU;
        self.waves
            .iter()
            .map(|&(kx, ky, p)| (tau * (kx * x / self.width + ky * y / self.height) + p).cos())
            .sum()
    }

    pub fn at(&self, x: f64, y: f64) -> f64 {
        (0.5 + self.scale * self.raw(x, y)).clamp(0.0, 1.0)
    }
}

/// Sub-frame step used when warping the texture.
const WARP_STEP: f64 = 0.25;

/// `n_frames` frames of a seeded texture carried by the scene field: frame `k` samples
/// the texture at each pixel's position `k` frames back along the (steady) field.
pub fn render_frames<T: Real>(spec: &SceneSpec, n_frames: usize, texture_seed: u64) -> Result<Vec<Frame<T>>, SynthError> {
    if n_frames < 2 {
        return Err(SynthError::TooFewFrames(n_frames));
    }
    let (u, v, _) = render_f64(spec)?;
    let shape = spec.shape;
    let field = VectorField2::new(shape, u, v).map_err(|e| SynthError::Parse(e.to_string()))?;
    let texture = Texture::new(shape, texture_seed);
    let back = |x: f64, y: f64| {
        let (a, b) = field.sample(x, y, BoundaryPolicy::Clamp);
        (-a, -b)
    };
    let steps = (1.0 / WARP_STEP) as usize;
    let mut pos: Vec<(f64, f64)> = (0..shape.len())
        .map(|i| {
            let (x, y) = shape.coords(i);
            (x as f64, y as f64)
        })
        .collect();
    let mut frames = Vec::with_capacity(n_frames);
    for k in 0..n_frames {
        if k > 0 {
            pos.par_iter_mut().for_each(|p| *p = rk4(p.0, p.1, WARP_STEP, steps, back));
        }
        let vals = pos.par_iter().map(|&(x, y)| T::lit(texture.at(x, y))).collect();
        frames.push(Frame::new(shape, vals).expect("texture lies in [0, 1]"));
    }
    Ok(frames)
}
