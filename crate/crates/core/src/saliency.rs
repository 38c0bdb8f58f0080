//! Magnification of unstable responses, two-stage segmentation and region extraction.
//!
//! Flow: pick a threshold `alpha` from the exponent map, magnify (`beta * phi` at or above
//! `alpha`, `(1 - beta) * phi` below), then combine a coarse global threshold with a fine
//! windowed one and label the connected result.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{GridShape, ScalarField};
use crate::scalar::{CompensatedSum, Real};
use crate::stability::StabilityField;

/// Minimum `max - min` spread for data-driven thresholds.
pub const DEGENERATE_RANGE: f64 = 1e-12;
/// Minimum margin above the window mean for the local stage to fire.
pub const LOCAL_MARGIN: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SaliencyError {
    #[error("exponent map is flat (range {range:e}); no data-driven threshold exists")]
    DegenerateField { range: f64 },
    #[error("invalid saliency config: {0}")]
    InvalidConfig(String),
    #[error("mask is {mask:?} but exponent map is {phi:?}")]
    ShapeMismatch { mask: GridShape, phi: GridShape },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaMode {
    Fixed,
    #[default]
    Percentile,
    Otsu,
}

impl std::str::FromStr for AlphaMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fixed" => Ok(Self::Fixed),
            "percentile" => Ok(Self::Percentile),
            "otsu" => Ok(Self::Otsu),
            other => Err(format!("unknown alpha mode '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombineMode {
    #[default]
    Union,
    Intersection,
}

impl std::str::FromStr for CombineMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "union" => Ok(Self::Union),
            "intersection" => Ok(Self::Intersection),
            other => Err(format!("unknown combine mode '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct SaliencyConfig<T> {
    /// Magnification factor, in `(0.5, 1]`.
    pub beta: T,
    pub alpha_mode: AlphaMode,
    /// Fixed threshold, or the percentile in `(0, 100)` when `alpha_mode` is percentile.
    pub alpha_value: T,
    /// Threshold used when the exponent map is too flat for percentile/Otsu selection.
    pub fallback_alpha: T,
    /// Odd side length of the local statistics window, in seed-grid cells.
    pub local_window: usize,
    /// Local stage fires above `mean + local_k * stddev`.
    pub local_k: T,
    pub min_region_area: usize,
    pub combine_mode: CombineMode,
}

impl<T: Real> Default for SaliencyConfig<T> {
    fn default() -> Self {
        Self {
            beta: T::lit(0.8),
            alpha_mode: AlphaMode::Percentile,
            alpha_value: T::lit(90.0),
            fallback_alpha: T::lit(0.1),
            local_window: 15,
            local_k: T::lit(2.0),
            min_region_area: 25,
            combine_mode: CombineMode::Union,
        }
    }
}

impl<T: Real> SaliencyConfig<T> {
    pub fn validate(&self) -> Result<(), SaliencyError> {
        let bad = |m: String| Err(SaliencyError::InvalidConfig(m));
        if !(self.beta > T::lit(0.5) && self.beta <= T::one()) {
            return bad(format!("beta must lie in (0.5, 1], got {}", self.beta));
        }
        if !self.alpha_value.is_finite() || !self.fallback_alpha.is_finite() {
            return bad("alpha values must be finite".into());
        }
        if self.alpha_mode == AlphaMode::Percentile
            && !(self.alpha_value > T::zero() && self.alpha_value < T::lit(100.0))
        {
            return bad(format!("percentile must lie in (0, 100), got {}", self.alpha_value));
        }
        if self.local_window < 3 || self.local_window % 2 == 0 {
            return bad(format!("local_window must be odd and >= 3, got {}", self.local_window));
        }
        if !self.local_k.is_finite() {
            return bad("local_k must be finite".into());
        }
        if self.min_region_area == 0 {
            return bad("min_region_area must be >= 1".into());
        }
        Ok(())
    }
}

/// Piecewise magnification: `beta * phi` where `phi >= alpha`, `(1 - beta) * phi` elsewhere.
pub fn magnify<T: Real>(phi: &StabilityField<T>, cfg: &SaliencyConfig<T>, alpha: T) -> ScalarField<T> {
    let beta = cfg.beta;
    let damp = T::one() - beta;
    let values = phi
        .values()
        .par_iter()
        .map(|&p| if p >= alpha { beta * p } else { damp * p })
        .collect();
    ScalarField::new(phi.shape(), values).expect("scaling finite values stays finite")
}

fn checked_range<T: Real>(values: &[T]) -> Result<(T, T), SaliencyError> {
    let (lo, hi) = values
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = (hi - lo).to_f64_lossy();
    if !(range >= DEGENERATE_RANGE) {
        return Err(SaliencyError::DegenerateField { range });
    }
    Ok((lo, hi))
}

/// `p`-th percentile (0..100) with linear interpolation between order statistics.
pub fn percentile<T: Real>(values: &[T], p: T) -> T {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let rank = (p / T::lit(100.0)) * T::lit((sorted.len() - 1) as f64);
    let lo = rank.floor().to_usize().unwrap_or(0).min(sorted.len() - 1);
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = rank - T::lit(lo as f64);
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub const OTSU_BINS: usize = 256;

/// Otsu threshold from a 256-bin histogram spanning `[min, max]`.
///
/// Class statistics use the actual sample sums per bin, so the between-class variance of
/// each candidate equals that of the raw split at the returned threshold.
pub fn otsu_threshold<T: Real>(values: &[T]) -> Result<T, SaliencyError> {
    let (lo, hi) = checked_range(values)?;
    let width = (hi - lo) / T::lit(OTSU_BINS as f64);
    let mut counts = [0usize; OTSU_BINS];
    let mut sums = [0f64; OTSU_BINS];
    for &v in values {
        let b = otsu_bin(v, lo, width);
        counts[b] += 1;
        sums[b] += v.to_f64_lossy();
    }
    let n = values.len() as f64;
    let total: f64 = sums.iter().sum();
    let (mut n0, mut s0) = (0usize, 0f64);
    let mut best = (f64::NEG_INFINITY, 0usize);
    for k in 0..OTSU_BINS - 1 {
        n0 += counts[k];
        s0 += sums[k];
        let n1 = values.len() - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let (w0, w1) = (n0 as f64 / n, n1 as f64 / n);
        let (m0, m1) = (s0 / n0 as f64, (total - s0) / n1 as f64);
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best.0 {
            best = (between, k);
        }
    }
    Ok(lo + T::lit((best.1 + 1) as f64) * width)
}

#[inline]
fn otsu_bin<T: Real>(v: T, lo: T, width: T) -> usize {
    ((v - lo) / width).floor().to_usize().unwrap_or(0).min(OTSU_BINS - 1)
}

/// Threshold `alpha` for the magnification step, chosen per `cfg.alpha_mode`.
pub fn select_alpha<T: Real>(phi: &StabilityField<T>, cfg: &SaliencyConfig<T>) -> Result<T, SaliencyError> {
    match cfg.alpha_mode {
        AlphaMode::Fixed => Ok(cfg.alpha_value),
        AlphaMode::Percentile => {
            checked_range(phi.values())?;
            Ok(percentile(phi.values(), cfg.alpha_value))
        }
        AlphaMode::Otsu => otsu_threshold(phi.values()),
    }
}

/// [`select_alpha`], falling back to `cfg.fallback_alpha` on a flat map. The flag reports
/// whether the fallback was taken.
pub fn select_alpha_or_fallback<T: Real>(
    phi: &StabilityField<T>,
    cfg: &SaliencyConfig<T>,
) -> Result<(T, bool), SaliencyError> {
    match select_alpha(phi, cfg) {
        Ok(a) => Ok((a, false)),
        Err(SaliencyError::DegenerateField { .. }) => Ok((cfg.fallback_alpha, true)),
        Err(e) => Err(e),
    }
}

/// Coarse stage: `phi_hat >= beta * alpha`, the magnified image of the threshold.
pub fn global_mask<T: Real>(phi_hat: &ScalarField<T>, cfg: &SaliencyConfig<T>, alpha: T) -> Vec<bool> {
    let cut = cfg.beta * alpha;
    phi_hat.values().par_iter().map(|&v| v >= cut).collect()
}

/// Fine stage: `phi_hat > mean + max(local_k * stddev, LOCAL_MARGIN)` over a
/// `local_window` square clipped to the grid.
pub fn local_mask<T: Real>(phi_hat: &ScalarField<T>, cfg: &SaliencyConfig<T>) -> Vec<bool> {
    let GridShape { width, height } = phi_hat.shape();
    let r = cfg.local_window / 2;
    let vals = phi_hat.values();
    let margin = T::lit(LOCAL_MARGIN);
    (0..width * height)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % width, i / width);
            let (x0, x1) = (x.saturating_sub(r), (x + r).min(width - 1));
            let (y0, y1) = (y.saturating_sub(r), (y + r).min(height - 1));
            let n = T::lit(((x1 - x0 + 1) * (y1 - y0 + 1)) as f64);
            let rows = || (y0..=y1).flat_map(|yy| vals[yy * width + x0..=yy * width + x1].iter());
            let mean = rows().fold(T::zero(), |a, &v| a + v) / n;
            let var = rows().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
            let std = var.max(T::zero()).sqrt();
            vals[i] > mean + (cfg.local_k * std).max(margin)
        })
        .collect()
}

/// Two-stage segmentation of the magnified map into a 0/1 mask.
pub fn segment<T: Real>(phi_hat: &ScalarField<T>, cfg: &SaliencyConfig<T>, alpha: T) -> ScalarField<T> {
    let global = global_mask(phi_hat, cfg, alpha);
    let local = local_mask(phi_hat, cfg);
    let values = global
        .iter()
        .zip(&local)
        .map(|(&g, &l)| {
            let on = match cfg.combine_mode {
                CombineMode::Union => g || l,
                CombineMode::Intersection => g && l,
            };
            if on { T::one() } else { T::zero() }
        })
        .collect();
    ScalarField::new(phi_hat.shape(), values).expect("mask is finite")
}

/// Inclusive pixel box `(x, y, w, h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl From<[usize; 4]> for BBox {
    fn from([x, y, w, h]: [usize; 4]) -> Self {
        Self { x, y, w, h }
    }
}

impl From<BBox> for [usize; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn intersection(&self, o: &BBox) -> usize {
        let x0 = self.x.max(o.x);
        let y0 = self.y.max(o.y);
        let x1 = (self.x + self.w).min(o.x + o.w);
        let y1 = (self.y + self.h).min(o.y + o.h);
        x1.saturating_sub(x0) * y1.saturating_sub(y0)
    }

    /// Intersection over union of the two boxes.
    pub fn iou(&self, o: &BBox) -> f64 {
        let inter = self.intersection(o);
        let union = self.area() + o.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub id: u32,
    pub area: usize,
    pub bbox: BBox,
    pub centroid: (f64, f64),
    pub mean_phi: f64,
    pub max_phi: f64,
}

/// Labelled salient regions. Label 0 is background; ids run `1..=N` in order of
/// decreasing `mean_phi`.
#[derive(Debug, Clone, PartialEq)]
pub struct SalientRegionSet {
    pub shape: GridShape,
    pub labels: Vec<u32>,
    pub regions: Vec<Region>,
}

impl SalientRegionSet {
    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn top(&self) -> Option<&Region> {
        self.regions.first()
    }
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self { parent: (0..n as u32).collect() }
    }

    fn find(&mut self, mut a: u32) -> u32 {
        while self.parent[a as usize] != a {
            let p = self.parent[a as usize];
            self.parent[a as usize] = self.parent[p as usize];
            a = p;
        }
        a
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        // smaller root wins so the representative is the first pixel in raster order
        if ra < rb {
            self.parent[rb as usize] = ra;
        } else if rb < ra {
            self.parent[ra as usize] = rb;
        }
    }
}

/// 8-connected components of `mask`, indexed by the raster index of their first pixel.
/// Returns per-pixel root (or `u32::MAX` for background).
pub(crate) fn label_components(shape: GridShape, on: &[bool]) -> Vec<u32> {
    let GridShape { width, height } = shape;
    let mut ds = DisjointSet::new(on.len());
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if !on[i] {
                continue;
            }
            // already-visited neighbours: W, NW, N, NE
            let mut link = |j: usize| {
                if on[j] {
                    ds.union(i as u32, j as u32);
                }
            };
            if x > 0 {
                link(i - 1);
            }
            if y > 0 {
                if x > 0 {
                    link(i - width - 1);
                }
                link(i - width);
                if x + 1 < width {
                    link(i - width + 1);
                }
            }
        }
    }
    (0..on.len())
        .map(|i| if on[i] { ds.find(i as u32) } else { u32::MAX })
        .collect()
}

/// Connected regions of `mask` (8-connectivity), small ones dropped, described by raw `phi`.
pub fn extract_regions<T: Real>(
    mask: &ScalarField<T>,
    phi: &StabilityField<T>,
    cfg: &SaliencyConfig<T>,
) -> Result<SalientRegionSet, SaliencyError> {
    let shape = mask.shape();
    if shape != phi.shape() {
        return Err(SaliencyError::ShapeMismatch { mask: shape, phi: phi.shape() });
    }
    let on: Vec<bool> = mask.values().iter().map(|&m| m > T::lit(0.5)).collect();
    let roots = label_components(shape, &on);

    struct Acc {
        root: u32,
        area: usize,
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
        sx: f64,
        sy: f64,
        sphi: CompensatedSum<f64>,
        max_phi: f64,
    }

    let mut slot = std::collections::HashMap::new();
    let mut accs: Vec<Acc> = Vec::new();
    for (i, &root) in roots.iter().enumerate() {
        if root == u32::MAX {
            continue;
        }
        let (x, y) = shape.coords(i);
        let p = phi.values()[i].to_f64_lossy();
        let k = *slot.entry(root).or_insert_with(|| {
            accs.push(Acc {
                root,
                area: 0,
                x0: x,
                y0: y,
                x1: x,
                y1: y,
                sx: 0.0,
                sy: 0.0,
                sphi: CompensatedSum::new(),
                max_phi: f64::NEG_INFINITY,
            });
            accs.len() - 1
        });
        let a = &mut accs[k];
        a.area += 1;
        a.x0 = a.x0.min(x);
        a.x1 = a.x1.max(x);
        a.y0 = a.y0.min(y);
        a.y1 = a.y1.max(y);
        a.sx += x as f64;
        a.sy += y as f64;
        a.sphi.add(p);
        a.max_phi = a.max_phi.max(p);
    }

    let mut kept: Vec<(u32, Region)> = accs
        .into_iter()
        .filter(|a| a.area >= cfg.min_region_area)
        .map(|a| {
            let n = a.area as f64;
            let region = Region {
                id: 0,
                area: a.area,
                bbox: BBox::new(a.x0, a.y0, a.x1 - a.x0 + 1, a.y1 - a.y0 + 1),
                centroid: (a.sx / n, a.sy / n),
                mean_phi: a.sphi.value() / n,
                max_phi: a.max_phi,
            };
            (a.root, region)
        })
        .collect();
    // roots are unique raster positions, so the tie-break makes the order total
    kept.sort_by(|(ra, a), (rb, b)| b.mean_phi.total_cmp(&a.mean_phi).then(ra.cmp(rb)));

    let mut relabel = std::collections::HashMap::new();
    let regions = kept
        .into_iter()
        .enumerate()
        .map(|(k, (root, mut r))| {
            r.id = k as u32 + 1;
            relabel.insert(root, r.id);
            r
        })
        .collect();
    let labels = roots
        .iter()
        .map(|r| relabel.get(r).copied().unwrap_or(0))
        .collect();
    Ok(SalientRegionSet { shape, labels, regions })
}

/// Every intermediate of one saliency pass.
#[derive(Debug, Clone)]
pub struct Detection<T> {
    pub alpha: T,
    /// True when the map was flat and `fallback_alpha` was used.
    pub alpha_fallback: bool,
    pub phi_hat: ScalarField<T>,
    pub mask: ScalarField<T>,
    pub regions: SalientRegionSet,
}

/// `select_alpha -> magnify -> segment -> extract_regions`.
pub fn detect<T: Real>(phi: &StabilityField<T>, cfg: &SaliencyConfig<T>) -> Result<Detection<T>, SaliencyError> {
    cfg.validate()?;
    let (alpha, alpha_fallback) = select_alpha_or_fallback(phi, cfg)?;
    let phi_hat = magnify(phi, cfg, alpha);
    let mask = segment(&phi_hat, cfg, alpha);
    let regions = extract_regions(&mask, phi, cfg)?;
    Ok(Detection { alpha, alpha_fallback, phi_hat, mask, regions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shape(w: usize, h: usize) -> GridShape {
        GridShape::new(w, h).unwrap()
    }

    fn stab(shape: GridShape, values: Vec<f64>) -> StabilityField<f64> {
        StabilityField::new(ScalarField::new(shape, values).unwrap(), 1.0)
    }

    fn cfg() -> SaliencyConfig<f64> {
        SaliencyConfig::default()
    }

    #[test]
    fn default_config_is_valid() {
        cfg().validate().unwrap();
        let mut c = cfg();
        c.beta = 0.5;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.local_window = 4;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.alpha_value = 100.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn magnify_examples() {
        let c = cfg();
        let phi = stab(shape(3, 1 + 1), vec![0.6, 0.4, 0.5, 0.6, 0.4, 0.5]);
        let hat = magnify(&phi, &c, 0.5);
        let v = hat.values();
        assert!((v[0] - 0.48).abs() < 1e-15);
        assert!((v[1] - 0.08).abs() < 1e-15);
        assert!((v[2] - 0.40).abs() < 1e-15);
    }

    #[test]
    fn alpha_fixed_and_percentile() {
        let phi = stab(shape(5, 2), vec![0.0, 1.0, 2.0, 3.0, 4.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
        let mut c = cfg();
        c.alpha_mode = AlphaMode::Fixed;
        c.alpha_value = 0.3;
        assert_eq!(select_alpha(&phi, &c).unwrap(), 0.3);
        assert_eq!(percentile(&[0.0, 1.0, 2.0, 3.0, 4.0], 50.0), 2.0);
        assert_eq!(percentile(&[4.0, 0.0, 3.0, 1.0], 50.0), 2.0);
        assert!((percentile::<f64>(&[0.0, 10.0], 90.0) - 9.0).abs() < 1e-12);
    }

    #[test]
    fn flat_field_has_no_data_driven_threshold() {
        let phi = stab(shape(4, 4), vec![0.25; 16]);
        for mode in [AlphaMode::Percentile, AlphaMode::Otsu] {
            let c = SaliencyConfig { alpha_mode: mode, ..cfg() };
            assert!(matches!(select_alpha(&phi, &c), Err(SaliencyError::DegenerateField { .. })));
            assert_eq!(select_alpha_or_fallback(&phi, &c).unwrap(), (c.fallback_alpha, true));
        }
    }

    /// Exhaustive search over the 255 interior bin edges on the raw samples.
    fn otsu_oracle(values: &[f64]) -> (f64, Vec<(f64, f64)>) {
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w = (hi - lo) / 256.0;
        let mut cands = Vec::new();
        for k in 1..256 {
            let t = lo + k as f64 * w;
            let (a, b): (Vec<f64>, Vec<f64>) = values.iter().partition(|&&v| v < t);
            if a.is_empty() || b.is_empty() {
                continue;
            }
            let n = values.len() as f64;
            let ma = a.iter().sum::<f64>() / a.len() as f64;
            let mb = b.iter().sum::<f64>() / b.len() as f64;
            let var = (a.len() as f64 / n) * (b.len() as f64 / n) * (ma - mb).powi(2);
            cands.push((t, var));
        }
        let best = cands.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
        (best, cands)
    }

    #[test]
    fn otsu_separates_bimodal_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let values: Vec<f64> = (0..400)
            .map(|i| if i % 2 == 0 { 0.1 } else { 0.9 } + rng.gen_range(-0.02..0.02))
            .collect();
        let phi = stab(shape(20, 20), values.clone());
        let c = SaliencyConfig { alpha_mode: AlphaMode::Otsu, ..cfg() };
        let t: f64 = select_alpha(&phi, &c).unwrap();
        assert!(t > 0.12 && t < 0.88, "threshold {t}");
        let (best, cands) = otsu_oracle(&values);
        let (_, at_t) = cands
            .iter()
            .min_by(|a, b| (a.0 - t).abs().total_cmp(&(b.0 - t).abs()))
            .unwrap();
        assert!((at_t - best).abs() <= 1e-12 * best);
    }

    #[test]
    fn constant_field_yields_empty_mask() {
        let hat = ScalarField::constant(shape(30, 30), 0.7);
        let mut c = cfg();
        c.alpha_mode = AlphaMode::Fixed;
        // alpha above the plateau: global stage empty; local stage has no contrast
        let mask = segment(&hat, &c, 1.0);
        assert!(mask.values().iter().all(|&m| m == 0.0));
        assert!(local_mask(&hat, &c).iter().all(|&m| !m));
    }

    fn plateau(s: GridShape, blocks: &[(usize, usize, usize, f64)]) -> ScalarField<f64> {
        ScalarField::from_fn(s, |x, y| {
            let (x, y) = (x as usize, y as usize);
            blocks
                .iter()
                .find(|&&(bx, by, n, _)| x >= bx && x < bx + n && y >= by && y < by + n)
                .map_or(0.0, |b| b.3)
        })
    }

    /// Direct evaluation of both stage definitions, pixel by pixel.
    fn stage_oracle(hat: &ScalarField<f64>, c: &SaliencyConfig<f64>, alpha: f64) -> (Vec<bool>, Vec<bool>) {
        let GridShape { width, height } = hat.shape();
        let r = (c.local_window / 2) as i64;
        let mut g = Vec::new();
        let mut l = Vec::new();
        for y in 0..height as i64 {
            for x in 0..width as i64 {
                let v = hat.get(x as usize, y as usize);
                g.push(v >= c.beta * alpha);
                let mut win = Vec::new();
                for yy in y - r..=y + r {
                    for xx in x - r..=x + r {
                        if xx >= 0 && yy >= 0 && xx < width as i64 && yy < height as i64 {
                            win.push(hat.get(xx as usize, yy as usize));
                        }
                    }
                }
                let m = win.iter().sum::<f64>() / win.len() as f64;
                let s = (win.iter().map(|w| (w - m).powi(2)).sum::<f64>() / win.len() as f64).sqrt();
                l.push(v > m + (c.local_k * s).max(1e-9));
            }
        }
        (g, l)
    }

    #[test]
    fn single_plateau_is_segmented_exactly() {
        let s = shape(40, 40);
        let hat = plateau(s, &[(12, 15, 10, 1.0)]);
        let c = SaliencyConfig { alpha_mode: AlphaMode::Fixed, ..cfg() };
        let mask = segment(&hat, &c, 0.5);
        let (g, l) = stage_oracle(&hat, &c, 0.5);
        for i in 0..s.len() {
            let (x, y) = s.coords(i);
            let inside = (12..22).contains(&x) && (15..25).contains(&y);
            assert_eq!(mask.values()[i] == 1.0, inside, "pixel {x},{y}");
            assert_eq!(mask.values()[i] == 1.0, g[i] || l[i]);
        }
    }

    #[test]
    fn combine_modes_on_two_plateaus() {
        let s = shape(64, 32);
        let hat = plateau(s, &[(6, 11, 10, 1.0), (44, 11, 10, 0.6)]);
        let c = SaliencyConfig { alpha_mode: AlphaMode::Fixed, local_k: 1.0, ..cfg() };
        let alpha = 0.8; // beta * alpha = 0.64 sits between the plateaus
        let (g, l) = stage_oracle(&hat, &c, alpha);
        let union = segment(&hat, &c, alpha);
        let inter = segment(&hat, &SaliencyConfig { combine_mode: CombineMode::Intersection, ..c }, alpha);
        for i in 0..s.len() {
            let v = hat.values()[i];
            assert_eq!(union.values()[i] == 1.0, v > 0.0, "union at {i}");
            assert_eq!(inter.values()[i] == 1.0, v == 1.0, "intersection at {i}");
            assert_eq!(union.values()[i] == 1.0, g[i] || l[i]);
            assert_eq!(inter.values()[i] == 1.0, g[i] && l[i]);
        }
    }

    fn mask_from(s: GridShape, on: &[(usize, usize)]) -> ScalarField<f64> {
        let mut v = vec![0.0; s.len()];
        for &(x, y) in on {
            v[s.index(x, y)] = 1.0;
        }
        ScalarField::new(s, v).unwrap()
    }

    #[test]
    fn empty_mask_gives_no_regions() {
        let s = shape(8, 8);
        let set = extract_regions(&ScalarField::constant(s, 0.0), &stab(s, vec![1.0; 64]), &cfg()).unwrap();
        assert!(set.is_empty());
        assert!(set.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn two_blocks_two_regions() {
        let s = shape(12, 8);
        let mut on = Vec::new();
        for y in 1..4 {
            for x in 1..4 {
                on.push((x, y));
                on.push((x + 6, y + 3));
            }
        }
        let phi: Vec<f64> = (0..s.len()).map(|i| if s.coords(i).0 > 5 { 2.0 } else { 1.0 }).collect();
        let c = SaliencyConfig { min_region_area: 1, ..cfg() };
        let set = extract_regions(&mask_from(s, &on), &stab(s, phi), &c).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.regions[0].area, 9);
        assert_eq!(set.regions[1].area, 9);
        // ordered by mean phi: the right block first
        assert_eq!(set.regions[0].bbox, BBox::new(7, 4, 3, 3));
        assert_eq!(set.regions[0].mean_phi, 2.0);
        assert_eq!(set.regions[0].centroid, (8.0, 5.0));
        assert_eq!(set.labels[s.index(8, 5)], 1);
        assert_eq!(set.labels[s.index(2, 2)], 2);
    }

    #[test]
    fn small_regions_are_dropped() {
        let s = shape(10, 10);
        let on: Vec<_> = (0..5).map(|x| (x, 0)).chain([(8, 8)]).collect();
        let c = SaliencyConfig { min_region_area: 2, ..cfg() };
        let set = extract_regions(&mask_from(s, &on), &stab(s, vec![0.0; 100]), &c).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.labels[s.index(8, 8)], 0);
    }

    /// Stack-based flood fill, the reference labelling.
    fn flood_fill(s: GridShape, on: &[bool], eight: bool) -> Vec<usize> {
        let mut label = vec![0usize; on.len()];
        let mut next = 0;
        for start in 0..on.len() {
            if !on[start] || label[start] != 0 {
                continue;
            }
            next += 1;
            let mut stack = vec![start];
            label[start] = next;
            while let Some(i) = stack.pop() {
                let (x, y) = (s.coords(i).0 as i64, s.coords(i).1 as i64);
                for dy in -1..=1i64 {
                    for dx in -1..=1i64 {
                        if (dx == 0 && dy == 0) || (!eight && dx != 0 && dy != 0) {
                            continue;
                        }
                        let (nx, ny) = (x + dx, y + dy);
                        if nx < 0 || ny < 0 || nx >= s.width as i64 || ny >= s.height as i64 {
                            continue;
                        }
                        let j = s.index(nx as usize, ny as usize);
                        if on[j] && label[j] == 0 {
                            label[j] = next;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        label
    }

    /// Same partition up to relabelling.
    fn same_partition(a: &[usize], b: &[u32]) -> bool {
        let mut fwd = std::collections::HashMap::new();
        let mut back = std::collections::HashMap::new();
        a.iter().zip(b).all(|(&x, &y)| {
            if (x == 0) != (y == 0) {
                return false;
            }
            *fwd.entry(x).or_insert(y) == y && *back.entry(y).or_insert(x) == x
        })
    }

    #[test]
    fn diagonal_l_shape_is_one_region() {
        let s = shape(6, 6);
        let on = [(0, 0), (1, 1), (2, 2), (2, 3), (2, 4), (3, 4)];
        let c = SaliencyConfig { min_region_area: 1, ..cfg() };
        let set = extract_regions(&mask_from(s, &on), &stab(s, vec![0.0; 36]), &c).unwrap();
        assert_eq!(set.len(), 1);
        let bits: Vec<bool> = mask_from(s, &on).values().iter().map(|&v| v == 1.0).collect();
        let four = flood_fill(s, &bits, false);
        assert_eq!(four.iter().max(), Some(&3));
        assert!(same_partition(&flood_fill(s, &bits, true), &set.labels));
    }

    #[test]
    fn labelling_matches_flood_fill_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let c = SaliencyConfig { min_region_area: 1, ..cfg() };
        for _ in 0..1000 {
            let s = shape(rng.gen_range(2..24), rng.gen_range(2..24));
            let density = rng.gen_range(0.1..0.7);
            let bits: Vec<bool> = (0..s.len()).map(|_| rng.gen_bool(density)).collect();
            let mask = ScalarField::new(s, bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).unwrap();
            let phi = stab(s, (0..s.len()).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let set = extract_regions(&mask, &phi, &c).unwrap();
            let oracle = flood_fill(s, &bits, true);
            assert!(same_partition(&oracle, &set.labels));
            assert_eq!(set.len(), oracle.iter().copied().max().unwrap_or(0));
            let total: usize = set.regions.iter().map(|r| r.area).sum();
            assert_eq!(total, set.labels.iter().filter(|&&l| l != 0).count());
            assert!(set.regions.windows(2).all(|w| w[0].mean_phi >= w[1].mean_phi));
            assert!(set.regions.iter().enumerate().all(|(k, r)| r.id as usize == k + 1));
        }
    }

    #[test]
    fn iou_of_boxes() {
        let a = BBox::new(0, 0, 10, 10);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BBox::new(20, 20, 5, 5)), 0.0);
        assert!((a.iou(&BBox::new(5, 0, 10, 10)) - 50.0 / 150.0).abs() < 1e-15);
    }

    #[test]
    fn region_json_layout() {
        let r = Region {
            id: 1,
            area: 4,
            bbox: BBox::new(1, 2, 2, 2),
            centroid: (1.5, 2.5),
            mean_phi: 0.25,
            max_phi: 0.5,
        };
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(
            s,
            r#"{"id":1,"area":4,"bbox":[1,2,2,2],"centroid":[1.5,2.5],"mean_phi":0.25,"max_phi":0.5}"#
        );
    }

    proptest! {
        #[test]
        fn amplified_branch_dominates(c in 1e-6f64..10.0, beta in 0.500001f64..=1.0) {
            prop_assert!(beta * c > (1.0 - beta) * c);
        }

        #[test]
        fn magnify_monotone_within_branch(
            a in -5.0f64..5.0, b in -5.0f64..5.0, alpha in -2.0f64..2.0, beta in 0.51f64..1.0,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let c = SaliencyConfig { beta, ..cfg() };
            let hat = magnify(&stab(shape(2, 1 + 1), vec![lo, hi, 0.0, 0.0]), &c, alpha);
            if (lo >= alpha) == (hi >= alpha) {
                prop_assert!(hat.values()[0] <= hat.values()[1]);
            }
        }

        #[test]
        fn global_stage_recovers_threshold_decision(
            seed in any::<u64>(), alpha in 0.01f64..2.0, beta in 0.51f64..=1.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = shape(16, 16);
            let phi: Vec<f64> = (0..256).map(|_| rng.gen_range(-1.0..3.0)).collect();
            let c = SaliencyConfig { beta, ..cfg() };
            let field = stab(s, phi.clone());
            let g = global_mask(&magnify(&field, &c, alpha), &c, alpha);
            for (i, &p) in phi.iter().enumerate() {
                prop_assert_eq!(g[i], p >= alpha);
            }
        }
    }
}
