//! Dense 2-D/3-D array types and the small numeric kernels shared by the
//! metrics, attribution and sanity modules.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("array must have at least one element (got {height}x{width})")]
    Empty { height: usize, width: usize },
    #[error("expected {expected} values for shape, got {found}")]
    Length { expected: usize, found: usize },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: (usize, usize), right: (usize, usize) },
    #[error("need at least {needed} pixels, got {found}")]
    TooSmall { needed: usize, found: usize },
    #[error("invalid resize target {height}x{width}")]
    BadTarget { height: usize, width: usize },
}

fn check_finite(values: &[f64]) -> Result<(), TensorError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(TensorError::NonFinite(i)),
        None => Ok(()),
    }
}

/// Signed per-pixel attribution map, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Heatmap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self, TensorError> {
        if height == 0 || width == 0 {
            return Err(TensorError::Empty { height, width });
        }
        if values.len() != height * width {
            return Err(TensorError::Length { expected: height * width, found: values.len() });
        }
        check_finite(&values)?;
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self, TensorError> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self, TensorError> {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self::new(height, width, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Applies `f` element-wise. Panics if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Heatmap {
        let values: Vec<f64> = self.values.iter().map(|&v| f(v)).collect();
        assert!(values.iter().all(|v| v.is_finite()), "map produced a non-finite value");
        Heatmap { height: self.height, width: self.width, values }
    }

    /// `max(R, 0)` per pixel.
    pub fn positive_part(&self) -> Heatmap {
        self.map(|v| v.max(0.0))
    }

    /// `max(-R, 0)` per pixel.
    pub fn negative_part(&self) -> Heatmap {
        self.map(|v| (-v).max(0.0))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_constant(&self) -> bool {
        let first = self.values[0];
        self.values.iter().all(|&v| v == first)
    }

    fn ensure_same_shape(&self, other: &Heatmap) -> Result<(), TensorError> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch { left: self.shape(), right: other.shape() });
        }
        Ok(())
    }
}

/// Ground-truth region. `true` marks a pixel inside the annotated region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self, TensorError> {
        if height == 0 || width == 0 {
            return Err(TensorError::Empty { height, width });
        }
        if values.len() != height * width {
            return Err(TensorError::Length { expected: height * width, found: values.len() });
        }
        Ok(Self { height, width, values })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self, TensorError> {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self::new(height, width, values)
    }

    /// Thresholds any nonzero value to inside.
    pub fn from_threshold(height: usize, width: usize, values: &[f64]) -> Result<Self, TensorError> {
        check_finite(values)?;
        Self::new(height, width, values.iter().map(|&v| v != 0.0).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.values[row * self.width + col]
    }

    /// Number of pixels inside the region (`|GT|`).
    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| !v).collect(),
        }
    }

    pub fn to_heatmap(&self) -> Heatmap {
        Heatmap {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Channel-major (C, H, W) image in normalized input units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ImageTensor {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        values: Vec<f64>,
    ) -> Result<Self, TensorError> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(TensorError::Empty { height, width });
        }
        let expected = channels * height * width;
        if values.len() != expected {
            return Err(TensorError::Length { expected, found: values.len() });
        }
        check_finite(&values)?;
        Ok(Self { channels, height, width, values })
    }

    pub fn filled(
        channels: usize,
        height: usize,
        width: usize,
        value: f64,
    ) -> Result<Self, TensorError> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn zeros_like(&self) -> ImageTensor {
        ImageTensor { values: vec![0.0; self.values.len()], ..self.clone() }
    }

    /// 8-bit greyscale pixels normalized with mean 0.5 and std 0.5, giving [-1, 1].
    pub fn from_greyscale_u8(height: usize, width: usize, pixels: &[u8]) -> Result<Self, TensorError> {
        let values = pixels.iter().map(|&p| (p as f64 / 255.0 - 0.5) / 0.5).collect();
        Self::new(1, height, width, values)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.values[(channel * self.height + row) * self.width + col]
    }

    /// `self + alpha * (other - self)`, element-wise. Shapes must match.
    pub fn lerp(&self, other: &ImageTensor, alpha: f64) -> ImageTensor {
        debug_assert_eq!(self.shape(), other.shape());
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| a + alpha * (b - a))
            .collect();
        ImageTensor { values, ..self.clone() }
    }

    /// Reduces over channels with `max`, producing a per-pixel map.
    pub fn channel_max(&self) -> Heatmap {
        let plane = self.height * self.width;
        let mut out = self.values[..plane].to_vec();
        for c in 1..self.channels {
            for (o, &v) in out.iter_mut().zip(&self.values[c * plane..(c + 1) * plane]) {
                *o = o.max(v);
            }
        }
        Heatmap { height: self.height, width: self.width, values: out }
    }

    /// Sums over channels, producing a per-pixel map.
    pub fn channel_sum(&self) -> Heatmap {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane];
        for c in 0..self.channels {
            for (o, &v) in out.iter_mut().zip(&self.values[c * plane..(c + 1) * plane]) {
                *o += v;
            }
        }
        Heatmap { height: self.height, width: self.width, values: out }
    }
}

/// Pearson correlation plus a flag raised when either input has zero variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation {
    pub r: f64,
    pub degenerate: bool,
}

pub fn pearson_correlation(a: &Heatmap, b: &Heatmap) -> Result<Correlation, TensorError> {
    a.ensure_same_shape(b)?;
    let n = a.len();
    if n < 2 {
        return Err(TensorError::TooSmall { needed: 2, found: n });
    }
    let mean_a = a.values.iter().sum::<f64>() / n as f64;
    let mean_b = b.values.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.values.iter().zip(&b.values) {
        let dx = x - mean_a;
        let dy = y - mean_b;
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 || a.is_constant() || b.is_constant() {
        return Ok(Correlation { r: 0.0, degenerate: true });
    }
    let r = (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0);
    Ok(Correlation { r, degenerate: false })
}

/// Min-max scaled map plus a flag raised for constant input (mapped to zeros).
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub map: Heatmap,
    pub degenerate: bool,
}

pub fn minmax_normalize(a: &Heatmap) -> Normalized {
    let (lo, hi) = (a.min(), a.max());
    if hi <= lo {
        return Normalized {
            map: Heatmap { height: a.height, width: a.width, values: vec![0.0; a.len()] },
            degenerate: true,
        };
    }
    let span = hi - lo;
    Normalized { map: a.map(|v| ((v - lo) / span).clamp(0.0, 1.0)), degenerate: false }
}

/// Euclidean distance between two maps. With `normalized`, both maps are
/// min-max scaled first and the result is divided by `sqrt(H*W)`.
pub fn l2_distance(a: &Heatmap, b: &Heatmap, normalized: bool) -> Result<f64, TensorError> {
    a.ensure_same_shape(b)?;
    if normalized {
        let na = minmax_normalize(a).map;
        let nb = minmax_normalize(b).map;
        Ok(raw_l2(&na.values, &nb.values) / (a.len() as f64).sqrt())
    } else {
        Ok(raw_l2(&a.values, &b.values))
    }
}

fn raw_l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Bilinear resize with half-pixel sample centers (align-corners false).
pub fn bilinear_upsample(a: &Heatmap, out_h: usize, out_w: usize) -> Result<Heatmap, TensorError> {
    if out_h == 0 || out_w == 0 || out_h < a.height || out_w < a.width {
        return Err(TensorError::BadTarget { height: out_h, width: out_w });
    }
    if (out_h, out_w) == a.shape() {
        return Ok(a.clone());
    }
    let sample = |i: usize, out: usize, src: usize| -> (usize, usize, f64) {
        let scale = src as f64 / out as f64;
        let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        (lo, hi, pos - lo as f64)
    };
    let rows: Vec<_> = (0..out_h).map(|i| sample(i, out_h, a.height)).collect();
    let cols: Vec<_> = (0..out_w).map(|j| sample(j, out_w, a.width)).collect();
    let mut values = Vec::with_capacity(out_h * out_w);
    for &(r0, r1, fr) in &rows {
        for &(c0, c1, fc) in &cols {
            let top = a.get(r0, c0) * (1.0 - fc) + a.get(r0, c1) * fc;
            let bottom = a.get(r1, c0) * (1.0 - fc) + a.get(r1, c1) * fc;
            values.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    Heatmap::new(out_h, out_w, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hm(h: usize, w: usize, v: &[f64]) -> Heatmap {
        Heatmap::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        assert_eq!(Heatmap::new(1, 2, vec![0.0, f64::NAN]), Err(TensorError::NonFinite(1)));
        assert!(matches!(Heatmap::new(0, 2, vec![]), Err(TensorError::Empty { .. })));
        assert!(matches!(Heatmap::new(2, 2, vec![0.0; 3]), Err(TensorError::Length { .. })));
    }

    #[test]
    fn pearson_examples() {
        let a = hm(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = hm(2, 2, &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(pearson_correlation(&a, &a).unwrap().r, 1.0);
        let neg = a.map(|v| -v);
        assert!((pearson_correlation(&a, &neg).unwrap().r + 1.0).abs() < 1e-15);
        // means 2.5; deviations (-1.5,-.5,.5,1.5)·(-1.5,.5,-.5,1.5) = 4; each sum of squares 5
        assert!((pearson_correlation(&a, &b).unwrap().r - 0.8).abs() < 1e-12);
    }

    #[test]
    fn pearson_degenerate_and_shape() {
        let a = hm(1, 3, &[1.0, 2.0, 3.0]);
        let c = hm(1, 3, &[5.0; 3]);
        let corr = pearson_correlation(&a, &c).unwrap();
        assert_eq!(corr, Correlation { r: 0.0, degenerate: true });
        let other = hm(3, 1, &[1.0, 2.0, 3.0]);
        assert!(matches!(pearson_correlation(&a, &other), Err(TensorError::ShapeMismatch { .. })));
        let single = hm(1, 1, &[1.0]);
        assert!(matches!(pearson_correlation(&single, &single), Err(TensorError::TooSmall { .. })));
    }

    #[test]
    fn l2_examples() {
        let a = hm(1, 2, &[0.0, 0.0]);
        let b = hm(1, 2, &[3.0, 4.0]);
        assert_eq!(l2_distance(&a, &a, false).unwrap(), 0.0);
        assert_eq!(l2_distance(&a, &b, false).unwrap(), 5.0);
        let c = hm(2, 2, &[0.0, 0.0, 0.0, 1.0]);
        let d = hm(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let got = l2_distance(&c, &d, true).unwrap();
        assert!((got - std::f64::consts::SQRT_2 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn upsample_examples() {
        let a = hm(1, 2, &[0.0, 1.0]);
        let up = bilinear_upsample(&a, 1, 4).unwrap();
        assert_eq!(up.values(), &[0.0, 0.25, 0.75, 1.0]);
        assert_eq!(bilinear_upsample(&a, 1, 2).unwrap(), a);
        let c = Heatmap::filled(3, 2, 0.7).unwrap();
        let up = bilinear_upsample(&c, 7, 5).unwrap();
        assert!(up.values().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        assert!(bilinear_upsample(&a, 0, 4).is_err());
    }

    #[test]
    fn minmax_examples() {
        let a = hm(1, 3, &[-1.0, 0.0, 1.0]);
        let n = minmax_normalize(&a);
        assert_eq!(n.map.values(), &[0.0, 0.5, 1.0]);
        assert!(!n.degenerate);
        let c = minmax_normalize(&Heatmap::filled(2, 2, 3.0).unwrap());
        assert!(c.degenerate);
        assert!(c.map.values().iter().all(|&v| v == 0.0));
        let unit = hm(1, 3, &[0.0, 0.3, 1.0]);
        assert_eq!(minmax_normalize(&unit).map, unit);
    }

    #[test]
    fn channel_reductions() {
        let img = ImageTensor::new(2, 1, 2, vec![1.0, -3.0, 0.5, 2.0]).unwrap();
        assert_eq!(img.channel_max().values(), &[1.0, 2.0]);
        assert_eq!(img.channel_sum().values(), &[1.5, -1.0]);
    }

    fn heatmap_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, n)
    }

    proptest! {
        #[test]
        fn pearson_symmetric_and_affine_invariant(
            a in heatmap_strategy(12),
            b in heatmap_strategy(12),
            scale in 0.1f64..10.0,
            shift in -5.0f64..5.0,
        ) {
            let a = hm(3, 4, &a);
            let b = hm(3, 4, &b);
            let ab = pearson_correlation(&a, &b).unwrap();
            let ba = pearson_correlation(&b, &a).unwrap();
            prop_assert!((ab.r - ba.r).abs() < 1e-12);
            let a2 = a.map(|v| scale * v + shift);
            let moved = pearson_correlation(&a2, &b).unwrap();
            prop_assert!((moved.r - ab.r).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&ab.r));
        }

        #[test]
        fn l2_symmetry_and_triangle(
            a in heatmap_strategy(9),
            b in heatmap_strategy(9),
            c in heatmap_strategy(9),
            normalized in any::<bool>(),
        ) {
            let (a, b, c) = (hm(3, 3, &a), hm(3, 3, &b), hm(3, 3, &c));
            let ab = l2_distance(&a, &b, normalized).unwrap();
            let ba = l2_distance(&b, &a, normalized).unwrap();
            let bc = l2_distance(&b, &c, normalized).unwrap();
            let ac = l2_distance(&a, &c, normalized).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ac <= ab + bc + 1e-12);
        }

        #[test]
        fn upsample_preserves_bounds(
            v in heatmap_strategy(6),
            extra_h in 0usize..6,
            extra_w in 0usize..6,
        ) {
            let a = hm(2, 3, &v);
            let up = bilinear_upsample(&a, 2 + extra_h, 3 + extra_w).unwrap();
            prop_assert!(up.min() >= a.min() - 1e-12);
            prop_assert!(up.max() <= a.max() + 1e-12);
        }
    }
}
