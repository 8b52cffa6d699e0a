//! Small deterministic numeric kernel: grids, softmax, cross-entropy,
//! analytic logit gradients, resampling and normalization.
//!
//! All math is done in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Probability floor applied before taking the log in [`cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

/// Dense row-major 2-D grid of finite values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Grid2D {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("grid dimensions must be positive"));
        }
        if values.len() != height * width {
            return Err(Error::invalid(format!(
                "grid of {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("grid values must be finite"));
        }
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    /// Builds a grid from nested rows; handy in tests.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::new(height, width, rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    pub(crate) fn from_parts_unchecked(height: usize, width: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), height * width);
        Self { height, width, values }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// `(min, max)` over all cells.
    pub fn range(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid2D {
        Grid2D::from_parts_unchecked(self.height, self.width, self.values.iter().map(|&v| f(v)).collect())
    }
}

/// Per-class unnormalized scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(Vec<f64>);

impl Logits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("logits must not be empty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("logits must be finite"));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A categorical distribution over classes.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Probabilities(Vec<f64>);

impl Probabilities {
    /// Validates that every entry lies in `[0, 1]` and the total is within
    /// `1e-9` of one.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("probabilities must not be empty"));
        }
        if values.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("probabilities must lie in [0, 1]"));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &Logits) -> Probabilities {
    let z = logits.values();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Probabilities(exps.into_iter().map(|e| e / total).collect())
}

fn check_label(probs: &Probabilities, label: usize) -> Result<()> {
    if label >= probs.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            probs.len()
        )));
    }
    Ok(())
}

/// `-ln(max(p[label], 1e-12))`.
pub fn cross_entropy(probs: &Probabilities, label: usize) -> Result<f64> {
    check_label(probs, label)?;
    Ok(-probs.values()[label].max(PROB_FLOOR).ln())
}

/// Gradient of `cross_entropy(softmax(z), label)` with respect to `z`:
/// `p - onehot(label)`.
pub fn logits_gradient(probs: &Probabilities, label: usize) -> Result<Vec<f64>> {
    check_label(probs, label)?;
    Ok(probs
        .values()
        .iter()
        .enumerate()
        .map(|(c, &p)| if c == label { p - 1.0 } else { p })
        .collect())
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax_class(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::invalid("cannot take argmax of an empty score vector"));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// One output sample position along an axis: the two neighbouring source
/// indices and the weight of the second.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Half-pixel-centre sample positions: `s = (d + 0.5) * in / out - 0.5`,
/// clamped to `[0, in - 1]`.
pub(crate) fn sample_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    let last = (in_len - 1) as f64;
    (0..out_len)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            Tap { lo, hi, frac: s - lo as f64 }
        })
        .collect()
}

#[inline]
pub(crate) fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a * (1.0 - t) + b * t
}

/// Bilinear resampling with half-pixel-centre alignment.
pub fn bilinear_resize(grid: &Grid2D, out_h: usize, out_w: usize) -> Result<Grid2D> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("output dimensions must be positive"));
    }
    let ys = sample_taps(grid.height, out_h);
    let xs = sample_taps(grid.width, out_w);
    let mut out = vec![0.0; out_h * out_w];
    par::for_each_row(&mut out, out_w, out_w * 8, |y, row| {
        let ty = ys[y];
        let top = &grid.values[ty.lo * grid.width..(ty.lo + 1) * grid.width];
        let bottom = &grid.values[ty.hi * grid.width..(ty.hi + 1) * grid.width];
        for (v, tx) in row.iter_mut().zip(&xs) {
            let upper = lerp(top[tx.lo], top[tx.hi], tx.frac);
            let lower = lerp(bottom[tx.lo], bottom[tx.hi], tx.frac);
            *v = lerp(upper, lower, ty.frac);
        }
    });
    Ok(Grid2D::from_parts_unchecked(out_h, out_w, out))
}

/// Affine rescale of the grid onto `[0, 1]`; a constant grid maps to zeros.
pub fn minmax_normalize(grid: &Grid2D) -> Grid2D {
    let (lo, hi) = grid.range();
    if hi > lo {
        let span = hi - lo;
        grid.map(|v| ((v - lo) / span).clamp(0.0, 1.0))
    } else {
        grid.map(|_| 0.0)
    }
}
