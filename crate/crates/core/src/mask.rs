//! Mixing ratio, rectangular binary masks and soft labels.
//!
//! A mask `M` keeps the first source where it is 1 and takes the second source
//! where it is 0. The zero region is one axis-aligned rectangle of size
//! `W √(1 − λ) × H √(1 − λ)` centered at a uniform point and clipped to the
//! grid; a cell is covered when its center lies inside the rectangle. Clipping
//! shrinks the cut, so labels use `lambda_real`, the realized share of ones.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the unit sum of a [`SoftLabel`].
pub const SIMPLEX_TOL: f64 = 1e-12;

/// `ln G` for `G ~ Gamma(alpha, 1)`, by Marsaglia–Tsang. Shapes below one
/// use `G(α) = G(α + 1) · U^{1/α}`, carried in log space because `U^{1/α}`
/// underflows for small `α`.
pub fn sample_ln_gamma<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    debug_assert!(alpha > 0.0);
    if alpha < 1.0 {
        let u: f64 = 1.0 - rng.random::<f64>();
        return sample_ln_gamma(alpha + 1.0, rng) + u.ln() / alpha;
    }
    let d = alpha - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = StandardNormal.sample(rng);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u: f64 = rng.random();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return (d * v).ln();
        }
    }
}

/// `λ ~ Beta(alpha, alpha)` as `G₁ / (G₁ + G₂)` with independent Gamma draws.
pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::arg(format!("Beta parameter must be positive, got {alpha}")));
    }
    let g1 = sample_ln_gamma(alpha, rng);
    let g2 = sample_ln_gamma(alpha, rng);
    Ok((1.0 / (1.0 + (g2 - g1).exp())).clamp(0.0, 1.0))
}

/// Binary `width × height` mask, row-major; `true` is 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    width: usize,
    height: usize,
    cells: Vec<bool>,
}

impl Mask {
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut cells = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                cells.push(f(x, y));
            }
        }
        Self { width, height, cells }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self::from_fn(width, height, |_, _| true)
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::from_fn(width, height, |_, _| false)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.cells[y * self.width + x]
    }

    pub fn count_zeros(&self) -> usize {
        self.cells.iter().filter(|c| !**c).count()
    }

    /// Share of ones, `1 − zeros / (W·H)`.
    pub fn lambda(&self) -> f64 {
        1.0 - self.count_zeros() as f64 / self.cells.len() as f64
    }

    pub fn is_all_ones(&self) -> bool {
        self.cells.iter().all(|c| *c)
    }
}

/// Rectangle as sampled: center `(x, y)` and size `(w, h)`, before clipping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

/// Half-open cell ranges `[x0, x1) × [y0, y1)` set to zero in the mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellBox {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

impl CellBox {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub lambda_sampled: f64,
    pub rect: Rect,
    pub cut: CellBox,
    pub mask: Mask,
    pub lambda_real: f64,
}

/// Cells `i` with `lo <= i + 0.5 < hi`, clipped to `0..n`.
fn covered_cells(center: f64, size: f64, n: usize) -> (usize, usize) {
    let lo = (center - size / 2.0).max(0.0);
    let hi = (center + size / 2.0).min(n as f64);
    let first = (lo - 0.5).ceil().max(0.0) as usize;
    let end = ((hi - 0.5).ceil().max(0.0) as usize).min(n);
    (first.min(end), end)
}

/// Mask whose zeros are the cells covered by `rect`.
pub fn mask_from_rect(width: usize, height: usize, rect: Rect) -> (Mask, CellBox) {
    let (x0, x1) = covered_cells(rect.x, rect.w, width);
    let (y0, y1) = covered_cells(rect.y, rect.h, height);
    let cut = CellBox { x0, x1, y0, y1 };
    let mask = Mask::from_fn(width, height, |x, y| !(x0 <= x && x < x1 && y0 <= y && y < y1));
    (mask, cut)
}

/// Uniform center, side lengths `W √(1 − λ)` and `H √(1 − λ)`.
pub fn sample_mask<R: Rng + ?Sized>(width: usize, height: usize, lambda: f64, rng: &mut R) -> Result<MaskSpec> {
    if width == 0 || height == 0 {
        return Err(Error::arg("mask dimensions must be positive"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::arg(format!("lambda {lambda} outside [0, 1]")));
    }
    let cut_ratio = (1.0 - lambda).sqrt();
    let rect = Rect {
        x: rng.random_range(0.0..width as f64),
        y: rng.random_range(0.0..height as f64),
        w: width as f64 * cut_ratio,
        h: height as f64 * cut_ratio,
    };
    let (mask, cut) = mask_from_rect(width, height, rect);
    let lambda_real = 1.0 - cut.area() as f64 / (width * height) as f64;
    Ok(MaskSpec {
        lambda_sampled: lambda,
        rect,
        cut,
        mask,
        lambda_real,
    })
}

/// Probability vector over `K` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabel {
    probs: Vec<f64>,
}

impl SoftLabel {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::arg("label over zero classes"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::arg("label entries must be finite and non-negative"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::arg(format!("label sums to {sum}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn one_hot(class: usize, num_classes: usize) -> Result<Self> {
        if class >= num_classes {
            return Err(Error::arg(format!(
                "class {class} out of range for {num_classes} classes"
            )));
        }
        let mut probs = vec![0.0; num_classes];
        probs[class] = 1.0;
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    /// Index of the largest entry, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    /// `lambda · a + (1 − lambda) · b`.
    pub fn blend(a: &SoftLabel, b: &SoftLabel, lambda: f64) -> Result<Self> {
        if a.probs.len() != b.probs.len() {
            return Err(Error::arg(format!(
                "cannot blend labels over {} and {} classes",
                a.probs.len(),
                b.probs.len()
            )));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::arg(format!("lambda {lambda} outside [0, 1]")));
        }
        if a == b {
            return Ok(a.clone());
        }
        let probs = a
            .probs
            .iter()
            .zip(&b.probs)
            .map(|(&p, &q)| lambda * p + (1.0 - lambda) * q)
            .collect();
        Ok(Self { probs })
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// `lambda_real · onehot(y_a) + (1 − lambda_real) · onehot(y_b)`; a single
/// one-hot when the classes coincide.
pub fn mix_labels(y_a: usize, y_b: usize, lambda_real: f64, num_classes: usize) -> Result<SoftLabel> {
    let a = SoftLabel::one_hot(y_a, num_classes)?;
    let b = SoftLabel::one_hot(y_b, num_classes)?;
    SoftLabel::blend(&a, &b, lambda_real)
}
