//! Closed-form optimal noise prediction for Gaussian class models.
//!
//! Under the forward process a class with mean `μ` and diagonal covariance
//! `Σ` has marginal `x_t ~ N(√ᾱ_t μ, v_t)` with `v_t = ᾱ_t Σ + (1 − ᾱ_t)`, so
//! the optimal predictor is
//!
//! ```text
//! ε*(x_t) = −σ_t ∇ log p_t(x_t) = σ_t (x_t − √ᾱ_t μ) / v_t
//! ```
//!
//! The unconditional predictor uses the weighted mixture over all classes,
//! whose score is the responsibility-weighted sum of per-class scores.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::schedule::Schedule;
use crate::seeds;

/// Smallest admissible per-pixel variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Gaussian image model of one class: mean grid, diagonal covariance and a
/// mixture weight used by the unconditional predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassModel {
    class_id: usize,
    mean: ImageGrid,
    var: Vec<f64>,
    weight: f64,
}

impl ClassModel {
    pub fn new(class_id: usize, mean: ImageGrid, var: Vec<f64>, weight: f64) -> Result<Self> {
        if var.len() != mean.len() {
            return Err(Error::arg(format!(
                "class {class_id}: {} variances for {} pixels",
                var.len(),
                mean.len()
            )));
        }
        if let Some(v) = var.iter().find(|v| !v.is_finite() || **v < VARIANCE_FLOOR) {
            return Err(Error::arg(format!(
                "class {class_id}: variance {v} below floor {VARIANCE_FLOOR}"
            )));
        }
        if !(weight > 0.0 && weight <= 1.0) {
            return Err(Error::arg(format!("class {class_id}: weight {weight} outside (0, 1]")));
        }
        Ok(Self {
            class_id,
            mean,
            var,
            weight,
        })
    }

    /// Model with the same variance on every pixel.
    pub fn isotropic(class_id: usize, mean: ImageGrid, var: f64, weight: f64) -> Result<Self> {
        let n = mean.len();
        Self::new(class_id, mean, vec![var; n], weight)
    }

    pub fn class_id(&self) -> usize {
        self.class_id
    }

    pub fn mean(&self) -> &ImageGrid {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    /// Exact draw `μ + √Σ ⊙ z`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ImageGrid {
        let values = self
            .mean
            .values()
            .iter()
            .zip(&self.var)
            .map(|(&m, &v)| {
                let z: f64 = StandardNormal.sample(rng);
                m + v.sqrt() * z
            })
            .collect();
        ImageGrid::from_parts_unchecked(self.mean.width(), self.mean.height(), values)
    }
}

/// The conditioning signal handed to the noise predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    Class(usize),
    Unconditional,
}

pub(crate) fn find_model(models: &[ClassModel], class_id: usize) -> Result<&ClassModel> {
    models
        .iter()
        .find(|m| m.class_id == class_id)
        .ok_or_else(|| Error::arg(format!("unknown class {class_id}")))
}

/// Optimal noise estimate `ε*(x_t)` for the given condition at step `t`.
pub fn predict_noise(
    x_t: &ImageGrid,
    cond: Condition,
    t: usize,
    sched: &Schedule,
    models: &[ClassModel],
) -> Result<ImageGrid> {
    if models.is_empty() {
        return Err(Error::arg("empty model list"));
    }
    if t == 0 || t > sched.num_steps() {
        return Err(Error::arg(format!(
            "noise prediction needs 1 <= t <= {}, got {t}",
            sched.num_steps()
        )));
    }
    for m in models {
        x_t.check_shape(&m.mean, "predict_noise")?;
    }
    let eps = match cond {
        Condition::Class(c) => class_noise(x_t, find_model(models, c)?, t, sched),
        Condition::Unconditional if models.len() == 1 => class_noise(x_t, &models[0], t, sched),
        Condition::Unconditional => mixture_noise(x_t, t, sched, models),
    };
    if !eps.is_finite() {
        return Err(Error::Numerical(format!("non-finite noise prediction at t = {t}")));
    }
    Ok(eps)
}

fn class_noise(x_t: &ImageGrid, model: &ClassModel, t: usize, sched: &Schedule) -> ImageGrid {
    let (ab, a, s) = (sched.alpha_bar(t), sched.signal(t), sched.sigma(t));
    let values = x_t
        .values()
        .iter()
        .zip(model.mean.values())
        .zip(&model.var)
        .map(|((&x, &m), &var)| s * ((x - a * m) / (ab * var + (1.0 - ab))))
        .collect();
    ImageGrid::from_parts_unchecked(x_t.width(), x_t.height(), values)
}

fn mixture_noise(x_t: &ImageGrid, t: usize, sched: &Schedule, models: &[ClassModel]) -> ImageGrid {
    let (ab, a, s) = (sched.alpha_bar(t), sched.signal(t), sched.sigma(t));
    let total_weight: f64 = models.iter().map(|m| m.weight).sum();

    // log w_c + log N(x_t; a μ_c, v_c), dropping the shared 2π term
    let log_joint: Vec<f64> = models
        .iter()
        .map(|m| {
            let ll: f64 = x_t
                .values()
                .iter()
                .zip(m.mean.values())
                .zip(&m.var)
                .map(|((&x, &mu), &var)| {
                    let v = ab * var + (1.0 - ab);
                    let d = x - a * mu;
                    -0.5 * (d * d / v + v.ln())
                })
                .sum();
            (m.weight / total_weight).ln() + ll
        })
        .collect();
    let max = log_joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = log_joint.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = unnorm.iter().sum();

    let mut acc = vec![0.0; x_t.len()];
    for (m, u) in models.iter().zip(&unnorm) {
        let r = u / z;
        for (((slot, &x), &mu), &var) in acc.iter_mut().zip(x_t.values()).zip(m.mean.values()).zip(&m.var) {
            *slot += r * ((x - a * mu) / (ab * var + (1.0 - ab)));
        }
    }
    let values = acc.into_iter().map(|g| s * g).collect();
    ImageGrid::from_parts_unchecked(x_t.width(), x_t.height(), values)
}

/// Shape of a synthetic bump dataset: each class mean is a unit-amplitude
/// Gaussian bump at its own lattice point, with uniform pixel variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BumpSpec {
    pub num_classes: usize,
    pub width: usize,
    pub height: usize,
    pub bump_sigma: f64,
    pub noise_var: f64,
}

impl BumpSpec {
    /// Lattice of `rows × cols` points with `rows = ⌈√K⌉`, `cols = ⌈K / rows⌉`,
    /// each point at the center of its lattice cell. Class `c` sits at row
    /// `c / cols`, column `c % cols`.
    pub fn centers(&self) -> Result<Vec<(f64, f64)>> {
        let k = self.num_classes;
        if k < 2 {
            return Err(Error::arg(format!("bump dataset needs at least 2 classes, got {k}")));
        }
        if self.width < 4 || self.height < 4 {
            return Err(Error::arg(format!(
                "bump dataset needs a grid of at least 4x4, got {}x{}",
                self.width, self.height
            )));
        }
        let rows = (k as f64).sqrt().ceil() as usize;
        let cols = k.div_ceil(rows);
        // lattice points are at least 2 pixels apart
        if cols > self.width / 2 || rows > self.height / 2 {
            return Err(Error::arg(format!(
                "{k} classes exceed the lattice points available on a {}x{} grid",
                self.width, self.height
            )));
        }
        let (dx, dy) = (self.width as f64 / cols as f64, self.height as f64 / rows as f64);
        Ok((0..k)
            .map(|c| (((c % cols) as f64 + 0.5) * dx, ((c / cols) as f64 + 0.5) * dy))
            .collect())
    }

    pub fn models(&self) -> Result<Vec<ClassModel>> {
        if !(self.bump_sigma > 0.0 && self.bump_sigma.is_finite()) {
            return Err(Error::arg(format!(
                "bump_sigma must be positive, got {}",
                self.bump_sigma
            )));
        }
        let weight = 1.0 / self.num_classes as f64;
        let two_s2 = 2.0 * self.bump_sigma * self.bump_sigma;
        self.centers()?
            .into_iter()
            .enumerate()
            .map(|(c, (cx, cy))| {
                let mean = ImageGrid::from_fn(self.width, self.height, |x, y| {
                    let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    (-(px * px + py * py) / two_s2).exp()
                });
                ClassModel::isotropic(c, mean, self.noise_var, weight)
            })
            .collect()
    }
}

/// Images paired with their class ids.
pub type LabeledImages = Vec<(ImageGrid, usize)>;

/// `n_per_class` exact draws from each model, class-major order.
pub fn sample_dataset<R: Rng + ?Sized>(models: &[ClassModel], n_per_class: usize, rng: &mut R) -> LabeledImages {
    models
        .iter()
        .flat_map(|m| {
            (0..n_per_class)
                .map(|_| (m.sample(rng), m.class_id))
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Class models for `spec` plus `n_per_class` samples per class drawn from a
/// generator seeded with `seed`.
pub fn make_bump_dataset(spec: &BumpSpec, seed: u64, n_per_class: usize) -> Result<(Vec<ClassModel>, LabeledImages)> {
    let models = spec.models()?;
    let mut rng = seeds::rng_from(seed);
    let samples = sample_dataset(&models, n_per_class, &mut rng);
    Ok((models, samples))
}
