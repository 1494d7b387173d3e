//! Reference computations written independently of the library internals.

#![allow(dead_code)]

use noisecutmix::augment::Sample;
use noisecutmix::classifier::{soft_ce_loss, MlpClassifier};
use noisecutmix::denoiser::ClassModel;
use noisecutmix::schedule::Schedule;

/// `ln p_t(x)` of the noised class mixture, restricted to `class` if given.
pub fn log_density(x: &[f64], t: usize, sched: &Schedule, models: &[ClassModel], class: Option<usize>) -> f64 {
    let abar = sched.alpha_bars()[t];
    let a = abar.sqrt();
    let weight_sum: f64 = models.iter().map(|m| m.weight()).sum();
    let terms: Vec<f64> = models
        .iter()
        .filter(|m| class.is_none_or(|c| m.class_id() == c))
        .map(|m| {
            let prior = if class.is_some() {
                0.0
            } else {
                (m.weight() / weight_sum).ln()
            };
            prior
                + x.iter()
                    .zip(m.mean().values())
                    .zip(m.var())
                    .map(|((xi, mi), vi)| {
                        let v = abar * vi + 1.0 - abar;
                        -0.5 * (2.0 * std::f64::consts::PI * v).ln() - (xi - a * mi).powi(2) / (2.0 * v)
                    })
                    .sum::<f64>()
        })
        .collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + terms.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `−√(1 − ᾱ_t) ∇ ln p_t(x)` by central differences.
pub fn fd_noise(
    x: &[f64],
    t: usize,
    sched: &Schedule,
    models: &[ClassModel],
    class: Option<usize>,
    h: f64,
) -> Vec<f64> {
    let sigma = (1.0 - sched.alpha_bars()[t]).sqrt();
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += h;
            m[i] -= h;
            let d = (log_density(&p, t, sched, models, class) - log_density(&m, t, sched, models, class)) / (2.0 * h);
            -sigma * d
        })
        .collect()
}

/// Mean soft cross-entropy of a batch under the given parameters.
pub fn batch_loss(model: &MlpClassifier, params: &[f64], batch: &[Sample]) -> f64 {
    let m = MlpClassifier::from_params(
        model.input(),
        model.hidden(),
        model.classes(),
        model.seed(),
        params.to_vec(),
    )
    .unwrap();
    batch
        .iter()
        .map(|s| soft_ce_loss(&m.logits(&s.image).unwrap(), &s.label))
        .sum::<f64>()
        / batch.len() as f64
}

/// Central-difference gradient of [`batch_loss`].
pub fn fd_gradient(model: &MlpClassifier, batch: &[Sample], h: f64) -> Vec<f64> {
    let base = model.params().to_vec();
    (0..base.len())
        .map(|i| {
            let mut p = base.clone();
            p[i] = base[i] + h;
            let up = batch_loss(model, &p, batch);
            p[i] = base[i] - h;
            let down = batch_loss(model, &p, batch);
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Expected number of cells `i + 0.5` covered by a window of width `size`
/// whose center is uniform on `[0, n)`.
pub fn expected_covered(n: usize, size: f64) -> f64 {
    (0..n)
        .map(|i| {
            let c = i as f64 + 0.5;
            let lo = (c - size / 2.0).max(0.0);
            let hi = (c + size / 2.0).min(n as f64);
            (hi - lo).max(0.0) / n as f64
        })
        .sum()
}

/// Kolmogorov–Smirnov distance of a sample to Uniform(0, 1).
pub fn ks_uniform(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / n).max((i + 1) as f64 / n - x))
        .fold(0.0, f64::max)
}

/// A perceptron pass over the data with no mistakes, if one is found.
pub fn perceptron_separates(points: &[(Vec<f64>, bool)], max_epochs: usize) -> bool {
    let d = points[0].0.len();
    let mut w = vec![0.0; d + 1];
    for _ in 0..max_epochs {
        let mut mistakes = 0;
        for (x, y) in points {
            let s = w[d] + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let target = if *y { 1.0 } else { -1.0 };
            if s * target <= 0.0 {
                mistakes += 1;
                for (wi, xi) in w.iter_mut().zip(x) {
                    *wi += target * xi;
                }
                w[d] += target;
            }
        }
        if mistakes == 0 {
            return true;
        }
    }
    false
}

/// Per-pixel sample means and variances (`n − 1` denominator).
pub fn moments(images: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = images.len() as f64;
    let d = images[0].len();
    let mean: Vec<f64> = (0..d).map(|i| images.iter().map(|x| x[i]).sum::<f64>() / n).collect();
    let var = (0..d)
        .map(|i| images.iter().map(|x| (x[i] - mean[i]).powi(2)).sum::<f64>() / (n - 1.0))
        .collect();
    (mean, var)
}
