//! Small MLP classifier trained with soft-label cross-entropy and Adam.
//!
//! Architecture is `(W·H) → hidden → K` with a rectified-linear hidden layer.
//! Parameters live in one flat vector laid out as `W1 (hidden × input)`,
//! `b1`, `W2 (K × hidden)`, `b2`.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::{apply_policy, AugmentKind, AugmentPolicy, Sample};
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::mask::{argmax, SoftLabel};
use crate::seeds;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpClassifier {
    input: usize,
    hidden: usize,
    classes: usize,
    seed: u64,
    params: Vec<f64>,
}

impl MlpClassifier {
    pub fn param_count(input: usize, hidden: usize, classes: usize) -> usize {
        hidden * input + hidden + classes * hidden + classes
    }

    /// He-style init: `W1 ~ N(0, 2 / input)`, `W2 ~ N(0, 1 / hidden)`, zero biases.
    pub fn new(input: usize, hidden: usize, classes: usize, seed: u64) -> Result<Self> {
        if input == 0 || hidden == 0 || classes < 2 {
            return Err(Error::arg(format!("bad layer sizes {input} -> {hidden} -> {classes}")));
        }
        let mut rng = seeds::rng_from(seed);
        let n1 = Normal::new(0.0, (2.0 / input as f64).sqrt()).unwrap();
        let n2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).unwrap();
        let mut params = Vec::with_capacity(Self::param_count(input, hidden, classes));
        params.extend((0..hidden * input).map(|_| n1.sample(&mut rng)));
        params.extend(std::iter::repeat_n(0.0, hidden));
        params.extend((0..classes * hidden).map(|_| n2.sample(&mut rng)));
        params.extend(std::iter::repeat_n(0.0, classes));
        Ok(Self {
            input,
            hidden,
            classes,
            seed,
            params,
        })
    }

    pub fn from_params(input: usize, hidden: usize, classes: usize, seed: u64, params: Vec<f64>) -> Result<Self> {
        if input == 0 || hidden == 0 || classes < 2 {
            return Err(Error::arg(format!("bad layer sizes {input} -> {hidden} -> {classes}")));
        }
        let expected = Self::param_count(input, hidden, classes);
        if params.len() != expected {
            return Err(Error::arg(format!(
                "expected {expected} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numerical("non-finite parameter".into()));
        }
        Ok(Self {
            input,
            hidden,
            classes,
            seed,
            params,
        })
    }

    pub fn input(&self) -> usize {
        self.input
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], &[f64]) {
        let (w1, rest) = self.params.split_at(self.hidden * self.input);
        let (b1, rest) = rest.split_at(self.hidden);
        let (w2, b2) = rest.split_at(self.classes * self.hidden);
        (w1, b1, w2, b2)
    }

    /// Hidden pre-activations and logits.
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (w1, b1, w2, b2) = self.split();
        let pre: Vec<f64> = w1
            .chunks_exact(self.input)
            .zip(b1)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect();
        let logits = w2
            .chunks_exact(self.hidden)
            .zip(b2)
            .map(|(row, b)| row.iter().zip(&pre).map(|(w, h)| w * h.max(0.0)).sum::<f64>() + b)
            .collect();
        (pre, logits)
    }

    pub fn logits(&self, image: &ImageGrid) -> Result<Vec<f64>> {
        self.check_input(image)?;
        Ok(self.forward(image.values()).1)
    }

    /// Argmax class, lowest index on ties.
    pub fn predict(&self, image: &ImageGrid) -> Result<usize> {
        Ok(argmax(&self.logits(image)?))
    }

    fn check_input(&self, image: &ImageGrid) -> Result<()> {
        if image.len() != self.input {
            return Err(Error::arg(format!(
                "model takes {} inputs, image has {}",
                self.input,
                image.len()
            )));
        }
        Ok(())
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `−Σ_k y_k log softmax(z)_k`.
pub fn soft_ce_loss(logits: &[f64], target: &SoftLabel) -> f64 {
    let lse = log_sum_exp(logits);
    -logits
        .iter()
        .zip(target.probs())
        .map(|(z, y)| y * (z - lse))
        .sum::<f64>()
}

/// `softmax(z) − y`, the loss gradient with respect to the logits.
pub fn logit_gradient(logits: &[f64], target: &SoftLabel) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits
        .iter()
        .zip(target.probs())
        .map(|(z, y)| (z - lse).exp() - y)
        .collect()
}

/// Mean loss over a batch and its gradient in the flat parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient {
    pub loss: f64,
    pub params: Vec<f64>,
}

pub fn gradient(model: &MlpClassifier, batch: &[Sample]) -> Result<BatchGradient> {
    if batch.is_empty() {
        return Err(Error::arg("gradient of an empty batch"));
    }
    let (n_in, n_h, k) = (model.input, model.hidden, model.classes);
    let (_, _, w2, _) = model.split();
    let mut grad = vec![0.0; model.params.len()];
    let mut loss = 0.0;
    {
        let (g_w1, rest) = grad.split_at_mut(n_h * n_in);
        let (g_b1, rest) = rest.split_at_mut(n_h);
        let (g_w2, g_b2) = rest.split_at_mut(k * n_h);
        for sample in batch {
            model.check_input(&sample.image)?;
            if sample.label.num_classes() != k {
                return Err(Error::arg("label class count differs from model output"));
            }
            let x = sample.image.values();
            let (pre, logits) = model.forward(x);
            loss += soft_ce_loss(&logits, &sample.label);
            let dz = logit_gradient(&logits, &sample.label);

            let mut dh = vec![0.0; n_h];
            for (c, &d) in dz.iter().enumerate() {
                g_b2[c] += d;
                let row = &w2[c * n_h..(c + 1) * n_h];
                for j in 0..n_h {
                    g_w2[c * n_h + j] += d * pre[j].max(0.0);
                    dh[j] += d * row[j];
                }
            }
            for j in 0..n_h {
                if pre[j] > 0.0 {
                    g_b1[j] += dh[j];
                    for (g, v) in g_w1[j * n_in..(j + 1) * n_in].iter_mut().zip(x) {
                        *g += dh[j] * v;
                    }
                }
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok(BatchGradient {
        loss: loss * scale,
        params: grad,
    })
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            batch_size: 64,
            learning_rate: 0.001,
            epochs: 30,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::arg(format!("val_fraction {} outside (0, 1)", self.val_fraction)));
        }
        if self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::arg("batch size and hidden width must be at least 1"));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::arg("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// Top-1 accuracy on the unaugmented training split after the epoch.
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot from the best-validation epoch (initial model if no epochs ran).
    pub model: MlpClassifier,
    pub history: Vec<EpochStats>,
    pub best_epoch: Option<usize>,
    /// Indices into the real set held out for validation.
    pub val_indices: Vec<usize>,
}

fn hard_accuracy(model: &MlpClassifier, samples: &[&Sample]) -> Result<f64> {
    let mut correct = 0usize;
    for s in samples {
        if model.predict(&s.image)? == s.label.argmax() {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Trains on the real samples plus `synthetic`.
///
/// A `val_fraction` share of the real samples (seeded shuffle) is held out
/// for validation; synthetic samples only ever enter the training split.
/// Each epoch shuffles, batches, applies `policy` and takes Adam steps. The
/// returned model is the snapshot of the epoch with the highest validation
/// accuracy, earliest epoch on ties.
pub fn train(real: &[Sample], synthetic: &[Sample], cfg: &TrainConfig, policy: &AugmentPolicy) -> Result<TrainOutcome> {
    cfg.validate()?;
    if real.len() < 10 {
        return Err(Error::InvalidDataset(format!(
            "need at least 10 real samples, got {}",
            real.len()
        )));
    }
    let k = real[0].label.num_classes();
    let input = real[0].image.len();
    for s in real.iter().chain(synthetic) {
        if s.label.num_classes() != k || !s.image.same_shape(&real[0].image) {
            return Err(Error::InvalidDataset("samples disagree on shape or class count".into()));
        }
    }
    let mut present = vec![false; k];
    real.iter().for_each(|s| present[s.label.argmax()] = true);
    if present.iter().filter(|p| **p).count() < 2 {
        return Err(Error::InvalidDataset(
            "need at least 2 classes among real samples".into(),
        ));
    }

    let mut order: Vec<usize> = (0..real.len()).collect();
    order.shuffle(&mut seeds::rng_from(seeds::derive_tag(cfg.seed, "split")));
    let n_val = ((cfg.val_fraction * real.len() as f64).round() as usize).clamp(1, real.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);

    let mut in_train = vec![false; k];
    train_idx.iter().for_each(|&i| in_train[real[i].label.argmax()] = true);
    if let Some(c) = (0..k).find(|&c| present[c] && !in_train[c]) {
        return Err(Error::InvalidDataset(format!(
            "class {c} has no training samples after the split"
        )));
    }

    let val: Vec<&Sample> = val_idx.iter().map(|&i| &real[i]).collect();
    let pool: Vec<&Sample> = train_idx.iter().map(|&i| &real[i]).chain(synthetic).collect();

    let mut model = MlpClassifier::new(input, cfg.hidden, k, seeds::derive_tag(cfg.seed, "init"))?;
    let mut best = model.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut adam = Adam::new(
        model.params.len(),
        cfg.learning_rate,
        cfg.beta1,
        cfg.beta2,
        cfg.adam_eps,
    );
    let mut rng = seeds::rng_from(seeds::derive_tag(cfg.seed, "epochs"));
    let mut perm: Vec<usize> = (0..pool.len()).collect();

    for epoch in 1..=cfg.epochs {
        perm.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in perm.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| pool[i].clone()).collect();
            let batch = if policy.kind() != AugmentKind::None && batch.len() >= 2 {
                apply_policy(&batch, policy, &mut rng)?.samples
            } else {
                batch
            };
            let g = gradient(&model, &batch)?;
            if !g.loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite training loss in epoch {epoch}")));
            }
            loss_sum += g.loss * batch.len() as f64;
            adam.step(&mut model.params, &g.params);
        }
        if model.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numerical(format!("non-finite parameters after epoch {epoch}")));
        }
        let val_accuracy = hard_accuracy(&model, &val)?;
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / pool.len() as f64,
            train_accuracy: hard_accuracy(&model, &pool)?,
            val_accuracy,
        });
        if val_accuracy > best_acc {
            best_acc = val_accuracy;
            best = model.clone();
            best_epoch = Some(epoch);
        }
    }
    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch,
        val_indices: val_idx.to_vec(),
    })
}

/// Top-1 accuracy against hard class labels.
pub fn evaluate(model: &MlpClassifier, testset: &[(ImageGrid, usize)]) -> Result<f64> {
    if testset.is_empty() {
        return Err(Error::arg("empty test set"));
    }
    let mut correct = 0usize;
    for (image, class) in testset {
        if model.predict(image)? == *class {
            correct += 1;
        }
    }
    Ok(correct as f64 / testset.len() as f64)
}
