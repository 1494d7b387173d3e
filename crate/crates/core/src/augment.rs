//! Pixel-space CutMix and MixUp baselines.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::mask::{sample_lambda, sample_mask, CellBox, Mask, SoftLabel};

/// Image with its (possibly soft) label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub image: ImageGrid,
    pub label: SoftLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    None,
    Cutmix,
    Mixup,
}

impl fmt::Display for AugmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AugmentKind::None => "none",
            AugmentKind::Cutmix => "cutmix",
            AugmentKind::Mixup => "mixup",
        })
    }
}

impl FromStr for AugmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AugmentKind::None),
            "cutmix" => Ok(AugmentKind::Cutmix),
            "mixup" => Ok(AugmentKind::Mixup),
            other => Err(Error::arg(format!("unknown augmentation '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    kind: AugmentKind,
    alpha: f64,
    probability: f64,
}

impl AugmentPolicy {
    pub fn new(kind: AugmentKind, alpha: f64, probability: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&probability) {
            return Err(Error::arg(format!(
                "augmentation probability {probability} outside [0, 1]"
            )));
        }
        if kind != AugmentKind::None && !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::arg(format!("augmentation alpha must be positive, got {alpha}")));
        }
        Ok(Self {
            kind,
            alpha,
            probability,
        })
    }

    pub fn none() -> Self {
        Self {
            kind: AugmentKind::None,
            alpha: 1.0,
            probability: 0.0,
        }
    }

    /// `α = 1.0`, applied with probability 0.5.
    pub fn cutmix() -> Self {
        Self {
            kind: AugmentKind::Cutmix,
            alpha: 1.0,
            probability: 0.5,
        }
    }

    /// `α = 0.2`, applied with probability 0.5.
    pub fn mixup() -> Self {
        Self {
            kind: AugmentKind::Mixup,
            alpha: 0.2,
            probability: 0.5,
        }
    }

    pub fn kind(&self) -> AugmentKind {
        self.kind
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn probability(&self) -> f64 {
        self.probability
    }
}

fn check_pair(a: &Sample, b: &Sample) -> Result<()> {
    a.image.check_shape(&b.image, "augmentation pair")?;
    if a.label.num_classes() != b.label.num_classes() {
        return Err(Error::arg("augmentation pair: labels over different class counts"));
    }
    Ok(())
}

/// Pixels of `a` where the mask is 1, of `b` where it is 0; label weighted by
/// the mask's share of ones.
pub fn cutmix_with_mask(a: &Sample, b: &Sample, mask: &Mask) -> Result<Sample> {
    check_pair(a, b)?;
    let image = crate::sampler::mix_noise(mask, &a.image, &b.image)?;
    let label = SoftLabel::blend(&a.label, &b.label, mask.lambda())?;
    Ok(Sample { image, label })
}

/// CutMix with `λ ~ Beta(alpha, alpha)`. Returns the mixed sample and the
/// cut box.
pub fn cutmix_pair<R: Rng + ?Sized>(a: &Sample, b: &Sample, alpha: f64, rng: &mut R) -> Result<(Sample, CellBox)> {
    check_pair(a, b)?;
    let lambda = sample_lambda(alpha, rng)?;
    let spec = sample_mask(a.image.width(), a.image.height(), lambda, rng)?;
    Ok((cutmix_with_mask(a, b, &spec.mask)?, spec.cut))
}

/// `lambda · a + (1 − lambda) · b` on pixels and labels.
pub fn mixup_with_lambda(a: &Sample, b: &Sample, lambda: f64) -> Result<Sample> {
    check_pair(a, b)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::arg(format!("lambda {lambda} outside [0, 1]")));
    }
    // clamp keeps round-off inside the sources' per-pixel range
    let image = a.image.zip_map(&b.image, |p, q| {
        (lambda * p + (1.0 - lambda) * q).clamp(p.min(q), p.max(q))
    })?;
    let label = SoftLabel::blend(&a.label, &b.label, lambda)?;
    Ok(Sample { image, label })
}

/// MixUp with `λ ~ Beta(alpha, alpha)`. Returns the mixed sample and `λ`.
pub fn mixup_pair<R: Rng + ?Sized>(a: &Sample, b: &Sample, alpha: f64, rng: &mut R) -> Result<(Sample, f64)> {
    check_pair(a, b)?;
    let lambda = sample_lambda(alpha, rng)?;
    Ok((mixup_with_lambda(a, b, lambda)?, lambda))
}

/// How output element `index` was produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pairing {
    pub index: usize,
    pub partner: usize,
    /// Weight of the element itself (realized share for CutMix).
    pub lambda: f64,
    pub cut: Option<CellBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedBatch {
    pub samples: Vec<Sample>,
    /// Empty when the batch passed through.
    pub pairings: Vec<Pairing>,
}

/// Batch-level CutMix/MixUp: with probability `policy.probability` the whole
/// batch is mixed, each element with its partner under one random
/// permutation and its own `λ`; otherwise the batch passes through.
pub fn apply_policy<R: Rng + ?Sized>(batch: &[Sample], policy: &AugmentPolicy, rng: &mut R) -> Result<AugmentedBatch> {
    let passthrough = || AugmentedBatch {
        samples: batch.to_vec(),
        pairings: Vec::new(),
    };
    if policy.kind == AugmentKind::None {
        return Ok(passthrough());
    }
    if batch.len() < 2 {
        return Err(Error::arg(format!(
            "{} needs a batch of at least 2, got {}",
            policy.kind,
            batch.len()
        )));
    }
    if rng.random::<f64>() >= policy.probability {
        return Ok(passthrough());
    }
    let mut partners: Vec<usize> = (0..batch.len()).collect();
    partners.shuffle(rng);

    let mut samples = Vec::with_capacity(batch.len());
    let mut pairings = Vec::with_capacity(batch.len());
    for (index, (sample, &partner)) in batch.iter().zip(&partners).enumerate() {
        let other = &batch[partner];
        let (mixed, lambda, cut) = match policy.kind {
            AugmentKind::Cutmix => {
                let (mixed, cut) = cutmix_pair(sample, other, policy.alpha, rng)?;
                let lambda = 1.0 - cut.area() as f64 / sample.image.len() as f64;
                (mixed, lambda, Some(cut))
            }
            AugmentKind::Mixup => {
                let (mixed, lambda) = mixup_pair(sample, other, policy.alpha, rng)?;
                (mixed, lambda, None)
            }
            AugmentKind::None => unreachable!(),
        };
        samples.push(mixed);
        pairings.push(Pairing {
            index,
            partner,
            lambda,
            cut,
        });
    }
    Ok(AugmentedBatch { samples, pairings })
}
