//! Multi-trial comparison of augmentation methods on synthetic bump data.
//!
//! Every trial draws one real train/test split from the trial seed, shared by
//! all methods, so the rows of a result table are paired comparisons. Method
//! specific randomness (generated records, online augmentation) comes from
//! sub-streams tagged by the method.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentKind, AugmentPolicy, Sample};
use crate::classifier::{evaluate, train, EpochStats, TrainConfig};
use crate::denoiser::{sample_dataset, BumpSpec, ClassModel, Condition};
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::io;
use crate::mask::SoftLabel;
use crate::sampler::{generate_noisecutmix, generate_single, GenRecord, SamplerConfig, SamplerKind};
use crate::schedule::Schedule;
use crate::seeds;

pub const RESULTS_FILE: &str = "results.tsv";

/// Records shown per montage.
const MONTAGE_RECORDS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "original")]
    Original,
    #[serde(rename = "cutmix")]
    Cutmix,
    #[serde(rename = "mixup")]
    Mixup,
    #[serde(rename = "gen_random")]
    GenRandom,
    #[serde(rename = "gen_random+cutmix")]
    GenRandomCutmix,
    #[serde(rename = "gen_random+mixup")]
    GenRandomMixup,
    #[serde(rename = "noisecutmix")]
    Noisecutmix,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Original,
        Method::Cutmix,
        Method::Mixup,
        Method::GenRandom,
        Method::GenRandomCutmix,
        Method::GenRandomMixup,
        Method::Noisecutmix,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Original => "original",
            Method::Cutmix => "cutmix",
            Method::Mixup => "mixup",
            Method::GenRandom => "gen_random",
            Method::GenRandomCutmix => "gen_random+cutmix",
            Method::GenRandomMixup => "gen_random+mixup",
            Method::Noisecutmix => "noisecutmix",
        }
    }

    /// File-name friendly tag.
    pub fn slug(self) -> String {
        self.tag().replace('+', "_")
    }

    fn generation(self) -> Option<GenerationMode> {
        match self {
            Method::GenRandom | Method::GenRandomCutmix | Method::GenRandomMixup => Some(GenerationMode::Random),
            Method::Noisecutmix => Some(GenerationMode::Noisecutmix),
            _ => None,
        }
    }

    fn online(self) -> AugmentKind {
        match self {
            Method::Cutmix | Method::GenRandomCutmix => AugmentKind::Cutmix,
            Method::Mixup | Method::GenRandomMixup => AugmentKind::Mixup,
            _ => AugmentKind::None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::arg(format!("unknown method '{s}' (expected one of {})", method_list())))
    }
}

fn method_list() -> String {
    Method::ALL.map(Method::tag).join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenerationMode {
    /// Class-conditional images of uniformly drawn classes.
    Random,
    /// Two-class compositions of uniformly drawn distinct pairs.
    Noisecutmix,
}

/// All knobs of one harness run, read from a flat JSON document. Missing
/// keys take the defaults below; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub num_classes: usize,
    pub width: usize,
    pub height: usize,
    pub bump_sigma: f64,
    pub noise_var: f64,
    pub n_train_per_class: usize,
    pub n_test_per_class: usize,

    pub sampler: SamplerKind,
    pub num_inference_steps: usize,
    pub guidance_scale: f64,
    pub schedule_steps: usize,

    /// Generated records per real training sample.
    pub augmentation_ratio: f64,
    pub noisecutmix_alpha: f64,
    pub cutmix_alpha: f64,
    pub cutmix_probability: f64,
    pub mixup_alpha: f64,
    pub mixup_probability: f64,

    pub hidden: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub val_fraction: f64,

    pub methods: Vec<Method>,
    pub trials: usize,
    pub master_seed: u64,
    pub output_dir: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            width: 8,
            height: 8,
            bump_sigma: 1.5,
            noise_var: 0.25,
            n_train_per_class: 10,
            n_test_per_class: 100,
            sampler: SamplerKind::DpmSolverPp2m,
            num_inference_steps: 25,
            guidance_scale: 7.5,
            schedule_steps: 1000,
            augmentation_ratio: 1.0,
            noisecutmix_alpha: 1.0,
            cutmix_alpha: 1.0,
            cutmix_probability: 0.5,
            mixup_alpha: 0.2,
            mixup_probability: 0.5,
            hidden: 64,
            batch_size: 64,
            learning_rate: 0.001,
            epochs: 30,
            val_fraction: 0.2,
            methods: Method::ALL.to_vec(),
            trials: 5,
            master_seed: 0,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.trials < 1 {
            return bad("trials must be at least 1".into());
        }
        if !(self.augmentation_ratio >= 0.0 && self.augmentation_ratio.is_finite()) {
            return bad(format!("augmentation_ratio {} must be >= 0", self.augmentation_ratio));
        }
        if self.methods.is_empty() {
            return bad("method list is empty".into());
        }
        if self.n_test_per_class == 0 {
            return bad("n_test_per_class must be at least 1".into());
        }
        let wrap = |r: Result<()>| r.map_err(|e| Error::InvalidConfig(e.to_string()));
        wrap(self.bump_spec().models().map(|_| ()))?;
        let sched = wrap(Schedule::cosine(self.schedule_steps).map(|_| ()));
        sched?;
        if self.num_inference_steps == 0 || self.num_inference_steps > self.schedule_steps {
            return bad(format!(
                "num_inference_steps {} outside 1..={}",
                self.num_inference_steps, self.schedule_steps
            ));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return bad(format!("guidance_scale {} must be >= 0", self.guidance_scale));
        }
        if self.noisecutmix_alpha.is_nan() || self.noisecutmix_alpha <= 0.0 {
            return bad(format!("noisecutmix_alpha {} must be > 0", self.noisecutmix_alpha));
        }
        wrap(self.policy(AugmentKind::Cutmix).map(|_| ()))?;
        wrap(self.policy(AugmentKind::Mixup).map(|_| ()))?;
        wrap(self.train_config(0).validate())?;
        Ok(())
    }

    pub fn bump_spec(&self) -> BumpSpec {
        BumpSpec {
            num_classes: self.num_classes,
            width: self.width,
            height: self.height,
            bump_sigma: self.bump_sigma,
            noise_var: self.noise_var,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            kind: self.sampler,
            num_inference_steps: self.num_inference_steps,
            guidance_scale: self.guidance_scale,
            schedule_steps: self.schedule_steps,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            hidden: self.hidden,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            val_fraction: self.val_fraction,
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn policy(&self, kind: AugmentKind) -> Result<AugmentPolicy> {
        match kind {
            AugmentKind::None => Ok(AugmentPolicy::none()),
            AugmentKind::Cutmix => AugmentPolicy::new(kind, self.cutmix_alpha, self.cutmix_probability),
            AugmentKind::Mixup => AugmentPolicy::new(kind, self.mixup_alpha, self.mixup_probability),
        }
    }

    /// Number of generated records for a real training set of `n_real`.
    pub fn generated_count(&self, n_real: usize) -> usize {
        (self.augmentation_ratio * n_real as f64).round() as usize
    }
}

/// Real data of one trial: class models, training and test samples.
#[derive(Debug, Clone)]
pub struct TrialData {
    pub models: Vec<ClassModel>,
    pub schedule: Schedule,
    pub train: Vec<Sample>,
    pub test: Vec<(ImageGrid, usize)>,
}

impl TrialData {
    pub fn build(cfg: &ExperimentConfig, trial_seed: u64) -> Result<Self> {
        let models = cfg.bump_spec().models()?;
        let schedule = Schedule::cosine(cfg.schedule_steps)?;
        let k = models.len();
        let mut rng = seeds::rng_from(seeds::derive_tag(trial_seed, "train-data"));
        let train = sample_dataset(&models, cfg.n_train_per_class, &mut rng)
            .into_iter()
            .map(|(image, c)| {
                Ok(Sample {
                    image,
                    label: SoftLabel::one_hot(c, k)?,
                })
            })
            .collect::<Result<_>>()?;
        let mut rng = seeds::rng_from(seeds::derive_tag(trial_seed, "test-data"));
        let test = sample_dataset(&models, cfg.n_test_per_class, &mut rng);
        Ok(Self {
            models,
            schedule,
            train,
            test,
        })
    }
}

/// Generates `count` records, record `i` seeded from `(root, i)`. Runs in
/// parallel; the output does not depend on the thread count.
pub fn generate_records(
    kind: GenerationMode,
    count: usize,
    root: u64,
    cfg: &ExperimentConfig,
    models: &[ClassModel],
    schedule: &Schedule,
) -> Result<Vec<GenRecord>> {
    let sampler = cfg.sampler_config();
    let k = models.len();
    if kind == GenerationMode::Noisecutmix && k < 2 {
        return Err(Error::arg("noisecutmix needs at least two classes"));
    }
    (0..count)
        .into_par_iter()
        .map(|i| {
            let seed = seeds::derive(root, i as u64);
            let mut pick = seeds::rng_stream(seed, 2);
            match kind {
                GenerationMode::Random => {
                    let c = pick.random_range(0..k);
                    generate_single(Condition::Class(c), &sampler, schedule, models, seed)
                }
                GenerationMode::Noisecutmix => {
                    let a = pick.random_range(0..k);
                    let mut b = pick.random_range(0..k - 1);
                    if b >= a {
                        b += 1;
                    }
                    generate_noisecutmix(a, b, &sampler, schedule, models, cfg.noisecutmix_alpha, seed)
                }
            }
        })
        .collect()
}

/// Outcome of training and evaluating one method in one trial.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub method: Method,
    pub accuracy: f64,
    /// Real plus generated samples, before the validation split.
    pub train_set_size: usize,
    pub records: Vec<GenRecord>,
    pub history: Vec<EpochStats>,
    pub best_epoch: Option<usize>,
}

/// Builds the method's training set, trains and evaluates on the held-out
/// real test set.
pub fn run_method(method: Method, cfg: &ExperimentConfig, trial_seed: u64) -> Result<MethodRun> {
    let data = TrialData::build(cfg, trial_seed)?;
    run_method_on(method, cfg, trial_seed, &data)
}

pub fn run_method_on(method: Method, cfg: &ExperimentConfig, trial_seed: u64, data: &TrialData) -> Result<MethodRun> {
    let records = match method.generation() {
        Some(kind) => {
            let tag = match kind {
                GenerationMode::Random => "generate/random",
                GenerationMode::Noisecutmix => "generate/noisecutmix",
            };
            let count = cfg.generated_count(data.train.len());
            generate_records(
                kind,
                count,
                seeds::derive_tag(trial_seed, tag),
                cfg,
                &data.models,
                &data.schedule,
            )?
        }
        None => Vec::new(),
    };
    let synthetic: Vec<Sample> = records
        .iter()
        .map(|r| Sample {
            image: r.image.clone(),
            label: r.label.clone(),
        })
        .collect();

    let policy = cfg.policy(method.online())?;
    let outcome = train(
        &data.train,
        &synthetic,
        &cfg.train_config(seeds::derive_tag(trial_seed, "train")),
        &policy,
    )?;
    if outcome.val_indices.iter().any(|&i| i >= data.train.len()) {
        return Err(Error::InvalidDataset(
            "validation split reached past the real samples".into(),
        ));
    }
    let accuracy = evaluate(&outcome.model, &data.test)?;
    Ok(MethodRun {
        method,
        accuracy,
        train_set_size: data.train.len() + synthetic.len(),
        records,
        history: outcome.history,
        best_epoch: outcome.best_epoch,
    })
}

/// Seed of trial `index`, shared by every method.
pub fn trial_seed(master_seed: u64, index: usize) -> u64 {
    seeds::derive(master_seed, index as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: String,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single trial.
    pub std: f64,
}

impl ResultRow {
    pub fn new(method: impl Into<String>, accuracies: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&accuracies);
        Self {
            method: method.into(),
            accuracies,
            mean,
            std,
        }
    }
}

/// Mean and `n − 1` standard deviation; the deviation of one value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// `√((s₁² + s₂²) / 2)`.
pub fn pooled_std(a: &ResultRow, b: &ResultRow) -> f64 {
    ((a.std * a.std + b.std * b.std) / 2.0).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub trials: usize,
    pub rows: Vec<ResultRow>,
}

const SINGLE_TRIAL_NOTE: &str = "single trial: std reported as 0";

impl ResultTable {
    pub fn row(&self, method: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Tab-separated: `method`, one column per trial, `mean`, `std`, `note`.
    /// Accuracies are fractions written with round-trip precision.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_path(path)?;
        let mut header = vec!["method".to_string()];
        header.extend((1..=self.trials).map(|i| format!("trial_{i}")));
        header.extend(["mean", "std", "note"].map(String::from));
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.method.clone()];
            rec.extend(row.accuracies.iter().map(|a| a.to_string()));
            rec.push(row.mean.to_string());
            rec.push(row.std.to_string());
            rec.push(if self.trials == 1 {
                SINGLE_TRIAL_NOTE.to_string()
            } else {
                String::new()
            });
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().delimiter(b'\t').from_path(path)?;
        let header = r.headers()?.clone();
        if header.len() < 4 || &header[0] != "method" {
            return Err(Error::Format("result table header".into()));
        }
        let trials = header.len() - 4;
        let parse = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad number '{s}'")));
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let accuracies = (1..=trials).map(|i| parse(&rec[i])).collect::<Result<Vec<_>>>()?;
            rows.push(ResultRow {
                method: rec[0].to_string(),
                accuracies,
                mean: parse(&rec[trials + 1])?,
                std: parse(&rec[trials + 2])?,
            });
        }
        Ok(Self { trials, rows })
    }

    /// Plain-text table: accuracy in percent as mean (± std).
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
        let mut out = format!("{:<width$} | accuracy [%] over {} trial(s)\n", "method", self.trials);
        out.push_str(&format!("{}-+-{}\n", "-".repeat(width), "-".repeat(28)));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<width$} | {:6.2} (± {:.2})\n",
                r.method,
                100.0 * r.mean,
                100.0 * r.std
            ));
        }
        if self.trials == 1 {
            out.push_str(&format!("note: {SINGLE_TRIAL_NOTE}\n"));
        }
        out
    }
}

fn ensure_writable(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"")?;
    fs::remove_file(&probe)?;
    Ok(())
}

/// Runs every configured method for every trial and writes `results.tsv`,
/// the config, provenance sidecars of all generated records and a montage
/// per generating method into `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ResultTable> {
    cfg.validate()?;
    ensure_writable(out_dir)?;
    fs::create_dir_all(out_dir.join("provenance"))?;
    fs::create_dir_all(out_dir.join("grids"))?;
    fs::write(out_dir.join("config.json"), cfg.to_json() + "\n")?;

    let trials: Vec<TrialData> = (0..cfg.trials)
        .map(|i| TrialData::build(cfg, trial_seed(cfg.master_seed, i)))
        .collect::<Result<_>>()?;
    let jobs: Vec<(Method, usize)> = cfg
        .methods
        .iter()
        .flat_map(|&m| (0..cfg.trials).map(move |i| (m, i)))
        .collect();
    let runs: Vec<MethodRun> = jobs
        .par_iter()
        .map(|&(m, i)| run_method_on(m, cfg, trial_seed(cfg.master_seed, i), &trials[i]))
        .collect::<Result<_>>()?;

    for ((method, i), run) in jobs.iter().zip(&runs) {
        if run.records.is_empty() {
            continue;
        }
        let stem = format!("{}_trial{}", method.slug(), i + 1);
        io::write_provenance(&out_dir.join("provenance").join(format!("{stem}.tsv")), &run.records)?;
        if *i == 0 {
            let shown = &run.records[..run.records.len().min(MONTAGE_RECORDS)];
            io::export_grid(shown, &out_dir.join("grids").join(format!("{stem}.pgm")))?;
        }
    }

    let rows = cfg
        .methods
        .iter()
        .map(|m| {
            let accs = jobs
                .iter()
                .zip(&runs)
                .filter(|((jm, _), _)| jm == m)
                .map(|(_, r)| r.accuracy)
                .collect();
            ResultRow::new(m.tag(), accs)
        })
        .collect();
    let table = ResultTable {
        trials: cfg.trials,
        rows,
    };
    table.write(&out_dir.join(RESULTS_FILE))?;
    Ok(table)
}
