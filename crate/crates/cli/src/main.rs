//! Command-line front end: data generation, augmentation, training,
//! evaluation and the multi-trial comparison.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use noisecutmix::augment::{apply_policy, AugmentKind, AugmentPolicy, Sample};
use noisecutmix::classifier::{evaluate, train};
use noisecutmix::denoiser::make_bump_dataset;
use noisecutmix::harness::{self, ExperimentConfig, GenerationMode, Method, ResultTable};
use noisecutmix::io::{self, StoredSample};
use noisecutmix::mask::{Mask, SoftLabel};
use noisecutmix::schedule::Schedule;
use noisecutmix::{seeds, Error, ImageGrid, Result};

#[derive(Parser)]
#[command(
    name = "noisecutmix",
    version,
    about = "Noise-space CutMix on an analytic diffusion denoiser"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// JSON experiment config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(p) => ExperimentConfig::load(p),
            None => Ok(ExperimentConfig::default()),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GenMode {
    Random,
    Noisecutmix,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    None,
    Cutmix,
    Mixup,
}

impl From<PolicyArg> for AugmentKind {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::None => AugmentKind::None,
            PolicyArg::Cutmix => AugmentKind::Cutmix,
            PolicyArg::Mixup => AugmentKind::Mixup,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sample real bump images with one-hot labels.
    Dataset {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Generate synthetic images and their provenance.
    Generate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_enum, default_value = "noisecutmix")]
        mode: GenMode,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory receiving samples.bin, provenance.tsv and grid.pgm.
        #[arg(long, env = "NOISECUTMIX_OUTPUT_DIR")]
        output_dir: PathBuf,
    },
    /// Apply CutMix or MixUp to a sample file as one batch.
    Augment {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        policy: PolicyArg,
        /// Overrides the configured probability of mixing the batch.
        #[arg(long)]
        probability: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train a classifier on real (and optionally synthetic) samples.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        synthetic: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "none")]
        policy: PolicyArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        model: PathBuf,
        /// Per-epoch loss and validation accuracy.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Top-1 accuracy of a model on a sample file.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Run every method for every trial and write the result table.
    Experiment {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, env = "NOISECUTMIX_OUTPUT_DIR")]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
        /// Comma-separated method tags.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print a result table.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_) | Error::InvalidConfig(_) | Error::InvalidDataset(_) => 2,
        Error::Io(_) | Error::Format(_) => 3,
        Error::Numerical(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn to_samples(stored: Vec<StoredSample>) -> Vec<Sample> {
    stored
        .into_iter()
        .map(|s| Sample {
            image: s.image,
            label: s.label,
        })
        .collect()
}

fn write_plain(path: &Path, samples: &[Sample]) -> Result<()> {
    io::write_samples(path, samples.iter().map(|s| (&s.image, &s.label, None::<&Mask>)))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Dataset {
            config,
            per_class,
            seed,
            output,
        } => {
            let cfg = config.load()?;
            let k = cfg.num_classes;
            let (_, data) = make_bump_dataset(&cfg.bump_spec(), seed, per_class)?;
            let labels = data
                .iter()
                .map(|(_, c)| SoftLabel::one_hot(*c, k))
                .collect::<Result<Vec<_>>>()?;
            io::write_samples(&output, data.iter().zip(&labels).map(|((img, _), l)| (img, l, None)))?;
            println!("wrote {} samples to {}", data.len(), output.display());
        }
        Command::Generate {
            config,
            mode,
            count,
            seed,
            output_dir,
        } => {
            let cfg = config.load()?;
            std::fs::create_dir_all(&output_dir)?;
            let models = cfg.bump_spec().models()?;
            let schedule = Schedule::cosine(cfg.schedule_steps)?;
            let mode = match mode {
                GenMode::Random => GenerationMode::Random,
                GenMode::Noisecutmix => GenerationMode::Noisecutmix,
            };
            let records = harness::generate_records(mode, count, seed, &cfg, &models, &schedule)?;
            io::write_samples(
                &output_dir.join("samples.bin"),
                records.iter().map(|r| (&r.image, &r.label, r.mask.as_ref())),
            )?;
            io::write_provenance(&output_dir.join("provenance.tsv"), &records)?;
            io::export_grid(&records[..records.len().min(16)], &output_dir.join("grid.pgm"))?;
            println!("wrote {} records to {}", records.len(), output_dir.display());
        }
        Command::Augment {
            config,
            input,
            policy,
            probability,
            seed,
            output,
        } => {
            let cfg = config.load()?;
            let samples = to_samples(io::read_samples(&input)?);
            let mut policy = cfg.policy(policy.into())?;
            if let Some(p) = probability {
                policy = AugmentPolicy::new(policy.kind(), policy.alpha(), p)?;
            }
            let out = apply_policy(&samples, &policy, &mut seeds::rng_from(seed))?;
            write_plain(&output, &out.samples)?;
            println!("mixed {} of {} samples", out.pairings.len(), out.samples.len());
        }
        Command::Train {
            config,
            real,
            synthetic,
            policy,
            seed,
            model,
            history,
        } => {
            let cfg = config.load()?;
            let real = to_samples(io::read_samples(&real)?);
            let synthetic = match synthetic {
                Some(p) => to_samples(io::read_samples(&p)?),
                None => Vec::new(),
            };
            let outcome = train(&real, &synthetic, &cfg.train_config(seed), &cfg.policy(policy.into())?)?;
            io::write_model(&model, &outcome.model)?;
            if let Some(h) = history {
                io::write_history(&h, &outcome.history)?;
            }
            let best = outcome.best_epoch.map_or("none".into(), |e| e.to_string());
            println!("trained on {} samples, best epoch {best}", real.len() + synthetic.len());
        }
        Command::Evaluate { model, input } => {
            let model = io::read_model(&model)?;
            let test: Vec<(ImageGrid, usize)> = io::read_samples(&input)?
                .into_iter()
                .map(|s| (s.label.argmax(), s.image))
                .map(|(c, img)| (img, c))
                .collect();
            println!("accuracy {:.4}", evaluate(&model, &test)?);
        }
        Command::Experiment {
            config,
            output_dir,
            trials,
            methods,
            seed,
        } => {
            let mut cfg = config.load()?;
            if let Some(t) = trials {
                cfg.trials = t;
            }
            if let Some(ms) = methods {
                cfg.methods = ms.iter().map(|m| m.parse::<Method>()).collect::<Result<_>>()?;
            }
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            let dir = output_dir
                .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
                .ok_or_else(|| {
                    Error::InvalidArgument("no output directory (--output-dir or NOISECUTMIX_OUTPUT_DIR)".into())
                })?;
            let table = harness::run_experiment(&cfg, &dir)?;
            print!("{}", table.render());
        }
        Command::Report { input } => {
            print!("{}", ResultTable::read(&input)?.render());
        }
    }
    Ok(())
}
