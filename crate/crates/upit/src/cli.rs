//! Command-line front end.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use upit_core::eval::Pairing;
use upit_core::mixgen::Split;

use crate::config::{CriterionName, LossName, MaskName, Settings};
use crate::corpus::{self, ToyCorpus};
use crate::error::{CliError, Result};
use crate::pipeline;

#[derive(Debug, Parser)]
#[command(name = "upit", version, about = "Utterance-level PIT speech separation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic band-limited corpus (one directory per speaker).
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        voices: usize,
        #[arg(long, default_value_t = 20)]
        utterances: usize,
        #[arg(long, default_value_t = 3200)]
        min_len: usize,
        #[arg(long, default_value_t = 4800)]
        max_len: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Build a mixture manifest and its audio from a corpus.
    Mixgen {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        valid: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
        #[arg(long)]
        open_speakers: Option<usize>,
        /// Pad every mixture with silent channels up to this count.
        #[arg(long)]
        channels: Option<usize>,
        #[arg(long)]
        order_by_energy: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Train a mask estimator on a manifest's train split.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint_every: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Separate one mixture WAV with a trained checkpoint.
    Separate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the estimated masks as binary grids.
        #[arg(long)]
        write_masks: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Reconstruct a split with all four ideal masks and score them.
    Oracle {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
        #[arg(long)]
        limit: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint with default and optimal output assignment.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Splits to score; defaults to valid and test.
        #[arg(long, value_enum, value_delimiter = ',')]
        split: Vec<SplitName>,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, value_enum)]
        pairing: Option<PairingName>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitName {
    Train,
    Valid,
    Test,
}

impl From<SplitName> for Split {
    fn from(s: SplitName) -> Split {
        match s {
            SplitName::Train => Split::Train,
            SplitName::Valid => Split::Valid,
            SplitName::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PairingName {
    /// Stream k scored against the reference it matches best over the utterance.
    Best,
    /// Stream k scored against reference k.
    Index,
}

/// Flags shared by every subcommand. Each one overrides the config file.
#[derive(Debug, Default, Args)]
struct Common {
    /// TOML settings file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    speakers: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    snr_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    snr_max: Option<f64>,
    #[arg(long)]
    frame_len: Option<usize>,
    #[arg(long)]
    hop: Option<usize>,
    #[arg(long, value_enum)]
    mask: Option<MaskName>,
    #[arg(long, value_enum)]
    loss: Option<LossName>,
    #[arg(long, value_enum)]
    criterion: Option<CriterionName>,
    #[arg(long)]
    meta_frames: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    lr_floor: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    minibatch: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl Common {
    fn settings(&self) -> Result<Settings> {
        let mut s = Settings::load(self.config.as_deref())?;
        set(&mut s.seed, self.seed);
        if self.threads.is_some() {
            s.threads = self.threads;
        }
        set(&mut s.mixgen.speakers, self.speakers);
        set(&mut s.mixgen.snr_min, self.snr_min);
        set(&mut s.mixgen.snr_max, self.snr_max);
        set(&mut s.stft.frame_len, self.frame_len);
        set(&mut s.stft.hop, self.hop);
        set(&mut s.train.mask, self.mask);
        set(&mut s.train.loss, self.loss);
        set(&mut s.train.criterion, self.criterion);
        set(&mut s.train.meta_frames, self.meta_frames);
        set(&mut s.eval.meta_frames, self.meta_frames);
        set(&mut s.train.lr, self.lr);
        set(&mut s.train.lr_decay, self.lr_decay);
        set(&mut s.train.lr_floor, self.lr_floor);
        set(&mut s.train.epochs, self.epochs);
        set(&mut s.train.minibatch, self.minibatch);
        set(&mut s.train.dropout, self.dropout);
        Ok(s)
    }
}

fn with_pool<T>(settings: &Settings, job: impl FnOnce() -> Result<T> + Send) -> Result<T>
where
    T: Send,
{
    settings.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = settings.threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    pool.install(job)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::SynthCorpus {
            out,
            voices,
            utterances,
            min_len,
            max_len,
            common,
        } => {
            let s = common.settings()?;
            let spec = ToyCorpus {
                voices,
                utterances,
                min_len,
                max_len,
                sample_rate: s.stft.sample_rate,
                seed: s.seed,
            };
            corpus::write_toy_corpus(&out, &spec)
        }
        Command::Mixgen {
            corpus,
            out,
            train,
            valid,
            test,
            open_speakers,
            channels,
            order_by_energy,
            common,
        } => {
            let mut s = common.settings()?;
            set(&mut s.mixgen.train, train);
            set(&mut s.mixgen.valid, valid);
            set(&mut s.mixgen.test, test);
            set(&mut s.mixgen.open_speakers, open_speakers);
            if channels.is_some() {
                s.mixgen.channels = channels;
            }
            s.mixgen.order_by_energy |= order_by_energy;
            with_pool(&s, || pipeline::mixgen(&s, &corpus, &out).map(drop))
        }
        Command::Train {
            manifest,
            out,
            checkpoint_every,
            common,
        } => {
            let mut s = common.settings()?;
            set(&mut s.train.checkpoint_every, checkpoint_every);
            with_pool(&s, || pipeline::train(&s, &manifest, &out).map(drop))
        }
        Command::Separate {
            checkpoint,
            input,
            out,
            write_masks,
            common,
        } => {
            let s = common.settings()?;
            with_pool(&s, || pipeline::separate(&s, &checkpoint, &input, &out, write_masks).map(drop))
        }
        Command::Oracle {
            manifest,
            out,
            split,
            limit,
            common,
        } => {
            let s = common.settings()?;
            with_pool(&s, || pipeline::oracle(&s, &manifest, split.into(), &out, limit).map(drop))
        }
        Command::Evaluate {
            checkpoint,
            manifest,
            out,
            split,
            limit,
            pairing,
            common,
        } => {
            let mut s = common.settings()?;
            match pairing {
                Some(PairingName::Best) => s.eval.pairing = Pairing::UtteranceBest,
                Some(PairingName::Index) => s.eval.pairing = Pairing::Index,
                None => {}
            }
            let splits: Vec<Split> = if split.is_empty() {
                vec![Split::Valid, Split::Test]
            } else {
                split.into_iter().map(Split::from).collect()
            };
            with_pool(&s, || {
                let reports = pipeline::evaluate(&s, &checkpoint, &manifest, &splits, &out, limit)?;
                let named: Vec<(&str, _)> = reports.iter().map(|(sp, r)| (sp.name(), r)).collect();
                print!("{}", crate::report::summary_table(&named));
                Ok(())
            })
        }
    }
}

/// Parses `argv` (program name first), runs one subcommand and returns the
/// process exit code: 0 on success, 2 for usage errors, 3..=7 per
/// [`CliError::exit_code`].
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("upit: {e}");
            e.exit_code()
        }
    }
}
