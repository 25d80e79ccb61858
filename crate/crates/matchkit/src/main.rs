//! `matchkit`: one-shot matching classification experiments.
//!
//! Subcommands: `train` (episodic meta-training or the classifier
//! baseline), `eval` (matching / pixel / baseline modes with optional
//! per-episode fine-tuning), `gradcheck` (finite-difference audit of the
//! reverse pass), `sample` (dump one episode for inspection).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use matchkit::commands::{
    self, CliError, EvalArgs, EvalMode, GradcheckArgs, SampleArgs, SplitPart,
};
use matchkit_core::attention::AttentionMode;
use matchkit_core::Real;

#[derive(Parser)]
#[command(name = "matchkit", version, about = "one-shot matching classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run configuration file.
    Train {
        /// TOML run configuration.
        config: PathBuf,
        /// Output directory for checkpoints and the metrics log.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Continue from `<out>/checkpoint.bin`.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate accuracy on sampled episodes.
    Eval(EvalCli),
    /// Compare analytic gradients of the episode loss against central
    /// finite differences, one parameter group at a time.
    Gradcheck {
        /// Input dimension of the check model.
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 2)]
        ways: usize,
        #[arg(long, default_value_t = 1)]
        shots: usize,
        /// Include the support-conditional context stage.
        #[arg(long)]
        fce: bool,
        #[arg(long, default_value_t = 2)]
        fce_steps: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Negative control: breaks one backward rule; the check must fail.
        #[arg(long)]
        inject_bug: bool,
    },
    /// Generate a synthetic vector dataset file.
    GenSynthetic {
        /// Output path for the binary dataset.
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        classes: u32,
        #[arg(long, default_value_t = 16)]
        dim: u32,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Sample one episode and write its images plus a manifest.
    Sample {
        /// Dataset path (image-tree directory or synthetic .bin file).
        dataset: PathBuf,
        #[arg(long, default_value_t = 5)]
        ways: usize,
        #[arg(long, default_value_t = 1)]
        shots: usize,
        #[arg(long, default_value_t = 2)]
        batch_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "episode")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EvalCli {
    /// Dataset path; omit to regenerate the checkpoint's synthetic dataset.
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Matching)]
    mode: ModeArg,
    #[arg(long, default_value_t = 5)]
    ways: usize,
    #[arg(long, default_value_t = 1)]
    shots: usize,
    #[arg(long, default_value_t = 2)]
    batch_per_class: usize,
    #[arg(long, default_value_t = 1000)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = AttentionArg::Softmax)]
    attention: AttentionArg,
    /// Supports dropped by the hard attention mode.
    #[arg(long, default_value_t = 0)]
    knn_drop: usize,
    #[arg(long, default_value_t = 1.0)]
    kde_bandwidth: f64,
    /// Class count of the training split (required without a checkpoint).
    #[arg(long)]
    split_train: Option<u32>,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Quadruple classes by quarter-turn rotations before evaluating.
    #[arg(long)]
    augment_rotations: bool,
    #[arg(long, value_enum, default_value_t = SplitPartArg::Test)]
    split_part: SplitPartArg,
    /// Per-episode adaptation steps on the support set (0 = off;
    /// baseline-softmax defaults to 100).
    #[arg(long, default_value_t = 0)]
    fine_tune_steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    fine_tune_lr: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Matching,
    Pixel,
    BaselineCosine,
    BaselineSoftmax,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttentionArg {
    Softmax,
    Knn,
    Kde,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitPartArg {
    Train,
    Test,
}

fn run() -> Result<(), CliError> {
    match Cli::parse().command {
        Command::Train {
            config,
            out,
            resume,
        } => commands::cmd_train(&config, &out, resume),
        Command::Eval(args) => {
            let attention = match args.attention {
                AttentionArg::Softmax => AttentionMode::SoftmaxCosine,
                AttentionArg::Knn => AttentionMode::Knn {
                    drop: args.knn_drop,
                },
                AttentionArg::Kde => AttentionMode::Kde {
                    bandwidth: args.kde_bandwidth as Real,
                },
            };
            commands::cmd_eval(&EvalArgs {
                dataset: args.dataset,
                checkpoint: args.checkpoint,
                mode: match args.mode {
                    ModeArg::Matching => EvalMode::Matching,
                    ModeArg::Pixel => EvalMode::Pixel,
                    ModeArg::BaselineCosine => EvalMode::BaselineCosine,
                    ModeArg::BaselineSoftmax => EvalMode::BaselineSoftmax,
                },
                ways: args.ways,
                shots: args.shots,
                batch_per_class: args.batch_per_class,
                episodes: args.episodes,
                seed: args.seed,
                attention,
                split_train: args.split_train,
                split_seed: args.split_seed,
                augment_rotations: args.augment_rotations,
                split_part: match args.split_part {
                    SplitPartArg::Train => SplitPart::Train,
                    SplitPartArg::Test => SplitPart::Test,
                },
                fine_tune_steps: args.fine_tune_steps,
                fine_tune_lr: args.fine_tune_lr,
            })
        }
        Command::Gradcheck {
            dim,
            ways,
            shots,
            fce,
            fce_steps,
            seed,
            inject_bug,
        } => commands::cmd_gradcheck(&GradcheckArgs {
            dim,
            ways,
            shots,
            fce,
            fce_steps,
            seed,
            inject_bug,
        }),
        Command::GenSynthetic {
            out,
            classes,
            dim,
            noise,
            seed,
        } => commands::cmd_gen_synthetic(&commands::GenSyntheticArgs {
            out,
            classes,
            dim,
            noise,
            seed,
        }),
        Command::Sample {
            dataset,
            ways,
            shots,
            batch_per_class,
            seed,
            out,
        } => commands::cmd_sample(&SampleArgs {
            dataset,
            ways,
            shots,
            batch_per_class,
            seed,
            out,
        }),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
