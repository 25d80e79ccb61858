//! Implementations behind the CLI subcommands, returning typed errors that
//! map onto the stable exit codes (1 config, 2 data, 3 numeric, 4 failed
//! gradient check).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use matchkit_core::attention::AttentionMode;
use matchkit_core::encoder::ModelParams;
use matchkit_core::episode::{
    augment_rotations, mix_seed, sample_episode, split_classes, ClassDataset, SplitSpec,
};
use matchkit_core::eval::{embed_episode, report_from_accuracies, EmbedStrategy};
use matchkit_core::gradcheck::{episode_gradient_check, GRADCHECK_TOL};
use matchkit_core::train::{
    eval_seed, fine_tune, train_baseline_classifier, classifier_train_accuracy, FineTuneMode,
    Trainer,
};
use matchkit_core::{Real, Tensor};

use crate::config::{
    parse_canonical, DatasetKind, Objective, ResolvedConfig, RunConfigFile,
};
use crate::exit_codes;
use crate::metrics::MetricsWriter;
use crate::parallel;
use crate::{ckpt_io, data};

/// A failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for CliError {}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError {
        code: exit_codes::CONFIG,
        message: msg.into(),
    }
}

fn data_err(msg: impl Into<String>) -> CliError {
    CliError {
        code: exit_codes::DATA,
        message: msg.into(),
    }
}

impl From<crate::config::ConfigError> for CliError {
    fn from(e: crate::config::ConfigError) -> Self {
        config_err(e.to_string())
    }
}

impl From<data::DataError> for CliError {
    fn from(e: data::DataError) -> Self {
        data_err(e.to_string())
    }
}

impl From<ckpt_io::CheckpointError> for CliError {
    fn from(e: ckpt_io::CheckpointError) -> Self {
        data_err(e.to_string())
    }
}

impl From<matchkit_core::Error> for CliError {
    fn from(e: matchkit_core::Error) -> Self {
        let code = match &e {
            matchkit_core::Error::NumericAbort { .. } => exit_codes::NUMERIC,
            matchkit_core::Error::Config(_) => exit_codes::CONFIG,
            _ => exit_codes::DATA,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

fn io_err(context: &str, e: std::io::Error) -> CliError {
    data_err(format!("{context}: {e}"))
}

// ---------------------------------------------------------------------------
// Dataset assembly shared by train and eval
// ---------------------------------------------------------------------------

/// Builds the dataset and class split a resolved configuration describes.
/// For image trees with rotation augmentation the split is made at base
/// class granularity first, so all four rotations of a class land on the
/// same side.
pub fn prepare_dataset(
    resolved: &ResolvedConfig,
    dataset_path_override: Option<&Path>,
) -> Result<(ClassDataset, SplitSpec), CliError> {
    let path = dataset_path_override
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from(&resolved.dataset.path));
    let (dataset, split) = match resolved.dataset.kind {
        DatasetKind::Synthetic => {
            let ds = matchkit_core::episode::gen_synthetic(
                resolved.dataset.classes as usize,
                resolved.dataset.dim as usize,
                resolved.dataset.noise as Real,
                resolved.dataset.seed,
            )?;
            let split = split_classes(
                &ds,
                resolved.split.train_classes as usize,
                resolved.split.seed,
            )?;
            (ds, split)
        }
        DatasetKind::SyntheticFile => {
            let ds = data::load_synthetic(&path)?;
            let split = split_classes(
                &ds,
                resolved.split.train_classes as usize,
                resolved.split.seed,
            )?;
            (ds, split)
        }
        DatasetKind::ImageTree => {
            let (base, _names) = data::load_image_class_tree(&path)?;
            let split = split_classes(
                &base,
                resolved.split.train_classes as usize,
                resolved.split.seed,
            )?;
            if resolved.dataset.augment_rotations {
                (augment_rotations(&base)?, split.expand_rotations())
            } else {
                (base, split)
            }
        }
    };
    Ok((dataset, split))
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn cmd_train(config_path: &Path, out_dir: &Path, resume: bool) -> Result<(), CliError> {
    let resolved = RunConfigFile::load(config_path)?.resolve()?;
    let config_text = resolved.canonical_text();
    let config_hash = resolved.trajectory_hash();
    std::fs::create_dir_all(out_dir).map_err(|e| io_err("creating output directory", e))?;
    let (dataset, split) = prepare_dataset(&resolved, None)?;
    let ckpt_path = out_dir.join("checkpoint.bin");
    let metrics_path = out_dir.join("metrics.log");

    match resolved.train.objective {
        Objective::Matching => {
            let train_config = resolved.train_config();
            let mut trainer = if resume {
                if !ckpt_path.exists() {
                    return Err(data_err(format!(
                        "--resume given but {} does not exist",
                        ckpt_path.display()
                    )));
                }
                let ckpt = ckpt_io::load(&ckpt_path)?;
                Trainer::resume(train_config, &dataset, split, config_text, config_hash, &ckpt)?
            } else {
                Trainer::new(train_config, &dataset, split, config_text, config_hash)?
            };
            let mut metrics = if resume {
                MetricsWriter::append(&metrics_path)
            } else {
                MetricsWriter::create(&metrics_path)
            }
            .map_err(|e| io_err("opening metrics log", e))?;

            while !trainer.finished() {
                let report = match trainer.step() {
                    Ok(r) => r,
                    Err(e @ matchkit_core::Error::NumericAbort { .. }) => {
                        // params are still the last good state
                        let diag = out_dir.join("diagnostic.ckpt");
                        ckpt_io::save(&trainer.checkpoint(), &diag)?;
                        return Err(CliError {
                            code: exit_codes::NUMERIC,
                            message: format!(
                                "{e}; diagnostic checkpoint written to {}",
                                diag.display()
                            ),
                        });
                    }
                    Err(e) => return Err(e.into()),
                };
                let eval = if trainer.config.eval_every > 0
                    && report.step % trainer.config.eval_every == 0
                {
                    let r = trainer.evaluate_heldout(
                        trainer.config.eval_episodes,
                        eval_seed(trainer.config.seed, report.step),
                    )?;
                    println!(
                        "step {}  loss {:.4}  heldout acc={:.4} ±{:.4}",
                        report.step, report.loss, r.accuracy, r.ci95
                    );
                    Some(r.accuracy)
                } else {
                    None
                };
                metrics
                    .record(report.step, report.loss, eval)
                    .map_err(|e| io_err("writing metrics", e))?;
                if resolved.train.checkpoint_every > 0
                    && report.step % resolved.train.checkpoint_every == 0
                {
                    ckpt_io::save(&trainer.checkpoint(), &ckpt_path)?;
                }
            }
            metrics.flush().map_err(|e| io_err("flushing metrics", e))?;
            ckpt_io::save(&trainer.checkpoint(), &ckpt_path)?;
            println!(
                "trained {} episodes; checkpoint {}",
                trainer.episodes_done(),
                ckpt_path.display()
            );
        }
        Objective::BaselineClassifier => {
            if resume {
                return Err(config_err("--resume is not supported for the baseline objective"));
            }
            let model = resolved.model_spec();
            let params =
                train_baseline_classifier(&dataset, &split, &model, &resolved.baseline_config())?;
            let acc = classifier_train_accuracy(&params, &model, &dataset, &split)?;
            let ckpt = baseline_checkpoint(params, &config_text, config_hash, resolved.train.seed);
            ckpt_io::save(&ckpt, &ckpt_path)?;
            println!(
                "baseline classifier trained; train acc={acc:.4}; checkpoint {}",
                ckpt_path.display()
            );
        }
    }
    Ok(())
}

/// Wraps baseline parameters as a checkpoint. The baseline has no optimizer
/// state or sampling stream to resume; the seed is recorded raw.
fn baseline_checkpoint(
    params: ModelParams,
    config_text: &str,
    config_hash: u64,
    seed: u64,
) -> matchkit_core::checkpoint::Checkpoint {
    let mut rng_seed = [0u8; 32];
    rng_seed[..8].copy_from_slice(&seed.to_le_bytes());
    matchkit_core::checkpoint::Checkpoint {
        config_text: config_text.to_string(),
        config_hash,
        episode: 0,
        params,
        adam_m: Default::default(),
        adam_v: Default::default(),
        adam_t: 0,
        rng_seed,
        rng_word_pos: 0,
    }
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub mode: EvalMode,
    pub ways: usize,
    pub shots: usize,
    pub batch_per_class: usize,
    pub episodes: usize,
    pub seed: u64,
    pub attention: AttentionMode,
    pub split_train: Option<u32>,
    pub split_seed: u64,
    pub augment_rotations: bool,
    pub split_part: SplitPart,
    pub fine_tune_steps: usize,
    pub fine_tune_lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Matching,
    Pixel,
    BaselineCosine,
    BaselineSoftmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPart {
    Train,
    Test,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let report = run_eval(args)?;
    println!(
        "acc={:.4} ±{:.4} n={}",
        report.accuracy, report.ci95, report.n_episodes
    );
    Ok(())
}

/// The evaluation behind `cmd_eval`, exposed for tests.
pub fn run_eval(args: &EvalArgs) -> Result<matchkit_core::eval::EvalReport, CliError> {
    // checkpoint / mode compatibility
    let ckpt = match (args.mode, &args.checkpoint) {
        (EvalMode::Pixel, Some(_)) => {
            return Err(config_err("pixel mode is training-free; drop --checkpoint"))
        }
        (EvalMode::Pixel, None) => None,
        (_, None) => {
            return Err(config_err(format!(
                "mode {:?} needs --checkpoint",
                args.mode
            )))
        }
        (_, Some(path)) => Some(ckpt_io::load(path)?),
    };
    let ckpt_config = ckpt
        .as_ref()
        .map(|c| parse_canonical(&c.config_text))
        .transpose()?;
    if let Some(cfg) = &ckpt_config {
        let want_baseline = matches!(
            args.mode,
            EvalMode::BaselineCosine | EvalMode::BaselineSoftmax
        );
        let is_baseline = cfg.train.objective == Objective::BaselineClassifier;
        if want_baseline != is_baseline {
            return Err(config_err(format!(
                "mode {:?} does not match the checkpoint's training objective",
                args.mode
            )));
        }
    }
    if args.mode == EvalMode::Pixel && args.fine_tune_steps > 0 {
        return Err(config_err("pixel mode has no parameters to fine-tune"));
    }

    // dataset and split: a checkpoint fixes the split that was trained on
    let (dataset, split) = match &ckpt_config {
        Some(cfg) => {
            if args.split_train.is_some() || args.augment_rotations {
                return Err(config_err(
                    "split flags conflict with the checkpoint's recorded split",
                ));
            }
            prepare_dataset(cfg, args.dataset.as_deref())?
        }
        None => {
            let path = args
                .dataset
                .as_deref()
                .ok_or_else(|| data_err("pixel mode needs a dataset path"))?;
            let train_classes = args
                .split_train
                .ok_or_else(|| config_err("pixel mode needs --split-train"))?;
            let base = data::load_dataset_auto(path)?;
            let split = split_classes(&base, train_classes as usize, args.split_seed)?;
            if args.augment_rotations {
                (augment_rotations(&base)?, split.expand_rotations())
            } else {
                (base, split)
            }
        }
    };
    let part: &[u32] = match args.split_part {
        SplitPart::Train => &split.train,
        SplitPart::Test => &split.test,
    };

    let model = ckpt_config.as_ref().map(|c| c.model_spec());
    let params = ckpt.as_ref().map(|c| &c.params);

    let accs = parallel::run_episodes(args.episodes, parallel::thread_count(), |i| {
        score_episode(args, &dataset, part, params, model.as_ref(), i as u64)
    })?;
    Ok(report_from_accuracies(args.ways, args.shots, &accs))
}

/// Scores one evaluation episode under the selected mode.
fn score_episode(
    args: &EvalArgs,
    dataset: &ClassDataset,
    part: &[u32],
    params: Option<&ModelParams>,
    model: Option<&matchkit_core::encoder::ModelSpec>,
    index: u64,
) -> matchkit_core::Result<Real> {
    let episode = sample_episode(
        dataset,
        part,
        args.ways,
        args.shots,
        args.batch_per_class,
        mix_seed(args.seed, index),
    )?;

    // optional per-episode adaptation on the support set only
    let tuned: Option<ModelParams> = match (args.mode, args.fine_tune_steps) {
        (EvalMode::Pixel, _) | (_, 0) if args.mode != EvalMode::BaselineSoftmax => None,
        (mode, steps) => {
            let steps = if mode == EvalMode::BaselineSoftmax && steps == 0 {
                100
            } else {
                steps
            };
            let ft_mode = if mode == EvalMode::BaselineSoftmax {
                FineTuneMode::SoftmaxHead
            } else {
                FineTuneMode::CosineMatching
            };
            let (p, _report) = fine_tune(
                params.expect("checked: non-pixel modes carry params"),
                model.expect("checked"),
                &episode.support,
                episode.ways,
                steps,
                args.fine_tune_lr as Real,
                ft_mode,
                mix_seed(args.seed ^ 0xf17e, index),
            )?;
            Some(p)
        }
    };
    let effective_params = tuned.as_ref().or(params);

    if args.mode == EvalMode::BaselineSoftmax {
        // classify the batch with the adapted head
        let p = effective_params.expect("baseline modes carry params");
        let m = model.expect("checked");
        let batch: Vec<Tensor> = episode.batch.iter().map(|(t, _)| t.clone()).collect();
        let predictions = matchkit_core::train::head_predictions(p, m, &batch)?;
        let correct = predictions
            .iter()
            .zip(&episode.batch)
            .filter(|(p, (_, l))| *p == l)
            .count();
        return Ok(correct as Real / episode.batch.len() as Real);
    }

    let strategy = match args.mode {
        EvalMode::Pixel => EmbedStrategy::RawInput,
        _ => EmbedStrategy::Model {
            params: effective_params.expect("non-pixel modes carry params"),
            model: model.expect("checked"),
        },
    };
    let (support_embs, batch_embs) = embed_episode(&strategy, &episode)?;
    let dim = support_embs[0].len();
    let mut flat = Vec::with_capacity(support_embs.len() * dim);
    for e in &support_embs {
        flat.extend_from_slice(e);
    }
    let support = matchkit_core::attention::SupportSet::new(
        Tensor::from_vec(vec![support_embs.len(), dim], flat)?,
        episode.support.iter().map(|(_, l)| *l).collect(),
        episode.ways,
    )?;
    let mut correct = 0usize;
    for (q, (_, label)) in batch_embs.iter().zip(&episode.batch) {
        let weights = matchkit_core::attention::attend(q, &support, args.attention)?;
        let dist = matchkit_core::attention::classify(&weights, &support)?;
        if matchkit_core::attention::predict(&dist) == *label {
            correct += 1;
        }
    }
    Ok(correct as Real / episode.batch.len() as Real)
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

pub const GRADCHECK_MAX_DIM: usize = 32;

pub struct GradcheckArgs {
    pub dim: usize,
    pub ways: usize,
    pub shots: usize,
    pub fce: bool,
    pub fce_steps: usize,
    pub seed: u64,
    pub inject_bug: bool,
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    if args.dim == 0 || args.dim > GRADCHECK_MAX_DIM {
        return Err(config_err(format!(
            "--dim must be in 1..={GRADCHECK_MAX_DIM} (finite differences are exhaustive)"
        )));
    }
    let model = matchkit_core::encoder::ModelSpec {
        encoder: matchkit_core::encoder::EncoderConfig::Mlp(
            matchkit_core::encoder::MlpEmbedConfig {
                input_dim: args.dim,
                hidden_dims: vec![16],
                output_dim: 8,
            },
        ),
        fce: args
            .fce
            .then_some(matchkit_core::context::FceConfig {
                steps: args.fce_steps,
            }),
    };
    let reports =
        episode_gradient_check(&model, args.ways, args.shots, args.seed, args.inject_bug)?;
    let mut worst: Option<&matchkit_core::gradcheck::GroupReport> = None;
    for r in &reports {
        println!(
            "{:<14} max_rel_err={:<12.3e} {}",
            r.name,
            r.max_rel_err,
            if r.passed() { "ok" } else { "FAIL" }
        );
        if worst.map(|w| r.max_rel_err > w.max_rel_err).unwrap_or(true) {
            worst = Some(r);
        }
    }
    let failing: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    if failing.is_empty() {
        println!(
            "gradcheck ok: {} parameter groups within {GRADCHECK_TOL:.0e}",
            reports.len()
        );
        Ok(())
    } else {
        Err(CliError {
            code: exit_codes::GRADCHECK,
            message: format!("gradient check failed for: {}", failing.join(", ")),
        })
    }
}

// ---------------------------------------------------------------------------
// gen-synthetic
// ---------------------------------------------------------------------------

pub struct GenSyntheticArgs {
    pub out: PathBuf,
    pub classes: u32,
    pub dim: u32,
    pub noise: f64,
    pub seed: u64,
}

/// Writes a generated vector dataset to the synthetic binary format, so
/// evaluation runs can share one on-disk dataset.
pub fn cmd_gen_synthetic(args: &GenSyntheticArgs) -> Result<(), CliError> {
    let ds = matchkit_core::episode::gen_synthetic(
        args.classes as usize,
        args.dim as usize,
        args.noise as Real,
        args.seed,
    )?;
    data::save_synthetic(&ds, &args.out)?;
    println!(
        "wrote {} classes x {} examples ({} dims) to {}",
        args.classes,
        matchkit_core::episode::SYNTHETIC_EXAMPLES_PER_CLASS,
        args.dim,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

pub struct SampleArgs {
    pub dataset: PathBuf,
    pub ways: usize,
    pub shots: usize,
    pub batch_per_class: usize,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn cmd_sample(args: &SampleArgs) -> Result<(), CliError> {
    let dataset = data::load_dataset_auto(&args.dataset)?;
    let ids = dataset.class_ids();
    let episode = sample_episode(
        &dataset,
        &ids,
        args.ways,
        args.shots,
        args.batch_per_class,
        args.seed,
    )?;
    for sub in ["support", "batch"] {
        std::fs::create_dir_all(args.out.join(sub))
            .map_err(|e| io_err("creating episode directory", e))?;
    }
    let mut manifest = String::new();
    let _ = writeln!(manifest, "ways {}", episode.ways);
    let _ = writeln!(manifest, "shots {}", episode.shots);
    let _ = writeln!(manifest, "batch_per_class {}", args.batch_per_class);
    let _ = writeln!(manifest, "seed {}", episode.seed);
    for (section, items, keys) in [
        ("support", &episode.support, &episode.support_keys),
        ("batch", &episode.batch, &episode.batch_keys),
    ] {
        for (i, ((tensor, label), (class_id, example_idx))) in
            items.iter().zip(keys.iter()).enumerate()
        {
            let file = format!("{section}/{i:03}_label{label}.png");
            data::save_png(tensor, &args.out.join(&file))?;
            let _ = writeln!(
                manifest,
                "{section} {i} label {label} class {class_id} example {example_idx} file {file}"
            );
        }
    }
    std::fs::write(args.out.join("manifest.txt"), manifest)
        .map_err(|e| io_err("writing manifest", e))?;
    println!(
        "episode written to {} ({} support, {} batch)",
        args.out.display(),
        episode.support.len(),
        episode.batch.len()
    );
    Ok(())
}
