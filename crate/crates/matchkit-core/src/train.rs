//! Episodic meta-training.
//!
//! Each step samples a fresh episode from the training split, minimizes the
//! mean negative log-probability of the batch labels under the attention
//! classifier, and applies one Adam update. Test conditions match training
//! conditions: held-out evaluation runs the same (ways, shots) task on
//! classes the optimizer has never seen.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{attend_softmax_cosine_var, classify_var};
use crate::checkpoint::Checkpoint;
use crate::context::{embed_query_fce, embed_support_fce};
use crate::encoder::{self, BoundParams, ConvBatchStats, ModelParams, ModelSpec, Phase};
use crate::episode::{sample_episode, ClassDataset, Episode, SplitSpec};
use crate::error::{Error, Result};
use crate::eval::{self, EvalConfig, EvalReport};
use crate::graph::{concat, Graph, Var};
use crate::math::{self, Real};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: Real = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub ways: usize,
    pub shots: usize,
    pub batch_per_class: usize,
    pub episodes_total: u64,
    pub optim: OptimConfig,
    /// Evaluate on held-out classes every this many steps; 0 disables.
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub seed: u64,
    pub model: ModelSpec,
    /// Held-out task overrides. None means the evaluation task equals the
    /// training task, which is the default and the intended protocol.
    pub eval_ways: Option<usize>,
    pub eval_shots: Option<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes_total == 0 {
            return Err(Error::Config("episodes_total must be positive".into()));
        }
        if !(self.optim.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.ways < 2 || self.shots == 0 || self.batch_per_class == 0 {
            return Err(Error::Config(
                "need ways >= 2, shots >= 1, batch_per_class >= 1".into(),
            ));
        }
        if self.eval_ways == Some(0) || self.eval_shots == Some(0) {
            return Err(Error::Config("evaluation task extents must be positive".into()));
        }
        self.model.validate()
    }

    /// The held-out task; equals the training task unless overridden.
    pub fn eval_task(&self) -> (usize, usize) {
        (
            self.eval_ways.unwrap_or(self.ways),
            self.eval_shots.unwrap_or(self.shots),
        )
    }
}

// ---------------------------------------------------------------------------
// Episode forward pass
// ---------------------------------------------------------------------------

pub struct EpisodeForward {
    /// Mean negative log-probability of the true labels over the batch.
    pub loss: Var,
    /// Class distribution per batch item.
    pub per_query: Vec<Var>,
    pub conv_stats: Option<ConvBatchStats>,
}

/// Builds the full differentiable episode loss on `graph`: embed supports
/// and queries (optionally through the context stage), soft cosine
/// attention, label combination, mean negative log-likelihood.
pub fn episode_nll(
    graph: &Graph,
    bound: &BoundParams,
    params: &ModelParams,
    model: &ModelSpec,
    episode: &Episode,
    phase: Phase,
) -> Result<EpisodeForward> {
    if episode.batch.is_empty() {
        return Err(Error::InvalidArg {
            what: "episode",
            detail: "batch is empty".into(),
        });
    }
    let k = episode.support.len();
    let items: Vec<Tensor> = episode
        .support
        .iter()
        .chain(episode.batch.iter())
        .map(|(t, _)| t.clone())
        .collect();
    let stacked = Tensor::stack(&items)?;
    let (emb, conv_stats) = encoder::embed(graph, bound, params, &model.encoder, &stacked, phase)?;

    let support_raw: Vec<Var> = (0..k).map(|i| emb.row(i)).collect::<Result<_>>()?;
    let support = match &model.fce {
        Some(_) => embed_support_fce(graph, bound, &support_raw)?,
        None => support_raw,
    };

    let ways = episode.ways;
    let mut onehot = alloc::vec![0.0; k * ways];
    for (i, (_, label)) in episode.support.iter().enumerate() {
        onehot[i * ways + label] = 1.0;
    }
    let labels = graph.constant(&Tensor::from_vec(alloc::vec![k, ways], onehot)?);

    let mut nlls = Vec::with_capacity(episode.batch.len());
    let mut per_query = Vec::with_capacity(episode.batch.len());
    for (qi, (_, label)) in episode.batch.iter().enumerate() {
        let raw = emb.row(k + qi)?;
        let query = match &model.fce {
            Some(cfg) => embed_query_fce(graph, bound, &raw, &support, cfg.steps)?,
            None => raw,
        };
        let weights = attend_softmax_cosine_var(&query, &support)?;
        let probs = classify_var(&weights, &labels)?;
        nlls.push(probs.nll_at(*label)?);
        per_query.push(probs);
    }
    let loss = concat(&nlls)?.mean_all();
    Ok(EpisodeForward {
        loss,
        per_query,
        conv_stats,
    })
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam with bias correction, one moment pair per trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: OptimConfig,
    pub m: BTreeMap<String, Vec<Real>>,
    pub v: BTreeMap<String, Vec<Real>>,
    pub t: u64,
}

impl Adam {
    pub fn new(params: &ModelParams, cfg: OptimConfig) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for name in params.trainable_names() {
            let n = params.get(&name).map(|t| t.numel()).unwrap_or(0);
            m.insert(name.clone(), alloc::vec![0.0; n]);
            v.insert(name, alloc::vec![0.0; n]);
        }
        Self {
            cfg,
            m,
            v,
            t: 0,
        }
    }

    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &BTreeMap<String, Vec<Real>>,
    ) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - math::pow(b1, t as Real);
        let bc2 = 1.0 - math::pow(b2, t as Real);
        for name in params.trainable_names() {
            let Some(g) = grads.get(&name) else { continue };
            let m = self.m.get_mut(&name).ok_or_else(|| Error::MissingParam(name.clone()))?;
            let v = self.v.get_mut(&name).ok_or_else(|| Error::MissingParam(name.clone()))?;
            let old = params.get(&name)?;
            let mut data = old.to_vec();
            for i in 0..data.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= self.cfg.lr * m_hat / (math::sqrt(v_hat) + self.cfg.eps);
            }
            params.set(&name, Tensor::from_vec(old.shape().to_vec(), data)?)?;
        }
        Ok(())
    }
}

/// Pulls per-parameter gradients out of a consumed graph.
pub fn collect_grads(
    bound: &BoundParams,
    grads: &crate::graph::Gradients,
) -> BTreeMap<String, Vec<Real>> {
    bound
        .iter()
        .map(|(name, var)| (name.clone(), grads.flat(var)))
        .collect()
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// 1-based step counter after this update.
    pub step: u64,
    pub loss: Real,
    pub clamp_events: u64,
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: u64,
    pub loss: Real,
    pub eval: Option<EvalReport>,
}

/// Drives episodic training with explicit, checkpointable state.
pub struct Trainer<'d> {
    pub config: TrainConfig,
    dataset: &'d ClassDataset,
    split: SplitSpec,
    sorted_test_ids: Vec<u32>,
    pub params: ModelParams,
    adam: Adam,
    rng: ChaCha8Rng,
    episode_count: u64,
    config_text: String,
    config_hash: u64,
}

impl core::fmt::Debug for Trainer<'_> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(
            f,
            "Trainer(episode={}/{}, params={})",
            self.episode_count,
            self.config.episodes_total,
            self.params.len()
        )
    }
}

impl<'d> Trainer<'d> {
    /// `config_text` is the materialized run configuration, stored verbatim
    /// in checkpoints. `config_hash` must cover every field that shapes the
    /// parameter trajectory (dataset, split, task, model, optimizer, seed);
    /// stopping and reporting knobs may be excluded so a run can be resumed
    /// with a longer budget.
    pub fn new(
        config: TrainConfig,
        dataset: &'d ClassDataset,
        split: SplitSpec,
        config_text: String,
        config_hash: u64,
    ) -> Result<Self> {
        config.validate()?;
        if split.train.len() < config.ways {
            return Err(Error::InsufficientClasses {
                requested: config.ways,
                available: split.train.len(),
            });
        }
        let params = encoder::init_params(&config.model, config.seed)?;
        let adam = Adam::new(&params, config.optim.clone());
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut sorted_test_ids = split.test.clone();
        sorted_test_ids.sort_unstable();
        Ok(Self {
            config,
            dataset,
            split,
            sorted_test_ids,
            params,
            adam,
            rng,
            episode_count: 0,
            config_text,
            config_hash,
        })
    }

    /// Restores a trainer mid-run. The checkpoint must carry the same
    /// configuration hash.
    pub fn resume(
        config: TrainConfig,
        dataset: &'d ClassDataset,
        split: SplitSpec,
        config_text: String,
        config_hash: u64,
        ckpt: &Checkpoint,
    ) -> Result<Self> {
        let mut trainer = Self::new(config, dataset, split, config_text, config_hash)?;
        if ckpt.config_hash != trainer.config_hash {
            return Err(Error::Config(alloc::format!(
                "checkpoint was produced by a different configuration \
                 (hash {:#018x}, expected {:#018x})",
                ckpt.config_hash,
                trainer.config_hash
            )));
        }
        trainer.params = ckpt.params.clone();
        trainer.adam.m = ckpt.adam_m.clone();
        trainer.adam.v = ckpt.adam_v.clone();
        trainer.adam.t = ckpt.adam_t;
        trainer.episode_count = ckpt.episode;
        trainer.rng = ChaCha8Rng::from_seed(ckpt.rng_seed);
        trainer.rng.set_word_pos(ckpt.rng_word_pos);
        Ok(trainer)
    }

    pub fn episodes_done(&self) -> u64 {
        self.episode_count
    }

    pub fn finished(&self) -> bool {
        self.episode_count >= self.config.episodes_total
    }

    pub fn config_hash(&self) -> u64 {
        self.config_hash
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_text: self.config_text.clone(),
            config_hash: self.config_hash,
            episode: self.episode_count,
            params: self.params.clone(),
            adam_m: self.adam.m.clone(),
            adam_v: self.adam.v.clone(),
            adam_t: self.adam.t,
            rng_seed: self.rng.get_seed(),
            rng_word_pos: self.rng.get_word_pos(),
        }
    }

    /// One episode, one gradient step.
    pub fn step(&mut self) -> Result<StepReport> {
        let cfg = &self.config;
        let episode_seed: u64 = self.rng.gen();
        let episode = sample_episode(
            self.dataset,
            &self.split.train,
            cfg.ways,
            cfg.shots,
            cfg.batch_per_class,
            episode_seed,
        )?;
        // one-shot purity: held-out classes never reach the optimizer
        for cid in &episode.class_ids {
            assert!(
                self.sorted_test_ids.binary_search(cid).is_err(),
                "test class {cid} leaked into training"
            );
        }
        let graph = Graph::new();
        let bound = BoundParams::bind(&graph, &self.params);
        let fwd = episode_nll(&graph, &bound, &self.params, &cfg.model, &episode, Phase::Train)?;
        let loss = fwd.loss.item();
        if !loss.is_finite() {
            return Err(Error::NumericAbort {
                step: self.episode_count + 1,
                detail: alloc::format!("loss = {loss}"),
            });
        }
        let grads = graph.backward(&fwd.loss)?;
        let grad_map = collect_grads(&bound, &grads);
        self.adam.step(&mut self.params, &grad_map)?;
        if let Some(stats) = fwd.conv_stats {
            commit_bn_stats(&mut self.params, &stats)?;
        }
        self.episode_count += 1;
        Ok(StepReport {
            step: self.episode_count,
            loss,
            clamp_events: graph.clamp_events(),
        })
    }

    /// Held-out evaluation at the configured task, disjoint from training
    /// classes and driven by its own rng stream.
    pub fn evaluate_heldout(&self, n_episodes: usize, seed: u64) -> Result<EvalReport> {
        let (ways, shots) = self.config.eval_task();
        eval::evaluate(
            &eval::EmbedStrategy::Model {
                params: &self.params,
                model: &self.config.model,
            },
            self.dataset,
            &self.split.test,
            &EvalConfig {
                ways,
                shots,
                batch_per_class: self.config.batch_per_class,
                episodes: n_episodes,
                seed,
                attention: crate::attention::AttentionMode::SoftmaxCosine,
            },
        )
    }
}

/// Folds batch statistics into the stored running averages
/// (`running = (1 - momentum) * running + momentum * batch`).
pub fn commit_bn_stats(params: &mut ModelParams, stats: &ConvBatchStats) -> Result<()> {
    for (blk, s) in stats.per_block.iter().enumerate() {
        for (suffix, batch) in [("mean", &s.mean), ("var", &s.var_unbiased)] {
            let name = alloc::format!("enc.block{blk}.bn.{suffix}");
            let old = params.get(&name)?;
            let data: Vec<Real> = old
                .data()
                .iter()
                .zip(batch.iter())
                .map(|(&r, &b)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b)
                .collect();
            params.set(&name, Tensor::from_vec(old.shape().to_vec(), data)?)?;
        }
    }
    Ok(())
}

/// Runs training to completion, returning the final checkpoint and the
/// per-step history (loss, plus periodic held-out reports).
pub fn train_matching_net(
    config: TrainConfig,
    dataset: &ClassDataset,
    split: SplitSpec,
    config_text: String,
    config_hash: u64,
) -> Result<(Checkpoint, Vec<StepRecord>)> {
    let mut trainer = Trainer::new(config, dataset, split, config_text, config_hash)?;
    let mut history = Vec::new();
    while !trainer.finished() {
        let report = trainer.step()?;
        let eval = if trainer.config.eval_every > 0 && report.step % trainer.config.eval_every == 0
        {
            Some(trainer.evaluate_heldout(
                trainer.config.eval_episodes,
                eval_seed(trainer.config.seed, report.step),
            )?)
        } else {
            None
        };
        history.push(StepRecord {
            step: report.step,
            loss: report.loss,
            eval,
        });
    }
    Ok((trainer.checkpoint(), history))
}

/// Seed for the evaluation stream at a given step; independent of the
/// training stream so evaluation never perturbs sampling.
pub fn eval_seed(seed: u64, step: u64) -> u64 {
    crate::episode::mix_seed(seed ^ 0xe7a1_ce11_ba5e_11e5, step)
}

// ---------------------------------------------------------------------------
// Conventional classifier baseline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    pub epochs: usize,
    pub minibatch: usize,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            minibatch: 64,
            optim: OptimConfig::default(),
            seed: 0,
        }
    }
}

/// Supervised cross-entropy training of the encoder plus a linear softmax
/// head over the training-split classes. The returned parameters keep the
/// head; matching-based evaluation simply ignores it and uses the encoder
/// output as features.
pub fn train_baseline_classifier(
    dataset: &ClassDataset,
    split: &SplitSpec,
    model: &ModelSpec,
    cfg: &BaselineConfig,
) -> Result<ModelParams> {
    if split.train.is_empty() {
        return Err(Error::Config("baseline training split is empty".into()));
    }
    if cfg.epochs == 0 || cfg.minibatch == 0 {
        return Err(Error::Config("baseline epochs and minibatch must be positive".into()));
    }
    let spec = ModelSpec {
        encoder: model.encoder.clone(),
        fce: None,
    };
    let mut params = encoder::init_params(&spec, cfg.seed)?;
    let mut class_index: Vec<u32> = split.train.clone();
    class_index.sort_unstable();
    encoder::init_classifier_head(&mut params, spec.embed_dim(), class_index.len(), cfg.seed);
    let mut adam = Adam::new(&params, cfg.optim.clone());

    let mut items: Vec<(usize, Tensor)> = Vec::new();
    for (idx, &cid) in class_index.iter().enumerate() {
        for e in dataset.examples(cid)? {
            items.push((idx, e.clone()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let needs_batch_of_two = matches!(spec.encoder, encoder::EncoderConfig::Conv(_));
    let mut step: u64 = 0;
    for _epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        items.shuffle(&mut rng);
        for chunk in items.chunks(cfg.minibatch) {
            if needs_batch_of_two && chunk.len() < 2 {
                continue; // train-mode batchnorm is undefined on one item
            }
            step += 1;
            let graph = Graph::new();
            let bound = BoundParams::bind(&graph, &params);
            let tensors: Vec<Tensor> = chunk.iter().map(|(_, t)| t.clone()).collect();
            let stacked = Tensor::stack(&tensors)?;
            let (emb, stats) =
                encoder::embed(&graph, &bound, &params, &spec.encoder, &stacked, Phase::Train)?;
            let logits = emb
                .matmul(&bound.var("head.w")?)?
                .add_bias(&bound.var("head.b")?)?;
            let mut nlls = Vec::with_capacity(chunk.len());
            for (i, (label, _)) in chunk.iter().enumerate() {
                nlls.push(logits.row(i)?.softmax()?.nll_at(*label)?);
            }
            let loss = concat(&nlls)?.mean_all();
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::NumericAbort {
                    step,
                    detail: alloc::format!("baseline loss = {value}"),
                });
            }
            let grads = graph.backward(&loss)?;
            let grad_map = collect_grads(&bound, &grads);
            adam.step(&mut params, &grad_map)?;
            if let Some(stats) = stats {
                commit_bn_stats(&mut params, &stats)?;
            }
        }
    }
    Ok(params)
}

/// Fraction of training-split examples the classifier head labels
/// correctly, evaluated deterministically.
pub fn classifier_train_accuracy(
    params: &ModelParams,
    model: &ModelSpec,
    dataset: &ClassDataset,
    split: &SplitSpec,
) -> Result<Real> {
    let mut class_index: Vec<u32> = split.train.clone();
    class_index.sort_unstable();
    let mut correct = 0usize;
    let mut total = 0usize;
    for (idx, &cid) in class_index.iter().enumerate() {
        let tensors: Vec<Tensor> = dataset.examples(cid)?.to_vec();
        let predictions = head_predictions(params, model, &tensors)?;
        correct += predictions.iter().filter(|&&p| p == idx).count();
        total += predictions.len();
    }
    Ok(correct as Real / total.max(1) as Real)
}

/// Eval-phase head predictions for a list of examples.
pub fn head_predictions(
    params: &ModelParams,
    model: &ModelSpec,
    items: &[Tensor],
) -> Result<Vec<usize>> {
    let graph = Graph::new();
    let bound = BoundParams::bind_frozen(&graph, params);
    let stacked = Tensor::stack(items)?;
    let (emb, _) =
        encoder::embed(&graph, &bound, params, &model.encoder, &stacked, Phase::Eval)?;
    let logits = emb
        .matmul(&bound.var("head.w")?)?
        .add_bias(&bound.var("head.b")?)?;
    let value = logits.value();
    let [_, n] = value.shape()[..] else {
        return Err(crate::error::shape_err("head", "logits must be 2-d"));
    };
    Ok(value
        .data()
        .chunks(n)
        .map(math::argmax)
        .collect())
}

// ---------------------------------------------------------------------------
// One-shot fine-tuning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FineTuneMode {
    /// Fresh linear softmax head over the episode's classes; evaluation
    /// goes through the head.
    SoftmaxHead,
    /// Encoder updated the same way, but evaluation matches on cosine
    /// features. With two or more shots the loss is leave-one-out matching
    /// within the support; with one shot it falls back to the head loss.
    CosineMatching,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneReport {
    pub steps_run: usize,
    /// Support-set accuracy after the final step.
    pub support_accuracy: Real,
    /// First step at which the support set was fit perfectly.
    pub first_perfect_step: Option<usize>,
}

/// Adapts a copy of `params` to one episode's support set; the input
/// parameters are never touched. With `steps == 0` the copy is returned
/// unchanged.
pub fn fine_tune(
    params: &ModelParams,
    model: &ModelSpec,
    support: &[(Tensor, usize)],
    ways: usize,
    steps: usize,
    lr: Real,
    mode: FineTuneMode,
    seed: u64,
) -> Result<(ModelParams, FineTuneReport)> {
    if support.is_empty() {
        return Err(Error::EmptySupport);
    }
    let mut tuned = params.clone();
    if steps == 0 {
        return Ok((
            tuned,
            FineTuneReport {
                steps_run: 0,
                support_accuracy: 0.0,
                first_perfect_step: None,
            },
        ));
    }
    let spec = ModelSpec {
        encoder: model.encoder.clone(),
        fce: None,
    };
    tuned.remove("head.w");
    tuned.remove("head.b");
    encoder::init_classifier_head(&mut tuned, spec.embed_dim(), ways, seed);
    let mut adam = Adam::new(
        &tuned,
        OptimConfig {
            lr,
            ..OptimConfig::default()
        },
    );
    let shots = support.len() / ways;
    let use_loo_matching = mode == FineTuneMode::CosineMatching && shots >= 2;

    let tensors: Vec<Tensor> = support.iter().map(|(t, _)| t.clone()).collect();
    let labels: Vec<usize> = support.iter().map(|(_, l)| *l).collect();
    let stacked = Tensor::stack(&tensors)?;
    let k = tensors.len();

    let mut first_perfect = None;
    let mut last_accuracy = 0.0;
    for step in 1..=steps {
        let graph = Graph::new();
        let bound = BoundParams::bind(&graph, &tuned);
        let (emb, stats) =
            encoder::embed(&graph, &bound, &tuned, &spec.encoder, &stacked, Phase::Train)?;
        let (loss, predictions) = if use_loo_matching {
            leave_one_out_matching_loss(&graph, &emb, &labels, ways)?
        } else {
            let logits = emb
                .matmul(&bound.var("head.w")?)?
                .add_bias(&bound.var("head.b")?)?;
            let mut nlls = Vec::with_capacity(k);
            let mut predictions = Vec::with_capacity(k);
            for (i, &label) in labels.iter().enumerate() {
                let probs = logits.row(i)?.softmax()?;
                predictions.push(math::argmax(probs.value().data()));
                nlls.push(probs.nll_at(label)?);
            }
            (concat(&nlls)?.mean_all(), predictions)
        };
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NumericAbort {
                step: step as u64,
                detail: alloc::format!("fine-tune loss = {value}"),
            });
        }
        last_accuracy = predictions
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count() as Real
            / k as Real;
        if last_accuracy == 1.0 && first_perfect.is_none() {
            first_perfect = Some(step);
        }
        let grads = graph.backward(&loss)?;
        let grad_map = collect_grads(&bound, &grads);
        adam.step(&mut tuned, &grad_map)?;
        if let Some(stats) = stats {
            commit_bn_stats(&mut tuned, &stats)?;
        }
    }
    Ok((
        tuned,
        FineTuneReport {
            steps_run: steps,
            support_accuracy: last_accuracy,
            first_perfect_step: first_perfect,
        },
    ))
}

/// Matching loss where each support item is classified against the others.
fn leave_one_out_matching_loss(
    graph: &Graph,
    emb: &Var,
    labels: &[usize],
    ways: usize,
) -> Result<(Var, Vec<usize>)> {
    let k = labels.len();
    let rows: Vec<Var> = (0..k).map(|i| emb.row(i)).collect::<Result<_>>()?;
    let mut nlls = Vec::with_capacity(k);
    let mut predictions = Vec::with_capacity(k);
    for held in 0..k {
        let mut others = Vec::with_capacity(k - 1);
        let mut onehot = alloc::vec![0.0; (k - 1) * ways];
        for (j, row) in rows.iter().enumerate() {
            if j == held {
                continue;
            }
            onehot[others.len() * ways + labels[j]] = 1.0;
            others.push(row.clone());
        }
        let label_mat = graph.constant(&Tensor::from_vec(alloc::vec![k - 1, ways], onehot)?);
        let weights = attend_softmax_cosine_var(&rows[held], &others)?;
        let probs = classify_var(&weights, &label_mat)?;
        predictions.push(math::argmax(probs.value().data()));
        nlls.push(probs.nll_at(labels[held])?);
    }
    Ok((concat(&nlls)?.mean_all(), predictions))
}
