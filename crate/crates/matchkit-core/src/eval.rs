//! One-shot evaluation protocol: sample held-out episodes, embed, attend,
//! classify, and report accuracy with a 95% confidence interval.

use alloc::vec::Vec;

use crate::attention::{attend, classify, predict, AttentionMode, SupportSet};
use crate::context::{embed_query_fce, embed_support_fce};
use crate::encoder::{self, BoundParams, ModelParams, ModelSpec, Phase};
use crate::episode::{mix_seed, sample_episode, ClassDataset, Episode};
use crate::error::Result;
use crate::graph::Graph;
use crate::math::{self, Real};
use crate::tensor::Tensor;

/// How examples are turned into vectors before matching.
pub enum EmbedStrategy<'a> {
    /// Flattened raw input values ("pixel" matching; training-free).
    RawInput,
    /// A model's encoder in evaluation phase, including the context stage
    /// when the model has one.
    Model {
        params: &'a ModelParams,
        model: &'a ModelSpec,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub ways: usize,
    pub shots: usize,
    pub batch_per_class: usize,
    pub episodes: usize,
    pub seed: u64,
    pub attention: AttentionMode,
}

/// Accuracy over independent episodes of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub ways: usize,
    pub shots: usize,
    pub n_episodes: usize,
    pub accuracy: Real,
    /// 95% half-width: `1.96 * sd / sqrt(n)` over per-episode accuracies.
    pub ci95: Real,
}

/// Embeds an episode's support and batch items under the strategy.
/// Returns `(support_embeddings, batch_embeddings)` as plain vectors.
pub fn embed_episode(
    strategy: &EmbedStrategy,
    episode: &Episode,
) -> Result<(Vec<Vec<Real>>, Vec<Vec<Real>>)> {
    let k = episode.support.len();
    match strategy {
        EmbedStrategy::RawInput => {
            let flat = |items: &[(Tensor, usize)]| {
                items
                    .iter()
                    .map(|(t, _)| t.data().to_vec())
                    .collect::<Vec<_>>()
            };
            Ok((flat(&episode.support), flat(&episode.batch)))
        }
        EmbedStrategy::Model { params, model } => {
            let graph = Graph::new();
            let bound = BoundParams::bind_frozen(&graph, params);
            let items: Vec<Tensor> = episode
                .support
                .iter()
                .chain(episode.batch.iter())
                .map(|(t, _)| t.clone())
                .collect();
            let stacked = Tensor::stack(&items)?;
            let (emb, _) =
                encoder::embed(&graph, &bound, params, &model.encoder, &stacked, Phase::Eval)?;
            let support_raw = (0..k)
                .map(|i| emb.row(i))
                .collect::<Result<Vec<_>>>()?;
            let batch_raw = (k..items.len())
                .map(|i| emb.row(i))
                .collect::<Result<Vec<_>>>()?;
            let (support, batch) = match &model.fce {
                Some(cfg) => {
                    let enc = embed_support_fce(&graph, &bound, &support_raw)?;
                    let batch = batch_raw
                        .iter()
                        .map(|q| {
                            embed_query_fce(&graph, &bound, q, &enc, cfg.steps)
                                .map(|v| v.value().to_vec())
                        })
                        .collect::<Result<Vec<_>>>()?;
                    (enc.iter().map(|v| v.value().to_vec()).collect(), batch)
                }
                None => (
                    support_raw.iter().map(|v| v.value().to_vec()).collect(),
                    batch_raw.iter().map(|v| v.value().to_vec()).collect(),
                ),
            };
            Ok((support, batch))
        }
    }
}

/// Scores one sampled episode; returns `(correct, total)` over the batch.
pub fn episode_score(
    strategy: &EmbedStrategy,
    dataset: &ClassDataset,
    part: &[u32],
    cfg: &EvalConfig,
    episode_seed: u64,
) -> Result<(usize, usize)> {
    let episode = sample_episode(
        dataset,
        part,
        cfg.ways,
        cfg.shots,
        cfg.batch_per_class,
        episode_seed,
    )?;
    let (support_embs, batch_embs) = embed_episode(strategy, &episode)?;
    let dim = support_embs[0].len();
    let mut flat = Vec::with_capacity(support_embs.len() * dim);
    for e in &support_embs {
        flat.extend_from_slice(e);
    }
    let support = SupportSet::new(
        Tensor::from_vec(alloc::vec![support_embs.len(), dim], flat)?,
        episode.support.iter().map(|(_, l)| *l).collect(),
        episode.ways,
    )?;
    let mut correct = 0;
    for (q, (_, label)) in batch_embs.iter().zip(&episode.batch) {
        let weights = attend(q, &support, cfg.attention)?;
        let dist = classify(&weights, &support)?;
        if predict(&dist) == *label {
            correct += 1;
        }
    }
    Ok((correct, episode.batch.len()))
}

/// Builds the report from per-episode accuracies (in episode order).
pub fn report_from_accuracies(ways: usize, shots: usize, accs: &[Real]) -> EvalReport {
    let n = accs.len();
    let mean = accs.iter().sum::<Real>() / n.max(1) as Real;
    let ci95 = if n > 1 {
        let var = accs.iter().map(|&a| (a - mean) * (a - mean)).sum::<Real>() / (n - 1) as Real;
        1.96 * math::sqrt(var / n as Real)
    } else {
        0.0
    };
    EvalReport {
        ways,
        shots,
        n_episodes: n,
        accuracy: mean,
        ci95,
    }
}

/// Evaluates `cfg.episodes` independent seeded episodes sequentially.
/// Episode `i` uses `mix_seed(cfg.seed, i)`, so a parallel driver scoring
/// the same indices reduces to the identical report.
pub fn evaluate(
    strategy: &EmbedStrategy,
    dataset: &ClassDataset,
    part: &[u32],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let mut accs = Vec::with_capacity(cfg.episodes);
    for i in 0..cfg.episodes {
        let (correct, total) =
            episode_score(strategy, dataset, part, cfg, mix_seed(cfg.seed, i as u64))?;
        accs.push(correct as Real / total.max(1) as Real);
    }
    Ok(report_from_accuracies(cfg.ways, cfg.shots, &accs))
}
