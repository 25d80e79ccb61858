//! The attention classifier: a query's class distribution is the
//! attention-weighted sum of support labels. Three attention modes are
//! provided; soft cosine attention is the differentiable one used for
//! training, while the hard top-neighbors mode and the Gaussian-kernel mode
//! recover nearest-neighbor and kernel-density classification.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::graph::{concat, Var};
use crate::math::{self, Real};
use crate::tensor::Tensor;

/// Labeled support embeddings for one episode.
#[derive(Debug, Clone)]
pub struct SupportSet {
    embeddings: Tensor,
    /// One-hot rows, `[k, ways]`.
    labels: Tensor,
    class_ids: Vec<usize>,
    ways: usize,
}

impl SupportSet {
    /// `embeddings` is `[k,d]`; `class_ids` holds k class-local labels in
    /// `[0, ways)` and every class must appear at least once.
    pub fn new(embeddings: Tensor, class_ids: Vec<usize>, ways: usize) -> Result<Self> {
        let [k, _d] = embeddings.shape()[..] else {
            return Err(shape_err("support set", "embeddings must be [k,d]"));
        };
        if k == 0 || class_ids.is_empty() {
            return Err(Error::EmptySupport);
        }
        if class_ids.len() != k {
            return Err(shape_err(
                "support set",
                alloc::format!("{k} embeddings vs {} labels", class_ids.len()),
            ));
        }
        let mut seen = vec![false; ways];
        for &c in &class_ids {
            if c >= ways {
                return Err(Error::InvalidArg {
                    what: "class id",
                    detail: alloc::format!("{c} outside [0,{ways})"),
                });
            }
            seen[c] = true;
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::InvalidArg {
                what: "support set",
                detail: "some class has no support example".into(),
            });
        }
        let mut onehot = vec![0.0; k * ways];
        for (i, &c) in class_ids.iter().enumerate() {
            onehot[i * ways + c] = 1.0;
        }
        let labels = Tensor::from_vec(vec![k, ways], onehot)?;
        Ok(Self {
            embeddings,
            labels,
            class_ids,
            ways,
        })
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn ways(&self) -> usize {
        self.ways
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn embedding(&self, i: usize) -> &[Real] {
        let d = self.dim();
        &self.embeddings.data()[i * d..(i + 1) * d]
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn labels(&self) -> &Tensor {
        &self.labels
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttentionMode {
    SoftmaxCosine,
    /// Drop the `drop` furthest supports, uniform weight on the rest.
    Knn { drop: usize },
    /// Gaussian kernel on squared distance with the given bandwidth.
    Kde { bandwidth: Real },
}

/// Normalized attention over the support set: nonnegative, sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub values: Vec<Real>,
    pub mode: AttentionMode,
}

/// A distribution over the episode's `ways` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution {
    pub probs: Vec<Real>,
}

pub fn attend(query: &[Real], support: &SupportSet, mode: AttentionMode) -> Result<AttentionWeights> {
    match mode {
        AttentionMode::SoftmaxCosine => attend_softmax_cosine(query, support),
        AttentionMode::Knn { drop } => attend_knn(query, support, drop),
        AttentionMode::Kde { bandwidth } => attend_kde(query, support, bandwidth),
    }
}

/// Soft attention: softmax over cosine similarity between the query and
/// each support embedding.
pub fn attend_softmax_cosine(query: &[Real], support: &SupportSet) -> Result<AttentionWeights> {
    check_dim(query, support)?;
    let mut values: Vec<Real> = (0..support.len())
        .map(|i| math::cosine(query, support.embedding(i)))
        .collect();
    math::softmax_in_place(&mut values);
    Ok(AttentionWeights {
        values,
        mode: AttentionMode::SoftmaxCosine,
    })
}

/// Hard attention: zero weight on the `drop` furthest supports by cosine
/// distance, uniform weight on the remaining ones. Distance ties are broken
/// toward keeping the lower support index.
pub fn attend_knn(query: &[Real], support: &SupportSet, drop: usize) -> Result<AttentionWeights> {
    check_dim(query, support)?;
    let k = support.len();
    if drop >= k {
        return Err(Error::InvalidArg {
            what: "drop count",
            detail: alloc::format!("must satisfy 0 <= b < k, got b={drop} k={k}"),
        });
    }
    // distance = 1 - cosine; order nearest-first, lower index first on ties
    let mut order: Vec<usize> = (0..k).collect();
    let dist: Vec<Real> = (0..k)
        .map(|i| 1.0 - math::cosine(query, support.embedding(i)))
        .collect();
    order.sort_by(|&a, &b| dist[a].partial_cmp(&dist[b]).unwrap().then(a.cmp(&b)));
    let keep = k - drop;
    let mut values = vec![0.0; k];
    for &i in &order[..keep] {
        values[i] = 1.0 / keep as Real;
    }
    Ok(AttentionWeights {
        values,
        mode: AttentionMode::Knn { drop },
    })
}

/// Kernel attention: weights proportional to
/// `exp(-||query - support_i||^2 / (2 bandwidth^2))`, normalized.
pub fn attend_kde(
    query: &[Real],
    support: &SupportSet,
    bandwidth: Real,
) -> Result<AttentionWeights> {
    check_dim(query, support)?;
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidArg {
            what: "bandwidth",
            detail: alloc::format!("must be positive, got {bandwidth}"),
        });
    }
    let mut values: Vec<Real> = (0..support.len())
        .map(|i| {
            let e = support.embedding(i);
            let sq: Real = query
                .iter()
                .zip(e)
                .map(|(&q, &s)| (q - s) * (q - s))
                .sum();
            -sq / (2.0 * bandwidth * bandwidth)
        })
        .collect();
    math::softmax_in_place(&mut values);
    Ok(AttentionWeights {
        values,
        mode: AttentionMode::Kde { bandwidth },
    })
}

/// Linear combination of support labels: `probs[c] = sum_i w_i [y_i = c]`.
pub fn classify(weights: &AttentionWeights, support: &SupportSet) -> Result<ClassDistribution> {
    if weights.values.len() != support.len() {
        return Err(shape_err(
            "classify",
            alloc::format!("{} weights vs {} supports", weights.values.len(), support.len()),
        ));
    }
    let mut probs = vec![0.0; support.ways()];
    for (w, &c) in weights.values.iter().zip(support.class_ids()) {
        probs[c] += w;
    }
    Ok(ClassDistribution { probs })
}

/// Most probable class, lowest index on ties.
pub fn predict(dist: &ClassDistribution) -> usize {
    math::argmax(&dist.probs)
}

fn check_dim(query: &[Real], support: &SupportSet) -> Result<()> {
    if support.is_empty() {
        return Err(Error::EmptySupport);
    }
    if query.len() != support.dim() {
        return Err(shape_err(
            "attend",
            alloc::format!("query dim {} vs support dim {}", query.len(), support.dim()),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Differentiable (taped) counterparts used by the training loss
// ---------------------------------------------------------------------------

/// Softmax-cosine attention built on the tape: `[k]` weights.
pub fn attend_softmax_cosine_var(query: &Var, supports: &[Var]) -> Result<Var> {
    if supports.is_empty() {
        return Err(Error::EmptySupport);
    }
    let sims = supports
        .iter()
        .map(|s| query.cosine_sim(s))
        .collect::<Result<Vec<_>>>()?;
    concat(&sims)?.softmax()
}

/// Taped label combination: weights `[k]` against one-hot labels `[k,N]`.
pub fn classify_var(weights: &Var, labels: &Var) -> Result<Var> {
    let k = weights.numel();
    let [k2, n] = labels.shape()[..] else {
        return Err(shape_err("classify", "labels must be [k,N]"));
    };
    if k != k2 {
        return Err(shape_err(
            "classify",
            alloc::format!("{k} weights vs {k2} labels"),
        ));
    }
    weights.reshape(vec![1, k])?.matmul(labels)?.reshape(vec![n])
}
