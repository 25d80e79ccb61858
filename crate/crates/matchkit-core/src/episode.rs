//! Datasets keyed by class and the episodic sampler.
//!
//! An episode is the unit of both training and evaluation: `ways` classes
//! drawn from a split without replacement, `shots` labeled supports per
//! class, and a disjoint batch of queries from the same classes. Class-local
//! labels are assigned by sampled order, so a model never observes global
//! class identity.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math::{self, Real};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetMeta {
    pub source: String,
    pub input_shape: Vec<usize>,
}

/// Examples indexed by class identifier. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDataset {
    classes: BTreeMap<u32, Vec<Tensor>>,
    pub meta: DatasetMeta,
}

impl ClassDataset {
    pub fn new(meta: DatasetMeta) -> Self {
        Self {
            classes: BTreeMap::new(),
            meta,
        }
    }

    pub fn add_class(&mut self, class_id: u32, examples: Vec<Tensor>) -> Result<()> {
        if examples.is_empty() {
            return Err(Error::InvalidArg {
                what: "class",
                detail: alloc::format!("class {class_id} has no examples"),
            });
        }
        for e in &examples {
            if e.shape() != self.meta.input_shape {
                return Err(crate::error::shape_err(
                    "dataset",
                    alloc::format!(
                        "class {class_id}: example shape {:?} vs dataset shape {:?}",
                        e.shape(),
                        self.meta.input_shape
                    ),
                ));
            }
        }
        if self.classes.insert(class_id, examples).is_some() {
            return Err(Error::InvalidArg {
                what: "class id",
                detail: alloc::format!("duplicate class {class_id}"),
            });
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Class identifiers in ascending order.
    pub fn class_ids(&self) -> Vec<u32> {
        self.classes.keys().copied().collect()
    }

    pub fn examples(&self, class_id: u32) -> Result<&[Tensor]> {
        self.classes
            .get(&class_id)
            .map(Vec::as_slice)
            .ok_or(Error::InvalidArg {
                what: "class id",
                detail: alloc::format!("unknown class {class_id}"),
            })
    }
}

/// Disjoint train/test class split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Vec<u32>,
    pub test: Vec<u32>,
    pub seed: u64,
}

impl SplitSpec {
    /// Maps a split made at base-class granularity onto the identifiers
    /// produced by [`augment_rotations`], keeping all four rotations of a
    /// class on the same side of the split.
    pub fn expand_rotations(&self) -> SplitSpec {
        let expand = |ids: &[u32]| {
            ids.iter()
                .flat_map(|&id| (0..4).map(move |r| id * 4 + r))
                .collect()
        };
        SplitSpec {
            train: expand(&self.train),
            test: expand(&self.test),
            seed: self.seed,
        }
    }
}

/// Shuffles the class identifiers deterministically and takes the first
/// `n_train` as the training split.
pub fn split_classes(dataset: &ClassDataset, n_train: usize, seed: u64) -> Result<SplitSpec> {
    let mut ids = dataset.class_ids();
    if n_train >= ids.len() {
        return Err(Error::InvalidArg {
            what: "split",
            detail: alloc::format!(
                "n_train {n_train} must be smaller than the class count {}",
                ids.len()
            ),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let test = ids.split_off(n_train);
    Ok(SplitSpec {
        train: ids,
        test,
        seed,
    })
}

/// Spawns four classes per input class, one per quarter-turn rotation.
/// Class `id` becomes `id*4 + r` for `r` in `0..4`. Requires square images.
pub fn augment_rotations(dataset: &ClassDataset) -> Result<ClassDataset> {
    let mut out = ClassDataset::new(dataset.meta.clone());
    for id in dataset.class_ids() {
        if id > u32::MAX / 4 {
            return Err(Error::InvalidArg {
                what: "class id",
                detail: alloc::format!("{id} too large to augment"),
            });
        }
        let examples = dataset.examples(id)?;
        for r in 0..4u32 {
            let rotated = examples
                .iter()
                .map(|e| e.rotate90(r))
                .collect::<Result<Vec<_>>>()?;
            out.add_class(id * 4 + r, rotated)?;
        }
    }
    Ok(out)
}

/// One sampled task instance.
#[derive(Debug, Clone)]
pub struct Episode {
    pub ways: usize,
    pub shots: usize,
    /// `(example, class-local label)` in class-grouped order.
    pub support: Vec<(Tensor, usize)>,
    pub batch: Vec<(Tensor, usize)>,
    /// Global class id per local label.
    pub class_ids: Vec<u32>,
    /// `(class id, example index)` provenance for disjointness checks.
    pub support_keys: Vec<(u32, usize)>,
    pub batch_keys: Vec<(u32, usize)>,
    pub seed: u64,
}

/// Samples an episode: `ways` classes uniformly without replacement from
/// `part`, then per class `shots` support and `batch_per_class` batch
/// examples without replacement (so support and batch are disjoint).
pub fn sample_episode(
    dataset: &ClassDataset,
    part: &[u32],
    ways: usize,
    shots: usize,
    batch_per_class: usize,
    seed: u64,
) -> Result<Episode> {
    if ways == 0 || shots == 0 {
        return Err(Error::InvalidArg {
            what: "episode",
            detail: "ways and shots must be positive".into(),
        });
    }
    if part.len() < ways {
        return Err(Error::InsufficientClasses {
            requested: ways,
            available: part.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class_ids: Vec<u32> = rand::seq::index::sample(&mut rng, part.len(), ways)
        .into_iter()
        .map(|i| part[i])
        .collect();

    let mut support = Vec::with_capacity(ways * shots);
    let mut batch = Vec::with_capacity(ways * batch_per_class);
    let mut support_keys = Vec::with_capacity(ways * shots);
    let mut batch_keys = Vec::with_capacity(ways * batch_per_class);
    for (local, &cid) in class_ids.iter().enumerate() {
        let examples = dataset.examples(cid)?;
        let needed = shots + batch_per_class;
        if examples.len() < needed {
            return Err(Error::InsufficientExamples {
                class_id: cid,
                needed,
                available: examples.len(),
            });
        }
        let picks = rand::seq::index::sample(&mut rng, examples.len(), needed);
        for (j, idx) in picks.into_iter().enumerate() {
            if j < shots {
                support.push((examples[idx].clone(), local));
                support_keys.push((cid, idx));
            } else {
                batch.push((examples[idx].clone(), local));
                batch_keys.push((cid, idx));
            }
        }
    }
    Ok(Episode {
        ways,
        shots,
        support,
        batch,
        class_ids,
        support_keys,
        batch_keys,
        seed,
    })
}

/// Derives the seed for episode `index` of a seeded run (splitmix64), so
/// episodes can be sampled independently and in parallel.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Standard normal draw; goes through f64 so the stream does not depend on
/// the precision feature.
fn standard_normal(rng: &mut ChaCha8Rng) -> Real {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    let z = libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2);
    z as Real
}

pub const SYNTHETIC_EXAMPLES_PER_CLASS: usize = 40;

/// Synthetic vector dataset: class prototypes drawn uniformly on the unit
/// sphere, examples are the prototype plus isotropic Gaussian noise with
/// the given standard deviation. Forty examples per class.
pub fn gen_synthetic(n_classes: usize, dim: usize, noise: Real, seed: u64) -> Result<ClassDataset> {
    if n_classes < 2 || dim == 0 {
        return Err(Error::InvalidArg {
            what: "synthetic dataset",
            detail: "need at least 2 classes and a positive dimension".into(),
        });
    }
    if !(noise >= 0.0) {
        return Err(Error::InvalidArg {
            what: "noise",
            detail: alloc::format!("must be nonnegative, got {noise}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dataset = ClassDataset::new(DatasetMeta {
        source: alloc::format!("synthetic(classes={n_classes},dim={dim},noise={noise})"),
        input_shape: alloc::vec![dim],
    });
    for class in 0..n_classes as u32 {
        let mut proto: Vec<Real> = (0..dim).map(|_| standard_normal(&mut rng)).collect();
        let norm = math::l2_norm(&proto).max(math::NORM_EPS);
        for p in proto.iter_mut() {
            *p /= norm;
        }
        let examples = (0..SYNTHETIC_EXAMPLES_PER_CLASS)
            .map(|_| {
                let data = proto
                    .iter()
                    .map(|&p| p + noise * standard_normal(&mut rng))
                    .collect();
                Tensor::from_vec(alloc::vec![dim], data)
            })
            .collect::<Result<Vec<_>>>()?;
        dataset.add_class(class, examples)?;
    }
    Ok(dataset)
}
