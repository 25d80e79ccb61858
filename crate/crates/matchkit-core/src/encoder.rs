//! Embedding networks and the named parameter store.
//!
//! Two encoders are provided: the four-block convolutional stack used for
//! 28x28 grayscale images (each block is conv 3x3 -> batchnorm -> relu ->
//! 2x2 max-pool, collapsing the feature map to a 64-vector) and a small
//! affine/relu stack for vector data.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, Var};
use crate::math::Real;
use crate::tensor::Tensor;

/// Named parameter map. Names are unique; shapes are fixed after
/// initialization. Running batchnorm statistics live here too, marked
/// non-trainable via the tensor's `requires_grad` flag.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    entries: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), tensor);
        assert!(prev.is_none(), "duplicate parameter name `{name}`");
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.into()))
    }

    /// Replaces a value; the new tensor must keep the registered shape.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.into()))?;
        if slot.shape() != tensor.shape() {
            return Err(crate::error::shape_err(
                "param set",
                alloc::format!("{name}: {:?} -> {:?}", slot.shape(), tensor.shape()),
            ));
        }
        let requires = slot.requires_grad();
        *slot = tensor.with_requires_grad(requires);
        Ok(())
    }

    /// Drops a parameter if present (used when swapping classifier heads).
    pub fn remove(&mut self, name: &str) {
        self.entries.remove(name);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Parameters bound to one graph as leaves, addressable by name.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn bind(graph: &Graph, params: &ModelParams) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| (name.clone(), graph.leaf(t)))
            .collect();
        Self { vars }
    }

    /// Binds every parameter as a constant: no gradient bookkeeping, for
    /// evaluation-only forward passes.
    pub fn bind_frozen(graph: &Graph, params: &ModelParams) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| (name.clone(), graph.constant(t)))
            .collect();
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .cloned()
            .ok_or_else(|| Error::MissingParam(name.into()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Whether batchnorm normalizes by batch statistics (training) or by the
/// stored running statistics (evaluation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvEmbedConfig {
    pub in_channels: usize,
    pub input_hw: usize,
    pub blocks: usize,
    pub filters: usize,
}

impl Default for ConvEmbedConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            input_hw: 28,
            blocks: 4,
            filters: 64,
        }
    }
}

impl ConvEmbedConfig {
    /// The block stack must collapse the spatial extent to exactly 1x1 so
    /// the embedding is a plain `filters`-vector.
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.filters == 0 || self.input_hw == 0 {
            return Err(Error::Config("conv encoder extents must be positive".into()));
        }
        let mut s = self.input_hw;
        for _ in 0..self.blocks {
            s /= 2;
        }
        if s != 1 {
            return Err(Error::Config(alloc::format!(
                "{} blocks reduce {}x{} to {s}x{s}, expected 1x1",
                self.blocks,
                self.input_hw,
                self.input_hw
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpEmbedConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
}

impl MlpEmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config("mlp encoder extents must be positive".into()));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim));
        dims
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EncoderConfig {
    Conv(ConvEmbedConfig),
    Mlp(MlpEmbedConfig),
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            EncoderConfig::Conv(c) => c.validate(),
            EncoderConfig::Mlp(c) => c.validate(),
        }
    }

    pub fn embed_dim(&self) -> usize {
        match self {
            EncoderConfig::Conv(c) => c.filters,
            EncoderConfig::Mlp(c) => c.output_dim,
        }
    }

    /// Shape of one example as stored in datasets.
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            EncoderConfig::Conv(c) => vec![c.in_channels, c.input_hw, c.input_hw],
            EncoderConfig::Mlp(c) => vec![c.input_dim],
        }
    }
}

/// Full model layout: the embedding network plus, optionally, the
/// support-conditional context stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub encoder: EncoderConfig,
    pub fce: Option<crate::context::FceConfig>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder.embed_dim()
    }
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Uniform fan-based draw with bound sqrt(6 / (fan_in + fan_out)),
/// giving variance 2 / (fan_in + fan_out).
pub(crate) fn glorot_uniform(
    rng: &mut ChaCha8Rng,
    fan_in: usize,
    fan_out: usize,
    shape: Vec<usize>,
) -> Tensor {
    let bound = crate::math::sqrt(6.0 / (fan_in + fan_out) as Real);
    let numel: usize = shape.iter().product();
    // Draws go through f64 so the stream is identical in both precisions.
    let data: Vec<Real> = (0..numel)
        .map(|_| ((rng.gen::<f64>() * 2.0 - 1.0) as Real) * bound)
        .collect();
    Tensor::from_parts(shape, alloc::sync::Arc::new(data)).with_requires_grad(true)
}

fn init_lstm_cell(
    params: &mut ModelParams,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d_x: usize,
    d_rec: usize,
    d_h: usize,
) {
    let d_cat = d_x + d_rec;
    for gate in ["wi", "wf", "wo", "wc"] {
        params.insert(
            alloc::format!("{prefix}.{gate}"),
            glorot_uniform(rng, d_cat, d_h, vec![d_h, d_cat]),
        );
    }
    for (gate, fill) in [("bi", 0.0), ("bf", 1.0), ("bo", 0.0), ("bc", 0.0)] {
        params.insert(
            alloc::format!("{prefix}.{gate}"),
            Tensor::full(vec![d_h], fill).with_requires_grad(true),
        );
    }
}

/// Builds all parameters for a model: encoder weights, batchnorm state and,
/// when enabled, the recurrent context weights. Deterministic under `seed`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::new();
    match &spec.encoder {
        EncoderConfig::Conv(cfg) => {
            let mut in_c = cfg.in_channels;
            for b in 0..cfg.blocks {
                let f = cfg.filters;
                params.insert(
                    alloc::format!("enc.block{b}.conv.w"),
                    glorot_uniform(&mut rng, in_c * 9, f * 9, vec![f, in_c, 3, 3]),
                );
                params.insert(
                    alloc::format!("enc.block{b}.bn.gamma"),
                    Tensor::full(vec![f], 1.0).with_requires_grad(true),
                );
                params.insert(
                    alloc::format!("enc.block{b}.bn.beta"),
                    Tensor::zeros(vec![f]).with_requires_grad(true),
                );
                // running statistics, updated outside the graph
                params.insert(alloc::format!("enc.block{b}.bn.mean"), Tensor::zeros(vec![f]));
                params.insert(
                    alloc::format!("enc.block{b}.bn.var"),
                    Tensor::full(vec![f], 1.0),
                );
                in_c = f;
            }
        }
        EncoderConfig::Mlp(cfg) => {
            for (i, (d_in, d_out)) in cfg.layer_dims().into_iter().enumerate() {
                params.insert(
                    alloc::format!("enc.fc{i}.w"),
                    glorot_uniform(&mut rng, d_in, d_out, vec![d_in, d_out]),
                );
                params.insert(
                    alloc::format!("enc.fc{i}.b"),
                    Tensor::zeros(vec![d_out]).with_requires_grad(true),
                );
            }
        }
    }
    if spec.fce.is_some() {
        let d = spec.embed_dim();
        init_lstm_cell(&mut params, &mut rng, "ctx.fwd", d, d, d);
        init_lstm_cell(&mut params, &mut rng, "ctx.bwd", d, d, d);
        // the reader's recurrent input is [state, readout], width 2d
        init_lstm_cell(&mut params, &mut rng, "read", d, 2 * d, d);
    }
    Ok(params)
}

/// Adds a linear softmax head over `n_classes`, used by the conventionally
/// trained classifier baseline.
pub fn init_classifier_head(
    params: &mut ModelParams,
    embed_dim: usize,
    n_classes: usize,
    seed: u64,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    params.insert(
        "head.w",
        glorot_uniform(&mut rng, embed_dim, n_classes, vec![embed_dim, n_classes]),
    );
    params.insert(
        "head.b",
        Tensor::zeros(vec![n_classes]).with_requires_grad(true),
    );
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

/// Per-block batch statistics produced by a training-mode conv forward;
/// the trainer folds these into the stored running averages.
pub struct ConvBatchStats {
    pub per_block: Vec<BatchStats>,
}

/// Embeds a `[B,C,H,W]` image batch to `[B,filters]`.
///
/// In `Phase::Train` each block normalizes by the batch statistics and the
/// statistics are returned; in `Phase::Eval` the stored running statistics
/// make the pass deterministic and batch-composition independent.
pub fn embed_conv(
    graph: &Graph,
    bound: &BoundParams,
    params: &ModelParams,
    cfg: &ConvEmbedConfig,
    images: &Tensor,
    phase: Phase,
) -> Result<(Var, Option<ConvBatchStats>)> {
    let [b, c, h, w] = images.shape()[..] else {
        return Err(crate::error::shape_err(
            "embed_conv",
            "images must be [B,C,H,W]",
        ));
    };
    if c != cfg.in_channels || h != cfg.input_hw || w != cfg.input_hw {
        return Err(crate::error::shape_err(
            "embed_conv",
            alloc::format!(
                "expected [B,{},{},{}], got {:?}",
                cfg.in_channels,
                cfg.input_hw,
                cfg.input_hw,
                images.shape()
            ),
        ));
    }
    let mut x = graph.constant(images);
    let mut stats = Vec::new();
    for blk in 0..cfg.blocks {
        let weight = bound.var(&alloc::format!("enc.block{blk}.conv.w"))?;
        let gamma = bound.var(&alloc::format!("enc.block{blk}.bn.gamma"))?;
        let beta = bound.var(&alloc::format!("enc.block{blk}.bn.beta"))?;
        x = x.conv2d(&weight)?;
        x = match phase {
            Phase::Train => {
                let (y, s) = x.batchnorm_train(&gamma, &beta)?;
                stats.push(s);
                y
            }
            Phase::Eval => {
                let mean = params.get(&alloc::format!("enc.block{blk}.bn.mean"))?;
                let var = params.get(&alloc::format!("enc.block{blk}.bn.var"))?;
                x.batchnorm_eval(&gamma, &beta, mean.data(), var.data())?
            }
        };
        x = x.relu().maxpool2x2_floor()?;
    }
    let out = x.reshape(vec![b, cfg.filters])?;
    let stats = match phase {
        Phase::Train => Some(ConvBatchStats { per_block: stats }),
        Phase::Eval => None,
    };
    Ok((out, stats))
}

/// Embeds a `[B,d_in]` batch of vectors through the affine/relu stack.
pub fn embed_mlp(
    graph: &Graph,
    bound: &BoundParams,
    cfg: &MlpEmbedConfig,
    x: &Tensor,
) -> Result<Var> {
    let [_, d] = x.shape()[..] else {
        return Err(crate::error::shape_err("embed_mlp", "input must be [B,d]"));
    };
    if d != cfg.input_dim {
        return Err(crate::error::shape_err(
            "embed_mlp",
            alloc::format!("expected [B,{}], got {:?}", cfg.input_dim, x.shape()),
        ));
    }
    let n_layers = cfg.layer_dims().len();
    let mut h = graph.constant(x);
    for i in 0..n_layers {
        let w = bound.var(&alloc::format!("enc.fc{i}.w"))?;
        let b = bound.var(&alloc::format!("enc.fc{i}.b"))?;
        h = h.matmul(&w)?.add_bias(&b)?;
        if i + 1 < n_layers {
            h = h.relu();
        }
    }
    Ok(h)
}

/// Dispatches on the encoder kind; conv encoders receive the batchnorm phase.
pub fn embed(
    graph: &Graph,
    bound: &BoundParams,
    params: &ModelParams,
    cfg: &EncoderConfig,
    batch: &Tensor,
    phase: Phase,
) -> Result<(Var, Option<ConvBatchStats>)> {
    match cfg {
        EncoderConfig::Conv(c) => embed_conv(graph, bound, params, c, batch, phase),
        EncoderConfig::Mlp(c) => Ok((embed_mlp(graph, bound, c, batch)?, None)),
    }
}
