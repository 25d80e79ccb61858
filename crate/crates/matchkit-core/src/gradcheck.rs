//! Central finite-difference verification of the reverse pass.
//!
//! The analytic gradient of the full episode loss is compared, coordinate
//! by coordinate, against `(f(p+h) - f(p-h)) / 2h` computed with forward
//! passes only. A relative error above [`GRADCHECK_TOL`] in any parameter
//! group means a broken backward rule.

use alloc::string::String;
use alloc::vec::Vec;

use crate::encoder::{init_params, BoundParams, ModelParams, ModelSpec, Phase};
use crate::episode::{gen_synthetic, sample_episode, Episode};
use crate::error::Result;
use crate::graph::Graph;
use crate::math::{self, Real};
use crate::tensor::Tensor;
use crate::train::episode_nll;

pub const GRADCHECK_TOL: Real = 1e-4;
pub const FD_STEP: Real = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_err: Real,
}

impl GroupReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= GRADCHECK_TOL
    }
}

/// Hybrid relative error: absolute below 1, relative above.
pub fn relative_error(a: Real, b: Real) -> Real {
    math::abs(a - b) / math::abs(a).max(math::abs(b)).max(1.0)
}

/// Central-difference gradient of `f` with respect to one named parameter.
pub fn fd_gradient(
    params: &ModelParams,
    name: &str,
    f: &mut dyn FnMut(&ModelParams) -> Result<Real>,
) -> Result<Vec<Real>> {
    let base = params.get(name)?.clone();
    let shape: Vec<usize> = base.shape().into();
    let mut grad = Vec::with_capacity(base.numel());
    for i in 0..base.numel() {
        let mut probe = params.clone();
        let mut plus = base.to_vec();
        plus[i] += FD_STEP;
        probe.set(name, Tensor::from_vec(shape.clone(), plus)?)?;
        let up = f(&probe)?;
        let mut minus = base.to_vec();
        minus[i] -= FD_STEP;
        probe.set(name, Tensor::from_vec(shape.clone(), minus)?)?;
        let down = f(&probe)?;
        grad.push((up - down) / (2.0 * FD_STEP));
    }
    Ok(grad)
}

/// Builds a deterministic small episode for checking gradients of the full
/// pipeline. The model must use the vector encoder.
pub fn check_episode(model: &ModelSpec, ways: usize, shots: usize, seed: u64) -> Result<Episode> {
    let input_dim = match &model.encoder {
        crate::encoder::EncoderConfig::Mlp(m) => m.input_dim,
        crate::encoder::EncoderConfig::Conv(_) => {
            return Err(crate::error::Error::Config(
                "gradient check episodes use the vector encoder".into(),
            ))
        }
    };
    let dataset = gen_synthetic(ways + 2, input_dim, 0.5, seed)?;
    let ids = dataset.class_ids();
    sample_episode(&dataset, &ids, ways, shots, 2, seed ^ 0x5eed)
}

/// Checks every trainable parameter group of the episode loss. With
/// `inject_fault` the softmax backward rule is deliberately broken, so the
/// check must fail; this is the negative control.
pub fn episode_gradient_check(
    model: &ModelSpec,
    ways: usize,
    shots: usize,
    seed: u64,
    inject_fault: bool,
) -> Result<Vec<GroupReport>> {
    let episode = check_episode(model, ways, shots, seed)?;
    let params = init_params(model, seed ^ 0x9a5c)?;

    let graph = Graph::new();
    if inject_fault {
        graph.inject_softmax_backward_fault(1.02);
    }
    let bound = BoundParams::bind(&graph, &params);
    let fwd = episode_nll(&graph, &bound, &params, model, &episode, Phase::Train)?;
    let grads = graph.backward(&fwd.loss)?;

    let mut loss_of = |p: &ModelParams| -> Result<Real> {
        let g = Graph::new();
        let b = BoundParams::bind_frozen(&g, p);
        Ok(episode_nll(&g, &b, p, model, &episode, Phase::Train)?
            .loss
            .item())
    };

    let mut reports = Vec::new();
    for name in params.trainable_names() {
        let analytic = grads.flat(&bound.var(&name)?);
        let numeric = fd_gradient(&params, &name, &mut loss_of)?;
        let max_rel_err = analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| relative_error(a, n))
            .fold(0.0, Real::max);
        reports.push(GroupReport { name, max_rel_err });
    }
    Ok(reports)
}
