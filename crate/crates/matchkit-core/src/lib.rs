//! Core library for attention-based one-shot classification.
//!
//! Everything numeric lives here: a dense tensor type with reverse-mode
//! differentiation, the embedding networks, the matching classifier with its
//! three attention modes, context-conditional embeddings over the support
//! set, episodic dataset sampling, and the meta-training loop. The crate is
//! `no_std` (with `alloc`); file formats, PNG ingestion and the CLI live in
//! the companion `matchkit` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod attention;
pub mod checkpoint;
pub mod context;
pub mod encoder;
pub mod episode;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod math;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use math::Real;
pub use tensor::Tensor;
