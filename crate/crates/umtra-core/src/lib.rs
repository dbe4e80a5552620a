//! Unsupervised meta-learning engine.
//!
//! Implements meta-learning of few-shot image classifiers where the
//! meta-training tasks are synthesized from an unlabeled pool by random
//! sampling plus augmentation, alongside a supervised episodic baseline
//! and plain train-from-scratch. The crate is self-contained: it carries
//! its own reverse-mode autodiff tape (with gradients of gradients, as
//! needed for the second-order meta-update), the conv/MLP classifiers,
//! episode builders, a procedural glyph dataset, and the analytic
//! utilities the experiment harness exposes.
//!
//! The crate is `no_std` + `alloc`; everything that touches the file
//! system or the clock lives in the companion CLI crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod augment;
pub mod biasvar;
pub mod data;
mod error;
pub mod graph;
pub mod meta;
pub mod nn;
pub mod rng;
pub mod taskgen;
pub mod tensor;

pub use error::{CoreError, Result};
pub use graph::Graph;
pub use nn::{GradMap, ModelKind, ModelSpec, ParamSet};
pub use tensor::Tensor;
