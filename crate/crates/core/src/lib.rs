//! Multimodal variational autoencoders with aggregation-based joint
//! posteriors (AVG, PoE, MoE, MoPoE) and the mixture-of-experts prior
//! objective (MMVM), together with the pieces needed to evaluate them:
//! a small reverse-mode autodiff engine, bimodal dataset handling,
//! supervised baselines, random-forest probes and AUROC.

pub mod aggregation;
pub mod checkpoint;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod gaussians;
pub mod matrix;
pub mod nn;
pub mod seed;
pub mod supervised;
pub mod vaemodels;

pub use error::{Error, Result};
pub use matrix::Matrix;
