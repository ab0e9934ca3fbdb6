//! Variational inference with model-informed autoregressive flows.
//!
//! The crate trains flow-based and Gaussian variational families against
//! hierarchical Bayesian benchmark models, with a scalar reverse-mode tape for
//! gradients, a learned partial non-centering transform, and numerical
//! certification that the flow constructions match their closed-form targets.
//!
//! Layout:
//! - [`adcore`]: scalar tape autodiff and the finite-difference oracle.
//! - [`modelzoo`]: hierarchical model graphs, benchmark builders, datasets.
//! - [`flows`]: full-rank affine, forward/inverse/generalized autoregressive
//!   flows, and the model-informed flow with its ablation flags.
//! - [`vip`]: the partial non-centering transform, its inverse, sampling, and
//!   the closed-form flow-parameter constructions.
//! - [`equivalence`]: randomized certification of the construction identities.
//! - [`elbo`]: Monte Carlo ELBO estimation, Adam training, learning-rate sweeps.
//! - [`cli`]: config-driven commands and result records.

pub mod adcore;
pub mod cli;
pub mod elbo;
pub mod equivalence;
pub mod error;
pub mod flows;
pub mod linalg;
pub mod modelzoo;
pub mod vip;

pub use error::{Error, Result};
