//! Conditional-prior variational latent-variable models built on a shared
//! embedding space, for cross-modal retrieval and latent factor discovery.
//!
//! The crate is organised bottom-up:
//!
//! - [`numkit`]: tensors, tape-based reverse-mode autodiff, RNG, Adam.
//! - [`nets`]: MLP / conv stacks and the L2-normalised modality embedders.
//! - [`rivae`]: the retrieval IVAE (conditional prior, homoscedastic decoder in
//!   embedding space, posterior) with its three loss terms and the two-stage
//!   training schedule.
//! - [`baselines`]: Cos-Sim-LVM and the joint bi-modal VAE with a
//!   product-of-experts posterior and total-correlation penalty.
//! - [`datagen`]: Synth, Sprites and Split-MNIST paired datasets.
//! - [`retrieval`]: the retrieval protocol and R@K / Med-R reports.
//! - [`probe`]: latent traversal, D/C/I metrics, digit-transition statistics.
//! - [`cli`]: configured, reproducible runs with persisted artifacts.

pub mod baselines;
pub mod cli;
pub mod datagen;
mod error;
pub mod nets;
pub mod numkit;
pub mod probe;
pub mod retrieval;
pub mod rivae;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
