//! Reachability-constrained steering of a toy diffusion denoiser.
//!
//! The crate models denoising as a controlled dynamical system, measures
//! memorization risk through the classifier-free guidance norm, computes the
//! exact backward reachable tube of the toy system on a grid, and trains a
//! Lagrangian-constrained soft actor-critic that perturbs caption embeddings
//! in a compact latent action space to keep trajectories out of it.
//!
//! Module map:
//!
//! * [`dynamics`]: toy denoiser, guided update rule and episode rollouts.
//! * [`codec`]: linear latent action codec used to steer caption embeddings.
//! * [`approximator`]: dense ReLU networks, reverse-mode gradients, Adam.
//! * [`reachability`]: target function, safety backup, grid and tabular oracles.
//! * [`agent`]: constrained soft actor-critic and its training loop.
//! * [`metrics`]: replication, diversity, alignment and failure statistics.
//! * [`harness`]: configuration, artifacts and the command implementations.

pub mod agent;
pub mod approximator;
pub mod codec;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod reachability;
pub mod rng;
mod vecops;

pub use error::{Error, Result};
