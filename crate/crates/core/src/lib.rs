//! Two-stage diffusion-policy training that stays robust to perturbed
//! demonstrations.
//!
//! A conditional diffusion policy is first trained on clean expert
//! demonstrations. Training then continues on a mixture of clean and
//! perturbed trajectories, and every batch is filtered by how far the
//! policy's own sampled action lies from the recorded one: transitions whose
//! squared error exceeds the batch threshold do not contribute to the loss.
//!
//! Module map:
//! - [`nn`]: dense networks, exact gradients, AdamW, checkpoint container
//! - [`diffusion`]: noise schedule, forward noising, loss, reverse sampler
//! - [`policy`]: the embedding + denoiser composition
//! - [`envs`]: kinematic manipulation tasks and scripted experts
//! - [`dataset`]: trajectories, perturbation, mixing, batching, files
//! - [`trainer`]: stage 1 and the filtered stage 2
//! - [`eval`]: rollouts, IQM, bootstrap intervals, run comparison
//! - [`config`]: run configuration files and presets
//! - [`run`]: end-to-end runs and run directories

pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod envs;
pub mod error;
pub mod eval;
pub mod nn;
pub mod policy;
pub mod rng;
pub mod run;
pub mod trainer;

pub use error::{Error, Result};
