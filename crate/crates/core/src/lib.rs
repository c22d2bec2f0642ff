//! Diversity-incentivized GRPO on desk-scale denoising chains.
//!
//! The crate is organised bottom-up:
//!
//! - [`mdp`]: tabular MDPs, value iteration and potential-based shaping
//!   certification.
//! - [`policy`]: the Gaussian-chain denoising policy, analytic reward
//!   landscapes and supervised pretraining.
//! - [`grpo`]: group rollouts, group-relative advantages, the clipped
//!   surrogate and the epoch loop.
//! - [`drift`]: reward-concentrated selection, annealed prompt noise and
//!   diversity shaping with decoupled advantages.
//! - [`metrics`]: intra-group diversity, set diversity, generalized recall
//!   and the Vendi score.
//! - [`theory`]: closed-form KL-regularized optima on discrete bandits.
//! - [`harness`]: experiment configuration, orchestration, Pareto records and
//!   run comparison.

pub mod drift;
pub mod error;
pub mod grpo;
pub mod harness;
pub mod mdp;
pub mod metrics;
pub mod optim;
pub mod policy;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
