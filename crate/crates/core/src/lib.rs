//! Closed-loop, environment-aware reward synthesis for perceptive legged
//! locomotion.
//!
//! The crate is organised bottom-up:
//!
//! - [`terrain`]: procedural heightfields (simple bumps, gaps, obstacle blocks,
//!   descending stairs) and continuous height/normal queries.
//! - [`sensors`]: height-scan lattice, planar LiDAR sweep, observation assembly.
//! - [`envstats`]: fleet-based terrain statistics that condition synthesis.
//! - [`sim`]: a torque-driven two-legged walker on a heightfield.
//! - [`reward_dsl`]: the reward expression language (parse, validate, evaluate).
//! - [`ppo`]: from-scratch PPO with GAE on a small MLP policy.
//! - [`metrics`]: tracking error, exploration score, torso contacts, gait quality.
//! - [`synthesis`]: prompt construction plus remote and offline reward generators.
//! - [`pipeline`]: the synthesize → train → evaluate → refine loop and ablations.

// `!(x > 0.0)` is used on purpose so that NaN parameters are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod envstats;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod ppo;
pub mod reward_dsl;
pub mod seeds;
pub mod sensors;
pub mod sim;
pub mod synthesis;
pub mod terrain;

pub use error::{Error, Result};
