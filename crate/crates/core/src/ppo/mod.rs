//! Proximal policy optimisation with generalized advantage estimation over
//! a batch of walker environments.

pub mod checkpoint;
mod gae;
mod loss;
mod net;
mod train;

use serde::{Deserialize, Serialize};

pub use gae::{compute_gae, normalize};
pub use loss::{clipped_objective, ppo_loss, ppo_loss_and_grad, Batch, LossCoefficients, LossTerms};
pub use net::{Dense, Forward, GatedCell, NetConfig, PolicyParams, LOG_STD_MAX, LOG_STD_MIN};
pub use train::{train, train_with, Adam, IterationLog, PolicyRunner, TrainingLog};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PPOConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip_eps: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub num_envs: usize,
    pub steps_per_rollout: usize,
    pub iterations: usize,
    pub max_grad_norm: f64,
    /// Divide rewards by the running std of discounted returns.
    pub reward_scaling: bool,
    pub net: NetConfig,
}

impl Default for PPOConfig {
    fn default() -> Self {
        PPOConfig {
            gamma: 0.99,
            lambda: 0.95,
            clip_eps: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
            learning_rate: 3e-4,
            epochs: 4,
            minibatches: 4,
            num_envs: 64,
            steps_per_rollout: 64,
            iterations: 200,
            max_grad_norm: 1.0,
            reward_scaling: true,
            net: NetConfig::default(),
        }
    }
}

impl PPOConfig {
    /// Full-size shape: 3000 environments, 500 iterations.
    pub fn full_scale() -> Self {
        PPOConfig { num_envs: 3000, iterations: 500, ..PPOConfig::default() }
    }

    pub fn coefficients(&self) -> LossCoefficients {
        LossCoefficients { clip_eps: self.clip_eps, value_coef: self.value_coef, entropy_coef: self.entropy_coef }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| x > 0.0 && x <= 1.0;
        let checks = [
            (unit(self.gamma), "gamma must be in (0, 1]"),
            (unit(self.lambda), "lambda must be in (0, 1]"),
            (self.clip_eps > 0.0 && self.clip_eps < 1.0, "clip epsilon must be in (0, 1)"),
            (self.learning_rate > 0.0, "learning rate must be positive"),
            (self.epochs > 0 && self.minibatches > 0, "epochs and minibatches must be positive"),
            (self.num_envs > 0 && self.steps_per_rollout > 0, "environment and step counts must be positive"),
            (
                self.minibatches <= self.num_envs * self.steps_per_rollout,
                "more minibatches than samples per rollout",
            ),
            (self.max_grad_norm > 0.0, "gradient clip norm must be positive"),
            (self.net.hidden.iter().all(|&h| h > 0), "hidden widths must be positive"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::InvalidParams(msg.into()));
            }
        }
        Ok(())
    }
}
