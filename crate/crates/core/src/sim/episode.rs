use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Command, EnvConfig, WalkerEnv};
use crate::envstats::TerrainStats;
use crate::reward_dsl::{CompiledReward, RewardProgram};
use crate::terrain::TerrainMap;
use crate::{Error, Result};

/// Maps observations to normalized actions.
pub trait Policy {
    fn act(&mut self, obs: &[f64]) -> Vec<f64>;

    /// Clears any per-episode memory.
    fn reset(&mut self) {}

    /// Expected observation width, if the policy has one.
    fn input_len(&self) -> Option<usize> {
        None
    }
}

/// Emits the same action regardless of the observation.
#[derive(Clone, Debug)]
pub struct ConstantPolicy(pub Vec<f64>);

impl Policy for ConstantPolicy {
    fn act(&mut self, _obs: &[f64]) -> Vec<f64> {
        self.0.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub base_pos: [f64; 3],
    /// Base velocity in the yaw-only heading frame.
    pub lin_vel: [f64; 3],
    pub yaw_rate: f64,
    pub roll: f64,
    pub pitch: f64,
    /// Normalized action in `[-1, 1]`.
    pub action: Vec<f64>,
    pub reward: f64,
    pub per_term: Vec<f64>,
    pub foot_contact: [bool; 2],
    pub torso_contact: bool,
    pub command: Command,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
    pub term_names: Vec<String>,
    /// Ended by a fall or torso contact rather than the step limit.
    pub terminated: bool,
    pub control_dt: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// Rolls out one episode: sense, act, step, score, until `max_steps`, a
/// fall, or torso contact.
#[allow(clippy::too_many_arguments)]
pub fn run_episode(
    policy: &mut dyn Policy,
    reward: &RewardProgram,
    map: Arc<TerrainMap>,
    command: Command,
    max_steps: usize,
    seed: u64,
    cfg: &EnvConfig,
    stats: &TerrainStats,
) -> Result<Trajectory> {
    let obs_len = cfg.observation_len();
    if let Some(n) = policy.input_len() {
        if n != obs_len {
            return Err(Error::InvalidParams(format!(
                "policy expects {n} observations, environment produces {obs_len}"
            )));
        }
    }
    let compiled = Arc::new(CompiledReward::new(reward, Arc::new(cfg.feature_schema()))?);
    let mut env = WalkerEnv::new(Arc::new(cfg.clone()), map, compiled, stats, seed);
    run_in_env(policy, &mut env, command, max_steps)
}

/// Like [`run_episode`] on an existing environment.
pub fn run_in_env(
    policy: &mut dyn Policy,
    env: &mut WalkerEnv,
    command: Command,
    max_steps: usize,
) -> Result<Trajectory> {
    let mut traj = Trajectory {
        steps: Vec::with_capacity(max_steps),
        term_names: env.reward().term_names(),
        terminated: false,
        control_dt: env.config().walker.control_dt(),
    };
    if max_steps == 0 {
        return Ok(traj);
    }
    env.set_max_steps(max_steps);
    policy.reset();
    let mut obs = env.reset_with(command);
    loop {
        let action = policy.act(&obs);
        let out = env.step(&action);
        if env.diverged() {
            return Err(Error::NanDetected);
        }
        traj.steps.push(out.record);
        if out.terminated {
            traj.terminated = true;
            break;
        }
        if out.truncated {
            break;
        }
        obs = out.obs;
    }
    Ok(traj)
}
