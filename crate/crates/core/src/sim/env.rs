use std::sync::Arc;

use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    reset, step, Command, CommandRanges, ContactReport, ResetOptions, StepRecord, WalkerConfig, WalkerState,
    JOINTS,
};
use crate::envstats::{median_relative, TerrainStats};
use crate::reward_dsl::{CompiledReward, FeatureEnv, FeatureSchema};
use crate::sensors::{self, BasePose, ObservationMode, Proprio, ScanGrid, SensorConfig, SensorFrame};
use crate::terrain::TerrainMap;
use crate::{Error, Result};

/// Height deviation from the local terrain that ends an episode as a fall.
pub const FALL_DEPTH: f64 = 2.0;

/// Fixed per-block observation scaling: `(raw − offset) · scale`, then
/// clipped to `±clip`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObsScaling {
    pub lin_vel: f64,
    pub ang_vel: f64,
    pub command: f64,
    pub joint_pos: f64,
    pub joint_vel: f64,
    /// Applied after adding the nominal base height, so flat ground reads 0.
    pub height_scan: f64,
    pub lidar: f64,
    pub clip: f64,
}

impl Default for ObsScaling {
    fn default() -> Self {
        ObsScaling {
            lin_vel: 1.0,
            ang_vel: 0.25,
            command: 1.0,
            joint_pos: 1.0,
            joint_vel: 0.05,
            height_scan: 1.0,
            lidar: 0.2,
            clip: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub walker: WalkerConfig,
    pub sensors: SensorConfig,
    pub mode: ObservationMode,
    pub max_episode_steps: usize,
    pub commands: CommandRanges,
    pub scaling: ObsScaling,
    /// Episodes are truncated once the base is this close to the map edge.
    pub edge_margin: f64,
    pub reset_jitter: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            walker: WalkerConfig::default(),
            sensors: SensorConfig::desk(),
            mode: ObservationMode::Perceptive,
            max_episode_steps: 400,
            commands: CommandRanges::default(),
            scaling: ObsScaling::default(),
            edge_margin: 1.0,
            reset_jitter: 0.02,
        }
    }
}

impl EnvConfig {
    pub fn observation_len(&self) -> usize {
        sensors::observation_len(&self.sensors, JOINTS)
    }

    pub fn action_len(&self) -> usize {
        JOINTS
    }

    pub fn feature_schema(&self) -> FeatureSchema {
        FeatureSchema::walker(self.mode, &self.sensors, JOINTS)
    }

    pub fn validate(&self) -> Result<()> {
        self.sensors.validate()?;
        self.commands.validate()?;
        if self.walker.substeps == 0 || !(self.walker.physics_dt > 0.0) {
            return Err(Error::InvalidParams("physics step and substeps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub obs: Vec<f64>,
    pub reward: f64,
    /// Unweighted reward term values.
    pub per_term: Vec<f64>,
    /// Episode ended by a fall or torso contact.
    pub terminated: bool,
    /// Episode cut by the step limit or the arena edge.
    pub truncated: bool,
    pub record: StepRecord,
}

impl StepOutcome {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

/// One walker on one map with a reward program attached.
#[derive(Clone, Debug)]
pub struct WalkerEnv {
    cfg: Arc<EnvConfig>,
    map: Arc<TerrainMap>,
    reward: Arc<CompiledReward>,
    features: FeatureEnv,
    per_term: Vec<f64>,
    state: WalkerState,
    command: Command,
    steps: usize,
    max_steps: usize,
    diverged: bool,
    rng: ChaCha8Rng,
}

impl WalkerEnv {
    /// The reward must have been compiled against `cfg.feature_schema()`.
    pub fn new(
        cfg: Arc<EnvConfig>,
        map: Arc<TerrainMap>,
        reward: Arc<CompiledReward>,
        stats: &TerrainStats,
        seed: u64,
    ) -> Self {
        let mut features = FeatureEnv::zeros(reward.schema().clone());
        for (k, v) in stats.values() {
            features.set(k, v);
        }
        let rng = crate::seeds::rng(seed, &[0x0065_6e76]);
        let state = reset(&map, &cfg.walker, &ResetOptions { random_position: false, jitter: 0.0 }, seed);
        let max_steps = cfg.max_episode_steps;
        let n = reward.num_terms();
        WalkerEnv {
            cfg,
            map,
            reward,
            features,
            per_term: vec![0.0; n],
            state,
            command: Command::default(),
            steps: 0,
            max_steps,
            diverged: false,
            rng,
        }
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn state(&self) -> &WalkerState {
        &self.state
    }

    pub fn command(&self) -> Command {
        self.command
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn map(&self) -> &TerrainMap {
        &self.map
    }

    /// True if the integration blew up during the current episode; the
    /// step that diverged was reported as torso contact.
    pub fn diverged(&self) -> bool {
        self.diverged
    }

    pub fn set_max_steps(&mut self, n: usize) {
        self.max_steps = n;
    }

    pub fn reward(&self) -> &CompiledReward {
        &self.reward
    }

    /// Starts a new episode with a sampled command.
    pub fn reset(&mut self) -> Vec<f64> {
        let cmd = self.cfg.commands.sample(&mut self.rng);
        self.reset_with(cmd)
    }

    /// Starts a new episode with the given command.
    pub fn reset_with(&mut self, command: Command) -> Vec<f64> {
        let seed = self.rng.next_u64();
        let opts = ResetOptions { random_position: true, jitter: self.cfg.reset_jitter };
        self.state = reset(&self.map, &self.cfg.walker, &opts, seed);
        self.command = command;
        self.steps = 0;
        self.diverged = false;
        let frame = self.sense();
        self.observation(&frame)
    }

    /// Replaces the walker state (for scripted scenarios).
    pub fn set_state(&mut self, state: WalkerState) {
        self.state = state;
    }

    pub fn current_observation(&self) -> Vec<f64> {
        let frame = self.sense();
        self.observation(&frame)
    }

    /// Current sensor readings; Blind mode leaves the exteroceptive blocks
    /// zero-filled rather than computing them.
    pub fn sense(&self) -> SensorFrame {
        let s = &self.state;
        let sc = &self.cfg.sensors;
        let (height_scan, lidar) = if self.cfg.mode.is_perceptive() {
            let pose = BasePose::new(s.base_pos[0], s.base_pos[1], s.base_pos[2], s.base_yaw);
            (sensors::height_scan(&self.map, &pose, sc), sensors::lidar_scan(&self.map, &pose, sc))
        } else {
            (
                ScanGrid { rows: sc.scan_rows, cols: sc.scan_cols, spacing: sc.scan_spacing, values: vec![0.0; sc.scan_len()] },
                vec![0.0; sc.lidar_rays],
            )
        };
        SensorFrame {
            height_scan,
            lidar,
            proprio: Proprio {
                lin_vel: s.body_velocity(),
                ang_vel: [s.roll_rate, s.pitch_rate, s.base_yaw_rate],
                gravity: s.projected_gravity(),
                command: self.command.as_array(),
                joint_pos: s.q.to_vec(),
                joint_vel: s.qd.to_vec(),
                prev_action: s.prev_action.to_vec(),
            },
        }
    }

    /// Scaled policy input for a frame.
    pub fn observation(&self, frame: &SensorFrame) -> Vec<f64> {
        let mut obs = sensors::assemble_observation(frame, self.cfg.mode);
        scale_observation(&mut obs, &self.cfg);
        obs
    }

    /// Applies a normalized action in `[-1, 1]` (scaled by the torque limit)
    /// for one control step. The caller resets after `done()`.
    pub fn step(&mut self, action: &[f64]) -> StepOutcome {
        let mut a = [0.0; JOINTS];
        for (dst, src) in a.iter_mut().zip(action) {
            *dst = if src.is_finite() { src.clamp(-1.0, 1.0) } else { 0.0 };
        }
        let limit = self.cfg.walker.torque_limit;
        let torque = a.map(|x| x * limit);
        let mut report = match step(&self.state, &torque, &self.map, &self.cfg.walker) {
            Ok((next, report)) => {
                self.state = next;
                report
            }
            Err(_) => {
                self.diverged = true;
                ContactReport { torso_contact: true, ..ContactReport::default() }
            }
        };
        self.steps += 1;
        let s = &self.state;
        let local = self.map.height_at_clamped(s.base_pos[0], s.base_pos[1]);
        if (s.base_pos[2] - local).abs() > FALL_DEPTH {
            report.torso_contact = true;
        }
        let terminated = report.torso_contact;
        let b = self.map.bounds().expanded(-self.cfg.edge_margin);
        let truncated = !terminated && (self.steps >= self.max_steps || !b.contains(s.base_pos[0], s.base_pos[1]));

        let frame = self.sense();
        self.fill_features(&frame, &a, &report, local);
        let reward = self.reward.eval_into(&self.features, &mut self.per_term);
        let obs = self.observation(&frame);
        self.state.prev_action = a;

        let s = &self.state;
        let hv = s.heading_velocity();
        let record = StepRecord {
            base_pos: s.base_pos,
            lin_vel: hv,
            yaw_rate: s.base_yaw_rate,
            roll: s.base_roll,
            pitch: s.base_pitch,
            action: a.to_vec(),
            reward,
            per_term: self.per_term.clone(),
            foot_contact: report.foot_contact,
            torso_contact: report.torso_contact,
            command: self.command,
        };
        StepOutcome { obs, reward, per_term: self.per_term.clone(), terminated, truncated, record }
    }

    fn fill_features(&mut self, frame: &SensorFrame, a: &[f64; JOINTS], report: &ContactReport, local: f64) {
        let s = &self.state;
        let f = &mut self.features;
        let hv = s.heading_velocity();
        f.set("vx", hv[0]);
        f.set("vy", hv[1]);
        f.set("vz", hv[2]);
        f.set("wz", s.base_yaw_rate);
        f.set("vx_cmd", self.command.vx);
        f.set("vy_cmd", self.command.vy);
        f.set("wz_cmd", self.command.wz);
        f.set("base_height", s.base_pos[2] - local);
        f.set("roll", s.base_roll);
        f.set("pitch", s.base_pitch);
        f.set("roll_rate", s.roll_rate);
        f.set("pitch_rate", s.pitch_rate);
        f.set("joint_vel_norm", s.qd.iter().map(|v| v * v).sum::<f64>().sqrt());
        let prev = s.prev_action;
        f.set("action_rate", a.iter().zip(&prev).map(|(x, y)| (x - y) * (x - y)).sum());
        f.set("action_norm", a.iter().map(|x| x * x).sum());
        let fc = report.foot_contact.map(|c| if c { 1.0 } else { 0.0 });
        f.set("foot_contact_0", fc[0]);
        f.set("foot_contact_1", fc[1]);
        f.set("torso_contact", if report.torso_contact { 1.0 } else { 0.0 });
        f.set_vector("action", a);
        f.set_vector("prev_action", &prev);
        f.set_vector("foot_contact", &fc);
        if self.cfg.mode.is_perceptive() {
            f.set_vector("height_scan", &median_relative(&frame.height_scan.values));
            f.set_vector("lidar", &frame.lidar);
        }
    }
}

/// Applies [`ObsScaling`] in place to an assembled observation.
pub fn scale_observation(obs: &mut [f64], cfg: &EnvConfig) {
    let sc = &cfg.scaling;
    let nominal = cfg.walker.nominal_joints();
    let j = JOINTS;
    let scan = cfg.sensors.scan_len();
    let blind = !cfg.mode.is_perceptive();
    let mut i = 0;
    let mut block = |obs: &mut [f64], len: usize, f: &dyn Fn(usize, f64) -> f64| {
        for k in 0..len {
            obs[i + k] = f(k, obs[i + k]);
        }
        i += len;
    };
    block(obs, 3, &|_, x| x * sc.lin_vel);
    block(obs, 3, &|_, x| x * sc.ang_vel);
    block(obs, 3, &|_, x| x);
    block(obs, 3, &|_, x| x * sc.command);
    block(obs, j, &|k, x| (x - nominal[k]) * sc.joint_pos);
    block(obs, j, &|_, x| x * sc.joint_vel);
    block(obs, j, &|_, x| x);
    if !blind {
        let h = cfg.walker.nominal_height();
        block(obs, scan, &|_, x| (x + h) * sc.height_scan);
        block(obs, cfg.sensors.lidar_rays, &|_, x| x * sc.lidar);
    }
    for x in obs.iter_mut() {
        *x = x.clamp(-sc.clip, sc.clip);
    }
}
