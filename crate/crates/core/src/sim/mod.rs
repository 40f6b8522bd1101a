//! A small torque-driven biped on a heightfield.
//!
//! The model is a torso with six coordinates (position, roll, pitch, yaw)
//! and two massless three-joint legs whose joints carry rotor inertia. All
//! coordinates share a constant diagonal mass matrix, so the dynamics are
//! `M q̈ = f` with `f` built from gravity, joint torques, passive joint
//! springs, an attitude stabilizer and penalty contacts mapped through the
//! foot Jacobians. Integration is semi-implicit Euler.
//!
//! Gap cells are treated as missing ground: feet and torso find no support
//! above them.

mod env;
mod episode;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::terrain::TerrainMap;
use crate::{Error, Result};

pub use env::{EnvConfig, ObsScaling, StepOutcome, WalkerEnv, FALL_DEPTH};
pub use episode::{run_episode, ConstantPolicy, Policy, StepRecord, Trajectory};

pub const LEGS: usize = 2;
pub const JOINTS_PER_LEG: usize = 3;
pub const JOINTS: usize = LEGS * JOINTS_PER_LEG;
const COORDS: usize = 6 + JOINTS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WalkerConfig {
    pub torso_mass: f64,
    /// Roll, pitch, yaw inertia (kg·m²).
    pub torso_inertia: [f64; 3],
    pub rotor_inertia: f64,
    /// Left hip position in the base frame; the right hip mirrors y.
    pub hip_offset: [f64; 3],
    pub thigh_length: f64,
    pub shank_length: f64,
    /// Per-leg (hip pitch, hip roll, knee) rest angles.
    pub nominal_pose: [f64; JOINTS_PER_LEG],
    pub joint_stiffness: [f64; JOINTS_PER_LEG],
    pub joint_damping: f64,
    pub joint_lower: [f64; JOINTS_PER_LEG],
    pub joint_upper: [f64; JOINTS_PER_LEG],
    pub torque_limit: f64,
    pub contact_stiffness: f64,
    pub contact_damping: f64,
    pub friction: f64,
    pub tangential_stiffness: f64,
    pub tangential_damping: f64,
    pub torso_radius: f64,
    pub attitude_kp: f64,
    pub attitude_kd: f64,
    pub yaw_damping: f64,
    pub gravity: f64,
    pub physics_dt: f64,
    pub substeps: usize,
}

impl Default for WalkerConfig {
    fn default() -> Self {
        WalkerConfig {
            torso_mass: 12.0,
            torso_inertia: [1.0, 1.0, 1.0],
            rotor_inertia: 0.4,
            hip_offset: [0.0, 0.1, -0.1],
            thigh_length: 0.3,
            shank_length: 0.3,
            nominal_pose: [0.35, 0.0, 0.7],
            joint_stiffness: [100.0, 100.0, 80.0],
            joint_damping: 5.0,
            joint_lower: [-1.2, -0.5, 0.0],
            joint_upper: [1.2, 0.5, 2.2],
            torque_limit: 60.0,
            contact_stiffness: 8000.0,
            contact_damping: 200.0,
            friction: 0.8,
            tangential_stiffness: 5000.0,
            tangential_damping: 100.0,
            torso_radius: 0.15,
            attitude_kp: 300.0,
            attitude_kd: 30.0,
            yaw_damping: 0.5,
            gravity: 9.81,
            physics_dt: 0.005,
            substeps: 4,
        }
    }
}

impl WalkerConfig {
    pub fn control_dt(&self) -> f64 {
        self.physics_dt * self.substeps as f64
    }

    pub fn nominal_joints(&self) -> [f64; JOINTS] {
        let mut q = [0.0; JOINTS];
        for leg in 0..LEGS {
            q[leg * 3..leg * 3 + 3].copy_from_slice(&self.nominal_pose);
        }
        q
    }

    /// Base height above flat ground with the legs at the nominal pose.
    pub fn nominal_height(&self) -> f64 {
        let b = self.foot_in_base(0, &self.nominal_joints());
        -b[2]
    }

    fn hip(&self, leg: usize) -> [f64; 3] {
        let s = if leg == 0 { 1.0 } else { -1.0 };
        [self.hip_offset[0], s * self.hip_offset[1], self.hip_offset[2]]
    }

    /// Foot position in the base frame and its derivatives with respect to
    /// the leg's (hip pitch, hip roll, knee).
    fn leg_kinematics(&self, leg: usize, q: &[f64; JOINTS]) -> ([f64; 3], [[f64; 3]; 3]) {
        let (a, r, k) = (q[leg * 3], q[leg * 3 + 1], q[leg * 3 + 2]);
        let (l1, l2) = (self.thigh_length, self.shank_length);
        let (sa, ca) = a.sin_cos();
        let (sak, cak) = (a - k).sin_cos();
        let (sr, cr) = r.sin_cos();
        let px = l1 * sa + l2 * sak;
        let pz = -(l1 * ca + l2 * cak);
        let (dxa, dza) = (l1 * ca + l2 * cak, l1 * sa + l2 * sak);
        let (dxk, dzk) = (-l2 * cak, -l2 * sak);
        let hip = self.hip(leg);
        let pos = [hip[0] + px, hip[1] - pz * sr, hip[2] + pz * cr];
        let d_a = [dxa, -dza * sr, dza * cr];
        let d_r = [0.0, -pz * cr, -pz * sr];
        let d_k = [dxk, -dzk * sr, dzk * cr];
        (pos, [d_a, d_r, d_k])
    }

    pub fn foot_in_base(&self, leg: usize, q: &[f64; JOINTS]) -> [f64; 3] {
        self.leg_kinematics(leg, q).0
    }

    fn clamp_joint(&self, j: usize, q: f64) -> f64 {
        q.clamp(self.joint_lower[j % 3], self.joint_upper[j % 3])
    }
}

/// Commanded planar velocity in the heading frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Command {
    pub vx: f64,
    pub vy: f64,
    pub wz: f64,
}

impl Command {
    pub fn new(vx: f64, vy: f64, wz: f64) -> Self {
        Command { vx, vy, wz }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.vx, self.vy, self.wz]
    }
}

/// Uniform ranges commands are drawn from at every episode start.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CommandRanges {
    pub vx: (f64, f64),
    pub vy: (f64, f64),
    pub wz: (f64, f64),
}

impl Default for CommandRanges {
    fn default() -> Self {
        CommandRanges { vx: (0.0, 1.0), vy: (-0.3, 0.3), wz: (-0.5, 0.5) }
    }
}

impl CommandRanges {
    pub fn sample(&self, rng: &mut impl Rng) -> Command {
        let draw = |rng: &mut dyn rand::RngCore, (lo, hi): (f64, f64)| {
            if hi > lo {
                lo + (hi - lo) * rng.random::<f64>()
            } else {
                lo
            }
        };
        Command { vx: draw(rng, self.vx), vy: draw(rng, self.vy), wz: draw(rng, self.wz) }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi), limit) in [("vx", self.vx, 1.0), ("vy", self.vy, 1.0), ("wz", self.wz, 1.0)] {
            if !(lo <= hi && lo >= -limit && hi <= limit) {
                return Err(Error::InvalidParams(format!(
                    "command range {name} = ({lo}, {hi}) must be ordered and within ±{limit}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WalkerState {
    pub base_pos: [f64; 3],
    pub base_yaw: f64,
    /// World-frame base velocity.
    pub base_lin_vel: [f64; 3],
    pub base_yaw_rate: f64,
    pub base_roll: f64,
    pub base_pitch: f64,
    pub roll_rate: f64,
    pub pitch_rate: f64,
    pub q: [f64; JOINTS],
    pub qd: [f64; JOINTS],
    pub foot_pos: [[f64; 3]; LEGS],
    /// Normalized action applied on the previous control step.
    pub prev_action: [f64; JOINTS],
    /// Sticking points of the friction springs, one per foot.
    pub anchors: [Option<[f64; 2]>; LEGS],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContactReport {
    pub foot_contact: [bool; LEGS],
    pub torso_contact: bool,
    /// Left foot, right foot, torso.
    pub contact_forces: [[f64; 3]; 3],
    /// Largest torso penetration seen during the step.
    pub torso_penetration: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResetOptions {
    /// Draw the base position uniformly over the spawn zone; otherwise use
    /// its centre.
    pub random_position: bool,
    /// Bound on the seeded perturbation of joints, roll, pitch and yaw (rad)
    /// and of the position (m). Zero disables jitter.
    pub jitter: f64,
}

impl Default for ResetOptions {
    fn default() -> Self {
        ResetOptions { random_position: true, jitter: 0.02 }
    }
}

struct Rotation {
    r: [[f64; 3]; 3],
    d: [[[f64; 3]; 3]; 3],
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut o = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            o[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    o
}

fn matvec(a: &[[f64; 3]; 3], v: &[f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

fn mat_t_vec(a: &[[f64; 3]; 3], v: &[f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[1][0] * v[1] + a[2][0] * v[2],
        a[0][1] * v[0] + a[1][1] * v[1] + a[2][1] * v[2],
        a[0][2] * v[0] + a[1][2] * v[1] + a[2][2] * v[2],
    ]
}

/// `Rz(yaw)·Ry(pitch)·Rx(roll)` and its partials in (roll, pitch, yaw).
fn rotation(roll: f64, pitch: f64, yaw: f64) -> Rotation {
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]];
    let ry = [[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]];
    let rz = [[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]];
    let drx = [[0.0, 0.0, 0.0], [0.0, -sr, -cr], [0.0, cr, -sr]];
    let dry = [[-sp, 0.0, cp], [0.0, 0.0, 0.0], [-cp, 0.0, -sp]];
    let drz = [[-sy, -cy, 0.0], [cy, -sy, 0.0], [0.0, 0.0, 0.0]];
    let zy = matmul(&rz, &ry);
    Rotation {
        r: matmul(&zy, &rx),
        d: [matmul(&zy, &drx), matmul(&matmul(&rz, &dry), &rx), matmul(&matmul(&drz, &ry), &rx)],
    }
}

/// Ground height under a point, or `None` over missing ground.
fn support_height(map: &TerrainMap, x: f64, y: f64) -> Option<f64> {
    if map.contains(x, y) && map.is_gap_at(x, y) {
        None
    } else {
        Some(map.height_at_clamped(x, y))
    }
}

impl WalkerState {
    fn coords(&self) -> [f64; COORDS] {
        let mut c = [0.0; COORDS];
        c[..3].copy_from_slice(&self.base_pos);
        c[3] = self.base_roll;
        c[4] = self.base_pitch;
        c[5] = self.base_yaw;
        c[6..].copy_from_slice(&self.q);
        c
    }

    fn velocities(&self) -> [f64; COORDS] {
        let mut v = [0.0; COORDS];
        v[..3].copy_from_slice(&self.base_lin_vel);
        v[3] = self.roll_rate;
        v[4] = self.pitch_rate;
        v[5] = self.base_yaw_rate;
        v[6..].copy_from_slice(&self.qd);
        v
    }

    fn set(&mut self, c: &[f64; COORDS], v: &[f64; COORDS]) {
        self.base_pos.copy_from_slice(&c[..3]);
        self.base_roll = c[3];
        self.base_pitch = c[4];
        self.base_yaw = c[5];
        self.q.copy_from_slice(&c[6..]);
        self.base_lin_vel.copy_from_slice(&v[..3]);
        self.roll_rate = v[3];
        self.pitch_rate = v[4];
        self.base_yaw_rate = v[5];
        self.qd.copy_from_slice(&v[6..]);
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        rotation(self.base_roll, self.base_pitch, self.base_yaw).r
    }

    /// Velocity expressed in the yaw-only heading frame.
    pub fn heading_velocity(&self) -> [f64; 3] {
        let (s, c) = self.base_yaw.sin_cos();
        let v = self.base_lin_vel;
        [c * v[0] + s * v[1], -s * v[0] + c * v[1], v[2]]
    }

    /// Velocity expressed in the body frame.
    pub fn body_velocity(&self) -> [f64; 3] {
        mat_t_vec(&self.rotation(), &self.base_lin_vel)
    }

    /// Gravity direction in the body frame.
    pub fn projected_gravity(&self) -> [f64; 3] {
        mat_t_vec(&self.rotation(), &[0.0, 0.0, -1.0])
    }

    pub fn is_finite(&self) -> bool {
        self.coords().iter().chain(self.velocities().iter()).all(|x| x.is_finite())
    }

    fn update_feet(&mut self, cfg: &WalkerConfig) {
        let r = self.rotation();
        for leg in 0..LEGS {
            let b = cfg.foot_in_base(leg, &self.q);
            let w = matvec(&r, &b);
            self.foot_pos[leg] = [self.base_pos[0] + w[0], self.base_pos[1] + w[1], self.base_pos[2] + w[2]];
        }
    }
}

/// Places the walker in the spawn zone with both feet on the ground.
pub fn reset(map: &TerrainMap, cfg: &WalkerConfig, opts: &ResetOptions, seed: u64) -> WalkerState {
    let mut rng = crate::seeds::rng(seed, &[0x0072_6573_6574]);
    let zone = map.spawn_zone();
    let (x, y) = if opts.random_position {
        (
            zone.x_min + zone.width() * rng.random::<f64>(),
            zone.y_min + zone.height() * rng.random::<f64>(),
        )
    } else {
        zone.center()
    };
    let mut jit = |scale: f64| {
        if opts.jitter > 0.0 {
            scale * opts.jitter * (2.0 * rng.random::<f64>() - 1.0)
        } else {
            0.0
        }
    };
    let mut q = cfg.nominal_joints();
    for (j, qj) in q.iter_mut().enumerate() {
        *qj = cfg.clamp_joint(j, *qj + jit(1.0));
    }
    let (roll, pitch, yaw) = (jit(1.0), jit(1.0), jit(1.0));
    let mut state = WalkerState {
        base_pos: [x, y, 0.0],
        base_yaw: yaw,
        base_lin_vel: [0.0; 3],
        base_yaw_rate: 0.0,
        base_roll: roll,
        base_pitch: pitch,
        roll_rate: 0.0,
        pitch_rate: 0.0,
        q,
        qd: [0.0; JOINTS],
        foot_pos: [[0.0; 3]; LEGS],
        prev_action: [0.0; JOINTS],
        anchors: [None; LEGS],
    };
    state.update_feet(cfg);
    // Raise the base until the lowest-clearance foot rests on the ground.
    let lift = state
        .foot_pos
        .iter()
        .map(|f| map.height_at_clamped(f[0], f[1]) - f[2])
        .fold(f64::NEG_INFINITY, f64::max);
    state.base_pos[2] = lift;
    state.update_feet(cfg);
    state
}

/// Kinetic plus potential energy; the attitude stabilizer counts as a
/// spring.
pub fn mechanical_energy(state: &WalkerState, cfg: &WalkerConfig) -> f64 {
    let m = mass_diagonal(cfg);
    let v = state.velocities();
    let kinetic: f64 = m.iter().zip(&v).map(|(m, v)| 0.5 * m * v * v).sum();
    let nominal = cfg.nominal_joints();
    let springs: f64 = (0..JOINTS)
        .map(|j| 0.5 * cfg.joint_stiffness[j % 3] * (state.q[j] - nominal[j]).powi(2))
        .sum();
    let attitude = 0.5 * cfg.attitude_kp * (state.base_roll.powi(2) + state.base_pitch.powi(2));
    kinetic + springs + attitude + cfg.torso_mass * cfg.gravity * state.base_pos[2]
}

fn mass_diagonal(cfg: &WalkerConfig) -> [f64; COORDS] {
    let mut m = [cfg.rotor_inertia; COORDS];
    m[..3].fill(cfg.torso_mass);
    m[3..6].copy_from_slice(&cfg.torso_inertia);
    m
}

/// One physics step of `cfg.physics_dt` with joint torques `torque` (N·m).
pub fn physics_step(
    state: &mut WalkerState,
    torque: &[f64; JOINTS],
    map: &TerrainMap,
    cfg: &WalkerConfig,
    report: &mut ContactReport,
) -> Result<()> {
    let dt = cfg.physics_dt;
    let c = state.coords();
    let v = state.velocities();
    let rot = rotation(state.base_roll, state.base_pitch, state.base_yaw);
    let mut f = [0.0; COORDS];

    f[2] -= cfg.torso_mass * cfg.gravity;
    f[3] -= cfg.attitude_kp * state.base_roll + cfg.attitude_kd * state.roll_rate;
    f[4] -= cfg.attitude_kp * state.base_pitch + cfg.attitude_kd * state.pitch_rate;
    f[5] -= cfg.yaw_damping * state.base_yaw_rate;
    let nominal = cfg.nominal_joints();
    for j in 0..JOINTS {
        let tau = torque[j];
        assert!(tau.abs() <= cfg.torque_limit, "joint torque {tau} exceeds limit");
        f[6 + j] += tau - cfg.joint_stiffness[j % 3] * (state.q[j] - nominal[j]) - cfg.joint_damping * state.qd[j];
    }

    report.foot_contact = [false; LEGS];
    report.contact_forces = [[0.0; 3]; 3];
    for leg in 0..LEGS {
        let (b, db) = cfg.leg_kinematics(leg, &state.q);
        // Columns of the foot Jacobian: x, y, z, roll, pitch, yaw, then the
        // leg's three joints.
        let mut cols = [[0.0; 3]; 6 + JOINTS_PER_LEG];
        cols[0] = [1.0, 0.0, 0.0];
        cols[1] = [0.0, 1.0, 0.0];
        cols[2] = [0.0, 0.0, 1.0];
        for a in 0..3 {
            cols[3 + a] = matvec(&rot.d[a], &b);
            cols[6 + a] = matvec(&rot.r, &db[a]);
        }
        let w = matvec(&rot.r, &b);
        let p = [c[0] + w[0], c[1] + w[1], c[2] + w[2]];
        let mut vel = [0.0; 3];
        for (k, col) in cols.iter().enumerate() {
            let vk = if k < 6 { v[k] } else { v[6 + leg * 3 + k - 6] };
            for i in 0..3 {
                vel[i] += col[i] * vk;
            }
        }
        let Some(h) = support_height(map, p[0], p[1]) else {
            state.anchors[leg] = None;
            continue;
        };
        let pen = h - p[2];
        if pen <= 0.0 {
            state.anchors[leg] = None;
            continue;
        }
        let fn_ = (cfg.contact_stiffness * pen - cfg.contact_damping * vel[2]).max(0.0);
        let anchor = state.anchors[leg].unwrap_or([p[0], p[1]]);
        let mut ft = [
            -cfg.tangential_stiffness * (p[0] - anchor[0]) - cfg.tangential_damping * vel[0],
            -cfg.tangential_stiffness * (p[1] - anchor[1]) - cfg.tangential_damping * vel[1],
        ];
        let cap = cfg.friction * fn_;
        let mag = ft[0].hypot(ft[1]);
        let anchor = if mag > cap {
            let s = if mag > 0.0 { cap / mag } else { 0.0 };
            ft = [ft[0] * s, ft[1] * s];
            [p[0] + ft[0] / cfg.tangential_stiffness, p[1] + ft[1] / cfg.tangential_stiffness]
        } else {
            anchor
        };
        state.anchors[leg] = Some(anchor);
        let force = [ft[0], ft[1], fn_];
        for (k, col) in cols.iter().enumerate() {
            let idx = if k < 6 { k } else { 6 + leg * 3 + k - 6 };
            f[idx] += col[0] * force[0] + col[1] * force[1] + col[2] * force[2];
        }
        report.foot_contact[leg] = fn_ > 0.0;
        report.contact_forces[leg] = force;
    }

    if let Some(h) = support_height(map, c[0], c[1]) {
        let pen = h + cfg.torso_radius - c[2];
        if pen > 0.0 {
            report.torso_contact = true;
            report.torso_penetration = report.torso_penetration.max(pen);
            let fn_ = (cfg.contact_stiffness * pen - cfg.contact_damping * v[2]).max(0.0);
            let cap = cfg.friction * fn_;
            let mut ft = [-cfg.tangential_damping * v[0], -cfg.tangential_damping * v[1]];
            let mag = ft[0].hypot(ft[1]);
            if mag > cap {
                ft = [ft[0] * cap / mag, ft[1] * cap / mag];
            }
            f[0] += ft[0];
            f[1] += ft[1];
            f[2] += fn_;
            report.contact_forces[2] = [ft[0], ft[1], fn_];
        }
    }

    let m = mass_diagonal(cfg);
    let mut nv = [0.0; COORDS];
    let mut nc = [0.0; COORDS];
    for i in 0..COORDS {
        nv[i] = v[i] + f[i] / m[i] * dt;
        nc[i] = c[i] + nv[i] * dt;
    }
    // Constant gravity integrated exactly, so ballistic flight keeps its
    // energy.
    nc[2] += 0.5 * cfg.gravity * dt * dt;
    for j in 0..JOINTS {
        let (lo, hi) = (cfg.joint_lower[j % 3], cfg.joint_upper[j % 3]);
        if nc[6 + j] < lo {
            nc[6 + j] = lo;
            nv[6 + j] = nv[6 + j].max(0.0);
        } else if nc[6 + j] > hi {
            nc[6 + j] = hi;
            nv[6 + j] = nv[6 + j].min(0.0);
        }
    }
    if nc.iter().chain(nv.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NanDetected);
    }
    state.set(&nc, &nv);
    state.update_feet(cfg);
    Ok(())
}

/// One control step: torques are clamped to the limit and held over
/// `cfg.substeps` physics steps.
pub fn step(
    state: &WalkerState,
    torque: &[f64],
    map: &TerrainMap,
    cfg: &WalkerConfig,
) -> Result<(WalkerState, ContactReport)> {
    let mut tau = [0.0; JOINTS];
    for (t, a) in tau.iter_mut().zip(torque) {
        *t = if a.is_finite() { a.clamp(-cfg.torque_limit, cfg.torque_limit) } else { 0.0 };
    }
    let mut next = state.clone();
    let mut report = ContactReport::default();
    for _ in 0..cfg.substeps {
        physics_step(&mut next, &tau, map, cfg, &mut report)?;
    }
    Ok((next, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::terrain::{Rect, TerrainKind, TerrainParams};

    pub(crate) fn flat(extent: f64) -> TerrainMap {
        let params = TerrainParams {
            extent: (extent, extent),
            spawn_zone: Rect::new(-1.0, -1.0, 1.0, 1.0),
            bump_amp_range: (0.0, 0.0),
            ..TerrainParams::default()
        };
        crate::terrain::generate_terrain(TerrainKind::Simple, &params, 0).unwrap()
    }

    fn fd_check(cfg: &WalkerConfig, q: &[f64; JOINTS]) {
        for leg in 0..LEGS {
            let (_, d) = cfg.leg_kinematics(leg, q);
            for k in 0..3 {
                let mut qp = *q;
                let mut qm = *q;
                qp[leg * 3 + k] += 1e-6;
                qm[leg * 3 + k] -= 1e-6;
                let (a, b) = (cfg.foot_in_base(leg, &qp), cfg.foot_in_base(leg, &qm));
                for i in 0..3 {
                    let fd = (a[i] - b[i]) / 2e-6;
                    assert!((fd - d[k][i]).abs() < 1e-7, "leg {leg} joint {k} axis {i}");
                }
            }
        }
    }

    #[test]
    fn leg_jacobian_matches_finite_differences() {
        let cfg = WalkerConfig::default();
        fd_check(&cfg, &cfg.nominal_joints());
        fd_check(&cfg, &[0.3, -0.2, 1.1, -0.5, 0.4, 0.2]);
    }

    #[test]
    fn rotation_partials_match_finite_differences() {
        let (r, p, y) = (0.2, -0.3, 1.1);
        let rot = rotation(r, p, y);
        for a in 0..3 {
            let mut plus = [r, p, y];
            let mut minus = [r, p, y];
            plus[a] += 1e-6;
            minus[a] -= 1e-6;
            let rp = rotation(plus[0], plus[1], plus[2]).r;
            let rm = rotation(minus[0], minus[1], minus[2]).r;
            for i in 0..3 {
                for j in 0..3 {
                    assert!(((rp[i][j] - rm[i][j]) / 2e-6 - rot.d[a][i][j]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn nominal_foot_is_under_hip() {
        let cfg = WalkerConfig::default();
        let b = cfg.foot_in_base(0, &cfg.nominal_joints());
        assert!(b[0].abs() < 1e-12);
        assert!((b[1] - 0.1).abs() < 1e-12);
        assert!((cfg.nominal_height() - (0.1 + 0.6 * 0.35f64.cos())).abs() < 1e-12);
    }

    #[test]
    fn reset_on_flat_ground_without_jitter() {
        let map = flat(6.0);
        let cfg = WalkerConfig::default();
        let opts = ResetOptions { random_position: false, jitter: 0.0 };
        let s = reset(&map, &cfg, &opts, 3);
        assert_eq!(s.base_pos[2], cfg.nominal_height());
        for f in &s.foot_pos {
            assert!(f[2].abs() < 1e-12);
        }
    }

    #[test]
    fn torques_are_clamped() {
        let map = flat(6.0);
        let cfg = WalkerConfig::default();
        let s = reset(&map, &cfg, &ResetOptions::default(), 1);
        let (next, _) = step(&s, &[1e9, -1e9, f64::NAN, 0.0, 0.0, 0.0], &map, &cfg).unwrap();
        assert!(next.is_finite());
    }
}
