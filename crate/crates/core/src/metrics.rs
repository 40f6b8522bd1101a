//! Evaluation metrics computed from recorded trajectories.

use std::collections::{HashSet, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{Command, Trajectory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    /// Exploration grid cell size (m).
    pub cell_size: f64,
    /// Trailing window for the recent-displacement term (s).
    pub displacement_window: f64,
    /// Planar speed under which a step counts as stationary (m/s).
    pub stationary_speed: f64,
    pub quality_action_weight: f64,
    pub quality_height_weight: f64,
    pub quality_attitude_weight: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            cell_size: 0.5,
            displacement_window: 2.0,
            stationary_speed: 0.05,
            quality_action_weight: 0.1,
            quality_height_weight: 10.0,
            quality_attitude_weight: 2.0,
        }
    }
}

/// Euclidean distance between achieved `(vx, vy, wz)` and the command.
pub fn velocity_tracking_error(v: [f64; 3], cmd: &Command) -> f64 {
    let dx = v[0] - cmd.vx;
    let dy = v[1] - cmd.vy;
    let dw = v[2] - cmd.wz;
    (dx * dx + dy * dy + dw * dw).sqrt()
}

/// `0.5·N_cells + 2·R_max + min(10·Δd, 5)`.
pub fn exploration_formula(n_cells: usize, r_max: f64, recent_displacement: f64) -> f64 {
    0.5 * n_cells as f64 + 2.0 * r_max + (10.0 * recent_displacement).min(5.0)
}

/// Coverage bookkeeping for one episode. Positions are measured from the
/// first update.
#[derive(Clone, Debug)]
pub struct ExplorationTracker {
    cell_size: f64,
    window_len: usize,
    origin: Option<[f64; 2]>,
    visited: HashSet<(i64, i64)>,
    r_max: f64,
    window: VecDeque<[f64; 2]>,
}

impl ExplorationTracker {
    /// `window_steps` is the Δd horizon expressed in updates.
    pub fn new(cell_size: f64, window_steps: usize) -> Self {
        ExplorationTracker {
            cell_size,
            window_len: window_steps.max(1),
            origin: None,
            visited: HashSet::new(),
            r_max: 0.0,
            window: VecDeque::with_capacity(window_steps + 2),
        }
    }

    pub fn update(&mut self, x: f64, y: f64) {
        let o = *self.origin.get_or_insert([x, y]);
        let (dx, dy) = (x - o[0], y - o[1]);
        self.visited.insert((
            (dx / self.cell_size).floor() as i64,
            (dy / self.cell_size).floor() as i64,
        ));
        self.r_max = self.r_max.max(dx.hypot(dy));
        self.window.push_back([x, y]);
        if self.window.len() > self.window_len + 1 {
            self.window.pop_front();
        }
    }

    pub fn n_cells(&self) -> usize {
        self.visited.len()
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    /// Displacement between the oldest and newest position in the window.
    pub fn recent_displacement(&self) -> f64 {
        match (self.window.front(), self.window.back()) {
            (Some(a), Some(b)) => (b[0] - a[0]).hypot(b[1] - a[1]),
            _ => 0.0,
        }
    }
}

pub fn exploration_score(tracker: &ExplorationTracker) -> f64 {
    exploration_formula(tracker.n_cells(), tracker.r_max(), tracker.recent_displacement())
}

/// Torso-contact steps per 1000 control steps.
pub fn torso_contact_rate(traj: &Trajectory) -> Result<f64> {
    if traj.steps.is_empty() {
        return Err(Error::EmptyInput("trajectory"));
    }
    let hits = traj.steps.iter().filter(|s| s.torso_contact).count();
    Ok(1000.0 * hits as f64 / traj.steps.len() as f64)
}

/// Smoothness/steadiness proxy in `[0, 1]`:
/// `exp(−(α·mean‖Δa‖² + β·var(z) + δ·mean(roll² + pitch²)))`.
pub fn locomotion_quality(traj: &Trajectory, cfg: &MetricsConfig) -> f64 {
    let n = traj.steps.len();
    if n < 2 {
        return 1.0;
    }
    let action_rate = traj
        .steps
        .windows(2)
        .map(|w| {
            w[1].action
                .iter()
                .zip(&w[0].action)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum::<f64>()
        / (n - 1) as f64;
    let mean_z = traj.steps.iter().map(|s| s.base_pos[2]).sum::<f64>() / n as f64;
    let var_z = traj
        .steps
        .iter()
        .map(|s| (s.base_pos[2] - mean_z).powi(2))
        .sum::<f64>()
        / n as f64;
    let attitude = traj
        .steps
        .iter()
        .map(|s| s.roll * s.roll + s.pitch * s.pitch)
        .sum::<f64>()
        / n as f64;
    let penalty = cfg.quality_action_weight * action_rate
        + cfg.quality_height_weight * var_z
        + cfg.quality_attitude_weight * attitude;
    (-penalty).exp().clamp(0.0, 1.0)
}

pub fn stationary_fraction(traj: &Trajectory, speed_threshold: f64) -> f64 {
    if traj.steps.is_empty() {
        return 0.0;
    }
    let still = traj
        .steps
        .iter()
        .filter(|s| s.lin_vel[0].hypot(s.lin_vel[1]) < speed_threshold)
        .count();
    still as f64 / traj.steps.len() as f64
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub velocity_tracking_error: f64,
    pub exploration_score: f64,
    pub torso_contact_rate: f64,
    pub locomotion_quality: f64,
    pub stationary_fraction: f64,
    pub episode_length: f64,
}

pub const METRIC_COLUMNS: [&str; 6] = [
    "velocity_tracking_error",
    "exploration_score",
    "torso_contact_rate",
    "locomotion_quality",
    "stationary_fraction",
    "episode_length",
];

impl EpisodeMetrics {
    pub fn from_trajectory(traj: &Trajectory, cfg: &MetricsConfig) -> Result<Self> {
        if traj.steps.is_empty() {
            return Err(Error::EmptyInput("trajectory"));
        }
        let n = traj.steps.len();
        let vte = traj
            .steps
            .iter()
            .map(|s| velocity_tracking_error([s.lin_vel[0], s.lin_vel[1], s.yaw_rate], &s.command))
            .sum::<f64>()
            / n as f64;
        let window = (cfg.displacement_window / traj.control_dt).round() as usize;
        let mut tracker = ExplorationTracker::new(cfg.cell_size, window);
        for s in &traj.steps {
            tracker.update(s.base_pos[0], s.base_pos[1]);
        }
        Ok(EpisodeMetrics {
            velocity_tracking_error: vte,
            exploration_score: exploration_score(&tracker),
            torso_contact_rate: torso_contact_rate(traj)?,
            locomotion_quality: locomotion_quality(traj, cfg),
            stationary_fraction: stationary_fraction(traj, cfg.stationary_speed),
            episode_length: n as f64,
        })
    }

    pub fn values(&self) -> [f64; 6] {
        [
            self.velocity_tracking_error,
            self.exploration_score,
            self.torso_contact_rate,
            self.locomotion_quality,
            self.stationary_fraction,
            self.episode_length,
        ]
    }

    fn from_values(v: [f64; 6]) -> Self {
        EpisodeMetrics {
            velocity_tracking_error: v[0],
            exploration_score: v[1],
            torso_contact_rate: v[2],
            locomotion_quality: v[3],
            stationary_fraction: v[4],
            episode_length: v[5],
        }
    }

    /// Field-wise mean, summed in list order.
    pub fn mean(rows: &[EpisodeMetrics]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("metrics rows"));
        }
        let mut acc = [0.0; 6];
        for r in rows {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        Ok(Self::from_values(acc.map(|a| a / rows.len() as f64)))
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

/// One row per episode followed by the aggregate (mean) row.
pub fn metrics_csv(rows: &[EpisodeMetrics], aggregate: &EpisodeMetrics) -> String {
    let mut out = METRIC_COLUMNS.join(",");
    out.push('\n');
    for r in rows.iter().chain(std::iter::once(aggregate)) {
        let line = r.values().map(|v| v.to_string()).join(",");
        let _ = writeln!(out, "{line}");
    }
    out
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[EpisodeMetrics], aggregate: &EpisodeMetrics) -> Result<()> {
    std::fs::write(path, metrics_csv(rows, aggregate))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::StepRecord;

    fn record(pos: [f64; 3], vel: [f64; 3], action: Vec<f64>) -> StepRecord {
        StepRecord {
            base_pos: pos,
            lin_vel: vel,
            yaw_rate: 0.0,
            roll: 0.0,
            pitch: 0.0,
            action,
            reward: 0.0,
            per_term: vec![],
            foot_contact: [true, true],
            torso_contact: false,
            command: Command::default(),
        }
    }

    fn traj(steps: Vec<StepRecord>) -> Trajectory {
        Trajectory { steps, term_names: vec![], terminated: false, control_dt: 0.02 }
    }

    #[test]
    fn tracking_error_cases() {
        let c = Command { vx: 0.4, vy: -0.1, wz: 0.2 };
        assert_eq!(velocity_tracking_error([0.4, -0.1, 0.2], &c), 0.0);
        assert_eq!(velocity_tracking_error([1.0, 0.0, 0.0], &Command::default()), 1.0);
        assert!((velocity_tracking_error([0.3, 0.4, 0.0], &Command::default()) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn exploration_formula_cases() {
        assert_eq!(exploration_formula(1, 0.0, 0.0), 0.5);
        assert_eq!(exploration_formula(10, 2.0, 1.0), 14.0);
        for d in [0.0, 0.3, 0.5, 2.0, 1e9] {
            assert!(exploration_formula(0, 0.0, d) <= 5.0);
        }
    }

    #[test]
    fn revisits_do_not_inflate_cell_count() {
        let mut t = ExplorationTracker::new(0.5, 10);
        for _ in 0..3 {
            for &(x, y) in &[(0.0, 0.0), (0.6, 0.0), (0.6, 0.7), (0.1, 0.2)] {
                t.update(x, y);
            }
        }
        assert_eq!(t.n_cells(), 3);
        let once = {
            let mut u = ExplorationTracker::new(0.5, 10);
            for &(x, y) in &[(0.0, 0.0), (0.6, 0.0), (0.6, 0.7)] {
                u.update(x, y);
            }
            u.n_cells()
        };
        assert_eq!(once, t.n_cells());
        assert!(t.n_cells() >= 1);
    }

    #[test]
    fn torso_rate_definition() {
        let mut steps: Vec<_> = (0..1000).map(|_| record([0.0; 3], [0.0; 3], vec![0.0])).collect();
        assert_eq!(torso_contact_rate(&traj(steps.clone())).unwrap(), 0.0);
        for i in [10, 500, 999] {
            steps[i].torso_contact = true;
        }
        assert_eq!(torso_contact_rate(&traj(steps)).unwrap(), 3.0);
        assert!(torso_contact_rate(&traj(vec![])).is_err());
    }

    #[test]
    fn quality_is_one_for_a_still_upright_constant_action_run() {
        let steps = (0..50).map(|_| record([0.0, 0.0, 0.6], [0.0; 3], vec![0.2, -0.1])).collect();
        assert_eq!(locomotion_quality(&traj(steps), &MetricsConfig::default()), 1.0);
    }

    #[test]
    fn quality_decreases_with_action_noise() {
        let cfg = MetricsConfig::default();
        let mut last = 1.0 + 1e-12;
        for amp in [0.0, 0.1, 0.3, 0.6, 1.0] {
            let steps = (0..60)
                .map(|i| {
                    let a = if i % 2 == 0 { amp } else { -amp };
                    record([0.0, 0.0, 0.6], [0.0; 3], vec![a, -a, 0.5 * a])
                })
                .collect();
            let q = locomotion_quality(&traj(steps), &cfg);
            assert!((0.0..=1.0).contains(&q));
            assert!(q < last, "amp {amp}: {q} !< {last}");
            last = q;
        }
    }

    #[test]
    fn stationary_fraction_cases() {
        let still: Vec<_> = (0..10).map(|_| record([0.0; 3], [0.0; 3], vec![])).collect();
        assert_eq!(stationary_fraction(&traj(still.clone()), 0.05), 1.0);
        let moving: Vec<_> = (0..10).map(|_| record([0.0; 3], [1.0, 0.0, 0.0], vec![])).collect();
        assert_eq!(stationary_fraction(&traj(moving.clone()), 0.05), 0.0);
        let half = [still, moving].concat();
        assert_eq!(stationary_fraction(&traj(half), 0.05), 0.5);
    }

    #[test]
    fn csv_has_field_named_columns_and_aggregate_row() {
        let m = EpisodeMetrics { episode_length: 3.0, ..Default::default() };
        let csv = metrics_csv(&[m.clone(), m.clone()], &m);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], METRIC_COLUMNS.join(","));
        assert_eq!(lines.len(), 4);
    }
}
