//! Terrain statistics gathered by a fleet of standing robots.
//!
//! Every robot is dropped at a random pose, reads its sensors at a fixed
//! tick rate for a short period and the resulting height scans are reduced
//! to a handful of scalars that condition reward synthesis.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::sensors::{self, BasePose, Proprio, SensorConfig, SensorFrame};
use crate::sim::{WalkerConfig, JOINTS};
use crate::terrain::{TerrainKind, TerrainMap};
use crate::{Error, Result};

pub const DEFAULT_TICK_RATE: f64 = 10.0;
const SPAWN_ATTEMPTS: usize = 10_000;
/// Fixed-point scale for order-independent accumulation.
const FIXED_SCALE: f64 = (1u64 << 32) as f64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerrainStats {
    pub gap_ratio: f64,
    pub obstacle_density: f64,
    pub roughness: f64,
    pub mean_abs_slope: f64,
    pub max_drop: f64,
    pub sample_count: u64,
    pub terrain_kind: TerrainKind,
}

impl TerrainStats {
    /// All-zero statistics for a terrain of the given kind.
    pub fn flat(kind: TerrainKind) -> Self {
        TerrainStats {
            gap_ratio: 0.0,
            obstacle_density: 0.0,
            roughness: 0.0,
            mean_abs_slope: 0.0,
            max_drop: 0.0,
            sample_count: 0,
            terrain_kind: kind,
        }
    }

    /// Statistics with every terrain-derived value zeroed, as seen by an
    /// agent without exteroception.
    pub fn zeroed(&self) -> Self {
        TerrainStats {
            gap_ratio: 0.0,
            obstacle_density: 0.0,
            roughness: 0.0,
            mean_abs_slope: 0.0,
            max_drop: 0.0,
            ..self.clone()
        }
    }

    /// Name/value pairs of the scalar statistics, in summary order.
    pub fn values(&self) -> [(&'static str, f64); 5] {
        [
            ("gap_ratio", self.gap_ratio),
            ("obstacle_density", self.obstacle_density),
            ("roughness", self.roughness),
            ("mean_abs_slope", self.mean_abs_slope),
            ("max_drop", self.max_drop),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StatThresholds {
    /// Cells lower than the frame median by more than this are gap.
    pub gap_threshold: f64,
    /// Cells higher than the frame median by more than this are obstacle.
    pub obstacle_threshold: f64,
    /// Only cells within this band of the median enter the roughness.
    pub roughness_band: f64,
}

impl Default for StatThresholds {
    fn default() -> Self {
        StatThresholds { gap_threshold: -0.5, obstacle_threshold: 0.10, roughness_band: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FleetConfig {
    pub num_robots: usize,
    pub duration_s: f64,
    pub tick_rate: f64,
}

impl Default for FleetConfig {
    fn default() -> Self {
        FleetConfig { num_robots: 100, duration_s: 10.0, tick_rate: DEFAULT_TICK_RATE }
    }
}

impl FleetConfig {
    pub fn full_scale() -> Self {
        FleetConfig { num_robots: 1000, ..FleetConfig::default() }
    }

    pub fn ticks(&self) -> usize {
        (self.duration_s * self.tick_rate).round() as usize
    }
}

/// Frames of `num_robots` robots standing still for `duration_s` seconds,
/// robot-major. A standing robot's sensors read the same terrain on every
/// tick, so each robot's frame is computed once and repeated.
pub fn collect_fleet_data(
    map: &TerrainMap,
    fleet: &FleetConfig,
    sensors_cfg: &SensorConfig,
    walker: &WalkerConfig,
    seed: u64,
) -> Result<Vec<SensorFrame>> {
    if fleet.num_robots == 0 {
        return Err(Error::InvalidParams("num_robots must be at least 1".into()));
    }
    if !(fleet.duration_s > 0.0 && fleet.tick_rate > 0.0) {
        return Err(Error::InvalidParams("duration and tick rate must be positive".into()));
    }
    sensors_cfg.validate()?;
    let ticks = fleet.ticks().max(1);
    let height = walker.nominal_height();
    let frames: Vec<Result<SensorFrame>> = (0..fleet.num_robots)
        .into_par_iter()
        .map(|i| {
            let pose = spawn_pose(map, seed, i as u64, height)?;
            Ok(standing_frame(map, &pose, sensors_cfg, walker))
        })
        .collect();
    let mut out = Vec::with_capacity(fleet.num_robots * ticks);
    for f in frames {
        let f = f?;
        for _ in 0..ticks {
            out.push(f.clone());
        }
    }
    Ok(out)
}

fn spawn_pose(map: &TerrainMap, seed: u64, robot: u64, height: f64) -> Result<BasePose> {
    let mut rng = crate::seeds::rng(seed, &[0x0066_6c65_6574, robot]);
    let b = map.bounds();
    for _ in 0..SPAWN_ATTEMPTS {
        let x = b.x_min + b.width() * rng.random::<f64>();
        let y = b.y_min + b.height() * rng.random::<f64>();
        let yaw = std::f64::consts::TAU * rng.random::<f64>();
        if !map.is_gap_at(x, y) {
            return Ok(BasePose::new(x, y, map.height_at_clamped(x, y) + height, yaw));
        }
    }
    Err(Error::NoValidSpawn { attempts: SPAWN_ATTEMPTS })
}

fn standing_frame(map: &TerrainMap, pose: &BasePose, cfg: &SensorConfig, walker: &WalkerConfig) -> SensorFrame {
    SensorFrame {
        height_scan: sensors::height_scan(map, pose, cfg),
        lidar: sensors::lidar_scan(map, pose, cfg),
        proprio: Proprio {
            lin_vel: [0.0; 3],
            ang_vel: [0.0; 3],
            gravity: [0.0, 0.0, -1.0],
            command: [0.0; 3],
            joint_pos: walker.nominal_joints().to_vec(),
            joint_vel: vec![0.0; JOINTS],
            prev_action: vec![0.0; JOINTS],
        },
    }
}

pub(crate) fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Height scan with the frame median subtracted.
pub fn median_relative(values: &[f64]) -> Vec<f64> {
    let m = median(values);
    values.iter().map(|v| v - m).collect()
}

fn fixed(x: f64) -> i128 {
    (x * FIXED_SCALE).round() as i128
}

#[derive(Default)]
struct Accum {
    cells: u64,
    gaps: u64,
    obstacles: u64,
    band: u64,
    band_sum: i128,
    band_sq: i128,
    slope_sum: i128,
    slope_n: u64,
    min_rel: f64,
}

/// Reduces frames to terrain statistics. Integer and fixed-point
/// accumulators make the result independent of frame order.
pub fn compute_statistics(
    frames: &[SensorFrame],
    thresholds: &StatThresholds,
    kind: TerrainKind,
) -> Result<TerrainStats> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("sensor frames"));
    }
    let mut acc = Accum { min_rel: 0.0, ..Accum::default() };
    for f in frames {
        let grid = &f.height_scan;
        let rel = median_relative(&grid.values);
        for &d in &rel {
            acc.cells += 1;
            if d < thresholds.gap_threshold {
                acc.gaps += 1;
            } else if d > thresholds.obstacle_threshold {
                acc.obstacles += 1;
            }
            if d.abs() <= thresholds.roughness_band {
                acc.band += 1;
                acc.band_sum += fixed(d);
                acc.band_sq += fixed(d * d);
            }
            acc.min_rel = acc.min_rel.min(d);
        }
        let (rows, cols) = (grid.rows, grid.cols);
        let sp = grid.spacing.max(f64::MIN_POSITIVE);
        for r in 0..rows {
            for c in 0..cols {
                let v = grid.values[r * cols + c];
                if c + 1 < cols {
                    acc.slope_sum += fixed((grid.values[r * cols + c + 1] - v).abs() / sp);
                    acc.slope_n += 1;
                }
                if r + 1 < rows {
                    acc.slope_sum += fixed((grid.values[(r + 1) * cols + c] - v).abs() / sp);
                    acc.slope_n += 1;
                }
            }
        }
    }
    let frac = |n: u64| if acc.cells > 0 { n as f64 / acc.cells as f64 } else { 0.0 };
    let roughness = if acc.band > 0 {
        let n = acc.band as f64;
        let mean = acc.band_sum as f64 / FIXED_SCALE / n;
        let sq = acc.band_sq as f64 / FIXED_SCALE / n;
        (sq - mean * mean).max(0.0).sqrt()
    } else {
        0.0
    };
    let slope = if acc.slope_n > 0 {
        acc.slope_sum as f64 / FIXED_SCALE / acc.slope_n as f64
    } else {
        0.0
    };
    Ok(TerrainStats {
        gap_ratio: frac(acc.gaps),
        obstacle_density: frac(acc.obstacles),
        roughness,
        mean_abs_slope: slope,
        max_drop: -acc.min_rel,
        sample_count: frames.len() as u64,
        terrain_kind: kind,
    })
}

/// Fixed-order `key: value` block with three decimals.
pub fn stats_summary_text(stats: &TerrainStats) -> String {
    let mut out = format!("terrain_kind: {}\n", stats.terrain_kind);
    for (k, v) in stats.values() {
        out.push_str(&format!("{k}: {v:.3}\n"));
    }
    out.push_str(&format!("sample_count: {}\n", stats.sample_count));
    out
}

/// Contents of `stats.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsFile {
    #[serde(flatten)]
    pub stats: TerrainStats,
    pub thresholds: StatThresholds,
}

pub fn save_stats(path: impl AsRef<Path>, stats: &TerrainStats, thresholds: &StatThresholds) -> Result<()> {
    let file = StatsFile { stats: stats.clone(), thresholds: thresholds.clone() };
    std::fs::write(path, serde_json::to_vec_pretty(&file)?)?;
    Ok(())
}

pub fn load_stats(path: impl AsRef<Path>) -> Result<StatsFile> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Collects frames and reduces them in one call.
pub fn analyze(
    map: &TerrainMap,
    fleet: &FleetConfig,
    sensors_cfg: &SensorConfig,
    walker: &WalkerConfig,
    thresholds: &StatThresholds,
    seed: u64,
) -> Result<TerrainStats> {
    let frames = collect_fleet_data(map, fleet, sensors_cfg, walker, seed)?;
    compute_statistics(&frames, thresholds, map.kind())
}
