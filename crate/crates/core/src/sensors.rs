//! Exteroception: a yaw-aligned height-scan lattice ahead of the base and a
//! single downward-pitched LiDAR sweep, plus observation assembly.

use serde::{Deserialize, Serialize};

use crate::terrain::TerrainMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorConfig {
    pub scan_rows: usize,
    pub scan_cols: usize,
    pub scan_spacing: f64,
    /// Distance of the lattice centre ahead of the base.
    pub scan_forward_offset: f64,
    pub lidar_rays: usize,
    /// Downward tilt of every ray (radians).
    pub lidar_pitch: f64,
    pub lidar_max_range: f64,
    pub sensor_height: f64,
    pub march_step: f64,
    pub march_tolerance: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig::desk()
    }
}

impl SensorConfig {
    /// Desk-scale defaults: 11×9 scan, 36 rays.
    pub fn desk() -> Self {
        SensorConfig {
            scan_rows: 11,
            scan_cols: 9,
            scan_spacing: 0.1,
            scan_forward_offset: 0.3,
            lidar_rays: 36,
            lidar_pitch: 30f64.to_radians(),
            lidar_max_range: 5.0,
            sensor_height: 0.1,
            march_step: 0.05,
            march_tolerance: 1e-3,
        }
    }

    /// Full-size sensing: 27×21 scan, 144 rays.
    pub fn full_scale() -> Self {
        SensorConfig {
            scan_rows: 27,
            scan_cols: 21,
            ..SensorConfig::desk()
        }
        .with_rays(144)
    }

    fn with_rays(mut self, rays: usize) -> Self {
        self.lidar_rays = rays;
        self
    }

    pub fn scan_len(&self) -> usize {
        self.scan_rows * self.scan_cols
    }

    pub fn exteroceptive_len(&self) -> usize {
        self.scan_len() + self.lidar_rays
    }

    pub fn validate(&self) -> crate::Result<()> {
        let ok = self.scan_rows >= 1
            && self.scan_cols >= 1
            && self.lidar_rays >= 1
            && self.scan_spacing > 0.0
            && self.lidar_max_range > 0.0
            && self.march_step > 0.0
            && self.march_tolerance > 0.0;
        if ok {
            Ok(())
        } else {
            Err(crate::Error::Config("invalid sensor configuration".into()))
        }
    }
}

/// Planar pose plus height: what the sensors need to know about the base.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasePose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
}

impl BasePose {
    pub fn new(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        BasePose { x, y, z, yaw }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanGrid {
    pub rows: usize,
    pub cols: usize,
    pub spacing: f64,
    /// Row-major, rows along the heading, columns across it.
    pub values: Vec<f64>,
}

impl ScanGrid {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }
}

/// Proprioceptive block. Velocities are in the yaw-aligned base frame.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Proprio {
    pub lin_vel: [f64; 3],
    pub ang_vel: [f64; 3],
    pub gravity: [f64; 3],
    pub command: [f64; 3],
    pub joint_pos: Vec<f64>,
    pub joint_vel: Vec<f64>,
    pub prev_action: Vec<f64>,
}

impl Proprio {
    pub fn len_for(joints: usize) -> usize {
        12 + 3 * joints
    }

    pub fn width(&self) -> usize {
        12 + self.joint_pos.len() + self.joint_vel.len() + self.prev_action.len()
    }

    pub fn write_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.lin_vel);
        out.extend_from_slice(&self.ang_vel);
        out.extend_from_slice(&self.gravity);
        out.extend_from_slice(&self.command);
        out.extend_from_slice(&self.joint_pos);
        out.extend_from_slice(&self.joint_vel);
        out.extend_from_slice(&self.prev_action);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorFrame {
    pub height_scan: ScanGrid,
    pub lidar: Vec<f64>,
    pub proprio: Proprio,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationMode {
    Perceptive,
    Blind,
}

impl ObservationMode {
    pub fn is_perceptive(self) -> bool {
        matches!(self, ObservationMode::Perceptive)
    }
}

/// Observation width for a sensor config and joint count; identical in both
/// modes.
pub fn observation_len(config: &SensorConfig, joints: usize) -> usize {
    Proprio::len_for(joints) + config.exteroceptive_len()
}

/// World offsets of the scan lattice points for a given heading.
pub fn scan_points(pose: &BasePose, config: &SensorConfig) -> Vec<(f64, f64)> {
    let (s, c) = pose.yaw.sin_cos();
    let r0 = 0.5 * (config.scan_rows as f64 - 1.0);
    let c0 = 0.5 * (config.scan_cols as f64 - 1.0);
    let mut out = Vec::with_capacity(config.scan_len());
    for r in 0..config.scan_rows {
        let fx = config.scan_forward_offset + (r as f64 - r0) * config.scan_spacing;
        for col in 0..config.scan_cols {
            let fy = (col as f64 - c0) * config.scan_spacing;
            out.push((pose.x + c * fx - s * fy, pose.y + s * fx + c * fy));
        }
    }
    out
}

/// Terrain heights on the lattice, relative to the base height. Samples that
/// fall off the map read the nearest edge cell.
pub fn height_scan(map: &TerrainMap, pose: &BasePose, config: &SensorConfig) -> ScanGrid {
    let values = scan_points(pose, config)
        .into_iter()
        .map(|(x, y)| map.height_at_clamped(x, y) - pose.z)
        .collect();
    ScanGrid {
        rows: config.scan_rows,
        cols: config.scan_cols,
        spacing: config.scan_spacing,
        values,
    }
}

/// Range of each ray to its first heightfield intersection. Rays are spread
/// uniformly over `[0, 2π)` relative to the heading and found by fixed-step
/// marching followed by bisection to `march_tolerance`.
pub fn lidar_scan(map: &TerrainMap, pose: &BasePose, config: &SensorConfig) -> Vec<f64> {
    let origin = [pose.x, pose.y, pose.z + config.sensor_height];
    let (sp, cp) = config.lidar_pitch.sin_cos();
    (0..config.lidar_rays)
        .map(|k| {
            let az = pose.yaw + std::f64::consts::TAU * k as f64 / config.lidar_rays as f64;
            let (sa, ca) = az.sin_cos();
            let dir = [ca * cp, sa * cp, -sp];
            march(map, origin, dir, config)
        })
        .collect()
}

fn below_surface(map: &TerrainMap, origin: [f64; 3], dir: [f64; 3], t: f64) -> bool {
    let z = origin[2] + dir[2] * t;
    z < map.height_at_clamped(origin[0] + dir[0] * t, origin[1] + dir[1] * t)
}

fn march(map: &TerrainMap, origin: [f64; 3], dir: [f64; 3], config: &SensorConfig) -> f64 {
    let max = config.lidar_max_range;
    if below_surface(map, origin, dir, 0.0) {
        return config.march_tolerance.min(max);
    }
    let mut prev = 0.0;
    loop {
        let t = (prev + config.march_step).min(max);
        if below_surface(map, origin, dir, t) {
            let (mut lo, mut hi) = (prev, t);
            while hi - lo > config.march_tolerance {
                let mid = 0.5 * (lo + hi);
                if below_surface(map, origin, dir, mid) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return (0.5 * (lo + hi)).clamp(f64::MIN_POSITIVE, max);
        }
        if t >= max {
            return max;
        }
        prev = t;
    }
}

/// `[proprio | scan (row-major) | lidar]`; Blind mode zeroes the
/// exteroceptive block but keeps its width.
pub fn assemble_observation(frame: &SensorFrame, mode: ObservationMode) -> Vec<f64> {
    let extero = frame.height_scan.values.len() + frame.lidar.len();
    let mut out = Vec::with_capacity(frame.proprio.width() + extero);
    frame.proprio.write_into(&mut out);
    match mode {
        ObservationMode::Perceptive => {
            out.extend_from_slice(&frame.height_scan.values);
            out.extend_from_slice(&frame.lidar);
        }
        ObservationMode::Blind => out.resize(out.len() + extero, 0.0),
    }
    out
}
