use std::collections::HashMap;
use std::sync::Arc;

use crate::sensors::{ObservationMode, SensorConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    Scalar,
    Vector(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub enum FeatureValue {
    Scalar(f64),
    Vector(Vec<f64>),
}

/// Terrain statistics exposed to programs as per-episode constants.
pub const STAT_FEATURES: [&str; 5] =
    ["gap_ratio", "obstacle_density", "roughness", "mean_abs_slope", "max_drop"];

/// Vector features that only exist when the policy can see the terrain.
pub const EXTEROCEPTIVE_FEATURES: [&str; 2] = ["height_scan", "lidar"];

const SCALARS: [(&str, &str); 18] = [
    ("vx", "forward base velocity in the heading frame (m/s)"),
    ("vy", "lateral base velocity in the heading frame (m/s)"),
    ("vz", "vertical base velocity (m/s)"),
    ("wz", "yaw rate (rad/s)"),
    ("vx_cmd", "commanded forward velocity (m/s)"),
    ("vy_cmd", "commanded lateral velocity (m/s)"),
    ("wz_cmd", "commanded yaw rate (rad/s)"),
    ("base_height", "base height above the terrain directly below (m)"),
    ("roll", "base roll (rad)"),
    ("pitch", "base pitch (rad)"),
    ("roll_rate", "base roll rate (rad/s)"),
    ("pitch_rate", "base pitch rate (rad/s)"),
    ("joint_vel_norm", "euclidean norm of joint velocities (rad/s)"),
    ("action_rate", "squared norm of action minus previous action"),
    ("action_norm", "squared norm of the action"),
    ("foot_contact_0", "1 if the left foot touches the ground, else 0"),
    ("foot_contact_1", "1 if the right foot touches the ground, else 0"),
    ("torso_contact", "1 if the torso touches the ground, else 0"),
];

/// Names, kinds and slot indices of every feature a program may read.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSchema {
    names: Vec<String>,
    kinds: Vec<FeatureKind>,
    docs: Vec<String>,
    index: HashMap<String, usize>,
}

impl FeatureSchema {
    pub fn new() -> Self {
        FeatureSchema { names: Vec::new(), kinds: Vec::new(), docs: Vec::new(), index: HashMap::new() }
    }

    /// Adds a feature; re-adding an existing name is ignored.
    pub fn push(&mut self, name: &str, kind: FeatureKind, doc: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.names.len();
        self.names.push(name.to_string());
        self.kinds.push(kind);
        self.docs.push(doc.to_string());
        self.index.insert(name.to_string(), i);
        i
    }

    /// The schema used by the walker environment. Blind mode drops the
    /// exteroceptive vectors; everything else is shared.
    pub fn walker(mode: ObservationMode, sensors: &SensorConfig, joints: usize) -> Self {
        let mut s = FeatureSchema::new();
        for (name, doc) in SCALARS {
            s.push(name, FeatureKind::Scalar, doc);
        }
        for name in STAT_FEATURES {
            s.push(name, FeatureKind::Scalar, "terrain statistic, constant over an episode");
        }
        s.push("action", FeatureKind::Vector(joints), "current normalized action");
        s.push("prev_action", FeatureKind::Vector(joints), "previous normalized action");
        s.push("foot_contact", FeatureKind::Vector(2), "per-foot contact flags");
        if mode.is_perceptive() {
            s.push(
                "height_scan",
                FeatureKind::Vector(sensors.scan_len()),
                "terrain height around the robot relative to the scan median (m)",
            );
            s.push(
                "lidar",
                FeatureKind::Vector(sensors.lidar_rays),
                "lidar ranges of the planar sweep (m)",
            );
        }
        s
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn kind(&self, name: &str) -> Option<FeatureKind> {
        self.index_of(name).map(|i| self.kinds[i])
    }

    pub fn kind_at(&self, i: usize) -> FeatureKind {
        self.kinds[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// One line per feature, for prompts.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        for ((n, k), d) in self.names.iter().zip(&self.kinds).zip(&self.docs) {
            let kind = match k {
                FeatureKind::Scalar => "scalar".to_string(),
                FeatureKind::Vector(len) => format!("vector[{len}]"),
            };
            out.push_str(&format!("{n}: {kind}, {d}\n"));
        }
        out
    }
}

impl Default for FeatureSchema {
    fn default() -> Self {
        Self::new()
    }
}

/// Feature values for one step, stored in schema slot order.
#[derive(Clone, Debug)]
pub struct FeatureEnv {
    schema: Arc<FeatureSchema>,
    values: Vec<FeatureValue>,
}

impl FeatureEnv {
    /// All scalars 0, all vectors zero-filled at their schema length.
    pub fn zeros(schema: Arc<FeatureSchema>) -> Self {
        let values = schema
            .kinds
            .iter()
            .map(|k| match k {
                FeatureKind::Scalar => FeatureValue::Scalar(0.0),
                FeatureKind::Vector(n) => FeatureValue::Vector(vec![0.0; *n]),
            })
            .collect();
        FeatureEnv { schema, values }
    }

    pub fn schema(&self) -> &Arc<FeatureSchema> {
        &self.schema
    }

    /// Sets a scalar; names missing from the schema are ignored.
    pub fn set(&mut self, name: &str, v: f64) {
        if let Some(i) = self.schema.index_of(name) {
            self.values[i] = FeatureValue::Scalar(v);
        }
    }

    /// Copies a vector into its slot, truncating or zero-padding to the
    /// schema length. Names missing from the schema are ignored.
    pub fn set_vector(&mut self, name: &str, v: &[f64]) {
        if let Some(i) = self.schema.index_of(name) {
            if let FeatureValue::Vector(dst) = &mut self.values[i] {
                dst.iter_mut().for_each(|d| *d = 0.0);
                for (d, s) in dst.iter_mut().zip(v) {
                    *d = *s;
                }
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&FeatureValue> {
        self.schema.index_of(name).map(|i| &self.values[i])
    }

    pub fn value_at(&self, i: usize) -> &FeatureValue {
        &self.values[i]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| match v {
            FeatureValue::Scalar(x) => x.is_finite(),
            FeatureValue::Vector(xs) => xs.iter().all(|x| x.is_finite()),
        })
    }
}
