//! Deterministic template synthesizer.
//!
//! Candidate 0 combines library templates, gated and weighted by the
//! terrain statistics (and adjusted by feedback when refining). Later
//! candidates are seeded mutations of the current best program.

use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use super::PromptBundle;
use crate::envstats::TerrainStats;
use crate::reward_dsl::{parse, validate, RewardProgram, Term, EXTEROCEPTIVE_FEATURES};
use crate::{seeds, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OfflineConfig {
    /// σ of the log-normal weight factor.
    pub mutation_sigma: f64,
    pub swap_probability: f64,
    pub gap_threshold: f64,
    pub obstacle_threshold: f64,
    pub roughness_threshold: f64,
    pub drop_threshold: f64,
    /// Desired base height above the terrain (m).
    pub target_height: f64,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        OfflineConfig {
            mutation_sigma: 0.3,
            swap_probability: 0.5,
            gap_threshold: 0.02,
            obstacle_threshold: 0.05,
            roughness_threshold: 0.03,
            drop_threshold: 0.05,
            target_height: 0.64,
        }
    }
}

impl OfflineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mutation_sigma >= 0.0 && self.mutation_sigma.is_finite()) {
            return Err(Error::InvalidParams("mutation_sigma must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.swap_probability) {
            return Err(Error::InvalidParams("swap_probability must be in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateFamily {
    VelocityTracking,
    YawTracking,
    UprightPosture,
    BaseHeight,
    TorsoContact,
    ActionSmoothness,
    GaitAlternation,
    GapAvoidance,
    ObstacleClearance,
    StepDescent,
}

struct Template {
    family: TemplateFamily,
    name: &'static str,
    /// `{h}` is replaced by the target height.
    variants: &'static [&'static str],
    weight: fn(&TerrainStats) -> f64,
    gate: fn(&TerrainStats, &OfflineConfig) -> bool,
}

fn always(_: &TerrainStats, _: &OfflineConfig) -> bool {
    true
}

const LIBRARY: [Template; 10] = [
    Template {
        family: TemplateFamily::VelocityTracking,
        name: "track_lin_vel",
        variants: &[
            "exp(-(square(vx - vx_cmd) + square(vy - vy_cmd)) / 0.25)",
            "exp(-(square(vx - vx_cmd) + square(vy - vy_cmd)) / 0.1)",
            "1 - tanh(abs(vx - vx_cmd) + abs(vy - vy_cmd))",
        ],
        weight: |_| 1.5,
        gate: always,
    },
    Template {
        family: TemplateFamily::YawTracking,
        name: "track_yaw_rate",
        variants: &["exp(-square(wz - wz_cmd) / 0.25)", "1 - tanh(abs(wz - wz_cmd))"],
        weight: |_| 0.5,
        gate: always,
    },
    Template {
        family: TemplateFamily::UprightPosture,
        name: "upright",
        variants: &["square(roll) + square(pitch)", "abs(roll) + abs(pitch)"],
        weight: |s| -0.5 * (1.0 + 2.0 * s.roughness.min(1.0)),
        gate: always,
    },
    Template {
        family: TemplateFamily::BaseHeight,
        name: "base_height",
        variants: &["square(base_height - {h})", "abs(base_height - {h})"],
        weight: |_| -2.0,
        gate: always,
    },
    Template {
        family: TemplateFamily::TorsoContact,
        name: "torso_contact",
        variants: &["torso_contact"],
        weight: |s| -(1.0 + 4.0 * s.gap_ratio.min(1.0)),
        gate: always,
    },
    Template {
        family: TemplateFamily::ActionSmoothness,
        name: "action_smoothness",
        variants: &["action_rate", "0.5 * action_rate + 0.5 * action_norm"],
        weight: |_| -0.01,
        gate: always,
    },
    Template {
        family: TemplateFamily::GaitAlternation,
        name: "gait",
        variants: &["abs(foot_contact_0 - foot_contact_1)", "1 - foot_contact_0 * foot_contact_1"],
        weight: |_| 0.1,
        gate: always,
    },
    Template {
        family: TemplateFamily::GapAvoidance,
        name: "gap_avoidance",
        variants: &["frac_below(height_scan, -0.3)", "frac_below(height_scan, -0.5)"],
        weight: |s| -(0.5 + 5.0 * s.gap_ratio.min(1.0)),
        gate: |s, c| s.gap_ratio > c.gap_threshold,
    },
    Template {
        family: TemplateFamily::ObstacleClearance,
        name: "obstacle_clearance",
        variants: &["frac_above(height_scan, 0.15)", "frac_below(lidar, 0.5)"],
        weight: |s| -(0.3 + 3.0 * s.obstacle_density.min(1.0)),
        gate: |s, c| s.obstacle_density > c.obstacle_threshold,
    },
    Template {
        family: TemplateFamily::StepDescent,
        name: "step_descent",
        variants: &["clip(-vz, 0, 0.5) * frac_below(height_scan, -0.05)"],
        weight: |_| 0.3,
        gate: |s, c| s.max_drop > c.drop_threshold && s.roughness > c.roughness_threshold,
    },
];

fn template(name: &str) -> Option<&'static Template> {
    LIBRARY.iter().find(|t| t.name == name)
}

fn is_exteroceptive(expr: &str) -> bool {
    EXTEROCEPTIVE_FEATURES.iter().any(|f| expr.contains(f))
}

/// Rounds to four decimals so program texts stay short and stable.
fn round_weight(w: f64) -> f64 {
    let r = (w * 1e4).round() / 1e4;
    if r == 0.0 {
        w.signum() * 1e-4
    } else {
        r
    }
}

fn feedback_factor(family: TemplateFamily, feedback: &str) -> f64 {
    use TemplateFamily::*;
    let mut f = 1.0;
    if feedback.contains("freezing") {
        f *= match family {
            VelocityTracking => 1.5,
            GapAvoidance | ObstacleClearance => 0.5,
            TorsoContact => 0.75,
            _ => 1.0,
        };
    }
    if feedback.contains("falling") {
        f *= match family {
            TorsoContact | GapAvoidance => 2.0,
            UprightPosture | BaseHeight => 1.5,
            _ => 1.0,
        };
    }
    if feedback.contains("poor tracking") {
        f *= match family {
            VelocityTracking | YawTracking => 1.5,
            ActionSmoothness => 0.5,
            _ => 1.0,
        };
    }
    f
}

/// Candidate 0: every template whose gate passes and whose features exist
/// in the schema, first variant, stats-derived weight.
pub fn base_program(bundle: &PromptBundle, cfg: &OfflineConfig) -> Result<RewardProgram> {
    let feedback = bundle.prior.as_ref().map(|(_, f)| f.as_str()).unwrap_or("");
    let perceptive = EXTEROCEPTIVE_FEATURES.iter().all(|f| bundle.schema.contains(f));
    let mut src = String::new();
    for t in &LIBRARY {
        let expr = t.variants[0].replace("{h}", &cfg.target_height.to_string());
        if !(t.gate)(&bundle.stats, cfg) || (is_exteroceptive(&expr) && !perceptive) {
            continue;
        }
        let w = round_weight((t.weight)(&bundle.stats) * feedback_factor(t.family, feedback));
        src.push_str(&format!("term {} weight {w} = {expr};\n", t.name));
    }
    let prog = parse(&src)?;
    validate(&prog, &bundle.schema)?;
    Ok(prog)
}

/// Log-normal weight noise on every term, then with `swap_probability` one
/// library term has its expression replaced by another variant of the same
/// family. Terms not from the library only get weight noise.
pub fn mutate(base: &RewardProgram, cfg: &OfflineConfig, rng: &mut impl Rng) -> Result<RewardProgram> {
    let noise = LogNormal::new(0.0, cfg.mutation_sigma).map_err(|e| Error::InvalidParams(e.to_string()))?;
    let mut terms: Vec<Term> = base
        .terms
        .iter()
        .map(|t| Term { weight: round_weight(t.weight * noise.sample(rng)), ..t.clone() })
        .collect();
    if rng.random_bool(cfg.swap_probability) {
        let swappable: Vec<usize> = (0..terms.len())
            .filter(|&i| template(&terms[i].name).is_some_and(|t| t.variants.len() > 1))
            .collect();
        if !swappable.is_empty() {
            let i = swappable[rng.random_range(0..swappable.len())];
            let t = template(&terms[i].name).expect("filtered above");
            let current = terms[i].expr.to_string();
            let options: Vec<String> = t
                .variants
                .iter()
                .map(|v| v.replace("{h}", &cfg.target_height.to_string()))
                .filter(|v| parse(&format!("term x weight 1 = {v};")).map(|p| p.terms[0].expr.to_string() != current).unwrap_or(false))
                .collect();
            if !options.is_empty() {
                let pick = &options[rng.random_range(0..options.len())];
                terms[i].expr = parse(&format!("term x weight 1 = {pick};"))?.terms.remove(0).expr;
            }
        }
    }
    Ok(RewardProgram::from_terms(terms))
}

pub(super) fn generate(bundle: &PromptBundle, cfg: &OfflineConfig, n: usize, seed: u64) -> Result<Vec<RewardProgram>> {
    cfg.validate()?;
    let first = base_program(bundle, cfg)?;
    let best = match &bundle.prior {
        Some((prior, _)) if validate(prior, &bundle.schema).is_ok() => prior.clone(),
        _ => first.clone(),
    };
    let mut out = vec![first];
    for k in 1..n {
        let mut rng = seeds::rng(seed, &[0x6f66_666c, k as u64]);
        let prog = mutate(&best, cfg, &mut rng)?;
        validate(&prog, &bundle.schema)?;
        out.push(prog);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward_dsl::FeatureSchema;
    use crate::sensors::{ObservationMode, SensorConfig};
    use crate::synthesis::{combine_prompts, SkillSpec};
    use crate::terrain::TerrainKind;

    fn bundle(stats: TerrainStats, mode: ObservationMode) -> PromptBundle {
        let schema = FeatureSchema::walker(mode, &SensorConfig::desk(), 6);
        combine_prompts(&SkillSpec::default(), &stats, &schema, None)
    }

    #[test]
    fn library_variants_parse() {
        for t in &LIBRARY {
            for v in t.variants {
                let v = v.replace("{h}", "0.6");
                parse(&format!("term {} weight 1 = {v};", t.name)).unwrap();
            }
        }
    }

    #[test]
    fn gap_gate() {
        let flat = TerrainStats::flat(TerrainKind::Simple);
        let p = base_program(&bundle(flat.clone(), ObservationMode::Perceptive), &OfflineConfig::default()).unwrap();
        assert!(p.term("gap_avoidance").is_none());
        let gaps = TerrainStats { gap_ratio: 0.2, ..flat };
        let p = base_program(&bundle(gaps.clone(), ObservationMode::Perceptive), &OfflineConfig::default()).unwrap();
        assert!(p.term("gap_avoidance").is_some());
        let p = base_program(&bundle(gaps, ObservationMode::Blind), &OfflineConfig::default()).unwrap();
        assert_eq!(p.terms_referencing(&EXTEROCEPTIVE_FEATURES), 0);
    }

    #[test]
    fn feedback_changes_weights() {
        let stats = TerrainStats { gap_ratio: 0.2, ..TerrainStats::flat(TerrainKind::Gaps) };
        let b = bundle(stats.clone(), ObservationMode::Perceptive);
        let plain = base_program(&b, &OfflineConfig::default()).unwrap();
        let refine = combine_prompts(&b.skill, &stats, &b.schema, Some((&plain, "freezing")));
        let adjusted = base_program(&refine, &OfflineConfig::default()).unwrap();
        let w = |p: &RewardProgram, n: &str| p.term(n).unwrap().weight;
        assert!(w(&adjusted, "track_lin_vel") > w(&plain, "track_lin_vel"));
        assert!(w(&adjusted, "gap_avoidance").abs() < w(&plain, "gap_avoidance").abs());
    }

    #[test]
    fn mutation_keeps_names_and_signs() {
        let b = bundle(TerrainStats::flat(TerrainKind::Simple), ObservationMode::Perceptive);
        let base = base_program(&b, &OfflineConfig::default()).unwrap();
        for s in 0..20 {
            let mut rng = seeds::rng(s, &[]);
            let m = mutate(&base, &OfflineConfig::default(), &mut rng).unwrap();
            assert_eq!(m.term_names(), base.term_names());
            for (a, b) in m.terms.iter().zip(&base.terms) {
                assert_eq!(a.weight.signum(), b.weight.signum());
            }
        }
    }
}
