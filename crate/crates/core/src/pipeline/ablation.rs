//! Terrain × mode × seed comparison matrix.

use std::fmt::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{evaluate_policy, run_pipeline, score_policy, PipelineInputs, RunOptions, TABLE_METRICS};
use crate::envstats::analyze;
use crate::metrics::{write_metrics_csv, EpisodeMetrics};
use crate::ppo::{checkpoint, train};
use crate::reward_dsl::RewardProgram;
use crate::sensors::ObservationMode;
use crate::terrain::TerrainMap;
use crate::{seeds, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationMode {
    /// Full loop with exteroception in statistics and observations.
    Perceptive,
    /// Full loop with exteroception zeroed in statistics and observations.
    Blind,
    /// Fixed hand-written reward, perceptive observations, no synthesis.
    ManualBaseline,
}

impl AblationMode {
    pub const ALL: [AblationMode; 3] = [AblationMode::Perceptive, AblationMode::Blind, AblationMode::ManualBaseline];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Perceptive => "perceptive",
            AblationMode::Blind => "blind",
            AblationMode::ManualBaseline => "manual_baseline",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Clone, Debug)]
pub struct AblationConfig {
    pub terrains: Vec<(String, Arc<TerrainMap>)>,
    pub modes: Vec<AblationMode>,
    pub seeds: Vec<u64>,
    /// Shared settings; the map, mode and seed are replaced per run.
    pub template: PipelineInputs,
    pub baseline: RewardProgram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub terrain: String,
    pub mode: AblationMode,
    pub seed: u64,
    pub metrics: EpisodeMetrics,
    pub score: f64,
    pub run_dir: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// P(X ≥ wins) for X ~ Binomial(n, 1/2).
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    let mut c = 1.0f64;
    let mut tail = 0.0;
    for k in 0..=n {
        if k >= wins {
            tail += c;
        }
        c = c * (n - k) as f64 / (k + 1) as f64;
    }
    tail / 2f64.powi(n as i32)
}

impl AblationReport {
    pub fn terrains(&self) -> Vec<String> {
        let mut t: Vec<String> = Vec::new();
        for r in &self.rows {
            if !t.contains(&r.terrain) {
                t.push(r.terrain.clone());
            }
        }
        t
    }

    pub fn rows_for(&self, terrain: &str, mode: AblationMode) -> Vec<&AblationRow> {
        self.rows.iter().filter(|r| r.terrain == terrain && r.mode == mode).collect()
    }

    pub fn mean(&self, terrain: &str, mode: AblationMode) -> Option<EpisodeMetrics> {
        let rows: Vec<EpisodeMetrics> = self.rows_for(terrain, mode).iter().map(|r| r.metrics.clone()).collect();
        EpisodeMetrics::mean(&rows).ok()
    }

    /// Seeds where `metric(a) < metric(b)` strictly, out of seeds run in both
    /// modes, and the one-sided sign-test p-value.
    pub fn sign_test(
        &self,
        terrain: &str,
        a: AblationMode,
        b: AblationMode,
        metric: fn(&EpisodeMetrics) -> f64,
    ) -> (usize, usize, f64) {
        let mut wins = 0;
        let mut n = 0;
        for ra in self.rows_for(terrain, a) {
            if let Some(rb) = self.rows_for(terrain, b).into_iter().find(|r| r.seed == ra.seed) {
                n += 1;
                if metric(&ra.metrics) < metric(&rb.metrics) {
                    wins += 1;
                }
            }
        }
        (wins, n, sign_test_p(wins, n))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "terrain,mode,seed,velocity_tracking_error,exploration_score,torso_contact_rate,locomotion_quality,stationary_fraction,episode_length,score\n",
        );
        for r in &self.rows {
            let v = r.metrics.values();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.terrain,
                r.mode.name(),
                r.seed,
                v[0],
                v[1],
                v[2],
                v[3],
                v[4],
                v[5],
                r.score
            );
        }
        s
    }

    /// One table per terrain: metrics as rows, modes as columns, seed means.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("# Ablation report\n");
        let modes: Vec<AblationMode> =
            AblationMode::ALL.into_iter().filter(|m| self.rows.iter().any(|r| r.mode == *m)).collect();
        for t in self.terrains() {
            let n = self.rows.iter().filter(|r| r.terrain == t).map(|r| r.seed).collect::<std::collections::BTreeSet<_>>().len();
            let _ = writeln!(s, "\n## {t} terrain ({n} seeds)\n");
            let _ = write!(s, "| Metric |");
            for m in &modes {
                let _ = write!(s, " {} |", m.name());
            }
            let _ = write!(s, "\n|---|");
            for _ in &modes {
                let _ = write!(s, "---|");
            }
            s.push('\n');
            let means: Vec<Option<EpisodeMetrics>> = modes.iter().map(|m| self.mean(&t, *m)).collect();
            for (label, get) in TABLE_METRICS {
                let _ = write!(s, "| {label} |");
                for m in &means {
                    match m {
                        Some(m) => {
                            let _ = write!(s, " {:.3} |", get(m));
                        }
                        None => s.push_str(" - |"),
                    }
                }
                s.push('\n');
            }
            if modes.contains(&AblationMode::Perceptive) && modes.contains(&AblationMode::Blind) {
                let (w, n, p) = self.sign_test(&t, AblationMode::Perceptive, AblationMode::Blind, |m| m.torso_contact_rate);
                let _ = writeln!(
                    s,
                    "\nPerceptive below blind on torso contact rate in {w}/{n} seeds (one-sided sign test p = {p:.3})."
                );
            }
        }
        s
    }
}

fn run_baseline(inputs: &PipelineInputs, baseline: &RewardProgram, out: &Path, opts: &RunOptions) -> Result<EpisodeMetrics> {
    let result_path = out.join("result.json");
    if opts.resume {
        if let Ok(text) = std::fs::read_to_string(&result_path) {
            if let Ok(m) = serde_json::from_str(&text) {
                return Ok(m);
            }
        }
    }
    std::fs::create_dir_all(out)?;
    let mut env = inputs.env.clone();
    env.mode = ObservationMode::Perceptive;
    let stats = analyze(
        &inputs.map,
        &inputs.fleet,
        &env.sensors,
        &env.walker,
        &inputs.thresholds,
        seeds::derive(inputs.seed, &[0x7374_6174]),
    )?;
    let train_seed = seeds::derive(inputs.seed, &[0x6261_7365, 0]);
    let (params, log) = train(baseline, inputs.map.clone(), &env, &stats, &inputs.ppo, train_seed)?;
    checkpoint::save(out.join("policy.ckpt"), &params)?;
    log.save_csv(out.join("train.csv"))?;
    std::fs::write(out.join("reward.rdsl"), baseline.to_source())?;
    let eval_seed = seeds::derive(inputs.seed, &[0x6576_616c, 0x6261_7365]);
    let ev = evaluate_policy(&params, baseline, inputs.map.clone(), &env, &stats, &inputs.eval, eval_seed)?;
    write_metrics_csv(out.join("eval.csv"), &ev.rows, &ev.aggregate)?;
    std::fs::write(&result_path, serde_json::to_string_pretty(&ev.aggregate)?)?;
    Ok(ev.aggregate)
}

/// Runs every (terrain, mode, seed) cell under `out/<terrain>/<mode>/seed_<s>`
/// and writes `ablation.csv` and `report.md` to `out`.
pub fn run_ablation(cfg: &AblationConfig, out: &Path, opts: &RunOptions) -> Result<AblationReport> {
    if cfg.terrains.is_empty() || cfg.modes.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::InvalidParams("ablation needs terrains, modes and seeds".into()));
    }
    let mut report = AblationReport::default();
    for (name, map) in &cfg.terrains {
        for &mode in &cfg.modes {
            for &seed in &cfg.seeds {
                let rel = format!("{name}/{}/seed_{seed}", mode.name());
                let dir = out.join(&rel);
                let mut inputs = cfg.template.clone();
                inputs.map = map.clone();
                inputs.seed = seed;
                if opts.verbose {
                    eprintln!("ablation cell {rel}");
                }
                let metrics = match mode {
                    AblationMode::Perceptive | AblationMode::Blind => {
                        inputs.env.mode = if mode == AblationMode::Blind {
                            ObservationMode::Blind
                        } else {
                            ObservationMode::Perceptive
                        };
                        let manifest = run_pipeline(&inputs, &dir, opts)?;
                        manifest
                            .best_record()
                            .and_then(|r| r.metrics.clone())
                            .ok_or_else(|| Error::Config(format!("run {rel} has no evaluated best candidate")))?
                    }
                    AblationMode::ManualBaseline => run_baseline(&inputs, &cfg.baseline, &dir, opts)?,
                };
                report.rows.push(AblationRow {
                    terrain: name.clone(),
                    mode,
                    seed,
                    score: score_policy(&metrics),
                    metrics,
                    run_dir: rel,
                });
            }
        }
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("ablation.csv"), report.to_csv())?;
    std::fs::write(out.join("report.md"), report.to_markdown())?;
    Ok(report)
}
