//! The closed refinement loop: synthesize candidates, train each, evaluate,
//! score, keep the best, and feed it back into the next prompt. Everything a
//! run produces lives under one directory.

mod ablation;
mod report;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envstats::{analyze, FleetConfig, StatThresholds, TerrainStats};
use crate::metrics::{write_metrics_csv, EpisodeMetrics, MetricsConfig};
use crate::ppo::{checkpoint, train_with, PPOConfig, PolicyParams, PolicyRunner};
use crate::reward_dsl::{parse, RewardProgram};
use crate::sensors::ObservationMode;
use crate::sim::{run_episode, EnvConfig};
use crate::synthesis::{combine_prompts, synthesize, AuditLog, CandidateOrigin, PromptBundle, SkillSpec, SynthesisBackend};
use crate::terrain::{TerrainKind, TerrainMap};
use crate::{seeds, Error, Result};

pub use ablation::{run_ablation, AblationConfig, AblationMode, AblationReport, AblationRow};
pub use report::{render_run_report, TABLE_METRICS};

/// Hand-tuned 13-term reward used as the manual baseline.
pub const MANUAL_BASELINE_RDSL: &str = include_str!("../../rewards/manual_baseline.rdsl");
/// Plain velocity-tracking reward.
pub const TRACKING_RDSL: &str = include_str!("../../rewards/tracking.rdsl");

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub max_steps: usize,
    pub metrics: MetricsConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { episodes: 16, max_steps: 400, metrics: MetricsConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyEvaluation {
    pub rows: Vec<EpisodeMetrics>,
    pub aggregate: EpisodeMetrics,
    pub feedback: String,
}

/// Rule-based feedback tags, comma separated.
pub fn feedback_text(m: &EpisodeMetrics) -> String {
    let mut tags = Vec::new();
    if m.stationary_fraction > 0.3 {
        tags.push("freezing");
    }
    if m.torso_contact_rate > 50.0 {
        tags.push("falling");
    }
    if m.velocity_tracking_error > 1.0 {
        tags.push("poor tracking");
    }
    if tags.is_empty() {
        tags.push("healthy gait");
    }
    tags.join(", ")
}

/// `J = 2·exp(−tracking error) + 0.1·exploration − 0.01·torso contact rate + quality`.
pub fn score_policy(m: &EpisodeMetrics) -> f64 {
    2.0 * (-m.velocity_tracking_error).exp() + 0.1 * m.exploration_score - 0.01 * m.torso_contact_rate
        + m.locomotion_quality
}

/// Runs `cfg.episodes` seeded episodes with the policy's mean action and
/// averages their metrics. Commands are drawn from the environment's ranges.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_policy(
    params: &PolicyParams,
    reward: &RewardProgram,
    map: Arc<TerrainMap>,
    env: &EnvConfig,
    stats: &TerrainStats,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<PolicyEvaluation> {
    if cfg.episodes == 0 {
        return Err(Error::InvalidParams("evaluation needs at least one episode".into()));
    }
    let mut cmd_rng = seeds::rng(seed, &[0x6576_616c]);
    let mut rows = Vec::with_capacity(cfg.episodes);
    for e in 0..cfg.episodes {
        let command = env.commands.sample(&mut cmd_rng);
        let mut policy = PolicyRunner::new(params.clone());
        let ep_seed = seeds::derive(seed, &[e as u64]);
        let traj = run_episode(&mut policy, reward, map.clone(), command, cfg.max_steps, ep_seed, env, stats)?;
        rows.push(EpisodeMetrics::from_trajectory(&traj, &cfg.metrics)?);
    }
    let aggregate = EpisodeMetrics::mean(&rows)?;
    let feedback = feedback_text(&aggregate);
    Ok(PolicyEvaluation { rows, aggregate, feedback })
}

/// Everything needed to start (or resume) a run.
#[derive(Clone, Debug)]
pub struct PipelineInputs {
    pub map: Arc<TerrainMap>,
    pub terrain_file: Option<String>,
    pub skill: SkillSpec,
    pub backend: SynthesisBackend,
    pub env: EnvConfig,
    pub ppo: PPOConfig,
    pub fleet: FleetConfig,
    pub thresholds: StatThresholds,
    pub eval: EvalConfig,
    pub i_max: usize,
    pub n_candidates: usize,
    pub seed: u64,
}

impl PipelineInputs {
    pub fn new(map: Arc<TerrainMap>, seed: u64) -> Self {
        PipelineInputs {
            map,
            terrain_file: None,
            skill: SkillSpec::default(),
            backend: SynthesisBackend::default(),
            env: EnvConfig::default(),
            ppo: PPOConfig::default(),
            fleet: FleetConfig::default(),
            thresholds: StatThresholds::default(),
            eval: EvalConfig::default(),
            i_max: 3,
            n_candidates: 2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.i_max == 0 || self.n_candidates == 0 {
            return Err(Error::InvalidParams("i_max and n_candidates must be at least 1".into()));
        }
        self.skill.validate()?;
        self.backend.validate()?;
        self.env.validate()?;
        self.ppo.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStatus {
    Pending,
    Evaluated,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub iteration: usize,
    pub index: usize,
    pub origin: CandidateOrigin,
    /// Canonical program text.
    pub reward: String,
    pub reward_file: String,
    pub prompt_file: String,
    pub checkpoint_file: Option<String>,
    pub log_file: Option<String>,
    pub eval_file: Option<String>,
    pub train_seed: u64,
    pub status: CandidateStatus,
    pub error: Option<String>,
    pub metrics: Option<EpisodeMetrics>,
    /// `None` for failed candidates, which never win selection.
    pub score: Option<f64>,
    pub feedback: String,
    pub final_mean_return: Option<f64>,
}

impl CandidateRecord {
    pub fn id(&self) -> String {
        format!("{}_{}", self.iteration, self.index)
    }

    pub fn program(&self) -> Result<RewardProgram> {
        parse(&self.reward)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateRef {
    pub iteration: usize,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub iteration: usize,
    pub best_index: usize,
    pub best_score: f64,
    pub feedback: String,
    /// Some remote candidate of this iteration fell back to offline.
    pub degraded: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub terrain_file: Option<String>,
    pub terrain_sha256: String,
    pub terrain_kind: TerrainKind,
    pub skill: SkillSpec,
    /// Statistics as shown to the synthesizer (zeroed in blind mode).
    pub stats: TerrainStats,
    pub thresholds: StatThresholds,
    pub fleet: FleetConfig,
    pub env: EnvConfig,
    pub ppo: PPOConfig,
    pub eval: EvalConfig,
    pub backend: SynthesisBackend,
    pub seed: u64,
    pub i_max: usize,
    pub n_candidates: usize,
    pub candidates: Vec<CandidateRecord>,
    pub lineage: Vec<LineageEntry>,
    /// Best candidate of the last iteration.
    pub final_iteration_best: Option<CandidateRef>,
    /// Best candidate over all iterations.
    pub best: Option<CandidateRef>,
    pub complete: bool,
    /// Wall-clock per stage is kept out of the manifest so that it stays
    /// reproducible.
    pub timings_file: String,
}

impl RunManifest {
    pub fn record(&self, r: CandidateRef) -> Option<&CandidateRecord> {
        self.candidates.iter().find(|c| c.iteration == r.iteration && c.index == r.index)
    }

    pub fn best_record(&self) -> Option<&CandidateRecord> {
        self.best.and_then(|r| self.record(r))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Same run configuration, ignoring progress.
    fn same_inputs(&self, other: &RunManifest) -> bool {
        let strip = |m: &RunManifest| RunManifest {
            candidates: vec![],
            lineage: vec![],
            final_iteration_best: None,
            best: None,
            complete: false,
            ..m.clone()
        };
        strip(self) == strip(other)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub iteration: usize,
    pub candidate: Option<usize>,
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from an existing manifest in the output directory.
    pub resume: bool,
    /// Stop with [`Error::Interrupted`] after this many candidates finish in
    /// this invocation.
    pub stop_after: Option<usize>,
    /// Print progress to stderr.
    pub verbose: bool,
}

pub fn terrain_sha256(map: &TerrainMap) -> Result<String> {
    Ok(hex::encode(Sha256::digest(map.to_json_bytes()?)))
}

/// Argmax of the surviving scores; ties go to the lower index.
pub fn select_best(scores: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, s) in scores.iter().enumerate() {
        if let Some(s) = *s {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((k, s));
            }
        }
    }
    best.map(|(k, _)| k)
}

struct RunDir {
    root: PathBuf,
}

impl RunDir {
    fn create(root: &Path) -> Result<Self> {
        for sub in ["prompts", "rewards", "checkpoints", "logs", "eval"] {
            std::fs::create_dir_all(root.join(sub))?;
        }
        Ok(RunDir { root: root.to_path_buf() })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

fn log(opts: &RunOptions, msg: impl AsRef<str>) {
    if opts.verbose {
        eprintln!("{}", msg.as_ref());
    }
}

fn initial_manifest(inputs: &PipelineInputs, opts: &RunOptions) -> Result<RunManifest> {
    let t = Instant::now();
    let measured = analyze(
        &inputs.map,
        &inputs.fleet,
        &inputs.env.sensors,
        &inputs.env.walker,
        &inputs.thresholds,
        seeds::derive(inputs.seed, &[0x7374_6174]),
    )?;
    let stats = match inputs.env.mode {
        ObservationMode::Perceptive => measured,
        ObservationMode::Blind => measured.zeroed(),
    };
    log(opts, format!("terrain statistics computed in {:.1}s", t.elapsed().as_secs_f64()));
    Ok(RunManifest {
        format_version: MANIFEST_VERSION,
        terrain_file: inputs.terrain_file.clone(),
        terrain_sha256: terrain_sha256(&inputs.map)?,
        terrain_kind: inputs.map.kind(),
        skill: inputs.skill.clone(),
        stats,
        thresholds: inputs.thresholds.clone(),
        fleet: inputs.fleet.clone(),
        env: inputs.env.clone(),
        ppo: inputs.ppo.clone(),
        eval: inputs.eval.clone(),
        backend: inputs.backend.clone(),
        seed: inputs.seed,
        i_max: inputs.i_max,
        n_candidates: inputs.n_candidates,
        candidates: vec![],
        lineage: vec![],
        final_iteration_best: None,
        best: None,
        complete: false,
        timings_file: "timings.json".into(),
    })
}

fn append_timing(dir: &RunDir, timing: StageTiming) -> Result<()> {
    let path = dir.path("timings.json");
    let mut all: Vec<StageTiming> = match std::fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).unwrap_or_default(),
        Err(_) => vec![],
    };
    all.push(timing);
    std::fs::write(path, serde_json::to_string_pretty(&all)?)?;
    Ok(())
}

fn timed<T>(dir: &RunDir, iteration: usize, candidate: Option<usize>, stage: &str, f: impl FnOnce() -> T) -> Result<T> {
    let t = Instant::now();
    let out = f();
    append_timing(dir, StageTiming { iteration, candidate, stage: stage.into(), seconds: t.elapsed().as_secs_f64() })?;
    Ok(out)
}

/// Trains and evaluates one candidate, filling in its record. Training or
/// simulation errors mark the candidate failed instead of aborting.
fn run_candidate(
    rec: &mut CandidateRecord,
    manifest: &RunManifest,
    map: &Arc<TerrainMap>,
    dir: &RunDir,
    opts: &RunOptions,
) -> Result<()> {
    let id = rec.id();
    let program = rec.program()?;
    let progress_every = (manifest.ppo.iterations / 10).max(1);
    let trained = timed(dir, rec.iteration, Some(rec.index), "train", || {
        train_with(&program, map.clone(), &manifest.env, &manifest.stats, &manifest.ppo, rec.train_seed, &mut |l| {
            if l.iteration % progress_every == 0 {
                log(opts, format!("  [{id}] iteration {} mean return {:.3}", l.iteration, l.mean_return));
            }
        })
    })?;
    let (params, training_log) = match trained {
        Ok(t) => t,
        Err(e) => {
            rec.status = CandidateStatus::Failed;
            rec.error = Some(e.to_string());
            rec.feedback = format!("training failed: {e}");
            return Ok(());
        }
    };
    let ckpt = format!("checkpoints/{id}.ckpt");
    checkpoint::save(dir.path(&ckpt), &params)?;
    let log_file = format!("logs/{id}.csv");
    training_log.save_csv(dir.path(&log_file))?;
    rec.checkpoint_file = Some(ckpt);
    rec.log_file = Some(log_file);
    rec.final_mean_return = training_log.last_return();

    let eval_seed = seeds::derive(manifest.seed, &[0x6576_616c, rec.iteration as u64, rec.index as u64]);
    let evaluated = timed(dir, rec.iteration, Some(rec.index), "evaluate", || {
        evaluate_policy(&params, &program, map.clone(), &manifest.env, &manifest.stats, &manifest.eval, eval_seed)
    })?;
    match evaluated {
        Ok(ev) => {
            let eval_file = format!("eval/{id}.csv");
            write_metrics_csv(dir.path(&eval_file), &ev.rows, &ev.aggregate)?;
            rec.eval_file = Some(eval_file);
            let j = score_policy(&ev.aggregate);
            if j.is_finite() {
                rec.status = CandidateStatus::Evaluated;
                rec.score = Some(j);
            } else {
                rec.status = CandidateStatus::Failed;
                rec.error = Some("non-finite score".into());
            }
            rec.metrics = Some(ev.aggregate);
            rec.feedback = ev.feedback;
        }
        Err(e) => {
            rec.status = CandidateStatus::Failed;
            rec.error = Some(e.to_string());
            rec.feedback = format!("evaluation failed: {e}");
        }
    }
    Ok(())
}

fn prompt_for(manifest: &RunManifest, iteration: usize) -> Result<PromptBundle> {
    let schema = manifest.env.feature_schema();
    if iteration == 0 {
        return Ok(combine_prompts(&manifest.skill, &manifest.stats, &schema, None));
    }
    let prev = manifest
        .lineage
        .iter()
        .find(|l| l.iteration == iteration - 1)
        .ok_or_else(|| Error::Config(format!("iteration {} has no selected candidate", iteration - 1)))?;
    let rec = manifest
        .record(CandidateRef { iteration: iteration - 1, index: prev.best_index })
        .ok_or_else(|| Error::Config("lineage refers to a missing candidate".into()))?;
    let prog = rec.program()?;
    Ok(combine_prompts(&manifest.skill, &manifest.stats, &schema, Some((&prog, &rec.feedback))))
}

/// Executes the refinement loop, writing the run directory as it goes. With
/// `opts.resume`, completed work recorded in `out/manifest.json` is reused.
pub fn run_pipeline(inputs: &PipelineInputs, out: &Path, opts: &RunOptions) -> Result<RunManifest> {
    inputs.validate()?;
    let dir = RunDir::create(out)?;
    let manifest_path = dir.path("manifest.json");
    let fresh = initial_manifest(inputs, opts)?;
    let mut manifest = if opts.resume && manifest_path.exists() {
        let m = RunManifest::load(&manifest_path)?;
        if !m.same_inputs(&fresh) {
            return Err(Error::Config("existing manifest was produced with different inputs".into()));
        }
        m
    } else {
        std::fs::remove_file(dir.path("timings.json")).ok();
        fresh
    };
    if manifest.complete {
        return Ok(manifest);
    }
    let map = inputs.map.clone();
    let mut finished = 0usize;

    for i in 0..manifest.i_max {
        if manifest.lineage.iter().any(|l| l.iteration == i) {
            continue;
        }
        if !manifest.candidates.iter().any(|c| c.iteration == i) {
            let bundle = prompt_for(&manifest, i)?;
            let audit = AuditLog::new(dir.path("audit"), i.to_string());
            let synth_seed = seeds::derive(manifest.seed, &[0x7379_6e74, i as u64]);
            let synthesis = timed(&dir, i, None, "synthesize", || {
                synthesize(&bundle, &manifest.backend, manifest.n_candidates, synth_seed, Some(&audit))
            })??;
            log(opts, format!("iteration {i}: {} candidates synthesized", synthesis.candidates.len()));
            for (k, c) in synthesis.candidates.iter().enumerate() {
                let id = format!("{i}_{k}");
                let prompt_file = format!("prompts/{id}.txt");
                std::fs::write(dir.path(&prompt_file), format!("{}\n\n{}", bundle.system_text, bundle.user_text))?;
                let reward_file = format!("rewards/{id}.rdsl");
                let reward = c.program.to_source();
                std::fs::write(dir.path(&reward_file), &reward)?;
                manifest.candidates.push(CandidateRecord {
                    iteration: i,
                    index: k,
                    origin: c.origin,
                    reward,
                    reward_file,
                    prompt_file,
                    checkpoint_file: None,
                    log_file: None,
                    eval_file: None,
                    train_seed: seeds::derive(manifest.seed, &[0x7472_6169, i as u64, k as u64]),
                    status: CandidateStatus::Pending,
                    error: None,
                    metrics: None,
                    score: None,
                    feedback: String::new(),
                    final_mean_return: None,
                });
            }
            manifest.save(&manifest_path)?;
        }

        let pending: Vec<usize> = (0..manifest.candidates.len())
            .filter(|&j| manifest.candidates[j].iteration == i && manifest.candidates[j].status == CandidateStatus::Pending)
            .collect();
        for j in pending {
            if opts.stop_after.is_some_and(|n| finished >= n) {
                return Err(Error::Interrupted(finished));
            }
            let mut rec = manifest.candidates[j].clone();
            log(opts, format!("candidate {}: training", rec.id()));
            run_candidate(&mut rec, &manifest, &map, &dir, opts)?;
            log(opts, format!("candidate {}: J = {:?}, feedback: {}", rec.id(), rec.score, rec.feedback));
            manifest.candidates[j] = rec;
            manifest.save(&manifest_path)?;
            finished += 1;
        }

        let records: Vec<&CandidateRecord> = manifest.candidates.iter().filter(|c| c.iteration == i).collect();
        let scores: Vec<Option<f64>> = records.iter().map(|c| c.score).collect();
        let k = select_best(&scores).ok_or(Error::AllCandidatesFailed(i))?;
        let entry = LineageEntry {
            iteration: i,
            best_index: records[k].index,
            best_score: scores[k].expect("selected candidates have scores"),
            feedback: records[k].feedback.clone(),
            degraded: records.iter().any(|c| c.origin == CandidateOrigin::OfflineFallback),
        };
        manifest.lineage.push(entry);
        manifest.save(&manifest_path)?;
    }

    let last = manifest.lineage.last().expect("at least one iteration");
    manifest.final_iteration_best = Some(CandidateRef { iteration: last.iteration, index: last.best_index });
    // Elitism: report the best over every iteration (earliest on ties).
    let mut best = &manifest.lineage[0];
    for l in &manifest.lineage[1..] {
        if l.best_score > best.best_score {
            best = l;
        }
    }
    manifest.best = Some(CandidateRef { iteration: best.iteration, index: best.best_index });
    manifest.complete = true;
    std::fs::write(dir.path("report.md"), render_run_report(&manifest))?;
    manifest.save(&manifest_path)?;
    Ok(manifest)
}
