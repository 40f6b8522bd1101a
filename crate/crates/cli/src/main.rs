mod plot;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use esds_core::envstats::{analyze, load_stats, save_stats, FleetConfig, StatThresholds, TerrainStats};
use esds_core::metrics::write_metrics_csv;
use esds_core::pipeline::{
    evaluate_policy, run_ablation, run_pipeline, score_policy, AblationConfig, AblationMode, EvalConfig, PipelineInputs,
    RunOptions, MANUAL_BASELINE_RDSL,
};
use esds_core::ppo::{checkpoint, train_with, PPOConfig};
use esds_core::reward_dsl::RewardProgram;
use esds_core::sensors::ObservationMode;
use esds_core::sim::EnvConfig;
use esds_core::synthesis::{combine_prompts, synthesize, AuditLog, OfflineConfig, RemoteConfig, SkillSpec, SynthesisBackend};
use esds_core::terrain::{generate_terrain, TerrainKind, TerrainMap, TerrainParams};

#[derive(Parser)]
#[command(name = "esds", version, about = "Terrain-aware reward synthesis for legged locomotion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full synthesize → train → evaluate → refine loop.
    Run(RunArgs),
    /// Generate a terrain map and write it as JSON.
    GenTerrain(GenTerrainArgs),
    /// Measure terrain statistics with a standing robot fleet.
    AnalyzeEnv(AnalyzeArgs),
    /// Write a prompt and candidate reward programs.
    Synthesize(SynthesizeArgs),
    /// Train one policy on a reward program.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Evaluate(EvaluateArgs),
    /// Terrain × mode × seed comparison.
    Ablation(AblationArgs),
    /// Render an SVG chart from a CSV file.
    Plot(PlotArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Offline,
    Remote,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Perceptive,
    Blind,
}

impl From<Mode> for ObservationMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Perceptive => ObservationMode::Perceptive,
            Mode::Blind => ObservationMode::Blind,
        }
    }
}

#[derive(Args, Clone)]
struct TrainingOpts {
    /// PPO iterations per candidate.
    #[arg(long, default_value_t = 200)]
    ppo_iterations: usize,
    /// Parallel environments.
    #[arg(long, default_value_t = 64)]
    envs: usize,
    /// Steps per environment per rollout.
    #[arg(long, default_value_t = 64)]
    steps: usize,
    #[arg(long, value_enum, default_value_t = Mode::Perceptive)]
    mode: Mode,
    /// Evaluation episodes.
    #[arg(long, default_value_t = 16)]
    episodes: usize,
    /// Robots in the statistics fleet.
    #[arg(long, default_value_t = 100)]
    robots: usize,
}

impl TrainingOpts {
    fn ppo(&self) -> PPOConfig {
        PPOConfig { iterations: self.ppo_iterations, num_envs: self.envs, steps_per_rollout: self.steps, ..PPOConfig::default() }
    }

    fn env(&self) -> EnvConfig {
        EnvConfig { mode: self.mode.into(), ..EnvConfig::default() }
    }

    fn eval(&self) -> EvalConfig {
        EvalConfig { episodes: self.episodes, ..EvalConfig::default() }
    }

    fn fleet(&self) -> FleetConfig {
        FleetConfig { num_robots: self.robots, ..FleetConfig::default() }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    terrain: PathBuf,
    /// Skill specification JSON; a built-in walking skill is used if omitted.
    #[arg(long)]
    skill: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Backend::Offline)]
    backend: Backend,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Refinement iterations.
    #[arg(long, default_value_t = 3)]
    iterations: usize,
    /// Candidates per iteration.
    #[arg(long, default_value_t = 2)]
    candidates: usize,
    /// Continue an interrupted run in the same directory.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    training: TrainingOpts,
}

#[derive(Args)]
struct GenTerrainArgs {
    #[arg(long)]
    kind: TerrainKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// JSON file with terrain parameters; unspecified fields keep defaults.
    #[arg(long)]
    params: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    terrain: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    robots: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthesizeArgs {
    /// Statistics file from `analyze-env`.
    #[arg(long)]
    stats: PathBuf,
    #[arg(long)]
    skill: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Backend::Offline)]
    backend: Backend,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    candidates: usize,
    #[arg(long, value_enum, default_value_t = Mode::Perceptive)]
    mode: Mode,
    /// Previous best program to refine.
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Feedback for the prior program.
    #[arg(long, default_value = "")]
    feedback: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    terrain: PathBuf,
    #[arg(long)]
    reward: PathBuf,
    /// Statistics file; measured from the terrain if omitted.
    #[arg(long)]
    stats: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    training: TrainingOpts,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    terrain: PathBuf,
    #[arg(long)]
    reward: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    stats: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    episodes: usize,
    #[arg(long, value_enum, default_value_t = Mode::Perceptive)]
    mode: Mode,
    /// Per-episode metrics CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblationArgs {
    /// Terrain JSON files; the file stem names each terrain.
    #[arg(long, num_args = 1.., required = true)]
    terrains: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "perceptive,blind,manual_baseline")]
    modes: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Manual baseline reward; the shipped 13-term program if omitted.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    skill: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    iterations: usize,
    #[arg(long, default_value_t = 2)]
    candidates: usize,
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    training: TrainingOpts,
}

#[derive(Args)]
struct PlotArgs {
    #[command(subcommand)]
    kind: plot::PlotKind,
}

fn load_terrain(path: &Path) -> Result<Arc<TerrainMap>> {
    Ok(Arc::new(TerrainMap::load(path).with_context(|| format!("loading terrain {}", path.display()))?))
}

fn load_skill(path: Option<&Path>) -> Result<SkillSpec> {
    match path {
        Some(p) => Ok(SkillSpec::load(p).with_context(|| format!("loading skill {}", p.display()))?),
        None => Ok(SkillSpec::default()),
    }
}

fn load_program(path: &Path) -> Result<RewardProgram> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    RewardProgram::parse(&text).with_context(|| format!("parsing {}", path.display()))
}

fn backend(b: Backend) -> Result<SynthesisBackend> {
    Ok(match b {
        Backend::Offline => SynthesisBackend::Offline(OfflineConfig::default()),
        Backend::Remote => SynthesisBackend::Remote(RemoteConfig::from_env()?),
    })
}

fn stats_for(map: &TerrainMap, path: Option<&Path>, env: &EnvConfig, fleet: &FleetConfig, seed: u64) -> Result<TerrainStats> {
    let stats = match path {
        Some(p) => load_stats(p)?.stats,
        None => analyze(map, fleet, &env.sensors, &env.walker, &StatThresholds::default(), seed)?,
    };
    Ok(match env.mode {
        ObservationMode::Perceptive => stats,
        ObservationMode::Blind => stats.zeroed(),
    })
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let map = load_terrain(&a.terrain)?;
    let inputs = PipelineInputs {
        terrain_file: Some(a.terrain.display().to_string()),
        skill: load_skill(a.skill.as_deref())?,
        backend: backend(a.backend)?,
        env: a.training.env(),
        ppo: a.training.ppo(),
        fleet: a.training.fleet(),
        eval: a.training.eval(),
        i_max: a.iterations,
        n_candidates: a.candidates,
        ..PipelineInputs::new(map, a.seed)
    };
    let opts = RunOptions { resume: a.resume, stop_after: None, verbose: true };
    let manifest = run_pipeline(&inputs, &a.out, &opts)?;
    if let Some(best) = manifest.best_record() {
        println!("best candidate {} with J = {:.3} ({})", best.id(), best.score.unwrap_or(f64::NAN), best.feedback);
    }
    println!("wrote {}", a.out.join("manifest.json").display());
    Ok(())
}

fn cmd_gen_terrain(a: GenTerrainArgs) -> Result<()> {
    let params: TerrainParams = match &a.params {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => TerrainParams::default(),
    };
    let map = generate_terrain(a.kind, &params, a.seed)?;
    map.save(&a.out)?;
    let (w, h) = map.dims();
    println!("{} terrain {}x{} cells, gap fraction {:.3} -> {}", a.kind, w, h, map.gap_fraction(), a.out.display());
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<()> {
    let map = load_terrain(&a.terrain)?;
    let env = EnvConfig::default();
    let fleet = FleetConfig { num_robots: a.robots, ..FleetConfig::default() };
    let thresholds = StatThresholds::default();
    let stats = analyze(&map, &fleet, &env.sensors, &env.walker, &thresholds, a.seed)?;
    save_stats(&a.out, &stats, &thresholds)?;
    print!("{}", esds_core::envstats::stats_summary_text(&stats));
    Ok(())
}

fn cmd_synthesize(a: SynthesizeArgs) -> Result<()> {
    let mut stats = load_stats(&a.stats)?.stats;
    let mode: ObservationMode = a.mode.into();
    if mode == ObservationMode::Blind {
        stats = stats.zeroed();
    }
    let env = EnvConfig { mode, ..EnvConfig::default() };
    let skill = load_skill(a.skill.as_deref())?;
    let prior = a.prior.as_deref().map(load_program).transpose()?;
    let bundle = combine_prompts(&skill, &stats, &env.feature_schema(), prior.as_ref().map(|p| (p, a.feedback.as_str())));
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("prompt.txt"), format!("{}\n\n{}", bundle.system_text, bundle.user_text))?;
    let audit = AuditLog::new(a.out.join("audit"), "synth");
    let result = synthesize(&bundle, &backend(a.backend)?, a.candidates, a.seed, Some(&audit))?;
    for (k, c) in result.candidates.iter().enumerate() {
        let path = a.out.join(format!("candidate_{k}.rdsl"));
        std::fs::write(&path, c.program.to_source())?;
        println!("{} ({:?}, {} terms)", path.display(), c.origin, c.program.terms.len());
    }
    if result.degraded() {
        eprintln!("warning: some candidates fell back to the offline synthesizer");
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let map = load_terrain(&a.terrain)?;
    let program = load_program(&a.reward)?;
    let env = a.training.env();
    let stats = stats_for(&map, a.stats.as_deref(), &env, &a.training.fleet(), a.seed)?;
    let ppo = a.training.ppo();
    let every = (ppo.iterations / 20).max(1);
    let (params, log) = train_with(&program, map, &env, &stats, &ppo, a.seed, &mut |l| {
        if l.iteration % every == 0 || l.iteration == 1 {
            eprintln!("iteration {:4}  mean return {:9.3}  entropy {:7.3}  {:6.1}s", l.iteration, l.mean_return, l.entropy, l.seconds);
        }
    })?;
    std::fs::create_dir_all(&a.out)?;
    checkpoint::save(a.out.join("policy.ckpt"), &params)?;
    log.save_csv(a.out.join("train.csv"))?;
    println!("wrote {} and {}", a.out.join("policy.ckpt").display(), a.out.join("train.csv").display());
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let map = load_terrain(&a.terrain)?;
    let program = load_program(&a.reward)?;
    let params = checkpoint::load(&a.checkpoint)?;
    let env = EnvConfig { mode: a.mode.into(), ..EnvConfig::default() };
    let stats = stats_for(&map, a.stats.as_deref(), &env, &FleetConfig::default(), a.seed)?;
    let cfg = EvalConfig { episodes: a.episodes, ..EvalConfig::default() };
    let ev = evaluate_policy(&params, &program, map, &env, &stats, &cfg, a.seed)?;
    write_metrics_csv(&a.out, &ev.rows, &ev.aggregate)?;
    let m = &ev.aggregate;
    println!(
        "tracking {:.3}  exploration {:.3}  torso contacts {:.3}  quality {:.3}  stationary {:.3}  J {:.3}",
        m.velocity_tracking_error,
        m.exploration_score,
        m.torso_contact_rate,
        m.locomotion_quality,
        m.stationary_fraction,
        score_policy(m)
    );
    println!("feedback: {}", ev.feedback);
    Ok(())
}

fn cmd_ablation(a: AblationArgs) -> Result<()> {
    let mut terrains = Vec::new();
    for p in &a.terrains {
        let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or("terrain").to_string();
        terrains.push((name, load_terrain(p)?));
    }
    let mut modes = Vec::new();
    for m in &a.modes {
        match AblationMode::from_name(m.trim()) {
            Some(m) => modes.push(m),
            None => bail!("unknown mode `{m}` (expected perceptive, blind or manual_baseline)"),
        }
    }
    let baseline = match &a.baseline {
        Some(p) => load_program(p)?,
        None => RewardProgram::parse(MANUAL_BASELINE_RDSL)?,
    };
    let first = terrains[0].1.clone();
    let template = PipelineInputs {
        skill: load_skill(a.skill.as_deref())?,
        env: a.training.env(),
        ppo: a.training.ppo(),
        fleet: a.training.fleet(),
        eval: a.training.eval(),
        i_max: a.iterations,
        n_candidates: a.candidates,
        ..PipelineInputs::new(first, 0)
    };
    let cfg = AblationConfig { terrains, modes, seeds: a.seeds.clone(), template, baseline };
    let report = run_ablation(&cfg, &a.out, &RunOptions { resume: a.resume, stop_after: None, verbose: true })?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(a) => cmd_run(a),
        Command::GenTerrain(a) => cmd_gen_terrain(a),
        Command::AnalyzeEnv(a) => cmd_analyze(a),
        Command::Synthesize(a) => cmd_synthesize(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Ablation(a) => cmd_ablation(a),
        Command::Plot(a) => plot::run(a.kind),
    }
}
