//! Reward generation: prompt assembly, a chat-completion client and a
//! deterministic offline synthesizer sharing one candidate interface.

mod offline;
mod remote;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envstats::{stats_summary_text, TerrainStats};
use crate::reward_dsl::{grammar_text, parse, validate, FeatureSchema, RewardProgram};
use crate::{Error, Result};

pub use offline::{base_program, mutate, OfflineConfig, TemplateFamily};
pub use remote::{chat_request_body, extract_content, RemoteConfig, MAX_REPAIRS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SkillSource {
    #[default]
    ManualFile,
}

/// Description of the desired behaviour, read from a JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillSpec {
    pub task_text: String,
    /// m/s
    pub target_speed: f64,
    #[serde(default)]
    pub posture_notes: String,
    #[serde(default)]
    pub gait_notes: String,
    #[serde(default)]
    pub source: SkillSource,
}

impl Default for SkillSpec {
    fn default() -> Self {
        SkillSpec {
            task_text: "walk forward while tracking the commanded planar velocity and yaw rate".into(),
            target_speed: 0.5,
            posture_notes: "keep the torso level at its nominal standing height".into(),
            gait_notes: "alternate the feet; avoid dragging or stomping".into(),
            source: SkillSource::ManualFile,
        }
    }
}

impl SkillSpec {
    pub fn validate(&self) -> Result<()> {
        if self.task_text.trim().is_empty() {
            return Err(Error::InvalidParams("skill task_text is empty".into()));
        }
        if !(self.target_speed >= 0.0 && self.target_speed.is_finite()) {
            return Err(Error::InvalidParams("skill target_speed must be a non-negative number".into()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let spec: SkillSpec = serde_json::from_str(&text)
            .map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })?;
        spec.validate()?;
        Ok(spec)
    }

    fn render(&self) -> String {
        let mut s = format!("{}\ntarget_speed: {:.3} m/s\n", self.task_text.trim(), self.target_speed);
        if !self.posture_notes.trim().is_empty() {
            s.push_str(&format!("posture: {}\n", self.posture_notes.trim()));
        }
        if !self.gait_notes.trim().is_empty() {
            s.push_str(&format!("gait: {}\n", self.gait_notes.trim()));
        }
        s
    }
}

/// A rendered prompt plus the structured inputs it was rendered from, so
/// the offline backend never has to re-parse text.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
    pub skill: SkillSpec,
    pub stats: TerrainStats,
    pub schema: FeatureSchema,
    pub prior: Option<(RewardProgram, String)>,
}

impl PromptBundle {
    /// Headings of the `## ` sections of the user text, in order.
    pub fn sections(&self) -> Vec<&str> {
        self.user_text.lines().filter_map(|l| l.strip_prefix("## ")).collect()
    }
}

const SYSTEM_TEXT: &str = "You write reward functions for a reinforcement-learning locomotion \
policy. Programs are written in a small reward language; any other syntax is rejected. \
Reply with exactly one fenced code block tagged rdsl containing the whole program.";

/// Renders the prompt. Sections always appear in the same order; the refine
/// section exists only when a prior program is given.
pub fn combine_prompts(
    skill: &SkillSpec,
    stats: &TerrainStats,
    schema: &FeatureSchema,
    prior: Option<(&RewardProgram, &str)>,
) -> PromptBundle {
    let mut u = String::new();
    u.push_str("## Task\n");
    u.push_str(&skill.render());
    u.push_str("Write a reward program for this skill on the terrain described below.\n");
    u.push_str("Answer with a single ```rdsl fenced block and nothing else of substance.\n\n");
    u.push_str("## Terrain statistics\n");
    u.push_str(&stats_summary_text(stats));
    u.push('\n');
    u.push_str("## Reward language\n");
    u.push_str(&grammar_text());
    u.push('\n');
    u.push_str("## Features\n");
    u.push_str(&schema.describe());
    if let Some((prog, feedback)) = prior {
        u.push_str("\n## Refine\n");
        u.push_str("Best program of the previous iteration:\n```rdsl\n");
        u.push_str(&prog.source_text);
        if !prog.source_text.ends_with('\n') {
            u.push('\n');
        }
        u.push_str("```\n");
        u.push_str(&format!("Evaluation feedback: {}\n", feedback.trim()));
        u.push_str("Revise the program to address the feedback.\n");
    }
    PromptBundle {
        system_text: SYSTEM_TEXT.to_string(),
        user_text: u,
        skill: skill.clone(),
        stats: stats.clone(),
        schema: schema.clone(),
        prior: prior.map(|(p, f)| (p.clone(), f.to_string())),
    }
}

/// Pulls the program out of a model reply: the first fenced block if there is
/// one, else the whole text. The raw reply is kept as the program's source.
pub fn parse_response(raw: &str, schema: &FeatureSchema) -> Result<RewardProgram> {
    let body = first_fenced_block(raw).unwrap_or(raw);
    if body.trim().is_empty() {
        return Err(Error::NoProgramFound);
    }
    let mut prog = parse(body)?;
    if prog.terms.is_empty() {
        return Err(Error::NoProgramFound);
    }
    validate(&prog, schema)?;
    prog.source_text = body.to_string();
    Ok(prog)
}

fn first_fenced_block(text: &str) -> Option<&str> {
    let start = text.find("```")?;
    let after = &text[start + 3..];
    // Skip the info string (e.g. `rdsl`) up to the end of the fence line.
    let body_start = after.find('\n').map(|i| i + 1).unwrap_or(after.len());
    let body = &after[body_start..];
    let end = body.find("```").unwrap_or(body.len());
    Some(&body[..end])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SynthesisBackend {
    Remote(RemoteConfig),
    Offline(OfflineConfig),
}

impl Default for SynthesisBackend {
    fn default() -> Self {
        SynthesisBackend::Offline(OfflineConfig::default())
    }
}

impl SynthesisBackend {
    pub fn validate(&self) -> Result<()> {
        match self {
            SynthesisBackend::Remote(r) => r.validate(),
            SynthesisBackend::Offline(o) => o.validate(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateOrigin {
    Remote,
    Offline,
    /// Remote generation failed and the offline candidate took its slot.
    OfflineFallback,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub program: RewardProgram,
    pub origin: CandidateOrigin,
    /// Remote attempts spent on this candidate, including repairs.
    pub attempts: usize,
    /// Errors that led to repairs or fallback.
    pub errors: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthesis {
    pub candidates: Vec<Candidate>,
}

impl Synthesis {
    pub fn programs(&self) -> Vec<RewardProgram> {
        self.candidates.iter().map(|c| c.program.clone()).collect()
    }

    /// True when at least one remote candidate fell back to offline.
    pub fn degraded(&self) -> bool {
        self.candidates.iter().any(|c| c.origin == CandidateOrigin::OfflineFallback)
    }
}

/// Where remote requests and responses are written, and the file-name stem
/// for this synthesis call (e.g. `0` for iteration 0).
#[derive(Clone, Debug)]
pub struct AuditLog {
    pub dir: PathBuf,
    pub stem: String,
}

impl AuditLog {
    pub fn new(dir: impl Into<PathBuf>, stem: impl Into<String>) -> Self {
        AuditLog { dir: dir.into(), stem: stem.into() }
    }

    fn write(&self, candidate: usize, attempt: usize, suffix: &str, body: &str) -> Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        let name = format!("{}_{candidate}_attempt{attempt}.{suffix}", self.stem);
        std::fs::write(self.dir.join(name), body)?;
        Ok(())
    }
}

/// Produces `n` candidates. Every returned program validates against the
/// bundle's schema. A remote candidate that stays unparseable after
/// [`MAX_REPAIRS`] repairs, or whose endpoint cannot be reached, is replaced
/// by the offline candidate with the same index.
pub fn synthesize(
    bundle: &PromptBundle,
    backend: &SynthesisBackend,
    n: usize,
    seed: u64,
    audit: Option<&AuditLog>,
) -> Result<Synthesis> {
    if n == 0 {
        return Err(Error::InvalidParams("at least one candidate is required".into()));
    }
    backend.validate()?;
    let offline_cfg = match backend {
        SynthesisBackend::Offline(cfg) => cfg.clone(),
        SynthesisBackend::Remote(_) => OfflineConfig::default(),
    };
    let offline = offline::generate(bundle, &offline_cfg, n, seed)?;
    let candidates = match backend {
        SynthesisBackend::Offline(_) => offline
            .into_iter()
            .map(|program| Candidate { program, origin: CandidateOrigin::Offline, attempts: 0, errors: vec![] })
            .collect(),
        SynthesisBackend::Remote(cfg) => {
            let client = remote::Client::new(cfg)?;
            let mut out = Vec::with_capacity(n);
            for (k, fallback) in offline.into_iter().enumerate() {
                out.push(remote_candidate(&client, bundle, k, audit, fallback)?);
            }
            out
        }
    };
    for c in &candidates {
        validate(&c.program, &bundle.schema)?;
    }
    Ok(Synthesis { candidates })
}

fn remote_candidate(
    client: &remote::Client,
    bundle: &PromptBundle,
    k: usize,
    audit: Option<&AuditLog>,
    fallback: RewardProgram,
) -> Result<Candidate> {
    let mut messages = vec![
        ("system".to_string(), bundle.system_text.clone()),
        ("user".to_string(), bundle.user_text.clone()),
    ];
    let mut errors = Vec::new();
    for attempt in 0..=MAX_REPAIRS {
        let body = client.request_body(&messages);
        if let Some(a) = audit {
            a.write(k, attempt, "request.json", &serde_json::to_string_pretty(&body)?)?;
        }
        let reply = match client.send(&body) {
            Ok(r) => r,
            Err(e) => {
                if let Some(a) = audit {
                    a.write(k, attempt, "error.txt", &e.to_string())?;
                }
                errors.push(e.to_string());
                break;
            }
        };
        if let Some(a) = audit {
            a.write(k, attempt, "response.json", &reply.raw)?;
        }
        let parsed = reply.content.as_deref().ok_or(Error::NoProgramFound).and_then(|c| parse_response(c, &bundle.schema));
        match parsed {
            Ok(program) => {
                return Ok(Candidate { program, origin: CandidateOrigin::Remote, attempts: attempt + 1, errors })
            }
            Err(e) => {
                let msg = e.to_string();
                errors.push(msg.clone());
                messages.push(("assistant".into(), reply.content.unwrap_or_default()));
                messages.push((
                    "user".into(),
                    format!("That reply could not be used: {msg}\nReturn the corrected program as one ```rdsl block."),
                ));
            }
        }
    }
    let attempts = errors.len();
    Ok(Candidate { program: fallback, origin: CandidateOrigin::OfflineFallback, attempts, errors })
}
