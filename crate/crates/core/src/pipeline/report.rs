use std::fmt::Write;

use super::{CandidateStatus, RunManifest};
use crate::envstats::stats_summary_text;
use crate::metrics::EpisodeMetrics;

pub type MetricColumn = (&'static str, fn(&EpisodeMetrics) -> f64);

/// Rows of the comparison tables: label and accessor.
pub const TABLE_METRICS: [MetricColumn; 4] = [
    ("Velocity tracking (m/s)", |m| m.velocity_tracking_error),
    ("Exploration score", |m| m.exploration_score),
    ("Torso contact rate", |m| m.torso_contact_rate),
    ("Locomotion quality", |m| m.locomotion_quality),
];

pub fn render_run_report(m: &RunManifest) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Run report\n");
    let _ = writeln!(
        s,
        "Terrain `{}` ({}), mode {:?}, seed {}, {} iterations x {} candidates.\n",
        m.terrain_file.as_deref().unwrap_or("<generated>"),
        m.terrain_kind,
        m.env.mode,
        m.seed,
        m.i_max,
        m.n_candidates
    );
    let _ = writeln!(s, "## Terrain statistics\n\n```\n{}```\n", stats_summary_text(&m.stats));
    let _ = writeln!(s, "## Candidates\n");
    let _ = writeln!(s, "| id | origin | J | tracking | exploration | torso contacts | quality | stationary | feedback |");
    let _ = writeln!(s, "|---|---|---|---|---|---|---|---|---|");
    for c in &m.candidates {
        let j = c.score.map(|j| format!("{j:.3}")).unwrap_or_else(|| "failed".into());
        let cols = match &c.metrics {
            Some(x) => format!(
                "{:.3} | {:.3} | {:.3} | {:.3} | {:.3}",
                x.velocity_tracking_error,
                x.exploration_score,
                x.torso_contact_rate,
                x.locomotion_quality,
                x.stationary_fraction
            ),
            None => "- | - | - | - | -".into(),
        };
        let status = if c.status == CandidateStatus::Failed { " (failed)" } else { "" };
        let _ = writeln!(s, "| {}{status} | {:?} | {j} | {cols} | {} |", c.id(), c.origin, c.feedback);
    }
    let _ = writeln!(s, "\n## Lineage\n");
    for l in &m.lineage {
        let degraded = if l.degraded { " (degraded: offline fallback used)" } else { "" };
        let _ = writeln!(s, "- iteration {}: k* = {}, J = {:.3}, feedback: {}{degraded}", l.iteration, l.best_index, l.best_score, l.feedback);
    }
    if let (Some(fin), Some(best)) = (m.final_iteration_best, m.best) {
        let _ = writeln!(s, "\nLast iteration's best: {}_{}.", fin.iteration, fin.index);
        let _ = writeln!(s, "Best over all iterations: {}_{}.", best.iteration, best.index);
        if let Some(r) = m.record(best) {
            let _ = writeln!(s, "\n```rdsl\n{}```", r.reward);
        }
    }
    s
}
