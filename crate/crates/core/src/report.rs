//! Tournament-evolution reports and cost summaries built from a run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::ModelChoice;
use crate::harness::ExecStatus;
use crate::llm::{cost_total, Cost, Gateway, LlmError, PriceTable, Purpose, TranscriptStore, UsageRecord};
use crate::metrics::{FeedbackKind, FeedbackType};
use crate::prompts::{PromptError, PromptSet};
use crate::tournament::{RoundRecord, DroppedJudge};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no tournament ledger under {0}")]
    MissingLedger(String),
    #[error("reading {path}: {message}")]
    Read { path: String, message: String },
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// Synthesis outcome stored next to the round ledgers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisSummary {
    pub task_id: Option<String>,
    pub feedback: FeedbackType,
    pub best_candidate_id: String,
    pub best_score: Option<f64>,
    pub evaluations_used: u32,
    pub cycles: u32,
    pub dropped_judges: Vec<DroppedJudge>,
}

pub const SUMMARY: &str = "summary.json";

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ReportError> {
    let err = |m: String| ReportError::Read { path: path.display().to_string(), message: m };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| err(e.to_string()))
}

/// Round ledgers under `tournament_dir`, ordered by round number.
pub fn load_ledgers(tournament_dir: &Path) -> Result<Vec<RoundRecord>, ReportError> {
    let missing = || ReportError::MissingLedger(tournament_dir.display().to_string());
    let entries = std::fs::read_dir(tournament_dir).map_err(|_| missing())?;
    let mut rounds: Vec<(u32, std::path::PathBuf)> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            let k = name.strip_prefix("round-")?.parse().ok()?;
            let ledger = e.path().join("ledger.json");
            ledger.exists().then_some((k, ledger))
        })
        .collect();
    if rounds.is_empty() {
        return Err(missing());
    }
    rounds.sort();
    rounds.iter().map(|(_, p)| read_json(p)).collect()
}

/// `77×` style factor: whole number from 10 upward, else one decimal without a trailing `.0`.
pub fn format_factor(ratio: f64) -> String {
    if !ratio.is_finite() {
        return "unbounded".into();
    }
    if ratio >= 10.0 {
        return format!("{}×", ratio.floor() as u64);
    }
    let s = format!("{ratio:.1}");
    format!("{}×", s.strip_suffix(".0").unwrap_or(&s))
}

/// Round-1 best over the overall best; `None` without numeric feedback.
pub fn improvement_factor(rounds: &[RoundRecord]) -> Option<f64> {
    let first = rounds.first()?.best.as_ref()?.1;
    let best = rounds.iter().filter_map(|r| r.best.as_ref().map(|b| b.1)).fold(f64::INFINITY, f64::min);
    Some(if best == 0.0 { f64::INFINITY } else { first / best })
}

fn sci(v: f64) -> String {
    format!("{v:.4e}")
}

fn first_line(text: &str) -> &str {
    text.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("")
}

fn status_cell(s: ExecStatus) -> &'static str {
    s.as_str()
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or("-".into(), |x| x.to_string())
}

/// Markdown report assembled only from the files of `run_dir`.
pub fn render_report(run_dir: &Path) -> Result<String, ReportError> {
    let tdir = run_dir.join("tournament");
    let rounds = load_ledgers(&tdir)?;
    let summary: Option<SynthesisSummary> =
        if tdir.join(SUMMARY).exists() { Some(read_json(&tdir.join(SUMMARY))?) } else { None };
    let numeric = match &summary {
        Some(s) => s.feedback.kind != FeedbackKind::None,
        None => rounds.iter().any(|r| r.best.is_some()),
    };
    let metric = summary.as_ref().and_then(|s| s.feedback.primary_metric()).unwrap_or("general.nrmse");
    let cycles = rounds.iter().map(|r| r.cycle).max().unwrap_or(1);
    let evaluations: usize = rounds.iter().map(|r| r.lanes.len()).sum();

    let mut out = String::new();
    out.push_str("# Solver evolution report\n\n## Executive summary\n\n");
    if let Some(task) = summary.as_ref().and_then(|s| s.task_id.as_deref()) {
        let _ = writeln!(out, "- Task: {task}");
    }
    let feedback = summary.as_ref().map_or(if numeric { "nrmse" } else { "none" }, |s| match s.feedback.kind {
        FeedbackKind::Nrmse => "nrmse",
        FeedbackKind::Residual => "residual",
        FeedbackKind::None => "none",
    });
    let _ = writeln!(out, "- Feedback: {feedback}");
    let _ = writeln!(out, "- Hybridization rounds: {} across {cycles} cycle(s)", rounds.len());
    let _ = writeln!(out, "- Candidate evaluations: {evaluations}");
    if let Some(s) = &summary {
        match (numeric, s.best_score) {
            (true, Some(v)) => {
                let _ = writeln!(out, "- Best candidate: {} ({metric} {})", s.best_candidate_id, sci(v));
            }
            _ => {
                let _ = writeln!(out, "- Best candidate: {} (senior judge lane)", s.best_candidate_id);
            }
        }
    }
    if numeric {
        if let (Some(ratio), Some(first)) = (improvement_factor(&rounds), rounds[0].best.as_ref()) {
            let best = rounds.iter().filter_map(|r| r.best.as_ref().map(|b| b.1)).fold(f64::INFINITY, f64::min);
            let _ = writeln!(
                out,
                "- Improvement factor: {} (round 1 best {} to final best {})",
                format_factor(ratio),
                sci(first.1),
                sci(best)
            );
        }
    } else {
        out.push_str("- Improvement factor: not applicable without accuracy feedback\n");
    }

    for r in &rounds {
        let _ = write!(out, "\n## Round {} (cycle {}, round {})\n\n", r.global_round, r.cycle, r.round);
        if !r.verdicts.is_empty() {
            out.push_str("Nominations:\n\n");
            for v in &r.verdicts {
                let _ = writeln!(
                    out,
                    "- {} nominated {} (confidence {:?}; shortlist {})",
                    v.judge_id,
                    v.nominee,
                    v.confidence,
                    v.shortlist.iter().map(|e| e.id.as_str()).collect::<Vec<_>>().join(", ")
                );
            }
            out.push('\n');
        }
        if numeric {
            out.push_str("| Judge | Candidate | Status | Metric | dt_max | Internal steps | Debug iterations |\n|---|---|---|---|---|---|---|\n");
        } else {
            out.push_str("| Judge | Candidate | Status | dt_max | Internal steps | Debug iterations |\n|---|---|---|---|---|---|\n");
        }
        for l in &r.lanes {
            let dt = opt(l.diagnostics.dt_max.map(|d| format!("{d:.2e}")));
            let steps = opt(l.diagnostics.internal_steps.or(l.diagnostics.total_internal_steps));
            if numeric {
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {} | {dt} | {steps} | {} |",
                    l.judge_id,
                    l.candidate_id,
                    status_cell(l.status),
                    opt(l.score.map(sci)),
                    l.debug_iterations_used
                );
            } else {
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {dt} | {steps} | {} |",
                    l.judge_id,
                    l.candidate_id,
                    status_cell(l.status),
                    l.debug_iterations_used
                );
            }
        }
        if numeric {
            if let Some((id, v)) = &r.best {
                let _ = write!(out, "\nBest of round: {id} ({})\n", sci(*v));
            }
        }
        if r.saturated {
            out.push_str("\nSaturation reached in this round.\n");
        }
        if !r.patches.is_empty() {
            out.push_str("\nModifications:\n\n");
            for p in &r.patches {
                let judge = p.proposal.as_ref().map_or("-", |x| x.judge_id.as_str());
                let base = p.proposal.as_ref().map_or("-", |x| x.base_candidate_id.as_str());
                if p.applied {
                    let why = p.proposal.as_ref().map_or("", |x| first_line(&x.justification));
                    let _ = writeln!(
                        out,
                        "- {judge}: {base} -> {} (+{} / -{} lines): {why}",
                        p.next_candidate_id, p.lines_added, p.lines_removed
                    );
                } else {
                    let _ = writeln!(
                        out,
                        "- {judge}: patch not applied, {} carried forward ({})",
                        p.next_candidate_id,
                        p.error.as_deref().unwrap_or("no diff")
                    );
                }
            }
        }
    }

    out.push_str("\n## Comparative results\n\n");
    if numeric {
        let first = rounds[0].best.as_ref().map(|b| b.1);
        out.push_str("| Round | Cycle | Best candidate | Best value | Relative to round 1 |\n|---|---|---|---|---|\n");
        for r in &rounds {
            let (id, value, rel) = match (&r.best, first) {
                (Some((id, v)), Some(f)) if *v > 0.0 => (id.as_str(), sci(*v), format!("{:.3}", v / f)),
                (Some((id, v)), _) => (id.as_str(), sci(*v), "-".into()),
                (None, _) => ("-", "-".into(), "-".into()),
            };
            let _ = writeln!(out, "| {} | {} | {id} | {value} | {rel} |", r.global_round, r.cycle);
        }
    } else {
        out.push_str("| Round | Cycle | Candidates | Statuses |\n|---|---|---|---|\n");
        for r in &rounds {
            let ids: Vec<&str> = r.lanes.iter().map(|l| l.candidate_id.as_str()).collect();
            let st: Vec<&str> = r.lanes.iter().map(|l| l.status.as_str()).collect();
            let _ = writeln!(out, "| {} | {} | {} | {} |", r.global_round, r.cycle, ids.join(", "), st.join(", "));
        }
    }

    out.push_str("\n## Key findings\n\n");
    let failures: usize = rounds.iter().flat_map(|r| &r.lanes).filter(|l| l.status != ExecStatus::Ok).count();
    let debug: u32 = rounds.iter().flat_map(|r| &r.lanes).map(|l| l.debug_iterations_used).sum();
    let applied = rounds.iter().flat_map(|r| &r.patches).filter(|p| p.applied).count();
    let proposed = rounds.iter().flat_map(|r| &r.patches).count();
    if numeric && rounds.len() > 1 {
        let mut best_step: Option<(u32, f64)> = None;
        for w in rounds.windows(2) {
            if let (Some(a), Some(b)) = (&w[0].best, &w[1].best) {
                let change = a.1 - b.1;
                if best_step.is_none_or(|(_, c)| change > c) {
                    best_step = Some((w[1].global_round, change));
                }
            }
        }
        if let Some((k, c)) = best_step {
            let _ = writeln!(out, "- Largest best-of-round reduction: round {k} ({})", sci(c));
        }
    }
    let _ = writeln!(out, "- Patches applied: {applied} of {proposed}");
    let _ = writeln!(out, "- Executions that ended without a valid solution: {failures}");
    let _ = writeln!(out, "- Debug iterations spent: {debug}");
    if let Some(s) = &summary {
        for d in &s.dropped_judges {
            let _ = writeln!(out, "- Judge {} dropped in cycle {}: {}", d.judge_id, d.cycle, d.reason);
        }
    }
    Ok(out)
}

/// Writes `report.md`; with a model, a clearly marked narrative is appended.
pub fn write_report(
    run_dir: &Path,
    narrative: Option<(&mut Gateway, &PromptSet, &ModelChoice)>,
) -> Result<String, ReportError> {
    let mut text = render_report(run_dir)?;
    if let Some((gateway, prompts, model)) = narrative {
        let prompt = prompts.render("reporter", &[("report", &text)])?;
        let mut conv = model.conversation().system(prompts.get("system")?).user(prompt);
        let reply = gateway.exchange(&mut conv, Purpose::Report)?;
        let _ = write!(text, "\n## Narrative (model-written, not derived from the ledger)\n\n{}\n", reply.trim());
    }
    let path = run_dir.join("report.md");
    std::fs::write(&path, &text).map_err(|e| ReportError::Read { path: path.display().to_string(), message: e.to_string() })?;
    Ok(text)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryCost {
    pub calls: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub cost: Cost,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub categories: BTreeMap<String, CategoryCost>,
    /// Sum of the category rows.
    pub total: CategoryCost,
}

/// Prices every usage record, grouped by purpose category.
pub fn summarize_costs(ledger: &[UsageRecord], prices: &PriceTable) -> Result<CostSummary, LlmError> {
    let mut groups: BTreeMap<&str, Vec<UsageRecord>> = BTreeMap::new();
    for c in ["analysis", "genesis", "judge", "debug"] {
        groups.insert(c, Vec::new());
    }
    for r in ledger {
        groups.entry(r.purpose.category()).or_default().push(r.clone());
    }
    let mut out = CostSummary::default();
    for (cat, records) in groups {
        let cost = cost_total(&records, prices)?;
        let row = CategoryCost {
            calls: records.len() as u64,
            input_tokens: records.iter().map(|r| r.input_tokens).sum(),
            output_tokens: records.iter().map(|r| r.output_tokens).sum(),
            cost,
        };
        out.total.calls += row.calls;
        out.total.input_tokens += row.input_tokens;
        out.total.output_tokens += row.output_tokens;
        out.total.cost.input_cost += row.cost.input_cost;
        out.total.cost.output_cost += row.cost.output_cost;
        out.total.cost.total += row.cost.total;
        out.categories.insert(cat.to_string(), row);
    }
    Ok(out)
}

/// Usage records of every transcript in `run_dir/transcripts`; none when absent.
pub fn run_usage(run_dir: &Path) -> Result<Vec<UsageRecord>, LlmError> {
    let dir = run_dir.join("transcripts");
    if !dir.exists() {
        return Ok(Vec::new());
    }
    Ok(TranscriptStore::open(&dir)?
        .entries()?
        .into_iter()
        .map(|e| UsageRecord {
            input_tokens: e.usage.input_tokens,
            output_tokens: e.usage.output_tokens,
            model_id: e.request.model.clone(),
            purpose: e.purpose,
        })
        .collect())
}

pub fn cost_summary(run_dir: &Path, prices: &PriceTable) -> Result<CostSummary, LlmError> {
    summarize_costs(&run_usage(run_dir)?, prices)
}
