//! Stage 3: judge tournaments with diff/patch hybridization rounds.
//!
//! Judges shortlist half of the pool and nominate one candidate each. Every round the
//! lanes' current solvers are executed, all results are broadcast to every judge and each
//! judge patches its own lane. A cycle ends on saturation or after its round cap; further
//! cycles start from fresh conversations over the expanded pool.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{fenced_blocks, ModelChoice};
use crate::genesis::{Origin, SolverCandidate};
use crate::harness::{Diagnostics, ExecStatus, HarnessError};
use crate::llm::{Conversation, Gateway, LlmError, Purpose, Role};
use crate::metrics::{FeedbackKind, FeedbackRecord, FeedbackType};
use crate::patch::{apply_patch, diff_stats};
use crate::prompts::{PromptError, PromptSet};

#[derive(Debug, Error)]
pub enum TournamentError {
    #[error("pool size must be even and at least 2, got {0}")]
    PoolSize(usize),
    #[error("invalid tournament config: {0}")]
    Config(String),
    #[error("cycle {cycle}: only {usable} usable judge verdicts, at least 2 needed")]
    TooFewJudges { cycle: u32, usable: usize },
    #[error("halted after round {0} on request")]
    Halted(u32),
    #[error("tournament state: {0}")]
    State(String),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TournamentConfig {
    pub judges: Vec<ModelChoice>,
    pub max_rounds_per_cycle: u32,
    pub max_cycles: u32,
    pub feedback: FeedbackType,
    pub saturation_rel_threshold: f64,
    pub saturation_window: u32,
}

impl Default for TournamentConfig {
    fn default() -> Self {
        TournamentConfig {
            judges: vec![ModelChoice::new("judge"); 3],
            max_rounds_per_cycle: 4,
            max_cycles: 2,
            feedback: FeedbackType::new(FeedbackKind::Nrmse),
            saturation_rel_threshold: 0.01,
            saturation_window: 2,
        }
    }
}

impl TournamentConfig {
    pub fn validate(&self) -> Result<(), TournamentError> {
        let bad = |m: &str| Err(TournamentError::Config(m.into()));
        if self.judges.len() < 2 {
            return bad("at least two judges are required");
        }
        if self.max_rounds_per_cycle == 0 || self.max_cycles == 0 {
            return bad("rounds per cycle and cycles must be positive");
        }
        if !(self.saturation_rel_threshold >= 0.0) || self.saturation_window == 0 {
            return bad("saturation threshold must be >= 0 and window positive");
        }
        Ok(())
    }
}

/// Parses a round schedule such as `3`, `4` or `4+4` into (rounds per cycle, cycles).
pub fn parse_rounds(text: &str) -> Result<(u32, u32), TournamentError> {
    let parts: Vec<u32> = text
        .split('+')
        .map(|p| p.trim().parse::<u32>().map_err(|_| TournamentError::Config(format!("bad round schedule '{text}'"))))
        .collect::<Result<_, _>>()?;
    let first = parts[0];
    if first == 0 || parts.iter().any(|&p| p != first) {
        return Err(TournamentError::Config(format!("round schedule '{text}' must repeat one positive count")));
    }
    Ok((first, parts.len() as u32))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Confidence {
    High,
    Medium,
    Low,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShortlistEntry {
    pub id: String,
    #[serde(default)]
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub judge_id: String,
    pub shortlist: Vec<ShortlistEntry>,
    pub nominee: String,
    pub confidence: Confidence,
    pub risks: Vec<String>,
    /// The judge's full reply.
    pub reasoning: String,
}

#[derive(Deserialize)]
struct VerdictBlock {
    shortlist: Vec<ShortlistEntry>,
    nominee: String,
    confidence: String,
    #[serde(default)]
    risks: Vec<String>,
}

/// Parses and checks the last ```verdict block of a judge reply.
pub fn parse_judge_verdict(
    judge_id: &str,
    text: &str,
    pool_ids: &BTreeSet<String>,
    shortlist_size: usize,
) -> Result<JudgeVerdict, String> {
    let blocks = fenced_blocks(text);
    let (_, body) = blocks.iter().rev().find(|(tag, _)| tag == "verdict").ok_or("no ```verdict block found")?;
    let raw: VerdictBlock = serde_json::from_str(body).map_err(|e| format!("verdict block is not valid JSON: {e}"))?;
    let confidence = match raw.confidence.trim().to_ascii_lowercase().as_str() {
        "high" => Confidence::High,
        "medium" => Confidence::Medium,
        "low" => Confidence::Low,
        other => return Err(format!("confidence '{other}' is not high, medium or low")),
    };
    if raw.shortlist.len() != shortlist_size {
        return Err(format!("shortlist has {} entries, expected {shortlist_size}", raw.shortlist.len()));
    }
    let mut seen = BTreeSet::new();
    for e in &raw.shortlist {
        if !pool_ids.contains(&e.id) {
            return Err(format!("shortlist names unknown candidate '{}'", e.id));
        }
        if !seen.insert(e.id.as_str()) {
            return Err(format!("shortlist repeats candidate '{}'", e.id));
        }
    }
    if !seen.contains(raw.nominee.as_str()) {
        return Err(format!("nominee '{}' is not in the shortlist", raw.nominee));
    }
    Ok(JudgeVerdict {
        judge_id: judge_id.to_string(),
        shortlist: raw.shortlist,
        nominee: raw.nominee,
        confidence,
        risks: raw.risks,
        reasoning: text.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchProposal {
    pub judge_id: String,
    pub base_candidate_id: String,
    pub diff: String,
    pub justification: String,
}

/// Diff and justification from a judge reply: the last ```diff (or ```patch) block, else
/// the last block that contains a hunk header.
pub fn parse_patch_reply(text: &str) -> Option<(String, String)> {
    let blocks = fenced_blocks(text);
    let diff = blocks
        .iter()
        .rev()
        .find(|(tag, _)| tag == "diff" || tag == "patch")
        .or_else(|| blocks.iter().rev().find(|(_, b)| b.lines().any(|l| l.starts_with("@@"))))
        .map(|(_, b)| format!("{b}\n"))?;
    let justification =
        text.split("```").step_by(2).map(str::trim).filter(|s| !s.is_empty()).collect::<Vec<_>>().join("\n\n");
    Some((diff, justification))
}

/// True when the last `window` rounds each improved on their predecessor by less than
/// `threshold` (relative). Lower values are better.
pub fn detect_saturation(best_per_round: &[f64], threshold: f64, window: usize) -> bool {
    if window == 0 || best_per_round.len() < window + 1 {
        return false;
    }
    best_per_round.windows(2).rev().take(window).all(|w| {
        let (prev, cur) = (w[0], w[1]);
        let gain = if prev > 0.0 { (prev - cur) / prev } else { 0.0 };
        gain < threshold
    })
}

/// Outcome of scoring one candidate, possibly after debugging.
#[derive(Debug, Clone)]
pub struct Evaluation {
    /// The candidate that produced `status`; a debug fix when debugging succeeded.
    pub candidate: SolverCandidate,
    pub status: ExecStatus,
    pub feedback: Vec<FeedbackRecord>,
    /// Value of the primary feedback metric when the run succeeded.
    pub score: Option<f64>,
    pub diagnostics: Diagnostics,
    pub detail: String,
    pub runtime_seconds: f64,
    pub debug_iterations_used: u32,
    /// Every corrected source tried by the debug loop.
    pub debug_candidates: Vec<SolverCandidate>,
}

/// Executes and scores candidates for the tournament.
pub trait Evaluator {
    fn evaluate(&mut self, candidate: &SolverCandidate, gateway: &mut Gateway) -> Result<Evaluation, TournamentError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub judge_id: String,
    pub model: ModelChoice,
    pub conversation: Conversation,
    pub alive: bool,
    /// Candidate this lane executes next.
    pub current: Option<String>,
    /// Why the current candidate looks the way it does.
    pub justification: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneResult {
    pub judge_id: String,
    pub candidate_id: String,
    pub status: ExecStatus,
    pub score: Option<f64>,
    pub feedback: Vec<FeedbackRecord>,
    pub diagnostics: Diagnostics,
    pub detail: String,
    pub debug_iterations_used: u32,
    pub debug_candidates: Vec<String>,
    pub justification: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub proposal: Option<PatchProposal>,
    pub attempts: u32,
    pub applied: bool,
    pub error: Option<String>,
    /// New candidate id, or the carried-forward one when no patch applied.
    pub next_candidate_id: String,
    pub lines_added: usize,
    pub lines_removed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub cycle: u32,
    pub round: u32,
    /// Round number counted across cycles; names the ledger directory.
    pub global_round: u32,
    pub verdicts: Vec<JudgeVerdict>,
    pub lanes: Vec<LaneResult>,
    pub best: Option<(String, f64)>,
    pub saturated: bool,
    pub patches: Vec<PatchRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedJudge {
    pub cycle: u32,
    pub judge_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Judge,
    Execute,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TournamentState {
    pub config: TournamentConfig,
    pub pde_description: String,
    pub shortlist_size: usize,
    pub cycle: u32,
    pub round: u32,
    pub phase: Phase,
    pub pool: Vec<SolverCandidate>,
    /// Justifications and feedback attached to generated candidates.
    pub notes: BTreeMap<String, String>,
    pub lanes: Vec<Lane>,
    pub cycle_verdicts: Vec<JudgeVerdict>,
    pub dropped: Vec<DroppedJudge>,
    pub history: Vec<RoundRecord>,
    pub saturated: bool,
    pub evaluations_used: u32,
    /// Gateway sequence number at the last persisted point.
    pub next_seq: u64,
}

impl TournamentState {
    pub fn new(pool: Vec<SolverCandidate>, config: TournamentConfig, pde_description: String) -> Result<Self, TournamentError> {
        config.validate()?;
        let n = pool.len();
        if n < 2 || n % 2 != 0 {
            return Err(TournamentError::PoolSize(n));
        }
        let ids: BTreeSet<&str> = pool.iter().map(|c| c.candidate_id.as_str()).collect();
        if ids.len() != n {
            return Err(TournamentError::State("duplicate candidate ids in pool".into()));
        }
        Ok(TournamentState {
            config,
            pde_description,
            shortlist_size: n / 2,
            cycle: 1,
            round: 0,
            phase: Phase::Judge,
            pool,
            notes: BTreeMap::new(),
            lanes: Vec::new(),
            cycle_verdicts: Vec::new(),
            dropped: Vec::new(),
            history: Vec::new(),
            saturated: false,
            evaluations_used: 0,
            next_seq: 0,
        })
    }

    pub fn candidate(&self, id: &str) -> Option<&SolverCandidate> {
        self.pool.iter().find(|c| c.candidate_id == id)
    }

    pub fn global_round(&self) -> u32 {
        self.history.len() as u32
    }

    fn cycle_best_values(&self) -> Vec<f64> {
        self.history.iter().filter(|r| r.cycle == self.cycle).filter_map(|r| r.best.as_ref().map(|b| b.1)).collect()
    }
}

/// Where round ledgers and resumable state are written.
#[derive(Debug, Clone)]
pub struct TournamentStore {
    dir: PathBuf,
}

impl TournamentStore {
    pub fn new(dir: &Path) -> Result<Self, TournamentError> {
        std::fs::create_dir_all(dir).map_err(|e| TournamentError::State(e.to_string()))?;
        Ok(TournamentStore { dir: dir.to_path_buf() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn state_path(&self) -> PathBuf {
        self.dir.join("state.json")
    }

    pub fn load_state(&self) -> Result<Option<TournamentState>, TournamentError> {
        let path = self.state_path();
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| TournamentError::State(e.to_string()))?;
        serde_json::from_str(&text).map(Some).map_err(|e| TournamentError::State(format!("{}: {e}", path.display())))
    }

    fn write(&self, path: &Path, value: &impl Serialize) -> Result<(), TournamentError> {
        let text = serde_json::to_string_pretty(value).expect("ledger serializes") + "\n";
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, text).and_then(|_| std::fs::rename(&tmp, path)).map_err(|e| TournamentError::State(e.to_string()))
    }

    pub fn save_state(&self, state: &TournamentState) -> Result<(), TournamentError> {
        self.write(&self.state_path(), state)
    }

    /// Writes `round-<k>/ledger.json` plus the executed and generated sources.
    pub fn save_round(&self, state: &TournamentState, record: &RoundRecord, runtimes: &[(String, f64)]) -> Result<(), TournamentError> {
        let dir = self.dir.join(format!("round-{}", record.global_round));
        std::fs::create_dir_all(&dir).map_err(|e| TournamentError::State(e.to_string()))?;
        self.write(&dir.join("ledger.json"), record)?;
        // Wall-clock times vary between runs and are kept out of the ledger.
        self.write(&dir.join("runtimes.json"), &runtimes.iter().cloned().collect::<BTreeMap<_, _>>())?;
        let mut ids: Vec<&str> = record.lanes.iter().map(|l| l.candidate_id.as_str()).collect();
        ids.extend(record.lanes.iter().flat_map(|l| l.debug_candidates.iter().map(String::as_str)));
        ids.extend(record.patches.iter().filter(|p| p.applied).map(|p| p.next_candidate_id.as_str()));
        for id in ids {
            if let Some(c) = state.candidate(id) {
                std::fs::write(dir.join(format!("{id}.py")), &c.source).map_err(|e| TournamentError::State(e.to_string()))?;
            }
        }
        Ok(())
    }
}

/// Options that do not change results.
#[derive(Debug, Clone, Default)]
pub struct RunControl {
    /// Stop with [`TournamentError::Halted`] once this global round is persisted.
    pub halt_after_round: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct SynthesisOutcome {
    pub best: SolverCandidate,
    pub best_score: Option<f64>,
    pub state: TournamentState,
    pub evaluations_used: u32,
}

fn judge_name(k: usize) -> String {
    format!("J{}", k + 1)
}

fn present_pool(state: &TournamentState, prompts: &PromptSet) -> Result<String, TournamentError> {
    let mut out = Vec::new();
    for c in &state.pool {
        let mut reasoning = c.reasoning.trim().to_string();
        if let Some(note) = state.notes.get(&c.candidate_id) {
            reasoning = format!("{reasoning}\n{note}").trim().to_string();
        }
        let source = c.source.trim_end_matches('\n');
        out.push(prompts.render("judge_candidate", &[("candidate_id", &c.candidate_id), ("reasoning", &reasoning), ("source", source)])?);
    }
    Ok(out.join("\n\n"))
}

/// Fresh conversations for every configured judge, each ending in one accepted verdict
/// or the judge is dropped for this cycle.
pub fn initial_judgment(state: &mut TournamentState, gateway: &mut Gateway, prompts: &PromptSet) -> Result<Vec<JudgeVerdict>, TournamentError> {
    let listing = present_pool(state, prompts)?;
    let ids: BTreeSet<String> = state.pool.iter().map(|c| c.candidate_id.clone()).collect();
    let (k, n) = (state.shortlist_size.to_string(), state.pool.len().to_string());
    let system = prompts.get("system")?;
    let mut verdicts = Vec::new();
    let mut lanes = Vec::new();
    for (j, model) in state.config.judges.iter().enumerate() {
        let name = judge_name(j);
        let select = prompts.render(
            "judge_select",
            &[
                ("judge_name", &name),
                ("pde_description", &state.pde_description),
                ("initial_solvers_plus_reasoning", &listing),
                ("shortlist_size", &k),
                ("pool_size", &n),
            ],
        )?;
        let block = prompts.render("judge_verdict_block", &[("shortlist_size", &k)])?;
        let mut conv = model.conversation().system(system).user(format!("{select}{block}"));
        let reply = gateway.exchange(&mut conv, Purpose::JudgeSelect)?;
        let mut parsed = parse_judge_verdict(&name, &reply, &ids, state.shortlist_size);
        if let Err(e) = &parsed {
            conv.push(Role::User, prompts.render("verdict_repair", &[("error", e), ("shortlist_size", &k)])?);
            let retry = gateway.exchange(&mut conv, Purpose::JudgeSelect)?;
            parsed = parse_judge_verdict(&name, &retry, &ids, state.shortlist_size).map(|mut v| {
                v.reasoning = format!("{reply}\n\n{retry}");
                v
            });
        }
        match parsed {
            Ok(v) => {
                let reason = v.shortlist.iter().find(|e| e.id == v.nominee).map(|e| e.reason.clone()).unwrap_or_default();
                lanes.push(Lane {
                    judge_id: name,
                    model: model.clone(),
                    conversation: conv,
                    alive: true,
                    current: Some(v.nominee.clone()),
                    justification: reason,
                });
                verdicts.push(v);
            }
            Err(reason) => {
                tracing::warn!(judge = %name, cycle = state.cycle, %reason, "judge dropped");
                state.dropped.push(DroppedJudge { cycle: state.cycle, judge_id: name.clone(), reason });
                lanes.push(Lane {
                    judge_id: name,
                    model: model.clone(),
                    conversation: conv,
                    alive: false,
                    current: None,
                    justification: String::new(),
                });
            }
        }
    }
    if verdicts.len() < 2 {
        return Err(TournamentError::TooFewJudges { cycle: state.cycle, usable: verdicts.len() });
    }
    state.lanes = lanes;
    state.cycle_verdicts = verdicts.clone();
    Ok(verdicts)
}

fn format_metric(v: f64) -> String {
    format!("{v:.6e}")
}

fn result_block(state: &TournamentState, lane: &LaneResult, prompts: &PromptSet) -> Result<String, TournamentError> {
    let metrics: String = if state.config.feedback.kind == FeedbackKind::None {
        String::new()
    } else {
        lane.feedback.iter().map(|f| format!("{}: {}\n", f.metric_id, format_metric(f.value))).collect()
    };
    let diagnostics = if lane.detail.is_empty() {
        lane.diagnostics.summary()
    } else {
        format!("{} ({})", lane.diagnostics.summary(), lane.detail)
    };
    Ok(prompts.render(
        "round_result",
        &[
            ("judge_name", &lane.judge_id),
            ("candidate_id", &lane.candidate_id),
            ("status", lane.status.as_str()),
            ("metrics", &metrics),
            ("diagnostics", &diagnostics),
            ("justification", lane.justification.trim()),
        ],
    )?)
}

fn hybrid_id(cycle: u32, round: u32, lane: usize) -> String {
    format!("c{cycle}r{round}j{}", lane + 1)
}

/// Asks each live judge for a patch to its lane and applies it, retrying once.
fn collect_patches(
    state: &mut TournamentState,
    record: &RoundRecord,
    gateway: &mut Gateway,
    prompts: &PromptSet,
) -> Result<Vec<PatchRecord>, TournamentError> {
    let results = record.lanes.iter().map(|l| result_block(state, l, prompts)).collect::<Result<Vec<_>, _>>()?.join("\n");
    let round_text = record.round.to_string();
    let mut out = Vec::new();
    for j in 0..state.lanes.len() {
        if !state.lanes[j].alive {
            continue;
        }
        let base_id = state.lanes[j].current.clone().expect("live lane has a candidate");
        let base = state.candidate(&base_id).expect("lane candidate in pool").clone();
        let msg = prompts.render(
            "round_feedback",
            &[("round", &round_text), ("results", &results), ("base_id", &base_id), ("base_source", base.source.trim_end_matches('\n'))],
        )?;
        let judge_id = state.lanes[j].judge_id.clone();
        state.lanes[j].conversation.push(Role::User, msg);
        let mut attempts = 0;
        let mut last_error: Option<String> = None;
        let mut proposal = None;
        let mut applied = None;
        while attempts < 2 {
            if attempts == 1 {
                let err = last_error.clone().unwrap_or_default();
                state.lanes[j].conversation.push(Role::User, prompts.render("patch_retry", &[("base_id", &base_id), ("error", &err)])?);
            }
            attempts += 1;
            let reply = gateway.exchange(&mut state.lanes[j].conversation, Purpose::JudgePatch)?;
            let Some((diff, justification)) = parse_patch_reply(&reply) else {
                last_error = Some("reply contains no unified diff block".to_string());
                continue;
            };
            let p = PatchProposal { judge_id: judge_id.clone(), base_candidate_id: base_id.clone(), diff, justification };
            match apply_patch(&base.source, &p.diff) {
                Ok(src) => {
                    applied = Some(src);
                    proposal = Some(p);
                    break;
                }
                Err(e) => {
                    last_error = Some(e.to_string());
                    proposal = Some(p);
                }
            }
        }
        let rec = match (applied, proposal) {
            (Some(source), Some(p)) => {
                let id = hybrid_id(state.cycle, record.round + 1, j);
                let (added, removed) = diff_stats(&p.diff).unwrap_or((0, 0));
                let cand = SolverCandidate {
                    candidate_id: id.clone(),
                    source,
                    strategy: base.strategy,
                    origin: Origin::Hybridization,
                    parent_ids: vec![base_id.clone()],
                    patch: Some(p.diff.clone()),
                    generator_model: state.lanes[j].model.model_id.clone(),
                    reasoning: p.justification.clone(),
                };
                state.pool.push(cand);
                state.lanes[j].current = Some(id.clone());
                state.lanes[j].justification = p.justification.clone();
                PatchRecord {
                    proposal: Some(p),
                    attempts,
                    applied: true,
                    error: None,
                    next_candidate_id: id,
                    lines_added: added,
                    lines_removed: removed,
                }
            }
            (_, proposal) => {
                tracing::warn!(judge = %judge_id, "patch not applied, lane carries {base_id} forward");
                state.lanes[j].justification = format!("Carried forward unchanged: {}", last_error.clone().unwrap_or_default());
                PatchRecord {
                    proposal,
                    attempts,
                    applied: false,
                    error: last_error,
                    next_candidate_id: base_id,
                    lines_added: 0,
                    lines_removed: 0,
                }
            }
        };
        out.push(rec);
    }
    Ok(out)
}

fn execute_round(state: &mut TournamentState, gateway: &mut Gateway, evaluator: &mut dyn Evaluator) -> Result<(RoundRecord, Vec<(String, f64)>), TournamentError> {
    state.round += 1;
    let mut lanes = Vec::new();
    let mut runtimes = Vec::new();
    for j in 0..state.lanes.len() {
        if !state.lanes[j].alive {
            continue;
        }
        let id = state.lanes[j].current.clone().expect("live lane has a candidate");
        let cand = state.candidate(&id).expect("lane candidate in pool").clone();
        let ev = evaluator.evaluate(&cand, gateway)?;
        state.evaluations_used += 1;
        for d in &ev.debug_candidates {
            if state.candidate(&d.candidate_id).is_none() {
                state.pool.push(d.clone());
            }
        }
        if ev.candidate.candidate_id != id && state.candidate(&ev.candidate.candidate_id).is_none() {
            state.pool.push(ev.candidate.clone());
        }
        if ev.status == ExecStatus::Ok {
            state.lanes[j].current = Some(ev.candidate.candidate_id.clone());
        }
        runtimes.push((ev.candidate.candidate_id.clone(), ev.runtime_seconds));
        lanes.push(LaneResult {
            judge_id: state.lanes[j].judge_id.clone(),
            candidate_id: ev.candidate.candidate_id.clone(),
            status: ev.status,
            score: ev.score,
            feedback: ev.feedback,
            diagnostics: ev.diagnostics,
            detail: ev.detail,
            debug_iterations_used: ev.debug_iterations_used,
            debug_candidates: ev.debug_candidates.iter().map(|c| c.candidate_id.clone()).collect(),
            justification: state.lanes[j].justification.clone(),
        });
    }
    let best = lanes
        .iter()
        .filter(|l| l.status == ExecStatus::Ok)
        .filter_map(|l| l.score.map(|s| (l.candidate_id.clone(), s)))
        .fold(None, |acc: Option<(String, f64)>, cur| match acc {
            Some(a) if a.1 <= cur.1 => Some(a),
            _ => Some(cur),
        });
    for l in &lanes {
        let mut note = format!("Executed in cycle {} round {}: status {}", state.cycle, state.round, l.status.as_str());
        if state.config.feedback.kind != FeedbackKind::None {
            for f in &l.feedback {
                note.push_str(&format!(", {} {}", f.metric_id, format_metric(f.value)));
            }
        }
        let entry = state.notes.entry(l.candidate_id.clone()).or_default();
        if !entry.is_empty() {
            entry.push('\n');
        }
        entry.push_str(&note);
    }
    let verdicts = if state.round == 1 { state.cycle_verdicts.clone() } else { Vec::new() };
    let record = RoundRecord {
        cycle: state.cycle,
        round: state.round,
        global_round: state.global_round() + 1,
        verdicts,
        lanes,
        best,
        saturated: false,
        patches: Vec::new(),
    };
    Ok((record, runtimes))
}

/// The best executed candidate: minimum primary metric, or the senior live lane's last
/// executed candidate when feedback carries no numbers.
pub fn select_best(state: &TournamentState) -> Option<(String, Option<f64>)> {
    let numeric = state
        .history
        .iter()
        .flat_map(|r| r.lanes.iter())
        .filter(|l| l.status == ExecStatus::Ok)
        .filter_map(|l| l.score.map(|s| (l.candidate_id.clone(), s)))
        .fold(None, |acc: Option<(String, f64)>, cur| match acc {
            Some(a) if a.1 <= cur.1 => Some(a),
            _ => Some(cur),
        });
    if state.config.feedback.primary_metric().is_some() {
        if let Some((id, s)) = numeric {
            return Some((id, Some(s)));
        }
    }
    let last = state.history.last()?;
    let senior = last.lanes.iter().find(|l| l.status == ExecStatus::Ok).or_else(|| last.lanes.first())?;
    Some((senior.candidate_id.clone(), None))
}

/// Runs (or resumes) the tournament to completion.
pub fn run_synthesis(
    mut state: TournamentState,
    gateway: &mut Gateway,
    prompts: &PromptSet,
    evaluator: &mut dyn Evaluator,
    store: Option<&TournamentStore>,
    control: &RunControl,
) -> Result<SynthesisOutcome, TournamentError> {
    if state.next_seq > gateway.next_seq() {
        gateway.resume_at(state.next_seq);
    }
    let save = |state: &mut TournamentState, gateway: &Gateway| -> Result<(), TournamentError> {
        state.next_seq = gateway.next_seq();
        if let Some(s) = store {
            s.save_state(state)?;
        }
        Ok(())
    };
    loop {
        match state.phase {
            Phase::Judge => {
                initial_judgment(&mut state, gateway, prompts)?;
                state.round = 0;
                state.phase = Phase::Execute;
                save(&mut state, gateway)?;
            }
            Phase::Execute => {
                let (mut record, runtimes) = execute_round(&mut state, gateway, evaluator)?;
                let best_values: Vec<f64> = state.cycle_best_values().into_iter().chain(record.best.as_ref().map(|b| b.1)).collect();
                let saturated = state.config.feedback.primary_metric().is_some()
                    && detect_saturation(&best_values, state.config.saturation_rel_threshold, state.config.saturation_window as usize);
                record.saturated = saturated;
                let final_round = saturated || state.round >= state.config.max_rounds_per_cycle;
                if !final_round {
                    record.patches = collect_patches(&mut state, &record, gateway, prompts)?;
                }
                state.saturated = saturated;
                let global = record.global_round;
                if let Some(s) = store {
                    s.save_round(&state, &record, &runtimes)?;
                }
                state.history.push(record);
                if final_round {
                    if state.cycle < state.config.max_cycles {
                        state.cycle += 1;
                        state.round = 0;
                        state.phase = Phase::Judge;
                    } else {
                        state.phase = Phase::Done;
                    }
                }
                save(&mut state, gateway)?;
                if control.halt_after_round == Some(global) && state.phase != Phase::Done {
                    return Err(TournamentError::Halted(global));
                }
            }
            Phase::Done => break,
        }
    }
    let expected: u32 = state.history.iter().map(|r| r.lanes.len() as u32).sum();
    debug_assert_eq!(expected, state.evaluations_used);
    let (best_id, best_score) = select_best(&state).ok_or_else(|| TournamentError::State("no executed candidates".into()))?;
    let best = state.candidate(&best_id).expect("best candidate in pool").clone();
    let evaluations_used = state.evaluations_used;
    Ok(SynthesisOutcome { best, best_score, state, evaluations_used })
}
