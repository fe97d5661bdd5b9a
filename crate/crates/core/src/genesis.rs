//! Stage 2: generation of the initial candidate pool.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{fenced_blocks, AnalysisReport, ModelChoice, Route};
use crate::digest::sha256_hex;
use crate::domain::PdeTask;
use crate::llm::{Gateway, LlmError, Purpose, Role};
use crate::prompts::{PromptError, PromptSet};

#[derive(Debug, Error, PartialEq)]
pub enum GenesisError {
    #[error("pool size must be even and at least 2, got {0}")]
    PoolSize(usize),
    #[error("reply contains no fenced code block")]
    NoCodeBlock,
    #[error("only {kept} of {requested} candidates could be extracted")]
    PoolTooSmall { kept: usize, requested: usize },
    #[error("candidate {id}: {reason}")]
    Invalid { id: String, reason: String },
    #[error("writing pool: {0}")]
    Io(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Genesis,
    Hybridization,
    DebugFix,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverCandidate {
    pub candidate_id: String,
    pub source: String,
    pub strategy: Route,
    pub origin: Origin,
    pub parent_ids: Vec<String>,
    pub patch: Option<String>,
    pub generator_model: String,
    pub reasoning: String,
}

impl SolverCandidate {
    pub fn validate(&self) -> Result<(), GenesisError> {
        let bad = |reason: &str| Err(GenesisError::Invalid { id: self.candidate_id.clone(), reason: reason.into() });
        if self.source.trim().is_empty() {
            return bad("empty source");
        }
        match self.origin {
            Origin::Genesis if !self.parent_ids.is_empty() => bad("genesis candidate with parents"),
            Origin::Hybridization if self.patch.is_none() || self.parent_ids.len() != 1 => {
                bad("hybrid candidate needs one parent and a patch")
            }
            Origin::DebugFix if self.parent_ids.len() != 1 => bad("debug fix needs one parent"),
            _ => Ok(()),
        }
    }

    pub fn source_hash(&self) -> String {
        sha256_hex(self.source.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Extracted {
    pub code: String,
    /// Prose outside the chosen block.
    pub reasoning: String,
    pub warning: Option<String>,
}

/// Contents of the fenced block; with several blocks the longest wins and a warning is set.
pub fn extract_code(text: &str) -> Result<Extracted, GenesisError> {
    let blocks = fenced_blocks(text);
    let (best, _) = blocks
        .iter()
        .enumerate()
        .max_by_key(|(k, (_, b))| (b.lines().count(), std::cmp::Reverse(*k)))
        .ok_or(GenesisError::NoCodeBlock)?;
    let code = format!("{}\n", blocks[best].1);
    let warning = (blocks.len() > 1).then(|| format!("{} code blocks, kept block {} (longest)", blocks.len(), best + 1));
    let reasoning = text.split("```").step_by(2).map(str::trim).filter(|s| !s.is_empty()).collect::<Vec<_>>().join("\n\n");
    Ok(Extracted { code, reasoning, warning })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenesisNote {
    pub call_index: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenesisOutcome {
    pub candidates: Vec<SolverCandidate>,
    pub warnings: Vec<GenesisNote>,
    pub dropped: Vec<GenesisNote>,
}

pub fn candidate_id(index: usize) -> String {
    format!("g{index:03}")
}

/// The route-specific generation prompt for call `index`.
pub fn genesis_prompt(
    report: &AnalysisReport,
    task: &PdeTask,
    prompts: &PromptSet,
    index: usize,
    n: usize,
) -> Result<String, GenesisError> {
    let description = prompts.describe(task)?;
    let template = prompts.solver_template(task)?;
    let criteria = prompts.render("code_generation_criteria", &[])?;
    let plan = report.stability.as_ref().map(|s| s.render()).unwrap_or_default();
    let (idx, pool) = ((index + 1).to_string(), n.to_string());
    let values = [
        ("pde_description", description.as_str()),
        ("solver_template", template),
        ("code_generation_criteria", criteria.as_str()),
        ("stability_plan", plan.as_str()),
    ];
    let asset = match report.route {
        Route::Analytical => "analytical_followup",
        Route::Transform => "transform_followup",
        Route::Hybrid => "hybrid_followup",
        Route::Numerical => "numerical_followup",
    };
    let body = prompts.render(asset, &values)?;
    let index_line = prompts.render("genesis_index", &[("candidate_index", &idx), ("pool_size", &pool)])?;
    Ok(format!("{body}{index_line}"))
}

/// Generates `n` candidates in call-index order. A reply without code gets one retry;
/// a second failure drops that slot.
pub fn generate_candidates(
    report: &AnalysisReport,
    task: &PdeTask,
    n: usize,
    gateway: &mut Gateway,
    prompts: &PromptSet,
    model: &ModelChoice,
) -> Result<GenesisOutcome, GenesisError> {
    if n < 2 || n % 2 != 0 {
        return Err(GenesisError::PoolSize(n));
    }
    let system = prompts.get("system")?;
    let mut out = GenesisOutcome { candidates: Vec::new(), warnings: Vec::new(), dropped: Vec::new() };
    for index in 0..n {
        let mut conv = model.conversation().system(system).user(genesis_prompt(report, task, prompts, index, n)?);
        let mut reply = gateway.exchange(&mut conv, Purpose::Genesis)?;
        let mut extracted = extract_code(&reply);
        if extracted.is_err() {
            conv.push(Role::User, prompts.get("code_repair")?);
            reply = gateway.exchange(&mut conv, Purpose::Genesis)?;
            extracted = extract_code(&reply);
        }
        match extracted {
            Ok(ex) => {
                if let Some(w) = ex.warning {
                    out.warnings.push(GenesisNote { call_index: index, message: w });
                }
                out.candidates.push(SolverCandidate {
                    candidate_id: candidate_id(index),
                    source: ex.code,
                    strategy: report.route,
                    origin: Origin::Genesis,
                    parent_ids: Vec::new(),
                    patch: None,
                    generator_model: model.model_id.clone(),
                    reasoning: ex.reasoning,
                });
            }
            Err(e) => out.dropped.push(GenesisNote { call_index: index, message: e.to_string() }),
        }
    }
    if out.candidates.len() < n / 2 {
        return Err(GenesisError::PoolTooSmall { kept: out.candidates.len(), requested: n });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub candidate_id: String,
    pub strategy: Route,
    pub origin: Origin,
    pub parent_ids: Vec<String>,
    pub sha256: String,
    pub file: String,
}

/// Writes `<id>.py` plus `candidate.json` (full record) per candidate and a `pool.json` index.
pub fn write_pool(dir: &Path, candidates: &[SolverCandidate]) -> Result<Vec<PoolEntry>, GenesisError> {
    let io = |e: std::io::Error| GenesisError::Io(e.to_string());
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut entries = Vec::new();
    for c in candidates {
        let file = format!("{}.py", c.candidate_id);
        std::fs::write(dir.join(&file), &c.source).map_err(io)?;
        let record = serde_json::to_string_pretty(c).expect("candidate serializes") + "\n";
        std::fs::write(dir.join(format!("{}.json", c.candidate_id)), record).map_err(io)?;
        entries.push(PoolEntry {
            candidate_id: c.candidate_id.clone(),
            strategy: c.strategy,
            origin: c.origin,
            parent_ids: c.parent_ids.clone(),
            sha256: c.source_hash(),
            file,
        });
    }
    Ok(entries)
}

pub fn write_pool_index(dir: &Path, name: &str, entries: &[PoolEntry]) -> Result<(), GenesisError> {
    let text = serde_json::to_string_pretty(entries).expect("pool serializes") + "\n";
    std::fs::write(dir.join(name), text).map_err(|e| GenesisError::Io(e.to_string()))
}

/// Reads candidates back from their `.json` records, in the order of `pool.json`.
pub fn read_pool(dir: &Path, index: &str) -> Result<Vec<SolverCandidate>, GenesisError> {
    let io = |e: std::io::Error| GenesisError::Io(e.to_string());
    let entries: Vec<PoolEntry> = serde_json::from_str(&std::fs::read_to_string(dir.join(index)).map_err(io)?)
        .map_err(|e| GenesisError::Io(e.to_string()))?;
    entries
        .iter()
        .map(|e| {
            let text = std::fs::read_to_string(dir.join(format!("{}.json", e.candidate_id))).map_err(io)?;
            let c: SolverCandidate = serde_json::from_str(&text).map_err(|e| GenesisError::Io(e.to_string()))?;
            if c.source_hash() != e.sha256 {
                return Err(GenesisError::Invalid { id: c.candidate_id, reason: "source hash mismatch".into() });
            }
            Ok(c)
        })
        .collect()
}
