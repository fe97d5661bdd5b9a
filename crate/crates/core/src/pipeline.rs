//! Run configuration and the staged pipeline: reference, analysis, genesis, synthesis,
//! report and costs, all persisted under one run directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{run_analysis, AnalysisReport, ModelChoice};
use crate::desk::DeskBackend;
use crate::digest::sha256_hex;
use crate::domain::{make_grid, GridSpec, PdeTask, TaskId};
use crate::genesis::{generate_candidates, read_pool, write_pool, write_pool_index, GenesisNote};
use crate::harness::{ExecutionLimits, GuestCommand, HarnessEvaluator};
use crate::llm::{Backend, Gateway, GenParams, LiveBackend, LiveConfig, Price, PriceTable, ReplayBackend, TranscriptStore};
use crate::metrics::{FeedbackKind, FeedbackType};
use crate::prompts::PromptSet;
use crate::reference::bundle::{generate_reference_set, load_bundle, ReferenceBundle};
use crate::reference::ReferenceConfig;
use crate::report::{cost_summary, write_report, CostSummary, SynthesisSummary, SUMMARY};
use crate::tournament::{
    parse_rounds, run_synthesis, RunControl, TournamentConfig, TournamentError, TournamentState, TournamentStore,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Reference,
    Analysis,
    Genesis,
    Synthesis,
    Report,
    Cost,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Reference => "reference",
            Stage::Analysis => "analysis",
            Stage::Genesis => "genesis",
            Stage::Synthesis => "synthesis",
            Stage::Report => "report",
            Stage::Cost => "cost",
        }
    }

    /// Process exit code for a failure in this stage.
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config => 2,
            Stage::Reference => 3,
            Stage::Analysis => 4,
            Stage::Genesis => 5,
            Stage::Synthesis => 6,
            Stage::Report => 7,
            Stage::Cost => 8,
        }
    }
}

/// Exit code when a run stops on a requested halt.
pub const EXIT_HALTED: i32 = 10;

#[derive(Debug, Error)]
#[error("{} stage failed: {message}", stage.as_str())]
pub struct PipelineError {
    pub stage: Stage,
    pub message: String,
    pub halted: bool,
}

impl PipelineError {
    fn new(stage: Stage, e: impl std::fmt::Display) -> Self {
        PipelineError { stage, message: e.to_string(), halted: false }
    }

    pub fn exit_code(&self) -> i32 {
        if self.halted {
            EXIT_HALTED
        } else {
            self.stage.exit_code()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum BackendConfig {
    /// Built-in deterministic responder.
    Desk,
    Live(LiveConfig),
    /// Answers from the transcripts of an earlier run.
    Replay { replay_from: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n: Vec<usize>,
    #[serde(default)]
    pub t_steps: Option<usize>,
    #[serde(default)]
    pub t_end: Option<f64>,
}

fn default_models() -> Vec<String> {
    vec![crate::desk::DESK_MODEL.into(); 3]
}
fn default_model() -> String {
    crate::desk::DESK_MODEL.into()
}
fn default_rounds() -> String {
    "4+4".into()
}
fn default_threshold() -> f64 {
    0.01
}
fn default_window() -> u32 {
    2
}
fn default_batch() -> usize {
    4
}
fn default_feedback() -> FeedbackType {
    FeedbackType::new(FeedbackKind::Nrmse)
}
fn default_guest() -> Vec<String> {
    GuestCommand::desk().argv
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskId,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    pub grid: GridConfig,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
    /// Pool size; must be even.
    pub n: usize,
    /// Round schedule such as `3`, `4` or `4+4`.
    #[serde(default = "default_rounds")]
    pub rounds: String,
    #[serde(default = "default_models")]
    pub judges: Vec<String>,
    #[serde(default = "default_model")]
    pub analysis_model: String,
    #[serde(default = "default_model")]
    pub generator_model: String,
    #[serde(default = "default_model")]
    pub debug_model: String,
    #[serde(default)]
    pub report_model: Option<String>,
    #[serde(default)]
    pub gen_params: GenParams,
    #[serde(default = "default_feedback")]
    pub feedback: FeedbackType,
    #[serde(default = "default_threshold")]
    pub saturation_rel_threshold: f64,
    #[serde(default = "default_window")]
    pub saturation_window: u32,
    pub backend: BackendConfig,
    #[serde(default = "default_guest")]
    pub guest_command: Vec<String>,
    #[serde(default)]
    pub limits: ExecutionLimits,
    #[serde(default)]
    pub prompts_dir: Option<PathBuf>,
    /// Report of an earlier run prepended to the analysis prompts.
    #[serde(default)]
    pub prior_report: Option<PathBuf>,
    /// Existing reference bundle; generated inside the run directory when absent.
    #[serde(default)]
    pub reference_bundle: Option<PathBuf>,
    #[serde(default)]
    pub prices: PriceTable,
}

/// Replaces `${NAME}` with the environment variable's value.
pub fn interpolate_env(text: &str) -> Result<String, String> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let tail = &rest[start + 2..];
        let end = tail.find('}').ok_or("unterminated ${ in config")?;
        let name = &tail[..end];
        let value = std::env::var(name).map_err(|_| format!("environment variable {name} is not set"))?;
        out.push_str(&value);
        rest = &tail[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let text = interpolate_env(text).map_err(|e| PipelineError::new(Stage::Config, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| PipelineError::new(Stage::Config, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::new(Stage::Config, format!("{}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::new(Stage::Config, m));
        if self.n < 2 || self.n % 2 != 0 {
            return bad(format!("pool size n must be even and at least 2, got {}", self.n));
        }
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        if self.guest_command.is_empty() {
            return bad("guest_command is empty".into());
        }
        self.tournament_config()?.validate().map_err(|e| PipelineError::new(Stage::Config, e))?;
        self.task_spec()?;
        Ok(())
    }

    pub fn task_spec(&self) -> Result<(PdeTask, GridSpec), PipelineError> {
        let task = PdeTask::new(self.task, &self.params).map_err(|e| PipelineError::new(Stage::Config, e))?;
        let grid = make_grid(&task, &self.grid.n, self.grid.t_steps, self.grid.t_end).map_err(|e| PipelineError::new(Stage::Config, e))?;
        Ok((task, grid))
    }

    fn model(&self, id: &str) -> ModelChoice {
        ModelChoice { model_id: id.to_string(), params: self.gen_params }
    }

    pub fn tournament_config(&self) -> Result<TournamentConfig, PipelineError> {
        let (rounds, cycles) = parse_rounds(&self.rounds).map_err(|e| PipelineError::new(Stage::Config, e))?;
        Ok(TournamentConfig {
            judges: self.judges.iter().map(|j| self.model(j)).collect(),
            max_rounds_per_cycle: rounds,
            max_cycles: cycles,
            feedback: self.feedback.clone(),
            saturation_rel_threshold: self.saturation_rel_threshold,
            saturation_window: self.saturation_window,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageOutcomes {
    pub reference_bundle: Option<String>,
    pub analysis_report: Option<String>,
    pub pool_manifest: Option<String>,
    pub tournament_ledger: Option<String>,
    pub best_candidate_id: Option<String>,
    pub best_score: Option<f64>,
    pub evaluations_used: Option<u32>,
    pub report: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub completed: Vec<Stage>,
    pub outcomes: StageOutcomes,
    /// Gateway sequence number after the last completed stage.
    pub next_seq: u64,
    pub cost: Option<CostSummary>,
    /// Run-relative path to SHA-256 of every artifact the manifest refers to.
    pub hashes: BTreeMap<String, String>,
}

pub const MANIFEST: &str = "manifest.json";

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self, String> {
        let path = run_dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    fn save(&self, run_dir: &Path) -> Result<(), String> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        std::fs::write(run_dir.join(MANIFEST), text).map_err(|e| e.to_string())
    }

    fn done(&self, stage: Stage) -> bool {
        self.completed.contains(&stage)
    }

    /// Files whose recorded hash no longer matches.
    pub fn verify(&self, run_dir: &Path) -> Vec<String> {
        self.hashes
            .iter()
            .filter(|(rel, expected)| std::fs::read(run_dir.join(rel)).map(|b| sha256_hex(&b) != **expected).unwrap_or(true))
            .map(|(rel, _)| rel.clone())
            .collect()
    }
}

fn hash_tree(run_dir: &Path, sub: &str, out: &mut BTreeMap<String, String>) {
    let root = run_dir.join(sub);
    let mut stack = vec![root];
    while let Some(dir) = stack.pop() {
        let Ok(entries) = std::fs::read_dir(&dir) else { continue };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x != "tmp") {
                let name = p.file_name().unwrap_or_default().to_string_lossy();
                // Runtimes and resumable state change between otherwise identical runs.
                if name == "runtimes.json" || name == "state.json" {
                    continue;
                }
                if let (Ok(bytes), Ok(rel)) = (std::fs::read(&p), p.strip_prefix(run_dir)) {
                    out.insert(rel.to_string_lossy().into_owned(), sha256_hex(&bytes));
                }
            }
        }
    }
}

/// Builds the gateway for `cfg`; transcripts are recorded into `transcripts`.
pub fn make_gateway(cfg: &RunConfig, transcripts: &Path) -> Result<Gateway, String> {
    let store = TranscriptStore::create(transcripts).map_err(|e| e.to_string())?;
    let backend: Box<dyn Backend> = match &cfg.backend {
        BackendConfig::Desk => Box::new(DeskBackend::new(cfg.task)),
        BackendConfig::Live(live) => Box::new(LiveBackend::from_env(live.clone()).map_err(|e| e.to_string())?),
        BackendConfig::Replay { replay_from } => {
            let source = TranscriptStore::open(replay_from).map_err(|e| e.to_string())?;
            Box::new(ReplayBackend::new(source))
        }
    };
    Ok(Gateway::recording(backend, store))
}

pub fn prompt_set(cfg: &RunConfig) -> Result<PromptSet, String> {
    match &cfg.prompts_dir {
        Some(dir) => PromptSet::with_overrides(dir).map_err(|e| e.to_string()),
        None => Ok(PromptSet::builtin()),
    }
}

/// Loads the configured bundle or builds one under `run_dir/reference`.
pub fn ensure_reference(cfg: &RunConfig, run_dir: &Path) -> Result<(ReferenceBundle, String), PipelineError> {
    let err = |e: String| PipelineError::new(Stage::Reference, e);
    let (task, grid) = cfg.task_spec()?;
    let (dir, rel) = match &cfg.reference_bundle {
        Some(p) => (p.clone(), p.display().to_string()),
        None => (run_dir.join("reference"), "reference".to_string()),
    };
    let bundle = if dir.join(crate::reference::bundle::MANIFEST).exists() {
        load_bundle(&dir).map_err(|e| err(e.to_string()))?
    } else {
        let rcfg = ReferenceConfig::for_task(task.task_id());
        generate_reference_set(&task, &grid, cfg.batch, cfg.seed, &rcfg, &dir).map_err(|e| err(e.to_string()))?
    };
    if bundle.manifest.task != task || bundle.manifest.grid != grid {
        return Err(err(format!("bundle at {} was built for a different task or grid", dir.display())));
    }
    Ok((bundle, rel))
}

/// Adds a zero price for the built-in offline model unless one is configured.
pub fn priced(prices: &PriceTable) -> PriceTable {
    let mut out = prices.clone();
    out.models.entry(crate::desk::DESK_MODEL.to_string()).or_insert(Price { input: 0.0, output: 0.0 });
    out
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOptions {
    pub control: RunControl,
    /// Stop after this stage completes.
    pub stop_after: Option<Stage>,
}

/// Runs every stage not yet recorded as complete in `run_dir`.
pub fn run_pipeline(cfg: &RunConfig, run_dir: &Path, opts: &PipelineOptions) -> Result<RunManifest, PipelineError> {
    cfg.validate()?;
    let io = |stage: Stage| move |e: String| PipelineError::new(stage, e);
    std::fs::create_dir_all(run_dir).map_err(|e| PipelineError::new(Stage::Config, e))?;
    let mut manifest = match RunManifest::load(run_dir) {
        Ok(m) if m.config == *cfg => {
            let tampered = m.verify(run_dir);
            if !tampered.is_empty() {
                return Err(PipelineError::new(Stage::Config, format!("artifacts changed since they were recorded: {}", tampered.join(", "))));
            }
            m
        }
        Ok(_) => return Err(PipelineError::new(Stage::Config, "run directory belongs to a different config")),
        Err(_) => RunManifest {
            config: cfg.clone(),
            completed: Vec::new(),
            outcomes: StageOutcomes::default(),
            next_seq: 0,
            cost: None,
            hashes: BTreeMap::new(),
        },
    };
    let (task, grid) = cfg.task_spec()?;
    let prompts = prompt_set(cfg).map_err(io(Stage::Config))?;
    let mut gateway = make_gateway(cfg, &run_dir.join("transcripts")).map_err(io(Stage::Config))?;
    gateway.resume_at(manifest.next_seq);
    let finish = |m: &mut RunManifest, stage: Stage, gateway: &Gateway| -> Result<bool, PipelineError> {
        m.completed.push(stage);
        m.next_seq = gateway.next_seq();
        let mut hashes = BTreeMap::new();
        for sub in ["analysis", "candidates", "tournament", "reference"] {
            hash_tree(run_dir, sub, &mut hashes);
        }
        if run_dir.join("report.md").exists() {
            hash_tree(run_dir, "report.md", &mut hashes);
            if let Ok(b) = std::fs::read(run_dir.join("report.md")) {
                hashes.insert("report.md".into(), sha256_hex(&b));
            }
        }
        m.hashes = hashes;
        m.save(run_dir).map_err(|e| PipelineError::new(stage, e))?;
        Ok(opts.stop_after == Some(stage))
    };

    let (bundle, bundle_rel) = ensure_reference(cfg, run_dir)?;
    if !manifest.done(Stage::Reference) {
        manifest.outcomes.reference_bundle = Some(bundle_rel);
        if finish(&mut manifest, Stage::Reference, &gateway)? {
            return Ok(manifest);
        }
    }

    let analysis_path = run_dir.join("analysis").join("report.json");
    let report: AnalysisReport = if manifest.done(Stage::Analysis) {
        let text = std::fs::read_to_string(&analysis_path).map_err(|e| PipelineError::new(Stage::Analysis, e))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::new(Stage::Analysis, e))?
    } else {
        let preamble = match &cfg.prior_report {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| PipelineError::new(Stage::Analysis, format!("{}: {e}", p.display())))?),
            None => None,
        };
        let report = run_analysis(&task, &mut gateway, &prompts, &cfg.model(&cfg.analysis_model), preamble.as_deref())
            .map_err(|e| PipelineError::new(Stage::Analysis, e))?;
        std::fs::create_dir_all(analysis_path.parent().expect("has parent")).map_err(|e| PipelineError::new(Stage::Analysis, e))?;
        let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
        std::fs::write(&analysis_path, text).map_err(|e| PipelineError::new(Stage::Analysis, e))?;
        manifest.outcomes.analysis_report = Some("analysis/report.json".into());
        if finish(&mut manifest, Stage::Analysis, &gateway)? {
            return Ok(manifest);
        }
        report
    };

    let cand_dir = run_dir.join("candidates");
    let pool = if manifest.done(Stage::Genesis) {
        read_pool(&cand_dir, "pool.json").map_err(|e| PipelineError::new(Stage::Genesis, e))?
    } else {
        let outcome = generate_candidates(&report, &task, cfg.n, &mut gateway, &prompts, &cfg.model(&cfg.generator_model))
            .map_err(|e| PipelineError::new(Stage::Genesis, e))?;
        let entries = write_pool(&cand_dir, &outcome.candidates).map_err(|e| PipelineError::new(Stage::Genesis, e))?;
        write_pool_index(&cand_dir, "pool.json", &entries).map_err(|e| PipelineError::new(Stage::Genesis, e))?;
        #[derive(Serialize)]
        struct Notes<'a> {
            warnings: &'a [GenesisNote],
            dropped: &'a [GenesisNote],
        }
        let notes = serde_json::to_string_pretty(&Notes { warnings: &outcome.warnings, dropped: &outcome.dropped }).expect("notes serialize") + "\n";
        std::fs::write(cand_dir.join("genesis.json"), notes).map_err(|e| PipelineError::new(Stage::Genesis, e))?;
        manifest.outcomes.pool_manifest = Some("candidates/pool.json".into());
        if finish(&mut manifest, Stage::Genesis, &gateway)? {
            return Ok(manifest);
        }
        outcome.candidates
    };

    let tdir = run_dir.join("tournament");
    if !manifest.done(Stage::Synthesis) {
        let store = TournamentStore::new(&tdir).map_err(|e| PipelineError::new(Stage::Synthesis, e))?;
        let description = prompts.describe(&task).map_err(|e| PipelineError::new(Stage::Synthesis, e))?;
        let state = match store.load_state().map_err(|e| PipelineError::new(Stage::Synthesis, e))? {
            Some(s) => s,
            None => {
                // Even pool sizes shrink when genesis drops slots; keep the pool even.
                let mut pool = pool.clone();
                if pool.len() % 2 == 1 {
                    pool.pop();
                }
                TournamentState::new(pool, cfg.tournament_config()?, description).map_err(|e| PipelineError::new(Stage::Synthesis, e))?
            }
        };
        let mut evaluator = HarnessEvaluator {
            task: task.clone(),
            grid: grid.clone(),
            inputs: bundle.inputs.clone(),
            reference: Some(bundle.solutions.clone()),
            feedback: cfg.feedback.clone(),
            limits: cfg.limits.clone(),
            command: GuestCommand { argv: cfg.guest_command.clone() },
            prompts: prompts.clone(),
            debug_model: cfg.model(&cfg.debug_model),
        };
        let outcome = match run_synthesis(state, &mut gateway, &prompts, &mut evaluator, Some(&store), &opts.control) {
            Ok(o) => o,
            Err(TournamentError::Halted(k)) => {
                return Err(PipelineError { stage: Stage::Synthesis, message: format!("halted after round {k}"), halted: true })
            }
            Err(e) => return Err(PipelineError::new(Stage::Synthesis, e)),
        };
        let summary = SynthesisSummary {
            task_id: Some(task.task_id().as_str().to_string()),
            feedback: cfg.feedback.clone(),
            best_candidate_id: outcome.best.candidate_id.clone(),
            best_score: outcome.best_score,
            evaluations_used: outcome.evaluations_used,
            cycles: outcome.state.cycle,
            dropped_judges: outcome.state.dropped.clone(),
        };
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
        std::fs::write(tdir.join(SUMMARY), text).map_err(|e| PipelineError::new(Stage::Synthesis, e))?;
        std::fs::write(tdir.join("best.py"), &outcome.best.source).map_err(|e| PipelineError::new(Stage::Synthesis, e))?;
        manifest.outcomes.tournament_ledger = Some("tournament".into());
        manifest.outcomes.best_candidate_id = Some(outcome.best.candidate_id);
        manifest.outcomes.best_score = outcome.best_score;
        manifest.outcomes.evaluations_used = Some(outcome.evaluations_used);
        if finish(&mut manifest, Stage::Synthesis, &gateway)? {
            return Ok(manifest);
        }
    }

    if !manifest.done(Stage::Report) {
        let model = cfg.report_model.as_ref().map(|m| cfg.model(m));
        let narrative = model.as_ref().map(|m| (&mut gateway, &prompts, m));
        write_report(run_dir, narrative).map_err(|e| PipelineError::new(Stage::Report, e))?;
        manifest.outcomes.report = Some("report.md".into());
        if finish(&mut manifest, Stage::Report, &gateway)? {
            return Ok(manifest);
        }
    }

    if !manifest.done(Stage::Cost) {
        let costs = cost_summary(run_dir, &priced(&cfg.prices)).map_err(|e| PipelineError::new(Stage::Cost, e))?;
        let text = serde_json::to_string_pretty(&costs).expect("costs serialize") + "\n";
        std::fs::write(run_dir.join("costs.json"), text).map_err(|e| PipelineError::new(Stage::Cost, e))?;
        manifest.cost = Some(costs);
        finish(&mut manifest, Stage::Cost, &gateway)?;
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"task": "reaction_diffusion", "grid": {"n": [32], "t_steps": 2}, "n": 4, "backend": {"mode": "desk"}}"#;

    #[test]
    fn odd_pool_rejected_at_config() {
        let err = RunConfig::parse(&MINIMAL.replace("\"n\": 4", "\"n\": 5")).unwrap_err();
        assert_eq!(err.stage, Stage::Config);
        assert!(err.message.contains("even"));
    }

    #[test]
    fn env_interpolation() {
        std::env::set_var("PDESYNTH_TEST_KEY", "abc");
        assert_eq!(interpolate_env("x ${PDESYNTH_TEST_KEY} y").unwrap(), "x abc y");
        assert!(interpolate_env("${PDESYNTH_SURELY_UNSET_VAR}").is_err());
        assert!(interpolate_env("${open").is_err());
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.judges.len(), 3);
        let t = cfg.tournament_config().unwrap();
        assert_eq!((t.max_rounds_per_cycle, t.max_cycles), (4, 2));
        assert_eq!(cfg.guest_command, GuestCommand::desk().argv);
    }
}
