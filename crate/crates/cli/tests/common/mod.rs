#![allow(dead_code)]

use std::path::Path;

use pdesynth_core::analysis::{run_analysis, ModelChoice};
use pdesynth_core::desk::{DeskBackend, DESK_MODEL};
use pdesynth_core::domain::{PdeTask, TaskId};
use pdesynth_core::genesis::{generate_candidates, SolverCandidate};
use pdesynth_core::harness::{Diagnostics, ExecStatus, GuestCommand};
use pdesynth_core::llm::Gateway;
use pdesynth_core::metrics::FeedbackRecord;
use pdesynth_core::prompts::PromptSet;
use pdesynth_core::tournament::{Evaluation, Evaluator, TournamentError};

pub const BIN: &str = env!("CARGO_BIN_EXE_pdesynth");

/// Desk guest command pointing at the built binary rather than the test executable.
pub fn desk_command() -> GuestCommand {
    GuestCommand { argv: vec![BIN.into(), "desk-guest".into(), "{source}".into()] }
}

pub fn desk_gateway(task: TaskId) -> Gateway {
    Gateway::new(Box::new(DeskBackend::new(task)))
}

/// Analysis plus genesis with the offline responder.
pub fn desk_pool(task: &PdeTask, n: usize) -> Vec<SolverCandidate> {
    let mut gw = desk_gateway(task.task_id());
    let prompts = PromptSet::builtin();
    let model = ModelChoice::new(DESK_MODEL);
    let report = run_analysis(task, &mut gw, &prompts, &model, None).expect("analysis");
    generate_candidates(&report, task, n, &mut gw, &prompts, &model).expect("genesis").candidates
}

/// Evaluator whose every call improves on the previous one by half.
#[derive(Default)]
pub struct Halving {
    pub calls: u32,
}

pub fn scripted_evaluation(candidate: &SolverCandidate, status: ExecStatus, score: Option<f64>) -> Evaluation {
    Evaluation {
        candidate: candidate.clone(),
        status,
        feedback: score.map(|s| vec![FeedbackRecord::new("general.nrmse", s)]).unwrap_or_default(),
        score,
        diagnostics: Diagnostics::default(),
        detail: String::new(),
        runtime_seconds: 0.0,
        debug_iterations_used: 0,
        debug_candidates: Vec::new(),
    }
}

impl Evaluator for Halving {
    fn evaluate(&mut self, candidate: &SolverCandidate, _gateway: &mut Gateway) -> Result<Evaluation, TournamentError> {
        self.calls += 1;
        Ok(scripted_evaluation(candidate, ExecStatus::Ok, Some(0.5f64.powi(self.calls as i32))))
    }
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
