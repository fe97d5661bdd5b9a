mod common;

use std::process::Command;
use std::time::Instant;

use common::{desk_command, desk_gateway};
use pdesynth_core::analysis::{ModelChoice, Route};
use pdesynth_core::desk::DESK_MODEL;
use pdesynth_core::domain::{make_grid, GridSpec, PdeTask, SolutionField, TaskId};
use pdesynth_core::genesis::{Origin, SolverCandidate};
use pdesynth_core::harness::{execute, ExecStatus, ExecutionLimits, ExecutionResult, GuestCommand, HarnessEvaluator};
use pdesynth_core::llm::{Backend, CallInfo, Completion, Gateway, LlmError, Request, Usage};
use pdesynth_core::metrics::{nrmse, FeedbackKind, FeedbackType};
use pdesynth_core::prompts::PromptSet;
use pdesynth_core::reference::{solve_reference, ReferenceConfig};
use pdesynth_core::sampling::sample_initial_conditions;
use pdesynth_core::tournament::Evaluator;

struct Setup {
    task: PdeTask,
    grid: GridSpec,
    inputs: SolutionField,
    reference: SolutionField,
}

fn setup(id: TaskId) -> Setup {
    let task = PdeTask::registry_get(id, None).unwrap();
    let grid = if id == TaskId::Darcy { make_grid(&task, &[16, 16], None, None) } else { make_grid(&task, &[64], Some(4), None) }.unwrap();
    let inputs = sample_initial_conditions(&task, &grid, 2, 11).unwrap();
    let reference = solve_reference(&task, &grid, &inputs, &ReferenceConfig::for_task(id)).unwrap();
    Setup { task, grid, inputs, reference }
}

fn run(s: &Setup, source: &str, limits: &ExecutionLimits, command: &GuestCommand) -> ExecutionResult {
    execute(source, &s.task, &s.grid, &s.inputs, limits, command).unwrap()
}

fn desk(s: &Setup, source: &str) -> ExecutionResult {
    run(s, source, &ExecutionLimits::default(), &desk_command())
}

#[test]
fn known_good_guest_matches_reference() {
    for id in TaskId::ALL {
        let s = setup(id);
        let res = desk(&s, "# desk: method=reference\n");
        assert_eq!(res.status, ExecStatus::Ok, "{id}: {}", res.detail);
        let err = nrmse(res.solution.as_ref().unwrap(), &s.reference).unwrap().value;
        assert!(err <= 1e-6, "{id}: nrmse {err}");
    }
}

#[test]
fn nan_output_is_flagged() {
    let res = desk(&setup(TaskId::Burgers), "# desk: fault=nan\n");
    assert_eq!(res.status, ExecStatus::NonfiniteOutput);
    assert!(res.solution.is_none());
}

#[test]
fn wrong_shape_is_a_contract_violation() {
    let s = setup(TaskId::Advection);
    let res = desk(&s, "# desk: fault=shape\n");
    assert_eq!(res.status, ExecStatus::ContractViolation);
    assert!(res.detail.contains("[2, 5, 64]"), "{}", res.detail);
}

#[test]
fn truncated_output_is_a_contract_violation() {
    let res = desk(&setup(TaskId::ReactionDiffusion), "# desk: fault=partial\n");
    assert_eq!(res.status, ExecStatus::ContractViolation);
}

#[test]
fn crash_keeps_the_trace() {
    let res = desk(&setup(TaskId::Advection), "# desk: fault=crash\n");
    assert_eq!(res.status, ExecStatus::GuestError);
    assert!(res.stderr_trace.contains("Traceback"), "{}", res.stderr_trace);
}

#[test]
fn sleeping_guest_is_killed_at_the_deadline() {
    let limits = ExecutionLimits { wall_clock_seconds: 1.0, ..ExecutionLimits::default() };
    let start = Instant::now();
    let res = run(&setup(TaskId::Advection), "# desk: fault=sleep sleep=60\n", &limits, &desk_command());
    assert_eq!(res.status, ExecStatus::Timeout);
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn missing_interpreter_is_a_guest_error() {
    let cmd = GuestCommand { argv: vec!["/nonexistent/interpreter".into(), "{source}".into()] };
    let s = setup(TaskId::Advection);
    let res = execute("x", &s.task, &s.grid, &s.inputs, &ExecutionLimits::default(), &cmd);
    assert!(res.map(|r| r.status != ExecStatus::Ok).unwrap_or(true));
}

#[test]
fn reaction_diffusion_guest_reports_diagnostics() {
    let res = desk(&setup(TaskId::ReactionDiffusion), "# desk: splitting=strang reaction=stable dt_factor=0.5\n");
    assert_eq!(res.status, ExecStatus::Ok);
    let d = &res.diagnostics;
    assert!(d.dt_max.is_some_and(|v| v > 0.0));
    assert!(d.internal_steps.is_some_and(|v| v > 0));
    assert_eq!(d.progress.len(), 4);
}

fn numpy_available() -> bool {
    Command::new("python3").args(["-c", "import numpy"]).status().is_ok_and(|s| s.success())
}

const PY_ADVECTION: &str = r#"
import numpy as np

def solver(u0_batch, t_coordinate, beta):
    n = u0_batch.shape[1]
    k = np.fft.fftfreq(n, d=1.0 / n) * 2 * np.pi
    coeffs = np.fft.fft(u0_batch, axis=1)
    out = np.empty((u0_batch.shape[0], len(t_coordinate), n))
    for i, t in enumerate(t_coordinate):
        shifted = coeffs * np.exp(-1j * k * beta * t)
        if n % 2 == 0:
            shifted[:, n // 2] = coeffs[:, n // 2] * np.cos(k[n // 2] * beta * t)
        out[:, i, :] = np.real(np.fft.ifft(shifted, axis=1))
    return out
"#;

#[test]
fn python_guest_round_trip() {
    if !numpy_available() {
        eprintln!("python3 with numpy not found; skipping");
        return;
    }
    let s = setup(TaskId::Advection);
    let res = run(&s, PY_ADVECTION, &ExecutionLimits::default(), &GuestCommand::python());
    assert_eq!(res.status, ExecStatus::Ok, "{} {}", res.detail, res.stderr_trace);
    let err = nrmse(res.solution.as_ref().unwrap(), &s.reference).unwrap().value;
    assert!(err <= 1e-6, "nrmse {err}");

    let broken = run(&s, "def solver(*a):\n    raise ValueError('boom')\n", &ExecutionLimits::default(), &GuestCommand::python());
    assert_eq!(broken.status, ExecStatus::GuestError);
    assert!(broken.stderr_trace.contains("ValueError: boom"));
}

fn evaluator(s: &Setup, limits: ExecutionLimits) -> HarnessEvaluator {
    HarnessEvaluator {
        task: s.task.clone(),
        grid: s.grid.clone(),
        inputs: s.inputs.clone(),
        reference: Some(s.reference.clone()),
        feedback: FeedbackType::new(FeedbackKind::Nrmse),
        limits,
        command: desk_command(),
        prompts: PromptSet::builtin(),
        debug_model: ModelChoice::new(DESK_MODEL),
    }
}

fn candidate(source: &str) -> SolverCandidate {
    SolverCandidate {
        candidate_id: "g000".into(),
        source: source.into(),
        strategy: Route::Numerical,
        origin: Origin::Genesis,
        parent_ids: Vec::new(),
        patch: None,
        generator_model: DESK_MODEL.into(),
        reasoning: String::new(),
    }
}

#[test]
fn first_correction_fixes_the_crash() {
    let s = setup(TaskId::ReactionDiffusion);
    let mut ev = evaluator(&s, ExecutionLimits::default());
    let mut gw = desk_gateway(TaskId::ReactionDiffusion);
    let out = ev.evaluate(&candidate("# desk: splitting=strang fault=crash\n"), &mut gw).unwrap();
    assert_eq!(out.status, ExecStatus::Ok);
    assert_eq!(out.debug_iterations_used, 1);
    assert_eq!(out.candidate.candidate_id, "g000-d1");
    assert_eq!(out.candidate.origin, Origin::DebugFix);
    assert!(out.score.is_some());
}

/// Always answers with a program that still crashes.
struct Stubborn;

impl Backend for Stubborn {
    fn complete(&mut self, _: CallInfo, _: &Request) -> Result<Completion, LlmError> {
        Ok(Completion { text: "```python\n# desk: fault=crash\n```".into(), usage: Usage { input_tokens: 1, output_tokens: 1 } })
    }
}

#[test]
fn debugging_stops_at_the_iteration_limit() {
    let s = setup(TaskId::Advection);
    let mut ev = evaluator(&s, ExecutionLimits { max_debug_iterations: 4, ..ExecutionLimits::default() });
    let mut gw = Gateway::new(Box::new(Stubborn));
    let out = ev.evaluate(&candidate("# desk: fault=crash\n"), &mut gw).unwrap();
    assert_eq!(out.status, ExecStatus::GuestError);
    assert_eq!(out.debug_iterations_used, 4);
    assert_eq!(out.debug_candidates.len(), 4);
    assert_eq!(gw.ledger().len(), 4);
    assert_eq!(out.debug_candidates[3].parent_ids, vec!["g000-d3".to_string()]);
}
