//! Execution of guest solver programs in child processes.
//!
//! Each run gets a scratch directory holding the source, one PDET file per tensor
//! argument and a JSON manifest whose path is the guest's last argument. The guest
//! writes its solution to `output_path`.

use std::collections::BTreeMap;
use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use ndarray::{ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::ModelChoice;
use crate::domain::{ArgKind, GridSpec, PdeTask, SolutionField, TaskId};
use crate::genesis::{extract_code, Origin, SolverCandidate};
use crate::llm::{Gateway, LlmError, Purpose};
use crate::metrics::{evaluate_feedback, FeedbackType};
use crate::prompts::{PromptError, PromptSet};
use crate::tensor;
use crate::tournament::{Evaluation, Evaluator, TournamentError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("guest command is empty")]
    EmptyCommand,
    #[error("debug loop needs a failed execution")]
    NotAFailure,
    #[error("preparing execution: {0}")]
    Setup(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecStatus {
    Ok,
    GuestError,
    Timeout,
    ContractViolation,
    NonfiniteOutput,
}

impl ExecStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ExecStatus::Ok => "ok",
            ExecStatus::GuestError => "guest_error",
            ExecStatus::Timeout => "timeout",
            ExecStatus::ContractViolation => "contract_violation",
            ExecStatus::NonfiniteOutput => "nonfinite_output",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionLimits {
    pub wall_clock_seconds: f64,
    pub memory_bytes: u64,
    pub max_debug_iterations: u32,
}

impl Default for ExecutionLimits {
    fn default() -> Self {
        ExecutionLimits { wall_clock_seconds: 120.0, memory_bytes: 2 << 30, max_debug_iterations: 4 }
    }
}

/// Values a guest printed. Fields it did not print stay `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dt_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub internal_steps: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub total_internal_steps: Option<u64>,
    /// `(i, T)` pairs from progress lines.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub progress: Vec<(u64, u64)>,
}

impl Diagnostics {
    pub fn is_empty(&self) -> bool {
        *self == Diagnostics::default()
    }

    pub fn summary(&self) -> String {
        let mut parts = Vec::new();
        if let Some(d) = self.dt_max {
            parts.push(format!("dt_max={d:.2e}"));
        }
        if let Some(n) = self.internal_steps {
            parts.push(format!("internal_steps={n}"));
        }
        if let Some(n) = self.total_internal_steps {
            parts.push(format!("total_internal_steps={n}"));
        }
        if let Some((i, t)) = self.progress.last() {
            parts.push(format!("progress={i}/{t}"));
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join(", ")
        }
    }
}

fn first_number(text: &str) -> Option<&str> {
    let start = text.find(|c: char| c.is_ascii_digit() || c == '-' || c == '.')?;
    let rest = &text[start..];
    let end = rest
        .char_indices()
        .find(|&(k, c)| {
            !(c.is_ascii_digit() || c == '.' || c == 'e' || c == 'E' || ((c == '-' || c == '+') && (k == 0 || rest[..k].ends_with(['e', 'E']))))
        })
        .map_or(rest.len(), |(k, _)| k);
    Some(&rest[..end])
}

/// Reads the time-step diagnostics printed by solvers following the generation criteria.
pub fn parse_diagnostics(stdout: &str) -> Diagnostics {
    let mut d = Diagnostics::default();
    for line in stdout.lines() {
        let lower = line.to_ascii_lowercase();
        if let Some(pos) = lower.find("dt_max") {
            let tail = &line[pos + 6..];
            if let Some(eq) = tail.find(['=', ':']) {
                if let Some(v) = first_number(&tail[eq + 1..]).and_then(|s| s.parse().ok()) {
                    d.dt_max = Some(v);
                }
            }
        }
        if let Some(rest) = lower.trim_start().strip_prefix("using ") {
            if let Some(num) = rest.strip_suffix(" internal time steps").or_else(|| rest.split(" internal time steps").next()) {
                if let Ok(v) = num.trim().parse() {
                    d.internal_steps = Some(v);
                }
            }
        }
        if let Some(pos) = lower.find("internal steps:") {
            if let Some(v) = first_number(&lower[pos + 15..]).and_then(|s| s.parse().ok()) {
                if lower.contains("completed") {
                    d.total_internal_steps = Some(v);
                } else {
                    d.internal_steps = Some(v);
                }
            }
        }
        if let Some(pos) = lower.find("time step ") {
            let tail = &lower[pos + 10..];
            if let Some((i, rest)) = tail.split_once('/') {
                let t: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
                if let (Ok(i), Ok(t)) = (i.trim().parse(), t.parse()) {
                    d.progress.push((i, t));
                }
            }
        }
    }
    d
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub status: ExecStatus,
    #[serde(skip)]
    pub solution: Option<SolutionField>,
    /// Evidence for a non-ok status.
    pub detail: String,
    pub stderr_trace: String,
    pub stdout: String,
    pub runtime_seconds: f64,
    pub diagnostics: Diagnostics,
    pub debug_iterations_used: u32,
}

impl ExecutionResult {
    fn failure(status: ExecStatus, detail: String, stdout: String, stderr: String, runtime: f64) -> Self {
        ExecutionResult {
            status,
            solution: None,
            detail,
            diagnostics: parse_diagnostics(&stdout),
            stderr_trace: stderr,
            stdout,
            runtime_seconds: runtime,
            debug_iterations_used: 0,
        }
    }
}

/// Invocation manifest handed to the guest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuestManifest {
    pub task_id: TaskId,
    pub params: BTreeMap<String, f64>,
    /// Solver argument names in call order; each is either in `input_paths` or `params`.
    pub arguments: Vec<String>,
    /// Tensor argument name to PDET path.
    pub input_paths: BTreeMap<String, String>,
    pub output_path: String,
    pub t_coordinates: Vec<f64>,
    pub grid: GridSpec,
    pub output_shape: Vec<usize>,
}

/// Argument vector for launching a guest. `{source}` expands to the solver file,
/// `{runner}` to the bundled Python adapter and `{self}` to the running executable.
/// The manifest path is appended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuestCommand {
    pub argv: Vec<String>,
}

impl GuestCommand {
    pub fn new(argv: &[&str]) -> Self {
        GuestCommand { argv: argv.iter().map(|s| s.to_string()).collect() }
    }

    /// Runs Python solvers through the bundled adapter.
    pub fn python() -> Self {
        GuestCommand::new(&["python3", "{runner}", "{source}"])
    }

    /// Runs sources through the built-in directive interpreter of this executable.
    pub fn desk() -> Self {
        GuestCommand::new(&["{self}", "desk-guest", "{source}"])
    }

    fn expand(&self, source: &Path, runner: &Path, manifest: &Path) -> Result<Vec<String>, HarnessError> {
        if self.argv.is_empty() {
            return Err(HarnessError::EmptyCommand);
        }
        let me = std::env::current_exe().map_err(|e| HarnessError::Setup(e.to_string()))?;
        let mut out: Vec<String> = self
            .argv
            .iter()
            .map(|a| {
                a.replace("{source}", &source.display().to_string())
                    .replace("{runner}", &runner.display().to_string())
                    .replace("{self}", &me.display().to_string())
            })
            .collect();
        out.push(manifest.display().to_string());
        Ok(out)
    }
}

pub const PYTHON_RUNNER: &str = include_str!("../assets/guest_runner.py");

/// Tensor arguments of the task's solver, split out of the stored initial data.
fn guest_tensors(task: &PdeTask, grid: &GridSpec, inputs: &SolutionField) -> Vec<(String, ArrayD<f64>)> {
    let mut out = Vec::new();
    for arg in &task.solver_signature().args {
        if arg.kind == ArgKind::Scalar {
            continue;
        }
        let channel = |c: usize| inputs.data.index_axis(Axis(2), c).to_owned();
        let array = match arg.name.as_str() {
            "t_coordinate" => ArrayD::from_shape_vec(IxDyn(&[grid.t_coordinates.len()]), grid.t_coordinates.clone())
                .expect("1-d times"),
            "density0" => channel(0),
            "Vx0" => channel(1),
            "pressure0" => channel(2),
            _ => inputs.data.clone(),
        };
        out.push((arg.name.clone(), array));
    }
    out
}

fn write_inputs(dir: &Path, task: &PdeTask, grid: &GridSpec, inputs: &SolutionField) -> Result<PathBuf, HarnessError> {
    let setup = |e: String| HarnessError::Setup(e);
    let mut input_paths = BTreeMap::new();
    for (name, array) in guest_tensors(task, grid, inputs) {
        let path = dir.join(format!("{name}.pdet"));
        tensor::store(&path, &array).map_err(|e| setup(e.to_string()))?;
        input_paths.insert(name, path.display().to_string());
    }
    let manifest = GuestManifest {
        task_id: task.task_id(),
        params: task.params().clone(),
        arguments: task.solver_signature().args.iter().map(|a| a.name.clone()).collect(),
        input_paths,
        output_path: dir.join("solution.pdet").display().to_string(),
        t_coordinates: grid.t_coordinates.clone(),
        grid: grid.clone(),
        output_shape: task.output_shape(grid, inputs.batch()),
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
        .map_err(|e| setup(e.to_string()))?;
    Ok(path)
}

fn drain<R: Read + Send + 'static>(stream: Option<R>) -> std::thread::JoinHandle<String> {
    std::thread::spawn(move || {
        let mut buf = Vec::new();
        if let Some(mut s) = stream {
            let _ = s.read_to_end(&mut buf);
        }
        String::from_utf8_lossy(&buf).into_owned()
    })
}

/// Runs `source` on `inputs` and validates what it writes.
pub fn execute(
    source: &str,
    task: &PdeTask,
    grid: &GridSpec,
    inputs: &SolutionField,
    limits: &ExecutionLimits,
    command: &GuestCommand,
) -> Result<ExecutionResult, HarnessError> {
    let dir = tempfile::tempdir().map_err(|e| HarnessError::Setup(e.to_string()))?;
    let source_path = dir.path().join("solver.py");
    std::fs::write(&source_path, source).map_err(|e| HarnessError::Setup(e.to_string()))?;
    let runner_path = dir.path().join("guest_runner.py");
    std::fs::write(&runner_path, PYTHON_RUNNER).map_err(|e| HarnessError::Setup(e.to_string()))?;
    let manifest_path = write_inputs(dir.path(), task, grid, inputs)?;
    let argv = command.expand(&source_path, &runner_path, &manifest_path)?;

    let memory = limits.memory_bytes;
    let mut cmd = Command::new(&argv[0]);
    cmd.args(&argv[1..]).current_dir(dir.path()).stdin(Stdio::null()).stdout(Stdio::piped()).stderr(Stdio::piped());
    // SAFETY: only async-signal-safe libc calls between fork and exec.
    unsafe {
        cmd.pre_exec(move || {
            if libc::setpgid(0, 0) != 0 {
                return Err(std::io::Error::last_os_error());
            }
            let lim = libc::rlimit { rlim_cur: memory as libc::rlim_t, rlim_max: memory as libc::rlim_t };
            if libc::setrlimit(libc::RLIMIT_AS, &lim) != 0 {
                return Err(std::io::Error::last_os_error());
            }
            Ok(())
        });
    }
    let start = Instant::now();
    let mut child = match cmd.spawn() {
        Ok(c) => c,
        Err(e) => {
            return Ok(ExecutionResult::failure(
                ExecStatus::GuestError,
                format!("could not launch {}: {e}", argv[0]),
                String::new(),
                String::new(),
                0.0,
            ))
        }
    };
    let pgid = child.id() as libc::pid_t;
    let out_thread = drain(child.stdout.take());
    let err_thread = drain(child.stderr.take());
    let deadline = Duration::from_secs_f64(limits.wall_clock_seconds);
    let mut timed_out = false;
    let status = loop {
        match child.try_wait() {
            Ok(Some(s)) => break Some(s),
            Ok(None) if start.elapsed() >= deadline => {
                // SAFETY: signalling our own child's process group.
                unsafe {
                    libc::killpg(pgid, libc::SIGKILL);
                }
                timed_out = true;
                break child.wait().ok();
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(5)),
            Err(_) => break None,
        }
    };
    // Grandchildren may still hold the pipes open.
    unsafe {
        libc::killpg(pgid, libc::SIGKILL);
    }
    let runtime = start.elapsed().as_secs_f64();
    let stdout = out_thread.join().unwrap_or_default();
    let stderr = err_thread.join().unwrap_or_default();

    if timed_out {
        let detail = format!("killed after {:.1} s wall-clock limit", limits.wall_clock_seconds);
        return Ok(ExecutionResult::failure(ExecStatus::Timeout, detail, stdout, stderr, runtime));
    }
    match status {
        Some(s) if s.success() => {}
        other => {
            let detail = match other {
                Some(s) => format!("guest exited with {s}"),
                None => "guest exit status unavailable".into(),
            };
            return Ok(ExecutionResult::failure(ExecStatus::GuestError, detail, stdout, stderr, runtime));
        }
    }
    let expected = task.output_shape(grid, inputs.batch());
    let out_path = dir.path().join("solution.pdet");
    let data = match tensor::load(&out_path) {
        Ok(d) => d,
        Err(e) => {
            let detail = format!("output {}: {e}", out_path.display());
            return Ok(ExecutionResult::failure(ExecStatus::ContractViolation, detail, stdout, stderr, runtime));
        }
    };
    if data.shape() != expected.as_slice() {
        let detail = format!("output shape {:?}, expected {:?}", data.shape(), expected);
        return Ok(ExecutionResult::failure(ExecStatus::ContractViolation, detail, stdout, stderr, runtime));
    }
    if let Some(k) = data.iter().position(|v| !v.is_finite()) {
        let detail = format!("non-finite value at flat index {k}");
        return Ok(ExecutionResult::failure(ExecStatus::NonfiniteOutput, detail, stdout, stderr, runtime));
    }
    let components = task.components();
    Ok(ExecutionResult {
        status: ExecStatus::Ok,
        solution: Some(SolutionField::new(data, components)),
        detail: String::new(),
        diagnostics: parse_diagnostics(&stdout),
        stderr_trace: stderr,
        stdout,
        runtime_seconds: runtime,
        debug_iterations_used: 0,
    })
}

/// Rebuilds the `[batch, N, 3]` Navier-Stokes initial slice, or passes other inputs through.
pub fn assemble_inputs(task: &PdeTask, tensors: &BTreeMap<String, ArrayD<f64>>) -> Option<SolutionField> {
    let get = |n: &str| tensors.get(n);
    match task.task_id() {
        TaskId::NavierStokes => {
            let (rho, v, p) = (get("density0")?, get("Vx0")?, get("pressure0")?);
            let (b, n) = (rho.shape()[0], rho.shape()[1]);
            let mut out = ArrayD::zeros(IxDyn(&[b, n, 3]));
            for i in 0..b {
                for j in 0..n {
                    out[[i, j, 0]] = rho[[i, j]];
                    out[[i, j, 1]] = v[[i, j]];
                    out[[i, j, 2]] = p[[i, j]];
                }
            }
            Some(SolutionField::new(out, task.components()))
        }
        TaskId::Darcy => Some(SolutionField::scalar(get("a")?.clone())),
        _ => Some(SolutionField::scalar(get("u0_batch")?.clone())),
    }
}

/// The debug attempts behind a final result.
#[derive(Debug, Clone)]
pub struct DebugOutcome {
    pub candidate: SolverCandidate,
    pub result: ExecutionResult,
    /// Every corrected source tried, in order.
    pub attempts: Vec<SolverCandidate>,
}

fn tail(text: &str, max: usize) -> &str {
    if text.len() <= max {
        return text;
    }
    let mut start = text.len() - max;
    while !text.is_char_boundary(start) {
        start += 1;
    }
    &text[start..]
}

/// Asks the model for corrected programs until one runs cleanly or the iteration cap is
/// reached. `run` executes a source; exhaustion returns the last failure.
pub fn debug_loop<F>(
    candidate: &SolverCandidate,
    failure: ExecutionResult,
    gateway: &mut Gateway,
    prompts: &PromptSet,
    model: &ModelChoice,
    limits: &ExecutionLimits,
    mut run: F,
) -> Result<DebugOutcome, HarnessError>
where
    F: FnMut(&str) -> Result<ExecutionResult, HarnessError>,
{
    if failure.status == ExecStatus::Ok {
        return Err(HarnessError::NotAFailure);
    }
    let mut current = candidate.clone();
    let mut last = failure;
    let mut attempts = Vec::new();
    for k in 1..=limits.max_debug_iterations {
        let evidence = if last.stderr_trace.trim().is_empty() { last.detail.clone() } else { last.stderr_trace.clone() };
        let prompt = prompts.render(
            "debug_fix",
            &[("status", last.status.as_str()), ("stderr", tail(&evidence, 4000)), ("source", &current.source)],
        )?;
        let mut conv = model.conversation().system(prompts.get("system")?).user(prompt);
        let reply = gateway.exchange(&mut conv, Purpose::Debug)?;
        let Ok(ex) = extract_code(&reply) else {
            last.debug_iterations_used = k;
            continue;
        };
        let fixed = SolverCandidate {
            candidate_id: format!("{}-d{k}", candidate.candidate_id),
            source: ex.code,
            strategy: current.strategy,
            origin: Origin::DebugFix,
            parent_ids: vec![current.candidate_id.clone()],
            patch: None,
            generator_model: model.model_id.clone(),
            reasoning: ex.reasoning,
        };
        let mut result = run(&fixed.source)?;
        result.debug_iterations_used = k;
        attempts.push(fixed.clone());
        current = fixed;
        let ok = result.status == ExecStatus::Ok;
        last = result;
        if ok {
            break;
        }
    }
    Ok(DebugOutcome { candidate: current, result: last, attempts })
}


/// Scores candidates by running them through the harness, debugging failures and
/// computing the configured feedback.
pub struct HarnessEvaluator {
    pub task: PdeTask,
    pub grid: GridSpec,
    pub inputs: SolutionField,
    pub reference: Option<SolutionField>,
    pub feedback: FeedbackType,
    pub limits: ExecutionLimits,
    pub command: GuestCommand,
    pub prompts: PromptSet,
    /// Model asked for corrected programs.
    pub debug_model: ModelChoice,
}

impl HarnessEvaluator {
    pub fn run(&self, source: &str) -> Result<ExecutionResult, HarnessError> {
        execute(source, &self.task, &self.grid, &self.inputs, &self.limits, &self.command)
    }
}

impl Evaluator for HarnessEvaluator {
    fn evaluate(&mut self, candidate: &SolverCandidate, gateway: &mut Gateway) -> Result<Evaluation, TournamentError> {
        let first = self.run(&candidate.source)?;
        let (final_candidate, result, debug_candidates) = if first.status == ExecStatus::Ok {
            (candidate.clone(), first, Vec::new())
        } else {
            let out = debug_loop(candidate, first, gateway, &self.prompts, &self.debug_model, &self.limits, |s| self.run(s))?;
            if out.result.status == ExecStatus::Ok {
                (out.candidate, out.result, out.attempts)
            } else {
                (candidate.clone(), out.result, out.attempts)
            }
        };
        let mut feedback = Vec::new();
        let mut score = None;
        let mut detail = result.detail.clone();
        if let Some(solution) = &result.solution {
            match evaluate_feedback(&self.feedback, &self.task, &self.grid, solution, &self.inputs, self.reference.as_ref()) {
                Ok(records) => {
                    score = self
                        .feedback
                        .primary_metric()
                        .and_then(|id| records.iter().find(|r| r.metric_id == id))
                        .map(|r| r.value);
                    feedback = records;
                }
                Err(e) => detail = format!("feedback unavailable: {e}"),
            }
        }
        Ok(Evaluation {
            candidate: final_candidate,
            status: result.status,
            feedback,
            score,
            diagnostics: result.diagnostics,
            detail,
            runtime_seconds: result.runtime_seconds,
            debug_iterations_used: result.debug_iterations_used,
            debug_candidates,
        })
    }
}
