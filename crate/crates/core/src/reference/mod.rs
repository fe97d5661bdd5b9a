//! Trusted reference solvers for the five benchmark tasks.
//!
//! Each solver consumes the initial slice produced by [`crate::sampling`] and returns
//! the full solution tensor on the requested grid. Time-dependent solvers substep
//! every output interval with uniform internal steps so each output time is hit
//! exactly, and abort with [`ReferenceError::Unstable`] on the first non-finite state.

mod advection;
pub mod bundle;
mod burgers;
pub mod darcy;
mod navier_stokes;
pub mod reaction;

use std::thread;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DomainError, GridSpec, PdeTask, SolutionField, TaskId};

pub use advection::{solve_advection, AdvectionScheme};
pub use burgers::{rusanov_muscl_rhs, solve_burgers, total_variation};
pub use navier_stokes::{conserved, primitive, rusanov_flux, solve_navier_stokes, NsState};
pub use reaction::{
    diffusion_explicit_step, dt_max_diffusion, reaction_exact_step, reaction_naive_step, solve_reaction_diffusion,
    ReactionFormula, RdOptions, Splitting,
};

#[derive(Debug, Error)]
pub enum ReferenceError {
    #[error("instability in sample {sample}: non-finite state after internal step {step} (t = {time:.6e})")]
    Unstable { sample: usize, step: usize, time: f64 },
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("invalid reference config: {0}")]
    Config(String),
    #[error("linear solve failed: {0}")]
    Linear(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Knobs for the reference solvers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceConfig {
    /// Internal grid refinement relative to the requested grid.
    pub oversample_factor: usize,
    /// Fraction of the diffusive bound `0.25 dx^2 / nu` used as the time step.
    pub diffusion_safety: f64,
    /// Advective CFL number.
    pub advective_safety: f64,
    pub advection_scheme: AdvectionScheme,
    pub splitting: Splitting,
    /// Denominator guard of the logistic reaction step.
    pub reaction_eps: f64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig {
            oversample_factor: 1,
            diffusion_safety: 1.0,
            advective_safety: 0.5,
            advection_scheme: AdvectionScheme::ExactSpectral,
            splitting: Splitting::Strang,
            reaction_eps: 1e-300,
        }
    }
}

impl ReferenceConfig {
    /// Per-task defaults (Navier-Stokes runs on a 4x refined grid).
    pub fn for_task(task: TaskId) -> Self {
        let oversample_factor = if task == TaskId::NavierStokes { 4 } else { 1 };
        ReferenceConfig { oversample_factor, ..ReferenceConfig::default() }
    }

    pub fn validate(&self) -> Result<(), ReferenceError> {
        if self.oversample_factor < 1 {
            return Err(ReferenceError::Config("oversample_factor must be >= 1".into()));
        }
        for (name, v) in [("diffusion_safety", self.diffusion_safety), ("advective_safety", self.advective_safety)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(ReferenceError::Config(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        if !(self.reaction_eps > 0.0) {
            return Err(ReferenceError::Config("reaction_eps must be positive".into()));
        }
        Ok(())
    }

    /// Short scheme tag recorded in bundle manifests.
    pub fn scheme_tag(&self, task: TaskId) -> String {
        match task {
            TaskId::Advection => match self.advection_scheme {
                AdvectionScheme::ExactSpectral => "exact_spectral".into(),
                AdvectionScheme::SecondOrderFv => "second_order_fv".into(),
            },
            TaskId::Burgers => format!("muscl_rusanov_ssprk2_x{}", self.oversample_factor),
            TaskId::ReactionDiffusion => format!(
                "{}_exact_reaction_explicit_diffusion_x{}",
                match self.splitting {
                    Splitting::Strang => "strang",
                    Splitting::Lie => "lie",
                },
                self.oversample_factor
            ),
            TaskId::NavierStokes => format!("rusanov_first_order_viscous_x{}", self.oversample_factor),
            TaskId::Darcy => "five_point_fv_banded_cholesky".into(),
        }
    }
}

/// Number of uniform substeps needed to cover `span` with steps no larger than `dt_max`.
pub(crate) fn substeps(span: f64, dt_max: f64) -> usize {
    ((span / dt_max).ceil() as usize).max(1)
}

/// Runs `f` on every batch entry, spreading work over the available cores.
/// Results come back in batch order.
pub(crate) fn par_batch<T, F>(batch: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(batch.max(1));
    if workers <= 1 {
        return (0..batch).map(&f).collect();
    }
    let f = &f;
    let mut slots: Vec<Option<T>> = (0..batch).map(|_| None).collect();
    thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| scope.spawn(move || (w..batch).step_by(workers).map(|b| (b, f(b))).collect::<Vec<_>>()))
            .collect();
        for h in handles {
            for (b, v) in h.join().expect("reference worker panicked") {
                slots[b] = Some(v);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every batch entry solved")).collect()
}

/// Reference solution of `task` on `grid` from `inputs` (initial slice or Darcy coefficient).
pub fn solve_reference(
    task: &PdeTask,
    grid: &GridSpec,
    inputs: &SolutionField,
    cfg: &ReferenceConfig,
) -> Result<SolutionField, ReferenceError> {
    cfg.validate()?;
    let batch = inputs.batch();
    inputs.expect_shape(&task.input_shape(grid, batch))?;
    let out = match task.task_id() {
        TaskId::Advection => solve_advection(task.param("beta"), grid, inputs, cfg.advection_scheme, cfg.advective_safety)?,
        TaskId::Burgers => solve_burgers(task.param("nu"), grid, inputs, cfg)?,
        TaskId::ReactionDiffusion => {
            let opts = RdOptions {
                splitting: cfg.splitting,
                reaction: ReactionFormula::Stable { eps: cfg.reaction_eps },
                dt_factor: cfg.diffusion_safety,
            };
            solve_reaction_diffusion(task.param("nu"), task.param("rho"), grid, inputs, cfg.oversample_factor, &opts)?.0
        }
        TaskId::NavierStokes => solve_navier_stokes(task, grid, inputs, cfg)?,
        TaskId::Darcy => darcy::solve_darcy(task.param("beta_source"), grid, inputs)?,
    };
    debug_assert_eq!(out.shape(), task.output_shape(grid, batch).as_slice());
    Ok(out)
}

/// Assembles per-sample `[T+1][N]` trajectories into a `[batch, T+1, N]` field.
pub(crate) fn stack_trajectories(trajectories: Vec<Vec<Vec<f64>>>, components: Vec<String>) -> SolutionField {
    let batch = trajectories.len();
    let steps = trajectories.first().map_or(0, |t| t.len());
    let n = trajectories.first().and_then(|t| t.first()).map_or(0, |s| s.len());
    let mut data = Vec::with_capacity(batch * steps * n);
    for traj in trajectories {
        for slice in traj {
            data.extend(slice);
        }
    }
    SolutionField::new(ArrayD::from_shape_vec(IxDyn(&[batch, steps, n]), data).expect("consistent shapes"), components)
}

/// Row `b` of a `[batch, N]` initial slice.
pub(crate) fn initial_row(inputs: &SolutionField, b: usize) -> Vec<f64> {
    let n = inputs.shape()[1];
    (0..n).map(|j| inputs.data[[b, j]]).collect()
}
