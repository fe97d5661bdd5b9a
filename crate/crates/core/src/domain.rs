//! Benchmark PDE tasks, grids and solution tensors.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("parameter `{symbol}` is not defined for task {task}")]
    UnknownSymbol { task: TaskId, symbol: String },
    #[error("parameter `{symbol}` must be positive, got {value}")]
    NonPositive { symbol: String, value: f64 },
    #[error("parameter `{symbol}` must be finite, got {value}")]
    NonFinite { symbol: String, value: f64 },
    #[error("adiabatic index must exceed 1, got {0}")]
    BadGamma(f64),
    #[error("task {0} is steady-state and takes no time grid")]
    SteadyStateTime(TaskId),
    #[error("task {0} needs at least one output time step")]
    MissingTime(TaskId),
    #[error("expected {expected} spatial axes, got {got}")]
    AxisCount { expected: usize, got: usize },
    #[error("need at least 8 points per axis, got {0}")]
    TooFewPoints(usize),
    #[error("end time must be positive and finite, got {0}")]
    BadEndTime(f64),
    #[error("batch size must be at least 1")]
    EmptyBatch,
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    Advection,
    Burgers,
    ReactionDiffusion,
    NavierStokes,
    Darcy,
}

impl TaskId {
    pub const ALL: [TaskId; 5] = [
        TaskId::Advection,
        TaskId::Burgers,
        TaskId::ReactionDiffusion,
        TaskId::NavierStokes,
        TaskId::Darcy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::Advection => "advection",
            TaskId::Burgers => "burgers",
            TaskId::ReactionDiffusion => "reaction_diffusion",
            TaskId::NavierStokes => "navier_stokes",
            TaskId::Darcy => "darcy",
        }
    }

    /// Parameter symbols with their default values.
    pub fn default_params(self) -> &'static [(&'static str, f64)] {
        match self {
            TaskId::Advection => &[("beta", 0.1)],
            TaskId::Burgers => &[("nu", 0.01)],
            TaskId::ReactionDiffusion => &[("nu", 0.5), ("rho", 1.0)],
            TaskId::NavierStokes => &[("eta", 0.1), ("zeta", 0.1), ("gamma", 5.0 / 3.0)],
            TaskId::Darcy => &[("beta_source", 1.0)],
        }
    }

    pub fn is_time_dependent(self) -> bool {
        self != TaskId::Darcy
    }

    pub fn spatial_dim(self) -> usize {
        if self == TaskId::Darcy {
            2
        } else {
            1
        }
    }

    /// Default output horizon for time-dependent tasks.
    pub fn default_t_end(self) -> Option<f64> {
        match self {
            TaskId::Advection => Some(2.0),
            TaskId::Burgers | TaskId::ReactionDiffusion | TaskId::NavierStokes => Some(1.0),
            TaskId::Darcy => None,
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskId {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| DomainError::UnknownTask(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Periodic,
    DirichletZero,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ArgKind {
    /// Tensor argument; `shape` is symbolic (`batch_size`, `N`, `T+1`).
    Tensor { shape: Vec<String> },
    Scalar,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignatureArg {
    pub name: String,
    #[serde(flatten)]
    pub kind: ArgKind,
}

/// Guest solver calling convention for a task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverSignature {
    pub args: Vec<SignatureArg>,
    pub output_shape: Vec<String>,
    pub components: Vec<String>,
}

fn tensor(name: &str, shape: &[&str]) -> SignatureArg {
    SignatureArg {
        name: name.to_string(),
        kind: ArgKind::Tensor { shape: shape.iter().map(|s| s.to_string()).collect() },
    }
}

fn scalar(name: &str) -> SignatureArg {
    SignatureArg { name: name.to_string(), kind: ArgKind::Scalar }
}

fn signature(task: TaskId) -> SolverSignature {
    let strings = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    match task {
        TaskId::Advection => SolverSignature {
            args: vec![tensor("u0_batch", &["batch_size", "N"]), tensor("t_coordinate", &["T+1"]), scalar("beta")],
            output_shape: strings(&["batch_size", "T+1", "N"]),
            components: strings(&["u"]),
        },
        TaskId::Burgers => SolverSignature {
            args: vec![tensor("u0_batch", &["batch_size", "N"]), tensor("t_coordinate", &["T+1"]), scalar("nu")],
            output_shape: strings(&["batch_size", "T+1", "N"]),
            components: strings(&["u"]),
        },
        TaskId::ReactionDiffusion => SolverSignature {
            args: vec![
                tensor("u0_batch", &["batch_size", "N"]),
                tensor("t_coordinate", &["T+1"]),
                scalar("nu"),
                scalar("rho"),
            ],
            output_shape: strings(&["batch_size", "T+1", "N"]),
            components: strings(&["u"]),
        },
        TaskId::NavierStokes => SolverSignature {
            args: vec![
                tensor("Vx0", &["batch_size", "N"]),
                tensor("density0", &["batch_size", "N"]),
                tensor("pressure0", &["batch_size", "N"]),
                tensor("t_coordinate", &["T+1"]),
                scalar("eta"),
                scalar("zeta"),
            ],
            output_shape: strings(&["batch_size", "T+1", "N", "3"]),
            components: strings(&["density", "velocity", "pressure"]),
        },
        TaskId::Darcy => SolverSignature {
            args: vec![tensor("a", &["batch_size", "N", "N"])],
            output_shape: strings(&["batch_size", "N", "N"]),
            components: strings(&["u"]),
        },
    }
}

/// Serialized form; deserialization goes through [`PdeTask::new`] validation.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawTask {
    task_id: TaskId,
    #[serde(default)]
    params: BTreeMap<String, f64>,
}

/// One of the five benchmark problems with a validated parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTask")]
pub struct PdeTask {
    task_id: TaskId,
    spatial_dim: usize,
    params: BTreeMap<String, f64>,
    domain: Vec<(f64, f64)>,
    boundary: Boundary,
    time_dependent: bool,
    description_template: String,
    solver_signature: SolverSignature,
}

impl TryFrom<RawTask> for PdeTask {
    type Error = DomainError;

    fn try_from(raw: RawTask) -> Result<Self, Self::Error> {
        PdeTask::new(raw.task_id, &raw.params)
    }
}

impl PdeTask {
    /// Builds a task with default parameters, replacing any listed in `overrides`.
    pub fn new(task_id: TaskId, overrides: &BTreeMap<String, f64>) -> Result<Self, DomainError> {
        let mut params: BTreeMap<String, f64> =
            task_id.default_params().iter().map(|(k, v)| (k.to_string(), *v)).collect();
        for (symbol, value) in overrides {
            match params.get_mut(symbol) {
                Some(slot) => *slot = *value,
                None => return Err(DomainError::UnknownSymbol { task: task_id, symbol: symbol.clone() }),
            }
        }
        for (symbol, &value) in &params {
            if !value.is_finite() {
                return Err(DomainError::NonFinite { symbol: symbol.clone(), value });
            }
            if matches!(symbol.as_str(), "nu" | "eta" | "zeta") && value <= 0.0 {
                return Err(DomainError::NonPositive { symbol: symbol.clone(), value });
            }
        }
        if let Some(&gamma) = params.get("gamma") {
            if gamma <= 1.0 {
                return Err(DomainError::BadGamma(gamma));
            }
        }
        let domain = match task_id {
            TaskId::NavierStokes => vec![(-1.0, 1.0)],
            TaskId::Darcy => vec![(0.0, 1.0), (0.0, 1.0)],
            _ => vec![(0.0, 1.0)],
        };
        let boundary = if task_id == TaskId::Darcy { Boundary::DirichletZero } else { Boundary::Periodic };
        Ok(PdeTask {
            task_id,
            spatial_dim: task_id.spatial_dim(),
            params,
            domain,
            boundary,
            time_dependent: task_id.is_time_dependent(),
            description_template: format!("description_{}", task_id.as_str()),
            solver_signature: signature(task_id),
        })
    }

    /// Registry lookup with default parameters.
    pub fn registry_get(task_id: TaskId, overrides: Option<&BTreeMap<String, f64>>) -> Result<Self, DomainError> {
        PdeTask::new(task_id, overrides.unwrap_or(&BTreeMap::new()))
    }

    pub fn task_id(&self) -> TaskId {
        self.task_id
    }

    pub fn spatial_dim(&self) -> usize {
        self.spatial_dim
    }

    pub fn params(&self) -> &BTreeMap<String, f64> {
        &self.params
    }

    /// Parameter value; every symbol of the task is guaranteed present.
    pub fn param(&self, symbol: &str) -> f64 {
        match self.params.get(symbol) {
            Some(v) => *v,
            None => panic!("task {} has no parameter `{symbol}`", self.task_id),
        }
    }

    pub fn domain(&self) -> &[(f64, f64)] {
        &self.domain
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn time_dependent(&self) -> bool {
        self.time_dependent
    }

    pub fn description_template(&self) -> &str {
        &self.description_template
    }

    pub fn solver_signature(&self) -> &SolverSignature {
        &self.solver_signature
    }

    pub fn components(&self) -> Vec<String> {
        self.solver_signature.components.clone()
    }

    /// Shape of the initial data handed to a solver.
    pub fn input_shape(&self, grid: &GridSpec, batch: usize) -> Vec<usize> {
        let n = &grid.points_per_axis;
        match self.task_id {
            TaskId::NavierStokes => vec![batch, n[0], 3],
            TaskId::Darcy => vec![batch, n[0], n[1]],
            _ => vec![batch, n[0]],
        }
    }

    /// Shape a solver must return.
    pub fn output_shape(&self, grid: &GridSpec, batch: usize) -> Vec<usize> {
        let n = &grid.points_per_axis;
        let steps = grid.t_coordinates.len();
        match self.task_id {
            TaskId::NavierStokes => vec![batch, steps, n[0], 3],
            TaskId::Darcy => vec![batch, n[0], n[1]],
            _ => vec![batch, steps, n[0]],
        }
    }
}

/// Entry of the JSON task registry listing.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RegistryEntry {
    pub task_id: TaskId,
    pub params: BTreeMap<String, f64>,
    pub domain: Vec<(f64, f64)>,
    pub boundary: Boundary,
}

pub fn registry_manifest() -> Vec<RegistryEntry> {
    TaskId::ALL
        .into_iter()
        .map(|id| {
            let task = PdeTask::registry_get(id, None).expect("defaults are valid");
            RegistryEntry {
                task_id: id,
                params: task.params.clone(),
                domain: task.domain.clone(),
                boundary: task.boundary,
            }
        })
        .collect()
}

/// Uniform cell-centred grid plus output times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub points_per_axis: Vec<usize>,
    pub dx_per_axis: Vec<f64>,
    pub lower: Vec<f64>,
    pub t_coordinates: Vec<f64>,
}

impl GridSpec {
    pub fn n(&self) -> usize {
        self.points_per_axis[0]
    }

    pub fn dx(&self) -> f64 {
        self.dx_per_axis[0]
    }

    /// Number of output steps after the initial slice.
    pub fn t_steps(&self) -> usize {
        self.t_coordinates.len().saturating_sub(1)
    }

    /// Cell-centre coordinates along `axis`.
    pub fn centers(&self, axis: usize) -> Vec<f64> {
        let dx = self.dx_per_axis[axis];
        let lo = self.lower[axis];
        (0..self.points_per_axis[axis]).map(|j| lo + (j as f64 + 0.5) * dx).collect()
    }

    pub fn length(&self, axis: usize) -> f64 {
        self.dx_per_axis[axis] * self.points_per_axis[axis] as f64
    }
}

/// Builds the grid for `task`. `t_steps`/`t_end` must be given for time-dependent tasks only.
pub fn make_grid(task: &PdeTask, n: &[usize], t_steps: Option<usize>, t_end: Option<f64>) -> Result<GridSpec, DomainError> {
    if n.len() != task.spatial_dim() {
        return Err(DomainError::AxisCount { expected: task.spatial_dim(), got: n.len() });
    }
    if let Some(&bad) = n.iter().find(|&&p| p < 8) {
        return Err(DomainError::TooFewPoints(bad));
    }
    let t_coordinates = if task.time_dependent() {
        let steps = t_steps.ok_or(DomainError::MissingTime(task.task_id()))?;
        if steps < 1 {
            return Err(DomainError::MissingTime(task.task_id()));
        }
        let end = t_end.or(task.task_id().default_t_end()).unwrap_or(1.0);
        if !(end.is_finite() && end > 0.0) {
            return Err(DomainError::BadEndTime(end));
        }
        let mut t: Vec<f64> = (0..=steps).map(|i| end * i as f64 / steps as f64).collect();
        t[steps] = end;
        t
    } else {
        if t_steps.is_some() || t_end.is_some() {
            return Err(DomainError::SteadyStateTime(task.task_id()));
        }
        Vec::new()
    };
    let dx_per_axis = task
        .domain()
        .iter()
        .zip(n)
        .map(|(&(lo, hi), &points)| (hi - lo) / points as f64)
        .collect();
    Ok(GridSpec {
        points_per_axis: n.to_vec(),
        dx_per_axis,
        lower: task.domain().iter().map(|&(lo, _)| lo).collect(),
        t_coordinates,
    })
}

/// A solution (or initial-data) tensor with named components.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionField {
    pub data: ArrayD<f64>,
    pub components: Vec<String>,
}

impl SolutionField {
    pub fn new(data: ArrayD<f64>, components: Vec<String>) -> Self {
        SolutionField { data, components }
    }

    pub fn scalar(data: ArrayD<f64>) -> Self {
        SolutionField { data, components: vec!["u".to_string()] }
    }

    pub fn zeros(shape: &[usize], components: Vec<String>) -> Self {
        SolutionField { data: ArrayD::zeros(IxDyn(shape)), components }
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn batch(&self) -> usize {
        self.data.shape().first().copied().unwrap_or(0)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_shape(&self, expected: &[usize]) -> Result<(), DomainError> {
        if self.shape() == expected {
            Ok(())
        } else {
            Err(DomainError::Shape { expected: expected.to_vec(), got: self.shape().to_vec() })
        }
    }
}
