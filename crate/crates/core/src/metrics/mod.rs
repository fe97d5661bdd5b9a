//! Feedback metrics: accuracy against a reference, discrete PDE residuals, CFL monitors
//! and the per-task invariant suite.
//!
//! Integrals use midpoint quadrature on the cell-centred grid. Time-resolved quantities
//! are reduced per sample (maximum over output times unless the formula sums over steps)
//! and then averaged over the batch; `per_sample` keeps the unreduced values.

mod invariants;
mod residual;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::domain::{GridSpec, PdeTask, SolutionField, TaskId};

pub use invariants::{invariant_metrics, InvariantConfig};
pub use residual::pde_residual;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: prediction {pred:?}, reference {reference:?}")]
    Shape { pred: Vec<usize>, reference: Vec<usize> },
    #[error("reference sample {0} has zero L2 norm")]
    ZeroNorm(usize),
    #[error("convergence data needs at least two entries")]
    TooFewLevels,
    #[error("errors must be positive, got {0}")]
    NonPositiveError(f64),
    #[error("grid spacings must be positive and strictly decreasing")]
    BadSpacing,
    #[error("{0} needs at least two output times")]
    TooFewSlices(TaskId),
    #[error("metric not defined for {0}")]
    Unsupported(TaskId),
    #[error("navier_stokes fields need density, velocity and pressure components, got {0:?}")]
    MissingComponents(Vec<String>),
    #[error("field contains non-finite values")]
    NonFinite,
    #[error("dt and dx must be positive")]
    NonPositiveStep,
    #[error("field shape {got:?} does not fit the task (expected {expected:?})")]
    FieldShape { expected: Vec<usize>, got: Vec<usize> },
}

/// One named metric value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub metric_id: String,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_sample: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, Value>,
}

impl FeedbackRecord {
    pub fn new(metric_id: &str, value: f64) -> Self {
        FeedbackRecord { metric_id: metric_id.into(), value, per_sample: None, metadata: BTreeMap::new() }
    }

    /// Batch-mean record from per-sample values.
    pub fn from_samples(metric_id: &str, per_sample: Vec<f64>) -> Self {
        let value = if per_sample.is_empty() { 0.0 } else { per_sample.iter().sum::<f64>() / per_sample.len() as f64 };
        FeedbackRecord { metric_id: metric_id.into(), value, per_sample: Some(per_sample), metadata: BTreeMap::new() }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackKind {
    Nrmse,
    Residual,
    None,
}

/// The signal shared with judges, plus optional extra catalog metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackType {
    pub kind: FeedbackKind,
    #[serde(default)]
    pub extra: Vec<String>,
}

impl FeedbackType {
    pub fn new(kind: FeedbackKind) -> Self {
        FeedbackType { kind, extra: Vec::new() }
    }

    pub fn requires_reference(&self) -> bool {
        self.kind == FeedbackKind::Nrmse
    }

    /// Metric id whose value ranks candidates, if any.
    pub fn primary_metric(&self) -> Option<&'static str> {
        match self.kind {
            FeedbackKind::Nrmse => Some("general.nrmse"),
            FeedbackKind::Residual => Some("general.residual"),
            FeedbackKind::None => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub metric_id: String,
    pub tasks: Vec<TaskId>,
    pub requires_reference: bool,
    pub signed: bool,
}

/// Every registered metric.
pub fn catalog() -> Vec<CatalogEntry> {
    use TaskId::*;
    let time_dependent = vec![Advection, Burgers, ReactionDiffusion, NavierStokes];
    let entry = |id: &str, tasks: Vec<TaskId>, requires_reference: bool, signed: bool| CatalogEntry {
        metric_id: id.into(),
        tasks,
        requires_reference,
        signed,
    };
    vec![
        entry("general.nrmse", TaskId::ALL.to_vec(), true, false),
        entry("general.residual", TaskId::ALL.to_vec(), false, false),
        entry("general.cfl_max", time_dependent, false, false),
        entry("advection.phase_error", vec![Advection], false, false),
        entry("advection.amplitude_error", vec![Advection], false, false),
        entry("advection.mass_drift", vec![Advection], false, false),
        entry("advection.l2_drift", vec![Advection], false, true),
        entry("burgers.entropy_violation", vec![Burgers], false, false),
        entry("burgers.tv_growth", vec![Burgers], false, false),
        entry("burgers.mean_drift", vec![Burgers], false, false),
        entry("rd.max_principle", vec![ReactionDiffusion], false, false),
        entry("rd.react_split_error", vec![ReactionDiffusion], false, false),
        entry("rd.stiffness_excess", vec![ReactionDiffusion], false, false),
        entry("ns.mass_drift", vec![NavierStokes], false, false),
        entry("ns.momentum_drift", vec![NavierStokes], false, false),
        entry("ns.energy_drift", vec![NavierStokes], false, false),
        entry("ns.positivity", vec![NavierStokes], false, false),
        entry("ns.entropy_violation", vec![NavierStokes], false, false),
        entry("ns.entropy_production", vec![NavierStokes], false, true),
        entry("ns.rh_defect", vec![NavierStokes], false, false),
        entry("darcy.eta_squared", vec![Darcy], false, false),
        entry("darcy.local_mass", vec![Darcy], false, false),
        entry("darcy.global_compatibility", vec![Darcy], false, false),
    ]
}

fn l2(values: impl Iterator<Item = f64>) -> f64 {
    values.map(|v| v * v).sum::<f64>().sqrt()
}

/// Batch mean of `||pred_s - ref_s||_2 / ||ref_s||_2`.
pub fn nrmse(pred: &SolutionField, reference: &SolutionField) -> Result<FeedbackRecord, MetricError> {
    if pred.shape() != reference.shape() {
        return Err(MetricError::Shape { pred: pred.shape().to_vec(), reference: reference.shape().to_vec() });
    }
    let mut per_sample = Vec::with_capacity(reference.batch());
    for (s, (p, r)) in pred.data.outer_iter().zip(reference.data.outer_iter()).enumerate() {
        let norm = l2(r.iter().copied());
        if norm == 0.0 {
            return Err(MetricError::ZeroNorm(s));
        }
        per_sample.push(l2(p.iter().zip(r.iter()).map(|(a, b)| a - b)) / norm);
    }
    Ok(FeedbackRecord::from_samples("general.nrmse", per_sample))
}

/// Empirical order from `(h, E)` pairs with `h` strictly decreasing; the mean of the
/// consecutive-pair estimates `log(E1/E2) / log(h1/h2)`.
pub fn convergence_order(samples: &[(f64, f64)]) -> Result<f64, MetricError> {
    if samples.len() < 2 {
        return Err(MetricError::TooFewLevels);
    }
    for &(h, e) in samples {
        if !(e > 0.0) {
            return Err(MetricError::NonPositiveError(e));
        }
        if !(h > 0.0) {
            return Err(MetricError::BadSpacing);
        }
    }
    let mut sum = 0.0;
    for w in samples.windows(2) {
        let ((h1, e1), (h2, e2)) = (w[0], w[1]);
        if !(h2 < h1) {
            return Err(MetricError::BadSpacing);
        }
        sum += (e1 / e2).ln() / (h1 / h2).ln();
    }
    Ok(sum / (samples.len() - 1) as f64)
}

/// Largest CFL-type ratio of `field` for step `dt` on spacing `dx`.
pub fn cfl_max(task: &PdeTask, field: &SolutionField, dt: f64, dx: f64) -> Result<FeedbackRecord, MetricError> {
    if !(dt > 0.0 && dx > 0.0) {
        return Err(MetricError::NonPositiveStep);
    }
    let (value, kind) = match task.task_id() {
        TaskId::Advection => (task.param("beta").abs() * dt / dx, "advective"),
        TaskId::Burgers => (field.data.iter().fold(0.0f64, |m, v| m.max(v.abs())) * dt / dx, "advective"),
        TaskId::ReactionDiffusion => (task.param("nu") * dt / (dx * dx), "diffusive"),
        TaskId::NavierStokes => {
            let view = NsView::new(field)?;
            let gamma = task.param("gamma");
            let mut speed = 0.0f64;
            for b in 0..view.batch {
                for t in 0..view.steps {
                    for j in 0..view.n {
                        let (rho, v, p) = view.at(b, t, j);
                        speed = speed.max(v.abs() + (gamma * p / rho).sqrt());
                    }
                }
            }
            (speed * dt / dx, "acoustic")
        }
        TaskId::Darcy => return Err(MetricError::Unsupported(TaskId::Darcy)),
    };
    Ok(FeedbackRecord::new("general.cfl_max", value).with_meta("kind", kind))
}

/// Metrics requested by `feedback` for one executed candidate.
pub fn evaluate_feedback(
    feedback: &FeedbackType,
    task: &PdeTask,
    grid: &GridSpec,
    field: &SolutionField,
    inputs: &SolutionField,
    reference: Option<&SolutionField>,
) -> Result<Vec<FeedbackRecord>, MetricError> {
    let mut out = Vec::new();
    match feedback.kind {
        FeedbackKind::Nrmse => {
            if let Some(r) = reference {
                out.push(nrmse(field, r)?);
            }
        }
        FeedbackKind::Residual => out.push(pde_residual(task, field, grid, inputs)?),
        FeedbackKind::None => {}
    }
    if !feedback.extra.is_empty() {
        let all = invariant_metrics(task, field, grid, inputs, &InvariantConfig::default())?;
        for id in &feedback.extra {
            if id == "general.residual" && feedback.kind != FeedbackKind::Residual {
                out.push(pde_residual(task, field, grid, inputs)?);
            } else if id == "general.cfl_max" && task.time_dependent() && grid.t_steps() > 0 {
                out.push(cfl_max(task, field, grid.t_coordinates[1] - grid.t_coordinates[0], grid.dx())?);
            } else if let Some(r) = all.iter().find(|r| &r.metric_id == id) {
                out.push(r.clone());
            }
        }
    }
    Ok(out)
}

/// Read-only accessor for `[batch, T+1, N]` scalar fields.
pub(crate) struct ScalarView<'a> {
    pub data: &'a ndarray::ArrayD<f64>,
    pub batch: usize,
    pub steps: usize,
    pub n: usize,
}

impl<'a> ScalarView<'a> {
    pub fn new(field: &'a SolutionField) -> Result<Self, MetricError> {
        let s = field.shape();
        if s.len() != 3 {
            return Err(MetricError::FieldShape { expected: vec![0, 0, 0], got: s.to_vec() });
        }
        Ok(ScalarView { data: &field.data, batch: s[0], steps: s[1], n: s[2] })
    }

    pub fn row(&self, b: usize, t: usize) -> Vec<f64> {
        (0..self.n).map(|j| self.data[[b, t, j]]).collect()
    }
}

/// Read-only accessor for `[batch, T+1, N, 3]` Navier-Stokes fields.
pub(crate) struct NsView<'a> {
    pub data: &'a ndarray::ArrayD<f64>,
    pub batch: usize,
    pub steps: usize,
    pub n: usize,
}

impl<'a> NsView<'a> {
    pub fn new(field: &'a SolutionField) -> Result<Self, MetricError> {
        let s = field.shape();
        if s.len() != 4 || s[3] != 3 {
            return Err(MetricError::MissingComponents(field.components.clone()));
        }
        let c = &field.components;
        if c.len() != 3 || c[0] != "density" || c[1] != "velocity" || c[2] != "pressure" {
            return Err(MetricError::MissingComponents(field.components.clone()));
        }
        Ok(NsView { data: &field.data, batch: s[0], steps: s[1], n: s[2] })
    }

    pub fn at(&self, b: usize, t: usize, j: usize) -> (f64, f64, f64) {
        (self.data[[b, t, j, 0]], self.data[[b, t, j, 1]], self.data[[b, t, j, 2]])
    }
}

pub(crate) fn check_finite(field: &SolutionField) -> Result<(), MetricError> {
    if field.is_finite() {
        Ok(())
    } else {
        Err(MetricError::NonFinite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};

    fn random_field(rng: &mut impl Rng, shape: &[usize]) -> SolutionField {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        SolutionField::scalar(ArrayD::from_shape_vec(IxDyn(shape), data).unwrap())
    }

    #[test]
    fn nrmse_examples() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let r = random_field(&mut rng, &[3, 2, 16]);
        assert_eq!(nrmse(&r, &r).unwrap().value, 0.0);
        let twice = SolutionField::scalar(&r.data * 2.0);
        assert_eq!(nrmse(&twice, &r).unwrap().value, 1.0);
        let zero = SolutionField::zeros(&[1, 2, 4], vec!["u".into()]);
        assert_eq!(nrmse(&zero, &zero), Err(MetricError::ZeroNorm(0)));
        let other = SolutionField::zeros(&[3, 2, 8], vec!["u".into()]);
        assert!(matches!(nrmse(&other, &r), Err(MetricError::Shape { .. })));
    }

    #[test]
    fn nrmse_matches_loop_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let p = random_field(&mut rng, &[4, 3, 64]);
        let r = random_field(&mut rng, &[4, 3, 64]);
        let mut acc = 0.0;
        for s in 0..4 {
            let (mut num, mut den) = (0.0, 0.0);
            for t in 0..3 {
                for j in 0..64 {
                    let d = p.data[[s, t, j]] - r.data[[s, t, j]];
                    num += d * d;
                    den += r.data[[s, t, j]] * r.data[[s, t, j]];
                }
            }
            acc += (num / den).sqrt();
        }
        assert!((nrmse(&p, &r).unwrap().value - acc / 4.0).abs() < 1e-12);
    }

    #[test]
    fn convergence_examples() {
        assert_eq!(convergence_order(&[(1.0 / 128.0, 4e-2), (1.0 / 256.0, 1e-2)]).unwrap(), 2.0);
        assert_eq!(convergence_order(&[(0.1, 0.3), (0.05, 0.3)]).unwrap(), 0.0);
        assert!(convergence_order(&[(0.1, 0.0), (0.05, 0.3)]).is_err());
        assert!(convergence_order(&[(0.1, 1.0), (0.1, 0.3)]).is_err());
        assert!(convergence_order(&[(0.1, 1.0)]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn order_is_scale_invariant(c in 1e-6f64..1e3, e1 in 1e-4f64..1.0, e2 in 1e-4f64..1.0, e3 in 1e-4f64..1.0) {
            let data = [(0.1, e1), (0.05, e2), (0.025, e3)];
            let scaled: Vec<_> = data.iter().map(|&(h, e)| (h, c * e)).collect();
            let a = convergence_order(&data).unwrap();
            let b = convergence_order(&scaled).unwrap();
            proptest::prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
        }
    }

    #[test]
    fn cfl_examples() {
        let mut over = BTreeMap::new();
        over.insert("beta".to_string(), 0.1);
        let adv = PdeTask::registry_get(TaskId::Advection, Some(&over)).unwrap();
        let f = SolutionField::zeros(&[1, 2, 8], vec!["u".into()]);
        assert!((cfl_max(&adv, &f, 0.01, 0.01).unwrap().value - 0.1).abs() < 1e-15);
        let burgers = PdeTask::registry_get(TaskId::Burgers, None).unwrap();
        assert_eq!(cfl_max(&burgers, &f, 0.01, 0.01).unwrap().value, 0.0);
        let ns = PdeTask::registry_get(TaskId::NavierStokes, None).unwrap();
        let mut g = SolutionField::zeros(&[1, 2, 8, 3], ns.components());
        for t in 0..2 {
            for j in 0..8 {
                g.data[[0, t, j, 0]] = 1.0;
                g.data[[0, t, j, 2]] = 1.0;
            }
        }
        let v = cfl_max(&ns, &g, 0.3, 1.0).unwrap().value;
        assert!((v - 0.3 * (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let darcy = PdeTask::registry_get(TaskId::Darcy, None).unwrap();
        assert!(cfl_max(&darcy, &f, 0.1, 0.1).is_err());
    }

    #[test]
    fn catalog_ids_are_unique() {
        let cat = catalog();
        let ids: std::collections::BTreeSet<_> = cat.iter().map(|c| c.metric_id.clone()).collect();
        assert_eq!(ids.len(), cat.len());
    }
}
