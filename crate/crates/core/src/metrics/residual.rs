use super::{check_finite, FeedbackRecord, MetricError, NsView, ScalarView};
use crate::domain::{GridSpec, PdeTask, SolutionField, TaskId};
use crate::reference::darcy::DarcyOperator;

fn rms(sum_sq: f64, count: usize) -> f64 {
    if count == 0 {
        0.0
    } else {
        (sum_sq / count as f64).sqrt()
    }
}

/// Root-mean-square of the discrete residual: central differences in space with periodic
/// wrap, forward differences between stored output times, spatial terms taken at `t^n`.
/// Systems report the sum of the per-equation values. `inputs` is only read for Darcy,
/// where it carries the coefficient field.
pub fn pde_residual(
    task: &PdeTask,
    field: &SolutionField,
    grid: &GridSpec,
    inputs: &SolutionField,
) -> Result<FeedbackRecord, MetricError> {
    check_finite(field)?;
    let id = task.task_id();
    if id != TaskId::Darcy && field.shape().get(1).copied().unwrap_or(0) < 2 {
        return Err(MetricError::TooFewSlices(id));
    }
    let dx = grid.dx();
    let times = &grid.t_coordinates;
    let per_sample = match id {
        TaskId::Advection | TaskId::Burgers | TaskId::ReactionDiffusion => {
            let v = ScalarView::new(field)?;
            if v.steps != times.len() {
                return Err(MetricError::FieldShape { expected: vec![v.batch, times.len(), v.n], got: field.shape().to_vec() });
            }
            let n = v.n;
            (0..v.batch)
                .map(|b| {
                    let mut sum = 0.0;
                    for t in 0..v.steps - 1 {
                        let dt = times[t + 1] - times[t];
                        let u = v.row(b, t);
                        for j in 0..n {
                            let (l, c, r) = (u[(j + n - 1) % n], u[j], u[(j + 1) % n]);
                            let ut = (v.data[[b, t + 1, j]] - c) / dt;
                            let res = match id {
                                TaskId::Advection => ut + task.param("beta") * (r - l) / (2.0 * dx),
                                TaskId::Burgers => {
                                    ut + (r * r - l * l) / (4.0 * dx) - task.param("nu") * (l - 2.0 * c + r) / (dx * dx)
                                }
                                _ => {
                                    ut - task.param("nu") * (l - 2.0 * c + r) / (dx * dx)
                                        - task.param("rho") * c * (1.0 - c)
                                }
                            };
                            sum += res * res;
                        }
                    }
                    rms(sum, (v.steps - 1) * n)
                })
                .collect()
        }
        TaskId::NavierStokes => ns_residual(task, field, grid)?,
        TaskId::Darcy => darcy_residual(task, field, grid, inputs)?,
    };
    Ok(FeedbackRecord::from_samples("general.residual", per_sample).with_meta("stencil", "central_space_forward_time"))
}

fn ns_residual(task: &PdeTask, field: &SolutionField, grid: &GridSpec) -> Result<Vec<f64>, MetricError> {
    let v = NsView::new(field)?;
    let gamma = task.param("gamma");
    let mu = task.param("zeta") + 4.0 / 3.0 * task.param("eta");
    let dx = grid.dx();
    let times = &grid.t_coordinates;
    let n = v.n;
    let mut out = Vec::with_capacity(v.batch);
    for b in 0..v.batch {
        let mut sums = [0.0f64; 3];
        for t in 0..v.steps - 1 {
            let dt = times[t + 1] - times[t];
            let cons = |tt: usize, j: usize| {
                let (rho, vel, p) = v.at(b, tt, j);
                [rho, rho * vel, p / (gamma - 1.0) + 0.5 * rho * vel * vel]
            };
            let vel = |j: usize| v.at(b, t, j).1;
            let sigma = |j: usize| mu * (vel((j + 1) % n) - vel((j + n - 1) % n)) / (2.0 * dx);
            let flux = |j: usize| {
                let (rho, vv, p) = v.at(b, t, j);
                let e = p / (gamma - 1.0) + 0.5 * rho * vv * vv;
                let s = sigma(j);
                [rho * vv, rho * vv * vv + p - s, (e + p) * vv - vv * s]
            };
            for j in 0..n {
                let (now, next) = (cons(t, j), cons(t + 1, j));
                let (fl, fr) = (flux((j + n - 1) % n), flux((j + 1) % n));
                for e in 0..3 {
                    let r = (next[e] - now[e]) / dt + (fr[e] - fl[e]) / (2.0 * dx);
                    sums[e] += r * r;
                }
            }
        }
        out.push(sums.iter().map(|&s| rms(s, (v.steps - 1) * n)).sum());
    }
    Ok(out)
}

pub(crate) fn darcy_operator(a: &[f64], n: usize, h: f64) -> Result<DarcyOperator, MetricError> {
    DarcyOperator::new(a, n, h).map_err(|_| MetricError::FieldShape { expected: vec![n, n], got: vec![a.len()] })
}

pub(crate) fn darcy_samples(field: &SolutionField, inputs: &SolutionField) -> Result<(usize, usize), MetricError> {
    let s = field.shape();
    if s.len() != 3 || s[1] != s[2] || inputs.shape() != s {
        return Err(MetricError::Shape { pred: s.to_vec(), reference: inputs.shape().to_vec() });
    }
    Ok((s[0], s[1]))
}

fn darcy_residual(task: &PdeTask, field: &SolutionField, grid: &GridSpec, inputs: &SolutionField) -> Result<Vec<f64>, MetricError> {
    let (batch, n) = darcy_samples(field, inputs)?;
    let beta = task.param("beta_source");
    let h = grid.dx();
    let mut out = Vec::with_capacity(batch);
    for b in 0..batch {
        let a: Vec<f64> = inputs.data.index_axis(ndarray::Axis(0), b).iter().copied().collect();
        let u: Vec<f64> = field.data.index_axis(ndarray::Axis(0), b).iter().copied().collect();
        let au = darcy_operator(&a, n, h)?.apply(&u);
        out.push(rms(au.iter().map(|v| (beta - v) * (beta - v)).sum(), n * n));
    }
    Ok(out)
}
