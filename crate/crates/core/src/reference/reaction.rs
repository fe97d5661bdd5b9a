//! Fisher-KPP reaction-diffusion: logistic reaction steps and the split solver.

use serde::{Deserialize, Serialize};

use super::{initial_row, par_batch, stack_trajectories, substeps, ReferenceError};
use crate::domain::{GridSpec, SolutionField};
use crate::spectral::{refine, restrict};

/// Exact logistic flow `u' = rho u (1 - u)` over `dt`, written to avoid cancellation:
/// `1 / (1 + exp(-rho dt) (1 - u) / (u + eps))`.
///
/// `u = 1` maps to exactly 1; `u = 0` maps to at most `eps exp(rho dt)`.
#[inline]
pub fn reaction_exact_step(u: f64, dt: f64, rho: f64, eps: f64) -> f64 {
    1.0 / (1.0 + (-rho * dt).exp() * (1.0 - u) / (u + eps))
}

/// The textbook form `u / (u + (1 - u) exp(-rho dt))`; undefined at `u = 0` when the
/// exponential underflows.
#[inline]
pub fn reaction_naive_step(u: f64, dt: f64, rho: f64) -> f64 {
    u / (u + (1.0 - u) * (-rho * dt).exp())
}

/// Largest stable explicit diffusion step, `safety * 0.25 * dx^2 / nu`.
pub fn dt_max_diffusion(dx: f64, nu: f64, safety: f64) -> Result<f64, ReferenceError> {
    if !(dx > 0.0) {
        return Err(ReferenceError::NonPositive { name: "dx", value: dx });
    }
    if !(nu > 0.0) {
        return Err(ReferenceError::NonPositive { name: "nu", value: nu });
    }
    if !(safety > 0.0) {
        return Err(ReferenceError::NonPositive { name: "safety", value: safety });
    }
    Ok(safety * 0.25 * dx * dx / nu)
}

/// One forward-Euler step of `u_t = nu u_xx` on a periodic grid with `mu = nu dt / dx^2`.
pub fn diffusion_explicit_step(u: &[f64], out: &mut [f64], mu: f64) {
    let n = u.len();
    for j in 0..n {
        let left = u[(j + n - 1) % n];
        let right = u[(j + 1) % n];
        out[j] = u[j] + mu * (left - 2.0 * u[j] + right);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Splitting {
    /// R(dt/2) D(dt) R(dt/2)
    Strang,
    /// R(dt) D(dt)
    Lie,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ReactionFormula {
    Stable { eps: f64 },
    Naive,
    ExplicitEuler,
}

impl ReactionFormula {
    #[inline]
    pub fn apply(self, u: f64, dt: f64, rho: f64) -> f64 {
        match self {
            ReactionFormula::Stable { eps } => reaction_exact_step(u, dt, rho, eps),
            ReactionFormula::Naive => reaction_naive_step(u, dt, rho),
            ReactionFormula::ExplicitEuler => u + dt * rho * u * (1.0 - u),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdOptions {
    pub splitting: Splitting,
    pub reaction: ReactionFormula,
    /// Multiplier on the diffusive step bound.
    pub dt_factor: f64,
}

impl Default for RdOptions {
    fn default() -> Self {
        RdOptions { splitting: Splitting::Strang, reaction: ReactionFormula::Stable { eps: 1e-300 }, dt_factor: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RdStats {
    pub dt_max: f64,
    /// Internal steps across all output intervals for one sample.
    pub internal_steps: usize,
}

/// Operator-split solver: exact/analytic reaction plus explicit periodic diffusion.
pub fn solve_reaction_diffusion(
    nu: f64,
    rho: f64,
    grid: &GridSpec,
    inputs: &SolutionField,
    oversample: usize,
    opts: &RdOptions,
) -> Result<(SolutionField, RdStats), ReferenceError> {
    let dx = grid.dx() / oversample as f64;
    let dt_max = dt_max_diffusion(dx, nu, 1.0)? * opts.dt_factor;
    let times = &grid.t_coordinates;
    let results = par_batch(inputs.batch(), |b| -> Result<(Vec<Vec<f64>>, usize), ReferenceError> {
        let first = initial_row(inputs, b);
        let mut u = refine(&first, oversample);
        let mut scratch = vec![0.0; u.len()];
        let mut traj = vec![first];
        let mut step = 0usize;
        for w in times.windows(2) {
            let span = w[1] - w[0];
            let count = substeps(span, dt_max);
            let dt = span / count as f64;
            let mu = nu * dt / (dx * dx);
            for s in 0..count {
                match opts.splitting {
                    Splitting::Strang => {
                        u.iter_mut().for_each(|v| *v = opts.reaction.apply(*v, 0.5 * dt, rho));
                        diffusion_explicit_step(&u, &mut scratch, mu);
                        std::mem::swap(&mut u, &mut scratch);
                        u.iter_mut().for_each(|v| *v = opts.reaction.apply(*v, 0.5 * dt, rho));
                    }
                    Splitting::Lie => {
                        u.iter_mut().for_each(|v| *v = opts.reaction.apply(*v, dt, rho));
                        diffusion_explicit_step(&u, &mut scratch, mu);
                        std::mem::swap(&mut u, &mut scratch);
                    }
                }
                step += 1;
                if !u.iter().all(|v| v.is_finite()) {
                    return Err(ReferenceError::Unstable { sample: b, step, time: w[0] + (s + 1) as f64 * dt });
                }
            }
            traj.push(restrict(&u, oversample));
        }
        Ok((traj, step))
    });
    let mut trajectories = Vec::with_capacity(results.len());
    let mut internal_steps = 0;
    for r in results {
        let (traj, steps) = r?;
        internal_steps = steps;
        trajectories.push(traj);
    }
    Ok((stack_trajectories(trajectories, vec!["u".into()]), RdStats { dt_max, internal_steps }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{make_grid, PdeTask, TaskId};
    use crate::sampling::sample_initial_conditions;
    use ndarray::{ArrayD, IxDyn};

    /// Classical RK4 on the logistic ODE with many small steps.
    pub(crate) fn logistic_rk4(u0: f64, t: f64, rho: f64, steps: usize) -> f64 {
        let f = |u: f64| rho * u * (1.0 - u);
        let h = t / steps as f64;
        let mut u = u0;
        for _ in 0..steps {
            let k1 = f(u);
            let k2 = f(u + 0.5 * h * k1);
            let k3 = f(u + 0.5 * h * k2);
            let k4 = f(u + h * k3);
            u += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        u
    }

    #[test]
    fn fixed_points_and_hand_values() {
        for dt in [0.0, 0.1, 3.0, 50.0] {
            assert_eq!(reaction_exact_step(1.0, dt, 1.0, 1e-10), 1.0);
            let at_zero = reaction_exact_step(0.0, dt, 1.0, 1e-10);
            assert!(at_zero >= 0.0 && at_zero <= 1e-10 * (dt as f64).exp() * (1.0 + 1e-12));
        }
        let v = reaction_exact_step(0.5, std::f64::consts::LN_2, 1.0, 1e-300);
        assert!((v - 2.0 / 3.0).abs() < 1e-15);
        for u in [0.0, 0.2, 0.7, 1.0] {
            assert!((reaction_exact_step(u, 0.0, 1.0, 1e-10) - u).abs() <= 1e-10);
        }
    }

    #[test]
    fn matches_rk4_oracle() {
        let exact = reaction_exact_step(0.3, 0.01, 1.0, 1e-300);
        let oracle = logistic_rk4(0.3, 0.01, 1.0, 1000);
        assert!((exact - oracle).abs() < 1e-10);
        // Default guard changes the value by O(eps), still inside the tolerance at u = 0.3.
        let guarded = reaction_exact_step(0.3, 0.01, 1.0, 1e-10);
        assert!((guarded - oracle).abs() < 1e-10);
    }

    #[test]
    fn naive_formula_breaks_where_stable_does_not() {
        let naive = reaction_naive_step(0.0, 800.0, 1.0);
        assert!(naive.is_nan());
        let stable = reaction_exact_step(0.0, 800.0, 1.0, 1e-10);
        assert!(stable.is_finite() && (0.0..=1.0).contains(&stable));
    }

    #[test]
    fn dt_max_examples() {
        let v = dt_max_diffusion(1.0 / 1024.0, 0.5, 1.0).unwrap();
        assert!((v - 4.768e-7).abs() < 5e-11, "{v}");
        assert_eq!(dt_max_diffusion(1.0, 0.25, 1.0).unwrap(), 1.0);
        let v = dt_max_diffusion(1.0 / 256.0, 0.5, 1.0).unwrap();
        assert!((v - 7.6294e-6).abs() < 1e-10, "{v}");
        assert!(dt_max_diffusion(0.0, 0.5, 1.0).is_err());
        assert!(dt_max_diffusion(0.1, -1.0, 1.0).is_err());
    }

    #[test]
    fn uniform_state_follows_logistic_ode() {
        let task = PdeTask::registry_get(TaskId::ReactionDiffusion, None).unwrap();
        let grid = make_grid(&task, &[32], Some(5), Some(1.0)).unwrap();
        let c = 0.2;
        let inputs = SolutionField::scalar(ArrayD::from_elem(IxDyn(&[1, 32]), c));
        let opts = RdOptions::default();
        let (out, _) = solve_reaction_diffusion(0.5, 1.0, &grid, &inputs, 1, &opts).unwrap();
        for (i, &t) in grid.t_coordinates.iter().enumerate() {
            let ode = c * t.exp() / (1.0 + c * (t.exp() - 1.0));
            for j in 0..32 {
                assert!((out.data[[0, i, j]] - ode).abs() < 1e-11, "t={t}");
            }
        }
    }

    #[test]
    fn too_large_step_is_reported_as_unstable() {
        let task = PdeTask::registry_get(TaskId::ReactionDiffusion, None).unwrap();
        let grid = make_grid(&task, &[64], Some(2), Some(0.5)).unwrap();
        let inputs = sample_initial_conditions(&task, &grid, 1, 1).unwrap();
        let opts = RdOptions { dt_factor: 4.0, reaction: ReactionFormula::ExplicitEuler, ..RdOptions::default() };
        let err = solve_reaction_diffusion(0.5, 1.0, &grid, &inputs, 1, &opts).unwrap_err();
        assert!(matches!(err, ReferenceError::Unstable { sample: 0, .. }), "{err}");
    }

    proptest::proptest! {
        #[test]
        fn step_is_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0, dt in 0.0f64..5.0, rho in 0.0f64..5.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let s_lo = reaction_exact_step(lo, dt, rho, 1e-10);
            let s_hi = reaction_exact_step(hi, dt, rho, 1e-10);
            proptest::prop_assert!(s_lo <= s_hi);
            proptest::prop_assert!((0.0..=1.0).contains(&s_lo) && (0.0..=1.0).contains(&s_hi));
        }
    }
}
