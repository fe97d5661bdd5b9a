use serde::{Deserialize, Serialize};

use super::{initial_row, par_batch, stack_trajectories, substeps, ReferenceError};
use crate::domain::{GridSpec, SolutionField};
use crate::spectral::Spectral;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvectionScheme {
    /// Exact translation through the Fourier shift theorem.
    ExactSpectral,
    /// Lax-Wendroff finite volume, second order in space and time.
    SecondOrderFv,
}

fn lax_wendroff_step(u: &[f64], out: &mut [f64], c: f64) {
    let n = u.len();
    // F_{j+1/2} / beta = u_j + (1 - c)/2 (u_{j+1} - u_j); valid for either sign of c.
    let flux = |j: usize| {
        let (l, r) = (u[j], u[(j + 1) % n]);
        c * (0.5 * (l + r) - 0.5 * c * (r - l))
    };
    for j in 0..n {
        out[j] = u[j] - (flux(j) - flux((j + n - 1) % n));
    }
}

pub fn solve_advection(
    beta: f64,
    grid: &GridSpec,
    inputs: &SolutionField,
    scheme: AdvectionScheme,
    cfl: f64,
) -> Result<SolutionField, ReferenceError> {
    let n = grid.n();
    let length = grid.length(0);
    let dx = grid.dx();
    let times = &grid.t_coordinates;
    let spectral = Spectral::new(n);
    let results = par_batch(inputs.batch(), |b| -> Result<Vec<Vec<f64>>, ReferenceError> {
        let u0 = initial_row(inputs, b);
        let mut traj = vec![u0.clone()];
        match scheme {
            AdvectionScheme::ExactSpectral => {
                for &t in &times[1..] {
                    let shift = beta * t;
                    traj.push(if shift == 0.0 { u0.clone() } else { spectral.shift(&u0, shift, length) });
                }
            }
            AdvectionScheme::SecondOrderFv => {
                let mut u = u0.clone();
                let mut scratch = vec![0.0; n];
                let mut step = 0;
                for w in times.windows(2) {
                    if beta != 0.0 {
                        let span = w[1] - w[0];
                        let count = substeps(span, cfl * dx / beta.abs());
                        let c = beta * (span / count as f64) / dx;
                        for s in 0..count {
                            lax_wendroff_step(&u, &mut scratch, c);
                            std::mem::swap(&mut u, &mut scratch);
                            step += 1;
                            if !u.iter().all(|v| v.is_finite()) {
                                let time = w[0] + (s + 1) as f64 * span / count as f64;
                                return Err(ReferenceError::Unstable { sample: b, step, time });
                            }
                        }
                    }
                    traj.push(u.clone());
                }
            }
        }
        Ok(traj)
    });
    let trajectories = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(stack_trajectories(trajectories, vec!["u".into()]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{make_grid, PdeTask, TaskId};
    use crate::sampling::sample_initial_conditions;
    use std::collections::BTreeMap;

    fn setup(beta: f64, n: usize, steps: usize, t_end: f64) -> (GridSpec, SolutionField) {
        let mut over = BTreeMap::new();
        over.insert("beta".to_string(), beta);
        let task = PdeTask::registry_get(TaskId::Advection, Some(&over)).unwrap();
        let grid = make_grid(&task, &[n], Some(steps), Some(t_end)).unwrap();
        let inputs = sample_initial_conditions(&task, &grid, 3, 9).unwrap();
        (grid, inputs)
    }

    #[test]
    fn zero_speed_is_identity() {
        let (grid, inputs) = setup(0.0, 64, 4, 2.0);
        for scheme in [AdvectionScheme::ExactSpectral, AdvectionScheme::SecondOrderFv] {
            let out = solve_advection(0.0, &grid, &inputs, scheme, 0.5).unwrap();
            for b in 0..3 {
                for i in 0..5 {
                    for j in 0..64 {
                        assert_eq!(out.data[[b, i, j]], inputs.data[[b, j]]);
                    }
                }
            }
        }
    }

    #[test]
    fn full_period_returns_to_start() {
        let (grid, inputs) = setup(0.1, 128, 2, 10.0);
        let out = solve_advection(0.1, &grid, &inputs, AdvectionScheme::ExactSpectral, 0.5).unwrap();
        for b in 0..3 {
            for j in 0..128 {
                assert!((out.data[[b, 2, j]] - inputs.data[[b, j]]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn whole_cell_shift_matches_rolled_array() {
        // beta t = 8 dx: compare against np.roll-style indexing.
        let n = 64;
        let (grid, inputs) = setup(0.25, n, 1, 0.5);
        let out = solve_advection(0.25, &grid, &inputs, AdvectionScheme::ExactSpectral, 0.5).unwrap();
        for b in 0..3 {
            for j in 0..n {
                assert!((out.data[[b, 1, j]] - inputs.data[[b, (j + n - 8) % n]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fv_scheme_conserves_mass() {
        let (grid, inputs) = setup(0.1, 64, 4, 1.0);
        let out = solve_advection(0.1, &grid, &inputs, AdvectionScheme::SecondOrderFv, 0.5).unwrap();
        for b in 0..3 {
            let m0: f64 = (0..64).map(|j| out.data[[b, 0, j]]).sum();
            let m4: f64 = (0..64).map(|j| out.data[[b, 4, j]]).sum();
            assert!((m0 - m4).abs() / m0.abs() < 1e-13);
        }
    }
}
