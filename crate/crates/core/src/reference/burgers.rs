use super::{initial_row, par_batch, stack_trajectories, substeps, ReferenceConfig, ReferenceError};
use crate::domain::{GridSpec, SolutionField};
use crate::spectral::{refine, restrict};

fn minmod(a: f64, b: f64) -> f64 {
    if a * b <= 0.0 {
        0.0
    } else if a.abs() < b.abs() {
        a
    } else {
        b
    }
}

/// Semi-discrete right-hand side of `u_t + (u^2/2)_x = nu u_xx` on a periodic grid:
/// MUSCL-minmod reconstruction, Rusanov interface flux and central viscosity.
pub fn rusanov_muscl_rhs(u: &[f64], dx: f64, nu: f64) -> Vec<f64> {
    let n = u.len();
    let at = |j: isize| u[j.rem_euclid(n as isize) as usize];
    let slope: Vec<f64> = (0..n as isize).map(|j| minmod(at(j) - at(j - 1), at(j + 1) - at(j))).collect();
    let flux: Vec<f64> = (0..n)
        .map(|j| {
            let r = (j + 1) % n;
            let ul = u[j] + 0.5 * slope[j];
            let ur = u[r] - 0.5 * slope[r];
            let speed = ul.abs().max(ur.abs());
            0.25 * (ul * ul + ur * ur) - 0.5 * speed * (ur - ul)
        })
        .collect();
    (0..n)
        .map(|j| {
            let l = (j + n - 1) % n;
            let r = (j + 1) % n;
            -(flux[j] - flux[l]) / dx + nu * (u[l] - 2.0 * u[j] + u[r]) / (dx * dx)
        })
        .collect()
}

/// Sum of absolute jumps between neighbouring cells, including the periodic wrap.
pub fn total_variation(u: &[f64]) -> f64 {
    let n = u.len();
    (0..n).map(|j| (u[(j + 1) % n] - u[j]).abs()).sum()
}

fn ssp_rk2(u: &mut Vec<f64>, dt: f64, dx: f64, nu: f64) {
    let k1 = rusanov_muscl_rhs(u, dx, nu);
    let stage: Vec<f64> = u.iter().zip(&k1).map(|(a, k)| a + dt * k).collect();
    let k2 = rusanov_muscl_rhs(&stage, dx, nu);
    for ((v, s), k) in u.iter_mut().zip(&stage).zip(&k2) {
        *v = 0.5 * (*v + s + dt * k);
    }
}

pub fn solve_burgers(
    nu: f64,
    grid: &GridSpec,
    inputs: &SolutionField,
    cfg: &ReferenceConfig,
) -> Result<SolutionField, ReferenceError> {
    let factor = cfg.oversample_factor;
    let dx = grid.dx() / factor as f64;
    let times = &grid.t_coordinates;
    let results = par_batch(inputs.batch(), |b| -> Result<Vec<Vec<f64>>, ReferenceError> {
        let first = initial_row(inputs, b);
        let mut u = refine(&first, factor);
        let mut traj = vec![first];
        let mut step = 0;
        for w in times.windows(2) {
            let mut t = w[0];
            while t < w[1] {
                let umax = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let bound = cfg.advective_safety / (umax / dx + 2.0 * nu / (dx * dx)).max(f64::MIN_POSITIVE);
                let remaining = w[1] - t;
                // Split what is left evenly so the last step never degenerates.
                let dt = remaining / substeps(remaining, bound) as f64;
                ssp_rk2(&mut u, dt, dx, nu);
                step += 1;
                t = if dt >= remaining { w[1] } else { t + dt };
                if !u.iter().all(|v| v.is_finite()) {
                    return Err(ReferenceError::Unstable { sample: b, step, time: t });
                }
            }
            traj.push(restrict(&u, factor));
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
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn constant_state_is_steady() {
        let rhs = rusanov_muscl_rhs(&[0.7; 16], 1.0 / 16.0, 0.01);
        assert!(rhs.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn total_variation_of_square_wave() {
        assert_eq!(total_variation(&[0.0, 1.0, 1.0, 0.0]), 2.0);
        assert_eq!(total_variation(&[3.0; 5]), 0.0);
    }

    #[test]
    fn tv_does_not_grow_and_mean_is_kept() {
        let task = PdeTask::registry_get(TaskId::Burgers, None).unwrap();
        let grid = make_grid(&task, &[128], Some(10), Some(1.0)).unwrap();
        let inputs = sample_initial_conditions(&task, &grid, 3, 2).unwrap();
        let out = solve_burgers(0.01, &grid, &inputs, &ReferenceConfig::default()).unwrap();
        for b in 0..3 {
            let rows: Vec<Vec<f64>> = (0..11).map(|i| (0..128).map(|j| out.data[[b, i, j]]).collect()).collect();
            let m0: f64 = rows[0].iter().sum();
            for w in rows.windows(2) {
                assert!(total_variation(&w[1]) <= total_variation(&w[0]) * (1.0 + 1e-12));
            }
            let m_end: f64 = rows[10].iter().sum();
            assert!((m_end - m0).abs() / m0.abs() < 1e-10);
        }
    }

    #[test]
    fn step_profile_stays_bounded() {
        let task = PdeTask::registry_get(TaskId::Burgers, None).unwrap();
        let grid = make_grid(&task, &[64], Some(4), Some(0.5)).unwrap();
        let row: Vec<f64> = (0..64).map(|j| if j < 32 { 1.0 } else { 0.0 }).collect();
        let inputs = SolutionField::scalar(ArrayD::from_shape_vec(IxDyn(&[1, 64]), row).unwrap());
        let out = solve_burgers(0.01, &grid, &inputs, &ReferenceConfig::default()).unwrap();
        assert!(out.data.iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
    }
}
