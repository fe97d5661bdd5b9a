//! Deterministic initial-condition sampler.
//!
//! Periodic tasks draw a truncated Fourier series with modes `1..=8`, amplitudes
//! decaying like `1/k` and uniform phases, synthesised with an inverse FFT at the
//! cell centres. Darcy draws a two-level coefficient field by thresholding smooth
//! noise. Every draw is a pure function of `(task, grid, batch, seed)`.

use std::f64::consts::PI;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

use crate::domain::{DomainError, GridSpec, PdeTask, SolutionField, TaskId};
use crate::spectral::Spectral;

pub const MAX_MODE: usize = 8;
pub const DARCY_LOW: f64 = 3.0;
pub const DARCY_HIGH: f64 = 12.0;

/// `offset + sum_k amplitudes[k-1] / k * cos(2 pi k x / L + phases[k-1])`.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierSeries {
    pub offset: f64,
    pub amplitudes: Vec<f64>,
    pub phases: Vec<f64>,
}

impl FourierSeries {
    /// Values at the cell centres of an `n`-point grid over `[lower, lower + length)`,
    /// built in Fourier space. Returns `(real part, max |imaginary residue|)`.
    pub fn synthesize(&self, n: usize, lower: f64, length: f64) -> (Vec<f64>, f64) {
        let spectral = Spectral::new(n);
        let mut coeffs = vec![Complex64::new(0.0, 0.0); n];
        coeffs[0] = Complex64::new(self.offset * n as f64, 0.0);
        let dx = length / n as f64;
        for (i, (&amp, &phase)) in self.amplitudes.iter().zip(&self.phases).enumerate() {
            let k = i + 1;
            if 2 * k >= n {
                break;
            }
            // Cell centres sit at lower + (j + 1/2) dx, folded into the phase.
            let theta = phase + 2.0 * PI * k as f64 * (lower + 0.5 * dx) / length;
            let c = Complex64::from_polar(0.5 * amp / k as f64 * n as f64, theta);
            coeffs[k] += c;
            coeffs[n - k] += c.conj();
        }
        let values = spectral.inverse(&coeffs);
        let residue = values.iter().fold(0.0f64, |m, c| m.max(c.im.abs()));
        (values.into_iter().map(|c| c.re).collect(), residue)
    }
}

fn task_salt(task: TaskId) -> u64 {
    match task {
        TaskId::Advection => 0x11,
        TaskId::Burgers => 0x22,
        TaskId::ReactionDiffusion => 0x33,
        TaskId::NavierStokes => 0x44,
        TaskId::Darcy => 0x55,
    }
}

fn stream_rng(seed: u64, task: TaskId, sample: usize, channel: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(task_salt(task) << 40 | (sample as u64) << 8 | channel as u64);
    rng
}

/// The series used for `sample`/`channel` of a periodic task.
pub fn draw_series(seed: u64, task: TaskId, sample: usize, channel: usize) -> FourierSeries {
    let mut rng = stream_rng(seed, task, sample, channel);
    let offset = rng.random_range(0.1..0.5);
    let amplitudes = (0..MAX_MODE).map(|_| 0.5 * rng.random_range(0.0..1.0)).collect();
    let phases = (0..MAX_MODE).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    FourierSeries { offset, amplitudes, phases }
}

/// Two-level Darcy coefficient: 12 where the smooth noise is positive, 3 elsewhere.
fn darcy_coefficient(seed: u64, sample: usize, grid: &GridSpec) -> Vec<f64> {
    let mut rng = stream_rng(seed, TaskId::Darcy, sample, 0);
    let mut terms = Vec::new();
    for kx in 0..=4usize {
        for ky in 0..=4usize {
            if kx == 0 && ky == 0 {
                continue;
            }
            let weight = 1.0 / (1.0 + (kx * kx + ky * ky) as f64);
            let amp = weight * rng.random_range(-1.0..1.0);
            let px = rng.random_range(0.0..2.0 * PI);
            let py = rng.random_range(0.0..2.0 * PI);
            terms.push((kx as f64, ky as f64, amp, px, py));
        }
    }
    let xs = grid.centers(0);
    let ys = grid.centers(1);
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for &x in &xs {
        for &y in &ys {
            let g: f64 = terms
                .iter()
                .map(|&(kx, ky, a, px, py)| a * (2.0 * PI * kx * x + px).cos() * (2.0 * PI * ky * y + py).cos())
                .sum();
            out.push(if g > 0.0 { DARCY_HIGH } else { DARCY_LOW });
        }
    }
    out
}

/// Initial slice (or Darcy coefficient field) for a batch of samples.
pub fn sample_initial_conditions(task: &PdeTask, grid: &GridSpec, batch: usize, seed: u64) -> Result<SolutionField, DomainError> {
    if batch == 0 {
        return Err(DomainError::EmptyBatch);
    }
    let id = task.task_id();
    let shape = task.input_shape(grid, batch);
    let n = grid.n();
    let lower = grid.lower[0];
    let length = grid.length(0);
    let series = |sample: usize, channel: usize| draw_series(seed, id, sample, channel).synthesize(n, lower, length).0;
    let mut data = Vec::with_capacity(shape.iter().product());
    match id {
        TaskId::Advection | TaskId::Burgers => {
            for b in 0..batch {
                data.extend(series(b, 0));
            }
        }
        TaskId::ReactionDiffusion => {
            for b in 0..batch {
                data.extend(series(b, 0).into_iter().map(|s| 1.0 / (1.0 + (-2.0 * s).exp())));
            }
        }
        TaskId::NavierStokes => {
            for b in 0..batch {
                let rho = series(b, 0);
                let vel = series(b, 1);
                let p = series(b, 2);
                for j in 0..n {
                    data.push((0.2 * rho[j]).exp());
                    data.push(0.2 * vel[j]);
                    data.push((0.2 * p[j]).exp());
                }
            }
        }
        TaskId::Darcy => {
            for b in 0..batch {
                data.extend(darcy_coefficient(seed, b, grid));
            }
        }
    }
    let components = match id {
        TaskId::Darcy => vec!["a".to_string()],
        _ => task.components(),
    };
    Ok(SolutionField::new(ArrayD::from_shape_vec(IxDyn(&shape), data).expect("shape product"), components))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::make_grid;

    fn grid_for(id: TaskId, n: usize) -> (PdeTask, GridSpec) {
        let task = PdeTask::registry_get(id, None).unwrap();
        let grid = if id == TaskId::Darcy {
            make_grid(&task, &[n, n], None, None).unwrap()
        } else {
            make_grid(&task, &[n], Some(4), None).unwrap()
        };
        (task, grid)
    }

    #[test]
    fn sampler_is_deterministic() {
        for id in TaskId::ALL {
            let (task, grid) = grid_for(id, 32);
            let a = sample_initial_conditions(&task, &grid, 3, 11).unwrap();
            let b = sample_initial_conditions(&task, &grid, 3, 11).unwrap();
            assert_eq!(a, b);
            let c = sample_initial_conditions(&task, &grid, 3, 12).unwrap();
            assert_ne!(a, c);
            assert_eq!(a.shape(), task.input_shape(&grid, 3).as_slice());
        }
    }

    #[test]
    fn reaction_diffusion_values_in_open_unit_interval() {
        let (task, grid) = grid_for(TaskId::ReactionDiffusion, 256);
        let f = sample_initial_conditions(&task, &grid, 8, 5).unwrap();
        assert!(f.data.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn navier_stokes_positive_state() {
        let (task, grid) = grid_for(TaskId::NavierStokes, 64);
        let f = sample_initial_conditions(&task, &grid, 4, 5).unwrap();
        for b in 0..4 {
            for j in 0..64 {
                assert!(f.data[[b, j, 0]] > 0.0);
                assert!(f.data[[b, j, 2]] > 0.0);
                assert!(f.data[[b, j, 1]].abs() < 1.0);
            }
        }
    }

    #[test]
    fn darcy_coefficient_two_levels() {
        let (task, grid) = grid_for(TaskId::Darcy, 64);
        let f = sample_initial_conditions(&task, &grid, 2, 5).unwrap();
        assert!(f.data.iter().all(|&v| v == DARCY_LOW || v == DARCY_HIGH));
        assert!(f.data.iter().any(|&v| v == DARCY_LOW));
        assert!(f.data.iter().any(|&v| v == DARCY_HIGH));
    }

    #[test]
    fn empty_batch_rejected() {
        let (task, grid) = grid_for(TaskId::Burgers, 16);
        assert!(matches!(sample_initial_conditions(&task, &grid, 0, 1), Err(DomainError::EmptyBatch)));
    }

    /// Direct cosine summation, independent of the FFT synthesis path.
    fn direct_sum(series: &FourierSeries, x: f64, length: f64) -> f64 {
        series.offset
            + series
                .amplitudes
                .iter()
                .zip(&series.phases)
                .enumerate()
                .map(|(i, (a, p))| {
                    let k = (i + 1) as f64;
                    a / k * (2.0 * PI * k * x / length + p).cos()
                })
                .sum::<f64>()
    }

    #[test]
    fn advection_matches_series_summation_oracle() {
        let (task, grid) = grid_for(TaskId::Advection, 256);
        let field = sample_initial_conditions(&task, &grid, 4, 7).unwrap();
        let xs = grid.centers(0);
        for b in 0..4 {
            let series = draw_series(7, TaskId::Advection, b, 0);
            let (values, residue) = series.synthesize(256, 0.0, 1.0);
            assert!(residue < 1e-14, "imaginary residue {residue}");
            for (j, &x) in xs.iter().enumerate() {
                let direct = direct_sum(&series, x, 1.0);
                assert!((field.data[[b, j]] - direct).abs() < 1e-12);
                assert_eq!(values[j], field.data[[b, j]]);
            }
            let mass: f64 = (0..256).map(|j| field.data[[b, j]]).sum::<f64>() * grid.dx();
            assert!((mass - series.offset).abs() < 1e-13);
        }
    }
}
