//! 1D compressible Navier-Stokes: first-order Rusanov fluxes plus central viscous stress.

use ndarray::{ArrayD, IxDyn};

use super::{par_batch, ReferenceConfig, ReferenceError};
use crate::domain::{GridSpec, PdeTask, SolutionField};
use crate::spectral::refine;

/// Primitive state of one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NsState {
    pub rho: f64,
    pub v: f64,
    pub p: f64,
}

impl NsState {
    pub fn sound_speed(&self, gamma: f64) -> f64 {
        (gamma * self.p / self.rho).sqrt()
    }
}

/// `(rho, rho v, p / (gamma - 1) + rho v^2 / 2)`.
pub fn conserved(s: &NsState, gamma: f64) -> [f64; 3] {
    [s.rho, s.rho * s.v, s.p / (gamma - 1.0) + 0.5 * s.rho * s.v * s.v]
}

pub fn primitive(q: &[f64; 3], gamma: f64) -> NsState {
    let v = q[1] / q[0];
    NsState { rho: q[0], v, p: (gamma - 1.0) * (q[2] - 0.5 * q[0] * v * v) }
}

fn euler_flux(s: &NsState, gamma: f64) -> [f64; 3] {
    let e = conserved(s, gamma)[2];
    [s.rho * s.v, s.rho * s.v * s.v + s.p, (e + s.p) * s.v]
}

/// Local Lax-Friedrichs flux of the inviscid system between two cells.
pub fn rusanov_flux(left: &NsState, right: &NsState, gamma: f64) -> [f64; 3] {
    let fl = euler_flux(left, gamma);
    let fr = euler_flux(right, gamma);
    let ql = conserved(left, gamma);
    let qr = conserved(right, gamma);
    let speed = (left.v.abs() + left.sound_speed(gamma)).max(right.v.abs() + right.sound_speed(gamma));
    std::array::from_fn(|i| 0.5 * (fl[i] + fr[i]) - 0.5 * speed * (qr[i] - ql[i]))
}

struct Params {
    mu: f64,
    gamma: f64,
    dx: f64,
    safety: f64,
}

fn stable_dt(cells: &[NsState], prm: &Params) -> f64 {
    let wave = cells.iter().fold(0.0f64, |m, s| m.max(s.v.abs() + s.sound_speed(prm.gamma)));
    let rho_min = cells.iter().fold(f64::INFINITY, |m, s| m.min(s.rho));
    let advective = prm.safety * prm.dx / wave;
    let viscous = if prm.mu > 0.0 { 0.25 * prm.dx * prm.dx * rho_min / prm.mu } else { f64::INFINITY };
    advective.min(viscous)
}

fn step(q: &mut [[f64; 3]], dt: f64, prm: &Params) {
    let n = q.len();
    let cells: Vec<NsState> = q.iter().map(|c| primitive(c, prm.gamma)).collect();
    let faces: Vec<[f64; 3]> = (0..n)
        .map(|j| {
            let (l, r) = (&cells[j], &cells[(j + 1) % n]);
            let mut f = rusanov_flux(l, r, prm.gamma);
            // sigma' = (zeta + 4 eta / 3) dv/dx enters as -sigma' and -v sigma'.
            let sigma = prm.mu * (r.v - l.v) / prm.dx;
            f[1] -= sigma;
            f[2] -= 0.5 * (l.v + r.v) * sigma;
            f
        })
        .collect();
    let ratio = dt / prm.dx;
    for j in 0..n {
        let left = &faces[(j + n - 1) % n];
        for i in 0..3 {
            q[j][i] -= ratio * (faces[j][i] - left[i]);
        }
    }
}

fn restrict_conserved(q: &[[f64; 3]], factor: usize, gamma: f64) -> Vec<NsState> {
    q.chunks_exact(factor)
        .map(|block| {
            let avg: [f64; 3] = std::array::from_fn(|i| block.iter().map(|c| c[i]).sum::<f64>() / factor as f64);
            primitive(&avg, gamma)
        })
        .collect()
}

fn lift(first: &[NsState], factor: usize, gamma: f64) -> Vec<[f64; 3]> {
    let channel = |f: fn(&NsState) -> f64| refine(&first.iter().map(f).collect::<Vec<_>>(), factor);
    let rho = channel(|s| s.rho);
    let v = channel(|s| s.v);
    let p = channel(|s| s.p);
    if rho.iter().chain(&p).all(|&x| x > 0.0) {
        (0..rho.len()).map(|m| conserved(&NsState { rho: rho[m], v: v[m], p: p[m] }, gamma)).collect()
    } else {
        // Interpolation undershoot: fall back to piecewise-constant injection.
        first.iter().flat_map(|s| std::iter::repeat_n(conserved(s, gamma), factor)).collect()
    }
}

pub fn solve_navier_stokes(
    task: &PdeTask,
    grid: &GridSpec,
    inputs: &SolutionField,
    cfg: &ReferenceConfig,
) -> Result<SolutionField, ReferenceError> {
    let gamma = task.param("gamma");
    let factor = cfg.oversample_factor;
    let prm = Params {
        mu: task.param("zeta") + 4.0 / 3.0 * task.param("eta"),
        gamma,
        dx: grid.dx() / factor as f64,
        safety: cfg.advective_safety,
    };
    let n = grid.n();
    let times = &grid.t_coordinates;
    let batch = inputs.batch();
    for b in 0..batch {
        for j in 0..n {
            for (c, name) in [(0, "density"), (2, "pressure")] {
                let value = inputs.data[[b, j, c]];
                if !(value > 0.0) {
                    return Err(ReferenceError::NonPositive { name, value });
                }
            }
        }
    }
    let results = par_batch(batch, |b| -> Result<Vec<Vec<NsState>>, ReferenceError> {
        let first: Vec<NsState> = (0..n)
            .map(|j| NsState { rho: inputs.data[[b, j, 0]], v: inputs.data[[b, j, 1]], p: inputs.data[[b, j, 2]] })
            .collect();
        let mut q = lift(&first, factor, gamma);
        let mut traj = vec![first];
        let mut cells: Vec<NsState> = q.iter().map(|c| primitive(c, gamma)).collect();
        let mut count = 0;
        for w in times.windows(2) {
            let mut t = w[0];
            while t < w[1] {
                let remaining = w[1] - t;
                let dt = stable_dt(&cells, &prm).min(remaining);
                step(&mut q, dt, &prm);
                count += 1;
                t = if dt >= remaining { w[1] } else { t + dt };
                cells = q.iter().map(|c| primitive(c, gamma)).collect();
                if !cells.iter().all(|s| s.rho > 0.0 && s.p > 0.0 && s.v.is_finite()) {
                    return Err(ReferenceError::Unstable { sample: b, step: count, time: t });
                }
            }
            traj.push(restrict_conserved(&q, factor, gamma));
        }
        Ok(traj)
    });
    let steps = times.len();
    let mut data = Vec::with_capacity(batch * steps * n * 3);
    for r in results {
        for slice in r? {
            for s in slice {
                data.extend([s.rho, s.v, s.p]);
            }
        }
    }
    Ok(SolutionField::new(
        ArrayD::from_shape_vec(IxDyn(&[batch, steps, n, 3]), data).expect("consistent shapes"),
        task.components(),
    ))
}
