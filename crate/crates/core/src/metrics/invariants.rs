use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::residual::{darcy_operator, darcy_samples};
use super::{check_finite, FeedbackRecord, MetricError, NsView, ScalarView};
use crate::domain::{GridSpec, PdeTask, SolutionField, TaskId};
use crate::reference::{reaction_exact_step, rusanov_flux, NsState};
use crate::spectral::Spectral;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantConfig {
    /// A mode joins the phase/amplitude set when it holds at least this share of the
    /// non-mean spectral energy at t = 0.
    pub mode_energy_fraction: f64,
    /// Internal time step of the candidate when known (from its diagnostics); the output
    /// spacing is used otherwise.
    pub internal_dt: Option<f64>,
}

impl Default for InvariantConfig {
    fn default() -> Self {
        InvariantConfig { mode_energy_fraction: 0.01, internal_dt: None }
    }
}

/// Every invariant metric that applies to `task`. `ref0` is the initial slice (Darcy:
/// the coefficient field).
pub fn invariant_metrics(
    task: &PdeTask,
    field: &SolutionField,
    grid: &GridSpec,
    ref0: &SolutionField,
    cfg: &InvariantConfig,
) -> Result<Vec<FeedbackRecord>, MetricError> {
    check_finite(field)?;
    match task.task_id() {
        TaskId::Advection => advection(task, field, grid, ref0, cfg),
        TaskId::Burgers => burgers(field, grid, ref0),
        TaskId::ReactionDiffusion => reaction_diffusion(task, field, grid, cfg),
        TaskId::NavierStokes => navier_stokes(task, field, grid, ref0),
        TaskId::Darcy => darcy(task, field, grid, ref0),
    }
}

fn integral(u: &[f64], dx: f64) -> f64 {
    u.iter().sum::<f64>() * dx
}

fn l2norm(u: &[f64], dx: f64) -> f64 {
    (u.iter().map(|v| v * v).sum::<f64>() * dx).sqrt()
}

/// `|I(t) - I(0)| / |I(0)|`, or the absolute drift when `I(0) = 0`.
fn relative_drift(now: f64, start: f64, scale: f64) -> f64 {
    let d = (now - start).abs();
    if scale == 0.0 {
        d
    } else {
        d / scale
    }
}

fn wrap_angle(a: f64) -> f64 {
    a - 2.0 * PI * (a / (2.0 * PI)).round()
}

fn advection(
    task: &PdeTask,
    field: &SolutionField,
    grid: &GridSpec,
    ref0: &SolutionField,
    cfg: &InvariantConfig,
) -> Result<Vec<FeedbackRecord>, MetricError> {
    let v = ScalarView::new(field)?;
    let (n, dx, length) = (v.n, grid.dx(), grid.length(0));
    let beta = task.param("beta");
    let spectral = Spectral::new(n);
    let times = &grid.t_coordinates;
    let (mut phase, mut amp, mut mass, mut l2d) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut mode_counts = Vec::new();
    for b in 0..v.batch {
        let u0: Vec<f64> = (0..n).map(|j| ref0.data[[b, j]]).collect();
        let c0 = spectral.forward(&u0);
        let half = n.div_ceil(2);
        let energy: Vec<f64> = (1..half).map(|k| c0[k].norm_sqr()).collect();
        let total: f64 = energy.iter().sum();
        let modes: Vec<usize> = (1..half).filter(|&k| total > 0.0 && energy[k - 1] >= cfg.mode_energy_fraction * total).collect();
        let wsum: f64 = modes.iter().map(|&k| energy[k - 1]).sum();
        mode_counts.push(modes.len());
        let m0 = integral(&u0, dx);
        let n0 = l2norm(&u0, dx);
        let (mut ph, mut am, mut ma, mut ld) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for (t, &time) in times.iter().enumerate().take(v.steps) {
            let u = v.row(b, t);
            let c = spectral.forward(&u);
            let (mut sp, mut sa) = (0.0, 0.0);
            for &k in &modes {
                let w = energy[k - 1] / wsum;
                let kappa = 2.0 * PI * k as f64 / length;
                let d = wrap_angle(c[k].arg() - (c0[k].arg() - kappa * beta * time));
                sp += w * d * d;
                let da = (c[k].norm() - c0[k].norm()) / n as f64;
                sa += w * da * da;
            }
            ph = ph.max(sp.sqrt());
            am = am.max(sa.sqrt());
            ma = ma.max(relative_drift(integral(&u, dx), m0, m0.abs()));
            let dl = if n0 == 0.0 { l2norm(&u, dx) } else { (l2norm(&u, dx) - n0) / n0 };
            if dl.abs() > ld.abs() {
                ld = dl;
            }
        }
        phase.push(ph);
        amp.push(am);
        mass.push(ma);
        l2d.push(ld);
    }
    Ok(vec![
        FeedbackRecord::from_samples("advection.phase_error", phase)
            .with_meta("mode_energy_fraction", cfg.mode_energy_fraction)
            .with_meta("modes_per_sample", mode_counts.clone()),
        FeedbackRecord::from_samples("advection.amplitude_error", amp).with_meta("modes_per_sample", mode_counts),
        FeedbackRecord::from_samples("advection.mass_drift", mass),
        FeedbackRecord::from_samples("advection.l2_drift", l2d),
    ])
}

fn burgers(field: &SolutionField, grid: &GridSpec, ref0: &SolutionField) -> Result<Vec<FeedbackRecord>, MetricError> {
    let v = ScalarView::new(field)?;
    let dx = grid.dx();
    let (mut entropy, mut tv, mut mean) = (Vec::new(), Vec::new(), Vec::new());
    for b in 0..v.batch {
        let u0: Vec<f64> = (0..v.n).map(|j| ref0.data[[b, j]]).collect();
        let m0 = integral(&u0, dx);
        let rows: Vec<Vec<f64>> = (0..v.steps).map(|t| v.row(b, t)).collect();
        let energy = |u: &[f64]| u.iter().map(|x| 0.5 * x * x).sum::<f64>() * dx;
        let (mut e, mut g, mut m) = (0.0, 0.0, 0.0f64);
        for w in rows.windows(2) {
            e += (energy(&w[1]) - energy(&w[0])).max(0.0);
            g += (crate::reference::total_variation(&w[1]) - crate::reference::total_variation(&w[0])).max(0.0);
        }
        for u in &rows {
            m = m.max(relative_drift(integral(u, dx), m0, m0.abs()));
        }
        entropy.push(e);
        tv.push(g);
        mean.push(m);
    }
    Ok(vec![
        FeedbackRecord::from_samples("burgers.entropy_violation", entropy),
        FeedbackRecord::from_samples("burgers.tv_growth", tv),
        FeedbackRecord::from_samples("burgers.mean_drift", mean),
    ])
}

fn reaction_diffusion(
    task: &PdeTask,
    field: &SolutionField,
    grid: &GridSpec,
    cfg: &InvariantConfig,
) -> Result<Vec<FeedbackRecord>, MetricError> {
    let v = ScalarView::new(field)?;
    let (n, dx, length) = (v.n, grid.dx(), grid.length(0));
    let (nu, rho) = (task.param("nu"), task.param("rho"));
    let times = &grid.t_coordinates;
    let spectral = Spectral::new(n);
    let (mut mp, mut react) = (Vec::new(), Vec::new());
    for b in 0..v.batch {
        let (mut worst_mp, mut worst_react) = (0.0f64, 0.0f64);
        for t in 0..v.steps {
            let u = v.row(b, t);
            let below = u.iter().map(|x| (-x).max(0.0).powi(2)).sum::<f64>() * dx;
            let above = u.iter().map(|x| (x - 1.0).max(0.0).powi(2)).sum::<f64>() * dx;
            worst_mp = worst_mp.max(below.sqrt() + above.sqrt());
            if t + 1 < v.steps {
                // Strang map with exact sub-flows: R(dt/2), heat(dt), R(dt/2).
                let dt = times[t + 1] - times[t];
                let half: Vec<f64> = u.iter().map(|&x| reaction_exact_step(x, 0.5 * dt, rho, 1e-300)).collect();
                let diffused = spectral.heat(&half, nu * dt, length);
                let predicted: Vec<f64> = diffused.iter().map(|&x| reaction_exact_step(x, 0.5 * dt, rho, 1e-300)).collect();
                let next = v.row(b, t + 1);
                let diff: Vec<f64> = next.iter().zip(&predicted).map(|(a, p)| a - p).collect();
                worst_react = worst_react.max(l2norm(&diff, dx));
            }
        }
        mp.push(worst_mp);
        react.push(worst_react);
    }
    let dt = cfg.internal_dt.unwrap_or_else(|| times.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max));
    let stiffness = (dt * rho - 1.0).max(0.0);
    Ok(vec![
        FeedbackRecord::from_samples("rd.max_principle", mp),
        FeedbackRecord::from_samples("rd.react_split_error", react).with_meta("placement", "strang_exact_substeps"),
        FeedbackRecord::new("rd.stiffness_excess", stiffness)
            .with_meta("dt", dt)
            .with_meta("bound", "dt * rho <= 1"),
    ])
}

fn navier_stokes(task: &PdeTask, field: &SolutionField, grid: &GridSpec, ref0: &SolutionField) -> Result<Vec<FeedbackRecord>, MetricError> {
    let v = NsView::new(field)?;
    let gamma = task.param("gamma");
    let mu = task.param("zeta") + 4.0 / 3.0 * task.param("eta");
    let dx = grid.dx();
    let times = &grid.t_coordinates;
    let n = v.n;
    if ref0.shape() != [v.batch, n, 3] {
        return Err(MetricError::Shape { pred: field.shape().to_vec(), reference: ref0.shape().to_vec() });
    }
    let mut rec: [Vec<f64>; 7] = Default::default();
    for b in 0..v.batch {
        let state = |t: usize, j: usize| {
            let (rho, vel, p) = v.at(b, t, j);
            NsState { rho, v: vel, p }
        };
        let energy = |s: &NsState| s.p / (gamma - 1.0) + 0.5 * s.rho * s.v * s.v;
        let init: Vec<NsState> =
            (0..n).map(|j| NsState { rho: ref0.data[[b, j, 0]], v: ref0.data[[b, j, 1]], p: ref0.data[[b, j, 2]] }).collect();
        let mass0 = init.iter().map(|s| s.rho).sum::<f64>() * dx;
        let mom0 = init.iter().map(|s| s.rho * s.v).sum::<f64>() * dx;
        let mom_scale = init.iter().map(|s| (s.rho * s.v).abs()).sum::<f64>() * dx;
        let e0 = init.iter().map(energy).sum::<f64>() * dx;
        let entropy = |t: usize| {
            (0..n)
                .map(|j| {
                    let s = state(t, j);
                    if s.rho > 0.0 && s.p > 0.0 {
                        s.rho * (s.p.ln() - gamma * s.rho.ln())
                    } else {
                        0.0
                    }
                })
                .sum::<f64>()
                * dx
        };
        let (mut dm, mut dmom, mut de, mut pos, mut ent, mut rh) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0, 0.0);
        let mut sigma_prev = entropy(0);
        let sigma_first = sigma_prev;
        for t in 0..v.steps {
            let cells: Vec<NsState> = (0..n).map(|j| state(t, j)).collect();
            dm = dm.max(relative_drift(cells.iter().map(|s| s.rho).sum::<f64>() * dx, mass0, mass0.abs()));
            dmom = dmom.max(relative_drift(cells.iter().map(|s| s.rho * s.v).sum::<f64>() * dx, mom0, mom_scale));
            de = de.max(relative_drift(cells.iter().map(energy).sum::<f64>() * dx, e0, e0.abs()));
            let neg = cells.iter().map(|s| (-s.rho).max(0.0) + (-s.p).max(0.0)).sum::<f64>() * dx;
            pos = pos.max(neg);
            if t + 1 < v.steps {
                let sigma = entropy(t + 1);
                ent += (-(sigma - sigma_prev)).max(0.0);
                sigma_prev = sigma;
                if cells.iter().all(|s| s.rho > 0.0 && s.p > 0.0) {
                    let dt = times[t + 1] - times[t];
                    let faces: Vec<[f64; 3]> = (0..n)
                        .map(|j| {
                            let (l, r) = (&cells[j], &cells[(j + 1) % n]);
                            let mut f = rusanov_flux(l, r, gamma);
                            let s = mu * (r.v - l.v) / dx;
                            f[1] -= s;
                            f[2] -= 0.5 * (l.v + r.v) * s;
                            f
                        })
                        .collect();
                    for j in 0..n {
                        let now = crate::reference::conserved(&cells[j], gamma);
                        let next = crate::reference::conserved(&state(t + 1, j), gamma);
                        let left = &faces[(j + n - 1) % n];
                        rh += (0..3).map(|e| ((next[e] - now[e]) / dt + (faces[j][e] - left[e]) / dx).abs()).sum::<f64>();
                    }
                }
            }
        }
        for (slot, value) in rec.iter_mut().zip([dm, dmom, de, pos, ent, sigma_prev - sigma_first, rh]) {
            slot.push(value);
        }
    }
    let [dm, dmom, de, pos, ent, prod, rh] = rec;
    Ok(vec![
        FeedbackRecord::from_samples("ns.mass_drift", dm),
        FeedbackRecord::from_samples("ns.momentum_drift", dmom),
        FeedbackRecord::from_samples("ns.energy_drift", de),
        FeedbackRecord::from_samples("ns.positivity", pos),
        FeedbackRecord::from_samples("ns.entropy_violation", ent),
        FeedbackRecord::from_samples("ns.entropy_production", prod),
        FeedbackRecord::from_samples("ns.rh_defect", rh).with_meta("flux", "rusanov_plus_viscous"),
    ])
}

fn darcy(task: &PdeTask, field: &SolutionField, grid: &GridSpec, coeff: &SolutionField) -> Result<Vec<FeedbackRecord>, MetricError> {
    let (batch, n) = darcy_samples(field, coeff)?;
    let beta = task.param("beta_source");
    let h = grid.dx();
    let (mut eta2, mut local, mut global) = (Vec::new(), Vec::new(), Vec::new());
    for b in 0..batch {
        let a: Vec<f64> = coeff.data.index_axis(ndarray::Axis(0), b).iter().copied().collect();
        let u: Vec<f64> = field.data.index_axis(ndarray::Axis(0), b).iter().copied().collect();
        let op = darcy_operator(&a, n, h)?;
        let au = op.apply(&u);
        // Ghost value -u_K outside the domain.
        let val = |i: isize, j: isize| {
            let inside = |k: isize| k >= 0 && k < n as isize;
            match (inside(i), inside(j)) {
                (true, true) => u[i as usize * n + j as usize],
                (false, true) => -u[(i.clamp(0, n as isize - 1)) as usize * n + j as usize],
                (true, false) => -u[i as usize * n + j.clamp(0, n as isize - 1) as usize],
                _ => 0.0,
            }
        };
        let grad = |i: usize, j: usize| {
            let (ii, jj) = (i as isize, j as isize);
            ((val(ii + 1, jj) - val(ii - 1, jj)) / (2.0 * h), (val(ii, jj + 1) - val(ii, jj - 1)) / (2.0 * h))
        };
        let mut e2 = 0.0;
        let mut lm = 0.0;
        let mut boundary_flux = 0.0;
        for i in 0..n {
            for j in 0..n {
                let k = i * n + j;
                let r = beta - au[k];
                let (gx, gy) = grad(i, j);
                // Interior faces of K: jump of the normal flux between the two cell gradients.
                let mut jumps = 0.0;
                if i + 1 < n {
                    let d = a[k] * gx - a[k + n] * grad(i + 1, j).0;
                    jumps += h * h * d * d;
                }
                if i > 0 {
                    let d = a[k] * gx - a[k - n] * grad(i - 1, j).0;
                    jumps += h * h * d * d;
                }
                if j + 1 < n {
                    let d = a[k] * gy - a[k + 1] * grad(i, j + 1).1;
                    jumps += h * h * d * d;
                }
                if j > 0 {
                    let d = a[k] * gy - a[k - 1] * grad(i, j - 1).1;
                    jumps += h * h * d * d;
                }
                e2 += h * h * (r * r * h * h) + jumps;
                lm += (h * h * r).abs();
                let faces_out = [i == 0, i + 1 == n, j == 0, j + 1 == n].iter().filter(|&&x| x).count();
                boundary_flux -= faces_out as f64 * 2.0 * a[k] * u[k];
            }
        }
        eta2.push(e2);
        local.push(lm);
        global.push((beta + boundary_flux).abs());
    }
    Ok(vec![
        FeedbackRecord::from_samples("darcy.eta_squared", eta2).with_meta("jumps", "interior_faces_cell_central_gradients"),
        FeedbackRecord::from_samples("darcy.local_mass", local),
        FeedbackRecord::from_samples("darcy.global_compatibility", global),
    ])
}
