//! Steady Darcy flow `-div(a grad u) = beta` on the unit square with `u = 0` on the boundary.
//!
//! Cell-centred five-point finite volumes: interior faces use the harmonic mean of the two
//! coefficients, boundary faces see a ghost value `-u_K` so the face trace is exactly zero.

use ndarray::{ArrayD, IxDyn};

use super::{par_batch, ReferenceError};
use crate::domain::{GridSpec, SolutionField};

/// The discrete operator for one coefficient field on an `n x n` grid, index `i * n + j`
/// with `i` along x.
#[derive(Debug, Clone)]
pub struct DarcyOperator {
    n: usize,
    h: f64,
    /// Transmissibility of the face between (i, j) and (i + 1, j); `n + 1` faces per row,
    /// the outer two are boundary faces.
    tx: Vec<f64>,
    /// Same for faces between (i, j) and (i, j + 1).
    ty: Vec<f64>,
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

impl DarcyOperator {
    pub fn new(a: &[f64], n: usize, h: f64) -> Result<Self, ReferenceError> {
        if let Some(&bad) = a.iter().find(|&&v| !(v > 0.0)) {
            return Err(ReferenceError::NonPositive { name: "a", value: bad });
        }
        let at = |i: usize, j: usize| a[i * n + j];
        let mut tx = vec![0.0; (n + 1) * n];
        let mut ty = vec![0.0; n * (n + 1)];
        for f in 0..=n {
            for j in 0..n {
                tx[f * n + j] = match f {
                    0 => 2.0 * at(0, j),
                    _ if f == n => 2.0 * at(n - 1, j),
                    _ => harmonic(at(f - 1, j), at(f, j)),
                };
            }
        }
        for i in 0..n {
            for f in 0..=n {
                ty[i * (n + 1) + f] = match f {
                    0 => 2.0 * at(i, 0),
                    _ if f == n => 2.0 * at(i, n - 1),
                    _ => harmonic(at(i, f - 1), at(i, f)),
                };
            }
        }
        Ok(DarcyOperator { n, h, tx, ty })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Transmissibility of the x-face left of cell `i` (`f = i`) or right of it (`f = i + 1`).
    pub fn tx(&self, f: usize, j: usize) -> f64 {
        self.tx[f * self.n + j]
    }

    pub fn ty(&self, i: usize, f: usize) -> f64 {
        self.ty[i * (self.n + 1) + f]
    }

    /// `-div(a grad u)` evaluated cell-wise.
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let n = self.n;
        let val = |i: isize, j: isize| {
            if i < 0 || j < 0 || i >= n as isize || j >= n as isize {
                0.0
            } else {
                u[i as usize * n + j as usize]
            }
        };
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let c = u[i * n + j];
                let (ii, jj) = (i as isize, j as isize);
                let s = self.tx(i, j) * (c - val(ii - 1, jj))
                    + self.tx(i + 1, j) * (c - val(ii + 1, jj))
                    + self.ty(i, j) * (c - val(ii, jj - 1))
                    + self.ty(i, j + 1) * (c - val(ii, jj + 1));
                out[i * n + j] = s / (self.h * self.h);
            }
        }
        out
    }

    /// Direct solve of `apply(u) = rhs` by banded Cholesky (half-bandwidth `n`).
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>, ReferenceError> {
        let n = self.n;
        let m = n * n;
        let bw = n;
        let width = bw + 1;
        let scale = 1.0 / (self.h * self.h);
        // band[k * width + d] holds entry (k, k - d).
        let mut band = vec![0.0; m * width];
        for i in 0..n {
            for j in 0..n {
                let k = i * n + j;
                band[k * width] =
                    scale * (self.tx(i, j) + self.tx(i + 1, j) + self.ty(i, j) + self.ty(i, j + 1));
                if j > 0 {
                    band[k * width + 1] = -scale * self.ty(i, j);
                }
                if i > 0 {
                    band[k * width + bw] = -scale * self.tx(i, j);
                }
            }
        }
        for k in 0..m {
            let lo = k.saturating_sub(bw);
            for c in lo..k {
                let c_lo = c.saturating_sub(bw).max(lo);
                let mut s = band[k * width + (k - c)];
                for p in c_lo..c {
                    s -= band[k * width + (k - p)] * band[c * width + (c - p)];
                }
                band[k * width + (k - c)] = s / band[c * width];
            }
            let mut d = band[k * width];
            for p in lo..k {
                let l = band[k * width + (k - p)];
                d -= l * l;
            }
            if !(d > 0.0) {
                return Err(ReferenceError::Linear(format!("matrix not positive definite at row {k}")));
            }
            band[k * width] = d.sqrt();
        }
        let mut y = rhs.to_vec();
        for k in 0..m {
            let lo = k.saturating_sub(bw);
            let mut s = y[k];
            for p in lo..k {
                s -= band[k * width + (k - p)] * y[p];
            }
            y[k] = s / band[k * width];
        }
        for k in (0..m).rev() {
            let hi = (k + bw).min(m - 1);
            let mut s = y[k];
            for r in k + 1..=hi {
                s -= band[r * width + (r - k)] * y[r];
            }
            y[k] = s / band[k * width];
        }
        Ok(y)
    }

    /// Values on the boundary faces, ordered left, right, bottom, top. The ghost
    /// reconstruction makes each entry `(u_K + (-u_K)) / 2`.
    pub fn boundary_trace(&self, u: &[f64]) -> Vec<f64> {
        let n = self.n;
        let face = |k: usize| 0.5 * (u[k] + -u[k]);
        let mut out = Vec::with_capacity(4 * n);
        out.extend((0..n).map(|j| face(j)));
        out.extend((0..n).map(|j| face((n - 1) * n + j)));
        out.extend((0..n).map(|i| face(i * n)));
        out.extend((0..n).map(|i| face(i * n + n - 1)));
        out
    }
}

/// `||A u - rhs|| / ||rhs||` in the Euclidean norm.
pub fn relative_residual(op: &DarcyOperator, u: &[f64], rhs: &[f64]) -> f64 {
    let au = op.apply(u);
    let num: f64 = au.iter().zip(rhs).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = rhs.iter().map(|b| b * b).sum();
    (num / den).sqrt()
}

pub fn solve_darcy(beta: f64, grid: &GridSpec, inputs: &SolutionField) -> Result<SolutionField, ReferenceError> {
    let n = grid.points_per_axis[0];
    let h = grid.dx_per_axis[0];
    let batch = inputs.batch();
    let rhs = vec![beta; n * n];
    let results = par_batch(batch, |b| -> Result<Vec<f64>, ReferenceError> {
        let a: Vec<f64> = inputs.data.index_axis(ndarray::Axis(0), b).iter().copied().collect();
        let op = DarcyOperator::new(&a, n, h)?;
        let u = op.solve(&rhs)?;
        if beta != 0.0 {
            let r = relative_residual(&op, &u, &rhs);
            if !(r <= 1e-10) {
                return Err(ReferenceError::Linear(format!("sample {b}: relative residual {r:.3e}")));
            }
        }
        Ok(u)
    });
    let mut data = Vec::with_capacity(batch * n * n);
    for r in results {
        data.extend(r?);
    }
    Ok(SolutionField::scalar(ArrayD::from_shape_vec(IxDyn(&[batch, n, n]), data).expect("consistent shapes")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{make_grid, PdeTask, TaskId};
    use crate::sampling::sample_initial_conditions;

    /// Dense Gaussian elimination with partial pivoting.
    fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let m = b.len();
        for c in 0..m {
            let p = (c..m).max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs())).unwrap();
            a.swap(c, p);
            b.swap(c, p);
            for r in c + 1..m {
                let f = a[r][c] / a[c][c];
                for k in c..m {
                    a[r][k] -= f * a[c][k];
                }
                b[r] -= f * b[c];
            }
        }
        let mut x = vec![0.0; m];
        for r in (0..m).rev() {
            let s: f64 = (r + 1..m).map(|k| a[r][k] * x[k]).sum();
            x[r] = (b[r] - s) / a[r][r];
        }
        x
    }

    #[test]
    fn banded_cholesky_matches_dense_elimination() {
        let task = PdeTask::registry_get(TaskId::Darcy, None).unwrap();
        let grid = make_grid(&task, &[8, 8], None, None).unwrap();
        let a = sample_initial_conditions(&task, &grid, 1, 3).unwrap();
        let coeff: Vec<f64> = a.data.iter().copied().collect();
        let op = DarcyOperator::new(&coeff, 8, 1.0 / 8.0).unwrap();
        let dense: Vec<Vec<f64>> = (0..64)
            .map(|c| {
                let mut e = vec![0.0; 64];
                e[c] = 1.0;
                op.apply(&e)
            })
            .collect();
        // Columns were built above; transpose into rows.
        let rows: Vec<Vec<f64>> = (0..64).map(|r| (0..64).map(|c| dense[c][r]).collect()).collect();
        let rhs: Vec<f64> = (0..64).map(|k| 1.0 + 0.01 * k as f64).collect();
        let x = op.solve(&rhs).unwrap();
        let oracle = dense_solve(rows, rhs.clone());
        for k in 0..64 {
            assert!((x[k] - oracle[k]).abs() < 1e-12 * oracle[k].abs().max(1.0));
        }
    }

    #[test]
    fn constant_coefficient_matches_poisson_scale() {
        // With a = 1 the maximum of the solution of -lap u = 1 on the unit square is about 0.0737.
        let task = PdeTask::registry_get(TaskId::Darcy, None).unwrap();
        let grid = make_grid(&task, &[32, 32], None, None).unwrap();
        let inputs = SolutionField::scalar(ArrayD::from_elem(IxDyn(&[1, 32, 32]), 1.0));
        let out = solve_darcy(1.0, &grid, &inputs).unwrap();
        let max = out.data.iter().fold(0.0f64, |m, &v| m.max(v));
        assert!((max - 0.0737).abs() < 2e-3, "{max}");
        assert!(out.data.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn residual_and_trace() {
        let task = PdeTask::registry_get(TaskId::Darcy, None).unwrap();
        let grid = make_grid(&task, &[24, 24], None, None).unwrap();
        let inputs = sample_initial_conditions(&task, &grid, 2, 8).unwrap();
        let out = solve_darcy(1.0, &grid, &inputs).unwrap();
        for b in 0..2 {
            let a: Vec<f64> = inputs.data.index_axis(ndarray::Axis(0), b).iter().copied().collect();
            let u: Vec<f64> = out.data.index_axis(ndarray::Axis(0), b).iter().copied().collect();
            let op = DarcyOperator::new(&a, 24, 1.0 / 24.0).unwrap();
            assert!(relative_residual(&op, &u, &vec![1.0; 576]) <= 1e-10);
            assert!(op.boundary_trace(&u).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rejects_non_positive_coefficient() {
        assert!(DarcyOperator::new(&[1.0, 0.0, 1.0, 1.0], 2, 0.5).is_err());
    }
}
