//! Thin FFT helpers over `rustfft` for periodic 1D fields.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Forward/inverse plans for one transform length.
pub struct Spectral {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Spectral {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Spectral { n, forward: planner.plan_fft_forward(n), inverse: planner.plan_fft_inverse(n) }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Unnormalised DFT `X_k = sum_j x_j exp(-2 pi i j k / n)`.
    pub fn forward(&self, values: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward.process(&mut buf);
        buf
    }

    /// Inverse DFT including the `1/n` factor.
    pub fn inverse(&self, coeffs: &[Complex64]) -> Vec<Complex64> {
        let mut buf = coeffs.to_vec();
        self.inverse.process(&mut buf);
        let scale = 1.0 / self.n as f64;
        buf.iter_mut().for_each(|c| *c *= scale);
        buf
    }

    /// Signed integer wavenumber of DFT bin `k`.
    pub fn wavenumber(&self, k: usize) -> f64 {
        if k <= self.n / 2 {
            k as f64
        } else {
            k as f64 - self.n as f64
        }
    }

    /// Translates a periodic field of period `length` by `shift` (u(x) -> u(x - shift)).
    ///
    /// The Nyquist bin, when present, is multiplied by the real part of its phase factor
    /// so the result stays real.
    pub fn shift(&self, values: &[f64], shift: f64, length: f64) -> Vec<f64> {
        let mut coeffs = self.forward(values);
        for (k, c) in coeffs.iter_mut().enumerate() {
            let theta = -2.0 * PI * self.wavenumber(k) * shift / length;
            if self.n % 2 == 0 && k == self.n / 2 {
                *c *= theta.cos();
            } else {
                *c *= Complex64::from_polar(1.0, theta);
            }
        }
        self.inverse(&coeffs).into_iter().map(|c| c.re).collect()
    }

    /// Exact periodic heat semigroup `exp(t nu d_xx)` applied in Fourier space.
    pub fn heat(&self, values: &[f64], nu_t: f64, length: f64) -> Vec<f64> {
        let mut coeffs = self.forward(values);
        for (k, c) in coeffs.iter_mut().enumerate() {
            let kappa = 2.0 * PI * self.wavenumber(k) / length;
            *c *= (-nu_t * kappa * kappa).exp();
        }
        self.inverse(&coeffs).into_iter().map(|c| c.re).collect()
    }
}

/// Trigonometric interpolation of cell-centre samples onto a grid `factor` times finer.
pub fn refine(values: &[f64], factor: usize) -> Vec<f64> {
    let n = values.len();
    if factor == 1 {
        return values.to_vec();
    }
    let m = n * factor;
    let coarse = Spectral::new(n);
    let fine = Spectral::new(m);
    let coeffs = coarse.forward(values);
    // Coarse centres sit (factor - 1) / (2 factor) coarse cells right of the fine origin.
    let offset = (factor as f64 - 1.0) / (2.0 * factor as f64) / n as f64;
    let mut padded = vec![Complex64::new(0.0, 0.0); m];
    for (k, &c) in coeffs.iter().enumerate() {
        let kk = coarse.wavenumber(k);
        let phase = Complex64::from_polar(1.0, -2.0 * PI * kk * offset);
        if n % 2 == 0 && k == n / 2 {
            // Split the Nyquist bin symmetrically between +k and -k.
            padded[n / 2] += 0.5 * c * phase;
            let mirror = Complex64::from_polar(1.0, 2.0 * PI * kk * offset);
            padded[m - n / 2] += 0.5 * c * mirror;
            continue;
        }
        let idx = if kk >= 0.0 { kk as usize } else { (m as f64 + kk) as usize };
        padded[idx] += c * phase;
    }
    let scale = factor as f64;
    fine.inverse(&padded).into_iter().map(|c| c.re * scale).collect()
}

/// Block average of `factor` consecutive cells.
pub fn restrict(values: &[f64], factor: usize) -> Vec<f64> {
    values.chunks_exact(factor).map(|c| c.iter().sum::<f64>() / factor as f64).collect()
}
