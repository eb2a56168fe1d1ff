//! Closed-form eigenfunctions `(phi, xi, q)` of one Fourier mode.
//!
//! `xi(y) = C1 e^{ky} + C2 e^{-ky} + C3 e^{mu y} + C4 e^{-mu y}` with `mu = i mu_tilde`,
//! `phi = (i/k) xi'` and `q = [(lambda + nu k^2) xi' - nu xi'''] / k^2`.
//!
//! Everything is stored scaled by `e^{-|k|}`: each term is kept as `D_i e^{r_i y - s_i}` with
//! `s_i = max(0, Re r_i)`, so no exponential in an evaluation exceeds one.

use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::ModeIndex;
use crate::error::{Error, Result};
use crate::quadrature::{simpson_weights, uniform_grid};
use crate::spectral::SpectralRoot;

type C64 = Complex64;

const I: C64 = C64::new(0.0, 1.0);

fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

/// The four coefficients of an eigenfunction, stored in overflow-safe form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenfunctionCoefficients {
    pub mode: ModeIndex,
    pub l: usize,
    pub mu: C64,
    pub lambda: f64,
    pub nu: f64,
    /// Exponential rates `(k, -k, mu, -mu)`.
    pub rates: [C64; 4],
    /// Shifts `s_i` applied to the basis exponentials.
    pub shifts: [f64; 4],
    /// `C_i e^{s_i - |k|}`.
    pub scaled: [C64; 4],
}

impl EigenfunctionCoefficients {
    /// `C_i` without scaling. Overflows for large `|k|`.
    pub fn raw(&self) -> [C64; 4] {
        let a = self.mode.k.abs();
        let mut out = [C64::default(); 4];
        for i in 0..4 {
            out[i] = self.scaled[i] * (a - self.shifts[i]).exp();
        }
        out
    }

    /// `e^{-|k|} xi^{(order)}(y)`.
    pub fn xi_scaled(&self, y: f64, order: u32) -> C64 {
        let mut s = C64::default();
        for i in 0..4 {
            let r = self.rates[i];
            s += self.scaled[i] * r.powu(order) * (r * y - self.shifts[i]).exp();
        }
        s
    }

    /// Same coefficients with `mu` replaced by `-mu`: the `e^{mu y}` and `e^{-mu y}` slots swap.
    pub fn with_mu_negated(&self) -> Self {
        let mut out = *self;
        out.mu = -self.mu;
        out.rates.swap(2, 3);
        out.shifts.swap(2, 3);
        out.scaled.swap(2, 3);
        out
    }

    /// Coefficients of the conjugate mode `-k`, whose eigenfunction is the complex conjugate.
    pub fn conjugate(&self) -> Self {
        let mut out = *self;
        out.mode = self.mode.conjugate();
        for i in 0..4 {
            out.rates[i] = self.rates[i].conj();
            out.scaled[i] = self.scaled[i].conj();
        }
        out
    }
}

/// Coefficient formulas as sums `coef * e^{exponent}`.
fn coefficient_terms(k: f64, mu: C64) -> [[(C64, C64); 5]; 4] {
    let kc = c(k);
    let mu2 = mu * mu;
    let two_k_mu = 2.0 * kc * mu;
    let k_mu = kc * mu;
    let k2 = c(k * k);
    let zero = C64::default();
    [
        [
            (mu2, -(mu + kc)),
            (-mu2, mu - kc),
            (two_k_mu, zero),
            (-k_mu, -(mu + kc)),
            (-k_mu, mu - kc),
        ],
        [
            (mu2, mu + kc),
            (-mu2, -(mu - kc)),
            (two_k_mu, zero),
            (-k_mu, -(mu - kc)),
            (-k_mu, mu + kc),
        ],
        [
            (two_k_mu, zero),
            (-k_mu, -(mu + kc)),
            (-k_mu, -(mu - kc)),
            (k2, -(mu + kc)),
            (-k2, -(mu - kc)),
        ],
        [
            (two_k_mu, zero),
            (-k_mu, mu + kc),
            (-k_mu, mu - kc),
            (k2, mu + kc),
            (-k2, mu - kc),
        ],
    ]
}

/// Eigenfunction coefficients for a certified root.
pub fn coefficients(root: &SpectralRoot, nu: f64) -> Result<EigenfunctionCoefficients> {
    let k = root.mode.k;
    if k == 0.0 {
        return Err(Error::Domain("eigenfunction coefficients need k != 0"));
    }
    let a = k.abs();
    let mu = C64::new(0.0, root.mu_tilde);
    let rates = [c(k), c(-k), mu, -mu];
    let shifts = rates.map(|r| r.re.max(0.0));
    let terms = coefficient_terms(k, mu);
    let mut scaled = [C64::default(); 4];
    for i in 0..4 {
        for &(coef, ex) in &terms[i] {
            scaled[i] += coef * (ex + c(shifts[i] - a)).exp();
        }
    }
    let scale = (a + root.mu_tilde).powi(2);
    if scaled.iter().all(|d| d.norm() < 1e-14 * scale) {
        return Err(Error::DegenerateCoefficients {
            m: root.mode.m,
            l: root.l,
        });
    }
    Ok(EigenfunctionCoefficients {
        mode: root.mode,
        l: root.l,
        mu,
        lambda: root.lambda,
        nu,
        rates,
        shifts,
        scaled,
    })
}

/// Closed-form `e^{-|k|} xi'''(1)` for the unnormalized coefficients.
pub fn xi_triple_prime_at_one(mode: ModeIndex, mu_tilde: f64, lambda: f64, nu: f64) -> C64 {
    let k = mode.k;
    let a = k.abs();
    let e = (-a).exp();
    let (s, cs) = mu_tilde.sin_cos();
    // (2k / sinh k)(1 - cosh k cos mu) e^{-|k|} and k sinh(k) e^{-|k|}
    let first = 2.0 * k / k.sinh() * e - 2.0 * k / k.tanh() * cs * e;
    let second = k * k.signum() * 0.5 * (1.0 - (-2.0 * a).exp());
    let bracket = mu_tilde * (first + second) + k * k * s * e;
    -4.0 * I * k * (lambda / nu) * bracket
}

/// `xi'''(1)` of the closed form without scaling. Overflows for large `|k|`.
pub fn xi_triple_prime_at_one_raw(mode: ModeIndex, mu_tilde: f64, lambda: f64, nu: f64) -> C64 {
    xi_triple_prime_at_one(mode, mu_tilde, lambda, nu) * mode.k.abs().exp()
}

/// `(e^{c} - 1) / c` for complex `c`, accurate near zero.
fn exprel(z: C64) -> C64 {
    if z.norm() < 1e-5 {
        C64::new(1.0, 0.0) + z / 2.0 + z * z / 6.0 + z * z * z / 24.0
    } else {
        let em1 = C64::new(
            z.re.exp_m1() * z.im.cos() - 2.0 * (0.5 * z.im).sin().powi(2),
            z.re.exp() * z.im.sin(),
        );
        em1 / z
    }
}

/// `int_0^1 e^{z y - s} dy` without overflow for `Re z <= s`.
fn shifted_exp_integral(z: C64, s: f64) -> C64 {
    if z.re > 1.0 {
        ((z - c(s)).exp() - c((-s).exp())) / z
    } else {
        exprel(z) * (-s).exp()
    }
}

/// `||(phi, xi)||^2` of the scaled eigenfunction, by exact integration of exponential products.
fn scaled_norm_sq(co: &EigenfunctionCoefficients) -> f64 {
    let k2 = co.mode.k * co.mode.k;
    let mut total = C64::default();
    for i in 0..4 {
        for j in 0..4 {
            let ri = co.rates[i];
            let rj = co.rates[j].conj();
            let w = co.scaled[i] * co.scaled[j].conj() * (c(1.0) + ri * rj / k2);
            total += w * shifted_exp_integral(ri + rj, co.shifts[i] + co.shifts[j]);
        }
    }
    total.re
}

/// Unit-norm eigenfunction of one `(k, l)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalEigenfunction {
    pub coeffs: EigenfunctionCoefficients,
    /// Norm of the `e^{-|k|}`-scaled eigenfunction before normalization.
    pub scaled_norm: f64,
    /// `xi'''(1)` after normalization.
    pub xi_ppp_1: C64,
    /// Pressure trace `q(1) = -(nu / k^2) xi'''(1)` after normalization.
    pub trace: C64,
}

impl ModalEigenfunction {
    pub fn new(root: &SpectralRoot, nu: f64) -> Result<Self> {
        let coeffs = coefficients(root, nu)?;
        Ok(Self::from_coefficients(coeffs))
    }

    pub fn from_coefficients(coeffs: EigenfunctionCoefficients) -> Self {
        let scaled_norm = scaled_norm_sq(&coeffs).sqrt();
        let xi_ppp_1 = coeffs.xi_scaled(1.0, 3) / scaled_norm;
        let k = coeffs.mode.k;
        ModalEigenfunction {
            coeffs,
            scaled_norm,
            xi_ppp_1,
            trace: -coeffs.nu / (k * k) * xi_ppp_1,
        }
    }

    pub fn conjugate(&self) -> Self {
        ModalEigenfunction {
            coeffs: self.coeffs.conjugate(),
            scaled_norm: self.scaled_norm,
            xi_ppp_1: self.xi_ppp_1.conj(),
            trace: self.trace.conj(),
        }
    }

    pub fn mode(&self) -> ModeIndex {
        self.coeffs.mode
    }

    pub fn l(&self) -> usize {
        self.coeffs.l
    }

    pub fn lambda(&self) -> f64 {
        self.coeffs.lambda
    }

    /// Natural log of the norm of the raw, unnormalized eigenfunction.
    pub fn raw_log_norm(&self) -> f64 {
        self.coeffs.mode.k.abs() + self.scaled_norm.ln()
    }

    /// Normalized `xi^{(order)}(y)`.
    pub fn xi(&self, y: f64, order: u32) -> C64 {
        self.coeffs.xi_scaled(y, order) / self.scaled_norm
    }

    /// Normalized `phi^{(order)}(y)`.
    pub fn phi(&self, y: f64, order: u32) -> C64 {
        I / self.coeffs.mode.k * self.xi(y, order + 1)
    }

    pub fn q(&self, y: f64) -> C64 {
        let k2 = self.coeffs.mode.k.powi(2);
        let nu = self.coeffs.nu;
        ((self.coeffs.lambda + nu * k2) * self.xi(y, 1) - nu * self.xi(y, 3)) / k2
    }

    /// Residual of `nu xi'''' - (lambda + 2 nu k^2) xi'' + k^2 (lambda + nu k^2) xi` and its scale.
    pub fn ode_residual(&self, y: f64) -> (C64, f64) {
        let k2 = self.coeffs.mode.k.powi(2);
        let nu = self.coeffs.nu;
        let lam = self.coeffs.lambda;
        let t4 = nu * self.xi(y, 4);
        let t2 = (lam + 2.0 * nu * k2) * self.xi(y, 2);
        let t0 = k2 * (lam + nu * k2) * self.xi(y, 0);
        (t4 - t2 + t0, t4.norm() + t2.norm() + t0.norm())
    }

    pub fn sample(&self, y: &[f64]) -> EigenSamples {
        EigenSamples {
            y: y.to_vec(),
            xi: y.iter().map(|&t| self.xi(t, 0)).collect(),
            phi: y.iter().map(|&t| self.phi(t, 0)).collect(),
            q: y.iter().map(|&t| self.q(t)).collect(),
        }
    }

    /// Relative boundary residuals `|xi(0)|, |xi(1)|, |xi'(0)|, |xi'(1)|` over `max |xi|`.
    pub fn boundary_residuals(&self, grid_points: usize) -> [f64; 4] {
        let y = uniform_grid(0.0, 1.0, grid_points);
        let scale = y.iter().map(|&t| self.xi(t, 0).norm()).fold(0.0, f64::max);
        [
            self.xi(0.0, 0).norm() / scale,
            self.xi(1.0, 0).norm() / scale,
            self.xi(0.0, 1).norm() / scale,
            self.xi(1.0, 1).norm() / scale,
        ]
    }

    /// Closed-form trace over the term-by-term derivative, both for the raw coefficients.
    pub fn trace_consistency_ratio(&self) -> C64 {
        let co = &self.coeffs;
        let closed = xi_triple_prime_at_one(co.mode, co.mu.im, co.lambda, co.nu);
        closed / co.xi_scaled(1.0, 3)
    }

    /// `|xi'''(1)| / (k^2 e^{|k|} |lambda| mu_tilde)` for the raw coefficients.
    pub fn trace_bound_ratio(&self) -> f64 {
        let co = &self.coeffs;
        let k = co.mode.k;
        let closed = xi_triple_prime_at_one(co.mode, co.mu.im, co.lambda, co.nu);
        closed.norm() / (k * k * co.lambda.abs() * co.mu.im)
    }
}

/// Eigenfunction samples on a `y` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenSamples {
    pub y: Vec<f64>,
    pub xi: Vec<C64>,
    pub phi: Vec<C64>,
    pub q: Vec<C64>,
}

/// Builds the normalized eigenfunctions of all roots of a mode.
pub fn mode_eigenfunctions(roots: &[SpectralRoot], nu: f64) -> Result<Vec<ModalEigenfunction>> {
    roots
        .par_iter()
        .map(|r| ModalEigenfunction::new(r, nu))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramReport {
    pub m: i64,
    pub n_points: usize,
    /// Row-major `(re, im)` entries.
    pub matrix: Vec<Vec<(f64, f64)>>,
    pub max_offdiag: f64,
    pub max_diag_error: f64,
}

/// Gram matrix `int_0^1 (phi_a conj(phi_b) + xi_a conj(xi_b)) dy` by composite Simpson.
pub fn normalize_and_gram(eigs: &[ModalEigenfunction], n_points: usize) -> Result<GramReport> {
    let m = eigs.first().map(|e| e.mode().m).unwrap_or(0);
    if eigs.iter().any(|e| e.mode().m != m) {
        return Err(Error::Domain(
            "Gram matrix needs eigenfunctions of a single mode",
        ));
    }
    let w = simpson_weights(n_points, 1.0)?;
    let y = uniform_grid(0.0, 1.0, n_points);
    let samples: Vec<EigenSamples> = eigs.par_iter().map(|e| e.sample(&y)).collect();
    let n = eigs.len();
    let mut matrix = vec![vec![(0.0, 0.0); n]; n];
    let mut max_off: f64 = 0.0;
    let mut max_diag: f64 = 0.0;
    for a in 0..n {
        for b in 0..n {
            let mut s = C64::default();
            for i in 0..n_points {
                s += w[i]
                    * (samples[a].phi[i] * samples[b].phi[i].conj()
                        + samples[a].xi[i] * samples[b].xi[i].conj());
            }
            matrix[a][b] = (s.re, s.im);
            if a == b {
                max_diag = max_diag.max((s - c(1.0)).norm());
            } else {
                max_off = max_off.max(s.norm());
            }
        }
    }
    Ok(GramReport {
        m,
        n_points,
        matrix,
        max_offdiag: max_off,
        max_diag_error: max_diag,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub m: i64,
    pub k: f64,
    pub l: usize,
    pub mu_tilde: f64,
    pub lambda: f64,
    /// `xi'''(1)` of the raw coefficients scaled by `e^{-|k|}`.
    pub xi_ppp_1_scaled: (f64, f64),
    pub log10_abs_xi_ppp_1: f64,
    /// Normalized trace `q(1)`.
    pub trace: (f64, f64),
    pub bound_ratio: f64,
    pub consistency_ratio: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    pub schema_version: u32,
    pub entries: Vec<TraceEntry>,
    /// Empirical infimum of `bound_ratio`.
    pub empirical_m: f64,
    /// Largest deviation of the consistency ratio from its mode mean, relative.
    pub max_ratio_spread: f64,
    /// Largest `|ratio - 1|`.
    pub max_ratio_deviation: f64,
}

pub fn trace_report(modes: &[Vec<ModalEigenfunction>]) -> TraceReport {
    let mut entries = Vec::new();
    let mut spread: f64 = 0.0;
    let mut deviation: f64 = 0.0;
    for eigs in modes {
        let ratios: Vec<C64> = eigs.iter().map(|e| e.trace_consistency_ratio()).collect();
        if !ratios.is_empty() {
            let mean = ratios.iter().sum::<C64>() / ratios.len() as f64;
            for r in &ratios {
                spread = spread.max((r - mean).norm() / mean.norm());
                deviation = deviation.max((r - c(1.0)).norm());
            }
        }
        for (e, r) in eigs.iter().zip(&ratios) {
            let co = &e.coeffs;
            let closed = xi_triple_prime_at_one(co.mode, co.mu.im, co.lambda, co.nu);
            entries.push(TraceEntry {
                m: co.mode.m,
                k: co.mode.k,
                l: co.l,
                mu_tilde: co.mu.im,
                lambda: co.lambda,
                xi_ppp_1_scaled: (closed.re, closed.im),
                log10_abs_xi_ppp_1: closed.norm().log10()
                    + co.mode.k.abs() / std::f64::consts::LN_10,
                trace: (e.trace.re, e.trace.im),
                bound_ratio: e.trace_bound_ratio(),
                consistency_ratio: (r.re, r.im),
            });
        }
    }
    let empirical_m = entries
        .iter()
        .map(|e| e.bound_ratio)
        .fold(f64::INFINITY, f64::min);
    TraceReport {
        schema_version: crate::SCHEMA_VERSION,
        entries,
        empirical_m,
        max_ratio_spread: spread,
        max_ratio_deviation: deviation,
    }
}

#[derive(Serialize)]
struct EigenRow {
    m: i64,
    l: usize,
    y: f64,
    re_xi: f64,
    im_xi: f64,
    re_phi: f64,
    im_phi: f64,
    re_q: f64,
    im_q: f64,
}

pub fn write_eigen_csv<W: Write>(eigs: &[ModalEigenfunction], y: &[f64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for e in eigs {
        let s = e.sample(y);
        for i in 0..y.len() {
            w.serialize(EigenRow {
                m: e.mode().m,
                l: e.l(),
                y: y[i],
                re_xi: s.xi[i].re,
                im_xi: s.xi[i].im,
                re_phi: s.phi[i].re,
                im_phi: s.phi[i].im,
                re_q: s.q[i].re,
                im_q: s.q[i].im,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}
