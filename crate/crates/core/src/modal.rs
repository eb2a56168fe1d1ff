//! Modal coefficients, forward and adjoint evolution, and the `k = 0` sine invariants.
//!
//! Per Fourier mode the controlled state obeys `a_l' = lambda_l a_l + b_l psi_k(t)` with
//! `b_l = -conj(q_l(1))`, the normalized adjoint pressure trace.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::ModeIndex;
use crate::eigen::{mode_eigenfunctions, ModalEigenfunction};
use crate::error::{Error, Result};
use crate::spectral::ModeSpectrum;

type C64 = Complex64;

pub const MAX_STEP_EXPONENT: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ModeTag {
    Fourier(ModeIndex),
    /// The `k = 0` family `(sin(n pi y), 0)`.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalState {
    pub tag: ModeTag,
    pub alphas: Vec<C64>,
    pub t: f64,
}

impl ModalState {
    pub fn new(mode: ModeIndex, alphas: Vec<C64>, t: f64) -> Self {
        ModalState {
            tag: ModeTag::Fourier(mode),
            alphas,
            t,
        }
    }

    pub fn zeros(mode: ModeIndex, n: usize, t: f64) -> Self {
        Self::new(mode, vec![C64::default(); n], t)
    }

    pub fn norm(&self) -> f64 {
        self.alphas.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.alphas
            .iter()
            .all(|a| a.re.is_finite() && a.im.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationConfig {
    pub m_max: usize,
    pub l_max: usize,
    pub time_steps: usize,
}

impl Default for TruncationConfig {
    fn default() -> Self {
        TruncationConfig {
            m_max: 8,
            l_max: 20,
            time_steps: 4000,
        }
    }
}

impl TruncationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_max < 1 {
            return Err(Error::InvalidConfig("m_max must be at least 1".into()));
        }
        if self.l_max < 2 {
            return Err(Error::InvalidConfig("l_max must be at least 2".into()));
        }
        if self.time_steps < 1 {
            return Err(Error::InvalidConfig("time_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Eigenvalues, normalized eigenfunctions, traces and input coefficients of one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeBasis {
    pub mode: ModeIndex,
    pub nu: f64,
    pub eigs: Vec<ModalEigenfunction>,
    pub lambdas: Vec<f64>,
    /// Normalized pressure traces `q_l(1)`.
    pub traces: Vec<C64>,
    /// Input coefficients `b_l`.
    pub inputs: Vec<C64>,
}

impl ModeBasis {
    pub fn from_eigenfunctions(mode: ModeIndex, nu: f64, eigs: Vec<ModalEigenfunction>) -> Self {
        let lambdas = eigs.iter().map(|e| e.lambda()).collect();
        let traces: Vec<C64> = eigs.iter().map(|e| e.trace).collect();
        let inputs = traces.iter().map(|w| -w.conj()).collect();
        ModeBasis {
            mode,
            nu,
            eigs,
            lambdas,
            traces,
            inputs,
        }
    }

    pub fn from_spectrum(spectrum: &ModeSpectrum, nu: f64) -> Result<Self> {
        let eigs = mode_eigenfunctions(&spectrum.roots, nu)?;
        Ok(Self::from_eigenfunctions(spectrum.mode, nu, eigs))
    }

    /// Basis of mode `-m`: eigenfunctions, traces and inputs are complex conjugates.
    pub fn conjugate(&self) -> Self {
        let eigs = self.eigs.iter().map(|e| e.conjugate()).collect();
        Self::from_eigenfunctions(self.mode.conjugate(), self.nu, eigs)
    }

    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    /// The first `n` branches.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self::from_eigenfunctions(self.mode, self.nu, self.eigs[..n].to_vec())
    }
}

/// Bases for a list of spectra sorted by `m`. Negative modes reuse the conjugate of `|m|`.
pub fn build_bases(spectra: &[ModeSpectrum], nu: f64) -> Result<Vec<ModeBasis>> {
    let positive: Vec<ModeBasis> = spectra
        .par_iter()
        .filter(|s| s.mode.m > 0 || !spectra.iter().any(|p| p.mode.m == -s.mode.m))
        .map(|s| {
            ModeBasis::from_spectrum(s, nu)
                .map_err(|e| e.context(format!("eigenfunctions of mode m={}", s.mode.m)))
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(spectra.len());
    for s in spectra {
        if let Some(b) = positive.iter().find(|b| b.mode.m == s.mode.m) {
            out.push(b.clone());
        } else {
            let b = positive
                .iter()
                .find(|b| b.mode.m == -s.mode.m)
                .ok_or(Error::Domain("missing basis for conjugate mode"))?;
            out.push(b.conjugate());
        }
    }
    Ok(out)
}

/// Adjoint coefficients at time `t` from terminal data at `t_final`.
pub fn adjoint_evolve(
    terminal: &ModalState,
    lambdas: &[f64],
    t_final: f64,
    t: f64,
) -> Result<ModalState> {
    if !(t >= 0.0 && t <= t_final) {
        return Err(Error::Domain("adjoint evolution needs 0 <= t <= T"));
    }
    if lambdas.len() < terminal.alphas.len() {
        return Err(Error::Domain("fewer eigenvalues than coefficients"));
    }
    let alphas = terminal
        .alphas
        .iter()
        .zip(lambdas)
        .map(|(a, l)| a * (l * (t_final - t)).exp())
        .collect();
    Ok(ModalState {
        tag: terminal.tag,
        alphas,
        t,
    })
}

/// Samples of the adjoint pressure trace `q_k(1, t)` for terminal data at `t_final`.
pub fn adjoint_pressure_trace(
    terminal: &ModalState,
    basis: &ModeBasis,
    t_final: f64,
    t_grid: &[f64],
) -> Vec<C64> {
    t_grid
        .iter()
        .map(|&t| {
            terminal
                .alphas
                .iter()
                .zip(&basis.lambdas)
                .zip(&basis.traces)
                .map(|((a, l), w)| a * w * (l * (t_final - t)).exp())
                .sum()
        })
        .collect()
}

/// `(e^x - 1) / x`, continuous at zero.
pub fn exprel(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 + 0.5 * x
    } else {
        x.exp_m1() / x
    }
}

/// A scalar control signal `psi_k(t)` that can be integrated exactly against exponentials.
pub trait ControlInput: Sync {
    fn value(&self, t: f64) -> C64;

    /// `int_{t0}^{t1} e^{lambda (t1 - s)} psi(s) ds`.
    fn kernel_integral(&self, lambda: f64, t0: f64, t1: f64) -> C64;
}

/// The zero signal.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoControl;

impl ControlInput for NoControl {
    fn value(&self, _t: f64) -> C64 {
        C64::default()
    }

    fn kernel_integral(&self, _lambda: f64, _t0: f64, _t1: f64) -> C64 {
        C64::default()
    }
}

/// Piecewise-constant signal: `values[j]` on `[times[j], times[j+1])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseConstant {
    pub times: Vec<f64>,
    pub values: Vec<C64>,
}

impl PiecewiseConstant {
    pub fn new(times: Vec<f64>, values: Vec<C64>) -> Result<Self> {
        if times.len() != values.len() + 1 || values.is_empty() {
            return Err(Error::Domain(
                "piecewise-constant signal needs n + 1 breakpoints for n values",
            ));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain("breakpoints must increase strictly"));
        }
        Ok(PiecewiseConstant { times, values })
    }
}

impl ControlInput for PiecewiseConstant {
    fn value(&self, t: f64) -> C64 {
        let j = self.times.partition_point(|&s| s <= t);
        if j == 0 || j > self.values.len() {
            C64::default()
        } else {
            self.values[j - 1]
        }
    }

    fn kernel_integral(&self, lambda: f64, t0: f64, t1: f64) -> C64 {
        let mut acc = C64::default();
        for j in 0..self.values.len() {
            let a = self.times[j].max(t0);
            let b = self.times[j + 1].min(t1);
            if b <= a {
                continue;
            }
            let h = b - a;
            acc += self.values[j] * ((lambda * (t1 - b)).exp() * h * exprel(lambda * h));
        }
        acc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub mode: ModeIndex,
    pub times: Vec<f64>,
    /// `states[i][l]` is `a_l(times[i])`.
    pub states: Vec<Vec<C64>>,
}

impl Trajectory {
    pub fn terminal(&self) -> &[C64] {
        self.states.last().map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn terminal_norm(&self) -> f64 {
        self.terminal()
            .iter()
            .map(|a| a.norm_sqr())
            .sum::<f64>()
            .sqrt()
    }
}

/// Exact variation-of-constants integration of `a' = lambda a + b psi` on `t_grid`.
pub fn forward_controlled(
    initial: &ModalState,
    basis: &ModeBasis,
    psi: &dyn ControlInput,
    t_grid: &[f64],
) -> Result<Trajectory> {
    let n = initial.alphas.len();
    if basis.len() < n {
        return Err(Error::Domain("basis has fewer branches than the state"));
    }
    if t_grid.len() < 2 {
        return Err(Error::Domain("time grid needs at least two points"));
    }
    for w in t_grid.windows(2) {
        let h = w[1] - w[0];
        if !(h > 0.0) {
            return Err(Error::Domain("time grid must increase strictly"));
        }
        for &lam in &basis.lambdas[..n] {
            let product = lam.abs() * h;
            if product > MAX_STEP_EXPONENT {
                return Err(Error::StepTooLarge {
                    lambda: lam,
                    product,
                });
            }
        }
    }
    let mut states = Vec::with_capacity(t_grid.len());
    let mut a = initial.alphas.clone();
    states.push(a.clone());
    for w in t_grid.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        for l in 0..n {
            let lam = basis.lambdas[l];
            a[l] =
                a[l] * (lam * (t1 - t0)).exp() + basis.inputs[l] * psi.kernel_integral(lam, t0, t1);
        }
        states.push(a.clone());
    }
    Ok(Trajectory {
        mode: basis.mode,
        times: t_grid.to_vec(),
        states,
    })
}

/// `int_0^T psi(t) conj(q_k(1, t)) dt` for piecewise-constant `psi` and terminal data `alpha`.
pub fn adjoint_trace_pairing(
    psi: &PiecewiseConstant,
    alpha: &[C64],
    basis: &ModeBasis,
    t_final: f64,
) -> C64 {
    let mut total = C64::default();
    for (j, v) in psi.values.iter().enumerate() {
        let (a, b) = (psi.times[j], psi.times[j + 1].min(t_final));
        if b <= a {
            continue;
        }
        for (l, al) in alpha.iter().enumerate() {
            let lam = basis.lambdas[l];
            // int_a^b e^{lambda (T - t)} dt
            let cell = ((lam * (t_final - a)).exp() - (lam * (t_final - b)).exp()) / lam;
            total += v * (al * basis.traces[l]).conj() * cell;
        }
    }
    total
}

/// `<x, y> = sum x_l conj(y_l)`.
pub fn inner(x: &[C64], y: &[C64]) -> C64 {
    x.iter().zip(y).map(|(a, b)| a * b.conj()).sum()
}

/// Both sides of the per-mode duality identity
/// `<a(0), alpha e^{lambda T}> - <a(T), alpha> = int_0^T psi conj(q_k(1, t)) dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualityCheck {
    pub state_side: C64,
    pub trace_side: C64,
    pub scale: f64,
    pub relative_error: f64,
}

pub fn duality_check(
    a0: &[C64],
    alpha: &[C64],
    psi: &PiecewiseConstant,
    basis: &ModeBasis,
    t_final: f64,
) -> Result<DualityCheck> {
    let t_grid = psi.times.clone();
    if (t_grid[0]).abs() > 0.0 || (t_grid[t_grid.len() - 1] - t_final).abs() > 1e-14 * t_final {
        return Err(Error::Domain("signal must be defined on [0, T]"));
    }
    let init = ModalState::new(basis.mode, a0.to_vec(), 0.0);
    let traj = forward_controlled(&init, basis, psi, &t_grid)?;
    let at = traj.terminal();
    let decayed: Vec<C64> = alpha
        .iter()
        .zip(&basis.lambdas)
        .map(|(a, l)| a * (l * t_final).exp())
        .collect();
    let s0 = inner(a0, &decayed);
    let s1 = inner(at, alpha);
    let state_side = s0 - s1;
    let trace_side = adjoint_trace_pairing(psi, alpha, basis, t_final);
    let scale = s0
        .norm()
        .max(s1.norm())
        .max(trace_side.norm())
        .max(f64::MIN_POSITIVE);
    Ok(DualityCheck {
        state_side,
        trace_side,
        scale,
        relative_error: (state_side - trace_side).norm() / scale,
    })
}

/// Exact evolution of a `k = 0` sine coefficient: `value(t) = e^{-nu n^2 pi^2 t} value(0)`.
pub fn sine_mode_invariant(n: usize, value0: f64, nu: f64, t: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::Domain("sine family index starts at n = 1"));
    }
    let nf = n as f64;
    Ok(value0 * (-nu * nf * nf * PI * PI * t).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::{simpson_weights, uniform_grid};
    use crate::spectral::{compute_mode_spectrum, LocalizationParams};
    use nalgebra::{Matrix4, Vector4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn basis(m: i64, k: f64, nu: f64, n: usize) -> ModeBasis {
        let s = compute_mode_spectrum(
            ModeIndex::with_wavenumber(m, k),
            nu,
            &LocalizationParams::with_l_max(n),
        )
        .unwrap();
        ModeBasis::from_spectrum(&s, nu).unwrap()
    }

    fn rc(rng: &mut ChaCha8Rng) -> C64 {
        C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    }

    #[test]
    fn adjoint_evolution_cases() {
        let b = basis(1, 1.0, 1.0, 3);
        let term = ModalState::new(
            b.mode,
            vec![C64::new(1.0, 0.5), C64::new(0.0, 1.0), C64::new(2.0, 0.0)],
            1.0,
        );
        let same = adjoint_evolve(&term, &b.lambdas, 1.0, 1.0).unwrap();
        assert_eq!(same.alphas, term.alphas);
        let zero = adjoint_evolve(&term, &b.lambdas, 1.0, 0.0).unwrap();
        assert!((zero.alphas[0] - term.alphas[0] * b.lambdas[0].exp()).norm() < 1e-15);
        let mid = adjoint_evolve(&term, &b.lambdas, 1.0, 0.6).unwrap();
        let two = adjoint_evolve(
            &ModalState {
                t: 0.6,
                ..mid.clone()
            },
            &b.lambdas,
            0.6,
            0.2,
        )
        .unwrap();
        let direct = adjoint_evolve(&term, &b.lambdas, 1.0, 0.2).unwrap();
        for (x, y) in two.alphas.iter().zip(&direct.alphas) {
            assert!((x - y).norm() <= 1e-12 * y.norm().max(1e-300));
        }
        assert!(zero.norm() <= mid.norm() && mid.norm() <= term.norm());
        assert!(adjoint_evolve(&term, &b.lambdas, 1.0, 1.5).is_err());
    }

    #[test]
    fn pressure_trace_cases() {
        let b = basis(2, 2.0, 0.5, 2);
        let t = [0.0, 0.25, 0.5];
        let e1 = ModalState::new(b.mode, vec![C64::new(1.0, 0.0), C64::default()], 1.0);
        let q = adjoint_pressure_trace(&e1, &b, 1.0, &t);
        for (qi, ti) in q.iter().zip(t) {
            let k2 = 4.0;
            let expect = 0.5 / k2 * b.eigs[0].xi_ppp_1.norm() * (b.lambdas[0] * (1.0 - ti)).exp();
            assert!((qi.norm() - expect).abs() < 1e-12 * expect);
        }
        let z = ModalState::zeros(b.mode, 2, 1.0);
        assert!(adjoint_pressure_trace(&z, &b, 1.0, &t)
            .iter()
            .all(|v| v.norm() == 0.0));
        let a = [C64::new(0.3, -0.2), C64::new(-1.1, 0.4)];
        let two = ModalState::new(b.mode, a.to_vec(), 1.0);
        let q2 = adjoint_pressure_trace(&two, &b, 1.0, &[0.3]);
        let direct = a[0] * b.traces[0] * (b.lambdas[0] * 0.7).exp()
            + a[1] * b.traces[1] * (b.lambdas[1] * 0.7).exp();
        assert!((q2[0] - direct).norm() < 1e-14 * direct.norm());
    }

    #[test]
    fn forward_uncontrolled_and_constant_control() {
        let b = basis(1, 1.0, 1.0, 2);
        let grid = uniform_grid(0.0, 1.0, 101);
        let a0 = ModalState::new(b.mode, vec![C64::new(1.0, 0.0), C64::new(0.0, -2.0)], 0.0);
        let tr = forward_controlled(&a0, &b, &NoControl, &grid).unwrap();
        for l in 0..2 {
            let expect = a0.alphas[l] * b.lambdas[l].exp();
            assert!((tr.terminal()[l] - expect).norm() <= 1e-13 * expect.norm());
        }
        let psi = C64::new(0.7, 0.2);
        let sig = PiecewiseConstant::new(vec![0.0, 0.5, 1.0], vec![psi, psi]).unwrap();
        let tr = forward_controlled(&a0, &b, &sig, &grid).unwrap();
        let lam = b.lambdas[0];
        let expect = lam.exp() * a0.alphas[0] + b.inputs[0] * psi * (lam.exp() - 1.0) / lam;
        assert!((tr.terminal()[0] - expect).norm() <= 1e-12 * expect.norm());
    }

    #[test]
    fn step_too_large() {
        let b = basis(1, 1.0, 1.0, 3);
        let a0 = ModalState::zeros(b.mode, 3, 0.0);
        let err = forward_controlled(&a0, &b, &NoControl, &[0.0, 1.0]).unwrap_err();
        assert!(matches!(err, Error::StepTooLarge { .. }));
    }

    #[test]
    fn duality_holds_for_random_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (m, k) in [(1, 1.0), (-3, -3.0), (5, 5.0)] {
            let b = basis(m, k, 1.0, 6);
            for _ in 0..10 {
                let a0: Vec<C64> = (0..6).map(|_| rc(&mut rng)).collect();
                let alpha: Vec<C64> = (0..6).map(|_| rc(&mut rng)).collect();
                let times = uniform_grid(0.0, 1.0, 401);
                let values = (0..400).map(|_| rc(&mut rng)).collect();
                let psi = PiecewiseConstant::new(times, values).unwrap();
                let d = duality_check(&a0, &alpha, &psi, &b, 1.0).unwrap();
                assert!(d.relative_error <= 1e-8, "m={m} {d:?}");
            }
        }
    }

    /// Steady Stokes flow with `v(1) = 1` expanded in the eigenbasis has coefficients
    /// `-b_l / lambda_l`, the equilibrium of the modal system under a unit constant input.
    #[test]
    fn input_coefficients_match_steady_state() {
        for &k in &[1.0f64, 2.5] {
            let b = basis(1, k, 1.0, 5);
            let (sh, ch) = (k.sinh(), k.cosh());
            let m = Matrix4::new(
                1.0,
                0.0,
                0.0,
                0.0,
                0.0,
                k,
                1.0,
                0.0,
                0.0,
                k * ch,
                ch + k * sh,
                sh + k * ch,
                0.0,
                sh,
                ch,
                sh,
            );
            let coef = m.lu().solve(&Vector4::new(0.0, 0.0, 0.0, 1.0)).unwrap();
            let v = |y: f64| {
                coef[0] * (k * y).cosh()
                    + coef[1] * (k * y).sinh()
                    + coef[2] * y * (k * y).cosh()
                    + coef[3] * y * (k * y).sinh()
            };
            let dv = |y: f64| {
                coef[0] * k * (k * y).sinh()
                    + coef[1] * k * (k * y).cosh()
                    + coef[2] * ((k * y).cosh() + k * y * (k * y).sinh())
                    + coef[3] * ((k * y).sinh() + k * y * (k * y).cosh())
            };
            let n = 2049;
            let y = uniform_grid(0.0, 1.0, n);
            let w = simpson_weights(n, 1.0).unwrap();
            for (l, e) in b.eigs.iter().enumerate() {
                let mut s = C64::default();
                for i in 0..n {
                    let u = C64::new(0.0, 1.0 / k) * dv(y[i]);
                    s += w[i] * (u * e.phi(y[i], 0).conj() + v(y[i]) * e.xi(y[i], 0).conj());
                }
                let expect = -b.inputs[l] / b.lambdas[l];
                assert!(
                    (s - expect).norm() < 1e-8 * expect.norm(),
                    "k={k} l={l} {s} {expect}"
                );
            }
        }
    }

    #[test]
    fn conjugate_basis_is_consistent() {
        let b = basis(2, 2.0, 1.0, 4);
        let c = b.conjugate();
        let direct = basis(-2, -2.0, 1.0, 4);
        for l in 0..4 {
            assert!((c.traces[l] - direct.traces[l]).norm() < 1e-10 * direct.traces[l].norm());
            assert_eq!(c.lambdas[l], direct.lambdas[l]);
        }
    }

    #[test]
    fn sine_invariants() {
        assert_eq!(sine_mode_invariant(1, 2.0, 1.0, 0.0).unwrap(), 2.0);
        let v = sine_mode_invariant(1, 1.0, 1.0, 1.0).unwrap();
        assert!((v - (-PI * PI).exp()).abs() < 1e-18);
        assert!(sine_mode_invariant(0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn truncation_validation() {
        assert!(TruncationConfig::default().validate().is_ok());
        let bad = TruncationConfig {
            l_max: 1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn piecewise_constant_lookup() {
        let s = PiecewiseConstant::new(
            vec![0.0, 1.0, 2.0],
            vec![C64::new(1.0, 0.0), C64::new(2.0, 0.0)],
        )
        .unwrap();
        assert_eq!(s.value(0.5).re, 1.0);
        assert_eq!(s.value(1.5).re, 2.0);
        assert_eq!(s.value(2.5).re, 0.0);
        assert!(PiecewiseConstant::new(vec![0.0, 1.0], vec![]).is_err());
    }
}
