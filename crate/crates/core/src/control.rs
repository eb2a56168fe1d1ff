//! Moment-method synthesis of the normal boundary control.
//!
//! Null control of mode `k` at time `T` requires, for every retained branch,
//!
//! ```text
//! int_0^{T0} psi_k(t) conj(w_l) e^{lambda_l (T0 - t)} dt = e^{lambda_l T0} a_l(0),
//! ```
//!
//! where `w_l = q_l(1)`. The control is sought as `psi_k(t) = sum_m c_m w_m e^{lambda_m (T0 - t)}`
//! on `(0, T0)` and zero afterwards, giving the Hermitian system `(W* G W) c = targets`.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::ModeIndex;
use crate::error::{Error, Result};
use crate::modal::{exprel, ControlInput, ModeBasis};

type C64 = Complex64;

pub const CONDITION_LIMIT: f64 = 1e14;
pub const FALLBACK_REGULARIZATION: f64 = 1e-12;
pub const CONJUGACY_TOLERANCE: f64 = 1e-10;

/// Required moments `e^{lambda_l t} a_l(0)`.
///
/// With `t = T` these are the moments against `e^{lambda_l (T - s)}`; with `t = T0` they are the
/// same conditions against `e^{lambda_l (T0 - s)}`, which avoids underflow for deep branches.
pub fn target_moments(a0: &[C64], lambdas: &[f64], t: f64) -> Vec<C64> {
    a0.iter()
        .zip(lambdas)
        .map(|(a, l)| a * (l * t).exp())
        .collect()
}

/// `G_lm = int_0^{T0} e^{(lambda_l + lambda_m) s} ds`.
pub fn gram_matrix(exponents: &[f64], horizon: f64) -> DMatrix<f64> {
    let n = exponents.len();
    DMatrix::from_fn(n, n, |i, j| {
        let s = exponents[i] + exponents[j];
        horizon * exprel(s * horizon)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentProblem {
    pub mode: ModeIndex,
    pub exponents: Vec<f64>,
    pub weights: Vec<C64>,
    pub targets: Vec<C64>,
    pub horizon: f64,
}

impl MomentProblem {
    /// Null-control moments for the first `branches` branches of a mode.
    pub fn null_control(
        basis: &ModeBasis,
        a0: &[C64],
        horizon: f64,
        branches: usize,
    ) -> Result<Self> {
        let n = branches.min(basis.len()).min(a0.len());
        let exponents = basis.lambdas[..n].to_vec();
        let problem = MomentProblem {
            mode: basis.mode,
            targets: target_moments(&a0[..n], &exponents, horizon),
            weights: basis.traces[..n].to_vec(),
            exponents,
            horizon,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.exponents.len();
        if n == 0 || self.weights.len() != n || self.targets.len() != n {
            return Err(Error::Domain("moment problem sizes disagree"));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::Domain("moment horizon must be positive"));
        }
        if self.exponents.iter().any(|&l| !(l < 0.0)) {
            return Err(Error::Domain("exponents must be negative"));
        }
        if self.exponents.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Domain("exponents must decrease strictly"));
        }
        if self.weights.iter().any(|w| w.norm() == 0.0) {
            return Err(Error::Domain("trace weights must be nonzero"));
        }
        Ok(())
    }

    /// `A_lm = conj(w_l) G_lm w_m`.
    pub fn moment_matrix(&self) -> DMatrix<C64> {
        let g = gram_matrix(&self.exponents, self.horizon);
        let n = self.exponents.len();
        DMatrix::from_fn(n, n, |i, j| {
            self.weights[i].conj() * g[(i, j)] * self.weights[j]
        })
    }
}

/// Synthesized signal of one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeControl {
    pub mode: ModeIndex,
    pub exponents: Vec<f64>,
    pub weights: Vec<C64>,
    pub coeffs: Vec<C64>,
    pub horizon: f64,
    /// `|A c - targets| / |targets|` for the unregularized matrix.
    pub residual: f64,
    pub condition_number: f64,
    pub regularization: f64,
    /// `int_0^{T0} |psi_k|^2 dt`.
    pub energy: f64,
}

impl ModeControl {
    pub fn zero(mode: ModeIndex, horizon: f64) -> Self {
        ModeControl {
            mode,
            exponents: Vec::new(),
            weights: Vec::new(),
            coeffs: Vec::new(),
            horizon,
            residual: 0.0,
            condition_number: 1.0,
            regularization: 0.0,
            energy: 0.0,
        }
    }

    /// Moments `int_0^{T0} psi conj(w_l) e^{lambda_l (T0 - t)} dt` realized by the signal.
    pub fn moments(&self) -> Vec<C64> {
        let n = self.exponents.len();
        let g = gram_matrix(&self.exponents, self.horizon);
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| self.weights[i].conj() * g[(i, j)] * self.weights[j] * self.coeffs[j])
                    .sum()
            })
            .collect()
    }
}

impl ControlInput for ModeControl {
    fn value(&self, t: f64) -> C64 {
        if !(0.0..self.horizon).contains(&t) {
            return C64::default();
        }
        self.coeffs
            .iter()
            .zip(&self.weights)
            .zip(&self.exponents)
            .map(|((c, w), l)| c * w * (l * (self.horizon - t)).exp())
            .sum()
    }

    fn kernel_integral(&self, lambda: f64, t0: f64, t1: f64) -> C64 {
        let a = t0.max(0.0);
        let b = t1.min(self.horizon);
        if b <= a {
            return C64::default();
        }
        let h = b - a;
        let outer = (lambda * (t1 - b)).exp();
        let inner: C64 = self
            .coeffs
            .iter()
            .zip(&self.weights)
            .zip(&self.exponents)
            .map(|((c, w), mu)| {
                c * w * ((mu * (self.horizon - b)).exp() * h * exprel((lambda + mu) * h))
            })
            .sum();
        inner * outer
    }
}

fn hermitian_condition(a: &DMatrix<C64>) -> f64 {
    let eig = SymmetricEigen::new(a.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solves `(A + eps I) c = targets` for the moment matrix `A` of the problem.
pub fn solve_biorthogonal(problem: &MomentProblem, regularization: f64) -> Result<ModeControl> {
    problem.validate()?;
    if !(regularization >= 0.0) {
        return Err(Error::InvalidConfig(
            "regularization must be nonnegative".into(),
        ));
    }
    let n = problem.exponents.len();
    let a = problem.moment_matrix();
    let d: Vec<f64> = (0..n).map(|i| 1.0 / a[(i, i)].re.sqrt()).collect();
    let scaled = |m: &DMatrix<C64>| DMatrix::from_fn(n, n, |i, j| m[(i, j)] * (d[i] * d[j]));
    let condition = hermitian_condition(&scaled(&a));
    if regularization == 0.0 && !(condition <= CONDITION_LIMIT) {
        return Err(Error::IllConditioned {
            m: problem.mode.m,
            condition,
        });
    }
    let mut reg = a.clone();
    for i in 0..n {
        reg[(i, i)] += C64::new(regularization, 0.0);
    }
    let chol = scaled(&reg).cholesky().ok_or_else(|| {
        Error::NumericalBreakdown(format!(
            "moment matrix of mode m={} is not positive definite",
            problem.mode.m
        ))
    })?;
    let rhs = DVector::from_fn(n, |i, _| problem.targets[i] * d[i]);
    let y = chol.solve(&rhs);
    let c = DVector::from_fn(n, |i, _| y[i] * d[i]);
    let tnorm = problem
        .targets
        .iter()
        .map(|t| t.norm_sqr())
        .sum::<f64>()
        .sqrt();
    let ac = &a * &c;
    let rnorm = (0..n)
        .map(|i| (ac[i] - problem.targets[i]).norm_sqr())
        .sum::<f64>()
        .sqrt();
    let energy = c.dotc(&ac).re;
    Ok(ModeControl {
        mode: problem.mode,
        exponents: problem.exponents.clone(),
        weights: problem.weights.clone(),
        coeffs: c.iter().copied().collect(),
        horizon: problem.horizon,
        residual: if tnorm > 0.0 { rnorm / tnorm } else { rnorm },
        condition_number: condition,
        regularization,
        energy,
    })
}

/// Null control for one mode; zero data gives the zero signal. With `auto_regularize` an
/// ill-conditioned solve is retried with `eps = 1e-12 trace(A) / L`.
pub fn synthesize_mode(
    basis: &ModeBasis,
    a0: &[C64],
    horizon: f64,
    branches: usize,
    regularization: f64,
    auto_regularize: bool,
) -> Result<ModeControl> {
    let problem = MomentProblem::null_control(basis, a0, horizon, branches)?;
    if problem.targets.iter().all(|t| t.norm() == 0.0) {
        let mut z = ModeControl::zero(basis.mode, horizon);
        z.exponents = problem.exponents.clone();
        z.weights = problem.weights.clone();
        z.coeffs = vec![C64::default(); problem.exponents.len()];
        return Ok(z);
    }
    match solve_biorthogonal(&problem, regularization) {
        Err(Error::IllConditioned { .. }) if auto_regularize && regularization == 0.0 => {
            let a = problem.moment_matrix();
            let n = problem.exponents.len();
            let trace: f64 = (0..n).map(|i| a[(i, i)].re).sum();
            solve_biorthogonal(&problem, FALLBACK_REGULARIZATION * trace / n as f64)
        }
        other => other,
    }
}

/// Real boundary control `psi(x, t) = sum_m psi_m(t) e^{i k_m x}` sampled on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlField {
    pub x: Vec<f64>,
    pub t: Vec<f64>,
    /// `values[i][j] = psi(x[j], t[i])`.
    pub values: Vec<Vec<f64>>,
    /// Largest `|int_0^L psi(x, t) dx|` over the time samples.
    pub max_mean: f64,
    /// Largest imaginary part discarded when forming the real field.
    pub max_imaginary: f64,
    /// Largest `|psi|` at sample times `t >= T0`.
    pub max_after_horizon: f64,
}

fn check_pairing(controls: &[ModeControl], t_probe: &[f64]) -> Result<()> {
    for c in controls {
        if c.mode.m == 0 {
            return Err(Error::ConstraintViolation(
                "control has a k = 0 component, violating the zero-mean constraint".into(),
            ));
        }
        let partner = controls.iter().find(|p| p.mode.m == -c.mode.m);
        let scale = t_probe
            .iter()
            .map(|&t| c.value(t).norm())
            .fold(0.0, f64::max);
        let mismatch = match partner {
            Some(p) => t_probe
                .iter()
                .map(|&t| (c.value(t) - p.value(t).conj()).norm())
                .fold(0.0, f64::max),
            None => scale,
        };
        if mismatch > CONJUGACY_TOLERANCE * scale.max(f64::MIN_POSITIVE) && mismatch > 0.0 {
            return Err(Error::ConjugacyViolation {
                m: c.mode.m,
                pair: -c.mode.m,
                mismatch: mismatch / scale.max(f64::MIN_POSITIVE),
            });
        }
    }
    Ok(())
}

pub fn assemble_field(
    controls: &[ModeControl],
    length: f64,
    x_grid: &[f64],
    t_grid: &[f64],
) -> Result<ControlField> {
    check_pairing(controls, t_grid)?;
    let horizon = controls.first().map(|c| c.horizon).unwrap_or(0.0);
    let nx = x_grid.len();
    let mut values = Vec::with_capacity(t_grid.len());
    let mut max_mean: f64 = 0.0;
    let mut max_im: f64 = 0.0;
    let mut max_after: f64 = 0.0;
    for &t in t_grid {
        let modal: Vec<(f64, C64)> = controls.iter().map(|c| (c.mode.k, c.value(t))).collect();
        let row: Vec<f64> = x_grid
            .iter()
            .map(|&x| {
                let v: C64 = modal
                    .iter()
                    .map(|(k, p)| p * C64::from_polar(1.0, k * x))
                    .sum();
                max_im = max_im.max(v.im.abs());
                v.re
            })
            .collect();
        if nx > 0 {
            // Rectangle rule on the periodic grid is exact for the retained harmonics.
            let mean = row.iter().sum::<f64>() * length / nx as f64;
            max_mean = max_mean.max(mean.abs());
        }
        if t >= horizon {
            max_after = row.iter().fold(max_after, |m, v| m.max(v.abs()));
        }
        values.push(row);
    }
    Ok(ControlField {
        x: x_grid.to_vec(),
        t: t_grid.to_vec(),
        values,
        max_mean,
        max_imaginary: max_im,
        max_after_horizon: max_after,
    })
}

/// Periodic grid `x_j = j L / n`.
pub fn periodic_grid(length: f64, n: usize) -> Vec<f64> {
    (0..n).map(|j| j as f64 * length / n as f64).collect()
}

/// Total energy `int_0^T int_0^L |psi|^2 dx dt = L sum_m int |psi_m|^2 dt`.
pub fn field_energy(controls: &[ModeControl], length: f64) -> f64 {
    length * controls.iter().map(|c| c.energy).sum::<f64>()
}

#[derive(Serialize)]
struct FieldRow {
    t: f64,
    x: f64,
    psi: f64,
}

pub fn write_control_csv<W: Write>(field: &ControlField, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (i, &t) in field.t.iter().enumerate() {
        for (j, &x) in field.x.iter().enumerate() {
            w.serialize(FieldRow {
                t,
                x,
                psi: field.values[i][j],
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub m: i64,
    pub l: usize,
    pub re_c: f64,
    pub im_c: f64,
    pub residual: f64,
    pub condition_number: f64,
}

pub fn coefficient_rows(controls: &[ModeControl]) -> Vec<CoefficientRow> {
    let mut rows = Vec::new();
    for c in controls {
        for (l, v) in c.coeffs.iter().enumerate() {
            rows.push(CoefficientRow {
                m: c.mode.m,
                l: l + 1,
                re_c: v.re,
                im_c: v.im,
                residual: c.residual,
                condition_number: c.condition_number,
            });
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modal::{build_bases, forward_controlled, ModalState};
    use crate::quadrature::{simpson, uniform_grid};
    use crate::spectral::{compute_mode_spectrum, LocalizationParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn basis(m: i64, k: f64, n: usize) -> ModeBasis {
        let s = compute_mode_spectrum(
            ModeIndex::with_wavenumber(m, k),
            1.0,
            &LocalizationParams::with_l_max(n),
        )
        .unwrap();
        ModeBasis::from_spectrum(&s, 1.0).unwrap()
    }

    #[test]
    fn target_moment_cases() {
        let l = [-10.0, -40.0];
        assert!(target_moments(&[C64::default(); 2], &l, 1.0)
            .iter()
            .all(|v| v.norm() == 0.0));
        let t = target_moments(&[C64::new(2.0, 0.0), C64::default()], &l, 1.0);
        assert!((t[0].re - 2.0 * (-10f64).exp()).abs() < 1e-18);
        assert_eq!(t[1], C64::default());
    }

    #[test]
    fn gram_closed_form() {
        let g = gram_matrix(&[-3.0], 0.5);
        assert!((g[(0, 0)] - ((-3.0f64).exp() - 1.0) / -6.0).abs() < 1e-15);
        let lim = gram_matrix(&[0.0], 0.5);
        assert!((lim[(0, 0)] - 0.5).abs() < 1e-15);
        let ex = [-2.0, -7.0];
        let g = gram_matrix(&ex, 0.5);
        let s = uniform_grid(0.0, 0.5, 2001);
        for i in 0..2 {
            for j in 0..2 {
                let v: Vec<f64> = s.iter().map(|t| ((ex[i] + ex[j]) * t).exp()).collect();
                let q = simpson(&v, 0.5).unwrap();
                assert!((q - g[(i, j)]).abs() < 1e-10);
            }
        }
        assert_eq!(g[(0, 1)], g[(1, 0)]);
    }

    #[test]
    fn scalar_solve() {
        let b = basis(1, 1.0, 1);
        let a0 = [C64::new(0.3, -0.4)];
        let p = MomentProblem::null_control(&b, &a0, 0.5, 1).unwrap();
        let c = solve_biorthogonal(&p, 0.0).unwrap();
        let g = gram_matrix(&p.exponents, 0.5)[(0, 0)];
        let expect = p.targets[0] / (p.weights[0].norm_sqr() * g);
        assert!((c.coeffs[0] - expect).norm() < 1e-14 * expect.norm());
    }

    #[test]
    fn two_by_two_matches_explicit_inverse() {
        let b = basis(2, 2.0, 2);
        let a0 = [C64::new(1.0, 0.0), C64::new(-0.5, 0.25)];
        let p = MomentProblem::null_control(&b, &a0, 0.5, 2).unwrap();
        let a = p.moment_matrix();
        let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
        let c0 = (a[(1, 1)] * p.targets[0] - a[(0, 1)] * p.targets[1]) / det;
        let c1 = (-a[(1, 0)] * p.targets[0] + a[(0, 0)] * p.targets[1]) / det;
        let s = solve_biorthogonal(&p, 0.0).unwrap();
        assert!((s.coeffs[0] - c0).norm() < 1e-10 * c0.norm());
        assert!((s.coeffs[1] - c1).norm() < 1e-10 * c1.norm());
    }

    #[test]
    fn regularization_sweep_is_monotone() {
        let b = basis(1, 1.0, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a0: Vec<C64> = (0..6)
            .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let p = MomentProblem::null_control(&b, &a0, 0.5, 6).unwrap();
        let a = p.moment_matrix();
        let trace: f64 = (0..6).map(|i| a[(i, i)].re).sum::<f64>() / 6.0;
        let mut prev = f64::INFINITY;
        for e in [1e-2, 1e-4, 1e-6, 1e-8, 1e-10, 1e-12] {
            let r = solve_biorthogonal(&p, e * trace).unwrap().residual;
            assert!(r < prev, "eps={e} {r} {prev}");
            prev = r;
        }
        let exact = solve_biorthogonal(&p, 0.0).unwrap();
        assert!(exact.residual <= 1e-8);
        assert!(exact.condition_number > 1.0 && exact.condition_number < 1e14);
    }

    #[test]
    fn ill_conditioning_is_reported() {
        let b = basis(1, 1.0, 20);
        let a0 = vec![C64::new(1.0, 0.0); 20];
        let p = MomentProblem::null_control(&b, &a0, 0.5, 20).unwrap();
        assert!(matches!(
            solve_biorthogonal(&p, 0.0),
            Err(Error::IllConditioned { .. })
        ));
        let c = synthesize_mode(&b, &a0, 0.5, 20, 0.0, true).unwrap();
        assert!(c.regularization > 0.0);
    }

    #[test]
    fn null_control_certificate() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (m, k) in [(1, 1.0), (3, 3.0)] {
            for n in [2usize, 4, 6, 8] {
                let b = basis(m, k, n);
                let a0: Vec<C64> = (0..n)
                    .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                    .collect();
                let ctl = synthesize_mode(&b, &a0, 0.5, n, 0.0, false).unwrap();
                assert!(ctl.residual <= 1e-8, "m={m} n={n} {}", ctl.residual);
                let grid = uniform_grid(0.0, 1.0, 2001);
                let init = ModalState::new(b.mode, a0.clone(), 0.0);
                let tr = forward_controlled(&init, &b, &ctl, &grid).unwrap();
                let free = forward_controlled(&init, &b, &crate::modal::NoControl, &grid).unwrap();
                let n0 = init.norm();
                assert!(tr.terminal_norm() <= 1e-6 * n0, "m={m} n={n}");
                assert!(tr.terminal_norm() <= free.terminal_norm(), "m={m} n={n}");
                assert_eq!(ctl.value(0.5), C64::default());
                assert_eq!(ctl.value(0.75), C64::default());
            }
        }
    }

    #[test]
    fn small_viscosity_null_control() {
        let s = compute_mode_spectrum(
            ModeIndex::with_wavenumber(1, 1.0),
            0.1,
            &LocalizationParams::with_l_max(3),
        )
        .unwrap();
        let b = ModeBasis::from_spectrum(&s, 0.1).unwrap();
        let a0 = vec![C64::new(1.0, 0.0), C64::new(0.0, 1.0), C64::new(0.5, 0.5)];
        let ctl = synthesize_mode(&b, &a0, 0.5, 3, 0.0, false).unwrap();
        let grid = uniform_grid(0.0, 1.0, 1001);
        let init = ModalState::new(b.mode, a0, 0.0);
        let tr = forward_controlled(&init, &b, &ctl, &grid).unwrap();
        let free = forward_controlled(&init, &b, &crate::modal::NoControl, &grid).unwrap();
        assert!(free.terminal_norm() > 1e-2);
        assert!(
            tr.terminal_norm() <= 1e-6 * init.norm(),
            "{}",
            tr.terminal_norm()
        );
    }

    #[test]
    fn moment_exactness_by_quadrature() {
        let b = basis(2, 2.0, 4);
        let a0 = vec![
            C64::new(0.2, 0.1),
            C64::new(-0.3, 0.0),
            C64::new(0.0, 0.4),
            C64::new(0.1, 0.1),
        ];
        let ctl = synthesize_mode(&b, &a0, 0.5, 4, 0.0, false).unwrap();
        let tgt = target_moments(&a0, &b.lambdas, 0.5);
        let t = uniform_grid(0.0, 0.5, 8001);
        for l in 0..4 {
            let re: Vec<f64> = t
                .iter()
                .map(|&s| {
                    (ctl.value(s.min(0.5 - 1e-15))
                        * b.traces[l].conj()
                        * (b.lambdas[l] * (0.5 - s)).exp())
                    .re
                })
                .collect();
            let im: Vec<f64> = t
                .iter()
                .map(|&s| {
                    (ctl.value(s.min(0.5 - 1e-15))
                        * b.traces[l].conj()
                        * (b.lambdas[l] * (0.5 - s)).exp())
                    .im
                })
                .collect();
            let q = C64::new(simpson(&re, 0.5).unwrap(), simpson(&im, 0.5).unwrap());
            let tn: f64 = tgt.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            assert!((q - tgt[l]).norm() <= 1e-6 * tn, "l={l}");
            assert!((ctl.moments()[l] - tgt[l]).norm() <= 1e-8 * tn);
        }
    }

    #[test]
    fn field_is_real_zero_mean_and_supported() {
        let ch = crate::channel::ChannelConfig::default();
        let sp =
            crate::spectral::compute_spectrum(&ch, 1, &LocalizationParams::with_l_max(3)).unwrap();
        let bases = build_bases(&sp, 1.0).unwrap();
        let a = vec![C64::new(0.4, 0.3), C64::new(-0.2, 0.0), C64::new(0.1, -0.1)];
        let a_neg: Vec<C64> = a.iter().map(|v| v.conj()).collect();
        let controls: Vec<ModeControl> = bases
            .iter()
            .map(|b| {
                let d = if b.mode.m > 0 { &a } else { &a_neg };
                synthesize_mode(b, d, 0.5, 3, 0.0, false).unwrap()
            })
            .collect();
        let x = periodic_grid(ch.length, 16);
        let t = uniform_grid(0.0, 1.0, 21);
        let f = assemble_field(&controls, ch.length, &x, &t).unwrap();
        assert!(
            f.max_imaginary
                <= 1e-10
                    * f.values
                        .iter()
                        .flatten()
                        .fold(0.0f64, |m, v| m.max(v.abs()))
        );
        assert!(f.max_mean <= 1e-12);
        assert_eq!(f.max_after_horizon, 0.0);
        let pos = controls.iter().find(|c| c.mode.m == 1).unwrap();
        let v = pos.value(0.1);
        let expect = 2.0 * (v * C64::from_polar(1.0, x[3])).re;
        assert!((f.values[2][3] - expect).abs() < 1e-12 * expect.abs().max(1e-300));

        let mut broken = controls.clone();
        let bump = broken[0].coeffs[0].norm() * 1e-3;
        broken[0].coeffs[0] += C64::new(bump, 0.0);
        assert!(matches!(
            assemble_field(&broken, ch.length, &x, &t),
            Err(Error::ConjugacyViolation { .. })
        ));
    }
}
