//! Per-mode observability constants of the adjoint trace `q_k(1, t)`.
//!
//! For terminal data `alpha` the adjoint trace is `q(1, t) = sum_l alpha_l w_l e^{lambda_l (T - t)}`
//! and the adjoint state at `t = 0` has coefficients `beta_l = alpha_l e^{lambda_l T}`. The
//! observability ratio is `int_0^{T0} |q(1, t)|^2 dt / |beta|^2`.
//!
//! In the variables `beta` the numerator is `beta* D C D beta` with `D_l = |w_l| e^{-lambda_l T0}`
//! and `C_lm = conj(u_l) u_m int_0^{T0} e^{(lambda_l + lambda_m) s} ds`, `u = w / |w|`. The scaling
//! `D` is carried as logarithms so deep branches neither overflow nor underflow.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::ModeIndex;
use crate::control::gram_matrix;
use crate::error::{Error, Result};
use crate::modal::{exprel, ModeBasis};
use crate::SCHEMA_VERSION;

type C64 = Complex64;

/// Branches with `2 lambda (T - T0)` below this are dropped.
pub const EXPONENT_FLOOR: f64 = -600.0;
pub const N_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationGram {
    pub mode: ModeIndex,
    pub exponents: Vec<f64>,
    pub traces: Vec<C64>,
    pub t_final: f64,
    pub horizon: f64,
    pub dropped: usize,
    /// `ln D_l`.
    pub log_scale: Vec<f64>,
    pub core: DMatrix<C64>,
}

pub fn observation_gram(
    mode: ModeIndex,
    exponents: &[f64],
    traces: &[C64],
    t_final: f64,
    horizon: f64,
) -> Result<ObservationGram> {
    if exponents.len() != traces.len() || exponents.is_empty() {
        return Err(Error::Domain("exponent and trace counts disagree"));
    }
    if !(horizon > 0.0 && horizon <= t_final) {
        return Err(Error::InvalidConfig(format!(
            "need 0 < T0 <= T, got T0={horizon}, T={t_final}"
        )));
    }
    let keep = exponents
        .iter()
        .take_while(|&&l| 2.0 * l * (t_final - horizon) >= EXPONENT_FLOOR)
        .count();
    if keep == 0 {
        return Err(Error::NumericalBreakdown(format!(
            "every branch of m={} lies below the exponent floor",
            mode.m
        )));
    }
    let ex = exponents[..keep].to_vec();
    let tr = traces[..keep].to_vec();
    if tr.iter().any(|w| w.norm() == 0.0) {
        return Err(Error::Domain("trace weights must be nonzero"));
    }
    let g = gram_matrix(&ex, horizon);
    let u: Vec<C64> = tr.iter().map(|w| w / w.norm()).collect();
    let core = DMatrix::from_fn(keep, keep, |i, j| u[i].conj() * g[(i, j)] * u[j]);
    let log_scale = ex
        .iter()
        .zip(&tr)
        .map(|(l, w)| w.norm().ln() - l * horizon)
        .collect();
    Ok(ObservationGram {
        mode,
        exponents: ex,
        traces: tr,
        t_final,
        horizon,
        dropped: exponents.len() - keep,
        log_scale,
        core,
    })
}

pub fn gram_for_basis(
    basis: &ModeBasis,
    branches: usize,
    t_final: f64,
    horizon: f64,
) -> Result<ObservationGram> {
    let n = branches.min(basis.len());
    observation_gram(
        basis.mode,
        &basis.lambdas[..n],
        &basis.traces[..n],
        t_final,
        horizon,
    )
}

impl ObservationGram {
    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    /// `int_0^{T0} |q(1, t)|^2 dt` for adjoint initial-state coefficients `beta`.
    pub fn observed_energy(&self, beta: &[C64]) -> f64 {
        let n = self.len();
        let v: Vec<C64> = (0..n).map(|i| beta[i] * self.log_scale[i].exp()).collect();
        let mut acc = C64::default();
        for i in 0..n {
            for j in 0..n {
                acc += v[i].conj() * self.core[(i, j)] * v[j];
            }
        }
        acc.re
    }

    /// Observability ratio at a given direction.
    pub fn rayleigh_ratio(&self, beta: &[C64]) -> f64 {
        let norm: f64 = beta.iter().map(|b| b.norm_sqr()).sum();
        self.observed_energy(beta) / norm
    }

    pub fn core_condition(&self) -> f64 {
        let n = self.len();
        let d: Vec<f64> = (0..n).map(|i| 1.0 / self.core[(i, i)].re.sqrt()).collect();
        let s = DMatrix::from_fn(n, n, |i, j| self.core[(i, j)] * (d[i] * d[j]));
        let e = SymmetricEigen::new(s).eigenvalues;
        if e.min() <= 0.0 {
            f64::INFINITY
        } else {
            e.max() / e.min()
        }
    }

    /// Smallest ratio and its minimizing initial-state direction (unit norm).
    pub fn smallest_ratio(&self) -> Result<(f64, Vec<C64>)> {
        let n = self.len();
        let d: Vec<f64> = (0..n).map(|i| 1.0 / self.core[(i, i)].re.sqrt()).collect();
        let scaled = DMatrix::from_fn(n, n, |i, j| self.core[(i, j)] * (d[i] * d[j]));
        let chol = scaled.cholesky().ok_or_else(|| {
            Error::NumericalBreakdown(format!(
                "observation Gram of m={} is not positive definite",
                self.mode.m
            ))
        })?;
        let sinv = chol.inverse();
        let log_min = self.log_scale.iter().copied().fold(f64::INFINITY, f64::min);
        // D~^{-1} C^{-1} D~^{-1} with D~ = D / d_min, so every entry of D~^{-1} is at most 1.
        let e: Vec<f64> = (0..n)
            .map(|i| (log_min - self.log_scale[i]).exp() * d[i])
            .collect();
        let mut m = DMatrix::from_fn(n, n, |i, j| sinv[(i, j)] * (e[i] * e[j]));
        m = (&m + m.adjoint()) * C64::new(0.5, 0.0);
        let eig = SymmetricEigen::new(m);
        let (imax, top) =
            eig.eigenvalues
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
                );
        if !(top > 0.0) || !top.is_finite() {
            return Err(Error::NumericalBreakdown(format!(
                "observation Gram inverse of m={} is degenerate",
                self.mode.m
            )));
        }
        let ratio = (2.0 * log_min).exp() / top;
        let v = eig.eigenvectors.column(imax);
        let norm = v.norm();
        Ok((ratio, v.iter().map(|z| z / norm).collect()))
    }

    /// The pair `(Q, N)` in terminal-data variables.
    pub fn literal_pair(&self) -> (DMatrix<C64>, DMatrix<C64>) {
        let n = self.len();
        let shift = self.t_final - self.horizon;
        let q = DMatrix::from_fn(n, n, |i, j| {
            let s = self.exponents[i] + self.exponents[j];
            self.traces[i].conj()
                * self.traces[j]
                * ((s * shift).exp() * self.horizon * exprel(s * self.horizon))
        });
        let nm = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                C64::new((2.0 * self.exponents[i] * self.t_final).exp(), 0.0)
            } else {
                C64::default()
            }
        });
        (q, nm)
    }
}

/// Smallest generalized eigenvalue of `(Q, N)` and its eigenvector.
pub fn smallest_observability_ratio(q: &DMatrix<C64>, n: &DMatrix<C64>) -> Result<(f64, Vec<C64>)> {
    let dim = q.nrows();
    if dim == 0 || q.ncols() != dim || n.shape() != (dim, dim) {
        return Err(Error::Domain(
            "observation matrices must be square and equal in size",
        ));
    }
    let ne = SymmetricEigen::new(n.clone()).eigenvalues;
    if ne.min() < N_FLOOR {
        return Err(Error::NumericalBreakdown(format!(
            "state-norm matrix has eigenvalue {:e} below {N_FLOOR:e}; drop deep branches",
            ne.min()
        )));
    }
    let chol = n.clone().cholesky().ok_or_else(|| {
        Error::NumericalBreakdown("state-norm matrix is not positive definite".into())
    })?;
    let linv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(dim, dim))
        .ok_or_else(|| Error::NumericalBreakdown("singular state-norm factor".into()))?;
    let mut m = &linv * q * linv.adjoint();
    m = (&m + m.adjoint()) * C64::new(0.5, 0.0);
    let scale = m.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::NumericalBreakdown(
            "observation matrix is degenerate".into(),
        ));
    }
    let eig = SymmetricEigen::new(m / C64::new(scale, 0.0));
    let (imin, low) =
        eig.eigenvalues
            .iter()
            .enumerate()
            .fold(
                (0, f64::INFINITY),
                |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc },
            );
    let low = low * scale;
    let y: DVector<C64> = eig.eigenvectors.column(imin).into_owned();
    let x = linv.adjoint() * y;
    let norm = x.norm();
    Ok((low, x.iter().map(|z| z / norm).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservabilityReport {
    pub m: i64,
    pub k: f64,
    pub branches: usize,
    pub effective_branches: usize,
    pub dropped: usize,
    pub smallest_ratio: f64,
    pub core_condition: f64,
    /// Minimizing adjoint initial-state coefficients, unit norm.
    pub direction: Vec<C64>,
}

pub fn mode_report(
    basis: &ModeBasis,
    branches: usize,
    t_final: f64,
    horizon: f64,
) -> Result<ObservabilityReport> {
    let g = gram_for_basis(basis, branches, t_final, horizon)?;
    let (ratio, direction) = g.smallest_ratio()?;
    Ok(ObservabilityReport {
        m: basis.mode.m,
        k: basis.mode.k,
        branches: branches.min(basis.len()),
        effective_branches: g.len(),
        dropped: g.dropped,
        smallest_ratio: ratio,
        core_condition: g.core_condition(),
        direction,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformityReport {
    pub schema_version: u32,
    pub t_final: f64,
    pub horizon: f64,
    pub branches: usize,
    pub modes: Vec<ObservabilityReport>,
    pub min_ratio: f64,
    pub min_mode: i64,
    pub all_positive: bool,
    /// Largest relative difference between the ratios of `m` and `-m`.
    pub conjugate_asymmetry: f64,
    /// Relative change of the running minimum over the last two `|m|` values.
    pub tail_variation: f64,
    pub saturates: bool,
}

pub fn uniformity_scan(
    bases: &[ModeBasis],
    branches: usize,
    t_final: f64,
    horizon: f64,
) -> Result<UniformityReport> {
    let modes: Vec<ObservabilityReport> = bases
        .par_iter()
        .map(|b| {
            mode_report(b, branches, t_final, horizon)
                .map_err(|e| e.context(format!("observability of m={}", b.mode.m)))
        })
        .collect::<Result<_>>()?;
    let (min_mode, min_ratio) =
        modes
            .iter()
            .map(|r| (r.m, r.smallest_ratio))
            .fold(
                (0, f64::INFINITY),
                |acc, x| if x.1 < acc.1 { x } else { acc },
            );
    let mut asym: f64 = 0.0;
    for r in &modes {
        if let Some(p) = modes.iter().find(|p| p.m == -r.m) {
            asym = asym.max(
                (r.smallest_ratio - p.smallest_ratio).abs()
                    / r.smallest_ratio.abs().max(f64::MIN_POSITIVE),
            );
        }
    }
    let mut abs_m: Vec<i64> = modes.iter().map(|r| r.m.abs()).collect();
    abs_m.sort_unstable();
    abs_m.dedup();
    let running = |upto: i64| {
        modes
            .iter()
            .filter(|r| r.m.abs() <= upto)
            .map(|r| r.smallest_ratio)
            .fold(f64::INFINITY, f64::min)
    };
    let tail_variation = if abs_m.len() >= 2 {
        let a = running(abs_m[abs_m.len() - 2]);
        let b = running(abs_m[abs_m.len() - 1]);
        (a - b).abs() / a
    } else {
        0.0
    };
    Ok(UniformityReport {
        schema_version: SCHEMA_VERSION,
        t_final,
        horizon,
        branches,
        all_positive: modes.iter().all(|r| r.smallest_ratio > 0.0),
        modes,
        min_ratio,
        min_mode,
        conjugate_asymmetry: asym,
        tail_variation,
        saturates: tail_variation < 0.1,
    })
}

#[derive(Serialize)]
struct Row {
    m: i64,
    l_effective: usize,
    dropped: usize,
    smallest_ratio: f64,
    core_condition: f64,
}

pub fn write_observability_csv<W: Write>(report: &UniformityReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in &report.modes {
        w.serialize(Row {
            m: r.m,
            l_effective: r.effective_branches,
            dropped: r.dropped,
            smallest_ratio: r.smallest_ratio,
            core_condition: r.core_condition,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
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

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<C64> {
        (0..n)
            .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn single_branch_closed_form() {
        let b = basis(1, 1.0, 1);
        let g = gram_for_basis(&b, 1, 1.0, 0.5).unwrap();
        let (r, _) = g.smallest_ratio().unwrap();
        let l = b.lambdas[0];
        let expect = b.traces[0].norm_sqr() * (-2.0 * l * 0.5).exp_m1() / (-2.0 * l);
        assert!(((r - expect) / expect).abs() < 1e-12);
        let (q, n) = g.literal_pair();
        let (lit, _) = smallest_observability_ratio(&q, &n).unwrap();
        assert!(((lit - expect) / expect).abs() < 1e-10);
    }

    #[test]
    fn literal_gram_matches_quadrature() {
        let b = basis(2, 2.0, 3);
        let g = gram_for_basis(&b, 3, 1.0, 0.5).unwrap();
        let (q, _) = g.literal_pair();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = uniform_grid(0.0, 0.5, 20001);
        for _ in 0..5 {
            let a = random(&mut rng, 3);
            let vals: Vec<f64> = t
                .iter()
                .map(|&s| {
                    (0..3)
                        .map(|l| a[l] * b.traces[l] * (b.lambdas[l] * (1.0 - s)).exp())
                        .sum::<C64>()
                        .norm_sqr()
                })
                .collect();
            let quad = simpson(&vals, 0.5).unwrap();
            let qa = DVector::from_column_slice(&a);
            let form = qa.dotc(&(&q * &qa)).re;
            assert!(((quad - form) / form).abs() < 1e-9, "{quad} {form}");
            let beta: Vec<C64> = (0..3).map(|l| a[l] * (b.lambdas[l]).exp()).collect();
            assert!(((g.observed_energy(&beta) - form) / form).abs() < 1e-10);
        }
    }

    #[test]
    fn log_and_literal_paths_agree() {
        let b = basis(1, 1.0, 3);
        let g = gram_for_basis(&b, 3, 0.1, 0.05).unwrap();
        let (r, _) = g.smallest_ratio().unwrap();
        let (q, n) = g.literal_pair();
        let (lit, _) = smallest_observability_ratio(&q, &n).unwrap();
        assert!(((r - lit) / r).abs() < 1e-6, "{r} {lit}");
    }

    #[test]
    fn underflowing_norm_is_a_breakdown() {
        let b = basis(1, 1.0, 8);
        let g = gram_for_basis(&b, 8, 1.0, 0.5).unwrap();
        let (q, n) = g.literal_pair();
        assert!(matches!(
            smallest_observability_ratio(&q, &n),
            Err(Error::NumericalBreakdown(_))
        ));
        assert!(g.smallest_ratio().unwrap().0 > 0.0);
    }

    #[test]
    fn homogeneity_and_minimality() {
        let b = basis(3, 3.0, 6);
        let g = gram_for_basis(&b, 6, 1.0, 0.5).unwrap();
        let (r, dir) = g.smallest_ratio().unwrap();
        let at_dir = g.rayleigh_ratio(&dir);
        assert!(((at_dir - r) / r).abs() < 1e-6, "{at_dir} {r}");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let v = random(&mut rng, 6);
            let rv = g.rayleigh_ratio(&v);
            assert!(r <= rv * (1.0 + 1e-12));
            let c = C64::new(3.7, -1.2);
            let scaled: Vec<C64> = v.iter().map(|z| z * c).collect();
            assert!(((g.rayleigh_ratio(&scaled) - rv) / rv).abs() < 1e-12);
        }
    }

    #[test]
    fn deep_branches_are_dropped() {
        let b = basis(1, 1.0, 10);
        let g = gram_for_basis(&b, 10, 1.0, 0.5).unwrap();
        assert!(g.dropped > 0);
        assert!(g.exponents.iter().all(|l| 2.0 * l * 0.5 >= EXPONENT_FLOOR));
    }

    #[test]
    fn scan_is_positive_and_symmetric() {
        let ch = crate::channel::ChannelConfig::default();
        let sp =
            crate::spectral::compute_spectrum(&ch, 3, &LocalizationParams::with_l_max(6)).unwrap();
        let bases = crate::modal::build_bases(&sp, 1.0).unwrap();
        let rep = uniformity_scan(&bases, 6, 1.0, 0.5).unwrap();
        assert!(rep.all_positive);
        assert!(rep.conjugate_asymmetry <= 1e-12);
        assert_eq!(rep.modes.len(), 6);
        let mut buf = Vec::new();
        write_observability_csv(&rep, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 7);
    }
}
