//! Characteristic equation of the channel Stokes operator, root localization and refinement.
//!
//! For a Fourier mode `k != 0` the eigenvalues are `lambda = -nu (k^2 + mu^2)` where `mu > 0`
//! solves
//!
//! ```text
//! F(mu, k) = sin(mu) sinh(k) mu^2 - 2 k mu (1 - cosh(k) cos(mu)) - k^2 sin(mu) sinh(k) = 0.
//! ```
//!
//! Root finding works on the rearranged form `f = -F / (2 k mu cosh k)`, which is bounded for
//! every `k` and even in `k`.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::Matrix4;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelConfig, ModeIndex};
use crate::error::{Error, Result};

pub const ROOT_TOLERANCE: f64 = 1e-10;
pub const BRACKET_WIDTH: f64 = 1e-12;
pub const DUPLICATE_SEPARATION: f64 = 1e-8;
pub const FALLBACK_K0: f64 = 20.0;

/// `F(mu, k)` in raw form. Overflows for `|k|` beyond roughly 700.
pub fn char_eq(mu: f64, k: f64) -> f64 {
    let (s, c) = mu.sin_cos();
    s * k.sinh() * mu * mu - 2.0 * k * mu * (1.0 - k.cosh() * c) - k * k * s * k.sinh()
}

/// `F(mu, k) / cosh(k)`, finite for every `k`.
pub fn char_eq_scaled(mu: f64, k: f64) -> f64 {
    let (s, c) = mu.sin_cos();
    let t = k.tanh();
    let sech = 1.0 / k.cosh();
    s * t * mu * mu - 2.0 * k * mu * (sech - c) - k * k * s * t
}

/// Rearranged characteristic function `sech k - cos mu - tanh k sin mu (mu^2 - k^2) / (2 k mu)`.
pub fn rearranged_f(mu: f64, k: f64) -> Result<f64> {
    if mu == 0.0 {
        return Err(Error::Domain(
            "rearranged characteristic function is singular at mu = 0",
        ));
    }
    if k == 0.0 {
        return Err(Error::Domain(
            "rearranged characteristic function needs k != 0",
        ));
    }
    Ok(f_unchecked(mu, k))
}

#[inline]
fn f_unchecked(mu: f64, k: f64) -> f64 {
    let a = k.abs();
    let (s, c) = mu.sin_cos();
    let g = mu / (2.0 * a) - a / (2.0 * mu);
    1.0 / a.cosh() - c - a.tanh() * s * g
}

/// `d f / d mu`.
pub fn rearranged_f_derivative(mu: f64, k: f64) -> f64 {
    let a = k.abs();
    let (s, c) = mu.sin_cos();
    let g = mu / (2.0 * a) - a / (2.0 * mu);
    let dg = 1.0 / (2.0 * a) + a / (2.0 * mu * mu);
    s - a.tanh() * (c * g + s * dg)
}

/// Parameters of the localization scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizationParams {
    /// Above this `|k|` the windows `(l pi, (l+1) pi)` are used directly.
    pub k0: f64,
    /// Left end of the small-`|k|` scan.
    pub delta: f64,
    pub epsilon0: f64,
    pub scan_resolution: f64,
    pub l_max: usize,
}

impl Default for LocalizationParams {
    fn default() -> Self {
        LocalizationParams {
            k0: FALLBACK_K0,
            delta: 1e-6,
            epsilon0: PI / 4.0,
            scan_resolution: PI / 64.0,
            l_max: 30,
        }
    }
}

impl LocalizationParams {
    pub fn with_l_max(l_max: usize) -> Self {
        LocalizationParams {
            l_max,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon0 > 0.0 && self.epsilon0 < PI / 2.0) {
            return Err(Error::InvalidConfig(format!(
                "epsilon0 must lie in (0, pi/2), got {}",
                self.epsilon0
            )));
        }
        if !(self.delta > 0.0 && self.delta < PI) {
            return Err(Error::InvalidConfig(format!(
                "delta must lie in (0, pi), got {}",
                self.delta
            )));
        }
        if !(self.scan_resolution > 0.0 && self.scan_resolution < PI / 8.0) {
            return Err(Error::InvalidConfig(format!(
                "scan resolution must lie in (0, pi/8), got {}",
                self.scan_resolution
            )));
        }
        if !(self.k0 > 0.0 && self.k0.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "k0 must be positive, got {}",
                self.k0
            )));
        }
        if self.l_max == 0 {
            return Err(Error::InvalidConfig("l_max must be at least 1".into()));
        }
        Ok(())
    }
}

/// Brackets for one mode together with the detected counting indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BracketReport {
    pub mode: ModeIndex,
    pub brackets: Vec<(f64, f64)>,
    /// True when the large-`|k|` window certification was used.
    pub large_k: bool,
    /// First index from which every window `(n pi - pi/4, n pi + pi/4)` holds exactly one root.
    pub l_k: usize,
    /// Number of roots below `l_k pi - pi/4`.
    pub n_k: usize,
}

fn count_sign_changes(k: f64, lo: f64, hi: f64, resolution: f64) -> (usize, Vec<(f64, f64)>) {
    let n = ((hi - lo) / resolution).ceil().max(1.0) as usize;
    let h = (hi - lo) / n as f64;
    let mut out = Vec::new();
    let mut x0 = lo;
    let mut f0 = f_unchecked(x0, k);
    for i in 1..=n {
        let x1 = if i == n { hi } else { lo + h * i as f64 };
        let f1 = f_unchecked(x1, k);
        if (f0 > 0.0) != (f1 > 0.0) {
            out.push((x0, x1));
        }
        x0 = x1;
        f0 = f1;
    }
    (out.len(), out)
}

/// Certifies exactly one sign change in each `(l pi, (l+1) pi)` and none in `(delta, pi)`.
fn certify_windows(mode: ModeIndex, params: &LocalizationParams) -> Result<Vec<(f64, f64)>> {
    let k = mode.k;
    let (first, _) = count_sign_changes(k, params.delta, PI, params.scan_resolution);
    if first != 0 {
        return Err(Error::BracketingFailure {
            m: mode.m,
            lo: 0.0,
            hi: PI,
            sign_changes: first,
        });
    }
    let mut brackets = Vec::with_capacity(params.l_max);
    for l in 1..=params.l_max {
        let lo = l as f64 * PI;
        let hi = (l + 1) as f64 * PI;
        let (count, _) = count_sign_changes(k, lo, hi, params.scan_resolution);
        if count != 1 {
            return Err(Error::BracketingFailure {
                m: mode.m,
                lo,
                hi,
                sign_changes: count,
            });
        }
        brackets.push((lo, hi));
    }
    Ok(brackets)
}

/// Smallest `|k|` among the candidates from which on every window certifies, if any.
pub fn detect_k0(wavenumbers: &[f64], params: &LocalizationParams) -> Option<f64> {
    let mut ks: Vec<f64> = wavenumbers
        .iter()
        .map(|k| k.abs())
        .filter(|&k| k > 0.0)
        .collect();
    ks.sort_by(|a, b| a.total_cmp(b));
    ks.dedup();
    let ok: Vec<bool> = ks
        .par_iter()
        .map(|&k| certify_windows(ModeIndex::with_wavenumber(1, k), params).is_ok())
        .collect();
    let mut k0 = None;
    for (k, pass) in ks.iter().zip(&ok).rev() {
        if *pass {
            k0 = Some(*k);
        } else {
            break;
        }
    }
    k0
}

/// Root brackets for one mode.
pub fn bracket_roots(mode: ModeIndex, params: &LocalizationParams) -> Result<BracketReport> {
    params.validate()?;
    if mode.k == 0.0 {
        return Err(Error::Domain("bracketing needs k != 0"));
    }
    if mode.k.abs() >= params.k0 {
        let brackets = certify_windows(mode, params)?;
        let l_k = window_index(&brackets);
        return Ok(BracketReport {
            mode,
            n_k: 0,
            l_k,
            brackets,
            large_k: true,
        });
    }
    let hi = (params.l_max + 1) as f64 * PI;
    let (_, mut brackets) = count_sign_changes(mode.k, params.delta, hi, params.scan_resolution);
    if brackets.len() < params.l_max {
        return Err(Error::BracketingFailure {
            m: mode.m,
            lo: params.delta,
            hi,
            sign_changes: brackets.len(),
        });
    }
    brackets.truncate(params.l_max);
    let l_k = window_index(&brackets);
    let n_k = brackets
        .iter()
        .filter(|(a, b)| 0.5 * (a + b) < l_k as f64 * PI - PI / 4.0)
        .count();
    Ok(BracketReport {
        mode,
        brackets,
        large_k: false,
        l_k,
        n_k,
    })
}

/// First `n` such that every quarter window `(j pi - pi/4, j pi + pi/4)`, `j >= n`, that lies below
/// the last bracket holds exactly one bracket midpoint.
fn window_index(brackets: &[(f64, f64)]) -> usize {
    let mids: Vec<f64> = brackets.iter().map(|(a, b)| 0.5 * (a + b)).collect();
    let top = match mids.last() {
        Some(&m) => (m / PI).round() as usize,
        None => return 1,
    };
    let mut l_k = top + 1;
    for n in (1..=top).rev() {
        let c = n as f64 * PI;
        let count = mids
            .iter()
            .filter(|&&x| x > c - PI / 4.0 && x < c + PI / 4.0)
            .count();
        if count == 1 {
            l_k = n;
        } else {
            break;
        }
    }
    l_k
}

/// One eigenvalue branch of a Fourier mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralRoot {
    pub mode: ModeIndex,
    pub l: usize,
    pub mu_tilde: f64,
    pub lambda: f64,
    /// Value of the rearranged characteristic function at the root.
    pub char_residual: f64,
    pub det_residual: f64,
    /// Search bracket handed to the refinement.
    pub bracket: (f64, f64),
    /// Final sign-change interval around the root.
    pub refined: (f64, f64),
    /// `df/dmu` at the root.
    pub slope: f64,
    pub iterations: usize,
}

/// Safeguarded Newton-bisection on the rearranged characteristic function.
pub fn refine_root(
    bracket: (f64, f64),
    mode: ModeIndex,
    l: usize,
    nu: f64,
    tol: f64,
) -> Result<SpectralRoot> {
    let k = mode.k;
    let (mut a, mut b) = bracket;
    if !(a > 0.0 && b > a) {
        return Err(Error::Domain("bracket must satisfy 0 < lo < hi"));
    }
    let fa = f_unchecked(a, k);
    let fb = f_unchecked(b, k);
    if (fa > 0.0) == (fb > 0.0) {
        return Err(Error::BracketingFailure {
            m: mode.m,
            lo: a,
            hi: b,
            sign_changes: 0,
        });
    }
    let neg_left = fa <= 0.0;
    let half = 0.25 * BRACKET_WIDTH;
    let mut x = 0.5 * (a + b);
    const MAX_ITER: usize = 200;
    for it in 1..=MAX_ITER {
        let fx = f_unchecked(x, k);
        if (fx <= 0.0) == neg_left {
            a = x;
        } else {
            b = x;
        }
        if fx.abs() <= tol {
            let lo = (x - half).max(a);
            let hi = (x + half).min(b);
            let flo = f_unchecked(lo, k);
            let fhi = f_unchecked(hi, k);
            if (flo > 0.0) != (fhi > 0.0) || fx == 0.0 {
                return Ok(finish(mode, l, nu, x, bracket, (lo, hi), it));
            }
        }
        if b - a <= BRACKET_WIDTH {
            let mid = 0.5 * (a + b);
            if f_unchecked(mid, k).abs() <= tol {
                return Ok(finish(mode, l, nu, mid, bracket, (a, b), it));
            }
        }
        let d = rearranged_f_derivative(x, k);
        let step = if d != 0.0 { x - fx / d } else { f64::NAN };
        x = if step.is_finite() && step > a && step < b {
            step
        } else {
            0.5 * (a + b)
        };
    }
    Err(Error::NonConvergence {
        m: mode.m,
        lo: bracket.0,
        hi: bracket.1,
        iterations: MAX_ITER,
    })
}

fn finish(
    mode: ModeIndex,
    l: usize,
    nu: f64,
    mu: f64,
    bracket: (f64, f64),
    refined: (f64, f64),
    iterations: usize,
) -> SpectralRoot {
    SpectralRoot {
        mode,
        l,
        mu_tilde: mu,
        lambda: -nu * (mode.k * mode.k + mu * mu),
        char_residual: f_unchecked(mu, mode.k),
        det_residual: determinant_residual(mode, mu),
        bracket,
        refined,
        slope: rearranged_f_derivative(mu, mode.k),
        iterations,
    }
}

/// Modulus of the 4x4 boundary determinant at `mu = i mu_tilde`, divided by the largest
/// permutation product of its entries.
pub fn determinant_residual(mode: ModeIndex, mu_tilde: f64) -> f64 {
    let k = mode.k;
    let a = k.abs();
    let kc = Complex64::new(k, 0.0);
    let mu = Complex64::new(0.0, mu_tilde);
    let ep = Complex64::new((k - a).exp(), 0.0);
    let em = Complex64::new((-k - a).exp(), 0.0);
    let scale = (-a).exp();
    let eu = Complex64::from_polar(scale, mu_tilde);
    let eml = Complex64::from_polar(scale, -mu_tilde);
    let one = Complex64::new(1.0, 0.0);
    let m = Matrix4::new(
        one,
        one,
        one,
        one,
        kc,
        -kc,
        mu,
        -mu,
        ep,
        em,
        eu,
        eml,
        kc * ep,
        -kc * em,
        mu * eu,
        -mu * eml,
    );
    let det = m.determinant().norm();
    let mut best = 0.0f64;
    for p in PERMUTATIONS_4 {
        let prod: f64 = (0..4).map(|i| m[(i, p[i])].norm()).product();
        best = best.max(prod);
    }
    if best == 0.0 {
        det
    } else {
        det / best
    }
}

const PERMUTATIONS_4: [[usize; 4]; 24] = [
    [0, 1, 2, 3],
    [0, 1, 3, 2],
    [0, 2, 1, 3],
    [0, 2, 3, 1],
    [0, 3, 1, 2],
    [0, 3, 2, 1],
    [1, 0, 2, 3],
    [1, 0, 3, 2],
    [1, 2, 0, 3],
    [1, 2, 3, 0],
    [1, 3, 0, 2],
    [1, 3, 2, 0],
    [2, 0, 1, 3],
    [2, 0, 3, 1],
    [2, 1, 0, 3],
    [2, 1, 3, 0],
    [2, 3, 0, 1],
    [2, 3, 1, 0],
    [3, 0, 1, 2],
    [3, 0, 2, 1],
    [3, 1, 0, 2],
    [3, 1, 2, 0],
    [3, 2, 0, 1],
    [3, 2, 1, 0],
];

/// All certified roots of one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSpectrum {
    pub mode: ModeIndex,
    pub roots: Vec<SpectralRoot>,
    pub large_k: bool,
    /// First branch of the asymptotic regime: from here on every root is within `pi/4` of a
    /// multiple of `pi`.
    pub l_k: usize,
    /// Branches before `l_k`.
    pub n_k: usize,
    /// Smallest `|df/dmu|` over the roots.
    pub min_slope: f64,
}

impl ModeSpectrum {
    pub fn lambdas(&self) -> Vec<f64> {
        self.roots.iter().map(|r| r.lambda).collect()
    }
}

pub fn compute_mode_spectrum(
    mode: ModeIndex,
    nu: f64,
    params: &LocalizationParams,
) -> Result<ModeSpectrum> {
    let report = bracket_roots(mode, params)?;
    let mut roots = Vec::with_capacity(report.brackets.len());
    for (i, &br) in report.brackets.iter().enumerate() {
        roots.push(refine_root(br, mode, i + 1, nu, ROOT_TOLERANCE)?);
    }
    for (i, w) in roots.windows(2).enumerate() {
        let sep = w[1].mu_tilde - w[0].mu_tilde;
        if sep < DUPLICATE_SEPARATION {
            return Err(Error::DuplicateRoot {
                m: mode.m,
                l: i + 1,
                next: i + 2,
                separation: sep,
            });
        }
    }
    let min_slope = roots
        .iter()
        .map(|r| r.slope.abs())
        .fold(f64::INFINITY, f64::min);
    let l_k = asymptotic_branch(&roots);
    Ok(ModeSpectrum {
        mode,
        n_k: l_k - 1,
        roots,
        large_k: report.large_k,
        l_k,
        min_slope,
    })
}

/// First branch `l` from which every root lies within `pi/4` of a multiple of `pi`.
fn asymptotic_branch(roots: &[SpectralRoot]) -> usize {
    let mut l_k = roots.len() + 1;
    for r in roots.iter().rev() {
        let off = (r.mu_tilde - (r.mu_tilde / PI).round() * PI).abs();
        if off < PI / 4.0 {
            l_k = r.l;
        } else {
            break;
        }
    }
    l_k
}

/// Spectra of the modes `|m| <= m_max`, ordered by `m`.
pub fn compute_spectrum(
    channel: &ChannelConfig,
    m_max: usize,
    params: &LocalizationParams,
) -> Result<Vec<ModeSpectrum>> {
    channel.validate()?;
    params.validate()?;
    channel
        .modes(m_max)
        .into_par_iter()
        .map(|mode| {
            compute_mode_spectrum(mode, channel.nu, params)
                .map_err(|e| e.context(format!("spectrum of mode m={}", mode.m)))
        })
        .collect()
}

/// Localization parameters with `k0` detected over the given modes, falling back to 20.
pub fn params_for_sweep(modes: &[ModeIndex], l_max: usize) -> LocalizationParams {
    let mut params = LocalizationParams::with_l_max(l_max);
    let ks: Vec<f64> = modes.iter().map(|m| m.k).collect();
    if let Some(k0) = detect_k0(&ks, &params) {
        params.k0 = k0;
    }
    params
}

/// Gap, summability and growth checks over a collection of spectra.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub l0: usize,
    /// Smallest `lambda_l - lambda_{l+1}`.
    pub min_lambda_gap: f64,
    pub min_lambda_gap_at: (i64, usize),
    /// Smallest `mu_{l+1} - mu_l` over branches `l >= l_k`.
    pub min_mu_gap: f64,
    pub mu_gap_threshold: f64,
    pub mu_gap_ok: bool,
    /// Per mode `(m, sum_{l > l0} 1 / (-lambda_l))`.
    pub partial_sums: Vec<(i64, f64)>,
    /// Comparison bound `sum_j 16 / (nu j^2 pi^2)` over the same range.
    pub comparison_bound: f64,
    pub summable: bool,
    /// Smallest `mu_j / (j pi / 4)` over `j > l0`.
    pub min_quarter_ratio: f64,
    pub quarter_bound: bool,
    pub ordered: bool,
    pub passed: bool,
}

pub fn gap_and_summability(
    spectra: &[ModeSpectrum],
    nu: f64,
    l0: usize,
    epsilon0: f64,
) -> GapReport {
    let mut min_gap = f64::INFINITY;
    let mut min_gap_at = (0, 0);
    let mut min_mu_gap = f64::INFINITY;
    let mut partial_sums = Vec::with_capacity(spectra.len());
    let mut min_quarter = f64::INFINITY;
    let mut ordered = true;
    let mut comparison_bound: f64 = 0.0;
    for s in spectra {
        for w in s.roots.windows(2) {
            let gap = w[0].lambda - w[1].lambda;
            if gap < min_gap {
                min_gap = gap;
                min_gap_at = (s.mode.m, w[0].l);
            }
            if w[1].mu_tilde <= w[0].mu_tilde || w[1].lambda >= w[0].lambda {
                ordered = false;
            }
            if w[0].l >= s.l_k {
                min_mu_gap = min_mu_gap.min(w[1].mu_tilde - w[0].mu_tilde);
            }
        }
        let mut sum = 0.0;
        let mut bound = 0.0;
        for r in s.roots.iter().filter(|r| r.l > l0) {
            sum += 1.0 / (-r.lambda);
            let j = r.l as f64;
            bound += 16.0 / (nu * j * j * PI * PI);
            min_quarter = min_quarter.min(r.mu_tilde / (j * PI / 4.0));
        }
        comparison_bound = comparison_bound.max(bound);
        partial_sums.push((s.mode.m, sum));
    }
    let summable = spectra.iter().zip(&partial_sums).all(|(s, (_, sum))| {
        let bound: f64 = s
            .roots
            .iter()
            .filter(|r| r.l > l0)
            .map(|r| 16.0 / (nu * (r.l * r.l) as f64 * PI * PI))
            .sum();
        *sum <= bound
    });
    let quarter_bound = min_quarter > 1.0;
    let threshold = PI - epsilon0;
    let mu_gap_ok = !min_mu_gap.is_finite() || min_mu_gap > threshold;
    GapReport {
        l0,
        min_lambda_gap: min_gap,
        min_lambda_gap_at: min_gap_at,
        min_mu_gap,
        mu_gap_threshold: threshold,
        mu_gap_ok,
        partial_sums,
        comparison_bound,
        summable,
        min_quarter_ratio: min_quarter,
        quarter_bound,
        ordered,
        passed: min_gap > 0.0 && summable && quarter_bound && ordered && mu_gap_ok,
    }
}

/// Distance `(l + 1) pi - mu_l` of each root to the multiple of `pi` it approaches.
pub fn asymptotic_offsets(roots: &[SpectralRoot]) -> Vec<f64> {
    roots
        .iter()
        .map(|r| ((r.l + 1) as f64 * PI - r.mu_tilde).abs())
        .collect()
}

/// The offsets decrease along each parity class of `l`.
pub fn offsets_decrease_by_parity(roots: &[SpectralRoot]) -> bool {
    let off = asymptotic_offsets(roots);
    (0..2).all(|p| {
        let class: Vec<f64> = off.iter().skip(p).step_by(2).copied().collect();
        class.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12))
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumRow {
    pub m: i64,
    pub k: f64,
    pub l: usize,
    pub mu_tilde: f64,
    pub lambda: f64,
    pub char_residual: f64,
    pub det_residual: f64,
    pub bracket_lo: f64,
    pub bracket_hi: f64,
}

impl From<&SpectralRoot> for SpectrumRow {
    fn from(r: &SpectralRoot) -> Self {
        SpectrumRow {
            m: r.mode.m,
            k: r.mode.k,
            l: r.l,
            mu_tilde: r.mu_tilde,
            lambda: r.lambda,
            char_residual: r.char_residual,
            det_residual: r.det_residual,
            bracket_lo: r.bracket.0,
            bracket_hi: r.bracket.1,
        }
    }
}

pub fn write_spectrum_csv<W: Write>(spectra: &[ModeSpectrum], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in spectra {
        for r in &s.roots {
            w.serialize(SpectrumRow::from(r))?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mode(k: f64) -> ModeIndex {
        ModeIndex::with_wavenumber(1, k)
    }

    fn bisect(k: f64, mut a: f64, mut b: f64) -> f64 {
        let fa = char_eq(a, k);
        while b - a > 1e-12 {
            let c = 0.5 * (a + b);
            if (char_eq(c, k) > 0.0) == (fa > 0.0) {
                a = c;
            } else {
                b = c;
            }
        }
        0.5 * (a + b)
    }

    #[test]
    fn char_eq_closed_forms() {
        assert_eq!(char_eq(0.0, 1.0), 0.0);
        let v = char_eq(PI, 1.0);
        let expect = -2.0 * PI * (1.0 + 1f64.cosh());
        assert!((v - expect).abs() < 1e-12 * expect.abs());
        let r = char_eq_scaled(2.3, 3.0) - char_eq(2.3, 3.0) / 3f64.cosh();
        assert!(r.abs() < 1e-12);
    }

    #[test]
    fn rearranged_matches_scaled_form() {
        for &k in &[0.3, 1.0, 7.0, -4.0] {
            for &mu in &[0.7, 2.0, 9.5] {
                let f = rearranged_f(mu, k).unwrap();
                let g = -char_eq_scaled(mu, k) / (2.0 * k * mu);
                assert!((f - g).abs() < 1e-12, "k={k} mu={mu}");
            }
        }
        assert!(rearranged_f(0.0, 1.0).is_err());
    }

    #[test]
    fn rearranged_at_multiples_of_pi() {
        for l in 1..8 {
            let k = 2.5;
            let f = rearranged_f(l as f64 * PI, k).unwrap();
            let sign = if l % 2 == 0 { 1.0 } else { -1.0 };
            assert!((f - (1.0 / k.cosh() - sign)).abs() < 1e-12);
        }
    }

    #[test]
    fn sign_changes_each_window_k10() {
        for l in 1..=20 {
            let a = rearranged_f(l as f64 * PI, 10.0).unwrap();
            let b = rearranged_f((l + 1) as f64 * PI, 10.0).unwrap();
            assert!(a * b < 0.0, "l={l}");
        }
    }

    #[test]
    fn derivative_matches_difference() {
        let (k, mu) = (2.0, 5.3);
        let h = 1e-6;
        let fd = (f_unchecked(mu + h, k) - f_unchecked(mu - h, k)) / (2.0 * h);
        assert!((fd - rearranged_f_derivative(mu, k)).abs() < 1e-8);
    }

    #[test]
    fn large_k_brackets_are_pi_windows() {
        let params = LocalizationParams {
            k0: 5.0,
            l_max: 5,
            ..Default::default()
        };
        let rep = bracket_roots(mode(10.0), &params).unwrap();
        assert!(rep.large_k);
        for (l, (lo, hi)) in rep.brackets.iter().enumerate() {
            assert_eq!(*lo, (l + 1) as f64 * PI);
            assert_eq!(*hi, (l + 2) as f64 * PI);
        }
        let (n, _) = count_sign_changes(10.0, 1e-6, PI, 1e-3);
        assert_eq!(n, 0);
    }

    #[test]
    fn small_k_brackets_approach_multiples_of_pi() {
        let params = LocalizationParams::with_l_max(10);
        let rep = bracket_roots(mode(1.0), &params).unwrap();
        assert!(!rep.large_k);
        assert_eq!(rep.brackets.len(), 10);
        let (dense, _) = count_sign_changes(1.0, 1e-6, 11.0 * PI, 1e-3);
        assert_eq!(dense, 10);
        let last = rep.brackets[9];
        let mid = 0.5 * (last.0 + last.1);
        assert!((mid - 11.0 * PI).abs() < PI / 4.0);
    }

    #[test]
    fn refine_matches_bisection_oracle() {
        let r = refine_root((PI, 2.0 * PI), mode(1.0), 1, 1.0, ROOT_TOLERANCE).unwrap();
        let oracle = bisect(1.0, PI, 2.0 * PI);
        assert!((r.mu_tilde - oracle).abs() < 1e-10);
        assert!((r.mu_tilde / PI - 1.9521).abs() < 1e-4);
        assert!(r.char_residual.abs() <= ROOT_TOLERANCE);
        assert!(r.refined.1 - r.refined.0 <= BRACKET_WIDTH * 1.0001);
        assert!(r.lambda < -1.0);
    }

    #[test]
    fn frozen_roots() {
        let k1 = [1.9521, 2.8490, 3.9765, 4.9113, 5.9844];
        let k10 = [1.2358, 2.4129, 3.5332, 4.6156, 5.6746];
        for (k, expect) in [(1.0, k1), (10.0, k10)] {
            let s =
                compute_mode_spectrum(mode(k), 1.0, &LocalizationParams::with_l_max(5)).unwrap();
            for (r, e) in s.roots.iter().zip(expect) {
                assert!((r.mu_tilde / PI - e).abs() < 1e-4, "k={k} l={}", r.l);
            }
        }
    }

    #[test]
    fn determinant_vanishes_only_at_roots() {
        let r = refine_root((PI, 2.0 * PI), mode(10.0), 1, 1.0, ROOT_TOLERANCE).unwrap();
        assert!(r.det_residual <= 1e-8, "{}", r.det_residual);
        assert!(determinant_residual(mode(10.0), 1.5 * PI) > 1e-3);
    }

    #[test]
    fn determinant_tracks_char_eq_sign_free() {
        let k = 10.0;
        let n = 400;
        let mut prev_ratio: Option<f64> = None;
        let s = compute_mode_spectrum(mode(k), 1.0, &LocalizationParams::with_l_max(6)).unwrap();
        for i in 1..n {
            let mu = PI + 5.0 * PI * i as f64 / n as f64;
            if s.roots.iter().any(|r| (r.mu_tilde - mu).abs() < 1e-3) {
                continue;
            }
            let ratio = determinant_residual(mode(k), mu) / f_unchecked(mu, k).abs();
            assert!(ratio > 0.0 && ratio.is_finite());
            if let Some(p) = prev_ratio {
                assert!(ratio / p < 10.0 && p / ratio < 10.0);
            }
            prev_ratio = Some(ratio);
        }
    }

    #[test]
    fn zero_root_in_first_window_absent() {
        for &k in &[0.1, 0.5, 1.0, 3.0, 40.0] {
            let (n, _) = count_sign_changes(k, 1e-6, PI, PI / 256.0);
            assert_eq!(n, 0, "k={k}");
        }
    }

    #[test]
    fn negative_k_same_roots() {
        let p = LocalizationParams::with_l_max(8);
        let a = compute_mode_spectrum(ModeIndex::with_wavenumber(2, 2.0), 1.0, &p).unwrap();
        let b = compute_mode_spectrum(ModeIndex::with_wavenumber(-2, -2.0), 1.0, &p).unwrap();
        for (x, y) in a.roots.iter().zip(&b.roots) {
            assert!((x.mu_tilde - y.mu_tilde).abs() <= 1e-12);
        }
    }

    #[test]
    fn gap_report_passes_default_sweep() {
        let ch = ChannelConfig::default();
        let sp = compute_spectrum(&ch, 8, &LocalizationParams::with_l_max(30)).unwrap();
        let rep = gap_and_summability(&sp, 1.0, 0, PI / 4.0);
        assert!(rep.passed, "{rep:?}");
        assert!(rep.comparison_bound <= 8.0 / 3.0);
        for s in &sp {
            assert!(offsets_decrease_by_parity(&s.roots), "m={}", s.mode.m);
        }
    }

    #[test]
    fn detects_k0() {
        let params = LocalizationParams::with_l_max(30);
        let k0 = detect_k0(&[0.5, 1.0, 2.0, 20.0], &params);
        assert_eq!(k0, Some(0.5));
    }

    #[test]
    fn params_validate() {
        let mut p = LocalizationParams::default();
        assert!(p.validate().is_ok());
        p.epsilon0 = 2.0;
        assert!(p.validate().is_err());
        p = LocalizationParams {
            scan_resolution: 0.5,
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }
}
