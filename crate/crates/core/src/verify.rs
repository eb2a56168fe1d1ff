//! Named numerical checks over a configured sweep, with measured values.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eigen::{normalize_and_gram, trace_report};
use crate::error::{Error, Result};
use crate::harness::{oracle_rows, run_experiment, ExperimentConfig, InitialData};
use crate::modal::{build_bases, duality_check, ModeBasis, PiecewiseConstant};
use crate::observability::uniformity_scan;
use crate::quadrature::uniform_grid;
use crate::spectral::{
    compute_spectrum, determinant_residual, gap_and_summability, params_for_sweep, ModeSpectrum,
    ROOT_TOLERANCE,
};
use crate::SCHEMA_VERSION;

type C64 = Complex64;

pub const CHECK_NAMES: [&str; 9] = [
    "localization",
    "gap",
    "eigenfunctions",
    "orthogonality",
    "trace_bound",
    "duality",
    "observability",
    "oracle",
    "null_control",
];

pub const LOCALIZATION_BRANCHES: usize = 30;
pub const DETERMINANT_TOLERANCE: f64 = 1e-8;
pub const GAP_L0: usize = 1;
pub const BOUNDARY_TOLERANCE: f64 = 1e-8;
pub const ODE_TOLERANCE: f64 = 1e-7;
pub const GRAM_TOLERANCE: f64 = 1e-6;
pub const TRACE_RATIO_TOLERANCE: f64 = 1e-6;
pub const DUALITY_TOLERANCE: f64 = 1e-8;
pub const DUALITY_PAIRS: usize = 100;
pub const OBSERVABILITY_BRANCHES: usize = 6;
pub const ORACLE_TOLERANCE: f64 = 1e-6;
pub const NULL_CONTROL_TOLERANCE: f64 = 1e-6;
pub const SINE_TOLERANCE: f64 = 1e-12;

/// Shifts `mu_tilde` of root `(m, l)` before anything is derived from it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RootFault {
    pub m: i64,
    pub l: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub measured: BTreeMap<String, f64>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub schema_version: u32,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
    pub failed: Vec<String>,
}

/// Parses a comma-separated list of check names.
pub fn parse_checks(list: &str) -> Result<Vec<String>> {
    let names: Vec<String> = list
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if names.is_empty() {
        return Err(Error::InvalidConfig("empty check list".into()));
    }
    for n in &names {
        if !CHECK_NAMES.contains(&n.as_str()) {
            return Err(Error::InvalidConfig(format!(
                "unknown check '{n}', expected one of {}",
                CHECK_NAMES.join(", ")
            )));
        }
    }
    Ok(names)
}

fn apply_fault(spectra: &mut [ModeSpectrum], fault: &RootFault, nu: f64) {
    for s in spectra
        .iter_mut()
        .filter(|s| s.mode.m.abs() == fault.m.abs())
    {
        if let Some(r) = s.roots.iter_mut().find(|r| r.l == fault.l) {
            r.mu_tilde += fault.delta;
            r.lambda = -nu * (s.mode.k * s.mode.k + r.mu_tilde * r.mu_tilde);
            r.char_residual =
                crate::spectral::rearranged_f(r.mu_tilde, s.mode.k).unwrap_or(f64::NAN);
            r.det_residual = determinant_residual(s.mode, r.mu_tilde);
        }
    }
}

fn result(name: &str, passed: bool, measured: &[(&str, f64)], detail: String) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed,
        measured: measured.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        detail,
    }
}

struct Context {
    cfg: ExperimentConfig,
    spectra: Vec<ModeSpectrum>,
    bases: Vec<ModeBasis>,
}

fn localization(ctx: &Context, fault: Option<&RootFault>) -> Result<CheckResult> {
    let ch = ctx.cfg.channel();
    let modes = ch.modes(ctx.cfg.m_max);
    let l_max = LOCALIZATION_BRANCHES.max(ctx.cfg.l_max);
    let params = params_for_sweep(&modes, l_max);
    let mut spectra = compute_spectrum(&ch, ctx.cfg.m_max, &params)?;
    if let Some(f) = fault {
        apply_fault(&mut spectra, f, ctx.cfg.nu);
    }
    let mut max_res: f64 = 0.0;
    let mut max_det: f64 = 0.0;
    let mut min_mu = f64::INFINITY;
    let mut counts_ok = true;
    let mut windows_ok = true;
    let mut large = 0usize;
    for s in &spectra {
        counts_ok &=
            s.roots.len() == l_max && s.roots.iter().enumerate().all(|(i, r)| r.l == i + 1);
        if s.large_k {
            large += 1;
        }
        for r in &s.roots {
            max_res = max_res.max(r.char_residual.abs());
            max_det = max_det.max(r.det_residual);
            min_mu = min_mu.min(r.mu_tilde);
            let l = r.l as f64;
            if s.large_k && !(r.mu_tilde > l * PI && r.mu_tilde < (l + 1.0) * PI) {
                windows_ok = false;
            }
        }
    }
    let passed = counts_ok
        && windows_ok
        && max_res <= ROOT_TOLERANCE
        && max_det <= DETERMINANT_TOLERANCE
        && min_mu > PI;
    Ok(result(
        "localization",
        passed,
        &[
            ("max_char_residual", max_res),
            ("max_det_residual", max_det),
            ("min_mu_tilde", min_mu),
            ("branches", l_max as f64),
            ("large_k_modes", large as f64),
            ("k0", params.k0),
        ],
        format!(
            "{} modes x {} branches; windows ok: {windows_ok}; counts ok: {counts_ok}",
            spectra.len(),
            l_max
        ),
    ))
}

fn gap(ctx: &Context) -> CheckResult {
    let g = gap_and_summability(&ctx.spectra, ctx.cfg.nu, GAP_L0, PI / 4.0);
    result(
        "gap",
        g.passed,
        &[
            ("min_lambda_gap", g.min_lambda_gap),
            ("min_mu_gap", g.min_mu_gap),
            ("comparison_bound", g.comparison_bound),
            ("min_quarter_ratio", g.min_quarter_ratio),
        ],
        format!(
            "summable: {}, quarter bound: {}, ordered: {}, mu gap ok: {}",
            g.summable, g.quarter_bound, g.ordered, g.mu_gap_ok
        ),
    )
}

fn eigenfunctions(ctx: &Context) -> CheckResult {
    let y = uniform_grid(0.0, 1.0, 101);
    let (bc, ode) = ctx
        .bases
        .par_iter()
        .flat_map(|b| b.eigs.par_iter())
        .map(|e| {
            let bc = e
                .boundary_residuals(ctx.cfg.y_points)
                .iter()
                .copied()
                .fold(0.0, f64::max);
            let (res, scale) = y
                .iter()
                .map(|&t| e.ode_residual(t))
                .fold((0.0f64, 0.0f64), |acc, (r, s)| {
                    (acc.0.max(r.norm()), acc.1.max(s))
                });
            let ode = res / scale;
            (bc, ode)
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0.max(b.0), a.1.max(b.1)));
    result(
        "eigenfunctions",
        bc <= BOUNDARY_TOLERANCE && ode <= ODE_TOLERANCE,
        &[("max_boundary_residual", bc), ("max_ode_residual", ode)],
        format!("boundary <= {BOUNDARY_TOLERANCE:e}, ODE <= {ODE_TOLERANCE:e}"),
    )
}

fn orthogonality(ctx: &Context) -> Result<CheckResult> {
    let reports = ctx
        .bases
        .par_iter()
        .map(|b| normalize_and_gram(&b.eigs, ctx.cfg.y_points))
        .collect::<Result<Vec<_>>>()?;
    let off = reports.iter().map(|r| r.max_offdiag).fold(0.0, f64::max);
    let diag = reports.iter().map(|r| r.max_diag_error).fold(0.0, f64::max);
    Ok(result(
        "orthogonality",
        off <= GRAM_TOLERANCE && diag <= GRAM_TOLERANCE,
        &[("max_offdiag", off), ("max_diag_error", diag)],
        format!("Simpson Gram on {} points", ctx.cfg.y_points),
    ))
}

fn trace_bound(ctx: &Context) -> CheckResult {
    let modes: Vec<_> = ctx.bases.iter().map(|b| b.eigs.clone()).collect();
    let t = trace_report(&modes);
    let passed = t.empirical_m > 0.0
        && t.empirical_m.is_finite()
        && t.max_ratio_spread <= TRACE_RATIO_TOLERANCE
        && t.max_ratio_deviation <= TRACE_RATIO_TOLERANCE;
    result(
        "trace_bound",
        passed,
        &[
            ("empirical_m", t.empirical_m),
            ("max_ratio_spread", t.max_ratio_spread),
            ("max_ratio_deviation", t.max_ratio_deviation),
        ],
        "closed-form trace against term-by-term derivative".into(),
    )
}

fn duality(ctx: &Context) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
    let t_final = ctx.cfg.t_final;
    let mut worst: f64 = 0.0;
    for _ in 0..DUALITY_PAIRS {
        let b = &ctx.bases[rng.random_range(0..ctx.bases.len())];
        let n = b.len();
        let deepest = b.lambdas.iter().fold(0.0f64, |m, l| m.max(l.abs()));
        let cells = 40usize.max((deepest * t_final / 25.0).ceil() as usize);
        let times = uniform_grid(0.0, t_final, cells + 1);
        let mut draw = |n: usize| -> Vec<C64> {
            (0..n)
                .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect()
        };
        let a0 = draw(n);
        let alpha = draw(n);
        let values = draw(cells);
        let psi = PiecewiseConstant::new(times, values)?;
        let d = duality_check(&a0, &alpha, &psi, b, t_final)?;
        worst = worst.max(d.relative_error);
    }
    Ok(result(
        "duality",
        worst <= DUALITY_TOLERANCE,
        &[
            ("max_relative_error", worst),
            ("pairs", DUALITY_PAIRS as f64),
        ],
        "forward state pairing against the adjoint trace integral".into(),
    ))
}

fn observability(ctx: &Context) -> Result<CheckResult> {
    let rep = uniformity_scan(
        &ctx.bases,
        OBSERVABILITY_BRANCHES,
        ctx.cfg.t_final,
        ctx.cfg.t_control,
    )?;
    Ok(result(
        "observability",
        rep.all_positive && rep.conjugate_asymmetry <= 1e-12,
        &[
            ("min_ratio", rep.min_ratio),
            ("min_mode", rep.min_mode as f64),
            ("conjugate_asymmetry", rep.conjugate_asymmetry),
            ("tail_variation", rep.tail_variation),
        ],
        format!("L={OBSERVABILITY_BRANCHES}, saturates: {}", rep.saturates),
    ))
}

fn oracle(ctx: &Context) -> Result<CheckResult> {
    let cfg = ExperimentConfig {
        oracle_points: ctx.cfg.oracle_points.max(256),
        ..ctx.cfg.clone()
    };
    let rows = oracle_rows(&cfg, &ctx.spectra)?;
    let worst = rows
        .iter()
        .map(|r| r.max_relative_error)
        .fold(0.0, f64::max);
    Ok(result(
        "oracle",
        !rows.is_empty() && worst <= ORACLE_TOLERANCE,
        &[
            ("max_relative_error", worst),
            ("modes", rows.len() as f64),
            ("n_basis", cfg.oracle_points as f64),
        ],
        "characteristic roots against the clamped Legendre-Galerkin eigenvalues".into(),
    ))
}

fn null_control(ctx: &Context) -> Result<CheckResult> {
    let cfg = ExperimentConfig {
        initial_data: InitialData::RandomModal {
            m_max: ctx.cfg.m_max.min(4),
            l_max: ctx.cfg.synthesis_branches.min(6),
            sine_modes: 3,
        },
        oracle_points: 0,
        control_enabled: true,
        enforce_zero_mean: false,
        ..ctx.cfg.clone()
    };
    let out = run_experiment(&cfg)?;
    let r = &out.report;
    let sine = r.sine.iter().map(|s| s.relative_error).fold(0.0, f64::max);
    let passed = r.totals.relative_controlled <= NULL_CONTROL_TOLERANCE
        && sine <= SINE_TOLERANCE
        && r.control_after_horizon == 0.0
        && r.totals.controlled_below_uncontrolled;
    Ok(result(
        "null_control",
        passed,
        &[
            ("relative_terminal_norm", r.totals.relative_controlled),
            ("max_sine_error", sine),
            ("control_after_horizon", r.control_after_horizon),
            ("control_mean", r.control_mean),
            ("max_moment_residual", r.totals.max_moment_residual),
            ("control_energy", r.totals.control_energy),
        ],
        format!(
            "random data on |m| <= {}, seed {}",
            cfg.m_max.min(4),
            cfg.seed
        ),
    ))
}

pub fn run_verify(
    cfg: &ExperimentConfig,
    checks: Option<&[String]>,
    fault: Option<RootFault>,
) -> Result<VerifyReport> {
    cfg.validate()?;
    let selected: Vec<&str> = match checks {
        Some(list) => CHECK_NAMES
            .iter()
            .copied()
            .filter(|n| list.iter().any(|c| c == n))
            .collect(),
        None => CHECK_NAMES.to_vec(),
    };
    let ch = cfg.channel();
    let params = params_for_sweep(&ch.modes(cfg.m_max), cfg.l_max);
    let mut spectra = compute_spectrum(&ch, cfg.m_max, &params)?;
    if let Some(f) = &fault {
        apply_fault(&mut spectra, f, cfg.nu);
    }
    let bases = build_bases(&spectra, cfg.nu)?;
    let ctx = Context {
        cfg: cfg.clone(),
        spectra,
        bases,
    };
    let mut out = Vec::with_capacity(selected.len());
    for name in selected {
        let r = match name {
            "localization" => localization(&ctx, fault.as_ref())?,
            "gap" => gap(&ctx),
            "eigenfunctions" => eigenfunctions(&ctx),
            "orthogonality" => orthogonality(&ctx)?,
            "trace_bound" => trace_bound(&ctx),
            "duality" => duality(&ctx)?,
            "observability" => observability(&ctx)?,
            "oracle" => oracle(&ctx)?,
            "null_control" => null_control(&ctx)?,
            _ => unreachable!("names are filtered against CHECK_NAMES"),
        };
        out.push(r);
    }
    let failed: Vec<String> = out
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.clone())
        .collect();
    Ok(VerifyReport {
        schema_version: SCHEMA_VERSION,
        passed: failed.is_empty(),
        checks: out,
        failed,
    })
}
