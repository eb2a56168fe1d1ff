//! End-to-end experiments: spectrum, eigenfunctions, projection of initial data, control
//! synthesis, controlled and free evolution, and the artifacts they produce.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelConfig;
use crate::collocation::collocation_spectrum_oracle;
use crate::control::{
    assemble_field, field_energy, periodic_grid, synthesize_mode, write_control_csv, ControlField,
    ModeControl,
};
use crate::error::{Error, Result, ResultExt};
use crate::modal::{
    build_bases, forward_controlled, sine_mode_invariant, ModalState, ModeBasis, NoControl,
    Trajectory,
};
use crate::quadrature::{simpson_weights, uniform_grid};
use crate::spectral::{compute_spectrum, params_for_sweep, write_spectrum_csv, ModeSpectrum};
use crate::SCHEMA_VERSION;

type C64 = Complex64;

/// Divergence below this (relative) passes the check untouched.
pub const DIVERGENCE_CLEAN: f64 = 1e-8;
/// Divergence up to this is removed by the projection; above it the data is rejected.
pub const DIVERGENCE_REJECT: f64 = 1e-6;
pub const WALL_TOLERANCE: f64 = 1e-6;
pub const MEAN_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalCoefficient {
    pub m: i64,
    pub l: usize,
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SineCoefficient {
    pub n: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialData {
    Zero,
    /// One eigenfunction of mode `m`, completed by its conjugate at `-m` so the field is real.
    Eigenfunction {
        m: i64,
        l: usize,
        #[serde(default = "one")]
        amplitude: f64,
    },
    /// Explicit coefficients; a missing `-m` entry is filled with the conjugate of `m`.
    Modal {
        #[serde(default)]
        coefficients: Vec<ModalCoefficient>,
        /// `u_0(y) = sum_n s_n sin(n pi y)` in the `k = 0` mode.
        #[serde(default)]
        sine: Vec<SineCoefficient>,
    },
    /// Uniform random coefficients on `[-1, 1]` from the configured seed.
    RandomModal {
        m_max: usize,
        l_max: usize,
        #[serde(default)]
        sine_modes: usize,
    },
    /// Velocity samples from a JSON file (see [`GriddedField`]).
    Gridded {
        path: PathBuf,
    },
}

fn one() -> f64 {
    1.0
}

/// Samples `u[i][j] = u(x_j, y_i)` with `x_j = j L / nx` and `y_i = i / (ny - 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GriddedField {
    pub u: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl GriddedField {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).context_with(|| format!("reading {}", path.display()))?;
        let field: GriddedField =
            serde_json::from_str(&text).context_with(|| format!("parsing {}", path.display()))?;
        field.shape()?;
        Ok(field)
    }

    /// `(ny, nx)` after checking the two components agree.
    pub fn shape(&self) -> Result<(usize, usize)> {
        let ny = self.u.len();
        let nx = self.u.first().map(|r| r.len()).unwrap_or(0);
        if ny < 5 || ny.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "gridded data needs an odd number >= 5 of y rows, got {ny}"
            )));
        }
        if nx < 3 {
            return Err(Error::InvalidConfig(
                "gridded data needs at least 3 x samples".into(),
            ));
        }
        if self.v.len() != ny || self.u.iter().chain(&self.v).any(|r| r.len() != nx) {
            return Err(Error::InvalidConfig("u and v grids differ in shape".into()));
        }
        if self
            .u
            .iter()
            .chain(&self.v)
            .flatten()
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidConfig(
                "gridded data contains non-finite samples".into(),
            ));
        }
        Ok((ny, nx))
    }
}

fn default_nu() -> f64 {
    1.0
}
fn default_length() -> f64 {
    2.0 * PI
}
fn default_t_final() -> f64 {
    1.0
}
fn default_t_control() -> f64 {
    0.5
}
fn default_m_max() -> usize {
    8
}
fn default_l_max() -> usize {
    20
}
fn default_synthesis() -> usize {
    6
}
fn default_y_points() -> usize {
    1025
}
fn default_time_steps() -> usize {
    4000
}
fn default_x_points() -> usize {
    32
}
fn default_output_samples() -> usize {
    101
}
fn default_initial() -> InitialData {
    InitialData::RandomModal {
        m_max: 4,
        l_max: 6,
        sine_modes: 3,
    }
}
fn default_true() -> bool {
    true
}
fn default_oracle_points() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_nu")]
    pub nu: f64,
    #[serde(default = "default_length", alias = "L")]
    pub length: f64,
    #[serde(default = "default_t_final", alias = "T")]
    pub t_final: f64,
    #[serde(default = "default_t_control", alias = "T0")]
    pub t_control: f64,
    #[serde(default = "default_m_max", alias = "M_max")]
    pub m_max: usize,
    #[serde(default = "default_l_max", alias = "L_max")]
    pub l_max: usize,
    #[serde(default = "default_synthesis")]
    pub synthesis_branches: usize,
    #[serde(default = "default_y_points")]
    pub y_points: usize,
    #[serde(default = "default_time_steps")]
    pub time_steps: usize,
    #[serde(default = "default_x_points")]
    pub x_points: usize,
    #[serde(default = "default_output_samples")]
    pub output_samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_initial")]
    pub initial_data: InitialData,
    #[serde(default)]
    pub enforce_zero_mean: bool,
    #[serde(default)]
    pub regularization: f64,
    #[serde(default = "default_true")]
    pub auto_regularize: bool,
    #[serde(default = "default_true")]
    pub control_enabled: bool,
    /// Galerkin basis size of the eigenvalue cross-check; 0 skips it.
    #[serde(default = "default_oracle_points")]
    pub oracle_points: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .context_with(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn channel(&self) -> ChannelConfig {
        ChannelConfig {
            nu: self.nu,
            length: self.length,
            t_final: self.t_final,
            t_control: self.t_control,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.channel().validate()?;
        if self.m_max < 1 {
            return Err(Error::InvalidConfig("m_max must be at least 1".into()));
        }
        if self.l_max < 2 {
            return Err(Error::InvalidConfig("l_max must be at least 2".into()));
        }
        if self.synthesis_branches < 1 || self.synthesis_branches > self.l_max {
            return Err(Error::InvalidConfig(format!(
                "synthesis_branches must lie in 1..={}, got {}",
                self.l_max, self.synthesis_branches
            )));
        }
        if self.y_points < 5 || self.y_points.is_multiple_of(2) {
            return Err(Error::InvalidConfig(
                "y_points must be odd and at least 5".into(),
            ));
        }
        if self.time_steps < 1 {
            return Err(Error::InvalidConfig("time_steps must be positive".into()));
        }
        if self.x_points <= 2 * self.m_max {
            return Err(Error::InvalidConfig(format!(
                "x_points must exceed 2 m_max = {}",
                2 * self.m_max
            )));
        }
        if self.output_samples < 2 {
            return Err(Error::InvalidConfig(
                "output_samples must be at least 2".into(),
            ));
        }
        if !(self.regularization >= 0.0 && self.regularization.is_finite()) {
            return Err(Error::InvalidConfig(
                "regularization must be finite and nonnegative".into(),
            ));
        }
        if self.oracle_points != 0 && self.oracle_points < 64 {
            return Err(Error::InvalidConfig(
                "oracle_points must be 0 or at least 64".into(),
            ));
        }
        Ok(())
    }
}

/// Modal coefficients of the initial data on the computed bases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    /// Aligned with the bases.
    pub states: Vec<ModalState>,
    pub sine: Vec<SineCoefficient>,
    /// Relative L2 error of the reconstruction from the retained coefficients.
    pub residual: f64,
    pub divergence: Option<f64>,
    pub divergence_cleaned: bool,
}

fn mode_position(bases: &[ModeBasis], m: i64) -> Result<usize> {
    bases
        .iter()
        .position(|b| b.mode.m == m)
        .ok_or_else(|| Error::InvalidConfig(format!("mode m={m} is outside the truncation")))
}

fn empty_states(bases: &[ModeBasis]) -> Vec<ModalState> {
    bases
        .iter()
        .map(|b| ModalState::zeros(b.mode, b.len(), 0.0))
        .collect()
}

fn set_pair(
    states: &mut [ModalState],
    bases: &[ModeBasis],
    m: i64,
    l: usize,
    value: C64,
) -> Result<()> {
    if m == 0 {
        return Err(Error::InvalidConfig(
            "use the sine list for m = 0 content".into(),
        ));
    }
    let i = mode_position(bases, m)?;
    let j = mode_position(bases, -m)?;
    if l == 0 || l > bases[i].len() {
        return Err(Error::InvalidConfig(format!(
            "branch l={l} is outside 1..={}",
            bases[i].len()
        )));
    }
    states[i].alphas[l - 1] = value;
    states[j].alphas[l - 1] = value.conj();
    Ok(())
}

fn check_sine(sine: &[SineCoefficient], enforce_zero_mean: bool) -> Result<()> {
    if sine.iter().any(|s| s.n == 0 || !s.value.is_finite()) {
        return Err(Error::InvalidConfig(
            "sine coefficients need n >= 1 and finite values".into(),
        ));
    }
    if enforce_zero_mean && sine.iter().any(|s| s.value != 0.0) {
        return Err(Error::ConstraintViolation(
            "initial velocity has nonzero x-mean while zero mean is enforced".into(),
        ));
    }
    Ok(())
}

pub fn project_initial_data(cfg: &ExperimentConfig, bases: &[ModeBasis]) -> Result<Projection> {
    let mut states = empty_states(bases);
    let modal = |states: Vec<ModalState>, sine: Vec<SineCoefficient>| {
        check_sine(&sine, cfg.enforce_zero_mean)?;
        Ok(Projection {
            states,
            sine,
            residual: 0.0,
            divergence: None,
            divergence_cleaned: false,
        })
    };
    match &cfg.initial_data {
        InitialData::Zero => modal(states, Vec::new()),
        InitialData::Eigenfunction { m, l, amplitude } => {
            set_pair(&mut states, bases, *m, *l, C64::new(*amplitude, 0.0))?;
            modal(states, Vec::new())
        }
        InitialData::Modal { coefficients, sine } => {
            for c in coefficients.iter().filter(|c| c.m > 0) {
                set_pair(&mut states, bases, c.m, c.l, C64::new(c.re, c.im))?;
            }
            for c in coefficients.iter().filter(|c| c.m < 0) {
                let v = C64::new(c.re, c.im);
                let partner = coefficients.iter().find(|p| p.m == -c.m && p.l == c.l);
                match partner {
                    Some(p)
                        if (C64::new(p.re, p.im).conj() - v).norm() > 1e-12 * v.norm().max(1.0) =>
                    {
                        return Err(Error::ConstraintViolation(format!(
                            "coefficients of m={} and m={} (l={}) are not conjugate, so the field is not real",
                            c.m, -c.m, c.l
                        )));
                    }
                    Some(_) => {}
                    None => set_pair(&mut states, bases, -c.m, c.l, v.conj())?,
                }
            }
            if coefficients.iter().any(|c| c.m == 0) {
                return Err(Error::InvalidConfig(
                    "use the sine list for m = 0 content".into(),
                ));
            }
            modal(states, sine.clone())
        }
        InitialData::RandomModal {
            m_max,
            l_max,
            sine_modes,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            for m in 1..=*m_max as i64 {
                for l in 1..=*l_max {
                    let v = C64::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
                    set_pair(&mut states, bases, m, l, v)?;
                }
            }
            let sine = (1..=*sine_modes)
                .map(|n| SineCoefficient {
                    n,
                    value: rng.random_range(-1.0..=1.0),
                })
                .collect();
            modal(states, sine)
        }
        InitialData::Gridded { path } => {
            let field = GriddedField::load(path)?;
            project_gridded(&field, cfg, bases)
        }
    }
}

/// Fourier coefficients `(1/nx) sum_j f(x_j) e^{-i k x_j}` of every row, indexed `[row][bin]`.
fn x_transform(rows: &[Vec<f64>]) -> Vec<Vec<C64>> {
    let nx = rows[0].len();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(nx);
    rows.iter()
        .map(|r| {
            let mut buf: Vec<C64> = r.iter().map(|&v| C64::new(v, 0.0)).collect();
            fft.process(&mut buf);
            buf.iter().map(|z| z / nx as f64).collect()
        })
        .collect()
}

fn bin(m: i64, nx: usize) -> usize {
    if m >= 0 {
        m as usize
    } else {
        (nx as i64 + m) as usize
    }
}

/// Fourth-order finite-difference `d/dy` on a uniform grid.
fn dy4(f: &[f64], h: f64) -> Vec<f64> {
    let n = f.len();
    (0..n)
        .map(|i| {
            if i >= 2 && i + 2 < n {
                (f[i - 2] - 8.0 * f[i - 1] + 8.0 * f[i + 1] - f[i + 2]) / (12.0 * h)
            } else if i < 2 {
                (-25.0 * f[i] + 48.0 * f[i + 1] - 36.0 * f[i + 2] + 16.0 * f[i + 3]
                    - 3.0 * f[i + 4])
                    / (12.0 * h)
            } else {
                (25.0 * f[i] - 48.0 * f[i - 1] + 36.0 * f[i - 2] - 16.0 * f[i - 3] + 3.0 * f[i - 4])
                    / (12.0 * h)
            }
        })
        .collect()
}

/// Relative discrete divergence `|u_x + v_y| / (|u_x| + |v_y|)` in the L2 sense.
fn divergence(field: &GriddedField, length: f64) -> f64 {
    let (ny, nx) = (field.u.len(), field.u[0].len());
    let h = 1.0 / (ny - 1) as f64;
    let uh = x_transform(&field.u);
    let fft = FftPlanner::<f64>::new().plan_fft_inverse(nx);
    let mut ux = vec![vec![0.0; nx]; ny];
    for (i, row) in uh.iter().enumerate() {
        let mut buf: Vec<C64> = (0..nx)
            .map(|b| {
                let m = if b <= nx / 2 {
                    b as i64
                } else {
                    b as i64 - nx as i64
                };
                if nx % 2 == 0 && b == nx / 2 {
                    return C64::default();
                }
                row[b] * C64::new(0.0, 2.0 * PI * m as f64 / length)
            })
            .collect();
        fft.process(&mut buf);
        for j in 0..nx {
            ux[i][j] = buf[j].re;
        }
    }
    let (mut div, mut scale) = (0.0, 0.0);
    for j in 0..nx {
        let col: Vec<f64> = (0..ny).map(|i| field.v[i][j]).collect();
        let vy = dy4(&col, h);
        for i in 0..ny {
            div += (ux[i][j] + vy[i]).powi(2);
            scale += ux[i][j].powi(2) + vy[i].powi(2);
        }
    }
    if scale == 0.0 {
        0.0
    } else {
        (div / scale).sqrt()
    }
}

fn project_gridded(
    field: &GriddedField,
    cfg: &ExperimentConfig,
    bases: &[ModeBasis],
) -> Result<Projection> {
    let (ny, nx) = field.shape()?;
    let wall = field.v[0]
        .iter()
        .chain(&field.v[ny - 1])
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let vmax = field
        .u
        .iter()
        .chain(&field.v)
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if wall > WALL_TOLERANCE * vmax.max(f64::MIN_POSITIVE) {
        return Err(Error::ConstraintViolation(format!(
            "normal velocity does not vanish at the walls (max {wall:.3e})"
        )));
    }
    let div = divergence(field, cfg.length);
    if div > DIVERGENCE_REJECT {
        return Err(Error::ConstraintViolation(format!(
            "initial velocity is not divergence-free (relative divergence {div:.3e})"
        )));
    }
    let y = uniform_grid(0.0, 1.0, ny);
    let w = simpson_weights(ny, 1.0)?;
    let uh = x_transform(&field.u);
    let vh = x_transform(&field.v);
    let column = |g: &Vec<Vec<C64>>, b: usize| -> Vec<C64> { (0..ny).map(|i| g[i][b]).collect() };

    let u0 = column(&uh, 0);
    let mean = u0.iter().fold(0.0f64, |m, z| m.max(z.norm()));
    if cfg.enforce_zero_mean && mean > MEAN_TOLERANCE * vmax.max(f64::MIN_POSITIVE) {
        return Err(Error::ConstraintViolation(format!(
            "initial velocity has x-mean up to {mean:.3e} while zero mean is enforced"
        )));
    }

    let total: f64 = (0..ny)
        .map(|i| {
            w[i] * (0..nx)
                .map(|j| field.u[i][j].powi(2) + field.v[i][j].powi(2))
                .sum::<f64>()
                / nx as f64
        })
        .sum();

    let per_mode: Vec<(Vec<C64>, f64)> = bases
        .par_iter()
        .map(|b| {
            let bn = bin(b.mode.m, nx);
            let (u, v) = (column(&uh, bn), column(&vh, bn));
            let samples: Vec<_> = b.eigs.iter().map(|e| e.sample(&y)).collect();
            let alphas: Vec<C64> = samples
                .iter()
                .map(|s| {
                    (0..ny)
                        .map(|i| w[i] * (u[i] * s.phi[i].conj() + v[i] * s.xi[i].conj()))
                        .sum()
                })
                .collect();
            let err: f64 = (0..ny)
                .map(|i| {
                    let (mut pu, mut pv) = (u[i], v[i]);
                    for (a, s) in alphas.iter().zip(&samples) {
                        pu -= a * s.phi[i];
                        pv -= a * s.xi[i];
                    }
                    w[i] * (pu.norm_sqr() + pv.norm_sqr())
                })
                .sum();
            (alphas, err)
        })
        .collect();

    let n_sine = bases.first().map(|b| b.len()).unwrap_or(0).max(1);
    let sine: Vec<SineCoefficient> = (1..=n_sine)
        .map(|n| SineCoefficient {
            n,
            value: 2.0
                * (0..ny)
                    .map(|i| w[i] * u0[i].re * (n as f64 * PI * y[i]).sin())
                    .sum::<f64>(),
        })
        .collect();
    let v0 = column(&vh, 0);
    let zero_err: f64 = (0..ny)
        .map(|i| {
            let rec: f64 = sine
                .iter()
                .map(|s| s.value * (s.n as f64 * PI * y[i]).sin())
                .sum();
            w[i] * ((u0[i].re - rec).powi(2) + u0[i].im.powi(2) + v0[i].norm_sqr())
        })
        .sum();
    let m_max = bases.iter().map(|b| b.mode.m.abs()).max().unwrap_or(0);
    let unresolved: f64 = (0..nx)
        .filter(|&b| {
            let m = if b <= nx / 2 {
                b as i64
            } else {
                b as i64 - nx as i64
            };
            m.abs() > m_max
        })
        .map(|b| {
            (0..ny)
                .map(|i| w[i] * (uh[i][b].norm_sqr() + vh[i][b].norm_sqr()))
                .sum::<f64>()
        })
        .sum();
    let err = per_mode.iter().map(|p| p.1).sum::<f64>() + zero_err + unresolved;
    let states = bases
        .iter()
        .zip(per_mode)
        .map(|(b, (a, _))| ModalState::new(b.mode, a, 0.0))
        .collect();
    check_sine(&sine, false)?;
    Ok(Projection {
        states,
        sine,
        residual: if total > 0.0 {
            (err / total).sqrt()
        } else {
            0.0
        },
        divergence: Some(div),
        divergence_cleaned: div > DIVERGENCE_CLEAN,
    })
}

/// Samples a real field `sum_m sum_l alpha (phi, xi) e^{ikx} + sum_n s_n (sin(n pi y), 0)`.
pub fn synthesize_gridded(
    bases: &[ModeBasis],
    states: &[ModalState],
    sine: &[SineCoefficient],
    length: f64,
    nx: usize,
    ny: usize,
) -> GriddedField {
    let x = periodic_grid(length, nx);
    let y = uniform_grid(0.0, 1.0, ny);
    let mut u = vec![vec![0.0; nx]; ny];
    let mut v = vec![vec![0.0; nx]; ny];
    for (b, s) in bases.iter().zip(states) {
        for (e, a) in b.eigs.iter().zip(&s.alphas) {
            if a.norm() == 0.0 {
                continue;
            }
            let smp = e.sample(&y);
            for i in 0..ny {
                for j in 0..nx {
                    let ph = C64::from_polar(1.0, b.mode.k * x[j]);
                    u[i][j] += (a * smp.phi[i] * ph).re;
                    v[i][j] += (a * smp.xi[i] * ph).re;
                }
            }
        }
    }
    for s in sine {
        for i in 0..ny {
            let val = s.value * (s.n as f64 * PI * y[i]).sin();
            for j in 0..nx {
                u[i][j] += val;
            }
        }
    }
    GriddedField { u, v }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRun {
    pub m: i64,
    pub k: f64,
    pub branches: usize,
    pub initial_norm: f64,
    pub controlled_terminal: f64,
    pub uncontrolled_terminal: f64,
    pub moment_residual: f64,
    pub condition_number: f64,
    pub regularization: f64,
    pub control_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SineRun {
    pub n: usize,
    pub initial: f64,
    /// Stepped through the time grid under the controlled evolution.
    pub terminal: f64,
    /// `e^{-nu n^2 pi^2 T}` times the initial value.
    pub exact: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub m: i64,
    pub count: usize,
    pub n_basis: usize,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub initial_norm: f64,
    pub controlled_terminal: f64,
    pub uncontrolled_terminal: f64,
    pub relative_controlled: f64,
    pub control_energy: f64,
    pub max_moment_residual: f64,
    pub controlled_below_uncontrolled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub modes: Vec<ModeRun>,
    pub sine: Vec<SineRun>,
    pub totals: Totals,
    pub projection_residual: f64,
    pub divergence: Option<f64>,
    pub divergence_cleaned: bool,
    pub control_mean: f64,
    pub control_after_horizon: f64,
    pub oracle: Vec<OracleRow>,
    #[serde(skip)]
    pub wall_clock: f64,
}

pub struct ExperimentOutput {
    pub report: ExperimentReport,
    pub spectra: Vec<ModeSpectrum>,
    pub bases: Vec<ModeBasis>,
    pub projection: Projection,
    pub controls: Vec<ModeControl>,
    pub field: ControlField,
    pub controlled: Vec<Trajectory>,
    pub uncontrolled: Vec<Trajectory>,
}

pub fn spectra_and_bases(cfg: &ExperimentConfig) -> Result<(Vec<ModeSpectrum>, Vec<ModeBasis>)> {
    let channel = cfg.channel();
    let params = params_for_sweep(&channel.modes(cfg.m_max), cfg.l_max);
    let spectra = compute_spectrum(&channel, cfg.m_max, &params)?;
    let bases = build_bases(&spectra, cfg.nu)?;
    Ok((spectra, bases))
}

pub fn oracle_rows(cfg: &ExperimentConfig, spectra: &[ModeSpectrum]) -> Result<Vec<OracleRow>> {
    if cfg.oracle_points == 0 {
        return Ok(Vec::new());
    }
    let count = cfg.l_max.min(10).min(cfg.oracle_points / 2);
    spectra
        .par_iter()
        .filter(|s| s.mode.m > 0 && s.mode.m <= 4)
        .map(|s| {
            let oracle = collocation_spectrum_oracle(s.mode, cfg.nu, cfg.oracle_points, count)?;
            let err = oracle
                .iter()
                .zip(&s.roots)
                .map(|(o, r)| ((o - r.lambda) / r.lambda).abs())
                .fold(0.0, f64::max);
            Ok(OracleRow {
                m: s.mode.m,
                count,
                n_basis: cfg.oracle_points,
                max_relative_error: err,
            })
        })
        .collect()
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let start = Instant::now();
    cfg.validate()?;
    let (spectra, bases) = spectra_and_bases(cfg)?;
    let projection = project_initial_data(cfg, &bases)?;
    let t_grid = uniform_grid(0.0, cfg.t_final, cfg.time_steps + 1);

    let controls: Vec<ModeControl> = bases
        .par_iter()
        .zip(&projection.states)
        .map(|(b, s)| {
            if cfg.control_enabled {
                synthesize_mode(
                    b,
                    &s.alphas,
                    cfg.t_control,
                    cfg.synthesis_branches,
                    cfg.regularization,
                    cfg.auto_regularize,
                )
            } else {
                Ok(ModeControl::zero(b.mode, cfg.t_control))
            }
            .map_err(|e| e.context(format!("control synthesis for m={}", b.mode.m)))
        })
        .collect::<Result<_>>()?;

    let runs: Vec<(Trajectory, Trajectory)> = bases
        .par_iter()
        .zip(&projection.states)
        .zip(&controls)
        .map(|((b, s), c)| {
            let ctl = forward_controlled(s, b, c, &t_grid)?;
            let free = forward_controlled(s, b, &NoControl, &t_grid)?;
            Ok((ctl, free))
        })
        .collect::<Result<_>>()?;
    let (controlled, uncontrolled): (Vec<_>, Vec<_>) = runs.into_iter().unzip();

    let x = periodic_grid(cfg.length, cfg.x_points);
    let t_out = uniform_grid(0.0, cfg.t_final, cfg.output_samples);
    let field = assemble_field(&controls, cfg.length, &x, &t_out)?;

    let modes: Vec<ModeRun> = bases
        .iter()
        .enumerate()
        .map(|(i, b)| ModeRun {
            m: b.mode.m,
            k: b.mode.k,
            branches: b.len(),
            initial_norm: projection.states[i].norm(),
            controlled_terminal: controlled[i].terminal_norm(),
            uncontrolled_terminal: uncontrolled[i].terminal_norm(),
            moment_residual: controls[i].residual,
            condition_number: controls[i].condition_number,
            regularization: controls[i].regularization,
            control_energy: controls[i].energy,
        })
        .collect();

    let sine = projection
        .sine
        .iter()
        .map(|s| {
            let mut value = s.value;
            for w in t_grid.windows(2) {
                value = sine_mode_invariant(s.n, value, cfg.nu, w[1] - w[0])?;
            }
            let exact = sine_mode_invariant(s.n, s.value, cfg.nu, cfg.t_final)?;
            Ok(SineRun {
                n: s.n,
                initial: s.value,
                terminal: value,
                exact,
                relative_error: if exact != 0.0 {
                    ((value - exact) / exact).abs()
                } else {
                    value.abs()
                },
            })
        })
        .collect::<Result<_>>()?;

    let sq = |f: &dyn Fn(&ModeRun) -> f64| modes.iter().map(|r| f(r).powi(2)).sum::<f64>().sqrt();
    let initial_norm = sq(&|r| r.initial_norm);
    let controlled_terminal = sq(&|r| r.controlled_terminal);
    let uncontrolled_terminal = sq(&|r| r.uncontrolled_terminal);
    let totals = Totals {
        initial_norm,
        controlled_terminal,
        uncontrolled_terminal,
        relative_controlled: if initial_norm > 0.0 {
            controlled_terminal / initial_norm
        } else {
            0.0
        },
        control_energy: field_energy(&controls, cfg.length),
        max_moment_residual: modes.iter().map(|r| r.moment_residual).fold(0.0, f64::max),
        controlled_below_uncontrolled: modes
            .iter()
            .all(|r| r.controlled_terminal <= r.uncontrolled_terminal * (1.0 + 1e-12) + 1e-300),
    };

    let oracle = oracle_rows(cfg, &spectra)?;
    let report = ExperimentReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        seed: cfg.seed,
        modes,
        sine,
        totals,
        projection_residual: projection.residual,
        divergence: projection.divergence,
        divergence_cleaned: projection.divergence_cleaned,
        control_mean: field.max_mean,
        control_after_horizon: field.max_after_horizon,
        oracle,
        wall_clock: start.elapsed().as_secs_f64(),
    };
    Ok(ExperimentOutput {
        report,
        spectra,
        bases,
        projection,
        controls,
        field,
        controlled,
        uncontrolled,
    })
}

#[derive(Serialize)]
struct TrajectoryRow {
    t: f64,
    m: i64,
    l: usize,
    re: f64,
    im: f64,
    free_re: f64,
    free_im: f64,
}

#[derive(Serialize)]
struct TerminalRow {
    m: i64,
    initial: f64,
    controlled: f64,
    uncontrolled: f64,
}

pub fn write_trajectories_csv<W: Write>(
    out: &ExperimentOutput,
    samples: usize,
    w: W,
) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for (c, f) in out.controlled.iter().zip(&out.uncontrolled) {
        let n = c.times.len();
        let stride = ((n - 1) / (samples - 1).max(1)).max(1);
        for i in (0..n).filter(|i| i % stride == 0 || *i == n - 1) {
            for (l, (a, b)) in c.states[i].iter().zip(&f.states[i]).enumerate() {
                wr.serialize(TrajectoryRow {
                    t: c.times[i],
                    m: c.mode.m,
                    l: l + 1,
                    re: a.re,
                    im: a.im,
                    free_re: b.re,
                    free_im: b.im,
                })?;
            }
        }
    }
    wr.flush()?;
    Ok(())
}

pub fn write_terminal_csv<W: Write>(report: &ExperimentReport, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in &report.modes {
        wr.serialize(TerminalRow {
            m: r.m,
            initial: r.initial_norm,
            controlled: r.controlled_terminal,
            uncontrolled: r.uncontrolled_terminal,
        })?;
    }
    wr.flush()?;
    Ok(())
}

fn create(dir: &Path, name: &str) -> Result<fs::File> {
    let path = dir.join(name);
    fs::File::create(&path).context_with(|| format!("creating {}", path.display()))
}

pub fn write_json<T: Serialize>(value: &T, dir: &Path, name: &str) -> Result<()> {
    let mut f = create(dir, name)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Writes report.json, spectrum.csv, control.csv, trajectories.csv and terminal_norms.csv.
pub fn write_artifacts(out: &ExperimentOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).context_with(|| format!("creating {}", dir.display()))?;
    write_json(&out.report, dir, "report.json")?;
    write_spectrum_csv(&out.spectra, create(dir, "spectrum.csv")?)?;
    write_control_csv(&out.field, create(dir, "control.csv")?)?;
    write_trajectories_csv(
        out,
        out.report.config.output_samples,
        create(dir, "trajectories.csv")?,
    )?;
    write_terminal_csv(&out.report, create(dir, "terminal_norms.csv")?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(initial: InitialData) -> ExperimentConfig {
        ExperimentConfig {
            m_max: 2,
            l_max: 8,
            synthesis_branches: 6,
            time_steps: 1000,
            x_points: 8,
            oracle_points: 0,
            initial_data: initial,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn defaults_and_aliases() {
        let c = ExperimentConfig::default();
        assert_eq!((c.m_max, c.l_max, c.synthesis_branches), (8, 20, 6));
        assert_eq!(c.t_control, 0.5);
        let a: ExperimentConfig =
            serde_json::from_str(r#"{"L": 3.0, "T": 2.0, "T0": 1.0}"#).unwrap();
        assert_eq!((a.length, a.t_final, a.t_control), (3.0, 2.0, 1.0));
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"bogus": 1}"#).is_err());
        c.validate().unwrap();
    }

    #[test]
    fn validation_rejects_bad_values() {
        for c in [
            ExperimentConfig {
                nu: 0.0,
                ..Default::default()
            },
            ExperimentConfig {
                t_control: 1.5,
                ..Default::default()
            },
            ExperimentConfig {
                synthesis_branches: 0,
                ..Default::default()
            },
            ExperimentConfig {
                y_points: 100,
                ..Default::default()
            },
            ExperimentConfig {
                x_points: 10,
                ..Default::default()
            },
        ] {
            assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn zero_data_gives_zero_everything() {
        let out = run_experiment(&small(InitialData::Zero)).unwrap();
        assert_eq!(out.report.totals.controlled_terminal, 0.0);
        assert_eq!(out.report.totals.control_energy, 0.0);
        assert!(out.field.values.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn single_eigenfunction_run() {
        let out = run_experiment(&small(InitialData::Eigenfunction {
            m: 1,
            l: 1,
            amplitude: 1.0,
        }))
        .unwrap();
        let r = out.report.modes.iter().find(|r| r.m == 1).unwrap();
        assert!(r.controlled_terminal <= 1e-8, "{}", r.controlled_terminal);
        let lam = out.bases.iter().find(|b| b.mode.m == 1).unwrap().lambdas[0];
        assert!(((r.uncontrolled_terminal - lam.exp()) / lam.exp()).abs() < 1e-12);
        assert!(out.report.control_after_horizon == 0.0);
        assert!(out.report.control_mean <= 1e-12);
    }

    #[test]
    fn zero_mean_enforcement() {
        let mut c = small(InitialData::Modal {
            coefficients: vec![],
            sine: vec![SineCoefficient { n: 1, value: 1.0 }],
        });
        c.enforce_zero_mean = true;
        assert!(matches!(
            run_experiment(&c),
            Err(Error::ConstraintViolation(_))
        ));
        c.enforce_zero_mean = false;
        let out = run_experiment(&c).unwrap();
        let s = &out.report.sine[0];
        assert!(s.relative_error < 1e-13);
        assert!((s.exact - (-PI * PI).exp()).abs() < 1e-16);
    }

    #[test]
    fn non_conjugate_modal_data_is_rejected() {
        let c = small(InitialData::Modal {
            coefficients: vec![
                ModalCoefficient {
                    m: 1,
                    l: 1,
                    re: 1.0,
                    im: 0.5,
                },
                ModalCoefficient {
                    m: -1,
                    l: 1,
                    re: 1.0,
                    im: 0.5,
                },
            ],
            sine: vec![],
        });
        assert!(matches!(
            run_experiment(&c),
            Err(Error::ConstraintViolation(_))
        ));
    }

    #[test]
    fn gridded_projection_of_eigenfunction_and_sine() {
        let c = small(InitialData::Zero);
        let (_, bases) = spectra_and_bases(&c).unwrap();
        let mut states = empty_states(&bases);
        set_pair(&mut states, &bases, 2, 3, C64::new(0.7, -0.2)).unwrap();
        let sine = vec![SineCoefficient { n: 1, value: 1.0 }];
        let g = synthesize_gridded(&bases, &states, &sine, c.length, 8, 1025);
        let p = project_gridded(&g, &c, &bases).unwrap();
        for (s, t) in p.states.iter().zip(&states) {
            for (a, b) in s.alphas.iter().zip(&t.alphas) {
                assert!((a - b).norm() <= 1e-8, "{a} {b}");
            }
        }
        assert!((p.sine[0].value - 1.0).abs() < 1e-8);
        assert!(p.sine[1..].iter().all(|s| s.value.abs() < 1e-8));
        assert!(p.residual <= 1e-8, "{}", p.residual);
        assert!(p.divergence.unwrap() <= DIVERGENCE_CLEAN);
        assert!(!p.divergence_cleaned);
    }

    #[test]
    fn gridded_rejects_divergent_and_leaky_fields() {
        let c = small(InitialData::Zero);
        let (_, bases) = spectra_and_bases(&c).unwrap();
        let ny = 65;
        let y = uniform_grid(0.0, 1.0, ny);
        let x = periodic_grid(c.length, 8);
        let u: Vec<Vec<f64>> = (0..ny)
            .map(|_| x.iter().map(|x| x.cos()).collect())
            .collect();
        let v: Vec<Vec<f64>> = vec![vec![0.0; 8]; ny];
        let div = GriddedField { u, v };
        assert!(matches!(
            project_gridded(&div, &c, &bases),
            Err(Error::ConstraintViolation(_))
        ));
        let leaky = GriddedField {
            u: vec![vec![0.0; 8]; ny],
            v: y.iter().map(|_| vec![1.0; 8]).collect(),
        };
        assert!(matches!(
            project_gridded(&leaky, &c, &bases),
            Err(Error::ConstraintViolation(_))
        ));
    }

    #[test]
    fn random_data_is_seeded() {
        let c = small(InitialData::RandomModal {
            m_max: 2,
            l_max: 4,
            sine_modes: 2,
        });
        let (_, bases) = spectra_and_bases(&c).unwrap();
        let a = project_initial_data(&c, &bases).unwrap();
        let b = project_initial_data(&c, &bases).unwrap();
        assert_eq!(a, b);
        let d = project_initial_data(
            &ExperimentConfig {
                seed: 1,
                ..c.clone()
            },
            &bases,
        )
        .unwrap();
        assert_ne!(a, d);
        let i = mode_position(&bases, 2).unwrap();
        let j = mode_position(&bases, -2).unwrap();
        for (x, y) in a.states[i].alphas.iter().zip(&a.states[j].alphas) {
            assert_eq!(*x, y.conj());
        }
    }
}
