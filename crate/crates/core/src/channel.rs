//! Physical parameters of the periodic channel and Fourier mode indexing.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Viscosity, period and the two time horizons of the control problem.
///
/// The control acts on `(0, t_control)` and vanishes on `[t_control, t_final)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub nu: f64,
    pub length: f64,
    pub t_final: f64,
    pub t_control: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            nu: 1.0,
            length: 2.0 * PI,
            t_final: 1.0,
            t_control: 0.5,
        }
    }
}

impl ChannelConfig {
    pub fn new(nu: f64, length: f64, t_final: f64, t_control: f64) -> Result<Self> {
        let cfg = ChannelConfig {
            nu,
            length,
            t_final,
            t_control,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu.is_finite() && self.nu > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "viscosity must be positive, got {}",
                self.nu
            )));
        }
        if !(self.length.is_finite() && self.length > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "period must be positive, got {}",
                self.length
            )));
        }
        if !(self.t_control.is_finite() && self.t_control > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "control horizon must be positive, got {}",
                self.t_control
            )));
        }
        if !(self.t_final.is_finite() && self.t_final > self.t_control) {
            return Err(Error::InvalidConfig(format!(
                "final time {} must exceed the control horizon {}",
                self.t_final, self.t_control
            )));
        }
        Ok(())
    }

    pub fn mode(&self, m: i64) -> Result<ModeIndex> {
        ModeIndex::new(m, self.length)
    }

    /// Modes `-m_max..=-1, 1..=m_max` in increasing order of `m`.
    pub fn modes(&self, m_max: usize) -> Vec<ModeIndex> {
        let m_max = m_max as i64;
        (-m_max..=m_max)
            .filter(|&m| m != 0)
            .map(|m| ModeIndex::from_parts(m, self.length))
            .collect()
    }
}

/// A nonzero Fourier mode `e^{ikx}` with `k = 2 pi m / L`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeIndex {
    pub m: i64,
    pub k: f64,
}

impl ModeIndex {
    pub fn new(m: i64, length: f64) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidConfig(
                "mode m = 0 has no boundary-controlled spectrum".into(),
            ));
        }
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "period must be positive, got {length}"
            )));
        }
        Ok(Self::from_parts(m, length))
    }

    pub(crate) fn from_parts(m: i64, length: f64) -> Self {
        ModeIndex {
            m,
            k: 2.0 * PI * m as f64 / length,
        }
    }

    /// A mode with a prescribed wavenumber (tests and sweeps over `k`).
    pub fn with_wavenumber(m: i64, k: f64) -> Self {
        ModeIndex { m, k }
    }

    pub fn conjugate(&self) -> ModeIndex {
        ModeIndex {
            m: -self.m,
            k: -self.k,
        }
    }
}

/// Eigenvalue `-nu pi^2 n^2` of the `k = 0` sine family.
pub fn zero_mode_eigenvalue(n: usize, nu: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::Domain("sine family index starts at n = 1"));
    }
    let n = n as f64;
    Ok(-nu * PI * PI * n * n)
}
