//! Independent eigenvalue oracle: Legendre-Galerkin discretization of the clamped fourth-order
//! problem
//!
//! ```text
//! nu (xi'''' - 2 k^2 xi'' + k^4 xi) = lambda (xi'' - k^2 xi),  xi = xi' = 0 at y = 0, 1.
//! ```
//!
//! The trial space is spanned by `P_n - 2(2n+5)/(2n+7) P_{n+2} + (2n+3)/(2n+7) P_{n+4}`, each of
//! which satisfies both clamped conditions.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::channel::ModeIndex;
use crate::error::{Error, Result};
use crate::quadrature::gauss_legendre;

/// Values, first and second derivatives of `P_0..=P_n` at `x`.
fn legendre_table(n: usize, x: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut p = vec![0.0; n + 1];
    let mut dp = vec![0.0; n + 1];
    let mut ddp = vec![0.0; n + 1];
    p[0] = 1.0;
    if n >= 1 {
        p[1] = x;
        dp[1] = 1.0;
    }
    for j in 1..n {
        let jf = j as f64;
        p[j + 1] = ((2.0 * jf + 1.0) * x * p[j] - jf * p[j - 1]) / (jf + 1.0);
        dp[j + 1] = dp[j - 1] + (2.0 * jf + 1.0) * p[j];
        ddp[j + 1] = ddp[j - 1] + (2.0 * jf + 1.0) * dp[j];
    }
    (p, dp, ddp)
}

/// The `count` eigenvalues of largest real part for mode `k`, using `n_basis` basis functions.
pub fn collocation_spectrum_oracle(
    mode: ModeIndex,
    nu: f64,
    n_basis: usize,
    count: usize,
) -> Result<Vec<f64>> {
    if n_basis < 64 {
        return Err(Error::InvalidConfig(format!(
            "oracle needs at least 64 basis functions, got {n_basis}"
        )));
    }
    if count == 0 || count > n_basis / 2 {
        return Err(Error::InvalidConfig(format!(
            "oracle eigenvalue count {count} out of range for {n_basis} basis functions"
        )));
    }
    if !(nu > 0.0) {
        return Err(Error::InvalidConfig("viscosity must be positive".into()));
    }
    let k2 = mode.k * mode.k;
    let nq = n_basis + 6;
    let (x, w) = gauss_legendre(nq);
    // Values on y in [0, 1]: d/dy = 2 d/dx, dy = dx / 2.
    let mut b0 = DMatrix::<f64>::zeros(nq, n_basis);
    let mut b1 = DMatrix::<f64>::zeros(nq, n_basis);
    let mut b2 = DMatrix::<f64>::zeros(nq, n_basis);
    for q in 0..nq {
        let (p, dp, ddp) = legendre_table(n_basis + 3, x[q]);
        for n in 0..n_basis {
            let nf = n as f64;
            let a = -2.0 * (2.0 * nf + 5.0) / (2.0 * nf + 7.0);
            let b = (2.0 * nf + 3.0) / (2.0 * nf + 7.0);
            b0[(q, n)] = p[n] + a * p[n + 2] + b * p[n + 4];
            b1[(q, n)] = 2.0 * (dp[n] + a * dp[n + 2] + b * dp[n + 4]);
            b2[(q, n)] = 4.0 * (ddp[n] + a * ddp[n + 2] + b * ddp[n + 4]);
        }
    }
    let sw: Vec<f64> = w.iter().map(|v| (0.5 * v).sqrt()).collect();
    let weight = |m: &mut DMatrix<f64>| {
        for q in 0..nq {
            m.row_mut(q).scale_mut(sw[q]);
        }
    };
    let mut l_op = &b2 - &b0 * k2;
    weight(&mut l_op);
    let mut w1 = b1.clone();
    weight(&mut w1);
    let mut w0 = b0;
    weight(&mut w0);
    let mut a = l_op.tr_mul(&l_op) * nu;
    let mut m = w1.tr_mul(&w1) + w0.tr_mul(&w0) * k2;

    // Diagonal equilibration keeps the Cholesky factor of A accurate.
    let s: Vec<f64> = (0..n_basis).map(|i| 1.0 / a[(i, i)].sqrt()).collect();
    for i in 0..n_basis {
        for j in 0..n_basis {
            a[(i, j)] *= s[i] * s[j];
            m[(i, j)] *= s[i] * s[j];
        }
    }
    let chol = a.cholesky().ok_or_else(|| {
        Error::NumericalBreakdown("oracle stiffness matrix is not positive definite".into())
    })?;
    let l = chol.l();
    let linv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::NumericalBreakdown("singular Cholesky factor".into()))?;
    let mut c = &linv * m * linv.transpose();
    c = (&c + c.transpose()) * 0.5;
    // A x = -lambda M x  <=>  L^{-1} M L^{-T} y = theta y with theta = -1 / lambda.
    let eig = SymmetricEigen::new(c);
    let mut thetas: Vec<f64> = eig
        .eigenvalues
        .iter()
        .copied()
        .filter(|t| *t > 0.0)
        .collect();
    thetas.sort_by(|a, b| b.total_cmp(a));
    if thetas.len() < count {
        return Err(Error::NumericalBreakdown(format!(
            "oracle produced only {} positive eigenvalues",
            thetas.len()
        )));
    }
    Ok(thetas.iter().take(count).map(|t| -1.0 / t).collect())
}
