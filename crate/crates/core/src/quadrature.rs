//! Quadrature rules: composite Simpson on uniform grids and Gauss-Legendre.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// `n` equispaced points on `[a, b]`, endpoints included.
pub fn uniform_grid(a: f64, b: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2);
    let h = (b - a) / (n - 1) as f64;
    (0..n)
        .map(|i| if i == n - 1 { b } else { a + h * i as f64 })
        .collect()
}

/// Composite Simpson weights for `n` uniform points on an interval of width `width`.
pub fn simpson_weights(n: usize, width: f64) -> Result<Vec<f64>> {
    if n < 3 || n.is_multiple_of(2) {
        return Err(Error::Domain(
            "Simpson's rule needs an odd number (>= 3) of points",
        ));
    }
    let h = width / (n - 1) as f64;
    Ok((0..n)
        .map(|i| {
            let c = if i == 0 || i == n - 1 {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            c * h / 3.0
        })
        .collect())
}

pub fn simpson(values: &[f64], width: f64) -> Result<f64> {
    let w = simpson_weights(values.len(), width)?;
    Ok(values.iter().zip(&w).map(|(v, w)| v * w).sum())
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`, nodes increasing.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        // Tricomi initial guess, then Newton on P_n.
        let mut x = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for j in 1..n {
        let jf = j as f64;
        let p2 = ((2.0 * jf + 1.0) * x * p1 - jf * p0) / (jf + 1.0);
        p0 = p1;
        p1 = p2;
    }
    let nf = n as f64;
    (p1, nf * (x * p1 - p0) / (x * x - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_is_exact_for_cubics() {
        let y = uniform_grid(0.0, 2.0, 11);
        let v: Vec<f64> = y.iter().map(|t| t * t * t - t + 1.0).collect();
        let exact = 4.0 - 2.0 + 2.0;
        assert!((simpson(&v, 2.0).unwrap() - exact).abs() < 1e-13);
        assert!(simpson(&v[..10], 2.0).is_err());
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        for n in [1, 2, 5, 16, 61] {
            let (x, w) = gauss_legendre(n);
            let total: f64 = w.iter().sum();
            assert!((total - 2.0).abs() < 1e-13, "n={n}");
            // degree 2n-1 is exact
            let deg = 2 * n - 2;
            let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32)).sum();
            assert!((s - 2.0 / (deg as f64 + 1.0)).abs() < 1e-12, "n={n}");
            assert!(x.windows(2).all(|p| p[0] < p[1]));
        }
    }

    #[test]
    fn gauss_legendre_large_order() {
        let (x, w) = gauss_legendre(520);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * (3.0 * x).cos()).sum();
        assert!((s - 2.0 * 3f64.sin() / 3.0).abs() < 1e-13);
    }
}
