//! Small quadrature and interpolation helpers shared by the solvers.

use std::f64::consts::PI;

/// Gauss–Legendre nodes and weights on [-1, 1], nodes ascending.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0, "need at least one Gauss node");
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = (n + 1) / 2;
    for i in 0..m {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // three-term recurrence for P_n and its derivative
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { z } else { p1 };
            let pnm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * pn - pnm1) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

/// Gauss–Legendre rule mapped to [a, b].
pub fn gauss_legendre_on(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre(n);
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    (
        x.iter().map(|xi| c + h * xi).collect(),
        w.iter().map(|wi| h * wi).collect(),
    )
}

/// Weights of ∫₀^Δ e^{-(Δ-τ)} H(τ) dτ for H linear between its end values:
/// returns (a, b) with the integral equal to a·H(0) + b·H(Δ).
///
/// a + b = 1 - e^{-Δ} holds to rounding, which is what makes sweeps exact on
/// constants.
pub fn exp_linear_weights(delta: f64) -> (f64, f64) {
    if delta < 1e-3 {
        let d = delta;
        let a = d * (0.5 - d * (1.0 / 3.0 - d * (0.125 - d / 30.0)));
        let b = d * (0.5 - d * (1.0 / 6.0 - d * (1.0 / 24.0 - d / 120.0)));
        return (a, b);
    }
    let e1 = -(-delta).exp_m1();
    let b = 1.0 - e1 / delta;
    let a = e1 - b;
    (a, b)
}

/// Least-squares line through (x, y): returns (slope, intercept, slope_stderr, r²).
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (xi, yi) in x.iter().zip(y) {
        sxx += (xi - mx) * (xi - mx);
        sxy += (xi - mx) * (yi - my);
        syy += (yi - my) * (yi - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse = (syy - slope * sxy).max(0.0);
    let stderr = if x.len() > 2 {
        (sse / (n - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    (slope, intercept, stderr, r2)
}

/// Locate `x` in the ascending `grid`: returns (i, t) with x ≈ (1-t)·g[i] + t·g[i+1].
/// Values outside are clamped to the end intervals.
pub fn locate(grid: &[f64], x: f64) -> (usize, f64) {
    let n = grid.len();
    if n == 1 {
        return (0, 0.0);
    }
    let i = grid.partition_point(|&g| g <= x).clamp(1, n - 1) - 1;
    let t = ((x - grid[i]) / (grid[i + 1] - grid[i])).clamp(0.0, 1.0);
    (i, t)
}

/// Four-point Lagrange weights on a non-uniform grid, stencil clamped at the
/// ends. Returns the first stencil index and the weights.
pub fn cubic_weights(grid: &[f64], x: f64) -> (usize, [f64; 4]) {
    let n = grid.len();
    assert!(n >= 4, "cubic interpolation needs four nodes");
    let (i, _) = locate(grid, x);
    let s = i.saturating_sub(1).min(n - 4);
    let p = [grid[s], grid[s + 1], grid[s + 2], grid[s + 3]];
    let mut w = [1.0; 4];
    for j in 0..4 {
        for k in 0..4 {
            if j != k {
                w[j] *= (x - p[k]) / (p[j] - p[k]);
            }
        }
    }
    (s, w)
}
