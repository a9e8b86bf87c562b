//! Interior (hydrodynamic) fields: harmonic extensions, the heat equation and
//! the first-order corrector U₁ = Ū₁ − w·∇U₀.
//!
//! Disk, annulus and axisymmetric ball data go through exact modal solves.
//! Pointwise data on the disk can also use a second-order finite-difference
//! solver on a cell-centred polar grid (Fourier in θ, tridiagonal in r), which
//! is also the spatial discretization of the Crank–Nicolson heat solver.

use crate::geometry::{Geometry, Vec3};
use crate::quadrature::{gauss_legendre, locate};
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};
use std::sync::Arc;
use thiserror::Error;

/// First positive zero of J₀.
pub const J0_FIRST_ZERO: f64 = 2.404_825_557_695_773;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FluidError {
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("{0} is not supported")]
    Unsupported(String),
    #[error("missing input: {0}")]
    Missing(String),
}

/// Bessel J₀ from its integral representation; the periodic trapezoid rule
/// converges geometrically, 64 points reach machine precision for |x| ≲ 30.
pub fn bessel_j0(x: f64) -> f64 {
    let n = 64 + (2.0 * x.abs()) as usize;
    (0..n).map(|k| (x * (TAU * (k as f64 + 0.5) / n as f64).sin()).cos()).sum::<f64>() / n as f64
}

pub type BoundaryFn = Arc<dyn Fn(&Vec3) -> f64 + Send + Sync>;
pub type TimeBoundaryFn = Arc<dyn Fn(f64, &Vec3) -> f64 + Send + Sync>;

pub struct DirichletProblem {
    pub geometry: Geometry,
    /// D(x₀) on every boundary component. On the ball it is sampled on the
    /// xz meridian and assumed axisymmetric.
    pub boundary: BoundaryFn,
}

/// u = a₀ + Σ (r/R)^k (a_k cos kθ + b_k sin kθ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonicDisk {
    pub radius: f64,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

/// Real Fourier coefficients of uniform samples f(2πa/N); the Nyquist term is
/// halved so the expansion stays real and interpolating.
fn fourier_coefficients(samples: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len();
    let mut buf: Vec<Complex64> = samples.iter().map(|v| Complex64::new(*v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let kmax = n / 2;
    let mut c = vec![0.0; kmax + 1];
    let mut s = vec![0.0; kmax + 1];
    c[0] = buf[0].re / n as f64;
    for k in 1..=kmax {
        let scale = if 2 * k == n { 1.0 } else { 2.0 } / n as f64;
        c[k] = buf[k].re * scale;
        s[k] = -buf[k].im * scale;
    }
    if n % 2 == 0 {
        s[kmax] = 0.0;
    }
    (c, s)
}

impl HarmonicDisk {
    /// From samples of the datum at θ_a = 2πa/N.
    pub fn from_samples(radius: f64, samples: &[f64]) -> Self {
        let (cos, sin) = fourier_coefficients(samples);
        HarmonicDisk { radius, cos, sin }
    }

    pub fn from_fn(radius: f64, d: impl Fn(f64) -> f64, n_samples: usize) -> Self {
        let s: Vec<f64> = (0..n_samples).map(|a| d(TAU * a as f64 / n_samples as f64)).collect();
        Self::from_samples(radius, &s)
    }

    pub fn value(&self, x: &Vec3) -> f64 {
        let rho = x.x.hypot(x.y) / self.radius;
        let th = x.y.atan2(x.x);
        let mut v = self.cos[0];
        let mut p = 1.0;
        for k in 1..self.cos.len() {
            p *= rho;
            let (s, c) = (k as f64 * th).sin_cos();
            v += p * (self.cos[k] * c + self.sin[k] * s);
        }
        v
    }

    pub fn gradient(&self, x: &Vec3) -> Vec3 {
        // ∇ of Re((a_k − i b_k) z^k)/R^k is k (a_k − i b_k) z^{k−1}/R^k, conjugated
        let z = Complex64::new(x.x, x.y) / self.radius;
        let mut g = Complex64::new(0.0, 0.0);
        let mut zp = Complex64::new(1.0, 0.0);
        for k in 1..self.cos.len() {
            g += Complex64::new(self.cos[k], -self.sin[k]) * zp * k as f64;
            zp *= z;
        }
        let g = g / self.radius;
        Vec3::new(g.re, -g.im, 0.0)
    }
}

/// u = A₀ + B₀ ln(r/R) + Σ ((r/R)^k (a_k…) + (r_in/r)^k (b_k…)).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonicAnnulus {
    pub inner_radius: f64,
    pub radius: f64,
    /// Per mode k: [cos-outer, cos-inner, sin-outer, sin-inner] amplitudes.
    pub modes: Vec<[f64; 4]>,
    pub log_coefficient: f64,
}

impl HarmonicAnnulus {
    pub fn from_samples(inner_radius: f64, radius: f64, outer: &[f64], inner: &[f64]) -> Result<Self, FluidError> {
        if outer.len() != inner.len() {
            return Err(FluidError::Invalid("inner and outer sample counts differ".into()));
        }
        let (co, so) = fourier_coefficients(outer);
        let (ci, si) = fourier_coefficients(inner);
        let ln = (inner_radius / radius).ln();
        let b0 = (ci[0] - co[0]) / ln;
        let mut modes = vec![[co[0], 0.0, 0.0, 0.0]];
        let q = inner_radius / radius;
        for k in 1..co.len() {
            // [1 q^k; q^k 1] [outer; inner] = [data_outer; data_inner]
            let qk = q.powi(k as i32);
            let det = 1.0 - qk * qk;
            let solve = |o: f64, i: f64| ((o - qk * i) / det, (i - qk * o) / det);
            let (a_o, a_i) = solve(co[k], ci[k]);
            let (b_o, b_i) = solve(so[k], si[k]);
            modes.push([a_o, a_i, b_o, b_i]);
        }
        Ok(HarmonicAnnulus { inner_radius, radius, modes, log_coefficient: b0 })
    }

    pub fn value(&self, x: &Vec3) -> f64 {
        let r = x.x.hypot(x.y);
        let th = x.y.atan2(x.x);
        let mut v = self.modes[0][0] + self.log_coefficient * (r / self.radius).ln();
        for (k, m) in self.modes.iter().enumerate().skip(1) {
            let po = (r / self.radius).powi(k as i32);
            let pi = (self.inner_radius / r).powi(k as i32);
            let (s, c) = (k as f64 * th).sin_cos();
            v += (m[0] * po + m[1] * pi) * c + (m[2] * po + m[3] * pi) * s;
        }
        v
    }

    pub fn gradient(&self, x: &Vec3) -> Vec3 {
        let r = x.x.hypot(x.y);
        let th = x.y.atan2(x.x);
        let mut dr = self.log_coefficient / r;
        let mut dth = 0.0;
        for (k, m) in self.modes.iter().enumerate().skip(1) {
            let kf = k as f64;
            let po = (r / self.radius).powi(k as i32);
            let pi = (self.inner_radius / r).powi(k as i32);
            let (s, c) = (kf * th).sin_cos();
            dr += kf / r * ((m[0] * po - m[1] * pi) * c + (m[2] * po - m[3] * pi) * s);
            dth += kf * (-(m[0] * po + m[1] * pi) * s + (m[2] * po + m[3] * pi) * c);
        }
        let (s, c) = th.sin_cos();
        Vec3::new(c * dr - s * dth / r, s * dr + c * dth / r, 0.0)
    }
}

/// Axisymmetric harmonic function on the ball: Σ c_l (r/R)^l P_l(cos θ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonicBall {
    pub radius: f64,
    pub legendre: Vec<f64>,
}

/// P_0..P_n(μ) and their derivatives.
fn legendre_table(n: usize, mu: f64) -> (Vec<f64>, Vec<f64>) {
    let mut p = vec![0.0; n + 1];
    let mut dp = vec![0.0; n + 1];
    p[0] = 1.0;
    if n >= 1 {
        p[1] = mu;
        dp[1] = 1.0;
    }
    for l in 1..n {
        let lf = l as f64;
        p[l + 1] = ((2.0 * lf + 1.0) * mu * p[l] - lf * p[l - 1]) / (lf + 1.0);
        dp[l + 1] = dp[l - 1] + (2.0 * lf + 1.0) * p[l];
    }
    (p, dp)
}

impl HarmonicBall {
    /// `d` is the datum as a function of the polar angle.
    pub fn from_fn(radius: f64, d: impl Fn(f64) -> f64, l_max: usize) -> Self {
        let (mu, w) = gauss_legendre(2 * (l_max + 1));
        let mut c = vec![0.0; l_max + 1];
        for (m, wm) in mu.iter().zip(&w) {
            let (p, _) = legendre_table(l_max, *m);
            let f = d(m.acos());
            for l in 0..=l_max {
                c[l] += (2 * l + 1) as f64 / 2.0 * wm * f * p[l];
            }
        }
        HarmonicBall { radius, legendre: c }
    }

    /// From datum samples at the polar angles acos(μ_j), μ_j the n-point Gauss
    /// nodes (ascending); l_max = n/2 − 1 keeps the projection exact.
    pub fn from_gauss_samples(radius: f64, samples: &[f64]) -> Self {
        let n = samples.len();
        let l_max = (n / 2).max(1) - 1;
        let (mu, w) = gauss_legendre(n);
        let mut c = vec![0.0; l_max + 1];
        for ((m, wm), f) in mu.iter().zip(&w).zip(samples) {
            let (p, _) = legendre_table(l_max, *m);
            for l in 0..=l_max {
                c[l] += (2 * l + 1) as f64 / 2.0 * wm * f * p[l];
            }
        }
        HarmonicBall { radius, legendre: c }
    }

    pub fn value(&self, x: &Vec3) -> f64 {
        let r = x.norm();
        let mu = if r > 0.0 { x.z / r } else { 1.0 };
        let (p, _) = legendre_table(self.legendre.len() - 1, mu);
        let rho = r / self.radius;
        let mut pow = 1.0;
        let mut v = 0.0;
        for (l, c) in self.legendre.iter().enumerate() {
            if l > 0 {
                pow *= rho;
            }
            v += c * pow * p[l];
        }
        v
    }

    pub fn gradient(&self, x: &Vec3) -> Vec3 {
        let r = x.norm();
        let big_r = self.radius;
        if r < 1e-300 {
            let c1 = self.legendre.get(1).copied().unwrap_or(0.0);
            return Vec3::new(0.0, 0.0, c1 / big_r);
        }
        let mu = x.z / r;
        let (p, dp) = legendre_table(self.legendre.len() - 1, mu);
        let (mut d_r, mut d_mu) = (0.0, 0.0);
        // r^{l−1}/R^l
        let mut pw = 1.0 / r;
        for (l, c) in self.legendre.iter().enumerate() {
            if l > 0 {
                d_r += c * l as f64 * pw * p[l];
                d_mu += c * pw * dp[l];
            }
            pw *= r / big_r;
        }
        let e = x / r;
        // ∇μ = (e_z − μ e)/r, with the 1/r already in d_mu's power of r
        e * d_r + (Vec3::new(0.0, 0.0, 1.0) - e * mu) * d_mu
    }
}

/// Cell-centred polar grid r_i = (i + ½)h, with the last node on r = R.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarMesh {
    pub radius: f64,
    pub r: Vec<f64>,
    pub n_theta: usize,
}

impl PolarMesh {
    pub fn new(radius: f64, n_r: usize, n_theta: usize) -> Result<Self, FluidError> {
        if n_r < 2 || n_theta < 4 {
            return Err(FluidError::Invalid("polar mesh needs n_r >= 2 and n_theta >= 4".into()));
        }
        let h = radius / (n_r as f64 - 0.5);
        let mut r: Vec<f64> = (0..n_r).map(|i| (i as f64 + 0.5) * h).collect();
        r[n_r - 1] = radius;
        Ok(PolarMesh { radius, r, n_theta })
    }

    pub fn h(&self) -> f64 {
        self.r[1] - self.r[0]
    }

    pub fn theta(&self, a: usize) -> f64 {
        TAU * a as f64 / self.n_theta as f64
    }

    pub fn node(&self, i: usize, a: usize) -> Vec3 {
        let (s, c) = self.theta(a).sin_cos();
        Vec3::new(self.r[i] * c, self.r[i] * s, 0.0)
    }

    /// Tridiagonal rows (sub, diag, sup) of the mode-m Laplacian at interior
    /// nodes 0..n−1; the last entry's `sup` multiplies the boundary value.
    fn laplacian_rows(&self, m: f64) -> Vec<(f64, f64, f64)> {
        let h = self.h();
        let n = self.r.len() - 1;
        (0..n)
            .map(|i| {
                let ri = self.r[i];
                let rm = if i == 0 { 0.0 } else { ri - 0.5 * h };
                let rp = ri + 0.5 * h;
                let lo = rm / (ri * h * h);
                let hi = rp / (ri * h * h);
                (lo, -(lo + hi) - m * m / (ri * ri), hi)
            })
            .collect()
    }
}

/// Thomas algorithm for a complex tridiagonal system.
fn thomas(sub: &[Complex64], diag: &[Complex64], sup: &[Complex64], rhs: &mut [Complex64]) {
    let n = diag.len();
    let mut c = vec![Complex64::new(0.0, 0.0); n];
    let mut beta = diag[0];
    c[0] = sup[0] / beta;
    rhs[0] /= beta;
    for i in 1..n {
        beta = diag[i] - sub[i] * c[i - 1];
        c[i] = sup[i] / beta;
        rhs[i] = (rhs[i] - sub[i] * rhs[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        let next = rhs[i + 1];
        rhs[i] -= c[i] * next;
    }
}

/// Nodal field on a polar mesh (node-major: i·n_theta + a).
#[derive(Debug, Clone, PartialEq)]
pub struct PolarField {
    pub mesh: PolarMesh,
    pub values: Vec<f64>,
}

impl PolarField {
    /// Linear in r (through the centre by reflection), linear in θ.
    pub fn value(&self, x: &Vec3) -> f64 {
        let m = &self.mesh;
        let nt = m.n_theta;
        let r = x.x.hypot(x.y).min(m.radius);
        let th = x.y.atan2(x.x);
        let at = |i: usize, th: f64| {
            let u = (th / TAU * nt as f64).rem_euclid(nt as f64);
            let b = (u.floor() as usize).min(nt - 1);
            let t = u - b as f64;
            (1.0 - t) * self.values[i * nt + b] + t * self.values[i * nt + (b + 1) % nt]
        };
        if r < m.r[0] {
            let w = 0.5 * (m.r[0] + r) / m.r[0];
            return w * at(0, th) + (1.0 - w) * at(0, th + PI);
        }
        let (i, t) = locate(&m.r, r);
        if t == 0.0 {
            at(i, th)
        } else {
            (1.0 - t) * at(i, th) + t * at(i + 1, th)
        }
    }

    /// Central differences of the interpolant at scale h/2.
    pub fn gradient(&self, x: &Vec3) -> Vec3 {
        let d = 0.5 * self.mesh.h();
        let mut g = Vec3::zeros();
        for axis in 0..2 {
            let mut e = Vec3::zeros();
            e[axis] = d;
            let (xp, xm) = (x + e, x - e);
            let lim = self.mesh.radius;
            let (xp, sp) = if xp.norm() > lim { (*x, 0.0) } else { (xp, d) };
            let (xm, sm) = if xm.norm() > lim { (*x, 0.0) } else { (xm, d) };
            g[axis] = (self.value(&xp) - self.value(&xm)) / (sp + sm);
        }
        g
    }
}

fn forward_modes(values: &[f64], nt: usize) -> Vec<Vec<Complex64>> {
    let fft = FftPlanner::new().plan_fft_forward(nt);
    values
        .chunks(nt)
        .map(|row| {
            let mut b: Vec<Complex64> = row.iter().map(|v| Complex64::new(*v, 0.0)).collect();
            fft.process(&mut b);
            b
        })
        .collect()
}

fn inverse_modes(rows: Vec<Vec<Complex64>>, nt: usize) -> Vec<f64> {
    let fft = FftPlanner::new().plan_fft_inverse(nt);
    rows.into_iter()
        .flat_map(|mut row| {
            fft.process(&mut row);
            row.into_iter().map(move |z| z.re / nt as f64)
        })
        .collect()
}

fn mode_number(d: usize, nt: usize) -> f64 {
    d.min(nt - d) as f64
}

/// Finite-difference Poisson solve Δu = f on the disk with Dirichlet data.
pub fn poisson_disk_fd(
    mesh: &PolarMesh,
    source: impl Fn(&Vec3) -> f64,
    boundary: impl Fn(&Vec3) -> f64,
) -> PolarField {
    let nt = mesh.n_theta;
    let nr = mesh.r.len();
    let mut vals = vec![0.0; nr * nt];
    for i in 0..nr {
        for a in 0..nt {
            let x = mesh.node(i, a);
            vals[i * nt + a] = if i == nr - 1 { boundary(&x) } else { source(&x) };
        }
    }
    let hat = forward_modes(&vals, nt);
    let n = nr - 1;
    let solved: Vec<Vec<Complex64>> = (0..nt)
        .into_par_iter()
        .map(|d| {
            let rows = mesh.laplacian_rows(mode_number(d, nt));
            let sub: Vec<Complex64> = rows.iter().map(|r| Complex64::new(r.0, 0.0)).collect();
            let diag: Vec<Complex64> = rows.iter().map(|r| Complex64::new(r.1, 0.0)).collect();
            let sup: Vec<Complex64> = rows.iter().map(|r| Complex64::new(r.2, 0.0)).collect();
            let mut rhs: Vec<Complex64> = (0..n).map(|i| hat[i][d]).collect();
            rhs[n - 1] -= sup[n - 1] * hat[n][d];
            thomas(&sub, &diag, &sup, &mut rhs);
            rhs.push(hat[n][d]);
            rhs
        })
        .collect();
    let rows: Vec<Vec<Complex64>> = (0..nr).map(|i| (0..nt).map(|d| solved[d][i]).collect()).collect();
    PolarField { mesh: mesh.clone(), values: inverse_modes(rows, nt) }
}

#[derive(Debug, Clone)]
pub enum InteriorField {
    Disk(HarmonicDisk),
    Annulus(HarmonicAnnulus),
    Ball(HarmonicBall),
    Grid(PolarField),
}

impl InteriorField {
    pub fn constant(geometry: &Geometry, c: f64) -> Self {
        match geometry {
            Geometry::Ball { radius } => InteriorField::Ball(HarmonicBall { radius: *radius, legendre: vec![c] }),
            _ => InteriorField::Disk(HarmonicDisk { radius: geometry.radius(), cos: vec![c], sin: vec![0.0] }),
        }
    }

    pub fn value(&self, x: &Vec3) -> f64 {
        match self {
            InteriorField::Disk(h) => h.value(x),
            InteriorField::Annulus(h) => h.value(x),
            InteriorField::Ball(h) => h.value(x),
            InteriorField::Grid(f) => f.value(x),
        }
    }

    pub fn gradient(&self, x: &Vec3) -> Vec3 {
        match self {
            InteriorField::Disk(h) => h.gradient(x),
            InteriorField::Annulus(h) => h.gradient(x),
            InteriorField::Ball(h) => h.gradient(x),
            InteriorField::Grid(f) => f.gradient(x),
        }
    }
}

/// Modal harmonic extension with `n_samples` boundary samples per circle
/// (Gauss points in cos θ on the ball: l_max = n_samples/2).
pub fn laplace_solve(problem: &DirichletProblem, n_samples: usize) -> Result<InteriorField, FluidError> {
    if n_samples < 2 {
        return Err(FluidError::Invalid("need at least two boundary samples".into()));
    }
    let d = &problem.boundary;
    Ok(match problem.geometry {
        Geometry::Disk { radius } => {
            InteriorField::Disk(HarmonicDisk::from_fn(radius, |t| d(&Vec3::new(radius * t.cos(), radius * t.sin(), 0.0)), n_samples))
        }
        Geometry::Annulus { inner_radius, radius } => {
            let sample = |rr: f64| -> Vec<f64> {
                (0..n_samples)
                    .map(|a| {
                        let t = TAU * a as f64 / n_samples as f64;
                        d(&Vec3::new(rr * t.cos(), rr * t.sin(), 0.0))
                    })
                    .collect()
            };
            InteriorField::Annulus(HarmonicAnnulus::from_samples(inner_radius, radius, &sample(radius), &sample(inner_radius))?)
        }
        Geometry::Ball { radius } => InteriorField::Ball(HarmonicBall::from_fn(
            radius,
            |t| d(&Vec3::new(radius * t.sin(), 0.0, radius * t.cos())),
            n_samples / 2,
        )),
    })
}

/// Finite-difference fallback for pointwise data (disk only).
pub fn laplace_solve_fd(problem: &DirichletProblem, mesh: &PolarMesh) -> Result<InteriorField, FluidError> {
    match problem.geometry {
        Geometry::Disk { radius } if (radius - mesh.radius).abs() <= 1e-12 * radius => {
            Ok(InteriorField::Grid(poisson_disk_fd(mesh, |_| 0.0, |x| (problem.boundary)(x))))
        }
        Geometry::Disk { .. } => Err(FluidError::Invalid("mesh radius differs from the disk".into())),
        _ => Err(FluidError::Unsupported("finite-difference Laplace solve off the disk".into())),
    }
}

pub struct HeatProblem {
    pub geometry: Geometry,
    pub boundary: TimeBoundaryFn,
    pub initial: BoundaryFn,
    pub diffusivity: f64,
}

impl HeatProblem {
    /// Limit-equation diffusivity for isotropic scattering: 1/3 in 3D, 1/2 for S¹ velocities.
    pub fn kinetic_diffusivity(geometry: &Geometry) -> f64 {
        1.0 / geometry.dim() as f64
    }
}

#[derive(Debug, Clone)]
pub struct HeatSnapshot {
    pub t: f64,
    pub field: PolarField,
}

/// Crank–Nicolson in time, per Fourier mode in θ; snapshots at `times`.
/// The first two steps are taken as four implicit-Euler half steps so rough
/// initial data do not leave undamped oscillations in the stiff modes.
pub fn heat_solve(problem: &HeatProblem, mesh: &PolarMesh, dt: f64, times: &[f64]) -> Result<Vec<HeatSnapshot>, FluidError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(FluidError::Invalid(format!("time step must be positive, got {dt}")));
    }
    if !(problem.diffusivity > 0.0) {
        return Err(FluidError::Invalid("diffusivity must be positive".into()));
    }
    match problem.geometry {
        Geometry::Disk { radius } if (radius - mesh.radius).abs() <= 1e-12 * radius => {}
        Geometry::Disk { .. } => return Err(FluidError::Invalid("mesh radius differs from the disk".into())),
        _ => return Err(FluidError::Unsupported("heat solve off the disk".into())),
    }
    let nt = mesh.n_theta;
    let nr = mesh.r.len();
    let n = nr - 1;
    let kappa = problem.diffusivity;
    let sample = |f: &dyn Fn(&Vec3) -> f64| -> Vec<f64> {
        (0..nr).flat_map(|i| (0..nt).map(move |a| (i, a))).map(|(i, a)| f(&mesh.node(i, a))).collect()
    };
    let boundary_hat = |t: f64| -> Vec<Complex64> {
        let row: Vec<f64> = (0..nt).map(|a| (problem.boundary)(t, &mesh.node(nr - 1, a))).collect();
        forward_modes(&row, nt).pop().unwrap()
    };
    let mut u_hat = forward_modes(&sample(problem.initial.as_ref()), nt);
    let rows: Vec<Vec<(f64, f64, f64)>> = (0..nt).map(|d| mesh.laplacian_rows(mode_number(d, nt))).collect();
    let mut out = Vec::new();
    let mut targets: Vec<f64> = times.to_vec();
    targets.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut t = 0.0;
    let mut b_now = boundary_hat(0.0);
    let mut startup = 4;
    for &target in &targets {
        while t < target * (1.0 - 1e-12) {
            let (step, theta) = if startup > 0 {
                startup -= 1;
                ((0.5 * dt).min(target - t), 1.0)
            } else {
                (dt.min(target - t), 0.5)
            };
            let b_next = boundary_hat(t + step);
            let explicit = (1.0 - theta) * step * kappa;
            let implicit = theta * step * kappa;
            let cols: Vec<Vec<Complex64>> = (0..nt)
                .into_par_iter()
                .map(|d| {
                    let rw = &rows[d];
                    let cur: Vec<Complex64> = (0..n).map(|i| u_hat[i][d]).collect();
                    let mut rhs: Vec<Complex64> = (0..n)
                        .map(|i| {
                            let (lo, di, hi) = rw[i];
                            let left = if i > 0 { cur[i - 1] * lo } else { Complex64::new(0.0, 0.0) };
                            let right = if i + 1 < n { cur[i + 1] * hi } else { b_now[d] * hi };
                            cur[i] + (left + cur[i] * di + right) * explicit
                        })
                        .collect();
                    rhs[n - 1] += b_next[d] * (rw[n - 1].2 * implicit);
                    let sub: Vec<Complex64> = rw.iter().map(|r| Complex64::new(-implicit * r.0, 0.0)).collect();
                    let diag: Vec<Complex64> = rw.iter().map(|r| Complex64::new(1.0 - implicit * r.1, 0.0)).collect();
                    let sup: Vec<Complex64> = rw.iter().map(|r| Complex64::new(-implicit * r.2, 0.0)).collect();
                    thomas(&sub, &diag, &sup, &mut rhs);
                    rhs.push(b_next[d]);
                    rhs
                })
                .collect();
            for i in 0..nr {
                for d in 0..nt {
                    u_hat[i][d] = cols[d][i];
                }
            }
            b_now = b_next;
            t += step;
        }
        out.push(HeatSnapshot { t: target, field: PolarField { mesh: mesh.clone(), values: inverse_modes(u_hat.clone(), nt) } });
    }
    Ok(out)
}

/// U₁(x, w) = Ū₁(x) − w·∇U₀(x) with Ū₁ the harmonic extension of f_{1,L}.
#[derive(Debug, Clone)]
pub struct FirstOrderCorrector {
    pub ubar1: InteriorField,
    pub u0: InteriorField,
}

impl FirstOrderCorrector {
    pub fn value(&self, x: &Vec3, w: &Vec3) -> f64 {
        self.ubar1.value(x) - w.dot(&self.u0.gradient(x))
    }
}

/// ∫ w·∇U₀ dw = 0, so Ū₁ solves Laplace with the first-order far-field limits.
pub fn interior_corrector_u1(
    geometry: &Geometry,
    u0: &InteriorField,
    fl1: Option<BoundaryFn>,
    n_samples: usize,
) -> Result<FirstOrderCorrector, FluidError> {
    let fl1 = fl1.ok_or_else(|| FluidError::Missing("first-order far-field limits f_{1,L}".into()))?;
    let ubar1 = laplace_solve(&DirichletProblem { geometry: *geometry, boundary: fl1 }, n_samples)?;
    Ok(FirstOrderCorrector { ubar1, u0: u0.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn bessel_values() {
        assert_abs_diff_eq!(bessel_j0(0.0), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(bessel_j0(1.0), 0.765_197_686_557_966_6, epsilon = 1e-15);
        assert_abs_diff_eq!(bessel_j0(J0_FIRST_ZERO), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn legendre_derivative_recurrence() {
        let (p, dp) = legendre_table(4, 0.3);
        assert_abs_diff_eq!(p[2], 0.5 * (3.0 * 0.09 - 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(dp[3], 0.5 * (15.0 * 0.09 - 3.0), epsilon = 1e-15);
    }

    #[test]
    fn thomas_solves_a_small_system() {
        let c = |v: f64| Complex64::new(v, 0.0);
        let mut rhs = vec![c(1.0), c(2.0), c(3.0)];
        thomas(&[c(0.0), c(1.0), c(1.0)], &[c(4.0), c(4.0), c(4.0)], &[c(1.0), c(1.0), c(0.0)], &mut rhs);
        // [4 1 0; 1 4 1; 0 1 4] x = [1 2 3]
        assert_abs_diff_eq!(rhs[0].re, 0.178_571_428_571_428_5, epsilon = 1e-14);
        assert_abs_diff_eq!(rhs[2].re, 0.678_571_428_571_428_6, epsilon = 1e-14);
    }
}
