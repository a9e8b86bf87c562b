//! Reference solver for the kinetic transport equation
//!
//! ```text
//! ε w·∇u + u − ū = S            (steady)
//! ε² ∂ₜu + ε w·∇u + u − ū = 0   (unsteady, backward Euler)
//! ```
//!
//! with in-flow data on Γ⁻. Every node value is the mild (Duhamel) formula
//! along the backward ray x − εs w:
//!
//! ```text
//! u(x,w) = g(x − ε t_b w, w) e^{−σ t_b} + ∫₀^{t_b} (ū + Q)(x − εs w) e^{−σ s} ds,
//! ```
//!
//! where σ = 1 in the steady case and 1 + ε²/Δt with Q = (ε²/Δt) u_prev in a
//! backward-Euler step. The ray integral is linear in the nodal values of ū, so
//! ū solves a linear system. On disk and annulus grids that system commutes
//! with rotations by the node angle, hence decouples into one small system per
//! angular Fourier mode. The axisymmetric ball grid is small enough for a dense
//! solve.

use crate::geometry::{Geometry, Vec3};
use crate::quadrature::{cubic_weights, exp_linear_weights, gauss_legendre, locate};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::f64::consts::{PI, TAU};
use std::io::Write;
use std::sync::Arc;
use thiserror::Error;

/// Optical depth at which rays are cut (e^{-40} ≈ 4e-18).
const MAX_DEPTH: f64 = 40.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("invalid transport setup: {0}")]
    Invalid(String),
    #[error("point outside the domain: {0}")]
    Outside(String),
    #[error("transport solve did not converge: residual {residual:.3e}")]
    NonConvergence { residual: f64 },
    #[error("{0} is not supported for this geometry or grid")]
    Unsupported(String),
}

/// In-flow datum g(x₀, w) on Γ⁻.
pub type BoundaryData = Arc<dyn Fn(&Vec3, &Vec3) -> f64 + Send + Sync>;
/// Time-dependent in-flow datum g(t, x₀, w).
pub type TimeBoundaryData = Arc<dyn Fn(f64, &Vec3, &Vec3) -> f64 + Send + Sync>;
/// A function of (x, w): initial data or a volumetric source.
pub type PhaseFunction = Arc<dyn Fn(&Vec3, &Vec3) -> f64 + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Exit {
    /// Geometric length of the backward ray.
    pub length: f64,
    /// Backward exit time t_b = length/ε.
    pub t_b: f64,
    pub foot: Vec3,
}

/// Backward exit time and footpoint of (x, w).
pub fn exit_time(geom: &Geometry, x: &Vec3, w: &Vec3, eps: f64) -> Result<Exit, TransportError> {
    if !geom.contains(x, 1e-9 * geom.radius()) {
        return Err(TransportError::Outside(format!("{:?}", x.as_slice())));
    }
    if !(eps > 0.0) {
        return Err(TransportError::Invalid("epsilon must be positive".into()));
    }
    let length = exit_length(geom, x, w);
    Ok(Exit { length, t_b: length / eps, foot: x - length * w })
}

fn exit_length(geom: &Geometry, x: &Vec3, w: &Vec3) -> f64 {
    let r = geom.radius();
    let p = x.dot(w);
    let x2 = x.norm_squared();
    let q = (r * r - x2).max(0.0);
    let disc = (p * p + q).sqrt();
    // the other root form avoids cancellation when the ray leaves through the near side
    let mut l = if p >= 0.0 { p + disc } else { q / (disc - p) };
    if let Some(ri) = geom.inner_radius() {
        let d2 = p * p - x2 + ri * ri;
        // a tangent ray (d2 = 0) misses the hole: ties go to the longer chord
        if p > 0.0 && d2 > 0.0 {
            let l_in = (x2 - ri * ri).max(0.0) / (p + d2.sqrt());
            l = l.min(l_in);
        }
    }
    l
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RadialSpacing {
    Uniform { n: usize },
    /// Spacing `h_boundary` at the outer circle, growing by `ratio` per cell
    /// inward until it reaches `h_interior`.
    Graded { h_boundary: f64, h_interior: f64, ratio: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    /// Piecewise linear in r and θ: positivity preserving.
    Linear,
    /// Cubic in r, trigonometric in θ, Gauss points along rays.
    Spectral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportGridSpec {
    pub radial: RadialSpacing,
    /// Node angles per circle (polar-angle nodes on the ball meridian).
    pub n_theta: usize,
    /// Planar ordinates; a multiple of `n_theta` and of 4.
    pub n_omega: usize,
    pub interpolation: Interpolation,
    /// Ball ordinates: Gauss nodes in w_z ...
    pub n_mu: usize,
    /// ... times uniform azimuths.
    pub n_azimuth: usize,
}

impl Default for TransportGridSpec {
    fn default() -> Self {
        TransportGridSpec {
            radial: RadialSpacing::Uniform { n: 32 },
            n_theta: 32,
            n_omega: 64,
            interpolation: Interpolation::Linear,
            n_mu: 8,
            n_azimuth: 16,
        }
    }
}

/// Radial nodes: the disk and ball exclude the centre, the annulus includes
/// its inner circle; the last node is always the outer radius.
pub fn radial_nodes(geom: &Geometry, spacing: &RadialSpacing) -> Result<Vec<f64>, TransportError> {
    let big_r = geom.radius();
    let lower = geom.inner_radius().unwrap_or(0.0);
    let nodes = match *spacing {
        RadialSpacing::Uniform { n } => {
            if n < 2 {
                return Err(TransportError::Invalid("need at least two radial nodes".into()));
            }
            if geom.inner_radius().is_some() {
                (0..n).map(|i| lower + (big_r - lower) * i as f64 / (n - 1) as f64).collect()
            } else {
                (0..n).map(|i| big_r * (i + 1) as f64 / n as f64).collect()
            }
        }
        RadialSpacing::Graded { h_boundary, h_interior, ratio } => {
            if !(h_boundary > 0.0 && h_interior >= h_boundary && ratio >= 1.0) {
                return Err(TransportError::Invalid(
                    "graded spacing needs 0 < h_boundary <= h_interior and ratio >= 1".into(),
                ));
            }
            let mut out = vec![big_r];
            let (mut r, mut h) = (big_r, h_boundary);
            loop {
                let next = r - h;
                if next <= lower + 0.5 * h {
                    break;
                }
                out.push(next);
                r = next;
                h = (h * ratio).min(h_interior);
            }
            if geom.inner_radius().is_some() {
                out.push(lower);
            }
            out.reverse();
            out
        }
    };
    Ok(nodes)
}

#[derive(Debug, Clone, Copy, Default)]
struct Stencil {
    len: usize,
    j: [usize; 4],
    w: [f64; 4],
    /// Node taken at θ + π (reflection through the centre).
    flip: [bool; 4],
}

impl Stencil {
    fn push(&mut self, j: usize, w: f64, flip: bool) {
        self.j[self.len] = j;
        self.w[self.len] = w;
        self.flip[self.len] = flip;
        self.len += 1;
    }
}

/// Polar product grid on a disk or annulus with planar ordinates.
#[derive(Debug, Clone)]
pub struct PolarGrid {
    pub geometry: Geometry,
    pub r: Vec<f64>,
    pub n_theta: usize,
    pub n_omega: usize,
    pub interpolation: Interpolation,
    centre: bool,
    /// Radial abscissae extended through the centre (disk, cubic only).
    ext: Vec<f64>,
}

impl PolarGrid {
    pub fn new(geometry: Geometry, spec: &TransportGridSpec) -> Result<Self, TransportError> {
        if geometry.dim() != 2 {
            return Err(TransportError::Unsupported("polar grid on a ball".into()));
        }
        let (nt, no) = (spec.n_theta, spec.n_omega);
        if nt < 4 || nt % 2 != 0 {
            return Err(TransportError::Invalid(format!("n_theta must be even and >= 4, got {nt}")));
        }
        if no % nt != 0 || no % 4 != 0 {
            return Err(TransportError::Invalid(format!(
                "n_omega must be a multiple of n_theta and of 4, got {no}"
            )));
        }
        let r = radial_nodes(&geometry, &spec.radial)?;
        let centre = geometry.inner_radius().is_none();
        if spec.interpolation == Interpolation::Spectral && r.len() < 4 {
            return Err(TransportError::Invalid("cubic radial interpolation needs 4 radial nodes".into()));
        }
        let ext = if centre { [-r[1], -r[0]].into_iter().chain(r.iter().copied()).collect() } else { r.clone() };
        Ok(PolarGrid { geometry, r, n_theta: nt, n_omega: no, interpolation: spec.interpolation, centre, ext })
    }

    pub fn n_r(&self) -> usize {
        self.r.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.r.len() * self.n_theta
    }

    pub fn theta(&self, a: usize) -> f64 {
        TAU * a as f64 / self.n_theta as f64
    }

    pub fn omega(&self, k: usize) -> f64 {
        TAU * (k as f64 + 0.5) / self.n_omega as f64
    }

    pub fn node(&self, i: usize, a: usize) -> Vec3 {
        let (s, c) = self.theta(a).sin_cos();
        Vec3::new(self.r[i] * c, self.r[i] * s, 0.0)
    }

    pub fn ordinate(&self, k: usize) -> Vec3 {
        crate::geometry::planar_direction(self.omega(k))
    }

    /// Ordinate shift produced by rotating through one node angle.
    fn shift(&self) -> usize {
        self.n_omega / self.n_theta
    }

    fn radial_stencil(&self, r: f64) -> Stencil {
        let mut s = Stencil::default();
        match self.interpolation {
            Interpolation::Linear => {
                if self.centre && r < self.r[0] {
                    // straight line through the centre between (r₀, θ) and (r₀, θ+π)
                    let r0 = self.r[0];
                    s.push(0, 0.5 * (r0 + r) / r0, false);
                    s.push(0, 0.5 * (r0 - r) / r0, true);
                } else {
                    let (i, t) = locate(&self.r, r);
                    s.push(i, 1.0 - t, false);
                    if t > 0.0 {
                        s.push(i + 1, t, false);
                    }
                }
            }
            Interpolation::Spectral => {
                let (start, w) = cubic_weights(&self.ext, r.min(*self.r.last().unwrap()));
                let m = if self.centre { 2 } else { 0 };
                for (q, wq) in w.iter().enumerate() {
                    let e = start + q;
                    if e < m {
                        s.push(m - 1 - e, *wq, true);
                    } else {
                        s.push(e - m, *wq, false);
                    }
                }
            }
        }
        s
    }

    fn angle_cell(&self, theta: f64) -> (usize, f64) {
        let n = self.n_theta;
        let u = (theta / TAU * n as f64).rem_euclid(n as f64);
        let b = (u.floor() as usize).min(n - 1);
        (b, u - b as f64)
    }

    /// Interpolate one row of nodal values (indexed by node angle) at θ.
    fn angular_value(&self, row: impl Fn(usize) -> f64, theta: f64) -> f64 {
        let n = self.n_theta;
        match self.interpolation {
            Interpolation::Linear => {
                let (b, t) = self.angle_cell(theta);
                let v0 = row(b);
                if t == 0.0 {
                    v0
                } else {
                    (1.0 - t) * v0 + t * row((b + 1) % n)
                }
            }
            Interpolation::Spectral => {
                let (b, t) = self.angle_cell(theta);
                if t == 0.0 {
                    return row(b);
                }
                let mut v = 0.0;
                for a in 0..n {
                    let x = theta - self.theta(a);
                    v += row(a) * (0.5 * n as f64 * x).sin() / (0.5 * x).tan();
                }
                v / n as f64
            }
        }
    }

    /// Interpolate a nodal field (node-major, one value per node) at x.
    pub fn interpolate(&self, values: &[f64], x: &Vec3) -> f64 {
        let r = x.x.hypot(x.y);
        let theta = x.y.atan2(x.x);
        let s = self.radial_stencil(r);
        let n = self.n_theta;
        let mut v = 0.0;
        for m in 0..s.len {
            let j = s.j[m];
            let th = if s.flip[m] { theta + PI } else { theta };
            v += s.w[m] * self.angular_value(|a| values[j * n + a], th);
        }
        v
    }

    /// Angular Fourier factor Θ_d(θ) = Σ_b c_b(θ) e^{i d θ_b} of the interpolation rule.
    fn theta_factor(&self, d: usize, theta: f64, roots: &[Complex64]) -> Complex64 {
        let n = self.n_theta;
        match self.interpolation {
            Interpolation::Linear => {
                let (b, t) = self.angle_cell(theta);
                roots[(d * b) % n] * (1.0 - t) + roots[(d * ((b + 1) % n)) % n] * t
            }
            Interpolation::Spectral => {
                if 2 * d == n {
                    Complex64::new((0.5 * n as f64 * theta).cos(), 0.0)
                } else {
                    let dd = if 2 * d < n { d as f64 } else { d as f64 - n as f64 };
                    Complex64::from_polar(1.0, dd * theta)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct RaySample {
    w: f64,
    r: f64,
    theta: f64,
    stencil: Stencil,
}

/// Samples the integral ∫ H(x − εs w) e^{−σs} ds along backward rays.
struct RayTracer<'a> {
    grid: &'a PolarGrid,
    sigma: f64,
    /// Optical depth per unit length, σ/ε.
    kappa: f64,
    gl: (Vec<f64>, Vec<f64>),
}

impl<'a> RayTracer<'a> {
    fn new(grid: &'a PolarGrid, eps: f64, sigma: f64) -> Self {
        RayTracer { grid, sigma, kappa: sigma / eps, gl: gauss_legendre(3) }
    }

    fn boundary_weight(&self, length: f64) -> f64 {
        let d = self.kappa * length;
        if d > MAX_DEPTH {
            0.0
        } else {
            (-d).exp()
        }
    }

    fn sample(&self, x: &Vec3, w: &Vec3, l: f64, weight: f64, out: &mut Vec<RaySample>) {
        let y = x - l * w;
        let r = y.x.hypot(y.y);
        let theta = y.y.atan2(y.x);
        out.push(RaySample { w: weight, r, theta, stencil: self.grid.radial_stencil(r) });
    }

    fn trace(&self, x: &Vec3, w: &Vec3, out: &mut Vec<RaySample>) {
        out.clear();
        let g = self.grid;
        let l_b = exit_length(&g.geometry, x, w);
        let l_end = l_b.min(MAX_DEPTH / self.kappa);
        if l_end <= 0.0 {
            return;
        }
        let p = x.dot(w);
        let x2 = x.norm_squared();
        let mut bp = vec![0.0, l_end];
        let inside = |l: f64| l > 0.0 && l < l_end;
        for &rj in &g.r {
            let d2 = p * p - x2 + rj * rj;
            if d2 > 0.0 {
                let d = d2.sqrt();
                for l in [p - d, p + d] {
                    if inside(l) {
                        bp.push(l);
                    }
                }
            }
        }
        if inside(p) {
            bp.push(p);
        }
        if g.interpolation == Interpolation::Linear {
            for b in 0..g.n_theta / 2 {
                let (s, c) = g.theta(b).sin_cos();
                let den = w.x * s - w.y * c;
                if den != 0.0 {
                    let l = (x.x * s - x.y * c) / den;
                    if inside(l) {
                        bp.push(l);
                    }
                }
            }
        }
        bp.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let tol = 1e-13 * (1.0 + l_end);
        bp.dedup_by(|a, b| (*a - *b).abs() <= tol);
        let cap = match g.interpolation {
            Interpolation::Linear => 1.0,
            Interpolation::Spectral => 0.5,
        } / self.kappa;
        let mut pts = Vec::with_capacity(bp.len() * 2);
        for m in 0..bp.len() - 1 {
            let (a, b) = (bp[m], bp[m + 1]);
            let pieces = ((b - a) / cap).ceil().max(1.0) as usize;
            for q in 0..pieces {
                pts.push(a + (b - a) * q as f64 / pieces as f64);
            }
        }
        pts.push(*bp.last().unwrap());

        let sigma = self.sigma;
        match g.interpolation {
            Interpolation::Linear => {
                let mut wts = vec![0.0; pts.len()];
                for m in 0..pts.len() - 1 {
                    let f = (-self.kappa * pts[m]).exp();
                    let (fa, fb) = exp_linear_weights(self.kappa * (pts[m + 1] - pts[m]));
                    wts[m] += f * fb / sigma;
                    wts[m + 1] += f * fa / sigma;
                }
                for (l, wt) in pts.iter().zip(&wts) {
                    self.sample(x, w, *l, *wt, out);
                }
            }
            Interpolation::Spectral => {
                let (gx, gw) = &self.gl;
                for m in 0..pts.len() - 1 {
                    let (a, b) = (pts[m], pts[m + 1]);
                    let (c, h) = (0.5 * (a + b), 0.5 * (b - a));
                    let exact = (-self.kappa * a).exp() * (-(-self.kappa * (b - a)).exp_m1()) / sigma;
                    let raw: Vec<f64> = gx.iter().zip(gw).map(|(xq, wq)| wq * (-self.kappa * (c + h * xq)).exp()).collect();
                    let scale = exact / raw.iter().sum::<f64>();
                    for (xq, rq) in gx.iter().zip(&raw) {
                        self.sample(x, w, c + h * xq, rq * scale, out);
                    }
                }
            }
        }
    }
}

/// Where the nodal values live.
#[derive(Debug, Clone, PartialEq)]
pub enum Layout {
    /// Node (i, a) at radius r[i], angle 2πa/n_theta; index i·n_theta + a.
    Polar { r: Vec<f64>, n_theta: usize },
    /// Axisymmetric ball: node (i, j) at radius r[i], polar angle π(j+½)/n_polar
    /// in the xz half-plane; index i·n_polar + j.
    Meridian { r: Vec<f64>, n_polar: usize },
}

/// u on spatial nodes × ordinates.
#[derive(Debug, Clone)]
pub struct KineticField {
    pub geometry: Geometry,
    pub eps: f64,
    pub nodes: Vec<Vec3>,
    pub ordinates: Vec<Vec3>,
    /// Angular weights normalized to sum 1.
    pub weights: Vec<f64>,
    /// Node-major values u(node, ordinate).
    pub values: Vec<f64>,
    pub ubar: Vec<f64>,
    pub layout: Layout,
    /// sup |Σ_k q_k u − ū| after the solve.
    pub residual: f64,
}

impl KineticField {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_ordinates(&self) -> usize {
        self.ordinates.len()
    }

    pub fn value(&self, node: usize, k: usize) -> f64 {
        self.values[node * self.ordinates.len() + k]
    }

    /// |S^{d−1}|: 2π on the circle, 4π on the sphere.
    pub fn angular_measure(&self) -> f64 {
        if self.geometry.dim() == 2 {
            TAU
        } else {
            4.0 * PI
        }
    }

    /// Angular average of the stored values at every node.
    pub fn average(&self) -> Vec<f64> {
        let no = self.n_ordinates();
        (0..self.n_nodes())
            .map(|n| (0..no).map(|k| self.weights[k] * self.values[n * no + k]).sum())
            .collect()
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)))
    }

    /// CSV with node coordinates, ordinate components and u.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let three = self.geometry.dim() == 3;
        if three {
            w.write_record(["x", "y", "z", "wx", "wy", "wz", "u"])?;
        } else {
            w.write_record(["x", "y", "wx", "wy", "u"])?;
        }
        for (n, x) in self.nodes.iter().enumerate() {
            for (k, o) in self.ordinates.iter().enumerate() {
                let u = self.value(n, k).to_string();
                if three {
                    w.write_record(&[
                        x.x.to_string(),
                        x.y.to_string(),
                        x.z.to_string(),
                        o.x.to_string(),
                        o.y.to_string(),
                        o.z.to_string(),
                        u,
                    ])?;
                } else {
                    w.write_record(&[x.x.to_string(), x.y.to_string(), o.x.to_string(), o.y.to_string(), u])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub struct KineticProblem {
    pub geometry: Geometry,
    pub eps: f64,
    pub boundary: BoundaryData,
    pub source: Option<PhaseFunction>,
}

/// Per-mode factorizations of I − M̂_d for one absorption σ.
struct ModeSolver {
    lus: HashMap<usize, nalgebra::LU<Complex64, nalgebra::Dyn, nalgebra::Dyn>>,
}

/// Disk/annulus transport at a fixed ε and absorption σ.
pub struct PolarTransport {
    pub grid: PolarGrid,
    pub eps: f64,
    sigma: f64,
    roots: Vec<Complex64>,
    /// Base rays (node angle 0) when kept in memory, index i·n_omega + k.
    stored: Option<Vec<Vec<RaySample>>>,
    modes: std::sync::Mutex<ModeSolver>,
}

impl PolarTransport {
    pub fn new(geometry: Geometry, eps: f64, spec: &TransportGridSpec) -> Result<Self, TransportError> {
        Self::with_sigma(geometry, eps, spec, 1.0, false)
    }

    fn with_sigma(geometry: Geometry, eps: f64, spec: &TransportGridSpec, sigma: f64, store: bool) -> Result<Self, TransportError> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(TransportError::Invalid(format!("epsilon must be positive, got {eps}")));
        }
        let grid = PolarGrid::new(geometry, spec)?;
        let n = grid.n_theta;
        let roots = (0..n).map(|b| Complex64::from_polar(1.0, TAU * b as f64 / n as f64)).collect();
        let mut t = PolarTransport {
            grid,
            eps,
            sigma,
            roots,
            stored: None,
            modes: std::sync::Mutex::new(ModeSolver { lus: HashMap::new() }),
        };
        if store {
            let tracer = t.tracer();
            let g = &t.grid;
            let rays: Vec<Vec<RaySample>> = (0..g.n_r() * g.n_omega)
                .into_par_iter()
                .map(|idx| {
                    let mut buf = Vec::new();
                    tracer.trace(&Vec3::new(g.r[idx / g.n_omega], 0.0, 0.0), &g.ordinate(idx % g.n_omega), &mut buf);
                    buf
                })
                .collect();
            t.stored = Some(rays);
        }
        Ok(t)
    }

    fn tracer(&self) -> RayTracer<'_> {
        RayTracer::new(&self.grid, self.eps, self.sigma)
    }

    fn with_base_ray<R>(&self, tracer: &RayTracer, i: usize, kp: usize, buf: &mut Vec<RaySample>, f: impl FnOnce(&[RaySample]) -> R) -> R {
        match &self.stored {
            Some(rays) => f(&rays[i * self.grid.n_omega + kp]),
            None => {
                tracer.trace(&Vec3::new(self.grid.r[i], 0.0, 0.0), &self.grid.ordinate(kp), buf);
                f(buf)
            }
        }
    }

    /// g(foot) e^{−σ t_b} at every (node, ordinate).
    fn boundary_term(&self, g: &(dyn Fn(&Vec3, &Vec3) -> f64 + Send + Sync)) -> Vec<f64> {
        let tracer = self.tracer();
        let gr = &self.grid;
        let nt = gr.n_theta;
        let no = gr.n_omega;
        (0..gr.n_nodes())
            .into_par_iter()
            .flat_map_iter(|node| {
                let x = gr.node(node / nt, node % nt);
                let tracer = &tracer;
                (0..no).map(move |k| {
                    let w = gr.ordinate(k);
                    let l = exit_length(&gr.geometry, &x, &w);
                    let bw = tracer.boundary_weight(l);
                    if bw == 0.0 {
                        0.0
                    } else {
                        bw * g(&(x - l * w), &w)
                    }
                })
            })
            .collect()
    }

    /// ∫ Q(x − εs w, w) e^{−σs} ds at every (node, ordinate) for a pointwise Q.
    fn source_term(&self, q: &(dyn Fn(&Vec3, &Vec3) -> f64 + Send + Sync)) -> Vec<f64> {
        let g = &self.grid;
        let (nt, no, m) = (g.n_theta, g.n_omega, g.shift());
        let tracer = self.tracer();
        let blocks: Vec<Vec<f64>> = (0..g.n_r())
            .into_par_iter()
            .map(|i| {
                let mut out = vec![0.0; nt * no];
                let mut buf = Vec::new();
                for kp in 0..no {
                    self.with_base_ray(&tracer, i, kp, &mut buf, |samples| {
                        for a in 0..nt {
                            let k = (kp + a * m) % no;
                            let w = g.ordinate(k);
                            let rot = g.theta(a);
                            let mut acc = 0.0;
                            for s in samples {
                                let (sn, cs) = (s.theta + rot).sin_cos();
                                acc += s.w * q(&Vec3::new(s.r * cs, s.r * sn, 0.0), &w);
                            }
                            out[a * no + k] = acc;
                        }
                    });
                }
                out
            })
            .collect();
        blocks.concat()
    }

    /// M̂_d for the listed DFT modes.
    fn assemble(&self, modes: &[usize]) -> Vec<DMatrix<Complex64>> {
        let g = &self.grid;
        let nr = g.n_r();
        let q = 1.0 / g.n_omega as f64;
        let tracer = self.tracer();
        let rows: Vec<Vec<Vec<Complex64>>> = (0..nr)
            .into_par_iter()
            .map(|i| {
                let mut row = vec![vec![Complex64::new(0.0, 0.0); nr]; modes.len()];
                let mut buf = Vec::new();
                let mut th = vec![Complex64::new(0.0, 0.0); modes.len()];
                for kp in 0..g.n_omega {
                    self.with_base_ray(&tracer, i, kp, &mut buf, |samples| {
                        for s in samples {
                            for (md, &d) in modes.iter().enumerate() {
                                th[md] = g.theta_factor(d, s.theta, &self.roots) * (q * s.w);
                            }
                            let st = &s.stencil;
                            for m in 0..st.len {
                                let (j, rho) = (st.j[m], st.w[m]);
                                for (md, &d) in modes.iter().enumerate() {
                                    let sign = if st.flip[m] && d % 2 == 1 { -rho } else { rho };
                                    row[md][j] += th[md] * sign;
                                }
                            }
                        }
                    });
                }
                row
            })
            .collect();
        modes
            .iter()
            .enumerate()
            .map(|(md, _)| DMatrix::from_fn(nr, nr, |i, j| rows[i][md][j]))
            .collect()
    }

    fn ensure_modes(&self, modes: &[usize]) {
        let missing: Vec<usize> = {
            let cache = self.modes.lock().unwrap();
            modes.iter().copied().filter(|d| !cache.lus.contains_key(d)).collect()
        };
        if missing.is_empty() {
            return;
        }
        let mats = self.assemble(&missing);
        let nr = self.grid.n_r();
        let lus: Vec<_> = mats
            .into_par_iter()
            .map(|m| (DMatrix::<Complex64>::identity(nr, nr) - m).lu())
            .collect();
        let mut cache = self.modes.lock().unwrap();
        for (d, lu) in missing.into_iter().zip(lus) {
            cache.lus.insert(d, lu);
        }
    }

    fn dft_rows(&self, values: &[f64], inverse: bool) -> Vec<Vec<Complex64>> {
        let nt = self.grid.n_theta;
        let mut planner = FftPlanner::new();
        let fft = if inverse { planner.plan_fft_inverse(nt) } else { planner.plan_fft_forward(nt) };
        values
            .chunks(nt)
            .map(|row| {
                let mut buf: Vec<Complex64> = row.iter().map(|v| Complex64::new(*v, 0.0)).collect();
                fft.process(&mut buf);
                buf
            })
            .collect()
    }

    /// Σ_s w_s ū(R_a y_s) at every (node, ordinate), from the active Fourier modes of ū.
    fn synthesize(&self, uhat: &[Vec<Complex64>], modes: &[usize]) -> Vec<f64> {
        let g = &self.grid;
        let (nt, no, m) = (g.n_theta, g.n_omega, g.shift());
        let tracer = self.tracer();
        let inv_n = 1.0 / nt as f64;
        let blocks: Vec<Vec<f64>> = (0..g.n_r())
            .into_par_iter()
            .map(|i| {
                let mut out = vec![0.0; nt * no];
                if modes.is_empty() {
                    return out;
                }
                let mut buf = Vec::new();
                let mut v = vec![Complex64::new(0.0, 0.0); modes.len()];
                for kp in 0..no {
                    v.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
                    self.with_base_ray(&tracer, i, kp, &mut buf, |samples| {
                        for s in samples {
                            let st = &s.stencil;
                            for (md, &d) in modes.iter().enumerate() {
                                let mut acc = Complex64::new(0.0, 0.0);
                                for q in 0..st.len {
                                    let rho = if st.flip[q] && d % 2 == 1 { -st.w[q] } else { st.w[q] };
                                    acc += uhat[md][st.j[q]] * rho;
                                }
                                v[md] += acc * g.theta_factor(d, s.theta, &self.roots) * s.w;
                            }
                        }
                    });
                    for a in 0..nt {
                        let mut val = 0.0;
                        for (md, &d) in modes.iter().enumerate() {
                            val += (v[md] * self.roots[(d * a) % nt]).re;
                        }
                        out[a * no + (kp + a * m) % no] = val * inv_n;
                    }
                }
                out
            })
            .collect();
        blocks.concat()
    }

    /// Solve u = T + 𝒮[ū] for the given ū-free part T.
    fn solve_affine(&self, t: Vec<f64>) -> KineticField {
        let g = &self.grid;
        let (nr, nt, no) = (g.n_r(), g.n_theta, g.n_omega);
        let q = 1.0 / no as f64;
        let tbar: Vec<f64> = t.chunks(no).map(|c| q * c.iter().sum::<f64>()).collect();
        let bhat = self.dft_rows(&tbar, false);
        let scale = bhat.iter().flatten().map(|z| z.norm()).fold(0.0, f64::max);
        let modes: Vec<usize> = (0..nt)
            .filter(|&d| scale > 0.0 && (0..nr).any(|i| bhat[i][d].norm() > 1e-14 * scale))
            .collect();
        self.ensure_modes(&modes);
        let uhat: Vec<Vec<Complex64>> = {
            let cache = self.modes.lock().unwrap();
            modes
                .iter()
                .map(|&d| {
                    let rhs = DVector::from_iterator(nr, (0..nr).map(|i| bhat[i][d]));
                    cache.lus[&d].solve(&rhs).expect("mode system is non-singular").iter().copied().collect()
                })
                .collect()
        };
        let mut full = vec![vec![Complex64::new(0.0, 0.0); nt]; nr];
        for (md, &d) in modes.iter().enumerate() {
            for i in 0..nr {
                full[i][d] = uhat[md][i];
            }
        }
        let flat: Vec<f64> = full
            .iter()
            .flat_map(|row| {
                let mut buf = row.clone();
                FftPlanner::new().plan_fft_inverse(nt).process(&mut buf);
                buf.into_iter().map(|z| z.re / nt as f64).collect::<Vec<_>>()
            })
            .collect();
        let part = self.synthesize(&uhat, &modes);
        let values: Vec<f64> = t.iter().zip(&part).map(|(a, b)| a + b).collect();
        self.field(values, flat)
    }

    fn field(&self, values: Vec<f64>, ubar: Vec<f64>) -> KineticField {
        let g = &self.grid;
        let nodes = (0..g.n_r()).flat_map(|i| (0..g.n_theta).map(move |a| g.node(i, a))).collect();
        let ordinates = (0..g.n_omega).map(|k| g.ordinate(k)).collect();
        let mut f = KineticField {
            geometry: g.geometry,
            eps: self.eps,
            nodes,
            ordinates,
            weights: vec![1.0 / g.n_omega as f64; g.n_omega],
            values,
            ubar,
            layout: Layout::Polar { r: g.r.clone(), n_theta: g.n_theta },
            residual: 0.0,
        };
        f.residual = f.average().iter().zip(&f.ubar).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        f
    }

    pub fn solve(&self, boundary: &BoundaryData, source: Option<&PhaseFunction>) -> KineticField {
        let mut t = self.boundary_term(boundary.as_ref());
        if let Some(s) = source {
            for (a, b) in t.iter_mut().zip(self.source_term(s.as_ref())) {
                *a += b;
            }
        }
        self.solve_affine(t)
    }

    /// One sweep with a given ū (one value per node).
    pub fn sweep(&self, boundary: &BoundaryData, source: Option<&PhaseFunction>, ubar: &[f64]) -> KineticField {
        let nt = self.grid.n_theta;
        let mut t = self.boundary_term(boundary.as_ref());
        if let Some(s) = source {
            for (a, b) in t.iter_mut().zip(self.source_term(s.as_ref())) {
                *a += b;
            }
        }
        let uhat_rows = self.dft_rows(ubar, false);
        let modes: Vec<usize> = (0..nt).collect();
        let uhat: Vec<Vec<Complex64>> = modes.iter().map(|&d| uhat_rows.iter().map(|row| row[d]).collect()).collect();
        let part = self.synthesize(&uhat, &modes);
        let values = t.iter().zip(&part).map(|(a, b)| a + b).collect();
        let mut f = self.field(values, ubar.to_vec());
        f.ubar = f.average();
        f.residual = 0.0;
        f
    }
}

/// Axisymmetric ball solver (data must be invariant under rotations about e_z).
pub struct BallTransport {
    pub geometry: Geometry,
    pub eps: f64,
    pub r: Vec<f64>,
    pub polar: Vec<f64>,
    pub ordinates: Vec<Vec3>,
    pub weights: Vec<f64>,
}

impl BallTransport {
    pub fn new(geometry: Geometry, eps: f64, spec: &TransportGridSpec) -> Result<Self, TransportError> {
        if geometry.dim() != 3 {
            return Err(TransportError::Unsupported("meridian grid on a planar domain".into()));
        }
        if spec.n_theta < 2 || spec.n_mu < 2 || spec.n_azimuth < 2 {
            return Err(TransportError::Invalid("ball grid needs at least 2 nodes per direction".into()));
        }
        let r = radial_nodes(&geometry, &spec.radial)?;
        let np = spec.n_theta;
        let polar = (0..np).map(|j| PI * (j as f64 + 0.5) / np as f64).collect();
        let (mu, wmu) = gauss_legendre(spec.n_mu);
        let na = spec.n_azimuth;
        let mut ordinates = Vec::new();
        let mut weights = Vec::new();
        for (m, wm) in mu.iter().zip(&wmu) {
            let s = (1.0 - m * m).sqrt();
            for l in 0..na {
                let al = TAU * (l as f64 + 0.5) / na as f64;
                ordinates.push(Vec3::new(s * al.cos(), s * al.sin(), *m));
                weights.push(0.5 * wm / na as f64);
            }
        }
        Ok(BallTransport { geometry, eps, r, polar, ordinates, weights })
    }

    fn node(&self, idx: usize) -> Vec3 {
        let np = self.polar.len();
        let (r, th) = (self.r[idx / np], self.polar[idx % np]);
        Vec3::new(r * th.sin(), 0.0, r * th.cos())
    }

    /// Bilinear weights in (radius, polar angle), clamped at the grid ends.
    fn stencil(&self, y: &Vec3) -> [(usize, f64); 4] {
        let np = self.polar.len();
        let rho = y.norm();
        let th = if rho > 0.0 { (y.z / rho).clamp(-1.0, 1.0).acos() } else { 0.5 * PI };
        let (i, t) = locate(&self.r, rho);
        let (j, s) = locate(&self.polar, th);
        [
            (i * np + j, (1.0 - t) * (1.0 - s)),
            (i * np + j + 1, (1.0 - t) * s),
            ((i + 1) * np + j, t * (1.0 - s)),
            ((i + 1) * np + j + 1, t * s),
        ]
    }

    /// Bilinear interpolation of a nodal field at x (rotated into the meridian).
    pub fn interpolate(&self, values: &[f64], x: &Vec3) -> f64 {
        let y = Vec3::new(x.x.hypot(x.y), 0.0, x.z);
        self.stencil(&y).iter().map(|(j, c)| if *c == 0.0 { 0.0 } else { c * values[*j] }).sum()
    }

    fn trace(&self, x: &Vec3, w: &Vec3) -> (f64, Vec<(f64, f64)>) {
        let kappa = 1.0 / self.eps;
        let l_b = exit_length(&self.geometry, x, w);
        let l_end = l_b.min(MAX_DEPTH / kappa);
        let bweight = if kappa * l_b > MAX_DEPTH { 0.0 } else { (-kappa * l_b).exp() };
        if l_end <= 0.0 {
            return (bweight, Vec::new());
        }
        let p = x.dot(w);
        let x2 = x.norm_squared();
        let mut bp = vec![0.0, l_end];
        for &rj in &self.r {
            let d2 = p * p - x2 + rj * rj;
            if d2 > 0.0 {
                for l in [p - d2.sqrt(), p + d2.sqrt()] {
                    if l > 0.0 && l < l_end {
                        bp.push(l);
                    }
                }
            }
        }
        if p > 0.0 && p < l_end {
            bp.push(p);
        }
        bp.sort_by(|a, b| a.partial_cmp(b).unwrap());
        bp.dedup_by(|a, b| (*a - *b).abs() <= 1e-13 * (1.0 + l_end));
        let mut pts = Vec::new();
        for m in 0..bp.len() - 1 {
            let pieces = (kappa * (bp[m + 1] - bp[m])).ceil().max(1.0) as usize;
            for q in 0..pieces {
                pts.push(bp[m] + (bp[m + 1] - bp[m]) * q as f64 / pieces as f64);
            }
        }
        pts.push(l_end);
        let mut out: Vec<(f64, f64)> = pts.iter().map(|l| (*l, 0.0)).collect();
        for m in 0..pts.len() - 1 {
            let f = (-kappa * pts[m]).exp();
            let (fa, fb) = exp_linear_weights(kappa * (pts[m + 1] - pts[m]));
            out[m].1 += f * fb;
            out[m + 1].1 += f * fa;
        }
        (bweight, out)
    }

    pub fn solve(&self, boundary: &BoundaryData) -> KineticField {
        let n = self.r.len() * self.polar.len();
        let no = self.ordinates.len();
        let rows: Vec<(Vec<f64>, Vec<(usize, usize, f64)>)> = (0..n)
            .into_par_iter()
            .map(|idx| {
                let x = self.node(idx);
                let mut bterm = vec![0.0; no];
                let mut entries = Vec::new();
                for (k, w) in self.ordinates.iter().enumerate() {
                    let (bw, samples) = self.trace(&x, w);
                    if bw > 0.0 {
                        let l = exit_length(&self.geometry, &x, w);
                        bterm[k] = bw * boundary(&(x - l * w), w);
                    }
                    for (l, wt) in samples {
                        for (j, c) in self.stencil(&(x - l * w)) {
                            if c != 0.0 {
                                entries.push((k, j, wt * c));
                            }
                        }
                    }
                }
                (bterm, entries)
            })
            .collect();
        let mut m = DMatrix::<f64>::zeros(n, n);
        let mut b = DVector::<f64>::zeros(n);
        for (idx, (bterm, entries)) in rows.iter().enumerate() {
            for (k, v) in bterm.iter().enumerate() {
                b[idx] += self.weights[k] * v;
            }
            for &(k, j, c) in entries {
                m[(idx, j)] += self.weights[k] * c;
            }
        }
        let ubar = (DMatrix::<f64>::identity(n, n) - &m).lu().solve(&b).expect("ball system is non-singular");
        let mut values = vec![0.0; n * no];
        for (idx, (bterm, entries)) in rows.iter().enumerate() {
            for (k, v) in bterm.iter().enumerate() {
                values[idx * no + k] = *v;
            }
            for &(k, j, c) in entries {
                values[idx * no + k] += c * ubar[j];
            }
        }
        let mut f = KineticField {
            geometry: self.geometry,
            eps: self.eps,
            nodes: (0..n).map(|i| self.node(i)).collect(),
            ordinates: self.ordinates.clone(),
            weights: self.weights.clone(),
            values,
            ubar: ubar.iter().copied().collect(),
            layout: Layout::Meridian { r: self.r.clone(), n_polar: self.polar.len() },
            residual: 0.0,
        };
        f.residual = f.average().iter().zip(&f.ubar).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveControl {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolveControl {
    fn default() -> Self {
        SolveControl { tol: 1e-8, max_iter: 500 }
    }
}

/// Steady solve on any supported geometry.
pub fn steady_solve(problem: &KineticProblem, spec: &TransportGridSpec, control: &SolveControl) -> Result<KineticField, TransportError> {
    let field = match problem.geometry {
        Geometry::Ball { .. } => {
            if problem.source.is_some() {
                return Err(TransportError::Unsupported("volumetric source on the ball".into()));
            }
            BallTransport::new(problem.geometry, problem.eps, spec)?.solve(&problem.boundary)
        }
        _ => PolarTransport::new(problem.geometry, problem.eps, spec)?.solve(&problem.boundary, problem.source.as_ref()),
    };
    let scale = 1.0 + field.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(field.residual <= control.tol * scale) {
        return Err(TransportError::NonConvergence { residual: field.residual });
    }
    Ok(field)
}

/// One sweep with frozen ū (polar grids).
pub fn steady_sweep(problem: &KineticProblem, spec: &TransportGridSpec, ubar: &[f64]) -> Result<KineticField, TransportError> {
    let t = PolarTransport::new(problem.geometry, problem.eps, spec)?;
    if ubar.len() != t.grid.n_nodes() {
        return Err(TransportError::Invalid(format!("ubar has {} values, grid has {} nodes", ubar.len(), t.grid.n_nodes())));
    }
    Ok(t.sweep(&problem.boundary, problem.source.as_ref(), ubar))
}

pub struct UnsteadyProblem {
    pub geometry: Geometry,
    pub eps: f64,
    pub boundary: TimeBoundaryData,
    pub initial: PhaseFunction,
}

/// Fast-time step schedule: Δτ = Δt/ε² is `dtau` up to τ = `coarsen_after`,
/// then grows by `growth` per step up to `max_dtau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeSchedule {
    pub dtau: f64,
    pub coarsen_after: f64,
    pub growth: f64,
    pub max_dtau: f64,
}

impl Default for TimeSchedule {
    fn default() -> Self {
        TimeSchedule { dtau: 1.0, coarsen_after: 10.0, growth: 1.5, max_dtau: 1.0e3 }
    }
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    /// Fast time τ = t/ε².
    pub tau: f64,
    pub t: f64,
    pub field: KineticField,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub snapshots: Vec<Snapshot>,
    pub steps: usize,
    /// sup over boundary in-flow nodes of |h(x₀,w) − g(0,x₀,w)|.
    pub compatibility_violation: f64,
}

/// Backward-Euler evolution on the disk or annulus (linear interpolation),
/// recording snapshots at the requested fast times.
pub fn unsteady_solve(
    problem: &UnsteadyProblem,
    spec: &TransportGridSpec,
    schedule: &TimeSchedule,
    output_taus: &[f64],
) -> Result<Trajectory, TransportError> {
    if problem.geometry.dim() != 2 {
        return Err(TransportError::Unsupported("unsteady transport on the ball".into()));
    }
    if spec.interpolation != Interpolation::Linear {
        return Err(TransportError::Unsupported("unsteady transport with spectral interpolation".into()));
    }
    if !(schedule.dtau > 0.0 && schedule.growth >= 1.0) {
        return Err(TransportError::Invalid("time step must be positive".into()));
    }
    let mut outs: Vec<f64> = output_taus.to_vec();
    outs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if outs.first().map_or(false, |t| *t < 0.0) {
        return Err(TransportError::Invalid("output times must be non-negative".into()));
    }
    let eps = problem.eps;
    let base = PolarTransport::new(problem.geometry, eps, spec)?;
    let g = &base.grid;
    let (nt, no, m) = (g.n_theta, g.n_omega, g.shift());

    let mut u: Vec<f64> = (0..g.n_nodes())
        .flat_map(|node| {
            let x = g.node(node / nt, node % nt);
            (0..no).map(move |k| (x, k))
        })
        .map(|(x, k)| (problem.initial)(&x, &g.ordinate(k)))
        .collect();

    let mut compat: f64 = 0.0;
    let i_b = g.n_r() - 1;
    for a in 0..nt {
        let x = g.node(i_b, a);
        let nu = x / x.norm();
        for k in 0..no {
            let w = g.ordinate(k);
            if w.dot(&nu) < 0.0 {
                compat = compat.max(((problem.initial)(&x, &w) - (problem.boundary)(0.0, &x, &w)).abs());
            }
        }
    }

    let mut snapshots = Vec::new();
    let mut tau = 0.0;
    let mut dtau = schedule.dtau;
    let mut steps = 0;
    let mut ops: HashMap<u64, PolarTransport> = HashMap::new();
    for &target in &outs {
        while tau < target * (1.0 - 1e-12) {
            let step = dtau.min(target - tau);
            let sigma = 1.0 + 1.0 / step;
            let op = ops
                .entry(step.to_bits())
                .or_insert_with(|| PolarTransport::with_sigma(problem.geometry, eps, spec, sigma, true).expect("grid validated"));
            let t_new = (tau + step) * eps * eps;
            let bnd: BoundaryData = {
                let b = problem.boundary.clone();
                Arc::new(move |x: &Vec3, w: &Vec3| b(t_new, x, w))
            };
            let mut t = op.boundary_term(bnd.as_ref());
            let c = 1.0 / step;
            let rays = op.stored.as_ref().unwrap();
            let prev = &u;
            let carry: Vec<Vec<f64>> = (0..g.n_r())
                .into_par_iter()
                .map(|i| {
                    let mut out = vec![0.0; nt * no];
                    for kp in 0..no {
                        let samples = &rays[i * no + kp];
                        for a in 0..nt {
                            let k = (kp + a * m) % no;
                            let mut acc = 0.0;
                            for s in samples {
                                let (b0, tt) = g.angle_cell(s.theta);
                                let st = &s.stencil;
                                for q in 0..st.len {
                                    let shift = if st.flip[q] { nt / 2 } else { 0 };
                                    let at = |bb: usize| prev[(st.j[q] * nt + (bb + a + shift) % nt) * no + k];
                                    let v = if tt == 0.0 { at(b0) } else { (1.0 - tt) * at(b0) + tt * at(b0 + 1) };
                                    acc += s.w * st.w[q] * v;
                                }
                            }
                            out[a * no + k] = c * acc;
                        }
                    }
                    out
                })
                .collect();
            for (x, y) in t.iter_mut().zip(carry.concat()) {
                *x += y;
            }
            u = op.solve_affine(t).values;
            tau += step;
            steps += 1;
            if tau >= schedule.coarsen_after {
                dtau = (dtau * schedule.growth).min(schedule.max_dtau);
            }
            if ops.len() > 4 {
                // coarsening steps each need their own operator; keep only the current one
                let keep = step.to_bits();
                ops.retain(|k, _| *k == keep);
            }
        }
        let mut field = base.field(u.clone(), vec![0.0; g.n_nodes()]);
        field.ubar = field.average();
        field.residual = 0.0;
        snapshots.push(Snapshot { tau: target, t: target * eps * eps, field });
    }
    Ok(Trajectory { snapshots, steps, compatibility_violation: compat })
}

/// Discrete residual of ∬ ((w·∇u)v + (w·∇v)u) = ∫_∂Ω∫ u v (w·ν) on a polar
/// field pair, all angular integrals in the normalized measure.
pub fn greens_identity_residual(u: &KineticField, v: &KineticField) -> Result<f64, TransportError> {
    let (r, nt) = match &u.layout {
        Layout::Polar { r, n_theta } => (r.clone(), *n_theta),
        Layout::Meridian { .. } => return Err(TransportError::Unsupported("Green's identity residual on the ball".into())),
    };
    if u.layout != v.layout || u.n_ordinates() != v.n_ordinates() {
        return Err(TransportError::Invalid("fields live on different grids".into()));
    }
    let nr = r.len();
    let no = u.n_ordinates();
    let centre = u.geometry.inner_radius().is_none();
    let dth = TAU / nt as f64;
    let val = |f: &KineticField, i: usize, a: usize, k: usize| f.values[(i * nt + a % nt) * no + k];
    // w·∇f at (i, a, k)
    let grad = |f: &KineticField, i: usize, a: usize, k: usize| -> f64 {
        let dr = if i == 0 && centre {
            // mirror through the centre
            let opp = (a + nt / 2) % nt;
            fd3(-r[0], r[0], r[1], val(f, 0, opp, k), val(f, 0, a, k), val(f, 1, a, k), r[0])
        } else if i == 0 {
            fd3(r[0], r[1], r[2], val(f, 0, a, k), val(f, 1, a, k), val(f, 2, a, k), r[0])
        } else if i == nr - 1 {
            fd3(r[nr - 3], r[nr - 2], r[nr - 1], val(f, nr - 3, a, k), val(f, nr - 2, a, k), val(f, nr - 1, a, k), r[nr - 1])
        } else {
            fd3(r[i - 1], r[i], r[i + 1], val(f, i - 1, a, k), val(f, i, a, k), val(f, i + 1, a, k), r[i])
        };
        let dt = (val(f, i, a + 1, k) - val(f, i, a + nt - 1, k)) / (2.0 * dth);
        let th = TAU * a as f64 / nt as f64;
        let (s, c) = th.sin_cos();
        let w = &f.ordinates[k];
        let dx = c * dr - s / r[i] * dt;
        let dy = s * dr + c / r[i] * dt;
        w.x * dx + w.y * dy
    };
    // trapezoid in r with the r dr measure
    let mut area = vec![0.0; nr];
    for i in 0..nr - 1 {
        let h = r[i + 1] - r[i];
        area[i] += 0.5 * h * r[i];
        area[i + 1] += 0.5 * h * r[i + 1];
    }
    if centre {
        area[0] += 0.5 * r[0] * r[0];
    }
    let mut lhs = 0.0;
    for i in 0..nr {
        for a in 0..nt {
            for k in 0..no {
                let q = u.weights[k];
                lhs += area[i] * dth * q * (grad(u, i, a, k) * val(v, i, a, k) + grad(v, i, a, k) * val(u, i, a, k));
            }
        }
    }
    let mut rhs = 0.0;
    let mut edge = |i: usize, sign: f64| {
        for a in 0..nt {
            let th = TAU * a as f64 / nt as f64;
            let nu = Vec3::new(th.cos(), th.sin(), 0.0) * sign;
            for k in 0..no {
                rhs += u.weights[k] * val(u, i, a, k) * val(v, i, a, k) * u.ordinates[k].dot(&nu) * r[i] * dth;
            }
        }
    };
    edge(nr - 1, 1.0);
    if !centre {
        edge(0, -1.0);
    }
    Ok((lhs - rhs).abs())
}

/// Derivative at `x` of the parabola through three points.
fn fd3(x0: f64, x1: f64, x2: f64, f0: f64, f1: f64, f2: f64, x: f64) -> f64 {
    let l0 = ((x - x1) + (x - x2)) / ((x0 - x1) * (x0 - x2));
    let l1 = ((x - x0) + (x - x2)) / ((x1 - x0) * (x1 - x2));
    let l2 = ((x - x0) + (x - x1)) / ((x2 - x0) * (x2 - x1));
    f0 * l0 + f1 * l1 + f2 * l2
}
