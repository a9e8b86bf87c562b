//! The ε-Milne problem with geometric correction on the truncated slab [0, L]:
//!
//! ```text
//! sin φ ∂f/∂η + F(η,ψ) cos φ ∂f/∂φ + (1+λ) f − f̄ = S,
//! f(0, φ, ψ) = h(φ, ψ)      for sin φ > 0,
//! f(L, φ, ψ) = f(L, −φ, ψ),
//! F(η, ψ) = −ε (sin²ψ/(R₁−εη) + cos²ψ/(R₂−εη)),
//! ```
//!
//! with λ = 0 unless a penalty is requested. The flat problem is F ≡ 0.
//!
//! Characteristics conserve E = e^{−V(η,ψ)} cos φ, where V is the potential with
//! ∂V/∂η = −F. A node is solved by following its characteristic back to the
//! wall: straight up from η = 0 when φ > 0, and when φ < 0 up to either the
//! turning point η⁺ (where φ' = 0) or the reflecting end η = L and back down.
//! Along the path the optical depth is ∫ dξ / sin φ'(ξ), and f̄ + S is treated
//! as linear in depth between breakpoints, which keeps every sweep a convex
//! combination of its inputs.
//!
//! Because a sweep is affine in f̄, the whole fixed-point problem reduces to an
//! N_η × N_η linear map f̄ ↦ M f̄ + b. [`MilneOperator`] traces every node once
//! and stores the paths, so the same operator serves any number of in-flow data.

use crate::quadrature::{exp_linear_weights, gauss_legendre, linear_fit, locate};
use nalgebra::{DMatrix, DVector, Dyn, LU};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};
use std::io::Write;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MilneError {
    #[error("invalid Milne parameters: {0}")]
    Invalid(String),
    #[error("singular geometry: eps*eta = {0} reaches the curvature radius {1}")]
    Singular(f64, f64),
    #[error("eta' = {0} lies past the turning point of the characteristic")]
    PastTurningPoint(f64),
    #[error("characteristic has no turning point before eta = L")]
    NoTurningPoint,
    #[error("source iteration did not converge: residual {residual:.3e} after {iterations} iterations")]
    NonConvergence { iterations: usize, residual: f64, history: Vec<f64> },
}

/// In-flow datum h(φ, ψ), used for φ > 0.
pub type Inflow = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Physical parameters of one Milne problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MilneParams {
    pub eps: f64,
    /// Slab length L.
    pub length: f64,
    pub r1: f64,
    pub r2: f64,
    pub geometric: bool,
    /// Extra absorption λ ≥ 0 of the penalized problem.
    #[serde(default)]
    pub penalty: f64,
}

impl MilneParams {
    /// Geometric problem with L = ε^{-1/2}.
    pub fn new(eps: f64, r1: f64, r2: f64) -> Self {
        MilneParams { eps, length: eps.powf(-0.5), r1, r2, geometric: true, penalty: 0.0 }
    }

    /// Flat problem (F ≡ 0) with L = ε^{-1/2}.
    pub fn flat(eps: f64) -> Self {
        MilneParams { geometric: false, ..Self::new(eps, f64::INFINITY, f64::INFINITY) }
    }

    /// Set L = ε^{-n}.
    pub fn with_length_exponent(mut self, n: f64) -> Self {
        self.length = self.eps.powf(-n);
        self
    }

    pub fn validate(&self) -> Result<(), MilneError> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(MilneError::Invalid(format!("epsilon must be positive, got {}", self.eps)));
        }
        if !(self.length > 0.0 && self.length.is_finite()) {
            return Err(MilneError::Invalid(format!("slab length must be positive, got {}", self.length)));
        }
        if !(self.r1 > 0.0 && self.r2 > 0.0) {
            return Err(MilneError::Invalid("curvature radii must be positive".into()));
        }
        if !(self.penalty >= 0.0) {
            return Err(MilneError::Invalid("penalty must be non-negative".into()));
        }
        let rmin = self.r1.min(self.r2);
        if self.geometric && self.eps * self.length >= rmin {
            return Err(MilneError::Singular(self.eps * self.length, rmin));
        }
        Ok(())
    }

    fn curvatures(&self) -> (f64, f64) {
        if self.geometric {
            (self.eps / self.r1, self.eps / self.r2)
        } else {
            (0.0, 0.0)
        }
    }

    fn lane(&self, psi: f64) -> Lane {
        Lane::new(self.curvatures(), psi.sin().powi(2), psi.cos().powi(2))
    }

    fn check_eta(&self, eta: f64) -> Result<(), MilneError> {
        let rmin = self.r1.min(self.r2);
        if self.geometric && self.eps * eta >= rmin {
            return Err(MilneError::Singular(self.eps * eta, rmin));
        }
        Ok(())
    }

    /// V(η, ψ) = ln(R₁/(R₁−εη)) sin²ψ + ln(R₂/(R₂−εη)) cos²ψ (zero when flat).
    pub fn potential_v(&self, eta: f64, psi: f64) -> Result<f64, MilneError> {
        self.check_eta(eta)?;
        Ok(self.lane(psi).v(eta))
    }

    /// F(η, ψ) = −ε(sin²ψ/(R₁−εη) + cos²ψ/(R₂−εη)) (zero when flat).
    pub fn force_f(&self, eta: f64, psi: f64) -> Result<f64, MilneError> {
        self.check_eta(eta)?;
        Ok(self.lane(psi).force(eta))
    }

    /// E = e^{−V} cos φ.
    pub fn energy_e(&self, eta: f64, phi: f64, psi: f64) -> Result<f64, MilneError> {
        Ok((-self.potential_v(eta, psi)?).exp() * phi.cos())
    }

    /// ζ = (1 − E²)^{1/2}.
    pub fn weight_zeta(&self, eta: f64, phi: f64, psi: f64) -> Result<f64, MilneError> {
        let e = self.energy_e(eta, phi, psi)?;
        Ok((1.0 - e * e).max(0.0).sqrt())
    }

    /// φ' = arccos(e^{V(η')−V(η)} cos φ) ∈ [0, π/2] on the characteristic through (η, φ).
    pub fn characteristic_phi(&self, eta: f64, phi: f64, psi: f64, eta2: f64) -> Result<f64, MilneError> {
        self.check_eta(eta)?;
        self.check_eta(eta2)?;
        let lane = self.lane(psi);
        let ch = Chord::new(&lane, eta, phi, None);
        let x = ch.one_minus_cos_from_node(&lane, eta2);
        if x < 0.0 {
            match lane.turning_point(eta, phi) {
                Some(s) if eta2 <= s * (1.0 + 1e-12) => return Ok(0.0),
                _ => return Err(MilneError::PastTurningPoint(eta2)),
            }
        }
        Ok(angle_from_one_minus_cos(x.max(0.0)))
    }

    /// Turning point η⁺ with E(η, φ) = e^{−V(η⁺)}.
    pub fn eta_plus(&self, eta: f64, phi: f64, psi: f64) -> Result<f64, MilneError> {
        self.check_eta(eta)?;
        if phi == 0.0 {
            return Ok(eta);
        }
        match self.lane(psi).turning_point(eta, phi) {
            Some(s) if s <= self.length => Ok(s),
            _ => Err(MilneError::NoTurningPoint),
        }
    }

    /// G = ∫ dξ / sin φ'(φ, η; ξ) between η' and η along the characteristic.
    pub fn g_integral(&self, eta: f64, eta2: f64, phi: f64, psi: f64) -> Result<f64, MilneError> {
        self.check_eta(eta)?;
        self.check_eta(eta2)?;
        let lane = self.lane(psi);
        let star = lane.turning_point(eta, phi);
        let (a, b) = if eta2 < eta { (eta2, eta) } else { (eta, eta2) };
        if let Some(s) = star {
            if b > s * (1.0 + 1e-14) {
                return Err(MilneError::PastTurningPoint(b));
            }
        }
        let ch = Chord::new(&lane, eta, phi, star);
        let rules = Rules::new();
        let pieces = 32;
        let mut total = 0.0;
        for m in 0..pieces {
            let lo = a + (b - a) * m as f64 / pieces as f64;
            let hi = if m + 1 == pieces { b } else { a + (b - a) * (m + 1) as f64 / pieces as f64 };
            total += ch.depth(&lane, &rules, lo, hi);
        }
        Ok(total)
    }
}

/// V(η) = −a₁ ln(1 − k₁η) − a₂ ln(1 − k₂η) with kᵢ = ε/Rᵢ.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Lane {
    a1: f64,
    a2: f64,
    k1: f64,
    k2: f64,
}

impl Lane {
    fn new((k1, k2): (f64, f64), a1: f64, a2: f64) -> Self {
        if k1 == k2 {
            // sin² + cos² = 1: every ψ sees the same potential
            return Lane { a1: 1.0, a2: 0.0, k1, k2: 0.0 };
        }
        // sin²ψ at grid angles like ψ = π is ~1e-32, not 0; such a term only
        // matters within rounding distance of its own singularity
        let clean = |a: f64| if a < 1e-14 { 0.0 } else { a };
        Lane { a1: clean(a1), a2: clean(a2), k1, k2 }
    }

    fn circle(k: f64) -> Self {
        Lane { a1: 1.0, a2: 0.0, k1: k, k2: 0.0 }
    }

    fn terms(&self) -> [(f64, f64); 2] {
        [(self.a1, self.k1), (self.a2, self.k2)]
    }

    fn flat(&self) -> bool {
        self.a1 * self.k1 == 0.0 && self.a2 * self.k2 == 0.0
    }

    fn v(&self, eta: f64) -> f64 {
        self.terms()
            .iter()
            .filter(|(a, k)| a * k != 0.0)
            .map(|(a, k)| -a * (-k * eta).ln_1p())
            .sum()
    }

    fn force(&self, eta: f64) -> f64 {
        -self.terms().iter().filter(|(a, k)| a * k != 0.0).map(|(a, k)| a * k / (1.0 - k * eta)).sum::<f64>()
    }

    /// V(ξ) − V(ξ − δ), accurate for small δ.
    fn dv(&self, xi: f64, delta: f64) -> f64 {
        self.terms()
            .iter()
            .filter(|(a, k)| a * k != 0.0)
            .map(|(a, k)| a * (k * delta / (1.0 - k * xi)).ln_1p())
            .sum()
    }

    fn eta_max(&self) -> f64 {
        self.terms()
            .iter()
            .filter(|(a, k)| a * k != 0.0)
            .map(|(_, k)| 1.0 / k)
            .fold(f64::INFINITY, f64::min)
    }

    fn single(&self) -> Option<(f64, f64)> {
        if self.a2 * self.k2 == 0.0 {
            Some((self.a1, self.k1))
        } else if self.a1 * self.k1 == 0.0 {
            Some((self.a2, self.k2))
        } else {
            None
        }
    }

    /// Where the characteristic through (η, φ) becomes grazing; None when flat.
    fn turning_point(&self, eta: f64, phi: f64) -> Option<f64> {
        if self.flat() {
            return None;
        }
        let h2 = 2.0 * (0.5 * phi).sin().powi(2);
        if h2 == 0.0 {
            return Some(eta);
        }
        // −ln cos φ
        let target = -(-h2).ln_1p();
        if let Some((a, k)) = self.single() {
            return Some(eta + (1.0 - k * eta) * (-(-target / a).exp_m1()) / k);
        }
        let (mut lo, mut hi) = (0.0, self.eta_max() - eta);
        let keff = self.a1 * self.k1 + self.a2 * self.k2;
        let mut d = ((1.0 - keff * eta) * (-(-target).exp_m1()) / keff).clamp(0.0, 0.5 * hi);
        for _ in 0..200 {
            let f = self.dv(eta + d, d) - target;
            if !(f <= 0.0) {
                hi = d;
            } else {
                lo = d;
            }
            let fp = -self.force(eta + d);
            let mut nd = d - f / fp;
            if !(nd > lo && nd < hi) || !f.is_finite() {
                nd = 0.5 * (lo + hi);
            }
            let done = (nd - d).abs() <= 1e-16 * (1.0 + nd);
            d = nd;
            if done {
                break;
            }
        }
        Some(eta + d)
    }
}

fn angle_from_one_minus_cos(x: f64) -> f64 {
    2.0 * (0.5 * x.clamp(0.0, 2.0)).sqrt().asin()
}

struct Rules {
    plain: (Vec<f64>, Vec<f64>),
    sub: (Vec<f64>, Vec<f64>),
}

impl Rules {
    fn new() -> Self {
        Rules { plain: gauss_legendre(5), sub: gauss_legendre(6) }
    }
}

/// One characteristic, anchored at the node (η, φ) and, when it exists, at its
/// (possibly virtual) turning point η*.
struct Chord {
    eta: f64,
    phi: f64,
    cos0: f64,
    /// 1 − cos φ, computed without cancellation.
    h2: f64,
    star: Option<f64>,
}

impl Chord {
    fn new(lane: &Lane, eta: f64, phi: f64, star: Option<f64>) -> Self {
        let star = if star.is_some() { star } else { lane.turning_point(eta, phi) };
        Chord { eta, phi, cos0: phi.cos(), h2: 2.0 * (0.5 * phi).sin().powi(2), star }
    }

    fn one_minus_cos_from_node(&self, lane: &Lane, xi: f64) -> f64 {
        self.h2 - self.cos0 * lane.dv(xi, xi - self.eta).exp_m1()
    }

    /// 1 − cos φ'(ξ).
    fn one_minus_cos(&self, lane: &Lane, xi: f64) -> f64 {
        match self.star {
            Some(s) if xi > self.eta => -lane.dv(xi, xi - s).exp_m1(),
            _ => self.one_minus_cos_from_node(lane, xi),
        }
    }

    fn angle(&self, lane: &Lane, xi: f64) -> f64 {
        if lane.flat() {
            return self.phi.abs();
        }
        angle_from_one_minus_cos(self.one_minus_cos(lane, xi).max(0.0))
    }

    /// ∫_a^b dξ / sin φ'(ξ).
    fn depth(&self, lane: &Lane, rules: &Rules, a: f64, b: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        if lane.flat() {
            return (b - a) / self.phi.sin().abs();
        }
        if let Some(s) = self.star {
            if s - b < 8.0 * (b - a) {
                // ξ = s − u²: the 1/√(s−ξ) behaviour becomes a smooth integrand
                let ua = (s - a).max(0.0).sqrt();
                let ub = (s - b).max(0.0).sqrt();
                let (c, h) = (0.5 * (ua + ub), 0.5 * (ua - ub));
                let (x, w) = &rules.sub;
                let mut sum = 0.0;
                for (xi, wi) in x.iter().zip(w) {
                    let u = c + h * xi;
                    let om = -lane.dv(s - u * u, -u * u).exp_m1();
                    sum += wi * 2.0 * u / (om * (2.0 - om)).sqrt();
                }
                return sum * h;
            }
        }
        let (c, h) = (0.5 * (a + b), 0.5 * (b - a));
        let (x, w) = &rules.plain;
        let mut sum = 0.0;
        for (xi, wi) in x.iter().zip(w) {
            let om = self.one_minus_cos(lane, c + h * xi);
            sum += wi / (om * (2.0 - om)).sqrt();
        }
        sum * h
    }
}

#[derive(Debug, Clone, Copy)]
struct Sample {
    pos: f64,
    angle: f64,
    w: f64,
    lo: u32,
}

/// The characteristic of one phase-space point, reduced to weights:
/// f = bweight·h(φ₀) + Σ w·(f̄ + S)(sample).
#[derive(Debug, Clone)]
pub struct NodePath {
    /// In-flow angle where the characteristic leaves the wall.
    pub phi0: f64,
    pub bweight: f64,
    samples: Vec<Sample>,
}

impl NodePath {
    /// Total weight carried by f̄ + S; bweight + this equals 1 without penalty.
    pub fn interior_weight(&self) -> f64 {
        self.samples.iter().map(|s| s.w).sum()
    }
}

struct Tracer<'a> {
    eta: &'a [f64],
    length: f64,
    sigma: f64,
    rules: Rules,
}

impl Tracer<'_> {
    fn sample(&self, pos: f64, angle: f64, w: f64) -> Sample {
        let (lo, _) = locate(self.eta, pos);
        Sample { pos, angle, w, lo: lo as u32 }
    }

    fn trace(&self, lane: &Lane, eta: f64, phi: f64) -> NodePath {
        let eta = eta.clamp(0.0, self.length);
        let sigma = self.sigma;
        if lane.flat() && phi.sin() == 0.0 {
            // grazing line of the flat problem: (1+λ) f = f̄ + S locally
            return NodePath { phi0: 0.0, bweight: 0.0, samples: vec![self.sample(eta, phi, 1.0 / sigma)] };
        }
        let ch = Chord::new(lane, eta, phi, None);
        let (top, ret, turn) = if phi > 0.0 {
            (eta, false, false)
        } else {
            match ch.star {
                Some(s) if s <= self.length => (s.max(eta), true, true),
                _ => (self.length, true, false),
            }
        };

        let mut p = Vec::with_capacity(self.eta.len() + 3);
        p.push(0.0);
        for &g in self.eta.iter() {
            if g > 0.0 && g < top {
                p.push(g);
            }
        }
        if top > 0.0 {
            p.push(top);
        }
        let mut e = p.len() - 1;
        if ret {
            match p.binary_search_by(|v| v.partial_cmp(&eta).unwrap()) {
                Ok(k) => e = k,
                Err(k) => {
                    p.insert(k, eta);
                    e = k;
                }
            }
        }
        let n = p.len() - 1;
        if n == 0 {
            return NodePath { phi0: phi.abs(), bweight: 1.0, samples: Vec::new() };
        }

        let depths: Vec<f64> = (0..n).map(|m| ch.depth(lane, &self.rules, p[m], p[m + 1])).collect();
        let d_out: f64 = depths.iter().sum();
        let d_ret: f64 = if ret { depths[e..].iter().sum() } else { 0.0 };

        let mut wout = vec![0.0; n + 1];
        let mut wret = vec![0.0; n + 1];
        let mut cum = 0.0;
        for m in 0..n {
            cum += depths[m];
            let remaining = (d_out - cum).max(0.0) + d_ret;
            let f = (-sigma * remaining).exp();
            let (a, b) = exp_linear_weights(sigma * depths[m]);
            wout[m] += f * a / sigma;
            wout[m + 1] += f * b / sigma;
        }
        if ret {
            let mut below = d_ret;
            for m in (e..n).rev() {
                below -= depths[m];
                let f = (-sigma * below.max(0.0)).exp();
                let (a, b) = exp_linear_weights(sigma * depths[m]);
                wret[m + 1] += f * a / sigma;
                wret[m] += f * b / sigma;
            }
        }

        let mut samples = Vec::with_capacity(2 * (n + 1));
        for m in 0..=n {
            let w = if turn && m == n { wout[m] + wret[m] } else { wout[m] };
            if w == 0.0 {
                continue;
            }
            let angle = if m == n && !ret {
                phi
            } else if turn && m == n {
                0.0
            } else {
                ch.angle(lane, p[m])
            };
            samples.push(self.sample(p[m], angle, w));
        }
        if ret {
            for m in e..=n {
                if (turn && m == n) || wret[m] == 0.0 {
                    continue;
                }
                let angle = if m == e { phi } else { -ch.angle(lane, p[m]) };
                samples.push(self.sample(p[m], angle, wret[m]));
            }
        }
        NodePath { phi0: ch.angle(lane, 0.0), bweight: (-sigma * (d_out + d_ret)).exp(), samples }
    }
}

/// How f̄ is averaged over angles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AngularMeasure {
    /// Three-dimensional velocities: (1/4π)∬ f cos φ dφ dψ.
    Sphere,
    /// Planar velocities: ψ ∈ {−π/2, π/2} and (1/2π)∫ f dφ over both branches.
    Circle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MilneGridSpec {
    pub n_eta: usize,
    /// Even; half the nodes on each side of φ = 0.
    pub n_phi: usize,
    /// Ignored for the circle measure, which always has two ψ nodes.
    pub n_psi: usize,
    /// Growth ratio of the η spacing away from the wall.
    pub ratio: f64,
    pub measure: AngularMeasure,
}

impl Default for MilneGridSpec {
    fn default() -> Self {
        MilneGridSpec { n_eta: 200, n_phi: 64, n_psi: 8, ratio: 1.15, measure: AngularMeasure::Sphere }
    }
}

impl MilneGridSpec {
    pub fn circle(n_eta: usize, n_phi: usize) -> Self {
        MilneGridSpec { n_eta, n_phi, n_psi: 2, measure: AngularMeasure::Circle, ..Default::default() }
    }

    pub fn sphere(n_eta: usize, n_phi: usize, n_psi: usize) -> Self {
        MilneGridSpec { n_eta, n_phi, n_psi, ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilneGrid {
    pub eta: Vec<f64>,
    pub phi: Vec<f64>,
    /// Raw dφ weights.
    pub phi_w: Vec<f64>,
    pub psi: Vec<f64>,
    /// Raw dψ weights (1 per branch for the circle).
    pub psi_w: Vec<f64>,
    pub measure: AngularMeasure,
    /// Normalized averaging weights, index j·n_psi + k.
    avg_w: Vec<f64>,
}

/// η nodes on [0, L]: spacing grows by `ratio` from the wall until it reaches a
/// cap of 1.5·L/(n−1), then stays uniform; the first spacing is chosen so the
/// last node lands on L.
pub fn graded_eta_grid(n: usize, length: f64, ratio: f64) -> Vec<f64> {
    assert!(n >= 3, "need at least three eta nodes");
    let cap = 1.5 * length / (n - 1) as f64;
    let total = |h0: f64| -> f64 {
        let mut s = 0.0;
        let mut h = h0;
        for _ in 0..n - 1 {
            s += h.min(cap);
            h *= ratio;
        }
        s
    };
    let (mut lo, mut hi) = (0.0, cap);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if total(mid) > length {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let h0 = 0.5 * (lo + hi);
    let scale = length / total(h0);
    let mut eta = Vec::with_capacity(n);
    let mut x = 0.0;
    let mut h = h0;
    eta.push(0.0);
    for _ in 0..n - 1 {
        x += h.min(cap) * scale;
        h *= ratio;
        eta.push(x);
    }
    eta[n - 1] = length;
    eta
}

impl MilneGrid {
    pub fn new(spec: &MilneGridSpec, length: f64) -> Result<Self, MilneError> {
        if spec.n_phi < 2 || spec.n_phi % 2 != 0 {
            return Err(MilneError::Invalid(format!("n_phi must be even and >= 2, got {}", spec.n_phi)));
        }
        if spec.n_eta < 3 {
            return Err(MilneError::Invalid("n_eta must be at least 3".into()));
        }
        if !(spec.ratio >= 1.0) {
            return Err(MilneError::Invalid("eta grading ratio must be >= 1".into()));
        }
        let eta = graded_eta_grid(spec.n_eta, length, spec.ratio);
        let half = spec.n_phi / 2;
        let (x, w) = crate::quadrature::gauss_legendre_on(half, 0.0, FRAC_PI_2);
        let mut phi: Vec<f64> = x.iter().rev().map(|v| -v).collect();
        phi.extend_from_slice(&x);
        let mut phi_w: Vec<f64> = w.iter().rev().copied().collect();
        phi_w.extend_from_slice(&w);
        let (psi, psi_w) = match spec.measure {
            AngularMeasure::Circle => (vec![-FRAC_PI_2, FRAC_PI_2], vec![1.0, 1.0]),
            AngularMeasure::Sphere => {
                if spec.n_psi == 0 {
                    return Err(MilneError::Invalid("n_psi must be positive".into()));
                }
                let n = spec.n_psi;
                (
                    (0..n).map(|k| -PI + 2.0 * PI * k as f64 / n as f64).collect(),
                    vec![2.0 * PI / n as f64; n],
                )
            }
        };
        let mut grid = MilneGrid { eta, phi, phi_w, psi, psi_w, measure: spec.measure, avg_w: Vec::new() };
        let raw: Vec<f64> = (0..grid.phi.len())
            .flat_map(|j| (0..grid.psi.len()).map(move |k| (j, k)))
            .map(|(j, k)| grid.raw_weight(j, k))
            .collect();
        let total: f64 = raw.iter().sum();
        grid.avg_w = raw.iter().map(|r| r / total).collect();
        Ok(grid)
    }

    pub fn n_eta(&self) -> usize {
        self.eta.len()
    }

    pub fn n_phi(&self) -> usize {
        self.phi.len()
    }

    pub fn n_psi(&self) -> usize {
        self.psi.len()
    }

    pub fn len(&self) -> usize {
        self.n_eta() * self.n_phi() * self.n_psi()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.n_phi() + j) * self.n_psi() + k
    }

    /// Quadrature weight of the angular node (j, k) in the un-normalized
    /// measure (cos φ dφ dψ for the sphere, dφ for the circle).
    pub fn raw_weight(&self, j: usize, k: usize) -> f64 {
        match self.measure {
            AngularMeasure::Sphere => self.phi_w[j] * self.phi[j].cos() * self.psi_w[k],
            AngularMeasure::Circle => self.phi_w[j] * self.psi_w[k],
        }
    }

    /// Total angular measure: 4π (sphere) or 2π (circle).
    pub fn measure_total(&self) -> f64 {
        (0..self.n_phi()).flat_map(|j| (0..self.n_psi()).map(move |k| (j, k))).map(|(j, k)| self.raw_weight(j, k)).sum()
    }

    /// Normalized averaging weight of angular node (j, k).
    pub fn avg_weight(&self, j: usize, k: usize) -> f64 {
        self.avg_w[j * self.n_psi() + k]
    }
}

/// Source term S(η, φ, ψ).
#[derive(Clone, Default)]
pub enum Source {
    #[default]
    Zero,
    Function(Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>),
    /// Nodal values on the operator's grid, interpolated linearly in η and φ
    /// (and periodically in ψ off the grid).
    Grid(Arc<Vec<f64>>),
}

impl Source {
    fn is_zero(&self) -> bool {
        matches!(self, Source::Zero)
    }
}

/// Source iteration as the fixed-point map, or a direct solve of the same
/// discrete fixed point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    SourceIteration,
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub scheme: Scheme,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { tol: 1e-8, max_iter: 500, scheme: Scheme::Direct }
    }
}

/// Traced characteristics of every grid node plus the induced f̄ ↦ f̄ map.
pub struct MilneOperator {
    pub params: MilneParams,
    pub grid: MilneGrid,
    lanes: Vec<Lane>,
    lane_class: Vec<usize>,
    /// Per lane class, paths of the nodes (i, j) at index i·n_phi + j.
    paths: Vec<Vec<NodePath>>,
    m: DMatrix<f64>,
    lu: LU<f64, Dyn, Dyn>,
}

impl std::fmt::Debug for MilneOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MilneOperator")
            .field("params", &self.params)
            .field("n_eta", &self.grid.n_eta())
            .field("n_phi", &self.grid.n_phi())
            .field("n_psi", &self.grid.n_psi())
            .field("lane_classes", &self.paths.len())
            .finish()
    }
}

impl MilneOperator {
    pub fn build(params: MilneParams, spec: &MilneGridSpec) -> Result<Self, MilneError> {
        params.validate()?;
        let grid = MilneGrid::new(spec, params.length)?;
        let curv = params.curvatures();
        let lanes: Vec<Lane> = grid
            .psi
            .iter()
            .map(|&psi| match grid.measure {
                AngularMeasure::Circle => Lane::circle(curv.0),
                AngularMeasure::Sphere => params.lane(psi),
            })
            .collect();
        let mut classes: Vec<Lane> = Vec::new();
        let lane_class: Vec<usize> = lanes
            .iter()
            .map(|l| match classes.iter().position(|c| c == l) {
                Some(p) => p,
                None => {
                    classes.push(*l);
                    classes.len() - 1
                }
            })
            .collect();

        let tracer = Tracer { eta: &grid.eta, length: params.length, sigma: 1.0 + params.penalty, rules: Rules::new() };
        let nodes: Vec<(usize, usize)> =
            (0..grid.n_eta()).flat_map(|i| (0..grid.n_phi()).map(move |j| (i, j))).collect();
        let paths: Vec<Vec<NodePath>> = classes
            .iter()
            .map(|lane| nodes.par_iter().map(|&(i, j)| tracer.trace(lane, grid.eta[i], grid.phi[j])).collect())
            .collect();

        let n = grid.n_eta();
        let mut m = DMatrix::<f64>::zeros(n, n);
        for (c, class_paths) in paths.iter().enumerate() {
            for (idx, path) in class_paths.iter().enumerate() {
                let (i, j) = (idx / grid.n_phi(), idx % grid.n_phi());
                let q: f64 = (0..grid.n_psi()).filter(|&k| lane_class[k] == c).map(|k| grid.avg_weight(j, k)).sum();
                if q == 0.0 {
                    continue;
                }
                for s in &path.samples {
                    let lo = s.lo as usize;
                    let t = interp_t(&grid.eta, lo, s.pos);
                    m[(i, lo)] += q * s.w * (1.0 - t);
                    if t > 0.0 {
                        m[(i, lo + 1)] += q * s.w * t;
                    }
                }
            }
        }
        let lu = (DMatrix::<f64>::identity(n, n) - &m).lu();
        Ok(MilneOperator { params, grid, lanes, lane_class, paths, m, lu })
    }

    fn path(&self, i: usize, j: usize, k: usize) -> &NodePath {
        &self.paths[self.lane_class[k]][i * self.grid.n_phi() + j]
    }

    /// The f̄ ↦ f̄ part of one sweep-and-average.
    pub fn averaging_map(&self) -> &DMatrix<f64> {
        &self.m
    }

    fn lane_for(&self, psi: f64) -> Lane {
        match self.grid.measure {
            AngularMeasure::Circle => self.lanes[0],
            AngularMeasure::Sphere => self.params.lane(psi),
        }
    }

    /// Trace the characteristic of an arbitrary point (η ∈ [0, L]).
    pub fn point_path(&self, eta: f64, phi: f64, psi: f64) -> NodePath {
        let tracer =
            Tracer { eta: &self.grid.eta, length: self.params.length, sigma: 1.0 + self.params.penalty, rules: Rules::new() };
        tracer.trace(&self.lane_for(psi), eta, phi)
    }

    fn source_value(&self, source: &Source, pos: f64, angle: f64, psi: f64, k: Option<usize>) -> f64 {
        match source {
            Source::Zero => 0.0,
            Source::Function(f) => f(pos, angle, psi),
            Source::Grid(v) => self.grid_source(v, pos, angle, psi, k),
        }
    }

    fn grid_source(&self, v: &[f64], pos: f64, angle: f64, psi: f64, k: Option<usize>) -> f64 {
        let g = &self.grid;
        let (i, ti) = locate(&g.eta, pos);
        let (j, tj) = locate(&g.phi, angle);
        let at = |k: usize| {
            let f = |ii: usize, jj: usize| v[g.index(ii, jj, k)];
            let lo = (1.0 - tj) * f(i, j) + tj * f(i, j + 1);
            let hi = (1.0 - tj) * f(i + 1, j) + tj * f(i + 1, j + 1);
            (1.0 - ti) * lo + ti * hi
        };
        if let Some(k) = k {
            return at(k);
        }
        match g.measure {
            AngularMeasure::Circle => at(if psi.sin() >= 0.0 { 1 } else { 0 }),
            AngularMeasure::Sphere => {
                let n = g.n_psi();
                let s = (psi + PI).rem_euclid(2.0 * PI) / (2.0 * PI) * n as f64;
                let k0 = (s.floor() as usize).min(n - 1);
                let t = s - k0 as f64;
                (1.0 - t) * at(k0) + t * at((k0 + 1) % n)
            }
        }
    }

    fn path_value(&self, path: &NodePath, inflow: &Inflow, source: &Source, fbar: &[f64], psi: f64, k: Option<usize>) -> f64 {
        let mut v = if path.bweight > 0.0 { path.bweight * inflow(path.phi0, psi) } else { 0.0 };
        for s in &path.samples {
            let lo = s.lo as usize;
            let t = interp_t(&self.grid.eta, lo, s.pos);
            let fb = if t > 0.0 { (1.0 - t) * fbar[lo] + t * fbar[lo + 1] } else { fbar[lo] };
            let src = if source.is_zero() { 0.0 } else { self.source_value(source, s.pos, s.angle, psi, k) };
            v += s.w * (fb + src);
        }
        v
    }

    /// One sweep: f = 𝒦[h] + 𝒯[f̄ + S] at every grid node.
    pub fn sweep(&self, inflow: &Inflow, source: &Source, fbar: &[f64]) -> Vec<f64> {
        let g = &self.grid;
        (0..g.len())
            .into_par_iter()
            .map(|idx| {
                let k = idx % g.n_psi();
                let j = (idx / g.n_psi()) % g.n_phi();
                let i = idx / (g.n_psi() * g.n_phi());
                self.path_value(self.path(i, j, k), inflow, source, fbar, g.psi[k], Some(k))
            })
            .collect()
    }

    /// Angular average of a nodal field, one value per η node.
    pub fn average(&self, f: &[f64]) -> Vec<f64> {
        let g = &self.grid;
        (0..g.n_eta())
            .map(|i| {
                let mut s = 0.0;
                for j in 0..g.n_phi() {
                    for k in 0..g.n_psi() {
                        s += g.avg_weight(j, k) * f[g.index(i, j, k)];
                    }
                }
                s
            })
            .collect()
    }

    /// The affine part b of f̄ ↦ M f̄ + b.
    fn affine_part(&self, inflow: &Inflow, source: &Source) -> DVector<f64> {
        let g = &self.grid;
        let zero = vec![0.0; g.n_eta()];
        let rows: Vec<f64> = (0..g.n_eta())
            .into_par_iter()
            .map(|i| {
                let mut s = 0.0;
                for j in 0..g.n_phi() {
                    for k in 0..g.n_psi() {
                        let path = self.path(i, j, k);
                        let v = if source.is_zero() {
                            if path.bweight > 0.0 { path.bweight * inflow(path.phi0, g.psi[k]) } else { 0.0 }
                        } else {
                            self.path_value(path, inflow, source, &zero, g.psi[k], Some(k))
                        };
                        s += g.avg_weight(j, k) * v;
                    }
                }
                s
            })
            .collect();
        DVector::from_vec(rows)
    }

    pub fn solve(self: &Arc<Self>, inflow: Inflow, source: Source, opts: &SolveOptions) -> Result<MilneSolution, MilneError> {
        let b = self.affine_part(&inflow, &source);
        let n = self.grid.n_eta();
        let mut history = Vec::new();
        let (fbar, iterations) = match opts.scheme {
            Scheme::Direct => {
                let x = self.lu.solve(&b).ok_or_else(|| MilneError::Invalid("singular averaging map".into()))?;
                (x, 1)
            }
            Scheme::SourceIteration => {
                let mut x = DVector::<f64>::zeros(n);
                let mut it = 0;
                loop {
                    let next = &self.m * &x + &b;
                    let upd = (&next - &x).amax();
                    x = next;
                    it += 1;
                    history.push(upd);
                    if upd < opts.tol {
                        break;
                    }
                    if it >= opts.max_iter {
                        return Err(MilneError::NonConvergence { iterations: it, residual: upd, history });
                    }
                }
                (x, it)
            }
        };
        let residual = (&self.m * &fbar + &b - &fbar).amax();
        if opts.scheme == Scheme::Direct {
            history.push(residual);
            if !(residual < opts.tol) {
                return Err(MilneError::NonConvergence { iterations, residual, history });
            }
        }
        let fbar: Vec<f64> = fbar.iter().copied().collect();
        let mut sol = self.solution_from_average(inflow, source, fbar);
        sol.iterations = iterations;
        sol.residual = residual;
        sol.history = history;
        Ok(sol)
    }

    /// Rebuild a solution from a known f̄ (one sweep).
    pub fn solution_from_average(self: &Arc<Self>, inflow: Inflow, source: Source, fbar: Vec<f64>) -> MilneSolution {
        let values = self.sweep(&inflow, &source, &fbar);
        let mut sol = MilneSolution {
            op: Arc::clone(self),
            inflow,
            source,
            fbar,
            values,
            f_l: 0.0,
            iterations: 0,
            residual: 0.0,
            history: Vec::new(),
        };
        sol.f_l = sol.limit_at_l();
        sol
    }
}

fn interp_t(grid: &[f64], lo: usize, pos: f64) -> f64 {
    if lo + 1 >= grid.len() {
        return 0.0;
    }
    let t = (pos - grid[lo]) / (grid[lo + 1] - grid[lo]);
    if t <= 0.0 {
        0.0
    } else {
        t.min(1.0)
    }
}

/// Solved Milne problem.
#[derive(Clone)]
pub struct MilneSolution {
    pub op: Arc<MilneOperator>,
    pub inflow: Inflow,
    pub source: Source,
    /// f̄ on the η nodes.
    pub fbar: Vec<f64>,
    /// f on all grid nodes, indexed by [`MilneGrid::index`].
    pub values: Vec<f64>,
    /// Far-field limit ⟨sin²φ, f⟩(L)/‖sin φ‖².
    pub f_l: f64,
    pub iterations: usize,
    pub residual: f64,
    pub history: Vec<f64>,
}

impl std::fmt::Debug for MilneSolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MilneSolution")
            .field("f_l", &self.f_l)
            .field("iterations", &self.iterations)
            .field("residual", &self.residual)
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    /// None when the profile is constant to rounding.
    pub k0: Option<f64>,
    pub r2: f64,
    pub points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivativeDiagnostics {
    /// sup e^{K₀η} ζ |∂f/∂η|.
    pub weighted_eta: f64,
    /// sup e^{K₀η} |F cos φ ∂f/∂φ|.
    pub weighted_phi: f64,
    /// sup |∂f/∂η| without weights.
    pub unweighted_eta: f64,
    /// In-flow L² norm of h with the sin φ cos φ weight.
    pub inflow_norm_weighted: f64,
    /// In-flow L² norm of h with the plain angular measure.
    pub inflow_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MilneSummary {
    #[serde(rename = "f_L")]
    pub f_l: f64,
    pub iterations: usize,
    pub residual: f64,
    #[serde(rename = "K0_fit")]
    pub k0_fit: Option<f64>,
    pub decay_r2: f64,
    pub odd_flux_at_l: f64,
    pub diagnostics: DerivativeDiagnostics,
}

impl MilneSolution {
    pub fn grid(&self) -> &MilneGrid {
        &self.op.grid
    }

    pub fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.op.grid.index(i, j, k)]
    }

    fn limit_at_l(&self) -> f64 {
        let g = self.grid();
        let i = g.n_eta() - 1;
        let (mut num, mut den) = (0.0, 0.0);
        for j in 0..g.n_phi() {
            let s2 = g.phi[j].sin().powi(2);
            for k in 0..g.n_psi() {
                let q = g.avg_weight(j, k) * s2;
                num += q * self.value(i, j, k);
                den += q;
            }
        }
        num / den
    }

    /// ⟨sin φ, f⟩(L) in the normalized angular measure.
    pub fn odd_flux_at_l(&self) -> f64 {
        let g = self.grid();
        let i = g.n_eta() - 1;
        let mut s = 0.0;
        for j in 0..g.n_phi() {
            for k in 0..g.n_psi() {
                s += g.avg_weight(j, k) * g.phi[j].sin() * self.value(i, j, k);
            }
        }
        s
    }

    /// f at an arbitrary point, by tracing its characteristic.
    pub fn eval(&self, eta: f64, phi: f64, psi: f64) -> f64 {
        self.eval_path(&self.op.point_path(eta, phi, psi), psi)
    }

    /// f along a pre-traced path (paths are data independent, so one trace can
    /// serve every solution built on the same operator).
    pub fn eval_path(&self, path: &NodePath, psi: f64) -> f64 {
        self.op.path_value(path, &self.inflow, &self.source, &self.fbar, psi, None)
    }

    /// Least-squares slope of ln sup_{φ,ψ}|f(η) − f_L| over η ∈ [1, L/2].
    pub fn decay_fit(&self) -> DecayFit {
        let g = self.grid();
        let l = self.op.params.length;
        let scale = 1.0 + self.f_l.abs();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut constant = true;
        for i in 0..g.n_eta() {
            let eta = g.eta[i];
            let mut sup: f64 = 0.0;
            for j in 0..g.n_phi() {
                for k in 0..g.n_psi() {
                    sup = sup.max((self.value(i, j, k) - self.f_l).abs());
                }
            }
            if sup > 1e-12 * scale {
                constant = false;
            }
            if eta >= 1.0 && eta <= 0.5 * l && sup > 0.0 {
                xs.push(eta);
                ys.push(sup.ln());
            }
        }
        if constant || xs.len() < 3 {
            return DecayFit { k0: None, r2: 0.0, points: xs.len() };
        }
        let (slope, _, _, r2) = linear_fit(&xs, &ys);
        DecayFit { k0: Some(-slope), r2, points: xs.len() }
    }

    /// Finite-difference derivative sizes with and without the ζ and e^{K₀η} weights.
    pub fn derivative_diagnostics(&self) -> DerivativeDiagnostics {
        let g = self.grid();
        let p = &self.op.params;
        let k0 = self.decay_fit().k0.unwrap_or(0.0).max(0.0);
        let half = g.n_phi() / 2;
        let mut d = DerivativeDiagnostics {
            weighted_eta: 0.0,
            weighted_phi: 0.0,
            unweighted_eta: 0.0,
            inflow_norm_weighted: 0.0,
            inflow_norm: 0.0,
        };
        for k in 0..g.n_psi() {
            let psi = g.psi[k];
            for i in 0..g.n_eta() {
                let eta = g.eta[i];
                let wexp = (k0 * eta).exp();
                let force = self.op.lane_for(psi).force(eta);
                for j in 0..g.n_phi() {
                    let col = |ii: usize| self.value(ii, j, k);
                    let deta = fd(&g.eta, i, col);
                    // differentiate in φ within one half so the wall jump at φ = 0 is not crossed
                    let (lo, hi) = if j < half { (0, half) } else { (half, g.n_phi()) };
                    let row = |jj: usize| self.value(i, lo + jj, k);
                    let dphi = fd(&g.phi[lo..hi], j - lo, row);
                    let zeta = p.weight_zeta(eta, g.phi[j], psi).unwrap_or(1.0);
                    d.unweighted_eta = d.unweighted_eta.max(deta.abs());
                    d.weighted_eta = d.weighted_eta.max(wexp * zeta * deta.abs());
                    d.weighted_phi = d.weighted_phi.max(wexp * (force * g.phi[j].cos() * dphi).abs());
                }
            }
        }
        let (mut nw, mut n0) = (0.0, 0.0);
        for j in half..g.n_phi() {
            for k in 0..g.n_psi() {
                let h = (self.inflow)(g.phi[j], g.psi[k]);
                let q = g.avg_weight(j, k);
                nw += q * g.phi[j].sin() * g.phi[j].cos() * h * h;
                n0 += q * h * h;
            }
        }
        d.inflow_norm_weighted = nw.sqrt();
        d.inflow_norm = n0.sqrt();
        d
    }

    pub fn summary(&self) -> MilneSummary {
        let fit = self.decay_fit();
        MilneSummary {
            f_l: self.f_l,
            iterations: self.iterations,
            residual: self.residual,
            k0_fit: fit.k0,
            decay_r2: fit.r2,
            odd_flux_at_l: self.odd_flux_at_l(),
            diagnostics: self.derivative_diagnostics(),
        }
    }

    /// CSV dump with columns eta, phi, psi, F, zeta, f. The weight ζ lets the
    /// grazing regions {ζ < 2ε^α} be masked downstream.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let g = self.grid();
        let p = &self.op.params;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["eta", "phi", "psi", "F", "zeta", "f"])?;
        for i in 0..g.n_eta() {
            for j in 0..g.n_phi() {
                for k in 0..g.n_psi() {
                    let force = self.op.lanes[k].force(g.eta[i]);
                    let zeta = p.weight_zeta(g.eta[i], g.phi[j], g.psi[k]).unwrap_or(f64::NAN);
                    w.write_record(&[
                        g.eta[i].to_string(),
                        g.phi[j].to_string(),
                        g.psi[k].to_string(),
                        force.to_string(),
                        zeta.to_string(),
                        self.value(i, j, k).to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Non-uniform finite difference of the sampled function `f` at node `i`.
fn fd(x: &[f64], i: usize, f: impl Fn(usize) -> f64) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    if i == 0 {
        return (f(1) - f(0)) / (x[1] - x[0]);
    }
    if i == n - 1 {
        return (f(n - 1) - f(n - 2)) / (x[n - 1] - x[n - 2]);
    }
    let (h1, h2) = (x[i] - x[i - 1], x[i + 1] - x[i]);
    (h1 * h1 * f(i + 1) - h2 * h2 * f(i - 1) + (h2 * h2 - h1 * h1) * f(i)) / (h1 * h2 * (h1 + h2))
}

/// Build the operator and solve in one call.
pub fn milne_solve(
    params: MilneParams,
    spec: &MilneGridSpec,
    inflow: Inflow,
    source: Source,
    opts: &SolveOptions,
) -> Result<MilneSolution, MilneError> {
    Arc::new(MilneOperator::build(params, spec)?).solve(inflow, source, opts)
}

/// One sweep with a given f̄ on a freshly traced grid.
pub fn milne_sweep(
    params: MilneParams,
    spec: &MilneGridSpec,
    inflow: &Inflow,
    source: &Source,
    fbar: &[f64],
) -> Result<Vec<f64>, MilneError> {
    Ok(MilneOperator::build(params, spec)?.sweep(inflow, source, fbar))
}

/// Far-field limit of a solution.
pub fn milne_limit_fl(sol: &MilneSolution) -> f64 {
    sol.f_l
}
