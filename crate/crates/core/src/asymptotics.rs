//! Composite approximations: interior fields plus boundary and initial layers.
//!
//! The boundary layer at a boundary node is a Milne solution minus its far-field
//! limit. For the geometric variant the in-flow datum is also split into a
//! regular part (flat near grazing) and a singular remainder supported in a
//! thin band φ < 2ε^α; the composite only needs their sum, which by linearity
//! is the full-data layer, but the split is kept for reporting and checks.

use crate::fluid::{
    heat_solve, FirstOrderCorrector, FluidError, HarmonicBall, HarmonicDisk, HeatProblem, HeatSnapshot, InteriorField,
    PolarMesh,
};
use crate::geometry::{boundary_frame, to_layer_coords, Geometry, GeometryError, Vec3};
use crate::milne::{
    AngularMeasure, Inflow, MilneError, MilneGridSpec, MilneOperator, MilneParams, MilneSolution, SolveOptions, Source,
};
use crate::profiles::{BoundaryProfile, InitialProfile};
use crate::quadrature::gauss_legendre;
use crate::report::{ConvergenceReport, ErrorNorms, ErrorRow};
use crate::transport::{
    steady_solve, unsteady_solve, BallTransport, Interpolation, KineticField, KineticProblem, Layout, PhaseFunction,
    PolarGrid, RadialSpacing, SolveControl, TimeBoundaryData, TimeSchedule, TransportError, TransportGridSpec,
    UnsteadyProblem,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AsymptoticsError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("mixing weight lambda = {lambda} is not in (0, 1)")]
    ConstructionFailure { lambda: f64 },
    #[error(transparent)]
    Milne(#[from] MilneError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Fluid(#[from] FluidError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("layer cache: {0}")]
    Cache(String),
}

/// 6t⁵ − 15t⁴ + 10t³ clamped to [0, 1].
pub fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * t * (t * (6.0 * t - 15.0) + 10.0)
}

fn smoothstep_slope(t: f64) -> f64 {
    if t <= 0.0 || t >= 1.0 {
        return 0.0;
    }
    30.0 * t * t * (t - 1.0) * (t - 1.0)
}

/// χ rises from 0 at φ = ε^α to 1 at φ = 2ε^α.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cutoff {
    pub width: f64,
}

impl Cutoff {
    pub fn new(eps: f64, alpha: f64) -> Result<Self, AsymptoticsError> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(AsymptoticsError::Invalid(format!("cutoff exponent alpha must lie in (0, 1], got {alpha}")));
        }
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(AsymptoticsError::Invalid(format!("epsilon must be positive, got {eps}")));
        }
        let width = eps.powf(alpha);
        if 2.0 * width > FRAC_PI_2 {
            return Err(AsymptoticsError::Invalid(format!("cutoff band [{width}, {}] exceeds the in-flow range", 2.0 * width)));
        }
        Ok(Cutoff { width })
    }

    pub fn chi(&self, phi: f64) -> f64 {
        smoothstep(phi / self.width - 1.0)
    }

    pub fn chi_slope(&self, phi: f64) -> f64 {
        smoothstep_slope(phi / self.width - 1.0) / self.width
    }
}

/// g₁ = χg (zero near grazing) and g₂ = χg + 1 − χ (one near grazing), for data
/// already normalized to [0, 1].
pub fn smooth_cutoffs(g: &Inflow, eps: f64, alpha: f64) -> Result<(Inflow, Inflow), AsymptoticsError> {
    let c = Cutoff::new(eps, alpha)?;
    let (ga, gb) = (Arc::clone(g), Arc::clone(g));
    let g1: Inflow = Arc::new(move |phi, psi| c.chi(phi) * ga(phi, psi));
    let g2: Inflow = Arc::new(move |phi, psi| {
        let x = c.chi(phi);
        x * gb(phi, psi) + (1.0 - x)
    });
    Ok((g1, g2))
}

/// max |∂φ g_i| · ε^α over a fine sampling of the in-flow range.
pub fn cutoff_slope(g: &Inflow, eps: f64, alpha: f64, psi: &[f64]) -> Result<f64, AsymptoticsError> {
    let c = Cutoff::new(eps, alpha)?;
    let n = 2000;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for &s in psi {
        for j in 1..n {
            let phi = FRAC_PI_2 * j as f64 / n as f64;
            let (lo, hi) = ((phi - h).max(1e-12), (phi + h).min(FRAC_PI_2));
            let dg = (g(hi, s) - g(lo, s)) / (hi - lo);
            let x = c.chi(phi);
            let d1 = c.chi_slope(phi) * g(phi, s) + x * dg;
            let d2 = c.chi_slope(phi) * (g(phi, s) - 1.0) + x * dg;
            worst = worst.max(d1.abs()).max(d2.abs());
        }
    }
    Ok(worst * c.width)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecompositionOptions {
    pub alpha: f64,
    pub milne: SolveOptions,
}

impl Default for DecompositionOptions {
    fn default() -> Self {
        DecompositionOptions { alpha: 1.0, milne: SolveOptions::default() }
    }
}

/// Regular/singular split g = 𝒢 + 𝔊 at one boundary node.
#[derive(Clone)]
pub struct DataDecomposition {
    pub eps: f64,
    pub alpha: f64,
    pub cutoff: Cutoff,
    /// Affine normalization g_n = (g − lo)/(hi − lo).
    pub lo: f64,
    pub hi: f64,
    /// `None` for constant data, where the split is trivial.
    pub lambda: Option<f64>,
    pub g: Inflow,
    pub f1: Option<MilneSolution>,
    pub f2: Option<MilneSolution>,
    /// sup_ψ |f_λ(0, 0⁺, ψ) − f̄_λ(0)|.
    pub matching_residual: f64,
    /// |∂η f_λ| at (0, ε^α/2) from the layer equation, sup over ψ.
    pub grazing_derivative: f64,
    /// The same derivative by a one-sided difference on the η grid.
    pub grazing_derivative_fd: f64,
}

impl std::fmt::Debug for DataDecomposition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DataDecomposition")
            .field("eps", &self.eps)
            .field("alpha", &self.alpha)
            .field("lambda", &self.lambda)
            .field("matching_residual", &self.matching_residual)
            .field("grazing_derivative", &self.grazing_derivative)
            .finish()
    }
}

impl DataDecomposition {
    fn normalized_lambda(&self, phi: f64, psi: f64) -> f64 {
        let gn = (self.g)(phi, psi) - self.lo;
        let gn = gn / (self.hi - self.lo);
        let x = self.cutoff.chi(phi);
        let l = self.lambda.unwrap_or(1.0);
        x * gn + (1.0 - l) * (1.0 - x)
    }

    /// 𝒢(φ, ψ).
    pub fn regular(&self, phi: f64, psi: f64) -> f64 {
        if self.lambda.is_none() || self.cutoff.chi(phi) >= 1.0 {
            return (self.g)(phi, psi);
        }
        self.lo + (self.hi - self.lo) * self.normalized_lambda(phi, psi)
    }

    /// 𝔊(φ, ψ) = g − 𝒢, exactly zero outside the grazing band.
    pub fn singular(&self, phi: f64, psi: f64) -> f64 {
        if self.lambda.is_none() || self.cutoff.chi(phi) >= 1.0 {
            return 0.0;
        }
        (self.g)(phi, psi) - self.regular(phi, psi)
    }

    /// Far-field limit of the regular layer, in the original scale.
    pub fn regular_limit(&self) -> Option<f64> {
        let (l, f1, f2) = (self.lambda?, self.f1.as_ref()?, self.f2.as_ref()?);
        Some(self.lo + (self.hi - self.lo) * (l * f1.f_l + (1.0 - l) * f2.f_l))
    }
}

fn data_range(g: &Inflow, op: &MilneOperator) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let n = 512;
    let mut psis = op.grid.psi.clone();
    if op.grid.measure == AngularMeasure::Sphere {
        psis.extend((0..16).map(|k| -PI + TAU * k as f64 / 16.0));
    }
    for &psi in &psis {
        let phis = op.grid.phi.iter().copied().filter(|p| *p > 0.0).chain((1..=n).map(|j| FRAC_PI_2 * j as f64 / n as f64));
        for phi in phis {
            let v = g(phi, psi);
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    (lo, hi)
}

fn trivial_decomposition(g: Inflow, op: &MilneOperator, opts: &DecompositionOptions) -> Result<DataDecomposition, AsymptoticsError> {
    let eps = op.params.eps;
    Ok(DataDecomposition {
        eps,
        alpha: opts.alpha,
        cutoff: Cutoff::new(eps, opts.alpha)?,
        lo: 0.0,
        hi: 0.0,
        lambda: None,
        g,
        f1: None,
        f2: None,
        matching_residual: 0.0,
        grazing_derivative: 0.0,
        grazing_derivative_fd: 0.0,
    })
}

/// Split the in-flow datum `g` on the operator's slab and certify the split.
pub fn decompose_boundary_data(
    g: Inflow,
    op: &Arc<MilneOperator>,
    opts: &DecompositionOptions,
) -> Result<DataDecomposition, AsymptoticsError> {
    let (lo, hi) = data_range(&g, op);
    let d = DataDecomposition { lo, hi, ..trivial_decomposition(g, op, opts)? };
    if hi - lo <= 1e-14 * (1.0 + hi.abs()) {
        return Ok(d);
    }
    let (g1, g2) = normalized_cutoffs(&d)?;
    let f1 = op.solve(g1, Source::Zero, &opts.milne)?;
    let f2 = op.solve(g2, Source::Zero, &opts.milne)?;
    certify(d, op, f1, f2)
}

fn normalized_cutoffs(d: &DataDecomposition) -> Result<(Inflow, Inflow), AsymptoticsError> {
    let (a, b) = (d.lo, d.hi - d.lo);
    let gc = Arc::clone(&d.g);
    let gn: Inflow = Arc::new(move |phi, psi| (gc(phi, psi) - a) / b);
    smooth_cutoffs(&gn, d.eps, d.alpha)
}

/// λ from the two cutoff solutions, then the matching residual and the
/// grazing-corner derivative of f_λ.
fn certify(
    mut d: DataDecomposition,
    op: &Arc<MilneOperator>,
    f1: MilneSolution,
    f2: MilneSolution,
) -> Result<DataDecomposition, AsymptoticsError> {
    let lambda = (1.0 - f2.fbar[0]) / (1.0 - f2.fbar[0] + f1.fbar[0]);
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(AsymptoticsError::ConstructionFailure { lambda });
    }
    let fbar0 = lambda * f1.fbar[0] + (1.0 - lambda) * f2.fbar[0];
    let f_lambda = |eta: f64, phi: f64, psi: f64| {
        let path = op.point_path(eta, phi, psi);
        lambda * f1.eval_path(&path, psi) + (1.0 - lambda) * f2.eval_path(&path, psi)
    };
    let phi_c = 0.5 * d.cutoff.width;
    let eta1 = op.grid.eta[1];
    let mut psis = op.grid.psi.clone();
    psis.dedup();
    let (mut matching, mut cert, mut fd) = (0.0f64, 0.0f64, 0.0f64);
    for &psi in &psis {
        matching = matching.max((f_lambda(0.0, 1e-12, psi) - fbar0).abs());
        // the datum is flat in φ on the band, so ∂φ f vanishes at the wall
        let h = 1e-3 * d.cutoff.width;
        let dphi = (f_lambda(0.0, phi_c + h, psi) - f_lambda(0.0, phi_c - h, psi)) / (2.0 * h);
        let force = op.params.force_f(0.0, psi)?;
        let f0 = f_lambda(0.0, phi_c, psi);
        cert = cert.max((force * phi_c.cos() * dphi + f0 - fbar0).abs() / phi_c.sin());
        fd = fd.max(((f_lambda(eta1, phi_c, psi) - f0) / eta1).abs());
    }
    d.lambda = Some(lambda);
    d.f1 = Some(f1);
    d.f2 = Some(f2);
    d.matching_residual = matching;
    d.grazing_derivative = cert;
    d.grazing_derivative_fd = fd;
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Layers with the curvature force.
    Geometric,
    /// Classical flat Milne layers (F ≡ 0).
    Flat,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Geometric => "geometric",
            Variant::Flat => "flat",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpansionConfig {
    pub alpha: f64,
    /// 0 or 1.
    pub order: u8,
    pub n_eta: usize,
    pub n_phi: usize,
    /// ψ nodes on the sphere (the circle always uses two).
    pub n_psi: usize,
    pub ratio: f64,
    /// L = ε^{−length_exponent}.
    pub length_exponent: f64,
    /// Boundary nodes carrying a layer solve (even, on the disk).
    pub n_boundary: usize,
    pub milne: SolveOptions,
    /// Nodes deeper than interior_cut·ε count as interior.
    pub interior_cut: f64,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        ExpansionConfig {
            alpha: 1.0,
            order: 0,
            n_eta: 200,
            n_phi: 64,
            n_psi: 8,
            ratio: 1.15,
            length_exponent: 0.5,
            n_boundary: 32,
            milne: SolveOptions::default(),
            interior_cut: 10.0,
        }
    }
}

impl ExpansionConfig {
    pub fn validate(&self) -> Result<(), AsymptoticsError> {
        if self.order > 1 {
            return Err(AsymptoticsError::Invalid(format!("order must be 0 or 1, got {}", self.order)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(AsymptoticsError::Invalid(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if self.n_boundary < 4 || self.n_boundary % 2 == 1 {
            return Err(AsymptoticsError::Invalid("n_boundary must be even and at least 4".into()));
        }
        if !(self.interior_cut >= 0.0) {
            return Err(AsymptoticsError::Invalid("interior_cut must be non-negative".into()));
        }
        Ok(())
    }

    fn grid_spec(&self, geometry: &Geometry) -> MilneGridSpec {
        let base = match geometry {
            Geometry::Ball { .. } => MilneGridSpec::sphere(self.n_eta, self.n_phi, self.n_psi),
            _ => MilneGridSpec::circle(self.n_eta, self.n_phi),
        };
        MilneGridSpec { ratio: self.ratio, ..base }
    }
}

/// Layer data at one boundary node.
#[derive(Clone)]
pub struct LayerNode {
    /// Disk: polar angle of the node; ball: its polar angle θ.
    pub iota: f64,
    /// Milne solution with the full datum; 𝒰₀ + 𝔘₀ is this minus its limit.
    pub full: MilneSolution,
    /// Geometric variant only.
    pub decomposition: Option<DataDecomposition>,
    pub first: Option<MilneSolution>,
}

impl LayerNode {
    /// 𝓕_{0,L} of the regular layer (the full limit when the split is trivial).
    pub fn regular_limit(&self) -> f64 {
        self.decomposition.as_ref().and_then(|d| d.regular_limit()).unwrap_or(self.full.f_l)
    }

    /// 𝔉_{0,L} of the singular layer.
    pub fn singular_limit(&self) -> f64 {
        self.full.f_l - self.regular_limit()
    }
}

/// Layers at every boundary node plus the interior fields they feed.
pub struct LayerStack {
    pub geometry: Geometry,
    pub eps: f64,
    pub variant: Variant,
    pub config: ExpansionConfig,
    pub op: Arc<MilneOperator>,
    pub nodes: Vec<LayerNode>,
    /// U₀, the harmonic extension of the layer limits.
    pub u0: InteriorField,
    pub corrector: Option<FirstOrderCorrector>,
    pub from_cache: bool,
}

#[derive(Serialize, Deserialize)]
struct CachedNode {
    iota: f64,
    full: Vec<f64>,
    lambda: Option<f64>,
    f1: Option<Vec<f64>>,
    f2: Option<Vec<f64>>,
}

fn cache_key(geometry: &Geometry, eps: f64, profile: &BoundaryProfile, cfg: &ExpansionConfig, variant: Variant) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(geometry).unwrap_or_default());
    h.update(eps.to_bits().to_le_bytes());
    h.update(serde_json::to_vec(profile).unwrap_or_default());
    h.update(serde_json::to_vec(cfg).unwrap_or_default());
    h.update(variant.name().as_bytes());
    format!("{:x}", h.finalize())
}

/// Centred difference in ι of per-node nodal arrays (periodic).
fn tangential_derivative(layers: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = layers.len();
    let d = TAU / m as f64;
    (0..m)
        .map(|a| {
            let (p, q) = (&layers[(a + 1) % m], &layers[(a + m - 1) % m]);
            p.iter().zip(q).map(|(x, y)| (x - y) / (2.0 * d)).collect()
        })
        .collect()
}

/// Dirichlet-kernel weights of trigonometric interpolation through M
/// equispaced nodes (M even).
fn periodic_weights(theta: f64, m: usize) -> Vec<f64> {
    let mf = m as f64;
    (0..m)
        .map(|a| {
            let t = theta - TAU * a as f64 / mf;
            let s = (0.5 * t).sin();
            if s.abs() < 1e-14 {
                // the kernel is 2π-periodic for even M
                1.0
            } else {
                (0.5 * mf * t).sin() / (mf * (0.5 * t).tan())
            }
        })
        .collect()
}

fn wrap_angle(t: f64) -> f64 {
    let w = (t + PI).rem_euclid(TAU) - PI;
    if w < -PI { -PI } else { w }
}

impl LayerStack {
    pub fn build(
        geometry: &Geometry,
        eps: f64,
        profile: &BoundaryProfile,
        cfg: &ExpansionConfig,
        variant: Variant,
        cache: Option<&Path>,
    ) -> Result<Self, AsymptoticsError> {
        cfg.validate()?;
        profile.validate().map_err(AsymptoticsError::Invalid)?;
        let r = geometry.radius();
        let ball = match geometry {
            Geometry::Disk { .. } => false,
            Geometry::Ball { .. } => true,
            Geometry::Annulus { .. } => {
                return Err(AsymptoticsError::Unsupported("layer expansions are built for the disk and the ball".into()))
            }
        };
        if ball && cfg.order > 0 {
            return Err(AsymptoticsError::Unsupported("first-order layers are built on the disk only".into()));
        }
        let params = match variant {
            Variant::Geometric => MilneParams::new(eps, r, if ball { r } else { f64::INFINITY }),
            Variant::Flat => MilneParams::flat(eps),
        }
        .with_length_exponent(cfg.length_exponent);
        let op = Arc::new(MilneOperator::build(params, &cfg.grid_spec(geometry))?);

        let invariant = profile.rotationally_invariant();
        let iotas: Vec<f64> = if invariant {
            vec![if ball { FRAC_PI_2 } else { 0.0 }]
        } else if ball {
            let (mu, _) = gauss_legendre(cfg.n_boundary);
            mu.iter().map(|m| m.acos()).collect()
        } else {
            (0..cfg.n_boundary).map(|a| TAU * a as f64 / cfg.n_boundary as f64).collect()
        };

        let file = cache.map(|dir| dir.join(format!("layers-{}.json", cache_key(geometry, eps, profile, cfg, variant))));
        let cached: Option<Vec<CachedNode>> = file
            .as_ref()
            .filter(|f| f.exists())
            .and_then(|f| std::fs::read(f).ok())
            .and_then(|bytes| serde_json::from_slice(&bytes).ok())
            .filter(|v: &Vec<CachedNode>| v.len() == iotas.len());
        let from_cache = cached.is_some();
        let dopts = DecompositionOptions { alpha: cfg.alpha, milne: cfg.milne };

        let mut nodes: Vec<LayerNode> = match &cached {
            Some(c) => c
                .iter()
                .map(|cn| rebuild_node(&op, profile, cn, &dopts))
                .collect::<Result<Vec<_>, _>>()?,
            None => iotas
                .par_iter()
                .map(|&iota| -> Result<LayerNode, AsymptoticsError> {
                    let g = profile.inflow_at(iota);
                    let full = op.solve(Arc::clone(&g), Source::Zero, &cfg.milne)?;
                    let decomposition = match variant {
                        Variant::Geometric => Some(decompose_boundary_data(g, &op, &dopts)?),
                        Variant::Flat => None,
                    };
                    Ok(LayerNode { iota, full, decomposition, first: None })
                })
                .collect::<Result<Vec<_>, _>>()?,
        };

        let limits: Vec<f64> = nodes.iter().map(|n| n.full.f_l).collect();
        let u0 = if invariant {
            InteriorField::constant(geometry, limits[0])
        } else if ball {
            InteriorField::Ball(HarmonicBall::from_gauss_samples(r, &limits))
        } else {
            InteriorField::Disk(HarmonicDisk::from_samples(r, &limits))
        };

        let mut corrector = None;
        if cfg.order == 1 {
            if nodes.iter().all(|n| n.first.is_none()) {
                let firsts = first_order_layers(geometry, &op, &nodes, &u0, cfg, invariant)?;
                for (n, f) in nodes.iter_mut().zip(firsts) {
                    n.first = Some(f);
                }
            }
            let f1l: Vec<f64> = nodes.iter().map(|n| n.first.as_ref().map_or(0.0, |f| f.f_l)).collect();
            let ubar1 = if invariant {
                InteriorField::constant(geometry, f1l[0])
            } else {
                InteriorField::Disk(HarmonicDisk::from_samples(r, &f1l))
            };
            corrector = Some(FirstOrderCorrector { ubar1, u0: u0.clone() });
        }

        if let (Some(f), false) = (&file, from_cache) {
            let store: Vec<CachedNode> = nodes
                .iter()
                .map(|n| CachedNode {
                    iota: n.iota,
                    full: n.full.fbar.clone(),
                    lambda: n.decomposition.as_ref().and_then(|d| d.lambda),
                    f1: n.decomposition.as_ref().and_then(|d| d.f1.as_ref().map(|s| s.fbar.clone())),
                    f2: n.decomposition.as_ref().and_then(|d| d.f2.as_ref().map(|s| s.fbar.clone())),
                })
                .collect();
            let bytes = serde_json::to_vec(&store).map_err(|e| AsymptoticsError::Cache(e.to_string()))?;
            std::fs::write(f, bytes).map_err(|e| AsymptoticsError::Cache(format!("{}: {e}", f.display())))?;
        }

        Ok(LayerStack { geometry: *geometry, eps, variant, config: *cfg, op, nodes, u0, corrector, from_cache })
    }

    pub fn is_invariant(&self) -> bool {
        self.nodes.len() == 1
    }

    /// Interpolation weights over the boundary nodes at chart angle ι.
    fn node_weights(&self, iota: f64) -> Vec<(usize, f64)> {
        let m = self.nodes.len();
        if m == 1 {
            return vec![(0, 1.0)];
        }
        match self.geometry {
            Geometry::Ball { .. } => {
                // nodes are stored with θ decreasing
                let th: Vec<f64> = self.nodes.iter().map(|n| n.iota).collect();
                if iota >= th[0] {
                    return vec![(0, 1.0)];
                }
                if iota <= th[m - 1] {
                    return vec![(m - 1, 1.0)];
                }
                let j = (0..m - 1).find(|&j| iota <= th[j] && iota >= th[j + 1]).unwrap_or(m - 2);
                let t = (th[j] - iota) / (th[j] - th[j + 1]);
                vec![(j, 1.0 - t), (j + 1, t)]
            }
            _ => periodic_weights(iota, m).into_iter().enumerate().collect(),
        }
    }

    /// Per-node layer values (solution minus limit) along one traced path.
    fn layer_samples(&self, eta: f64, phi: f64, psi: f64, first: bool) -> Vec<f64> {
        let path = self.op.point_path(eta, phi, psi);
        self.nodes
            .iter()
            .map(|n| {
                let s = if first { n.first.as_ref() } else { Some(&n.full) };
                s.map_or(0.0, |s| s.eval_path(&path, psi) - s.f_l)
            })
            .collect()
    }

    /// Order-0 layer 𝒰₀ + 𝔘₀ (plus ε𝒰₁ at order 1) at (x, w); zero past the slab.
    pub fn layer_value(&self, x: &Vec3, w: &Vec3) -> f64 {
        let c = match to_layer_coords(&self.geometry, x, w, self.eps) {
            Ok(c) => c,
            Err(_) => return 0.0,
        };
        if c.eta > self.op.params.length {
            return 0.0;
        }
        let wts = self.node_weights(c.iota1);
        let v0 = self.layer_samples(c.eta, c.phi, c.psi, false);
        let mut v: f64 = wts.iter().map(|(m, q)| q * v0[*m]).sum();
        if self.config.order == 1 {
            let v1 = self.layer_samples(c.eta, c.phi, c.psi, true);
            v += self.eps * wts.iter().map(|(m, q)| q * v1[*m]).sum::<f64>();
        }
        v
    }

    /// Interior part U₀ (+ εU₁).
    pub fn interior_value(&self, x: &Vec3, w: &Vec3) -> f64 {
        let mut v = self.u0.value(x);
        if let Some(c) = &self.corrector {
            v += self.eps * c.value(x, w);
        }
        v
    }

    /// The steady composite.
    pub fn value(&self, x: &Vec3, w: &Vec3) -> f64 {
        self.interior_value(x, w) + self.layer_value(x, w)
    }

    /// Layer values at every (node, ordinate) of a reference field. On polar
    /// layouts one trace per (radius, relative angle) serves every θ node.
    pub fn layer_on_field(&self, field: &KineticField) -> Vec<f64> {
        let no = field.n_ordinates();
        let l = self.op.params.length;
        match &field.layout {
            Layout::Polar { r, n_theta } if self.geometry.inner_radius().is_none() && no % n_theta == 0 => {
                let nt = *n_theta;
                let shift = no / nt;
                let big_r = self.geometry.radius();
                let mut out = vec![0.0; field.values.len()];
                let rows: Vec<(usize, Vec<Vec<f64>>)> = r
                    .par_iter()
                    .enumerate()
                    .filter(|(_, ri)| (big_r - **ri) / self.eps <= l && big_r - **ri < self.geometry.collar_width())
                    .map(|(i, _)| {
                        let x = field.nodes[i * nt];
                        let per_k: Vec<Vec<f64>> = (0..no)
                            .map(|k| {
                                let c = match to_layer_coords(&self.geometry, &x, &field.ordinates[k], self.eps) {
                                    Ok(c) => c,
                                    Err(_) => return vec![0.0; 2 * self.nodes.len()],
                                };
                                let mut v = self.layer_samples(c.eta, c.phi, c.psi, false);
                                if self.config.order == 1 {
                                    v.extend(self.layer_samples(c.eta, c.phi, c.psi, true));
                                } else {
                                    v.extend(std::iter::repeat(0.0).take(self.nodes.len()));
                                }
                                v
                            })
                            .collect();
                        (i, per_k)
                    })
                    .collect();
                let m = self.nodes.len();
                for (i, per_k) in rows {
                    for a in 0..nt {
                        let n = i * nt + a;
                        let x = field.nodes[n];
                        let wts = self.node_weights(x.y.atan2(x.x));
                        for (kb, v) in per_k.iter().enumerate() {
                            let k = (kb + a * shift) % no;
                            let mut s: f64 = wts.iter().map(|(j, q)| q * v[*j]).sum();
                            if self.config.order == 1 {
                                s += self.eps * wts.iter().map(|(j, q)| q * v[m + *j]).sum::<f64>();
                            }
                            out[n * no + k] = s;
                        }
                    }
                }
                out
            }
            _ => (0..field.n_nodes())
                .into_par_iter()
                .flat_map_iter(|n| {
                    let x = field.nodes[n];
                    (0..no).map(move |k| self.layer_value(&x, &field.ordinates[k]))
                })
                .collect(),
        }
    }

    /// Composite values at every (node, ordinate) of a reference field.
    pub fn composite_on_field(&self, field: &KineticField) -> Vec<f64> {
        let mut v = self.layer_on_field(field);
        let no = field.n_ordinates();
        v.par_chunks_mut(no).enumerate().for_each(|(n, row)| {
            let x = field.nodes[n];
            for (k, e) in row.iter_mut().enumerate() {
                *e += self.interior_value(&x, &field.ordinates[k]);
            }
        });
        v
    }

    /// sup over boundary in-flow directions of |composite − g|.
    pub fn boundary_consistency(&self, profile: &BoundaryProfile, n_theta: usize, n_dir: usize) -> f64 {
        let mut worst: f64 = 0.0;
        for a in 0..n_theta {
            let iota = match self.geometry {
                Geometry::Ball { .. } => PI * (a as f64 + 0.5) / n_theta as f64,
                _ => wrap_angle(TAU * a as f64 / n_theta as f64 + 0.1),
            };
            let frame = match boundary_frame(&self.geometry, iota, 0.0) {
                Ok(f) => f,
                Err(_) => continue,
            };
            let x = frame.x0;
            for j in 0..n_dir {
                let phi = FRAC_PI_2 * (j as f64 + 0.5) / n_dir as f64;
                for psi in [-FRAC_PI_2, FRAC_PI_2, 0.3] {
                    if !matches!(self.geometry, Geometry::Ball { .. }) && psi == 0.3 {
                        continue;
                    }
                    let w = frame.velocity(phi, psi);
                    let g = profile.eval(&self.geometry, &x, &w);
                    worst = worst.max((self.value(&x, &w) - g).abs());
                }
            }
        }
        worst
    }
}

fn rebuild_node(
    op: &Arc<MilneOperator>,
    profile: &BoundaryProfile,
    cn: &CachedNode,
    dopts: &DecompositionOptions,
) -> Result<LayerNode, AsymptoticsError> {
    let g = profile.inflow_at(cn.iota);
    let full = op.solution_from_average(Arc::clone(&g), Source::Zero, cn.full.clone());
    let decomposition = match (cn.lambda, &cn.f1, &cn.f2) {
        (Some(_), Some(a), Some(b)) => {
            let (lo, hi) = data_range(&g, op);
            let d = DataDecomposition { lo, hi, ..trivial_decomposition(g, op, dopts)? };
            let (g1, g2) = normalized_cutoffs(&d)?;
            let f1 = op.solution_from_average(g1, Source::Zero, a.clone());
            let f2 = op.solution_from_average(g2, Source::Zero, b.clone());
            Some(certify(d, op, f1, f2)?)
        }
        (None, None, None) if op.params.geometric => Some(trivial_decomposition(g, op, dopts)?),
        (None, None, None) => None,
        _ => return Err(AsymptoticsError::Cache("incomplete cached node".into())),
    };
    Ok(LayerNode { iota: cn.iota, full, decomposition, first: None })
}

fn first_order_layers(
    geometry: &Geometry,
    op: &Arc<MilneOperator>,
    nodes: &[LayerNode],
    u0: &InteriorField,
    cfg: &ExpansionConfig,
    invariant: bool,
) -> Result<Vec<MilneSolution>, AsymptoticsError> {
    let r = geometry.radius();
    let g = &op.grid;
    let eps = op.params.eps;
    let layers: Vec<Vec<f64>> = nodes.iter().map(|n| n.full.values.iter().map(|v| v - n.full.f_l).collect()).collect();
    let deriv = if invariant { vec![vec![0.0; g.len()]] } else { tangential_derivative(&layers) };
    nodes
        .par_iter()
        .zip(deriv.par_iter())
        .map(|(n, d)| {
            let frame = boundary_frame(geometry, wrap_angle(n.iota), 0.0)?;
            let grad = u0.gradient(&frame.x0);
            let inflow: Inflow = Arc::new(move |phi, psi| frame.velocity(phi, psi).dot(&grad));
            let mut src = vec![0.0; g.len()];
            for i in 0..g.n_eta() {
                let scale = 1.0 / (r * (1.0 - eps * g.eta[i] / r));
                for j in 0..g.n_phi() {
                    for k in 0..g.n_psi() {
                        let idx = g.index(i, j, k);
                        src[idx] = -g.phi[j].cos() * g.psi[k].sin() * scale * d[idx];
                    }
                }
            }
            Ok(op.solve(inflow, Source::Grid(Arc::new(src)), &cfg.milne)?)
        })
        .collect()
}

/// Initial layer e^{−τ}(h − h̄), with the first-order closed form available.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialLayer {
    pub profile: InitialProfile,
    pub radius: f64,
    pub dim: usize,
}

impl InitialLayer {
    pub fn new(profile: InitialProfile, geometry: &Geometry) -> Self {
        InitialLayer { profile, radius: geometry.radius(), dim: geometry.dim() }
    }

    /// 𝒰ᴵ₀(τ, x, w).
    pub fn order0(&self, tau: f64, x: &Vec3, w: &Vec3) -> f64 {
        (-tau).exp() * (self.profile.eval(self.radius, x, w) - self.profile.average(self.radius, x, self.dim))
    }

    fn anisotropy_gradient(&self, x: &Vec3, w: &Vec3) -> Vec3 {
        let h = 1e-6 * self.radius;
        let f = |y: &Vec3| self.profile.eval(self.radius, y, w) - self.profile.average(self.radius, y, self.dim);
        let mut g = Vec3::zeros();
        for d in 0..self.dim {
            let mut e = Vec3::zeros();
            e[d] = h;
            g[d] = (f(&(x + e)) - f(&(x - e))) / (2.0 * h);
        }
        g
    }

    /// 𝒰ᴵ₁(τ, x, w) = e^{−τ}(w·∇U₀(0, x) + ⟨w·∇(h − h̄)⟩ − w·∇(h − h̄)), planar velocities.
    pub fn order1(&self, tau: f64, x: &Vec3, w: &Vec3, grad_u0: &Vec3) -> f64 {
        let n = 64;
        let mean: f64 = (0..n)
            .map(|k| {
                let t = TAU * (k as f64 + 0.5) / n as f64;
                let v = Vec3::new(t.cos(), t.sin(), 0.0);
                v.dot(&self.anisotropy_gradient(x, &v))
            })
            .sum::<f64>()
            / n as f64;
        (-tau).exp() * (w.dot(grad_u0) + mean - w.dot(&self.anisotropy_gradient(x, w)))
    }
}

/// Clause-by-clause check of the initial/boundary compatibility conditions on Γ⁻.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompatibilityReport {
    /// sup |h − g(0)|.
    pub basic: f64,
    /// sup |∂t g(0)|.
    pub time_derivative: f64,
    /// sup |w·∇h|.
    pub transport: f64,
    /// sup |h − h̄|.
    pub anisotropy: f64,
    pub basic_holds: bool,
    pub improved_holds: bool,
    /// Whether the boundary layers at t = 0 are licensed to vanish.
    pub layers_vanish: bool,
}

pub fn compatibility_check(
    geometry: &Geometry,
    h: &PhaseFunction,
    g: &TimeBoundaryData,
    n_boundary: usize,
    n_dir: usize,
    tol: f64,
) -> CompatibilityReport {
    let r = geometry.radius();
    let dim = geometry.dim();
    let dt = 1e-6;
    let dx = 1e-6 * r;
    let (mut basic, mut tder, mut trans, mut aniso) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for a in 0..n_boundary {
        let iota = match geometry {
            Geometry::Ball { .. } => PI * (a as f64 + 0.5) / n_boundary as f64,
            _ => -PI + TAU * a as f64 / n_boundary as f64,
        };
        let frame = match boundary_frame(geometry, iota, 0.0) {
            Ok(f) => f,
            Err(_) => continue,
        };
        let x0 = frame.x0;
        // h̄ from a quadrature over all directions
        let dirs: Vec<Vec3> = if dim == 2 {
            (0..64).map(|k| {
                let t = TAU * (k as f64 + 0.5) / 64.0;
                Vec3::new(t.cos(), t.sin(), 0.0)
            })
            .collect()
        } else {
            let (mu, _) = gauss_legendre(16);
            mu.iter()
                .flat_map(|m| {
                    let s = (1.0 - m * m).sqrt();
                    (0..32).map(move |k| {
                        let t = TAU * (k as f64 + 0.5) / 32.0;
                        Vec3::new(s * t.cos(), s * t.sin(), *m)
                    })
                })
                .collect()
        };
        let hbar = if dim == 2 {
            dirs.iter().map(|w| h(&x0, w)).sum::<f64>() / dirs.len() as f64
        } else {
            let (mu, wt) = gauss_legendre(16);
            let mut s = 0.0;
            for (j, _) in mu.iter().enumerate() {
                for k in 0..32 {
                    s += wt[j] / 2.0 / 32.0 * h(&x0, &dirs[j * 32 + k]);
                }
            }
            s
        };
        for j in 0..n_dir {
            let phi = FRAC_PI_2 * (j as f64 + 0.5) / n_dir as f64;
            let psis: &[f64] = if dim == 2 { &[-FRAC_PI_2, FRAC_PI_2] } else { &[-FRAC_PI_2, 0.0, FRAC_PI_2, PI] };
            for &psi in psis {
                let w = frame.velocity(phi, psi);
                let hv = h(&x0, &w);
                basic = basic.max((hv - g(0.0, &x0, &w)).abs());
                tder = tder.max(((g(dt, &x0, &w) - g(0.0, &x0, &w)) / dt).abs());
                trans = trans.max(((h(&(x0 + dx * w), &w) - hv) / dx).abs());
                aniso = aniso.max((hv - hbar).abs());
            }
        }
    }
    let basic_holds = basic <= tol;
    // finite differences carry O(δ) error
    let improved_holds = basic_holds && tder <= tol.max(1e-5) && trans <= tol.max(1e-5) && aniso <= tol;
    CompatibilityReport {
        basic,
        time_derivative: tder,
        transport: trans,
        anisotropy: aniso,
        basic_holds,
        improved_holds,
        layers_vanish: improved_holds,
    }
}

/// Spatial quadrature weight of every node of a field.
pub fn node_volumes(field: &KineticField) -> Vec<f64> {
    let trap = |r: &[f64], p: i32| -> Vec<f64> {
        let n = r.len();
        let f = |x: f64| x.powi(p);
        let mut w = vec![0.0; n];
        for i in 0..n - 1 {
            let h = r[i + 1] - r[i];
            w[i] += 0.5 * h * f(r[i]);
            w[i + 1] += 0.5 * h * f(r[i + 1]);
        }
        if r[0] > 0.0 && field.geometry.inner_radius().is_none() {
            w[0] += r[0].powi(p + 1) / (p + 1) as f64;
        }
        w
    };
    match &field.layout {
        Layout::Polar { r, n_theta } => {
            let w = trap(r, 1);
            let dt = TAU / *n_theta as f64;
            w.iter().flat_map(|wi| std::iter::repeat(wi * dt).take(*n_theta)).collect()
        }
        Layout::Meridian { r, n_polar } => {
            let w = trap(r, 2);
            let dt = PI / *n_polar as f64;
            w.iter()
                .flat_map(|wi| (0..*n_polar).map(move |j| wi * dt * (PI * (j as f64 + 0.5) / *n_polar as f64).sin() * TAU))
                .collect()
        }
    }
}

/// L∞, L² and interior L∞ of `reference − approximation` over the field's nodes.
pub fn error_norms(field: &KineticField, approx: &[f64], interior_cut: f64) -> ErrorNorms {
    let no = field.n_ordinates();
    let vol = node_volumes(field);
    let cut = interior_cut * field.eps;
    let (mut linf, mut l2, mut inner) = (0.0f64, 0.0f64, 0.0f64);
    for n in 0..field.n_nodes() {
        let deep = field.geometry.depth(&field.nodes[n]) >= cut;
        let mut s = 0.0;
        for k in 0..no {
            let e = (field.values[n * no + k] - approx[n * no + k]).abs();
            linf = linf.max(e);
            if deep {
                inner = inner.max(e);
            }
            s += field.weights[k] * e * e;
        }
        l2 += vol[n] * s;
    }
    ErrorNorms { linf, l2: l2.sqrt(), interior_linf: inner }
}

/// Reference kinetic grid, with boundary spacing in units of ε.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceGrid {
    pub h_boundary: f64,
    pub h_interior: f64,
    pub ratio: f64,
    pub n_theta: usize,
    pub n_omega: usize,
    pub interpolation: Interpolation,
    pub n_mu: usize,
    pub n_azimuth: usize,
    /// Spacing factor of the coarse twin used for the self-convergence check.
    pub coarsen: f64,
}

impl Default for ReferenceGrid {
    fn default() -> Self {
        ReferenceGrid {
            h_boundary: 0.0625,
            h_interior: 0.1,
            ratio: 1.15,
            n_theta: 32,
            n_omega: 128,
            interpolation: Interpolation::Spectral,
            n_mu: 8,
            n_azimuth: 16,
            coarsen: 1.5,
        }
    }
}

impl ReferenceGrid {
    pub fn spec(&self, eps: f64) -> TransportGridSpec {
        let hb = self.h_boundary * eps;
        TransportGridSpec {
            radial: RadialSpacing::Graded { h_boundary: hb, h_interior: self.h_interior.max(hb), ratio: self.ratio },
            n_theta: self.n_theta,
            n_omega: self.n_omega,
            interpolation: self.interpolation,
            n_mu: self.n_mu,
            n_azimuth: self.n_azimuth,
        }
    }

    /// Coarser twin: spacings times `coarsen`, half the ordinates when that
    /// still leaves a whole number per θ node.
    pub fn twin(&self) -> ReferenceGrid {
        let half = self.n_omega / 2;
        let n_omega = if half >= self.n_theta && half % self.n_theta == 0 { half } else { self.n_omega };
        ReferenceGrid {
            h_boundary: self.h_boundary * self.coarsen,
            h_interior: self.h_interior * self.coarsen,
            n_omega,
            ..*self
        }
    }

    pub fn describe(&self, field: &KineticField) -> String {
        let nr = match &field.layout {
            Layout::Polar { r, .. } | Layout::Meridian { r, .. } => r.len(),
        };
        let interp = match self.interpolation {
            Interpolation::Linear => "linear",
            Interpolation::Spectral => "spectral",
        };
        format!("{}x{}x{} {}", nr, field.n_nodes() / nr, field.n_ordinates(), interp)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub geometry: Geometry,
    pub eps: Vec<f64>,
    pub profile: BoundaryProfile,
    pub expansion: ExpansionConfig,
    pub reference: ReferenceGrid,
    pub compare_flat: bool,
    pub self_check: bool,
    /// A reference is under-resolved when its self-convergence exceeds this
    /// fraction of the interior error.
    pub resolution_ratio: f64,
    /// Errors below this are treated as solver floor.
    pub floor: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            geometry: Geometry::Disk { radius: 2.0 },
            eps: vec![0.1, 0.05, 0.025, 0.0125],
            profile: BoundaryProfile::default(),
            expansion: ExpansionConfig::default(),
            reference: ReferenceGrid::default(),
            compare_flat: false,
            self_check: true,
            resolution_ratio: 0.25,
            floor: 1e-7,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<(), AsymptoticsError> {
        if self.eps.len() < 3 {
            return Err(AsymptoticsError::Invalid(format!("need at least 3 epsilon values, got {}", self.eps.len())));
        }
        if let Some(e) = self.eps.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
            return Err(AsymptoticsError::Invalid(format!("epsilon values must be positive, got {e}")));
        }
        if matches!(self.geometry, Geometry::Annulus { .. }) {
            return Err(AsymptoticsError::Unsupported("convergence studies run on the disk or the ball".into()));
        }
        self.geometry.validated().map_err(AsymptoticsError::Geometry)?;
        self.expansion.validate()
    }
}

/// Per-ε diagnostics kept alongside the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsDiagnostics {
    pub eps: f64,
    pub reference_residual: f64,
    pub self_convergence: f64,
    pub boundary_consistency: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyOutput {
    pub report: ConvergenceReport,
    pub diagnostics: Vec<EpsDiagnostics>,
}

fn reference_solve(
    geometry: &Geometry,
    eps: f64,
    profile: &BoundaryProfile,
    spec: &TransportGridSpec,
) -> Result<KineticField, AsymptoticsError> {
    let problem = KineticProblem { geometry: *geometry, eps, boundary: profile.boundary_data(*geometry), source: None };
    Ok(steady_solve(&problem, spec, &SolveControl::default())?)
}

/// sup over the coarse twin's interior nodes of |ū_fine − ū_coarse|: the same
/// region as the interior norm it is judged against. Near the wall ū is steep
/// and cross-grid interpolation, not the solve, would dominate.
fn self_convergence(
    geometry: &Geometry,
    eps: f64,
    fine_spec: &TransportGridSpec,
    fine: &KineticField,
    coarse: &KineticField,
    cut: f64,
) -> Result<f64, AsymptoticsError> {
    let interp: Box<dyn Fn(&Vec3) -> f64> = match geometry {
        Geometry::Ball { .. } => {
            let t = BallTransport::new(*geometry, eps, fine_spec)?;
            let u = fine.ubar.clone();
            Box::new(move |x| t.interpolate(&u, x))
        }
        _ => {
            let g = PolarGrid::new(*geometry, fine_spec)?;
            let u = fine.ubar.clone();
            Box::new(move |x| g.interpolate(&u, x))
        }
    };
    Ok(coarse
        .nodes
        .iter()
        .zip(&coarse.ubar)
        .filter(|(x, _)| geometry.depth(x) >= cut)
        .map(|(x, u)| (interp(x) - u).abs())
        .fold(0.0, f64::max))
}

/// Composite-vs-reference errors across ε, for the geometric layers and
/// optionally the flat ones.
pub fn convergence_study(cfg: &StudyConfig, cache: Option<&Path>) -> Result<StudyOutput, AsymptoticsError> {
    cfg.validate()?;
    let mut rows = Vec::new();
    let mut diagnostics = Vec::new();
    let variants: Vec<Variant> =
        if cfg.compare_flat { vec![Variant::Geometric, Variant::Flat] } else { vec![Variant::Geometric] };
    for &eps in &cfg.eps {
        let spec = cfg.reference.spec(eps);
        let field = reference_solve(&cfg.geometry, eps, &cfg.profile, &spec)?;
        let grid = cfg.reference.describe(&field);
        let self_conv = if cfg.self_check {
            let twin = cfg.reference.twin();
            let coarse = reference_solve(&cfg.geometry, eps, &cfg.profile, &twin.spec(eps))?;
            self_convergence(&cfg.geometry, eps, &spec, &field, &coarse, cfg.expansion.interior_cut * eps)?
        } else {
            0.0
        };
        let mut consistency = Vec::new();
        let mut eps_rows = Vec::new();
        for &v in &variants {
            let stack = LayerStack::build(&cfg.geometry, eps, &cfg.profile, &cfg.expansion, v, cache)?;
            let approx = stack.composite_on_field(&field);
            let norms = error_norms(&field, &approx, cfg.expansion.interior_cut);
            consistency.push((v.name().to_string(), stack.boundary_consistency(&cfg.profile, 8, 8)));
            eps_rows.push(ErrorRow {
                variant: v.name().into(),
                eps,
                grid: grid.clone(),
                norms,
                self_convergence: self_conv,
                under_resolved: false,
            });
        }
        // judged against the geometric composite, the method under test
        let scale = eps_rows[0].norms.interior_linf.max(cfg.floor);
        let flagged = cfg.self_check && self_conv > cfg.resolution_ratio * scale;
        for r in &mut eps_rows {
            r.under_resolved = flagged;
        }
        rows.extend(eps_rows);
        diagnostics.push(EpsDiagnostics {
            eps,
            reference_residual: field.residual,
            self_convergence: self_conv,
            boundary_consistency: consistency,
        });
    }
    Ok(StudyOutput { report: ConvergenceReport::from_rows(rows, cfg.floor), diagnostics })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnsteadyConfig {
    pub geometry: Geometry,
    pub eps: f64,
    /// Time-independent boundary datum.
    pub profile: BoundaryProfile,
    pub initial: InitialProfile,
    pub taus: Vec<f64>,
    pub reference: TransportGridSpec,
    pub schedule: TimeSchedule,
    pub expansion: ExpansionConfig,
    pub heat_n_r: usize,
    pub heat_n_theta: usize,
}

impl Default for UnsteadyConfig {
    fn default() -> Self {
        UnsteadyConfig {
            geometry: Geometry::Disk { radius: 2.0 },
            eps: 0.02,
            profile: BoundaryProfile::Constant { value: 0.5 },
            initial: InitialProfile::default(),
            taus: vec![0.0, 1.0, 5.0],
            reference: TransportGridSpec::default(),
            schedule: TimeSchedule { dtau: 0.01, coarsen_after: 1.0, growth: 1.2, max_dtau: 0.1 },
            expansion: ExpansionConfig::default(),
            heat_n_r: 48,
            heat_n_theta: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnsteadyRow {
    pub tau: f64,
    pub with_initial_layer: ErrorNorms,
    pub without_initial_layer: ErrorNorms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnsteadyReport {
    pub rows: Vec<UnsteadyRow>,
    /// sup |𝒰ᴵ₀(0) − (h − h̄)| over the reference nodes.
    pub initial_identity: f64,
    pub compatibility: CompatibilityReport,
    pub steps: usize,
}

/// Ū₀(t) + layer + e^{−τ}(h − h̄) against the kinetic trajectory.
pub fn unsteady_study(cfg: &UnsteadyConfig) -> Result<UnsteadyReport, AsymptoticsError> {
    let geometry = cfg.geometry;
    let radius = match geometry {
        Geometry::Disk { radius } => radius,
        _ => return Err(AsymptoticsError::Unsupported("unsteady composites are built on the disk".into())),
    };
    if cfg.taus.is_empty() || cfg.taus.iter().any(|t| !(*t >= 0.0)) {
        return Err(AsymptoticsError::Invalid("taus must be a non-empty list of non-negative times".into()));
    }
    let eps = cfg.eps;
    let profile = cfg.profile;
    let h = cfg.initial.phase_function(radius);
    let gb = profile.boundary_data(geometry);
    let g_t: TimeBoundaryData = Arc::new(move |_t, x, w| gb(x, w));
    let compatibility = compatibility_check(&geometry, &h, &g_t, 32, 16, 1e-10);

    let problem = UnsteadyProblem { geometry, eps, boundary: Arc::clone(&g_t), initial: Arc::clone(&h) };
    let traj = unsteady_solve(&problem, &cfg.reference, &cfg.schedule, &cfg.taus)?;

    let stack = LayerStack::build(&geometry, eps, &profile, &ExpansionConfig { order: 0, ..cfg.expansion }, Variant::Geometric, None)?;
    let il = InitialLayer::new(cfg.initial, &geometry);

    // heat equation for Ū₀ with the layer limits on the wall and h̄ initially
    let ts: Vec<f64> = traj.snapshots.iter().map(|s| s.t).filter(|t| *t > 0.0).collect();
    let heat: Vec<HeatSnapshot> = if ts.is_empty() {
        Vec::new()
    } else {
        let mesh = PolarMesh::new(radius, cfg.heat_n_r, cfg.heat_n_theta)?;
        let u0 = stack.u0.clone();
        let initial = cfg.initial;
        let hp = HeatProblem {
            geometry,
            boundary: Arc::new(move |_t, x| u0.value(x)),
            initial: Arc::new(move |x| initial.average(radius, x, 2)),
            diffusivity: HeatProblem::kinetic_diffusivity(&geometry),
        };
        let t_max = ts.iter().cloned().fold(0.0, f64::max);
        heat_solve(&hp, &mesh, t_max / 200.0, &ts)?
    };

    let mut rows = Vec::new();
    let mut identity: f64 = 0.0;
    for snap in &traj.snapshots {
        let field = &snap.field;
        let layer = stack.layer_on_field(field);
        let no = field.n_ordinates();
        let hs = heat.iter().find(|s| (s.t - snap.t).abs() <= 1e-12 * snap.t.max(1e-300));
        let mut with = vec![0.0; field.values.len()];
        let mut without = vec![0.0; field.values.len()];
        for n in 0..field.n_nodes() {
            let x = field.nodes[n];
            let ubar0 = match hs {
                Some(s) => s.field.value(&x),
                None => cfg.initial.average(radius, &x, 2),
            };
            for k in 0..no {
                let w = field.ordinates[k];
                let base = ubar0 + layer[n * no + k];
                let init = il.order0(snap.tau, &x, &w);
                if snap.tau == 0.0 {
                    let exact = h(&x, &w) - cfg.initial.average(radius, &x, 2);
                    identity = identity.max((init - exact).abs());
                }
                without[n * no + k] = base;
                with[n * no + k] = base + init;
            }
        }
        rows.push(UnsteadyRow {
            tau: snap.tau,
            with_initial_layer: error_norms(field, &with, cfg.expansion.interior_cut),
            without_initial_layer: error_norms(field, &without, cfg.expansion.interior_cut),
        });
    }
    Ok(UnsteadyReport { rows, initial_identity: identity, compatibility, steps: traj.steps })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothstep_ends_and_slope() {
        assert_eq!(smoothstep(0.0), 0.0);
        assert_eq!(smoothstep(1.0), 1.0);
        assert!((smoothstep(0.5) - 0.5).abs() < 1e-15);
        assert!((smoothstep_slope(0.5) - 1.875).abs() < 1e-15);
    }

    #[test]
    fn periodic_weights_interpolate_nodes_and_trig() {
        let w = periodic_weights(TAU * 3.0 / 8.0 - TAU, 8);
        assert!((w[3] - 1.0).abs() < 1e-14 && w.iter().enumerate().all(|(a, v)| a == 3 || v.abs() < 1e-14));
        let th = 0.77;
        let f = |t: f64| 1.0 + (2.0 * t).cos() - 0.5 * (3.0 * t).sin();
        let s: f64 = periodic_weights(th, 8).iter().enumerate().map(|(a, q)| q * f(TAU * a as f64 / 8.0)).sum();
        assert!((s - f(th)).abs() < 1e-13);
    }

    #[test]
    fn cutoff_rejects_bad_alpha() {
        assert!(Cutoff::new(0.1, 0.0).is_err());
        assert!(Cutoff::new(0.1, 1.5).is_err());
        assert!(Cutoff::new(0.9, 1.0).is_err());
    }
}
