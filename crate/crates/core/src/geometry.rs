//! Domains with constant-curvature boundaries, their boundary frames, and the
//! boundary-layer coordinates (μ, ι₁, ι₂, η, φ, ψ).
//!
//! Points and velocities are always `Vector3`; the planar domains live in the
//! z = 0 plane. For the disk and annulus, ς₂ is the out-of-plane direction e_z,
//! so a planar velocity has ψ = ±π/2 and the sign records whether it turns
//! counter-clockwise (ψ = π/2) or clockwise along the boundary. For the ball,
//! ς₁ = e_θ (polar) and ς₂ = e_φ (azimuthal); ψ = 0 points along e_φ.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid geometry: {0}")]
    Invalid(String),
    #[error("boundary parameter outside chart: {0}")]
    Chart(String),
    #[error("point lies outside the boundary collar (mu = {mu}, collar = {collar})")]
    OutOfCollar { mu: f64, collar: f64 },
    #[error("point outside the domain: {0}")]
    Outside(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Geometry {
    Disk { radius: f64 },
    Annulus { inner_radius: f64, radius: f64 },
    Ball { radius: f64 },
}

impl Geometry {
    pub fn disk(radius: f64) -> Result<Self, GeometryError> {
        Geometry::Disk { radius }.validated()
    }

    pub fn annulus(inner_radius: f64, radius: f64) -> Result<Self, GeometryError> {
        Geometry::Annulus { inner_radius, radius }.validated()
    }

    pub fn ball(radius: f64) -> Result<Self, GeometryError> {
        Geometry::Ball { radius }.validated()
    }

    pub fn validated(self) -> Result<Self, GeometryError> {
        let r = self.radius();
        if !(r.is_finite() && r > 0.0) {
            return Err(GeometryError::Invalid(format!("radius must be positive, got {r}")));
        }
        if let Geometry::Annulus { inner_radius, radius } = self {
            if !(inner_radius > 0.0 && inner_radius < radius) {
                return Err(GeometryError::Invalid(format!(
                    "annulus needs 0 < inner_radius < radius, got {inner_radius} and {radius}"
                )));
            }
        }
        Ok(self)
    }

    /// Outer radius R.
    pub fn radius(&self) -> f64 {
        match *self {
            Geometry::Disk { radius } | Geometry::Ball { radius } => radius,
            Geometry::Annulus { radius, .. } => radius,
        }
    }

    pub fn inner_radius(&self) -> Option<f64> {
        match *self {
            Geometry::Annulus { inner_radius, .. } => Some(inner_radius),
            _ => None,
        }
    }

    /// Spatial dimension (2 for disk/annulus, 3 for the ball).
    pub fn dim(&self) -> usize {
        match self {
            Geometry::Ball { .. } => 3,
            _ => 2,
        }
    }

    /// Width R_min of the collar on which layer coordinates of the outer
    /// boundary are defined.
    pub fn collar_width(&self) -> f64 {
        match *self {
            Geometry::Disk { radius } | Geometry::Ball { radius } => radius,
            Geometry::Annulus { inner_radius, radius } => radius - inner_radius,
        }
    }

    /// Smallest principal curvature radius of the outer boundary.
    pub fn min_curvature_radius(&self) -> f64 {
        self.radius()
    }

    pub fn contains(&self, x: &Vec3, tol: f64) -> bool {
        let r = x.norm();
        let planar_ok = self.dim() == 3 || x.z.abs() <= tol;
        planar_ok
            && r <= self.radius() + tol
            && self.inner_radius().map_or(true, |ri| r >= ri - tol)
    }

    /// Distance of `x` to the outer boundary along the normal.
    pub fn depth(&self, x: &Vec3) -> f64 {
        self.radius() - x.norm()
    }
}

/// Orthonormal frame {ς₁, ς₂, ν} at a boundary point together with the
/// curvature data entering the layer equations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryFrame {
    pub x0: Vec3,
    pub normal: Vec3,
    pub tangent1: Vec3,
    pub tangent2: Vec3,
    /// Curvature radius along ς₁ (infinite for a straight direction).
    pub r1: f64,
    /// Curvature radius along ς₂ (infinite for a straight direction).
    pub r2: f64,
    /// |∂r/∂ι₁|.
    pub p1: f64,
    /// |∂r/∂ι₂|.
    pub p2: f64,
    /// Mixed derivative ∂₁₂r of the boundary parametrization.
    pub d12: Vec3,
}

impl BoundaryFrame {
    pub fn kappa1(&self) -> f64 {
        1.0 / self.r1
    }

    pub fn kappa2(&self) -> f64 {
        1.0 / self.r2
    }

    /// ς₁·(ς₂ × (∂₁₂r × ς₂)), the in-plane part of ∂₁ς₂ scaled by P₂.
    pub fn twist12(&self) -> f64 {
        self.tangent1.dot(&self.tangent2.cross(&self.d12.cross(&self.tangent2)))
    }

    /// ς₂·(ς₁ × (∂₁₂r × ς₁)).
    pub fn twist21(&self) -> f64 {
        self.tangent2.dot(&self.tangent1.cross(&self.d12.cross(&self.tangent1)))
    }

    /// Velocity with angles (φ, ψ) in this frame.
    pub fn velocity(&self, phi: f64, psi: f64) -> Vec3 {
        let (sp, cp) = phi.sin_cos();
        let (ss, cs) = psi.sin_cos();
        -sp * self.normal + cp * ss * self.tangent1 + cp * cs * self.tangent2
    }

    /// Angles (φ, ψ) of a unit velocity in this frame.
    pub fn angles(&self, w: &Vec3) -> (f64, f64) {
        let wn = -w.dot(&self.normal);
        let w1 = w.dot(&self.tangent1);
        let w2 = w.dot(&self.tangent2);
        let phi = wn.atan2(w1.hypot(w2));
        let psi = if w1 == 0.0 && w2 == 0.0 { 0.0 } else { w1.atan2(w2) };
        (phi, psi)
    }
}

/// Layer coordinates of a phase-space point near the outer boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerCoords {
    pub mu: f64,
    pub iota1: f64,
    pub iota2: f64,
    pub eta: f64,
    pub phi: f64,
    pub psi: f64,
}

fn check_angle(name: &str, v: f64, lo: f64, hi: f64) -> Result<(), GeometryError> {
    if v.is_finite() && v >= lo && v <= hi {
        Ok(())
    } else {
        Err(GeometryError::Chart(format!("{name} = {v} not in [{lo}, {hi}]")))
    }
}

/// Frame of the outer boundary at chart parameters (ι₁, ι₂).
///
/// Disk and annulus use the polar angle ι₁ ∈ [-π, π] (ι₂ ignored); the ball
/// uses the polar angle ι₁ = θ ∈ [0, π] and the azimuth ι₂ ∈ [-π, π].
pub fn boundary_frame(geom: &Geometry, iota1: f64, iota2: f64) -> Result<BoundaryFrame, GeometryError> {
    let r = geom.radius();
    match geom {
        Geometry::Disk { .. } | Geometry::Annulus { .. } => {
            check_angle("iota", iota1, -PI, PI)?;
            let (s, c) = iota1.sin_cos();
            let normal = Vec3::new(c, s, 0.0);
            Ok(BoundaryFrame {
                x0: r * normal,
                normal,
                tangent1: Vec3::new(-s, c, 0.0),
                tangent2: Vec3::z(),
                r1: r,
                r2: f64::INFINITY,
                p1: r,
                p2: 1.0,
                d12: Vec3::zeros(),
            })
        }
        Geometry::Ball { .. } => {
            check_angle("theta", iota1, 0.0, PI)?;
            check_angle("azimuth", iota2, -PI, PI)?;
            let (st, ct) = iota1.sin_cos();
            let (sa, ca) = iota2.sin_cos();
            let normal = Vec3::new(st * ca, st * sa, ct);
            let e_phi = Vec3::new(-sa, ca, 0.0);
            Ok(BoundaryFrame {
                x0: r * normal,
                normal,
                tangent1: Vec3::new(ct * ca, ct * sa, -st),
                tangent2: e_phi,
                r1: r,
                r2: r,
                p1: r,
                p2: r * st,
                d12: r * ct * e_phi,
            })
        }
    }
}

/// Chart parameters of the boundary point nearest to `x`.
pub fn boundary_chart(geom: &Geometry, x: &Vec3) -> (f64, f64) {
    match geom {
        Geometry::Disk { .. } | Geometry::Annulus { .. } => (x.y.atan2(x.x), 0.0),
        Geometry::Ball { .. } => {
            let rho = x.norm();
            let theta = if rho > 0.0 { (x.z / rho).clamp(-1.0, 1.0).acos() } else { 0.0 };
            (theta, x.y.atan2(x.x))
        }
    }
}

/// (x, w) ↦ (μ, ι₁, ι₂, η, φ, ψ) relative to the outer boundary.
pub fn to_layer_coords(geom: &Geometry, x: &Vec3, w: &Vec3, eps: f64) -> Result<LayerCoords, GeometryError> {
    if !geom.contains(x, 1e-12 * geom.radius()) {
        return Err(GeometryError::Outside(format!("{:?}", x.as_slice())));
    }
    let mu = geom.depth(x).max(0.0);
    let collar = geom.collar_width();
    if mu >= collar {
        return Err(GeometryError::OutOfCollar { mu, collar });
    }
    let (iota1, iota2) = boundary_chart(geom, x);
    let frame = boundary_frame(geom, iota1, iota2)?;
    let (phi, psi) = frame.angles(w);
    Ok(LayerCoords { mu, iota1, iota2, eta: mu / eps, phi, psi })
}

/// Inverse of [`to_layer_coords`]; μ is taken from the coordinates (η is ignored).
pub fn from_layer_coords(geom: &Geometry, c: &LayerCoords, _eps: f64) -> Result<(Vec3, Vec3), GeometryError> {
    let collar = geom.collar_width();
    if !(c.mu >= 0.0 && c.mu < collar) {
        return Err(GeometryError::OutOfCollar { mu: c.mu, collar });
    }
    let frame = boundary_frame(geom, c.iota1, c.iota2)?;
    let x = frame.x0 - c.mu * frame.normal;
    Ok((x, frame.velocity(c.phi, c.psi)))
}

/// Unit velocity in the plane at angle ω.
pub fn planar_direction(omega: f64) -> Vec3 {
    let (s, c) = omega.sin_cos();
    Vec3::new(c, s, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn frame_examples() {
        let ball = Geometry::ball(1.0).unwrap();
        let f = boundary_frame(&ball, PI / 2.0, 0.0).unwrap();
        assert_abs_diff_eq!(f.normal, Vec3::x(), epsilon = 1e-15);
        assert_eq!((f.r1, f.r2), (1.0, 1.0));

        let disk = Geometry::disk(2.0).unwrap();
        let f = boundary_frame(&disk, 0.0, 0.0).unwrap();
        assert_abs_diff_eq!(f.x0, Vec3::new(2.0, 0.0, 0.0), epsilon = 1e-15);
        assert_abs_diff_eq!(f.normal, Vec3::x(), epsilon = 1e-15);
        assert_eq!(f.r1, 2.0);

        let ann = Geometry::annulus(1.0, 2.0).unwrap();
        assert_eq!(boundary_frame(&ann, 1.3, 0.0).unwrap().r1, 2.0);
        assert!(boundary_frame(&disk, 4.0, 0.0).is_err());
    }

    #[test]
    fn frames_are_right_handed() {
        let ball = Geometry::ball(1.5).unwrap();
        for &(t, a) in &[(0.3, -2.0), (1.2, 0.4), (2.9, 3.0)] {
            let f = boundary_frame(&ball, t, a).unwrap();
            assert_abs_diff_eq!(f.tangent1.cross(&f.tangent2), f.normal, epsilon = 1e-14);
        }
        let disk = Geometry::disk(1.0).unwrap();
        let f = boundary_frame(&disk, 0.7, 0.0).unwrap();
        assert_abs_diff_eq!(f.tangent1.cross(&f.tangent2), f.normal, epsilon = 1e-14);
    }

    #[test]
    fn ball_twist_terms_match_finite_differences() {
        // ∂₁ς₂·ς₁ = twist12 / P₂ and ∂₂ς₁·ς₂ = twist21 / P₁
        let ball = Geometry::ball(1.3).unwrap();
        let (t, a, h) = (0.9, 0.4, 1e-6);
        let f = boundary_frame(&ball, t, a).unwrap();
        let fp = boundary_frame(&ball, t + h, a).unwrap();
        let fm = boundary_frame(&ball, t - h, a).unwrap();
        let d1s2 = (fp.tangent2 - fm.tangent2) / (2.0 * h);
        assert_abs_diff_eq!(d1s2.dot(&f.tangent1), f.twist12() / f.p2, epsilon = 1e-8);
        let gp = boundary_frame(&ball, t, a + h).unwrap();
        let gm = boundary_frame(&ball, t, a - h).unwrap();
        let d2s1 = (gp.tangent1 - gm.tangent1) / (2.0 * h);
        assert_abs_diff_eq!(d2s1.dot(&f.tangent2), f.twist21() / f.p1, epsilon = 1e-8);
    }

    #[test]
    fn layer_coordinate_examples() {
        let disk = Geometry::disk(1.0).unwrap();
        let c = to_layer_coords(&disk, &Vec3::new(0.9, 0.0, 0.0), &Vec3::new(-1.0, 0.0, 0.0), 0.05).unwrap();
        assert_abs_diff_eq!(c.mu, 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(c.eta, 2.0, epsilon = 1e-13);
        assert_abs_diff_eq!(c.phi, PI / 2.0, epsilon = 1e-15);

        let c = to_layer_coords(&disk, &Vec3::new(0.8, 0.0, 0.0), &Vec3::new(0.0, 1.0, 0.0), 0.1).unwrap();
        assert_abs_diff_eq!(c.mu, 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(c.eta, 2.0, epsilon = 1e-13);
        assert_abs_diff_eq!(c.phi, 0.0, epsilon = 1e-15);
        // tangent at ι=0 is e_y, so w·ς₁ = 1 = cos φ sin ψ
        assert_abs_diff_eq!(c.phi.cos() * c.psi.sin(), 1.0, epsilon = 1e-15);

        let ball = Geometry::ball(1.0).unwrap();
        let c = to_layer_coords(&ball, &Vec3::new(0.0, 1.0, 0.0), &Vec3::new(0.0, 0.0, 1.0), 0.1).unwrap();
        assert_abs_diff_eq!(c.phi, 0.0, epsilon = 1e-15);

        assert!(matches!(
            to_layer_coords(&disk, &Vec3::zeros(), &Vec3::x(), 0.1),
            Err(GeometryError::OutOfCollar { .. })
        ));
    }

    #[test]
    fn inverse_examples() {
        let ball = Geometry::ball(2.0).unwrap();
        let c = LayerCoords { mu: 0.0, iota1: 1.0, iota2: 0.5, eta: 0.0, phi: PI / 2.0, psi: 0.3 };
        let (x, w) = from_layer_coords(&ball, &c, 0.1).unwrap();
        assert_abs_diff_eq!(x.norm(), 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(w, -x / 2.0, epsilon = 1e-14);
        let bad = LayerCoords { mu: 2.0, ..c };
        assert!(from_layer_coords(&ball, &bad, 0.1).is_err());
    }
}
