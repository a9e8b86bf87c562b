//! Named analytic data families, so a run is reproducible from its config.
//!
//! Boundary data are written in boundary-frame variables: ι is the boundary
//! chart angle (polar angle on the ball), φ the in-flow angle (φ > 0 enters the
//! domain) and ψ the tangential angle of the velocity.

use crate::geometry::{boundary_chart, boundary_frame, Geometry, Vec3};
use crate::milne::Inflow;
use crate::transport::{BoundaryData, PhaseFunction};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BoundaryProfile {
    Constant {
        value: f64,
    },
    /// mean + cos(kι)·(amp + aniso·sin φ) + tilt·cos φ·sin ψ
    FourierMode {
        mean: f64,
        k: u32,
        amp: f64,
        #[serde(default)]
        aniso: f64,
        #[serde(default)]
        tilt: f64,
    },
    /// base + height·exp(−(φ/width)²)·(1 + mix·cos kι): concentrated near grazing.
    GrazingBump {
        base: f64,
        height: f64,
        width: f64,
        #[serde(default)]
        k: u32,
        #[serde(default)]
        mix: f64,
    },
}

impl Default for BoundaryProfile {
    fn default() -> Self {
        BoundaryProfile::FourierMode { mean: 0.5, k: 2, amp: 0.2, aniso: 0.15, tilt: 0.1 }
    }
}

impl BoundaryProfile {
    pub fn validate(&self) -> Result<(), String> {
        let finite = |name: &str, v: f64| if v.is_finite() { Ok(()) } else { Err(format!("{name} must be finite")) };
        match *self {
            BoundaryProfile::Constant { value } => finite("value", value),
            BoundaryProfile::FourierMode { mean, amp, aniso, tilt, .. } => {
                finite("mean", mean)?;
                finite("amp", amp)?;
                finite("aniso", aniso)?;
                finite("tilt", tilt)
            }
            BoundaryProfile::GrazingBump { base, height, width, mix, .. } => {
                finite("base", base)?;
                finite("height", height)?;
                finite("mix", mix)?;
                if !(width > 0.0 && width.is_finite()) {
                    return Err("width must be positive".into());
                }
                Ok(())
            }
        }
    }

    pub fn eval_angles(&self, iota: f64, phi: f64, psi: f64) -> f64 {
        match *self {
            BoundaryProfile::Constant { value } => value,
            BoundaryProfile::FourierMode { mean, k, amp, aniso, tilt } => {
                mean + (k as f64 * iota).cos() * (amp + aniso * phi.sin()) + tilt * phi.cos() * psi.sin()
            }
            BoundaryProfile::GrazingBump { base, height, width, k, mix } => {
                base + height * (-(phi / width).powi(2)).exp() * (1.0 + mix * (k as f64 * iota).cos())
            }
        }
    }

    /// g(x₀, w) with x₀ projected onto the outer boundary.
    pub fn eval(&self, geometry: &Geometry, x0: &Vec3, w: &Vec3) -> f64 {
        let (i1, i2) = boundary_chart(geometry, x0);
        let frame = boundary_frame(geometry, i1, i2).expect("chart angles are in range");
        let (phi, psi) = frame.angles(w);
        self.eval_angles(i1, phi, psi)
    }

    /// Independent of the boundary position.
    pub fn rotationally_invariant(&self) -> bool {
        match *self {
            BoundaryProfile::Constant { .. } => true,
            BoundaryProfile::FourierMode { k, amp, aniso, .. } => k == 0 || (amp == 0.0 && aniso == 0.0),
            BoundaryProfile::GrazingBump { k, mix, .. } => k == 0 || mix == 0.0,
        }
    }

    pub fn is_constant(&self) -> bool {
        match *self {
            BoundaryProfile::Constant { .. } => true,
            BoundaryProfile::FourierMode { k, amp, aniso, tilt, .. } => {
                tilt == 0.0 && ((amp == 0.0 && aniso == 0.0) || (k == 0 && aniso == 0.0))
            }
            BoundaryProfile::GrazingBump { height, .. } => height == 0.0,
        }
    }

    /// Milne in-flow datum at boundary position ι.
    pub fn inflow_at(&self, iota: f64) -> Inflow {
        let p = *self;
        Arc::new(move |phi, psi| p.eval_angles(iota, phi, psi))
    }

    pub fn boundary_data(&self, geometry: Geometry) -> BoundaryData {
        let p = *self;
        Arc::new(move |x0, w| p.eval(&geometry, x0, w))
    }
}

/// Initial data h(x, w) for the unsteady problem. Both anisotropic families
/// vanish to second order at the boundary, so they are compatible with any
/// boundary datum equal to `mean` there.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialProfile {
    Constant { value: f64 },
    /// mean + amp·(w₁² − w₂²)·(1 − |x|²/R²)²
    Quadrupole { mean: f64, amp: f64 },
    /// mean + amp·w₁·(1 − |x|²/R²)²
    Dipole { mean: f64, amp: f64 },
}

impl Default for InitialProfile {
    fn default() -> Self {
        InitialProfile::Quadrupole { mean: 0.5, amp: 0.4 }
    }
}

impl InitialProfile {
    pub fn eval(&self, radius: f64, x: &Vec3, w: &Vec3) -> f64 {
        let bump = (1.0 - x.norm_squared() / (radius * radius)).max(0.0).powi(2);
        match *self {
            InitialProfile::Constant { value } => value,
            InitialProfile::Quadrupole { mean, amp } => mean + amp * (w.x * w.x - w.y * w.y) * bump,
            InitialProfile::Dipole { mean, amp } => mean + amp * w.x * bump,
        }
    }

    /// Angular average h̄(x) over S¹ (planar) or S² (`dim` = 3).
    pub fn average(&self, _radius: f64, _x: &Vec3, _dim: usize) -> f64 {
        // both anisotropic parts have zero mean on the circle and on the sphere
        match *self {
            InitialProfile::Constant { value } => value,
            InitialProfile::Quadrupole { mean, .. } | InitialProfile::Dipole { mean, .. } => mean,
        }
    }

    pub fn phase_function(&self, radius: f64) -> PhaseFunction {
        let p = *self;
        Arc::new(move |x, w| p.eval(radius, x, w))
    }
}
