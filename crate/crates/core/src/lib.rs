//! Numerical laboratory for the diffusive limit of the steady and unsteady
//! neutron transport equation in small-Knudsen regimes.
//!
//! The pieces fit together as follows: [`milne`] solves the half-space layer
//! problem with (or without) the curvature force, [`transport`] is the
//! reference kinetic solver, [`fluid`] holds the Laplace/heat interior solvers
//! and [`asymptotics`] assembles layers and interior fields into composite
//! approximations and measures them against reference solutions.

pub mod asymptotics;
pub mod fluid;
pub mod geometry;
pub mod milne;
pub mod parallel;
pub mod profiles;
pub mod quadrature;
pub mod report;
pub mod transport;

pub use geometry::Geometry;
