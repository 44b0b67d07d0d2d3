//! Equilibrium shapes of self-gravitating hyperelastic bodies.
//!
//! The body is a P1 tetrahedral mesh with piecewise-constant reference
//! density. Its energy is the Ogden strain energy plus the lumped
//! gravitational self-energy, minimized over deformations that either pin the
//! center of mass (`A1`) or prescribe the boundary (`A2`).

pub mod admissible;
pub mod diagnostics;
pub mod error;
pub mod gravity;
pub mod io;
pub mod material;
pub mod mesh;
pub mod minimize;

pub use admissible::{AdmissibleSpec, SpaceKind};
pub use error::{Error, Result};
pub use material::{Barrier, MaterialField, OgdenMaterial, PowerTerm};
pub use mesh::{DeformationState, Mat3, ReferenceBody, Vec3};
pub use minimize::{EnergyBreakdown, Problem, Solution, SolverConfig, Termination};
