//! Deterministic solver for the coupled photon/electron/positron transport system
//! in the continuous slowing-down approximation with angular diffusion, its adjoint,
//! and an adjoint-based inverse treatment-planning layer.
//!
//! Energies are kinetic energies in electron-rest-mass units. Species are ordered
//! photon, electron, positron throughout.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too; indexed loops mirror the
// (species, energy, voxel, direction) layout.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::excessive_precision, clippy::needless_range_loop)]

pub mod collision;
pub mod dose_planner;
pub mod error;
pub mod fields;
pub mod forms;
pub mod hypersingular;
pub mod io;
pub mod linalg;
pub mod phase_space;
pub mod scenario;
pub mod solver;
pub mod vcoords;
pub mod xsec;

pub use dose_planner::{Control, PlanState, Planner, Prescription, StoppingPowers};
pub use error::{Error, Result};
pub use fields::{BoundaryField, Layout, Species, SpeciesField};
pub use forms::{DiscreteField, TransportOperator};
pub use phase_space::{BoundaryFaceSet, EnergyGrid, PhaseSpace, RegionLabel, Side, SpatialGrid, SphereGrid};
pub use scenario::{Scenario, ScenarioParams};
pub use solver::{solve_adjoint, solve_forward, SolveReport, SolverOptions, Strictness};
