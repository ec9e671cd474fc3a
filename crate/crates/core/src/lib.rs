//! Simulation core for a multiphase tumor-growth model on a moving domain.
//!
//! The tumor occupies a region `Omega_t` that moves inside a fixed box `B`
//! with a prescribed divergence-free velocity `V`. Three cell phases
//! (proliferating `P`, quiescent `Q`, dead `D`) are advected by a tissue
//! velocity `v` and exchange mass through nutrient- and drug-dependent
//! kinetics; the nutrient `C` and drug `W` obey reaction-diffusion equations
//! with homogeneous Dirichlet data on the tumor boundary. The velocity is a
//! Darcy (optionally Brinkman-regularized) field determined by a divergence
//! constraint `rho_f div v = K_B C P - K_R D`, solved on the whole box with
//! volume penalization outside `Omega_t`.
//!
//! Modules follow the pipeline:
//!
//! * [`grid`]: uniform cell-centered grid, scalar and staggered face fields.
//! * [`params`]: model and numerics parameter sets with validation.
//! * [`geometry`]: level set, prescribed motions, masks and reinitialization.
//! * [`kinetics`]: phase-exchange source terms and the divergence right side.
//! * [`linsolve`]: preconditioned conjugate-gradient building block.
//! * [`flow`]: penalized Darcy/Brinkman saddle-point solve on the MAC grid.
//! * [`transport`]: upwind advection and explicit source update of the phases.
//! * [`reactdiff`]: semi-implicit nutrient and drug steps.
//! * [`scheme`]: the coupled time loop with diagnostics.
//! * [`config`], [`snapshot`], [`export`]: run configuration and file I/O.
//! * [`verify`]: weak-form residuals, parameter sweeps and refinement studies.

pub mod config;
pub mod error;
pub mod export;
pub mod flow;
pub mod geometry;
pub mod grid;
pub mod kinetics;
pub mod linsolve;
pub mod params;
pub mod reactdiff;
pub mod scheme;
pub mod snapshot;
pub mod transport;
pub mod verify;

pub use error::{Error, Result};
pub use grid::{FaceField, Grid, ScalarField};
pub use params::{DrugResponse, ModelParams, NumericsParams};
