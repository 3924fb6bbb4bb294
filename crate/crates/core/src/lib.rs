//! Quadratically regularized optimal transport on grids: an exact
//! block-coordinate dual solver, closed-form transport pairs, the explicit
//! Barenblatt-type couplings and lower-bound potentials, a porous-medium
//! reference, and ε-sweep tooling.

pub mod analytic;
pub mod asymptotics;
pub mod barenblatt;
pub mod error;
pub mod exact;
pub mod kernel;
pub mod measure;
pub mod pme;
pub mod quadrature;
pub mod solver;

pub use analytic::{make_family, AnalyticPair, BaseDensity, FamilyKind, FamilyParams};
pub use asymptotics::{sandwich, sweep, theoretical_limit, RateReport};
pub use barenblatt::{constants, glass_coupling, DimensionalConstants, FrameSpec};
pub use error::{Error, Result};
pub use measure::{build_grid_measure, BoxDomain, GridMeasure};
pub use pme::{barenblatt, free_energy, pme_residual, BarenblattProfile};
pub use solver::{
    dual_objective, primal_objective, solve, solve_from, support_fraction, Coupling,
    DualPotentials, QotSolution, SolveStats, SolverConfig,
};
