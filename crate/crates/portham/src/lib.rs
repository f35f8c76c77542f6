//! Port-Hamiltonian modeling, simulation, and minimum-energy-supply optimal control.
//!
//! The library builds finite-dimensional systems of the form
//!
//! ```text
//! x'(t) = (J - R) x(t) + B u(t),      y(t) = B* x(t),
//! ```
//!
//! with `J` exactly skew-symmetric and `R` symmetric positive semidefinite,
//! and provides:
//!
//! * [`operators`] — symmetric eigendecomposition of `R`, its square root,
//!   the orthogonal projector onto `ker R`, and distances to that kernel;
//! * [`models`] — builders for a 1-D Neumann diffusion rod and a damped
//!   Timoshenko beam, both with exact structure by construction;
//! * [`sim`] — RK4 time stepping for piecewise-constant controls with
//!   automatic stability substepping, plus supplied/stored/dissipated
//!   energy accounting;
//! * [`ocp`] — direct transcription of the singular energy-supply problem
//!   to a convex program in the control samples and an augmented-Lagrangian
//!   solver with projected accelerated gradient inner iterations;
//! * [`turnpike`] — steering controls, the three-phase comparator control,
//!   horizon-independent bounds on the integrated squared distance of
//!   optimal trajectories to `ker R`, and the associated metrics;
//! * [`config`] / [`runner`] / [`verify`] — TOML experiment configs, an
//!   experiment runner that writes CSV trajectories and a JSON report, and
//!   a self-check suite.

pub mod config;
pub mod error;
pub mod models;
pub mod ocp;
pub mod operators;
pub mod runner;
pub mod sim;
pub mod turnpike;
pub mod verify;

pub use error::Error;
pub use models::{build_diffusion, build_timoshenko, DiffusionConfig, PHSystem, TimoshenkoConfig};
pub use ocp::{solve, transcribe, ControlSet, OCPProblem, OCPResult, SolverOptions};
pub use operators::{dist_to_kernel, eig_sym, InnerProduct, SpectralData, StructuredOperatorPair};
pub use sim::{energy_report, simulate, step_rk4, ControlSignal, EnergyReport, TimeGrid, Trajectory};
pub use turnpike::{
    steer, three_phase_control, turnpike_bound, turnpike_metric, ThreePhaseControl, TurnpikeBound,
    TurnpikeReport,
};

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
