//! Ensemble Gaussian mixture filtering for low-dimensional stochastic systems.
//!
//! The library is organised bottom-up:
//!
//! * [`dynamics`] - drift fields and SDE/ODE steppers for the three test systems
//!   (double well, underdamped Langevin, Lorenz-63), plus ensemble propagation
//!   and synthetic observation generation.
//! * [`ensemble`] - sample statistics and inflation on column-major ensembles.
//! * [`mixture`] - Gaussian mixtures, EM fitting, kernel density mixtures and
//!   the component-count policy used by the bimodal experiments.
//! * [`transport`] - the fictitious-time analysis flow that moves ensemble
//!   members from prior to posterior, with its contraction and exchange fields.
//! * [`filters`] - one-call reference filters (perturbed-observation EnKF,
//!   continuous square-root filter, rank histogram filter, ensemble
//!   Kalman-Bucy step) and the mixture filter analysis entry point.
//! * [`fokker_planck`] - an exact grid solver for the 1-D filtering problem,
//!   used as ground truth for the double-well experiment.
//! * [`harness`] - experiment drivers, configuration parsing and output
//!   writing for the CLI.

pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod filters;
pub mod fokker_planck;
pub mod harness;
pub mod mixture;
pub mod rng;
pub mod transport;

pub use error::{Error, Result};
