//! Mean-field and finite-size simulation of networks of coupled continuous
//! time crystals.
//!
//! * [`model`]: parameters and the mean-field vector field
//! * [`integrator`]: adaptive DOP853 integration with dense output
//! * [`stationary`]: fixed points, linear stability and critical couplings
//! * [`spectral`]: Liouvillian construction and slow spectrum at finite N
//! * [`analysis`]: observed frequencies and synchronisation measures
//! * [`sweep`]: parallel parameter grids with resumable persistence

pub mod analysis;
pub mod error;
pub mod integrator;
pub mod model;
pub mod spectral;
pub mod stationary;
pub mod sweep;

pub use error::{Error, Result};
pub use integrator::{integrate, IntegrationConfig, Trajectory};
pub use model::{BlochState, CouplingKind, CouplingSpec, EnsembleParams, NetworkParams};
