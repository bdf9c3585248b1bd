//! Quantifying the protection federated-learning uplink protocols offer
//! against an eavesdropping adversary.
//!
//! A server samples a subset of clients each round; a monitored client's
//! uplink is intercepted with some probability by an adversary maintaining
//! its own copy of the client's model. Protection is the expected squared
//! distance between the client's model and the adversary's estimate. The
//! crate provides:
//!
//! * [`fl`]: round dynamics for increment uplinks (FLIP) and full-model
//!   uplinks (FLOP), with synthetic quadratic client objectives;
//! * [`adversary`]: the eavesdropper's estimator, its selection clock, and
//!   the spectral stability condition on its surrogate transition matrix;
//! * [`analysis`]: closed forms: the innovation transition, the error
//!   covariance map, the per-round protection lower bound, and the
//!   perfect-eavesdropping equality with its optimal sampling probability;
//! * [`experiments`]: seeded Monte Carlo, exact enumeration over the
//!   participation/interception outcomes, cross-term probes, and sweeps;
//! * [`verify`]: the oracle battery cross-checking each closed form against
//!   an independent route.

pub mod adversary;
pub mod analysis;
pub mod config;
pub mod error;
pub mod experiments;
pub mod fl;
pub mod verify;

pub use config::{RunConfig, RunMode};
pub use error::{Error, Result};
pub use fl::{ModelVector, ProtocolKind, QuadraticObjective, RoundTrace};
