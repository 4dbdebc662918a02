//! Circuit-averaged two-replica dynamics of 1+1d Brownian circuits.
//!
//! The crate builds the effective replica Hamiltonian, evolves replica MPS in
//! imaginary time and extracts collision probabilities, Renyi-2 conditional
//! mutual information, XEB/fidelity and mutual purity, together with
//! small-N oracles and a sweep runner.

pub mod error;
pub mod linalg;
pub mod exact_oracle;
pub mod experiments_cli;
pub mod mps_engine;
pub mod observables;
pub mod replica_algebra;

pub use error::{Error, Result};
