//! Desk-scale offline multi-agent reinforcement learning with coupled value
//! factorization: factorized value networks trained fully in-sample via
//! expectile regression, advantage-weighted policy extraction, synthetic
//! Dec-POMDP tasks, an offline-dataset pipeline, and brute-force oracles
//! that verify the structural and optimality properties numerically.

pub mod checkpoint;
pub mod cvf;
pub mod dataset;
pub mod env;
pub mod error;
pub mod manifest;
pub mod numcore;
pub mod oracle;
pub mod trainer;
pub mod verify;

pub use error::{OmacError, Result};
