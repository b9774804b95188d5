//! Neural calibration of classical massive-MIMO downlink beamformers.
//!
//! Time-efficient model-based algorithms (LS channel estimation, MRT and ZF
//! beamforming) keep their closed forms; small permutation-equivariant MLPs,
//! shared across users or antennas, learn a correction to their *inputs*.
//! Everything is trained end to end on the downlink sum-rate through a
//! reverse-mode tape over real matrices.

pub mod baselines;
pub mod calibration;
pub mod channel;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod neural;
pub mod rng;

pub use error::{Error, Result};
pub use linalg::ComplexMatrix;
