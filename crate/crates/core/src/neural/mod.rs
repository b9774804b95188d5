//! Reverse-mode differentiation over real matrices and the MLP built on it.

pub mod adam;
pub mod complex;
pub mod mlp;
pub mod tape;

pub use adam::{AdamConfig, AdamState};
pub use complex::CVar;
pub use mlp::{BatchStats, MlpGrads, MlpHandles, MlpParameters, Mode, OutputInit};
pub use tape::{Gradients, Tape, Var};
