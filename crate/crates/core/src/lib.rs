//! SimSiam+VAE self-supervised representation learning, the SimSiam naming
//! game for two-agent emergent communication, and the evaluation stack
//! (linear probe, collapse diagnostics, TopSim) around them.

pub mod error;
pub mod graph;
pub mod kernels;
pub mod nn;

pub use error::{Error, Result};
