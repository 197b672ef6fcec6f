//! Simulation and analysis of closed-loop qubit-frequency stabilization:
//! 1/f noise synthesis, restless Ramsey estimation, accumulator feedback,
//! spectral estimation, coherence prediction and randomized benchmarking.

pub mod coherence;
pub mod error;
pub mod feedback;
pub mod fit;
pub mod physics;
pub mod ramsey;
pub mod rb;
pub mod scenario;
pub mod seed;
pub mod special;
pub mod spectral;

pub use error::{Error, Result};
