//! Slow-fast adaptive-compute driving stack.
//!
//! A cheap per-frame trajectory planner (fast path) cooperates with an
//! expensive context reasoner over a streaming memory buffer (slow path).
//! A learned gate decides when the slow path runs and a confidence-scaled
//! fusion decides how much it contributes. Everything is trained end to end
//! by behaviour cloning in a small deterministic 2D driving simulator.

pub mod autodiff;
pub mod buffer;
pub mod connectors;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod planner;
pub mod qformer;
pub mod sim;
pub mod slow;
pub mod trainer;

pub use error::{Error, Result};
