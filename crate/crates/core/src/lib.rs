//! Momentum-consistency fine-tuning (MCFT) for point-cloud transformer encoders.

pub mod autograd;
pub mod encoder;
pub mod eval;
pub mod mcft;
pub mod optim;
pub mod pruning;
pub mod semisup;
pub mod pointcloud;
pub mod error;
pub mod scalar;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use scalar::Scalar;
