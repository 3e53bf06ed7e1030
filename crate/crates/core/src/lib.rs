//! Semi-supervised congestion classification for railway stations from sparse,
//! subjective passenger reports, regularized by the rail network.

pub mod bench;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod graphssl;
pub mod nn;
pub mod railgraph;
pub mod seed;
pub mod synthgen;

pub use error::{Error, Result};
