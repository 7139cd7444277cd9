//! Two-stage single-image depth estimation: a scene router picks a low- or
//! high-range depth network, which predicts depth by soft classification
//! over log-spaced bins.

pub mod dataio;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod netgraph;
pub mod pipeline;
pub mod quantizer;
pub mod router;

pub use error::{Error, Result};
