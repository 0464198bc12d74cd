//! Face swapping with dual non-identity target encoders and a
//! skip-connection-free fusion decoder, trained adversarially to purge the
//! target's identity from its representation. Runs end to end on a CPU
//! against a procedural synthetic dataset with pluggable oracle backends
//! for the external models (ID embedding, pose/expression prediction,
//! face segmentation).

pub mod autodiff;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod imgio;
pub mod nn;
pub mod synthdata;

pub use config::{LossWeights, ModelConfig, RunConfig};
pub use error::{Error, Result};
