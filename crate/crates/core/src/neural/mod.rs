//! Minimal dense-network substrate: MLPs with exact reverse-mode gradients,
//! a Gaussian policy head, Adam, Polyak averaging and flat parameter payloads.

pub mod adam;
pub mod gradcheck;
pub mod mlp;
pub mod params;
pub mod policy;

use thiserror::Error;

pub use adam::{polyak_update, AdamState};
pub use mlp::{Activation, Mlp, MlpTape};
pub use params::{ParamVector, TensorSpec};
pub use policy::{sample_action, ActionBounds, ActionSample, GaussianPolicyNet, PolicyTape, Squash};

#[derive(Debug, Error, PartialEq)]
pub enum NeuralError {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("corrupt parameter payload: {0}")]
    CorruptPayload(String),
}
