//! DenseNet with squeeze-and-excitation attention for breast histopathology
//! classification, with multi-stage transfer learning, a deterministic
//! preprocessing pipeline and patient-level accuracy metrics.

pub mod cli;
pub mod data;
pub mod densenet;
pub mod engine;
pub mod metrics;
pub mod trainer;
pub mod transfer;

pub use densenet::{ArchitectureConfig, Model, ModelError};
pub use engine::{EngineError, Tensor};
