//! Scene-adaptive RGB-X fusion object detection.
//!
//! Two frozen single-modality detector branches are fused per pyramid level
//! by small channel/spatial attention modules; a scene classifier routes
//! each input to a scene-specific bank of fusion modules. Everything runs on
//! a self-contained f64 reverse-mode autodiff engine, and the whole pipeline
//! is exercised on a deterministic synthetic multimodal benchmark.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod report;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
