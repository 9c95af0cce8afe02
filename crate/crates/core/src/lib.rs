//! Multimodal gaze-target prediction at desk scale.
//!
//! A head crop yields a gaze direction, which is rendered into a gaze cone.
//! Per-modality extractors turn each input image, the cone and the head mask
//! into feature maps; an attention module fuses them; a decoder regresses the
//! gaze heatmap and an optional head classifies in/out of frame.

pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod data;
pub mod encoders;
pub mod eval;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pgm;
pub mod train;

pub use config::{ModalityId, RunConfig, Variant};
pub use error::{GazeError, Result};
