//! Open-vocabulary detection with a generative object captioner that emits
//! hierarchical `phrase | category | parent category` labels, plus the
//! auto-annotation pipeline, staged training, and evaluation protocols.
//! Desk-scale: everything runs on a single CPU over synthetic shape scenes.

pub mod annotation;
pub mod autodiff;
pub mod captioner;
pub mod concepts;
pub mod detector;
pub mod error;
pub mod geometry;
pub mod nn;
pub mod tensor;
pub mod text_encoder;

pub use error::{Error, Result};
