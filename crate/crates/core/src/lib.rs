//! Attention-pooled fully convolutional network for utterance-level speech
//! emotion recognition, with hand-written backpropagation.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{build_model, infer_shapes, Model, ModelConfig, Stack};
pub use tensor::{Real, Tensor};
