//! Audio-visual deepfake detection.
//!
//! A face branch (convolutional features, tubelet tokens, self-attention) and a
//! lip/audio branch (cross-attention between lip crops and audio frames) are
//! fused into a real/fake classifier. Everything runs on a small dense tensor
//! type with exact reverse-mode gradients.

pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod param;
pub mod prep;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::{Mode, Model, ModelConfig};
pub use tensor::Tensor;
