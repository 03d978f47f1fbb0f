//! Dual-encoder segmentation network for tumour and vessel delineation in CT
//! slices: a transformer semantic encoder and an SE-bottleneck local encoder,
//! a gated edge stream, and a pyramid-pooling fusion decoder, together with
//! the multi-task losses, training loop, metrics, volume reconstruction and
//! post-training quantization around it.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod deploy;
pub mod edge_module;
pub mod fusion_decoder;
mod error;
pub mod gradcheck;
pub mod local_encoder;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod reconstruct;
pub mod rng;
pub mod semantic_encoder;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
