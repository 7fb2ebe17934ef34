//! Saliency-guided training combined with PACT quantization-aware training,
//! built on a small reverse-mode autodiff engine.
//!
//! Module map:
//! - [`tensor`], [`tape`], [`gradcheck`]: tensors, autodiff and the
//!   finite-difference oracle
//! - [`quant`]: PACT activations and fake-quantized weights with STE gradients
//! - [`saliency`]: input-gradient saliency, feature ranking and masking
//! - [`objectives`]: cross-entropy, KL divergence, the combined objective
//! - [`model`], [`checkpoint`]: CNN construction and persistence
//! - [`data`]: MNIST IDX and CIFAR-10 binary loaders, batching
//! - [`train`]: the training loop and evaluation protocols

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod model;
pub mod objectives;
pub mod quant;
pub mod rng;
pub mod saliency;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{build_model, ForwardMode, LayerSpec, Model, ModelConfig};
pub use objectives::LossBreakdown;
pub use quant::{PactLayerState, WeightQuantConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
pub use data::{Batch, Dataset, DatasetKind, Split};
pub use saliency::SaliencyResult;
pub use train::{MetricsRecord, TrainConfig, TrainMode};

