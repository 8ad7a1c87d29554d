//! Reverse-mode automatic differentiation over dense tensors.
//!
//! The engine is a tape: every operation appends a node holding its forward
//! value, and [`Graph::backward`] walks the tape in reverse. Trainable values
//! live in a [`ParamStore`] and are bound into a fresh graph for each step.
//!
//! The operator set is deliberately small: the elementwise and reduction ops,
//! `conv1d` with dilation, average pooling, batch normalisation, linear
//! upsampling along time and a log-magnitude STFT.

mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
mod optim;
mod param;
mod real;
mod spectral;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use error::{AutodiffError, Result};
pub use graph::{BatchNormMode, BatchStats, Graph, Var};
pub use optim::{Adam, AdamConfig, PlateauSchedule};
pub use param::{Binding, ParamId, ParamStore};
pub use real::Real;
pub use spectral::{log_mag_frames, StftConfig};
pub use tensor::Tensor;
