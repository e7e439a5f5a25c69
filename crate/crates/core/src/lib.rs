//! Click-through-rate prediction over multi-field categorical data.
//!
//! Every record is a set of categorical fields (city, ad slot, creative, ...)
//! that is one-hot encoded field by field into a sparse binary vector. On top
//! of that encoding the crate provides:
//!
//! - [`baseline`]: logistic regression over the sparse one-hot features.
//! - [`fm`]: a second-order factorisation machine.
//! - [`fnn`]: a neural network whose field-wise embedding layer is initialised
//!   from a trained factorisation machine, then fine-tuned end to end.
//! - [`snn`]: a neural network with a fully connected sigmoid bottom layer that
//!   is pre-trained by a sampled RBM or a sampled denoising auto-encoder.
//!
//! Training, early stopping and hyperparameter search live in [`train`];
//! AUC and log loss in [`eval`]; independent numerical oracles in [`verify`].

pub mod baseline;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod fm;
pub mod fnn;
pub mod model_file;
pub mod net;
pub mod schema;
pub mod snn;
pub mod synth;
pub mod train;
pub mod verify;

pub use baseline::LrModel;
pub use data::{Dataset, SampledView};
pub use error::{Error, Result};
pub use eval::ScoredSet;
pub use fm::FmModel;
pub use fnn::FnnModel;
pub use model_file::{ModelFile, ModelKind, TrainedModel};
pub use net::{Activation, DenseLayer, DropoutMask, MlpStack};
pub use schema::{FieldSchema, SparseInstance};
pub use snn::{PretrainConfig, PretrainMethod, SnnModel};
pub use train::{TrainConfig, TrainReport};

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
