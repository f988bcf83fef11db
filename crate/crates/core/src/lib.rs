//! Data-vector model merging.
//!
//! Independently fine-tuned copies of one pre-trained model are turned into
//! parameter deltas ("data vectors"), summed with a scaling coefficient,
//! applied back to the base, and the fused model's batch-norm statistics are
//! restored. The crate also carries the desk-scale harness used to exercise
//! the method: a batch-normalized MLP, Adam training, synthetic data, and an
//! experiment runner that reports per-method accuracy and layer-wise cosine
//! diagnostics.

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod merge;
pub mod recalibrate;
mod rng;
pub mod tensor;
pub mod tinynet;
pub mod trainer;

pub use checkpoint::{read_checkpoint, write_checkpoint, ContentHash, Metadata};
pub use data::{Dataset, SyntheticSpec};
pub use error::{Error, Result};
pub use merge::{DataVector, MergeConfig};
pub use recalibrate::{RecalibrationConfig, RecalibrationMode};
pub use tensor::{Kind, NamedTensorSet, Tensor};
pub use tinynet::{ModelConfig, ModelState};
pub use trainer::{Metrics, TrainConfig};
