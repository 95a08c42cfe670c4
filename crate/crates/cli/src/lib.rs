//! Pipeline glue for the recurrent-attention detector: configuration,
//! synthetic datasets, training, checkpoints, inference, evaluation, and
//! heatmap export. The `kbrann` binary is a thin dispatcher over this crate.

pub mod error;
pub mod config;
pub mod data;
pub mod checkpoint;
pub mod model;
pub mod train;
pub mod infer;

pub use config::{PipelineConfig, Variant};
pub use error::{CliError, Result};
pub use model::Model;
