//! Building blocks for a recurrent-attention small-object detector: a small
//! reverse-mode autodiff tensor library, a SqueezeNet-style backbone, an
//! attentive convolutional LSTM refiner, learnable reverse-Gaussian prior
//! maps, an anchor-based detection head with its multi-task loss, and
//! VOC-style average-precision evaluation.

pub mod error;
pub mod tensor;
pub mod kernels;
pub mod tape;
pub mod params;
pub mod gradcheck;
pub mod backbone;
pub mod rann;
pub mod prior;
pub mod head;
pub mod eval;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
pub use tape::{Tape, Val};
