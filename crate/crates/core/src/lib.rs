//! XIT: self-supervised pretraining for univariate time series with
//! cross-dataset MixUp, temporal contrasting and soft interpolation
//! contextual contrasting.

// Config checks are written `!(x > 0.0)` so that NaN is rejected too, and
// the tensor kernels index flat buffers by computed offsets.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod augment;
pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod mixup;
pub mod model;
pub mod objective;
pub mod registry;
pub mod synthbench;
pub mod tensor;
pub mod train;

pub use error::{Result, XitError};
