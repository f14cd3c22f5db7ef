//! Few-shot part segmentation with a progressively fine-tuned two-stream
//! style-based generator.

// Numeric kernels index several buffers in lockstep, and `!(x > 0.0)`
// deliberately rejects NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod checkpoint;
pub mod error;
pub mod finetune;
pub mod generator;
pub mod inversion;
pub mod label;
pub mod metrics;
pub mod optim;
pub mod palette;
pub mod pixclass;
pub mod ploss;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod workdir;

pub use error::{Error, Result};
