//! Spatial transformer networks built on a small reverse-mode autodiff core,
//! plus the experiment harness that compares warping inputs against warping
//! CNN feature maps.

pub mod cli;
pub mod data;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod models;
mod kernels;
pub mod rng;
pub mod spatial;
pub mod tape;
pub mod tensor;

pub use error::{CheckpointError, Error, IdxErrorKind, Result};
pub use gradcheck::{numeric_grad_check, numeric_grad_check_many};
pub use spatial::{AffineParams, HeadMode, SamplingGrid};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
