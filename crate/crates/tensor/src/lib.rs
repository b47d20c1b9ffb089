//! Minimal dense tensor engine with reverse-mode automatic differentiation.
//!
//! Values live in [`Tensor`]. A forward computation is recorded on a [`Tape`]
//! (one tape per forward pass); [`Tape::backward`] replays it in reverse and
//! returns [`Gradients`]. Named, owner-tagged parameters are kept in a
//! [`ParamStore`], optimized with [`AdamW`] and persisted with the checkpoint
//! functions in [`checkpoint`].

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod kernels;
mod ops;
pub mod optim;
mod params;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use ops::{BatchNormStats, NormMode, RowMap};
pub use optim::{cosine_lr, AdamW, AdamWConfig};
pub use params::{ParamEntry, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
