//! Reverse-mode differentiation, parameters, AdamW and checkpoints.

mod checkpoint;
pub(crate) mod kernels;
mod optim;
mod params;
mod tape;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
