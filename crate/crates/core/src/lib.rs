//! Spatial-transform-decoupled oriented box regression at desk scale.
//!
//! The crate bundles a small reverse-mode autodiff engine, rotated-box
//! geometry, masked self-attention, the decoupled head itself, a synthetic
//! scene generator, and the training / evaluation / ablation loop behind the
//! `stdet` command-line tool.

pub mod attention;
pub mod autodiff;
pub mod cli;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod head;
pub mod scenes;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
