//! Decoupled oriented-box head with cascaded activation masks.

mod config;
mod loss;
mod model;

pub use config::{ComponentGroup, DecouplingOrder, HeadConfig, MaskGradient, BLOCKS};
pub use loss::{head_loss, LossTerms, LossWeights};
pub use model::{predict, HeadOutput, StdHead, MAX_LOG_SCALE};
