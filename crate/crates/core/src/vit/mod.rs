//! ViT-style classifier built from [`crate::diffcore`] primitives.
//!
//! Layer parameters are stored once per *storage* and referenced by layer
//! *position* through a position→storage map. An untied model has one
//! storage per position; a stage-tied model (see [`crate::sharing`]) has one
//! per stage.

mod config;
mod forward;
mod params;

pub use config::ModelConfig;
pub use forward::{forward_logits, BoundLayer, BoundModel};
pub use params::{build_model, count_params, LayerParams, ModelParams, SharedParams};
pub(crate) use params::{init_head, init_params};

use crate::diffcore::DiffError;

#[derive(Debug, thiserror::Error)]
pub enum VitError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid layer aliasing: {0}")]
    Aliasing(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}
