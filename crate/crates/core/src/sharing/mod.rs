//! Stage plans, the stage-tied auxiliary model and learngene extraction.

mod aux;
mod pack;
mod plan;

pub use aux::build_aux;
pub use pack::{extract_learngene, LearngenePack, Provenance, PACK_FORMAT_VERSION};
pub use plan::{balanced_plan, custom_plan, StagePlan};

use crate::vit::VitError;

#[derive(Debug, thiserror::Error)]
pub enum SharingError {
    #[error("invalid stage plan: {0}")]
    InvalidPlan(String),
    #[error("plan does not match model: {0}")]
    PlanMismatch(String),
    #[error("learngene pack invalid: {0}")]
    InvalidPack(String),
    #[error(transparent)]
    Vit(#[from] VitError),
}
