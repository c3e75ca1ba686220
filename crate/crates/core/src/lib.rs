//! Stage-wise weight sharing for vision transformers.
//!
//! An auxiliary transformer is trained with its layers tied within stages;
//! the per-stage layers ("learngenes") are then extracted and expanded to
//! initialize untied descendants of arbitrary depth.

pub mod data;
pub mod diffcore;
pub mod expand;
pub mod sharing;
pub mod store;
pub mod train;
pub mod vit;
