use super::{SharingError, StagePlan};
use crate::diffcore::Real;
use crate::vit::{init_params, ModelConfig, ModelParams};

/// Stage-tied model: one layer storage per stage, referenced by every
/// position in that stage. Gradients from all positions of a stage
/// accumulate into its single storage.
pub fn build_aux<T: Real>(cfg: &ModelConfig, plan: &StagePlan, seed: u64) -> Result<ModelParams<T>, SharingError> {
    cfg.validate()?;
    if plan.depth() != cfg.depth {
        return Err(SharingError::PlanMismatch(format!(
            "plan {:?} sums to {}, model depth is {}",
            plan.sizes(),
            plan.depth(),
            cfg.depth
        )));
    }
    let (shared, layers) = init_params(cfg, plan.stages(), seed);
    Ok(ModelParams::from_parts(
        cfg.clone(),
        shared,
        layers,
        plan.position_map(),
        Some(plan.clone()),
    )?)
}
