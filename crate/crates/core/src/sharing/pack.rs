use serde::{Deserialize, Serialize};

use super::{SharingError, StagePlan};
use crate::diffcore::Real;
use crate::vit::{count_params, LayerParams, ModelConfig, ModelParams, SharedParams};

pub const PACK_FORMAT_VERSION: u32 = 1;

/// How a pack's layers were obtained.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// `"sws"` for stage-tied training, `"vanilla"` for Simple-LG packs.
    pub source: String,
    pub epochs: usize,
    pub seed: u64,
    pub alpha: f64,
    pub tau: f64,
    pub tau_square_scaling: bool,
}

/// The M per-stage layers of a trained tied model plus the components
/// needed to assemble a full network around them. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct LearngenePack<T: Real = f32> {
    config: ModelConfig,
    plan: StagePlan,
    layers: Vec<LayerParams<T>>,
    shared: SharedParams<T>,
    provenance: Provenance,
    format_version: u32,
}

impl<T: Real> LearngenePack<T> {
    pub fn new(
        config: ModelConfig,
        plan: StagePlan,
        layers: Vec<LayerParams<T>>,
        shared: SharedParams<T>,
        provenance: Provenance,
    ) -> Result<Self, SharingError> {
        if layers.len() != plan.stages() {
            return Err(SharingError::InvalidPack(format!(
                "{} layer sets for {} stages",
                layers.len(),
                plan.stages()
            )));
        }
        if plan.depth() != config.depth {
            return Err(SharingError::InvalidPack(format!(
                "plan depth {} differs from source depth {}",
                plan.depth(),
                config.depth
            )));
        }
        // Shape and finiteness checks go through the model validator.
        let model = ModelParams::from_parts(
            config.clone(),
            shared.clone(),
            layers.clone(),
            plan.position_map(),
            Some(plan.clone()),
        )?;
        if !model.is_finite() {
            return Err(SharingError::InvalidPack("non-finite tensor".into()));
        }
        Ok(Self {
            config,
            plan,
            layers,
            shared,
            provenance,
            format_version: PACK_FORMAT_VERSION,
        })
    }

    /// Treats each layer of an untied model as its own stage (Simple-LG).
    pub fn from_vanilla(vanilla: &ModelParams<T>, provenance: Provenance) -> Result<Self, SharingError> {
        if !vanilla.is_untied() {
            return Err(SharingError::PlanMismatch(
                "Simple-LG source must be an untied model".into(),
            ));
        }
        Self::new(
            vanilla.config().clone(),
            StagePlan::untied(vanilla.depth())?,
            vanilla.layers().to_vec(),
            vanilla.shared.clone(),
            provenance,
        )
    }

    /// Configuration of the model the pack was extracted from.
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn plan(&self) -> &StagePlan {
        &self.plan
    }

    pub fn layers(&self) -> &[LayerParams<T>] {
        &self.layers
    }

    pub fn shared(&self) -> &SharedParams<T> {
        &self.shared
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn format_version(&self) -> u32 {
        self.format_version
    }

    pub fn unique_param_count(&self) -> usize {
        self.shared.param_count() + self.layers.iter().map(LayerParams::param_count).sum::<usize>()
    }

    /// Rebuilds the stage-tied source model.
    pub fn to_tied_model(&self) -> ModelParams<T> {
        ModelParams::from_parts(
            self.config.clone(),
            self.shared.clone(),
            self.layers.clone(),
            self.plan.position_map(),
            Some(self.plan.clone()),
        )
        .expect("pack invariants validated at construction")
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.plan == other.plan
            && self.provenance == other.provenance
            && self.shared.bit_eq(&other.shared)
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.bit_eq(b))
    }
}

/// Deep-copies the M stage layers and shared components of a tied model.
pub fn extract_learngene<T: Real>(
    aux: &ModelParams<T>,
    plan: &StagePlan,
    provenance: Provenance,
) -> Result<LearngenePack<T>, SharingError> {
    if aux.layer_map() != plan.position_map() || aux.layers().len() != plan.stages() {
        return Err(SharingError::PlanMismatch(format!(
            "model aliasing {:?} was not built with plan {:?}",
            aux.layer_map(),
            plan.sizes()
        )));
    }
    let pack = LearngenePack::new(
        aux.config().clone(),
        plan.clone(),
        aux.layers().to_vec(),
        aux.shared.clone(),
        provenance,
    )?;
    debug_assert_eq!(pack.unique_param_count(), count_params(aux, true));
    Ok(pack)
}
