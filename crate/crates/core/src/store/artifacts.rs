use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{load, save, Kind, StoreError, TensorFile};
use crate::diffcore::Tensor;
use crate::sharing::{LearngenePack, Provenance, StagePlan, PACK_FORMAT_VERSION};
use crate::train::LogitCache;
use crate::vit::{LayerParams, ModelConfig, ModelParams, SharedParams};

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    layer_map: Vec<usize>,
    plan: Option<StagePlan>,
    #[serde(default)]
    extra: Value,
}

#[derive(Serialize, Deserialize)]
struct PackMeta {
    config: ModelConfig,
    plan: StagePlan,
    provenance: Provenance,
    format_version: u32,
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    dataset_hash: u64,
    rows: usize,
    classes: usize,
}

fn meta<T: for<'de> Deserialize<'de>>(file: &TensorFile) -> Result<T, StoreError> {
    serde_json::from_value(file.metadata.clone()).map_err(|e| StoreError::Malformed(format!("metadata: {e}")))
}

fn to_value(v: &impl Serialize) -> Value {
    serde_json::to_value(v).expect("metadata serializes")
}

/// Splits a decoded file's tensors into shared parameters and `storages`
/// layer sets, rejecting leftovers.
fn rebuild(file: TensorFile, storages: usize) -> Result<(SharedParams<f32>, Vec<LayerParams<f32>>), StoreError> {
    let mut map: HashMap<String, Tensor<f32>> = file.tensors.into_iter().collect();
    let shared = SharedParams::from_named(|n| map.remove(n)).map_err(StoreError::Malformed)?;
    let layers = (0..storages)
        .map(|s| LayerParams::from_named(|n| map.remove(&format!("layers.{s}.{n}"))).map_err(StoreError::Malformed))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(extra) = map.keys().next() {
        return Err(StoreError::Malformed(format!("unexpected tensor {extra}")));
    }
    Ok((shared, layers))
}

/// Saves a model; `extra` is free-form provenance kept in the header.
pub fn save_checkpoint(model: &ModelParams<f32>, extra: &Value, path: impl AsRef<Path>) -> Result<(), StoreError> {
    let metadata = to_value(&CheckpointMeta {
        config: model.config().clone(),
        layer_map: model.layer_map().to_vec(),
        plan: model.plan().cloned(),
        extra: extra.clone(),
    });
    save(Kind::Checkpoint, &model.named_tensors(), &metadata, path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams<f32>, Value), StoreError> {
    let file = load(path, Kind::Checkpoint)?;
    let m: CheckpointMeta = meta(&file)?;
    let storages = m.layer_map.iter().max().map_or(0, |&s| s + 1);
    let (shared, layers) = rebuild(file, storages)?;
    let model = ModelParams::from_parts(m.config, shared, layers, m.layer_map, m.plan)
        .map_err(|e| StoreError::Malformed(e.to_string()))?;
    Ok((model, m.extra))
}

pub fn save_pack(pack: &LearngenePack<f32>, path: impl AsRef<Path>) -> Result<(), StoreError> {
    let metadata = to_value(&PackMeta {
        config: pack.config().clone(),
        plan: pack.plan().clone(),
        provenance: pack.provenance().clone(),
        format_version: pack.format_version(),
    });
    let tied = pack.to_tied_model();
    save(Kind::Learngene, &tied.named_tensors(), &metadata, path)
}

pub fn load_pack(path: impl AsRef<Path>) -> Result<LearngenePack<f32>, StoreError> {
    let file = load(path, Kind::Learngene)?;
    let m: PackMeta = meta(&file)?;
    if m.format_version != PACK_FORMAT_VERSION {
        return Err(StoreError::UnsupportedVersion(m.format_version));
    }
    let (shared, layers) = rebuild(file, m.plan.stages())?;
    LearngenePack::new(m.config, m.plan, layers, shared, m.provenance).map_err(|e| StoreError::Malformed(e.to_string()))
}

const LOGITS: &str = "logits";

pub fn save_logit_cache(cache: &LogitCache, path: impl AsRef<Path>) -> Result<(), StoreError> {
    let metadata = to_value(&CacheMeta {
        dataset_hash: cache.dataset_hash(),
        rows: cache.rows(),
        classes: cache.classes(),
    });
    save(Kind::Logitcache, &[(LOGITS.to_string(), cache.logits())], &metadata, path)
}

pub fn load_logit_cache(path: impl AsRef<Path>) -> Result<LogitCache, StoreError> {
    let mut file = load(path, Kind::Logitcache)?;
    let m: CacheMeta = meta(&file)?;
    if file.tensors.len() != 1 || file.tensors[0].0 != LOGITS {
        return Err(StoreError::Malformed("logit cache must hold exactly one `logits` tensor".into()));
    }
    let (_, logits) = file.tensors.pop().unwrap();
    if logits.shape() != [m.rows, m.classes] {
        return Err(StoreError::Malformed(format!(
            "logits shape {:?} disagrees with metadata [{}, {}]",
            logits.shape(),
            m.rows,
            m.classes
        )));
    }
    LogitCache::new(logits, m.dataset_hash).map_err(|e| StoreError::Malformed(e.to_string()))
}
