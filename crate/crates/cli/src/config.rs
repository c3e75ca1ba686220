//! Experiment configuration: a TOML file plus `--set key.path=value`
//! overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sws_core::data::{load_idx, make_synthetic, split, Dataset};
use sws_core::expand::{InitOrder, Strategy};
use sws_core::sharing::{balanced_plan, custom_plan, StagePlan};
use sws_core::train::TrainConfig;
use sws_core::vit::ModelConfig;

use crate::error::CliError;

/// Stage plan: explicit `sizes`, or `stages` balanced over the model depth.
/// Neither means one stage per layer (no sharing).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSection {
    pub stages: Option<usize>,
    pub sizes: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        n: usize,
        classes: usize,
        size: usize,
        seed: u64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_fraction() -> f64 {
    0.8
}

/// Depth sweep settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub depths: Vec<usize>,
    /// Also train a randomly initialized model per depth with `[train]`.
    pub scratch: bool,
    pub strategy: Strategy,
    pub order: InitOrder,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            depths: Vec::new(),
            scratch: false,
            strategy: Strategy::CyclicContiguous,
            order: InitOrder::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds model initialization and batch shuffling; `train.seed` is
    /// overwritten with it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub model: ModelConfig,
    #[serde(default)]
    pub plan: PlanSection,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    /// Reads `path`, applies `key.path=value` overrides (values parse as TOML
    /// literals, falling back to strings), then validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, overrides)
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut value: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: Self = value.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Cross-field checks run before any work.
    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.plan()?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let f = self.data.train_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(CliError::Config(format!("data.train_fraction {f} outside (0, 1)")));
        }
        if let DataSource::Synthetic { n, classes, size, .. } = &self.data.source {
            if *n == 0 || *classes == 0 || *size == 0 {
                return Err(CliError::Config("synthetic n, classes and size must be >= 1".into()));
            }
            if *classes != self.model.classes {
                return Err(CliError::Config(format!(
                    "data has {classes} classes, model.classes is {}",
                    self.model.classes
                )));
            }
            if *size != self.model.image_size || self.model.channels != 1 {
                return Err(CliError::Config(format!(
                    "synthetic images are 1x{size}x{size}, model expects {}x{}x{}",
                    self.model.channels, self.model.image_size, self.model.image_size
                )));
            }
        }
        if let Some(&d) = self.sweep.depths.iter().find(|&&d| d == 0) {
            return Err(CliError::Config(format!("sweep depth {d} must be >= 1")));
        }
        Ok(())
    }

    pub fn plan(&self) -> Result<StagePlan, CliError> {
        let depth = self.model.depth;
        let plan = match (&self.plan.sizes, self.plan.stages) {
            (Some(_), Some(_)) => return Err(CliError::Config("give plan.sizes or plan.stages, not both".into())),
            (Some(sizes), None) => custom_plan(sizes),
            (None, Some(m)) => balanced_plan(depth, m),
            (None, None) => StagePlan::untied(depth),
        }
        .map_err(|e| CliError::Config(e.to_string()))?;
        if plan.depth() != depth {
            return Err(CliError::Config(format!(
                "plan {:?} covers {} layers, model.depth is {depth}",
                plan.sizes(),
                plan.depth()
            )));
        }
        Ok(plan)
    }

    /// Loads or generates the data and splits it.
    pub fn datasets(&self) -> Result<(Dataset, Dataset), CliError> {
        let data = match &self.data.source {
            DataSource::Synthetic { n, classes, size, seed } => make_synthetic(*n, *classes, *size, *seed)?,
            DataSource::Idx { images, labels } => load_idx(images, labels)?,
        };
        if data.classes() > self.model.classes {
            return Err(CliError::Config(format!(
                "data has {} classes, model.classes is {}",
                data.classes(),
                self.model.classes
            )));
        }
        let shape = data.image_shape();
        if shape != [self.model.channels, self.model.image_size, self.model.image_size] {
            return Err(CliError::Config(format!(
                "images are {shape:?}, model expects {}x{}x{}",
                self.model.channels, self.model.image_size, self.model.image_size
            )));
        }
        Ok(split(&data, self.data.train_fraction, self.data.split_seed)?)
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key `{key}`")));
    }
    let value = parse_literal(raw.trim());
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
