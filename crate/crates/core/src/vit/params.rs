use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{ModelConfig, VitError};
use crate::diffcore::{Real, Tensor};
use crate::sharing::StagePlan;

const INIT_STD: f64 = 0.02;

/// Parameters of one pre-LN transformer layer. Weights are `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T: Real = f32> {
    pub norm1_weight: Tensor<T>,
    pub norm1_bias: Tensor<T>,
    pub qkv_weight: Tensor<T>,
    pub qkv_bias: Tensor<T>,
    pub proj_weight: Tensor<T>,
    pub proj_bias: Tensor<T>,
    pub norm2_weight: Tensor<T>,
    pub norm2_bias: Tensor<T>,
    pub fc1_weight: Tensor<T>,
    pub fc1_bias: Tensor<T>,
    pub fc2_weight: Tensor<T>,
    pub fc2_bias: Tensor<T>,
}

/// Everything outside the transformer layers.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedParams<T: Real = f32> {
    pub patch_weight: Tensor<T>,
    pub patch_bias: Tensor<T>,
    pub cls_token: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub norm_weight: Tensor<T>,
    pub norm_bias: Tensor<T>,
    pub head_weight: Tensor<T>,
    pub head_bias: Tensor<T>,
}

macro_rules! tensor_fields {
    ($ty:ident { $($field:ident => $name:literal),* $(,)? }) => {
        impl<T: Real> $ty<T> {
            pub const NAMES: &'static [&'static str] = &[$($name),*];

            pub fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
                vec![$(($name, &self.$field)),*]
            }

            pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
                vec![$(($name, &mut self.$field)),*]
            }

            pub fn cast<U: Real>(&self) -> $ty<U> {
                $ty { $($field: self.$field.cast()),* }
            }

            /// Rebuilds from `(name, tensor)` pairs keyed by [`Self::NAMES`].
            pub fn from_named(
                mut lookup: impl FnMut(&'static str) -> Option<Tensor<T>>,
            ) -> Result<Self, String> {
                Ok($ty {
                    $($field: lookup($name).ok_or_else(|| format!("missing tensor {}", $name))?),*
                })
            }

            pub fn param_count(&self) -> usize {
                self.tensors().iter().map(|(_, t)| t.numel()).sum()
            }

            pub fn bit_eq(&self, other: &Self) -> bool {
                self.tensors()
                    .iter()
                    .zip(other.tensors())
                    .all(|((_, a), (_, b))| a.bit_eq(b))
            }
        }
    };
}

tensor_fields!(LayerParams {
    norm1_weight => "norm1.weight",
    norm1_bias => "norm1.bias",
    qkv_weight => "attn.qkv.weight",
    qkv_bias => "attn.qkv.bias",
    proj_weight => "attn.proj.weight",
    proj_bias => "attn.proj.bias",
    norm2_weight => "norm2.weight",
    norm2_bias => "norm2.bias",
    fc1_weight => "mlp.fc1.weight",
    fc1_bias => "mlp.fc1.bias",
    fc2_weight => "mlp.fc2.weight",
    fc2_bias => "mlp.fc2.bias",
});

tensor_fields!(SharedParams {
    patch_weight => "patch_embed.weight",
    patch_bias => "patch_embed.bias",
    cls_token => "cls_token",
    pos_embed => "pos_embed",
    norm_weight => "norm.weight",
    norm_bias => "norm.bias",
    head_weight => "head.weight",
    head_bias => "head.bias",
});

/// Truncated normal at ±2σ by rejection. Values pass through `f32` so that
/// `f32` and `f64` builds from one seed agree exactly.
pub(crate) fn trunc_normal<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break T::of((z * std) as f32 as f64);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

pub(crate) fn init_layer<T: Real>(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> LayerParams<T> {
    let (d, h) = (cfg.width, cfg.hidden());
    LayerParams {
        norm1_weight: Tensor::full([d], T::one()),
        norm1_bias: Tensor::zeros([d]),
        qkv_weight: trunc_normal(rng, &[d, 3 * d], INIT_STD),
        qkv_bias: Tensor::zeros([3 * d]),
        proj_weight: trunc_normal(rng, &[d, d], INIT_STD),
        proj_bias: Tensor::zeros([d]),
        norm2_weight: Tensor::full([d], T::one()),
        norm2_bias: Tensor::zeros([d]),
        fc1_weight: trunc_normal(rng, &[d, h], INIT_STD),
        fc1_bias: Tensor::zeros([h]),
        fc2_weight: trunc_normal(rng, &[h, d], INIT_STD),
        fc2_bias: Tensor::zeros([d]),
    }
}

pub(crate) fn init_head<T: Real>(width: usize, classes: usize, rng: &mut ChaCha8Rng) -> (Tensor<T>, Tensor<T>) {
    (trunc_normal(rng, &[width, classes], INIT_STD), Tensor::zeros([classes]))
}

/// Seeded initialization with `storages` layer storages. The random stream
/// is consumed in a fixed order: patch projection, class token, positional
/// table, each storage's weights, head.
pub(crate) fn init_params<T: Real>(
    cfg: &ModelConfig,
    storages: usize,
    seed: u64,
) -> (SharedParams<T>, Vec<LayerParams<T>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.width;
    let patch_weight = trunc_normal(&mut rng, &[cfg.patch_dim(), d], INIT_STD);
    let cls_token = trunc_normal(&mut rng, &[1, d], INIT_STD);
    let pos_embed = trunc_normal(&mut rng, &[cfg.tokens(), d], INIT_STD);
    let layers = (0..storages).map(|_| init_layer(cfg, &mut rng)).collect();
    let (head_weight, head_bias) = init_head(d, cfg.classes, &mut rng);
    let shared = SharedParams {
        patch_weight,
        patch_bias: Tensor::zeros([d]),
        cls_token,
        pos_embed,
        norm_weight: Tensor::full([d], T::one()),
        norm_bias: Tensor::zeros([d]),
        head_weight,
        head_bias,
    };
    (shared, layers)
}

/// Full parameter set of a (possibly stage-tied) transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    config: ModelConfig,
    pub shared: SharedParams<T>,
    layers: Vec<LayerParams<T>>,
    layer_map: Vec<usize>,
    plan: Option<StagePlan>,
}

impl<T: Real> ModelParams<T> {
    /// Assembles and validates a model. `layer_map[i]` is the storage used at
    /// position `i`; when a plan is attached the map must equal the plan's.
    pub fn from_parts(
        config: ModelConfig,
        shared: SharedParams<T>,
        layers: Vec<LayerParams<T>>,
        layer_map: Vec<usize>,
        plan: Option<StagePlan>,
    ) -> Result<Self, VitError> {
        config.validate()?;
        if layer_map.len() != config.depth {
            return Err(VitError::Aliasing(format!(
                "{} positions for depth {}",
                layer_map.len(),
                config.depth
            )));
        }
        if let Some(&bad) = layer_map.iter().find(|&&s| s >= layers.len()) {
            return Err(VitError::Aliasing(format!(
                "position refers to storage {bad} of {}",
                layers.len()
            )));
        }
        let mut used = vec![false; layers.len()];
        layer_map.iter().for_each(|&s| used[s] = true);
        if used.contains(&false) {
            return Err(VitError::Aliasing("unreferenced layer storage".into()));
        }
        if let Some(plan) = &plan {
            if plan.position_map() != layer_map {
                return Err(VitError::Aliasing(format!(
                    "layer map {layer_map:?} does not match plan {:?}",
                    plan.sizes()
                )));
            }
        }
        let model = Self {
            config,
            shared,
            layers,
            layer_map,
            plan,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<(), VitError> {
        let c = &self.config;
        let (d, h) = (c.width, c.hidden());
        let expect_shared: [&[usize]; 8] = [
            &[c.patch_dim(), d],
            &[d],
            &[1, d],
            &[c.tokens(), d],
            &[d],
            &[d],
            &[d, c.classes],
            &[c.classes],
        ];
        let expect_layer: [&[usize]; 12] = [
            &[d],
            &[d],
            &[d, 3 * d],
            &[3 * d],
            &[d, d],
            &[d],
            &[d],
            &[d],
            &[d, h],
            &[h],
            &[h, d],
            &[d],
        ];
        let mismatch = |name: &str, got: &[usize], want: &[usize]| {
            VitError::InvalidConfig(format!("{name}: shape {got:?}, expected {want:?}"))
        };
        for ((name, t), want) in self.shared.tensors().into_iter().zip(expect_shared) {
            if t.shape() != want {
                return Err(mismatch(name, t.shape(), want));
            }
        }
        for layer in &self.layers {
            for ((name, t), want) in layer.tensors().into_iter().zip(expect_layer) {
                if t.shape() != want {
                    return Err(mismatch(name, t.shape(), want));
                }
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn depth(&self) -> usize {
        self.layer_map.len()
    }

    /// Distinct layer storages (M for a tied model, L when untied).
    pub fn layers(&self) -> &[LayerParams<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams<T>] {
        &mut self.layers
    }

    pub fn layer_map(&self) -> &[usize] {
        &self.layer_map
    }

    pub fn plan(&self) -> Option<&StagePlan> {
        self.plan.as_ref()
    }

    /// Layer parameters used at `position` (0-based).
    pub fn layer_at(&self, position: usize) -> &LayerParams<T> {
        &self.layers[self.layer_map[position]]
    }

    pub fn is_untied(&self) -> bool {
        self.layers.len() == self.layer_map.len()
            && self.layer_map.iter().enumerate().all(|(i, &s)| i == s)
    }

    /// Materializes independent storage for every position.
    pub fn untie(&self) -> Self {
        Self {
            config: self.config.clone(),
            shared: self.shared.clone(),
            layers: self.layer_map.iter().map(|&s| self.layers[s].clone()).collect(),
            layer_map: (0..self.layer_map.len()).collect(),
            plan: None,
        }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            shared: self.shared.cast(),
            layers: self.layers.iter().map(LayerParams::cast).collect(),
            layer_map: self.layer_map.clone(),
            plan: self.plan.clone(),
        }
    }

    /// Unique tensors with stable names: shared first, then
    /// `layers.{storage}.{name}`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = self
            .shared
            .tensors()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t))
            .collect();
        for (s, layer) in self.layers.iter().enumerate() {
            out.extend(
                layer
                    .tensors()
                    .into_iter()
                    .map(|(n, t)| (format!("layers.{s}.{n}"), t)),
            );
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = self
            .shared
            .tensors_mut()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t))
            .collect();
        for (s, layer) in self.layers.iter_mut().enumerate() {
            out.extend(
                layer
                    .tensors_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("layers.{s}.{n}"), t)),
            );
        }
        out
    }

    pub fn zero_grad(&mut self) {
        self.named_tensors_mut().into_iter().for_each(|(_, t)| t.zero_grad());
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Bitwise equality of configuration, aliasing and every tensor.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.layer_map == other.layer_map
            && self.shared.bit_eq(&other.shared)
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.bit_eq(b))
    }

    /// Replaces the classification head, updating the class count.
    pub fn replace_head(&mut self, weight: Tensor<T>, bias: Tensor<T>) -> Result<(), VitError> {
        let classes = bias.numel();
        if weight.shape() != [self.config.width, classes] || bias.shape() != [classes] {
            return Err(VitError::InvalidConfig(format!(
                "head shapes {:?}/{:?} do not fit width {}",
                weight.shape(),
                bias.shape(),
                self.config.width
            )));
        }
        self.shared.head_weight = weight;
        self.shared.head_bias = bias;
        self.config.classes = classes;
        Ok(())
    }
}

/// Untied model with seeded truncated-normal weights (std 0.02), zero biases
/// and unit LayerNorm scales.
pub fn build_model<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<T>, VitError> {
    cfg.validate()?;
    let (shared, layers) = init_params(cfg, cfg.depth, seed);
    ModelParams::from_parts(cfg.clone(), shared, layers, (0..cfg.depth).collect(), None)
}

/// Parameter count. `unique_only` counts each aliased storage once;
/// otherwise every layer position is counted.
pub fn count_params<T: Real>(params: &ModelParams<T>, unique_only: bool) -> usize {
    let per_layer = params.config.layer_param_count();
    let layers = if unique_only {
        params.layers.len()
    } else {
        params.layer_map.len()
    };
    params.shared.param_count() + layers * per_layer
}
