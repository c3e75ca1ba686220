use serde::{Deserialize, Serialize};

use super::VitError;

fn default_mlp_ratio() -> f64 {
    4.0
}

/// Architectural hyperparameters of a ViT classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    pub classes: usize,
}

impl ModelConfig {
    /// ViT-B/16 at 224px with a 1000-way head.
    pub fn vit_base(depth: usize) -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            depth,
            width: 768,
            heads: 12,
            mlp_ratio: 4.0,
            classes: 1000,
        }
    }

    pub fn validate(&self) -> Result<(), VitError> {
        let bad = |msg: String| Err(VitError::InvalidConfig(msg));
        if [
            self.image_size,
            self.patch_size,
            self.channels,
            self.depth,
            self.width,
            self.heads,
            self.classes,
        ]
        .contains(&0)
        {
            return bad(format!("all extents must be positive: {self:?}"));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !self.width.is_multiple_of(self.heads) {
            return bad(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            ));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) || self.hidden() == 0 {
            return bad(format!("mlp_ratio {} yields no hidden units", self.mlp_ratio));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        (self.width as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    /// Patch tokens plus the class token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Parameters in one transformer layer.
    pub fn layer_param_count(&self) -> usize {
        let (d, h) = (self.width, self.hidden());
        (d * 3 * d + 3 * d) + (d * d + d) + 4 * d + (d * h + h) + (h * d + d)
    }

    /// Parameters outside the transformer layers.
    pub fn shared_param_count(&self) -> usize {
        let d = self.width;
        (self.patch_dim() * d + d) + d + self.tokens() * d + 2 * d + (d * self.classes + self.classes)
    }

    pub fn with_depth(&self, depth: usize) -> Self {
        Self {
            depth,
            ..self.clone()
        }
    }
}
