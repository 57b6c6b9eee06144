//! Toy joint-attention diffusion transformer.
//!
//! Text, image and bridge tokens share one sequence and one set of layer weights;
//! the only thing that separates them is the per-layer [`LayerMask`](crate::maskgen::LayerMask).

mod layer;
mod sampler;
mod weights;

use serde::{Deserialize, Serialize};

use crate::channels::{Channels, MIN_DIM};
use crate::error::{Error, Result};

pub use layer::{gelu, joint_attention, rms_norm, run_layers, transformer_layer};
pub use sampler::{
    decode, forward, init_state, layout_for, sample, sample_from, sample_traced, time_embedding, ForwardOutput,
    Observer, PassCounter, TokenState,
};
pub use weights::{palette_color, LayerWeights, ModelWeights, WeightKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightMode {
    Random {
        seed: u64,
    },
    /// Mask-determined attribute transport, active only at `transport_layers`.
    Routing {
        transport_layers: Vec<usize>,
    },
}

impl WeightMode {
    /// Routing weights that transport at the middle layer `L/2`.
    pub fn routing_middle(layers: usize) -> Self {
        WeightMode::Routing { transport_layers: vec![layers / 2] }
    }

    pub fn routing_at(layer: usize) -> Self {
        WeightMode::Routing { transport_layers: vec![layer] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub steps: usize,
    /// Classifier-free guidance scale; 0 disables the unconditional pass.
    pub cfg_scale: f64,
    pub text_len_per_tag: usize,
    pub weight_mode: WeightMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 4,
            layers: 12,
            steps: 8,
            cfg_scale: 0.0,
            text_len_per_tag: 2,
            weight_mode: WeightMode::Random { seed: 0 },
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < MIN_DIM {
            return Err(Error::Validation(format!("dim must be >= {MIN_DIM}, got {}", self.dim)));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Validation(format!("dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        if self.layers == 0 || self.steps == 0 || self.text_len_per_tag == 0 {
            return Err(Error::Validation("layers, steps and text_len_per_tag must be >= 1".into()));
        }
        if !(self.cfg_scale.is_finite() && self.cfg_scale >= 0.0) {
            return Err(Error::Validation(format!("cfg scale must be finite and >= 0, got {}", self.cfg_scale)));
        }
        if let WeightMode::Routing { transport_layers } = &self.weight_mode {
            if let Some(l) = transport_layers.iter().find(|&&l| l >= self.layers) {
                return Err(Error::Validation(format!("routing layer {l} outside {} layers", self.layers)));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn channels(&self) -> Result<Channels> {
        Channels::for_dim(self.dim)
    }

    /// Global text length for a scene: `text_len_per_tag × |global tags|`.
    pub fn global_text_len(&self, scene: &crate::scene::SceneSpec) -> usize {
        self.text_len_per_tag * scene.global_tags.len()
    }
}
