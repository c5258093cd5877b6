//! Toy latent video transformer: patch tokens, block-causal attention, action
//! AdaLN, text cross-attention and a two-expert mixture.

pub mod attention;
pub mod cache;
pub mod checkpoint;
pub mod conditioning;
pub mod dit;
pub mod latent;
pub mod mask;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use attention::{attention, multi_head_attention};
pub use cache::{CacheEntry, KvCache, LayerKv};
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_VERSION,
};
pub use conditioning::{
    action_features, adaln_modulate, encode_actions, frame_action_features, route_expert, timestep_embedding,
    tokenize_prompt, Expert, TextCond, ACTION_FEATURES,
};
pub use dit::{dit_forward, init_expert, init_teacher, is_adapter_param, predict, ForwardInput, ForwardOutput};
pub use latent::{check_patch_dims, patchify, patchify_frame, unpatchify, unpatchify_frame, LatentVideo};
pub use mask::{build_block_causal_mask, build_windowed_mask, AttentionMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub frame_height: usize,
    pub frame_width: usize,
    pub patch: usize,
    pub chunk_len: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub time_dim: usize,
    pub vocab: usize,
    /// Expert boundary: timesteps `≥ boundary` use the high-noise expert.
    pub boundary: f64,
    /// Data scale of the input skip `c(t) = σ²(1 − t) / ((1 − t)²σ² + t²)`; 0 disables it.
    pub skip_sigma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frame_height: 64,
            frame_width: 64,
            patch: 8,
            chunk_len: 4,
            dim: 128,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
            time_dim: 32,
            vocab: 256,
            boundary: 0.5,
            skip_sigma: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        check_patch_dims(self.frame_height, self.frame_width, self.patch)?;
        if self.chunk_len == 0 || self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} must split into {} heads", self.dim, self.heads)));
        }
        if !(self.boundary > 0.0 && self.boundary < 1.0) {
            return Err(Error::Config(format!("expert boundary {} outside (0, 1)", self.boundary)));
        }
        if !(self.skip_sigma >= 0.0 && self.skip_sigma.is_finite()) {
            return Err(Error::Config(format!("skip_sigma {} must be finite and non-negative", self.skip_sigma)));
        }
        if self.vocab == 0 || self.time_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("vocab, time_dim and mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn tokens_per_frame(&self) -> usize {
        (self.frame_height / self.patch) * (self.frame_width / self.patch)
    }

    pub fn chunk_tokens(&self) -> usize {
        self.tokens_per_frame() * self.chunk_len
    }

    /// Weight of the noisy input in the x0 prediction; exactly 1 at `t = 0` when enabled.
    pub fn skip_weight(&self, t: f64) -> f64 {
        let s2 = self.skip_sigma * self.skip_sigma;
        if s2 == 0.0 {
            return 0.0;
        }
        s2 * (1.0 - t) / ((1.0 - t) * (1.0 - t) * s2 + t * t)
    }

    /// Values per token: `patch² · 3`.
    pub fn channels(&self) -> usize {
        self.patch * self.patch * 3
    }
}
