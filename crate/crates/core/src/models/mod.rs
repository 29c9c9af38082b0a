//! Differentiable networks: attention primitives, the identity adapter,
//! the face-embedding refiner, the frame-stack denoiser, the pixel
//! autoencoder, the identity embedder, and the sampling-time identity
//! objective.

pub mod adapter;
pub mod attention;
pub mod decoder;
pub mod denoiser;
pub mod embedder;
pub mod encoder;
pub mod guidance;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SanmError};


pub use adapter::{distribution_align, AlignMode, IdAdapterBlock};
pub use attention::{AttentionBlock, FeedForward, Linear};
pub use decoder::{ToyDecoder, ToyEncoder, PATCH_DIM};
pub use denoiser::{ConditionedDenoiser, DenoiserCond, DenoiserModel, GeneratorModel};
pub use embedder::{cosine, IdentityEmbedder};
pub use encoder::FaceEncoder;
pub use guidance::IdentityObjective;

/// Network and clip dimensions. Defaults are the desk-scale setup: 16x16
/// RGB frames as 16 patch tokens, 8-channel latents, 8-frame clips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    /// Frames per clip.
    pub frames: usize,
    /// Latent tokens per frame (one per pixel patch).
    pub tokens: usize,
    /// Channels per latent token.
    pub latent_dim: usize,
    /// Width of the attention/adapter stream.
    pub model_dim: usize,
    /// Attention heads (must divide `model_dim`).
    pub heads: usize,
    /// Identity-adapter blocks in the denoiser.
    pub adapter_blocks: usize,
    /// Refinement blocks in the face encoder.
    pub face_blocks: usize,
    /// Identity-embedding dimension.
    pub d_id: usize,
    /// How the face branch merges into the image branch.
    pub align: AlignMode,
    /// Whether the frame-axis attention layer is applied.
    pub use_temporal: bool,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            frames: 8,
            tokens: 16,
            latent_dim: 8,
            model_dim: 32,
            heads: 2,
            adapter_blocks: 2,
            face_blocks: 2,
            d_id: 8,
            align: AlignMode::Full,
            use_temporal: true,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("frames", self.frames),
            ("tokens", self.tokens),
            ("latent_dim", self.latent_dim),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("d_id", self.d_id),
        ] {
            if v == 0 {
                return Err(SanmError::Config(format!("{name} must be positive")));
            }
        }
        if self.model_dim % self.heads != 0 {
            return Err(SanmError::Config(format!(
                "model_dim {} must be divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }

    /// Hidden width of the adapter feed-forward layers.
    pub fn ff_hidden(&self) -> usize {
        2 * self.model_dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_dims_validate() {
        ModelDims::default().validate().unwrap();
    }

    #[test]
    fn bad_dims_are_rejected() {
        let mut d = ModelDims::default();
        d.heads = 3;
        assert!(d.validate().is_err());
        let mut d = ModelDims::default();
        d.frames = 0;
        assert!(d.validate().is_err());
    }

    #[test]
    fn dims_deserialize_with_defaults_and_reject_unknown_keys() {
        let d: ModelDims = toml::from_str("model_dim = 16\nheads = 2").unwrap();
        assert_eq!(d.model_dim, 16);
        assert_eq!(d.frames, 8);
        assert!(toml::from_str::<ModelDims>("modle_dim = 16").is_err());
        let d: ModelDims = toml::from_str("align = \"norm\"").unwrap();
        assert_eq!(d.align, AlignMode::Norm);
    }
}
