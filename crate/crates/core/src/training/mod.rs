//! Training: losses, optimization, pretraining, and checkpoints.
//!
//! The pipeline has three stages, each deterministic from its seed:
//!
//! 1. [`pretrain_decoder`] fits the patch codec; [`pretrain_identity_embedder`]
//!    fits the identity head. Both are frozen afterwards.
//! 2. [`train`] fits the generator by denoising noised clip latents under
//!    the face-mask-weighted loss ([`masked_reconstruction_loss`]).
//! 3. [`save_checkpoint`]/[`load_checkpoint`] persist named weights in a
//!    small binary format with a JSON manifest.

pub mod checkpoint;
pub mod loss;
pub mod optimizer;
pub mod pretrain;
pub mod trainer;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, load_into, parse_checkpoint, save_checkpoint, Checkpoint,
    CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use loss::{forward_diffuse, masked_reconstruction_loss};
pub use optimizer::{collect_named_grads, ModelOptimizer};
pub use pretrain::{
    embedding_separation, pretrain_decoder, pretrain_identity_embedder, reconstruction_psnr,
    CodecPretrainConfig, EmbedderPretrainConfig,
};
pub use trainer::{
    clip_conditioning, clip_token_masks, encode_clip, epoch_loss, train, train_epoch, TrainInputs,
    TrainParams,
};
