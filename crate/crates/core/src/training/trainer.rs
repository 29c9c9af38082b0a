//! Denoiser training loop over synthetic clips.
//!
//! Each clip contributes one optimization step per epoch: encode its frames
//! with the frozen codec, noise them to a log-uniformly drawn level, ask the
//! generator to reconstruct the clean latents, and minimize the
//! face-mask-weighted squared error. The reference conditioning (first
//! frame's patches, its identity embedding, and the pose track) comes from
//! the clip itself.
//!
//! All randomness is derived from `(seed, epoch, clip index)`, so losses do
//! not depend on clip visit order and a rerun with the same seed reproduces
//! every weight bitwise.

use serde::{Deserialize, Serialize};

use crate::data::{mask_to_tokens, patchify, reference_frame, token_mask_tensor, SyntheticClip};
use crate::error::{Result, SanmError};
use crate::models::{DenoiserCond, GeneratorModel, IdentityEmbedder, ToyEncoder};
use crate::numerics::rng::SeededRng;
use crate::numerics::tape::GradTape;
use crate::numerics::tensor::NdTensor;
use crate::training::loss::{forward_diffuse, masked_reconstruction_loss};
use crate::training::optimizer::{collect_named_grads, ModelOptimizer};

/// Denoiser training hyperparameters. The noise range matches the
/// sampler's default schedule so training covers every level sampling
/// visits.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub epochs: usize,
    pub lr: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            epochs: 60,
            lr: 3e-3,
            sigma_min: 0.02,
            sigma_max: 10.0,
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) {
            return Err(SanmError::Config(format!(
                "learning rate must be non-negative, got {}",
                self.lr
            )));
        }
        if !(self.sigma_min > 0.0 && self.sigma_max > self.sigma_min) {
            return Err(SanmError::Config(format!(
                "noise range [{}, {}] must satisfy 0 < min < max",
                self.sigma_min, self.sigma_max
            )));
        }
        Ok(())
    }
}

/// Frozen components the denoiser trains against.
pub struct TrainInputs<'a> {
    pub clips: &'a [SyntheticClip],
    pub encoder: &'a ToyEncoder,
    pub embedder: &'a IdentityEmbedder,
}

/// Denoiser conditioning derived from a clip: reference patches, the
/// reference frame's identity embedding, and the pose track.
pub fn clip_conditioning(
    clip: &SyntheticClip,
    embedder: &IdentityEmbedder,
) -> Result<DenoiserCond> {
    let reference = reference_frame(clip)?;
    Ok(DenoiserCond {
        ref_patches: patchify(reference, clip.height, clip.width)?,
        face: embedder.embed(reference)?,
        pose: clip.pose_normalized(),
    })
}

/// Encode every frame of a clip into latents with the frozen codec.
pub fn encode_clip(clip: &SyntheticClip, encoder: &ToyEncoder) -> Result<Vec<NdTensor>> {
    clip.frames
        .iter()
        .map(|f| encoder.encode(&patchify(f, clip.height, clip.width)?))
        .collect()
}

/// Per-frame `[tokens, latent_dim]` face masks of a clip.
pub fn clip_token_masks(clip: &SyntheticClip, latent_dim: usize) -> Result<Vec<NdTensor>> {
    clip.masks
        .iter()
        .map(|m| {
            let tokens = mask_to_tokens(m, clip.height, clip.width)?;
            Ok(token_mask_tensor(&tokens, latent_dim))
        })
        .collect()
}

/// Build one clip's training loss on the tape. Returns the loss node.
fn clip_loss(
    tape: &mut GradTape,
    model: &GeneratorModel,
    inputs: &TrainInputs,
    clip: &SyntheticClip,
    sigma: f64,
    rng: &mut SeededRng,
) -> Result<NdTensor> {
    let latents = encode_clip(clip, inputs.encoder)?;
    let masks = clip_token_masks(clip, model.dims().latent_dim)?;
    let cond = clip_conditioning(clip, inputs.embedder)?;

    let mut noisy = Vec::with_capacity(latents.len());
    for z0 in &latents {
        let eps = rng.gaussian_tensor(z0.shape(), 1.0)?;
        noisy.push(forward_diffuse(z0, sigma, &eps)?);
    }
    let preds = model.forward(tape, &noisy, sigma, &cond)?;

    let mut total: Option<NdTensor> = None;
    for ((z0, pred), mask) in latents.iter().zip(&preds).zip(&masks) {
        let term = masked_reconstruction_loss(tape, z0, pred, mask)?;
        total = Some(match total {
            Some(acc) => tape.add(&acc, &term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| SanmError::Shape("clip has no frames".into()))?;
    tape.scale(&total, 1.0 / latents.len() as f64)
}

/// RNG stream for one clip of one epoch. Keyed by the clip's dataset
/// position, not its visit order, so shuffling does not change the draws.
fn clip_stream(seed: u64, epoch: usize, clip_idx: usize) -> SeededRng {
    SeededRng::new(seed).fork2(0x7501 + epoch as u64, clip_idx as u64)
}

fn draw_sigma(rng: &mut SeededRng, params: &TrainParams) -> f64 {
    rng.uniform(params.sigma_min.ln(), params.sigma_max.ln()).exp()
}

/// One optimization pass over the dataset. Returns the mean clip loss
/// (measured before each update, as reported by standard training loops).
pub fn train_epoch(
    model: &mut GeneratorModel,
    opt: &mut ModelOptimizer,
    inputs: &TrainInputs,
    params: &TrainParams,
    seed: u64,
    epoch: usize,
) -> Result<f64> {
    params.validate()?;
    if inputs.clips.is_empty() {
        return Err(SanmError::Config("training needs at least one clip".into()));
    }
    let mut order: Vec<usize> = (0..inputs.clips.len()).collect();
    SeededRng::new(seed)
        .fork2(0x0bde4, epoch as u64)
        .shuffle(&mut order);

    let mut total = 0.0;
    for &idx in &order {
        let clip = &inputs.clips[idx];
        let mut rng = clip_stream(seed, epoch, idx);
        let sigma = draw_sigma(&mut rng, params);

        let mut tape = GradTape::new();
        let loss = clip_loss(&mut tape, model, inputs, clip, sigma, &mut rng)?;
        total += loss.scalar_value()?;

        let grads = tape.backprop(&loss)?;
        let named = model.params();
        let grad_map = collect_named_grads(&mut tape, &grads, &named);
        drop(grads);
        drop(tape);
        let mut params_mut = model.params_mut();
        opt.step(&mut params_mut, &grad_map)?;
    }
    Ok(total / inputs.clips.len() as f64)
}

/// The dataset loss under the exact draws of `(seed, epoch)`, without
/// touching the model. `train_epoch` with `lr = 0` returns this value.
pub fn epoch_loss(
    model: &GeneratorModel,
    inputs: &TrainInputs,
    params: &TrainParams,
    seed: u64,
    epoch: usize,
) -> Result<f64> {
    params.validate()?;
    if inputs.clips.is_empty() {
        return Err(SanmError::Config("training needs at least one clip".into()));
    }
    let mut total = 0.0;
    for (idx, clip) in inputs.clips.iter().enumerate() {
        let mut rng = clip_stream(seed, epoch, idx);
        let sigma = draw_sigma(&mut rng, params);
        let mut tape = GradTape::new();
        let loss = clip_loss(&mut tape, model, inputs, clip, sigma, &mut rng)?;
        total += loss.scalar_value()?;
    }
    Ok(total / inputs.clips.len() as f64)
}

/// Full training run: `epochs` passes with a fresh optimizer. Returns the
/// per-epoch mean losses.
pub fn train(
    model: &mut GeneratorModel,
    inputs: &TrainInputs,
    params: &TrainParams,
    seed: u64,
) -> Result<Vec<f64>> {
    params.validate()?;
    let mut opt = ModelOptimizer::new(params.lr);
    let mut losses = Vec::with_capacity(params.epochs);
    for epoch in 0..params.epochs {
        losses.push(train_epoch(model, &mut opt, inputs, params, seed, epoch)?);
    }
    Ok(losses)
}
