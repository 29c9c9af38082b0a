//! Forward diffusion and the face-weighted reconstruction loss.
//!
//! Training pairs a clean latent clip with a noised copy `x0 + sigma*eps`
//! and asks the denoiser to recover the clean latents. The squared residual
//! is weighted by `(1 + M)` before squaring, where `M` is the binary face
//! mask at latent resolution: masked positions therefore contribute
//! `(2r)^2 = 4r^2`, i.e. exactly four times the gradient signal of
//! unmasked ones.

use crate::error::{Result, SanmError};
use crate::numerics::tape::GradTape;
use crate::numerics::tensor::NdTensor;

/// Noise a clean sample to level `sigma`: `x0 + sigma * eps`.
pub fn forward_diffuse(x0: &NdTensor, sigma: f64, eps: &NdTensor) -> Result<NdTensor> {
    if x0.shape() != eps.shape() {
        return Err(SanmError::Shape(format!(
            "diffusion operands have different shapes {:?} vs {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    if !(sigma >= 0.0) {
        return Err(SanmError::Config(format!(
            "noise level must be non-negative, got {sigma}"
        )));
    }
    x0.add(&eps.scale(sigma))
}

/// Mask-weighted reconstruction loss on the tape:
/// `mean(((target - pred) * (1 + mask))^2)`.
///
/// `mask` must already be expanded to the prediction's shape (see
/// `data::token_mask_tensor`) with entries in {0, 1}; it enters the graph as
/// a constant, so gradients flow only through `pred` (and `target` if it is
/// a tracked tensor).
pub fn masked_reconstruction_loss(
    tape: &mut GradTape,
    target: &NdTensor,
    pred: &NdTensor,
    mask: &NdTensor,
) -> Result<NdTensor> {
    if target.shape() != pred.shape() || target.shape() != mask.shape() {
        return Err(SanmError::Shape(format!(
            "loss operands disagree: target {:?}, pred {:?}, mask {:?}",
            target.shape(),
            pred.shape(),
            mask.shape()
        )));
    }
    let diff = tape.sub(target, pred)?;
    let mask_const = tape.constant(mask);
    let weight = tape.add_const(&mask_const, 1.0)?;
    let weighted = tape.mul(&diff, &weight)?;
    let sq = tape.mul(&weighted, &weighted)?;
    tape.mean_all(&sq)
}
