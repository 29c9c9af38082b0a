//! Identity adapter: the per-block mechanism that keeps the face branch
//! from drifting the latent distribution.
//!
//! Each block runs self-attention over the latent tokens, then two
//! cross-attention branches off the same post-self-attention stream — one
//! against reference-image embeddings, one against the refined face
//! embedding. The face branch is re-statistized to the image branch's
//! mean/std (so injecting identity cannot shift the feature distribution
//! the downstream layers were trained on), the branches are summed, and a
//! feed-forward layer finishes the block.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SanmError};
use crate::models::attention::{AttentionBlock, FeedForward};
use crate::numerics::rng::SeededRng;
use crate::numerics::tape::GradTape;
use crate::numerics::tensor::NdTensor;

/// Clamp for feature standard deviations during alignment.
pub const STATS_EPS: f64 = 1e-5;

/// How the face branch is merged into the image branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    /// Standardize the face branch, rescale to the image branch's stats,
    /// then add.
    Full,
    /// Add the raw face branch (no alignment) — ablation variant.
    Addition,
    /// Standardize the face branch to zero mean / unit std but skip the
    /// rescale to image stats — ablation variant.
    Norm,
}

impl Default for AlignMode {
    fn default() -> Self {
        AlignMode::Full
    }
}

/// Re-statistize `z_face` so its mean/std (taken jointly over all entries)
/// match those of `z_img`: `(z_face - mu_f) / sd_f * sd_i + mu_i`.
///
/// Plain-tensor version used by tests and invariants; the adapter uses the
/// tape-op equivalent so gradients flow through the statistics.
pub fn distribution_align(z_face: &NdTensor, z_img: &NdTensor) -> Result<NdTensor> {
    if z_face.shape() != z_img.shape() {
        return Err(SanmError::Shape(format!(
            "alignment operands must match: {:?} vs {:?}",
            z_face.shape(),
            z_img.shape()
        )));
    }
    let (mu_f, sd_f) = moments(z_face.data());
    let (mu_i, sd_i) = moments(z_img.data());
    let sd_f = sd_f.max(STATS_EPS);
    let sd_i = sd_i.max(STATS_EPS);
    Ok(z_face.map(|x| (x - mu_f) / sd_f * sd_i + mu_i))
}

fn moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.max(0.0).sqrt())
}

/// Tape-op alignment (differentiable through the statistics).
fn align_on_tape(
    tape: &mut GradTape,
    z_face: &NdTensor,
    z_img: &NdTensor,
    mode: AlignMode,
) -> Result<NdTensor> {
    if z_face.shape() != z_img.shape() {
        return Err(SanmError::Shape(format!(
            "alignment operands must match: {:?} vs {:?}",
            z_face.shape(),
            z_img.shape()
        )));
    }
    match mode {
        AlignMode::Addition => Ok(z_face.clone()),
        AlignMode::Norm => {
            let mu_f = tape.mean_all(z_face)?;
            let sd_f = tape.std_all(z_face, STATS_EPS)?;
            let centered = tape.sub(z_face, &mu_f)?;
            tape.div(&centered, &sd_f)
        }
        AlignMode::Full => {
            let mu_f = tape.mean_all(z_face)?;
            let sd_f = tape.std_all(z_face, STATS_EPS)?;
            let mu_i = tape.mean_all(z_img)?;
            let sd_i = tape.std_all(z_img, STATS_EPS)?;
            let centered = tape.sub(z_face, &mu_f)?;
            let standardized = tape.div(&centered, &sd_f)?;
            let rescaled = tape.mul(&standardized, &sd_i)?;
            tape.add(&rescaled, &mu_i)
        }
    }
}

/// One adapter block: self-attention, two cross-attention branches off the
/// same stream, distribution alignment, branch sum, feed-forward.
#[derive(Clone, Debug)]
pub struct IdAdapterBlock {
    pub self_attn: AttentionBlock,
    pub cross_attn_img: AttentionBlock,
    pub cross_attn_face: AttentionBlock,
    pub ff: FeedForward,
    pub align: AlignMode,
}

impl IdAdapterBlock {
    pub fn new(
        rng: &mut SeededRng,
        model_dim: usize,
        heads: usize,
        d_face: usize,
        ff_hidden: usize,
        align: AlignMode,
    ) -> Result<Self> {
        Ok(IdAdapterBlock {
            self_attn: AttentionBlock::new(rng, model_dim, model_dim, model_dim, heads)?,
            cross_attn_img: AttentionBlock::new(rng, model_dim, model_dim, model_dim, heads)?,
            cross_attn_face: AttentionBlock::new(rng, model_dim, d_face, model_dim, heads)?,
            ff: FeedForward::new(rng, model_dim, ff_hidden),
            align,
        })
    }

    /// `z [tokens, model_dim]`, `emb_img [n_ref, model_dim]`,
    /// `emb_face [n_face, d_face]` -> same shape as `z`.
    pub fn forward(
        &self,
        tape: &mut GradTape,
        z: &NdTensor,
        emb_img: &NdTensor,
        emb_face: &NdTensor,
    ) -> Result<NdTensor> {
        let z_s = self.self_attn.forward_self(tape, z)?;
        let z_img = self.cross_attn_img.forward(tape, &z_s, emb_img)?;
        let z_face = self.cross_attn_face.forward(tape, &z_s, emb_face)?;
        let aligned = align_on_tape(tape, &z_face, &z_img, self.align)?;
        let merged = tape.add(&aligned, &z_img)?;
        self.ff.forward(tape, &merged)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, NdTensor)>) {
        self.self_attn.collect(&format!("{prefix}.self_attn"), out);
        self.cross_attn_img
            .collect(&format!("{prefix}.cross_attn_img"), out);
        self.cross_attn_face
            .collect(&format!("{prefix}.cross_attn_face"), out);
        self.ff.collect(&format!("{prefix}.ff"), out);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut NdTensor)>) {
        self.self_attn
            .collect_mut(&format!("{prefix}.self_attn"), out);
        self.cross_attn_img
            .collect_mut(&format!("{prefix}.cross_attn_img"), out);
        self.cross_attn_face
            .collect_mut(&format!("{prefix}.cross_attn_face"), out);
        self.ff.collect_mut(&format!("{prefix}.ff"), out);
    }
}
