//! Sampling-time identity objective: scores predicted latent frames by how
//! well their decoded pixels match a target identity embedding.
//!
//! The loss is `mean over frames of (1 - cos(embed(decode(frame)), target))`.
//! The sampling-time optimizer applies updates only to the latents; decoder
//! and embedder weights are read but never stepped, so the networks stay
//! frozen during sampling.

use crate::error::{Result, SanmError};
use crate::models::decoder::ToyDecoder;
use crate::models::embedder::IdentityEmbedder;
use crate::numerics::tape::GradTape;
use crate::numerics::tensor::NdTensor;
use crate::sampler::FaceObjective;

/// Identity-similarity objective over decoded latent frames.
pub struct IdentityObjective<'a> {
    pub decoder: &'a ToyDecoder,
    pub embedder: &'a IdentityEmbedder,
    /// Unit-norm target embedding `[1, d_id]`.
    pub target: NdTensor,
}

impl<'a> IdentityObjective<'a> {
    pub fn new(
        decoder: &'a ToyDecoder,
        embedder: &'a IdentityEmbedder,
        target: NdTensor,
    ) -> Result<Self> {
        if target.shape() != [1, embedder.d_id()] {
            return Err(SanmError::Shape(format!(
                "identity target must be [1, {}], got {:?}",
                embedder.d_id(),
                target.shape()
            )));
        }
        Ok(IdentityObjective {
            decoder,
            embedder,
            target: target.detach(),
        })
    }
}

impl FaceObjective for IdentityObjective<'_> {
    fn loss(&self, tape: &mut GradTape, frames: &[NdTensor]) -> Result<NdTensor> {
        if frames.is_empty() {
            return Err(SanmError::Shape("identity loss needs frames".into()));
        }
        let mut acc: Option<NdTensor> = None;
        for frame in frames {
            let patches = self.decoder.forward(tape, frame)?;
            let n_pixels = patches.numel() / 3;
            let rgb = tape.reshape(&patches, &[n_pixels, 3])?;
            let emb = self.embedder.forward(tape, &rgb)?;
            let prod = tape.mul(&emb, &self.target)?;
            let cos = tape.sum_all(&prod)?;
            let neg = tape.scale(&cos, -1.0)?;
            let dist = tape.add_const(&neg, 1.0)?;
            acc = Some(match acc {
                None => dist,
                Some(a) => tape.add(&a, &dist)?,
            });
        }
        tape.scale(&acc.unwrap(), 1.0 / frames.len() as f64)
    }
}
