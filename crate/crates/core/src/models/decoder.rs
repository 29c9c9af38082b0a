//! Patch-local pixel autoencoder.
//!
//! Frames are handled as flattened 4x4 pixel patches (48 values: 16 pixels
//! times RGB), so a frame is a `[patches, 48]` matrix and its latent a
//! `[patches, latent_dim]` matrix. Encoder and decoder are small two-layer
//! maps applied independently per patch; the decoder ends in a squashing
//! nonlinearity so outputs always land in the valid pixel range `(0, 1)`.

use crate::error::{Result, SanmError};
use crate::models::attention::Linear;
use crate::numerics::rng::SeededRng;
use crate::numerics::tape::GradTape;
use crate::numerics::tensor::NdTensor;

/// Flattened pixel values per patch: 4x4 pixels times 3 channels.
pub const PATCH_DIM: usize = 48;

/// Patch encoder `[n, PATCH_DIM] -> [n, latent_dim]`.
#[derive(Clone, Debug)]
pub struct ToyEncoder {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl ToyEncoder {
    pub fn new(rng: &mut SeededRng, latent_dim: usize, hidden: usize) -> Self {
        ToyEncoder {
            lin1: Linear::new(rng, PATCH_DIM, hidden, true),
            lin2: Linear::new(rng, hidden, latent_dim, true),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.lin2.d_out()
    }

    pub fn forward(&self, tape: &mut GradTape, patches: &NdTensor) -> Result<NdTensor> {
        check_cols(patches, PATCH_DIM, "encoder input")?;
        let h = self.lin1.forward(tape, patches)?;
        let h = tape.tanh(&h)?;
        self.lin2.forward(tape, &h)
    }

    /// Plain (non-training) encode.
    pub fn encode(&self, patches: &NdTensor) -> Result<NdTensor> {
        let mut tape = GradTape::new();
        Ok(self.forward(&mut tape, patches)?.detach())
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, NdTensor)>) {
        self.lin1.collect(&format!("{prefix}.lin1"), out);
        self.lin2.collect(&format!("{prefix}.lin2"), out);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut NdTensor)>) {
        self.lin1.collect_mut(&format!("{prefix}.lin1"), out);
        self.lin2.collect_mut(&format!("{prefix}.lin2"), out);
    }
}

/// Patch decoder `[n, latent_dim] -> [n, PATCH_DIM]`, output in `(0, 1)`.
#[derive(Clone, Debug)]
pub struct ToyDecoder {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl ToyDecoder {
    pub fn new(rng: &mut SeededRng, latent_dim: usize, hidden: usize) -> Self {
        ToyDecoder {
            lin1: Linear::new(rng, latent_dim, hidden, true),
            lin2: Linear::new(rng, hidden, PATCH_DIM, true),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.lin1.d_in()
    }

    pub fn forward(&self, tape: &mut GradTape, latents: &NdTensor) -> Result<NdTensor> {
        check_cols(latents, self.latent_dim(), "decoder input")?;
        let h = self.lin1.forward(tape, latents)?;
        let h = tape.tanh(&h)?;
        let y = self.lin2.forward(tape, &h)?;
        let squashed = tape.tanh(&y)?;
        let half = tape.scale(&squashed, 0.5)?;
        tape.add_const(&half, 0.5)
    }

    /// Plain (non-training) decode.
    pub fn decode(&self, latents: &NdTensor) -> Result<NdTensor> {
        let mut tape = GradTape::new();
        Ok(self.forward(&mut tape, latents)?.detach())
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, NdTensor)>) {
        self.lin1.collect(&format!("{prefix}.lin1"), out);
        self.lin2.collect(&format!("{prefix}.lin2"), out);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut NdTensor)>) {
        self.lin1.collect_mut(&format!("{prefix}.lin1"), out);
        self.lin2.collect_mut(&format!("{prefix}.lin2"), out);
    }
}

fn check_cols(t: &NdTensor, want: usize, what: &str) -> Result<()> {
    if t.shape().len() != 2 || t.shape()[1] != want {
        return Err(SanmError::Shape(format!(
            "{what} must be [n, {want}], got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decoder_output_stays_in_pixel_range() {
        let mut rng = SeededRng::new(51);
        let dec = ToyDecoder::new(&mut rng, 8, 96);
        let z = rng.gaussian_tensor(&[16, 8], 5.0).unwrap();
        let px = dec.decode(&z).unwrap();
        assert_eq!(px.shape(), &[16, PATCH_DIM]);
        assert!(px.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn encoder_and_decoder_shapes_roundtrip() {
        let mut rng = SeededRng::new(52);
        let enc = ToyEncoder::new(&mut rng, 8, 96);
        let dec = ToyDecoder::new(&mut rng, 8, 96);
        let patches = rng
            .gaussian_tensor(&[16, PATCH_DIM], 0.2)
            .unwrap()
            .map(|x| (x + 0.5).clamp(0.0, 1.0));
        let z = enc.encode(&patches).unwrap();
        assert_eq!(z.shape(), &[16, 8]);
        let back = dec.decode(&z).unwrap();
        assert_eq!(back.shape(), patches.shape());
    }

    #[test]
    fn wrong_column_counts_are_rejected() {
        let mut rng = SeededRng::new(53);
        let enc = ToyEncoder::new(&mut rng, 8, 96);
        let dec = ToyDecoder::new(&mut rng, 8, 96);
        assert!(enc.encode(&NdTensor::zeros(&[4, 47])).is_err());
        assert!(dec.decode(&NdTensor::zeros(&[4, 9])).is_err());
    }

    #[test]
    fn decode_is_differentiable_wrt_latent() {
        let mut rng = SeededRng::new(54);
        let dec = ToyDecoder::new(&mut rng, 8, 96);
        let z = rng.gaussian_tensor(&[4, 8], 1.0).unwrap();
        let mut tape = GradTape::new();
        let zp = tape.param(&z);
        let px = dec.forward(&mut tape, &zp).unwrap();
        let loss = tape.mean_all(&px).unwrap();
        let grads = tape.backprop(&loss).unwrap();
        let g = grads.get(&zp).expect("latent gradient");
        assert!(g.data().iter().any(|&v| v != 0.0));
    }
}
