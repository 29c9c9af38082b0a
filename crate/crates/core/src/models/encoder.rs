//! Face-embedding refiner: cross-attention blocks that let the identity
//! embedding absorb global context from the reference-image tokens before
//! it is injected into the adapter blocks.

use crate::error::Result;
use crate::models::attention::{AttentionBlock, FeedForward};
use crate::numerics::rng::SeededRng;
use crate::numerics::tape::GradTape;
use crate::numerics::tensor::NdTensor;

/// One refinement stage: cross-attention (face queries over image tokens)
/// followed by a feed-forward layer, both residual.
#[derive(Clone, Debug)]
pub struct FaceEncoderBlock {
    pub attn: AttentionBlock,
    pub ff: FeedForward,
}

/// Stack of refinement stages. Output shape equals the input face-embedding
/// shape, so the encoder can be deepened without touching its consumers.
#[derive(Clone, Debug)]
pub struct FaceEncoder {
    pub blocks: Vec<FaceEncoderBlock>,
}

impl FaceEncoder {
    pub fn new(
        rng: &mut SeededRng,
        d_face: usize,
        d_img: usize,
        model_dim: usize,
        heads: usize,
        block_count: usize,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(block_count);
        for _ in 0..block_count {
            blocks.push(FaceEncoderBlock {
                attn: AttentionBlock::new(rng, d_face, d_img, model_dim, heads)?,
                ff: FeedForward::new(rng, d_face, model_dim),
            });
        }
        Ok(FaceEncoder { blocks })
    }

    /// `emb_face [n, d_face]`, `emb_img [m, d_img]` -> `[n, d_face]`.
    pub fn forward(
        &self,
        tape: &mut GradTape,
        emb_face: &NdTensor,
        emb_img: &NdTensor,
    ) -> Result<NdTensor> {
        let mut z = emb_face.clone();
        for block in &self.blocks {
            z = block.attn.forward(tape, &z, emb_img)?;
            z = block.ff.forward(tape, &z)?;
        }
        Ok(z)
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, NdTensor)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.attn.collect(&format!("{prefix}.blocks.{i}.attn"), out);
            b.ff.collect(&format!("{prefix}.blocks.{i}.ff"), out);
        }
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut NdTensor)>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.attn.collect_mut(&format!("{prefix}.blocks.{i}.attn"), out);
            b.ff.collect_mut(&format!("{prefix}.blocks.{i}.ff"), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_blocks_is_the_identity() {
        let mut rng = SeededRng::new(31);
        let enc = FaceEncoder::new(&mut rng, 4, 6, 8, 2, 0).unwrap();
        let face = rng.gaussian_tensor(&[1, 4], 1.0).unwrap();
        let img = rng.gaussian_tensor(&[5, 6], 1.0).unwrap();
        let mut tape = GradTape::new();
        let out = enc.forward(&mut tape, &face, &img).unwrap();
        assert_eq!(out.data(), face.data());
    }

    #[test]
    fn zero_weight_blocks_pass_through_via_residuals() {
        let mut rng = SeededRng::new(32);
        let mut enc = FaceEncoder::new(&mut rng, 4, 6, 8, 2, 2).unwrap();
        for b in &mut enc.blocks {
            b.attn.w_o = NdTensor::zeros(&[8, 4]);
            // Feed-forward second layer is zero-initialized already.
        }
        let face = rng.gaussian_tensor(&[1, 4], 1.0).unwrap();
        let img = rng.gaussian_tensor(&[5, 6], 1.0).unwrap();
        let mut tape = GradTape::new();
        let out = enc.forward(&mut tape, &face, &img).unwrap();
        assert_eq!(out.data(), face.data());
    }

    #[test]
    fn two_blocks_match_manual_composition() {
        let mut rng = SeededRng::new(33);
        let mut enc = FaceEncoder::new(&mut rng, 4, 6, 8, 2, 2).unwrap();
        for b in &mut enc.blocks {
            b.attn.w_o = rng.gaussian_tensor(&[8, 4], 0.4).unwrap();
            b.ff.lin2.w = rng.gaussian_tensor(&[8, 4], 0.4).unwrap();
        }
        let face = rng.gaussian_tensor(&[2, 4], 1.0).unwrap();
        let img = rng.gaussian_tensor(&[5, 6], 1.0).unwrap();

        let mut tape = GradTape::new();
        let got = enc.forward(&mut tape, &face, &img).unwrap();

        let mut t2 = GradTape::new();
        let mut z = face.clone();
        for b in &enc.blocks {
            z = b.attn.forward(&mut t2, &z, &img).unwrap();
            z = b.ff.forward(&mut t2, &z).unwrap();
        }
        for (a, b) in got.data().iter().zip(z.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_is_preserved_for_varied_configs() {
        let mut rng = SeededRng::new(34);
        for &(n, d_face, d_img) in &[(1usize, 4usize, 6usize), (3, 8, 8), (2, 6, 4)] {
            let enc = FaceEncoder::new(&mut rng, d_face, d_img, 8, 2, 2).unwrap();
            let face = rng.gaussian_tensor(&[n, d_face], 1.0).unwrap();
            let img = rng.gaussian_tensor(&[5, d_img], 1.0).unwrap();
            let mut tape = GradTape::new();
            let out = enc.forward(&mut tape, &face, &img).unwrap();
            assert_eq!(out.shape(), face.shape());
        }
    }
}
