//! Clip denoiser: a spatio-temporal network that maps noisy latent frames
//! plus a noise level to a prediction of the clean frames.
//!
//! Per frame, latent tokens are linearly embedded, tagged with noise-level
//! and pose features, and refined by a stack of identity-adapter blocks
//! that inject reference-image and face context. A single attention layer
//! over the frame axis then exchanges information across time, and a
//! linear head projects back to latent space. The network predicts the
//! clean sample directly; inputs are pre-scaled by `1/sqrt(sigma^2 + 1)`
//! so token magnitudes stay comparable across noise levels.

use crate::error::{Result, SanmError};
use crate::models::adapter::IdAdapterBlock;
use crate::models::attention::{AttentionBlock, Linear};
use crate::models::decoder::PATCH_DIM;
use crate::models::encoder::FaceEncoder;
use crate::models::ModelDims;
use crate::numerics::rng::SeededRng;
use crate::numerics::tape::GradTape;
use crate::numerics::tensor::NdTensor;
use crate::sampler::Denoiser;

/// Number of sinusoidal noise-level frequencies (features = 2x this).
const SIGMA_FREQS: usize = 8;

/// Sinusoidal features of `ln sigma` at geometrically spaced frequencies.
pub fn sigma_features(sigma: f64) -> NdTensor {
    let s = sigma.max(1e-8).ln();
    let mut v = Vec::with_capacity(2 * SIGMA_FREQS);
    for k in 0..SIGMA_FREQS {
        let w = 0.25 * (2.0f64).powi(k as i32);
        v.push((w * s).sin());
        v.push((w * s).cos());
    }
    NdTensor::from_vec(&[1, 2 * SIGMA_FREQS], v).unwrap()
}

/// Per-clip conditioning for the denoiser.
#[derive(Clone, Debug)]
pub struct DenoiserCond {
    /// Reference frame as flattened patches `[tokens, PATCH_DIM]`.
    pub ref_patches: NdTensor,
    /// Identity embedding of the reference face `[1, d_id]` (unit norm).
    pub face: NdTensor,
    /// Per-frame pose (glyph center in `[0, 1]^2`).
    pub pose: Vec<(f64, f64)>,
}

/// The frame-stack denoiser network.
#[derive(Clone, Debug)]
pub struct DenoiserModel {
    pub dims: ModelDims,
    pub patch_embed: Linear,
    pub sigma_embed: Linear,
    pub pose_embed: Linear,
    pub ref_proj: Linear,
    pub blocks: Vec<IdAdapterBlock>,
    pub temporal: AttentionBlock,
    pub out_proj: Linear,
}

impl DenoiserModel {
    pub fn new(rng: &mut SeededRng, dims: &ModelDims) -> Result<Self> {
        dims.validate()?;
        let m = dims.model_dim;
        let mut blocks = Vec::with_capacity(dims.adapter_blocks);
        for _ in 0..dims.adapter_blocks {
            blocks.push(IdAdapterBlock::new(
                rng,
                m,
                dims.heads,
                dims.d_id,
                dims.ff_hidden(),
                dims.align,
            )?);
        }
        Ok(DenoiserModel {
            dims: dims.clone(),
            patch_embed: Linear::new(rng, dims.latent_dim, m, true),
            sigma_embed: Linear::new(rng, 2 * SIGMA_FREQS, m, true),
            pose_embed: Linear::new(rng, 2, m, true),
            ref_proj: Linear::new(rng, PATCH_DIM, m, true),
            blocks,
            temporal: AttentionBlock::new(rng, m, m, m, dims.heads)?,
            out_proj: Linear::new(rng, m, dims.latent_dim, true),
        })
    }

    /// Forward pass with conditioning already embedded: `emb_img` are
    /// projected reference tokens `[tokens, model_dim]`, `emb_face` the
    /// refined face embedding `[n, d_id]`.
    pub fn forward_with(
        &self,
        tape: &mut GradTape,
        frames: &[NdTensor],
        sigma: f64,
        emb_img: &NdTensor,
        emb_face: &NdTensor,
        pose: &[(f64, f64)],
    ) -> Result<Vec<NdTensor>> {
        if frames.is_empty() {
            return Err(SanmError::Shape("denoiser needs at least one frame".into()));
        }
        if pose.len() != frames.len() {
            return Err(SanmError::Shape(format!(
                "pose entries ({}) must match frame count ({})",
                pose.len(),
                frames.len()
            )));
        }
        if !(sigma >= 0.0) {
            return Err(SanmError::Config(format!(
                "noise level must be nonnegative, got {sigma}"
            )));
        }
        let want = [self.dims.tokens, self.dims.latent_dim];
        for f in frames {
            if f.shape() != want {
                return Err(SanmError::Shape(format!(
                    "frame latents must be {:?}, got {:?}",
                    want,
                    f.shape()
                )));
            }
        }

        let c_in = 1.0 / (sigma * sigma + 1.0).sqrt();
        let sig_feat = tape.constant(&sigma_features(sigma));
        let sig_row = self.sigma_embed.forward(tape, &sig_feat)?;

        let mut feats = Vec::with_capacity(frames.len());
        for (f, &(px, py)) in frames.iter().zip(pose.iter()) {
            let scaled = tape.scale(f, c_in)?;
            let mut z = self.patch_embed.forward(tape, &scaled)?;
            z = tape.add_row(&z, &sig_row)?;
            let pose_feat = tape.constant(&NdTensor::from_vec(&[1, 2], vec![px, py])?);
            let pose_row = self.pose_embed.forward(tape, &pose_feat)?;
            z = tape.add_row(&z, &pose_row)?;
            for block in &self.blocks {
                z = block.forward(tape, &z, emb_img, emb_face)?;
            }
            feats.push(z);
        }

        if self.dims.use_temporal && frames.len() > 1 {
            feats = self.mix_frames(tape, &feats)?;
        }

        let mut out = Vec::with_capacity(feats.len());
        for z in &feats {
            out.push(self.out_proj.forward(tape, z)?);
        }
        Ok(out)
    }

    /// Attention over the frame axis, one token position at a time.
    fn mix_frames(&self, tape: &mut GradTape, feats: &[NdTensor]) -> Result<Vec<NdTensor>> {
        let tokens = self.dims.tokens;
        let n_frames = feats.len();
        // rows[f][p] = token p of frame f after temporal mixing.
        let mut rows: Vec<Vec<NdTensor>> = vec![Vec::with_capacity(tokens); n_frames];
        for p in 0..tokens {
            let picked: Vec<NdTensor> = feats
                .iter()
                .map(|z| tape.select_row(z, p))
                .collect::<Result<_>>()?;
            let refs: Vec<&NdTensor> = picked.iter().collect();
            let seq = tape.concat_rows(&refs)?;
            let mixed = self.temporal.forward_self(tape, &seq)?;
            for (f, row) in rows.iter_mut().enumerate() {
                row.push(tape.select_row(&mixed, f)?);
            }
        }
        rows.into_iter()
            .map(|r| {
                let refs: Vec<&NdTensor> = r.iter().collect();
                tape.concat_rows(&refs)
            })
            .collect()
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, NdTensor)>) {
        self.patch_embed.collect(&format!("{prefix}.patch_embed"), out);
        self.sigma_embed.collect(&format!("{prefix}.sigma_embed"), out);
        self.pose_embed.collect(&format!("{prefix}.pose_embed"), out);
        self.ref_proj.collect(&format!("{prefix}.ref_proj"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("{prefix}.blocks.{i}"), out);
        }
        self.temporal.collect(&format!("{prefix}.temporal"), out);
        self.out_proj.collect(&format!("{prefix}.out_proj"), out);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut NdTensor)>) {
        self.patch_embed
            .collect_mut(&format!("{prefix}.patch_embed"), out);
        self.sigma_embed
            .collect_mut(&format!("{prefix}.sigma_embed"), out);
        self.pose_embed
            .collect_mut(&format!("{prefix}.pose_embed"), out);
        self.ref_proj.collect_mut(&format!("{prefix}.ref_proj"), out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_mut(&format!("{prefix}.blocks.{i}"), out);
        }
        self.temporal.collect_mut(&format!("{prefix}.temporal"), out);
        self.out_proj.collect_mut(&format!("{prefix}.out_proj"), out);
    }
}

/// Denoiser plus its face-embedding refiner: everything that trains during
/// the denoising stage and runs at sampling time.
#[derive(Clone, Debug)]
pub struct GeneratorModel {
    pub denoiser: DenoiserModel,
    pub face_encoder: FaceEncoder,
}

impl GeneratorModel {
    pub fn new(rng: &mut SeededRng, dims: &ModelDims) -> Result<Self> {
        let denoiser = DenoiserModel::new(rng, dims)?;
        let face_encoder = FaceEncoder::new(
            rng,
            dims.d_id,
            dims.model_dim,
            dims.model_dim,
            dims.heads,
            dims.face_blocks,
        )?;
        Ok(GeneratorModel {
            denoiser,
            face_encoder,
        })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.denoiser.dims
    }

    pub fn forward(
        &self,
        tape: &mut GradTape,
        frames: &[NdTensor],
        sigma: f64,
        cond: &DenoiserCond,
    ) -> Result<Vec<NdTensor>> {
        let emb_img = self.denoiser.ref_proj.forward(tape, &cond.ref_patches)?;
        let face = self.face_encoder.forward(tape, &cond.face, &emb_img)?;
        self.denoiser
            .forward_with(tape, frames, sigma, &emb_img, &face, &cond.pose)
    }

    pub fn params(&self) -> Vec<(String, NdTensor)> {
        let mut out = Vec::new();
        self.denoiser.collect("denoiser", &mut out);
        self.face_encoder.collect("face_encoder", &mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut NdTensor)> {
        let mut out = Vec::new();
        self.denoiser.collect_mut("denoiser", &mut out);
        self.face_encoder.collect_mut("face_encoder", &mut out);
        out
    }
}

/// Adapter tying a trained generator and fixed conditioning to the
/// sampler's denoiser interface. Each call runs on a throwaway tape and
/// returns detached predictions.
pub struct ConditionedDenoiser<'a> {
    pub model: &'a GeneratorModel,
    pub cond: &'a DenoiserCond,
}

impl Denoiser for ConditionedDenoiser<'_> {
    fn denoise(&self, frames: &[NdTensor], sigma: f64) -> Result<Vec<NdTensor>> {
        let mut tape = GradTape::new();
        let out = self.model.forward(&mut tape, frames, sigma, self.cond)?;
        Ok(out.iter().map(|t| t.detach()).collect())
    }
}
