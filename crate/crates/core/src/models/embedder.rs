//! Identity embedder: maps a pixel frame to a unit-norm identity vector.
//!
//! A fixed bank of soft color detectors — one per direction of the RGB cube
//! (26 nonzero sign patterns over the three channels) — turns each pixel
//! into a saturation profile; mean-pooling over pixels gives a
//! translation-invariant frame signature, and a small trainable head maps
//! that onto the identity sphere. Only the head trains: the detector bank
//! is frozen, which keeps the embedding geometry stable while the head
//! learns to spread identities apart.

use crate::error::{Result, SanmError};
use crate::models::attention::Linear;
use crate::numerics::rng::SeededRng;
use crate::numerics::tape::GradTape;
use crate::numerics::tensor::NdTensor;

/// Detector sharpness: slope of the tanh response.
const DETECTOR_GAIN: f64 = 12.0;
/// Detector bias: activation is centered at a projection of 0.3.
const DETECTOR_SHIFT: f64 = 0.3;
/// Norm guard for the final unit normalization.
const NORM_EPS: f64 = 1e-8;

/// Number of detector directions: all sign patterns over RGB except zero.
pub const DETECTOR_COUNT: usize = 26;

/// Build the `[3, DETECTOR_COUNT]` matrix of unit detector directions.
fn detector_directions() -> NdTensor {
    let mut cols: Vec<[f64; 3]> = Vec::with_capacity(DETECTOR_COUNT);
    for a in -1i32..=1 {
        for b in -1i32..=1 {
            for c in -1i32..=1 {
                if (a, b, c) == (0, 0, 0) {
                    continue;
                }
                let v = [a as f64, b as f64, c as f64];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                cols.push([v[0] / n, v[1] / n, v[2] / n]);
            }
        }
    }
    let mut data = vec![0.0; 3 * DETECTOR_COUNT];
    for (j, col) in cols.iter().enumerate() {
        for i in 0..3 {
            data[i * DETECTOR_COUNT + j] = col[i];
        }
    }
    NdTensor::from_vec(&[3, DETECTOR_COUNT], data).unwrap()
}

/// Frame-to-identity-vector embedder.
#[derive(Clone, Debug)]
pub struct IdentityEmbedder {
    /// Frozen `[3, DETECTOR_COUNT]` detector bank.
    pub directions: NdTensor,
    /// Trainable head `[DETECTOR_COUNT, d_id]` plus bias.
    pub head: Linear,
}

impl IdentityEmbedder {
    pub fn new(rng: &mut SeededRng, d_id: usize) -> Self {
        IdentityEmbedder {
            directions: detector_directions(),
            head: Linear::new(rng, DETECTOR_COUNT, d_id, true),
        }
    }

    pub fn d_id(&self) -> usize {
        self.head.d_out()
    }

    /// `pixels [n_pixels, 3]` in `[0, 1]` -> unit vector `[1, d_id]`.
    ///
    /// Pixel order does not matter (features are pooled), so callers may
    /// pass rows in raster or patch-major order interchangeably.
    pub fn forward(&self, tape: &mut GradTape, pixels: &NdTensor) -> Result<NdTensor> {
        if pixels.shape().len() != 2 || pixels.shape()[1] != 3 {
            return Err(SanmError::Shape(format!(
                "embedder expects [n, 3] pixel rows, got {:?}",
                pixels.shape()
            )));
        }
        let n_pixels = pixels.shape()[0];
        let dirs = tape.constant(&self.directions);
        let centered = tape.add_const(pixels, -0.5)?;
        let proj = tape.matmul(&centered, &dirs)?;
        let driven = tape.scale(&proj, DETECTOR_GAIN)?;
        let shifted = tape.add_const(&driven, -DETECTOR_GAIN * DETECTOR_SHIFT)?;
        let features = tape.tanh(&shifted)?;
        let pool_row = NdTensor::full(&[1, n_pixels], 1.0 / n_pixels as f64);
        let pool = tape.constant(&pool_row);
        let pooled = tape.matmul(&pool, &features)?;
        let raw = self.head.forward(tape, &pooled)?;
        tape.normalize(&raw, NORM_EPS)
    }

    /// Convenience for plain (non-training) use.
    pub fn embed(&self, pixels: &NdTensor) -> Result<NdTensor> {
        let mut tape = GradTape::new();
        Ok(self.forward(&mut tape, pixels)?.detach())
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, NdTensor)>) {
        self.head.collect(&format!("{prefix}.head"), out);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut NdTensor)>) {
        self.head.collect_mut(&format!("{prefix}.head"), out);
    }
}

/// Cosine similarity between two equal-shape vectors (plain tensors).
pub fn cosine(a: &NdTensor, b: &NdTensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(SanmError::Shape(format!(
            "cosine operands must match: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let dot: f64 = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).sum();
    let na = a.l2_norm().max(NORM_EPS);
    let nb = b.l2_norm().max(NORM_EPS);
    Ok(dot / (na * nb))
}
