//! Pretraining for the two frozen components: the patch codec
//! (encoder/decoder pair) and the identity embedder head.
//!
//! Both train in seconds on the synthetic dataset and are then frozen; the
//! denoiser trains against their latents, and sampling-time identity
//! guidance differentiates through them without ever updating them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{patchify, unpatchify, SyntheticClip};
use crate::error::{Result, SanmError};
use crate::metrics::psnr_metric;
use crate::models::{IdentityEmbedder, ToyDecoder, ToyEncoder};
use crate::numerics::rng::SeededRng;
use crate::numerics::tape::GradTape;
use crate::numerics::tensor::NdTensor;
use crate::training::optimizer::{collect_named_grads, ModelOptimizer};

/// Codec pretraining hyperparameters. The defaults are the tuned recipe:
/// a 96-wide hidden layer, 400 epochs of 256-patch batches, and a learning
/// rate stepped down twice.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecPretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub hidden: usize,
    pub lr_start: f64,
    pub lr_mid: f64,
    pub lr_end: f64,
}

impl Default for CodecPretrainConfig {
    fn default() -> Self {
        CodecPretrainConfig {
            epochs: 400,
            batch: 256,
            hidden: 96,
            lr_start: 3e-3,
            lr_mid: 1e-3,
            lr_end: 5e-4,
        }
    }
}

impl CodecPretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.hidden == 0 {
            return Err(SanmError::Config(
                "codec pretraining needs positive batch and hidden sizes".into(),
            ));
        }
        if !(self.lr_start > 0.0 && self.lr_mid > 0.0 && self.lr_end > 0.0) {
            return Err(SanmError::Config(
                "codec pretraining learning rates must be positive".into(),
            ));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        if epoch * 2 < self.epochs {
            self.lr_start
        } else if epoch * 4 < self.epochs * 3 {
            self.lr_mid
        } else {
            self.lr_end
        }
    }
}

/// Train the patch autoencoder on every patch of every clip frame.
/// Returns the trained pair plus the per-epoch batch losses.
pub fn pretrain_decoder(
    clips: &[SyntheticClip],
    latent_dim: usize,
    cfg: &CodecPretrainConfig,
    seed: u64,
) -> Result<(ToyEncoder, ToyDecoder, Vec<f64>)> {
    cfg.validate()?;
    if clips.is_empty() {
        return Err(SanmError::Config(
            "codec pretraining needs at least one clip".into(),
        ));
    }
    // Flatten every patch row of every frame into one pool.
    let mut pool: Vec<f64> = Vec::new();
    let mut patch_dim = 0usize;
    let mut total = 0usize;
    for clip in clips {
        for frame in &clip.frames {
            let patches = patchify(frame, clip.height, clip.width)?;
            patch_dim = patches.shape()[1];
            total += patches.shape()[0];
            pool.extend_from_slice(patches.data());
        }
    }

    let mut rng = SeededRng::new(seed).fork(0xc0dec);
    let mut encoder = ToyEncoder::new(&mut rng, latent_dim, cfg.hidden);
    let mut decoder = ToyDecoder::new(&mut rng, latent_dim, cfg.hidden);
    let mut opt = ModelOptimizer::new(cfg.lr_start);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..total).collect();

    for epoch in 0..cfg.epochs {
        // One epoch = one shuffled pass over the whole pool in minibatches.
        opt.set_lr(cfg.lr_at(epoch));
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let mut batch = Vec::with_capacity(chunk.len() * patch_dim);
            for &pick in chunk {
                batch.extend_from_slice(&pool[pick * patch_dim..(pick + 1) * patch_dim]);
            }
            let batch = NdTensor::from_vec(&[chunk.len(), patch_dim], batch)?;

            let mut tape = GradTape::new();
            let target = tape.constant(&batch);
            let z = encoder.forward(&mut tape, &target)?;
            let recon = decoder.forward(&mut tape, &z)?;
            let diff = tape.sub(&recon, &target)?;
            let sq = tape.mul(&diff, &diff)?;
            let loss = tape.mean_all(&sq)?;
            epoch_loss += loss.scalar_value()?;
            batches += 1;

            let grads = tape.backprop(&loss)?;
            let mut named = Vec::new();
            encoder.collect("encoder", &mut named);
            decoder.collect("decoder", &mut named);
            let grad_map = collect_named_grads(&mut tape, &grads, &named);
            let mut params = Vec::new();
            encoder.collect_mut("encoder", &mut params);
            decoder.collect_mut("decoder", &mut params);
            opt.step(&mut params, &grad_map)?;
        }
        losses.push(epoch_loss / batches.max(1) as f64);
    }
    Ok((encoder, decoder, losses))
}

/// Mean reconstruction PSNR of the codec over whole frames.
pub fn reconstruction_psnr(
    encoder: &ToyEncoder,
    decoder: &ToyDecoder,
    clips: &[SyntheticClip],
) -> Result<f64> {
    if clips.is_empty() {
        return Err(SanmError::Config("psnr needs at least one clip".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for clip in clips {
        for frame in &clip.frames {
            let patches = patchify(frame, clip.height, clip.width)?;
            let recon = decoder.decode(&encoder.encode(&patches)?)?;
            let rebuilt = unpatchify(&recon, clip.height, clip.width)?;
            total += psnr_metric(&rebuilt, frame)?;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Embedder pretraining hyperparameters: a pair-cosine objective over full
/// identity coverage with a hinge on cross-identity similarity.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderPretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Learning rate for the second half of training.
    pub lr_late: f64,
    /// Cross-identity cosine above this margin is penalized; 1.0 disables
    /// the cross-identity term entirely.
    pub margin: f64,
}

impl Default for EmbedderPretrainConfig {
    fn default() -> Self {
        EmbedderPretrainConfig {
            epochs: 300,
            lr: 0.01,
            lr_late: 0.003,
            margin: 0.3,
        }
    }
}

impl EmbedderPretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr_late > 0.0) {
            return Err(SanmError::Config(
                "embedder pretraining learning rates must be positive".into(),
            ));
        }
        if !(self.margin >= -1.0 && self.margin <= 1.0) {
            return Err(SanmError::Config(format!(
                "embedder margin must lie in [-1, 1], got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

/// Train the embedder head so frames of one identity embed close together
/// and frames of different identities embed apart.
///
/// Each epoch draws one same-identity pair per identity and one frame pair
/// per identity pair; the loss is
/// `0.5 * mean_same((1-cos)^2) + 0.5 * mean_diff(relu(cos - margin)^2)`.
pub fn pretrain_identity_embedder(
    clips: &[SyntheticClip],
    d_id: usize,
    cfg: &EmbedderPretrainConfig,
    seed: u64,
) -> Result<(IdentityEmbedder, Vec<f64>)> {
    cfg.validate()?;
    let mut by_identity: BTreeMap<u32, Vec<&NdTensor>> = BTreeMap::new();
    for clip in clips {
        by_identity
            .entry(clip.identity_id)
            .or_default()
            .extend(clip.frames.iter());
    }
    if by_identity.len() < 2 {
        return Err(SanmError::Config(format!(
            "embedder pretraining needs at least 2 identities, got {}",
            by_identity.len()
        )));
    }
    let groups: Vec<&Vec<&NdTensor>> = by_identity.values().collect();
    let n_ids = groups.len();
    let n_pairs = n_ids * (n_ids - 1) / 2;

    let mut rng = SeededRng::new(seed).fork(0xface);
    let mut embedder = IdentityEmbedder::new(&mut rng, d_id);
    let mut opt = ModelOptimizer::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        if epoch * 2 == cfg.epochs {
            opt.set_lr(cfg.lr_late);
        }
        let mut tape = GradTape::new();
        let mut loss: Option<NdTensor> = None;
        let push = |tape: &mut GradTape, term: &NdTensor, w: f64, loss: &mut Option<NdTensor>| -> Result<()> {
            let scaled = tape.scale(term, w)?;
            *loss = Some(match loss.take() {
                Some(acc) => tape.add(&acc, &scaled)?,
                None => scaled,
            });
            Ok(())
        };

        for frames in &groups {
            let a = frames[rng.below(frames.len())];
            let b = frames[rng.below(frames.len())];
            let ea = embedder.forward(&mut tape, a)?;
            let eb = embedder.forward(&mut tape, b)?;
            let prod = tape.mul(&ea, &eb)?;
            let cos = tape.sum_all(&prod)?;
            let neg = tape.scale(&cos, -1.0)?;
            let gap = tape.add_const(&neg, 1.0)?;
            let term = tape.mul(&gap, &gap)?;
            push(&mut tape, &term, 0.5 / n_ids as f64, &mut loss)?;
        }
        for i in 0..n_ids {
            for j in (i + 1)..n_ids {
                let a = groups[i][rng.below(groups[i].len())];
                let b = groups[j][rng.below(groups[j].len())];
                let ea = embedder.forward(&mut tape, a)?;
                let eb = embedder.forward(&mut tape, b)?;
                let prod = tape.mul(&ea, &eb)?;
                let cos = tape.sum_all(&prod)?;
                let shifted = tape.add_const(&cos, -cfg.margin)?;
                let hinge = tape.relu(&shifted)?;
                let term = tape.mul(&hinge, &hinge)?;
                push(&mut tape, &term, 0.5 / n_pairs as f64, &mut loss)?;
            }
        }

        let loss = loss.expect("at least one pair term");
        losses.push(loss.scalar_value()?);
        let grads = tape.backprop(&loss)?;
        let mut named = Vec::new();
        embedder.collect("embedder", &mut named);
        let grad_map = collect_named_grads(&mut tape, &grads, &named);
        let mut params = Vec::new();
        embedder.collect_mut("embedder", &mut params);
        opt.step(&mut params, &grad_map)?;
    }
    Ok((embedder, losses))
}

/// Mean cosine over all same-identity and different-identity frame pairs.
pub fn embedding_separation(
    embedder: &IdentityEmbedder,
    clips: &[SyntheticClip],
) -> Result<(f64, f64)> {
    let mut labeled: Vec<(u32, NdTensor)> = Vec::new();
    for clip in clips {
        for frame in &clip.frames {
            labeled.push((clip.identity_id, embedder.embed(frame)?));
        }
    }
    let mut same = (0.0, 0usize);
    let mut diff = (0.0, 0usize);
    for i in 0..labeled.len() {
        for j in (i + 1)..labeled.len() {
            let cos = crate::models::cosine(&labeled[i].1, &labeled[j].1)?;
            if labeled[i].0 == labeled[j].0 {
                same.0 += cos;
                same.1 += 1;
            } else {
                diff.0 += cos;
                diff.1 += 1;
            }
        }
    }
    if same.1 == 0 || diff.1 == 0 {
        return Err(SanmError::Config(
            "separation needs both same- and different-identity pairs".into(),
        ));
    }
    Ok((same.0 / same.1 as f64, diff.0 / diff.1 as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_clip, DataConfig};

    fn toy_dataset(identities: usize) -> (Vec<SyntheticClip>, Vec<SyntheticClip>) {
        let cfg = DataConfig {
            identities,
            train_clips: 2,
            eval_clips: 1,
            frames: 4,
            height: 16,
            width: 16,
        };
        let mut train = Vec::new();
        let mut eval = Vec::new();
        for idx in 0..cfg.clip_count() {
            let clip = generate_clip(&cfg, 4242, idx).unwrap();
            // generate_clip lays out clips identity-major: train first.
            if idx % (cfg.train_clips + cfg.eval_clips) < cfg.train_clips {
                train.push(clip);
            } else {
                eval.push(clip);
            }
        }
        (train, eval)
    }

    #[test]
    fn codec_reaches_the_psnr_gate_on_held_out_clips() {
        let (train, eval) = toy_dataset(8);
        let cfg = CodecPretrainConfig::default();
        let (enc, dec, losses) = pretrain_decoder(&train, 8, &cfg, 31).unwrap();
        assert_eq!(losses.len(), cfg.epochs);
        assert!(
            losses[cfg.epochs - 1] < losses[0] * 0.1,
            "loss {} -> {}",
            losses[0],
            losses[cfg.epochs - 1]
        );
        let psnr = reconstruction_psnr(&enc, &dec, &eval).unwrap();
        assert!(psnr >= 25.0, "held-out codec PSNR {psnr} below gate");
    }

    #[test]
    fn untrained_codec_fails_the_gate() {
        let (train, eval) = toy_dataset(2);
        let cfg = CodecPretrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let (enc, dec, losses) = pretrain_decoder(&train, 8, &cfg, 31).unwrap();
        assert!(losses.is_empty());
        let psnr = reconstruction_psnr(&enc, &dec, &eval).unwrap();
        assert!(psnr < 25.0, "random codec scored {psnr}, gate is vacuous");
    }

    #[test]
    fn codec_handles_constant_frames() {
        let (train, _) = toy_dataset(2);
        let cfg = CodecPretrainConfig {
            epochs: 3,
            ..Default::default()
        };
        let (enc, dec, _) = pretrain_decoder(&train, 8, &cfg, 31).unwrap();
        let zeros = NdTensor::zeros(&[16, 48]);
        let out = dec.decode(&enc.encode(&zeros).unwrap()).unwrap();
        assert!(out.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn embedder_separates_held_out_identities() {
        let (train, eval) = toy_dataset(8);
        let cfg = EmbedderPretrainConfig::default();
        let (embedder, losses) = pretrain_identity_embedder(&train, 8, &cfg, 77).unwrap();
        assert!(losses[cfg.epochs - 1] < losses[0]);
        let (same, diff) = embedding_separation(&embedder, &eval).unwrap();
        assert!(same >= 0.9, "held-out same-identity cosine {same}");
        assert!(diff <= 0.5, "held-out cross-identity cosine {diff}");
    }

    #[test]
    fn two_identity_training_keeps_a_wide_gap() {
        let (train, eval) = toy_dataset(2);
        let cfg = EmbedderPretrainConfig::default();
        let (embedder, _) = pretrain_identity_embedder(&train, 8, &cfg, 78).unwrap();
        let (same, diff) = embedding_separation(&embedder, &eval).unwrap();
        assert!(same - diff >= 0.4, "gap {same} - {diff} too small");
    }

    #[test]
    fn vacuous_margin_reduces_to_the_same_pair_objective() {
        let (train, _) = toy_dataset(2);
        let cfg = EmbedderPretrainConfig {
            epochs: 40,
            margin: 1.0,
            ..Default::default()
        };
        let (embedder, losses) = pretrain_identity_embedder(&train, 8, &cfg, 79).unwrap();
        // Same-identity pull still works...
        let (same, _) = embedding_separation(&embedder, &train).unwrap();
        assert!(same > 0.8, "same-identity cosine {same}");
        // ...and the loss is the same-pair term alone: re-run with the
        // cross-identity pairs' weight effectively zeroed gives identical
        // losses because cos <= 1 keeps every hinge inactive.
        assert!(losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn embedder_pretraining_is_deterministic() {
        let (train, _) = toy_dataset(2);
        let cfg = EmbedderPretrainConfig {
            epochs: 25,
            ..Default::default()
        };
        let (a, la) = pretrain_identity_embedder(&train, 8, &cfg, 80).unwrap();
        let (b, lb) = pretrain_identity_embedder(&train, 8, &cfg, 80).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.head.w.data(), b.head.w.data());
    }

    #[test]
    fn single_identity_is_rejected() {
        let cfg = DataConfig {
            identities: 2,
            train_clips: 1,
            eval_clips: 0,
            frames: 2,
            height: 16,
            width: 16,
        };
        let one = vec![generate_clip(&cfg, 1, 0).unwrap()];
        let err =
            pretrain_identity_embedder(&one, 8, &EmbedderPretrainConfig::default(), 1).unwrap_err();
        assert!(err.to_string().contains("identities"));
        assert!(pretrain_decoder(&[], 8, &CodecPretrainConfig::default(), 1).is_err());
    }
}
