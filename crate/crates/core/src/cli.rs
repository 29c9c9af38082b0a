//! Command-line drivers: dataset generation, pretraining, denoiser
//! training, guided sampling, evaluation, and the numerical verification
//! report.
//!
//! All commands are deterministic given their seeds. Each one writes its
//! outputs under `--out` together with the effective config
//! (`effective_config.toml`) and a run manifest (`run_manifest.json`)
//! recording the command, its seeds, and the SHA-256 of every direct input
//! and output file. Inputs referenced through a dataset directory are
//! pinned transitively: the dataset's own manifest records the seed and
//! config that regenerate every clip byte-for-byte.
//!
//! Exit codes (see [`main_with_args`]): 0 success, 1 usage/config error,
//! 2 verification failure, 3 I/O or artifact-format error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, ScheduleSection, CONFIG_ECHO_NAME};
use crate::data::{
    generate_dataset, load_clip, load_manifest, load_split, reference_frame, save_clip,
    unpatchify, SyntheticClip, MANIFEST_NAME, PATCH_SIDE,
};
use crate::error::{Result, SanmError};
use crate::metrics::{
    csim_metric, l1_metric, psnr_metric, report_table, run_ablation, ssim_metric, ClipScores,
    EvalReport, VariantSpec,
};
use crate::models::{
    ConditionedDenoiser, GeneratorModel, IdentityEmbedder, IdentityObjective, ModelDims,
    ToyDecoder, ToyEncoder,
};
use crate::numerics::rng::SeededRng;
use crate::numerics::tensor::NdTensor;
use crate::sampler::{edm_sample, GuidanceConfig, GuidanceRunner, Trajectory};
use crate::training::{
    clip_conditioning, embedding_separation, load_checkpoint, load_into, pretrain_decoder,
    pretrain_identity_embedder, reconstruction_psnr, save_checkpoint, train, CheckpointMeta,
    TrainInputs,
};
use crate::verification::{render_report, run_all, thread_count};

/// Codec (encoder + decoder) checkpoint file name under `pretrain --out`.
pub const CODEC_CKPT: &str = "codec.sanm";
/// Identity-embedder checkpoint file name under `pretrain --out`.
pub const EMBEDDER_CKPT: &str = "embedder.sanm";
/// Generator checkpoint file name under `train --out`.
pub const GENERATOR_CKPT: &str = "generator.sanm";
/// Generated clip file name under `sample --out`.
pub const SAMPLE_CLIP: &str = "sample.sclp";
/// Per-step sampling trace file name under `sample --out`.
pub const TRAJECTORY_FILE: &str = "trajectory.txt";
/// Aligned ablation table file name under `eval --out`.
pub const EVAL_TABLE_FILE: &str = "eval_table.txt";
/// Run manifest file name, written into every command's `--out`.
pub const RUN_MANIFEST_NAME: &str = "run_manifest.json";

// RNG stream tags, one per driver, so stages never share a stream even
// when the user reuses a seed across commands.
const STREAM_MODEL_INIT: u64 = 0x6d6f;
const STREAM_SAMPLE: u64 = 0x5a00;
const STREAM_EVAL: u64 = 0xe7a1;

// ---- hashing and run manifests ----

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| SanmError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// What a command consumed and produced. Inputs are keyed by the path as
/// given on the command line; outputs are keyed relative to `--out`.
#[derive(Serialize)]
struct RunManifest {
    command: &'static str,
    seeds: BTreeMap<&'static str, u64>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl RunManifest {
    fn new(command: &'static str) -> Self {
        RunManifest {
            command,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    fn seed(&mut self, name: &'static str, value: u64) -> &mut Self {
        self.seeds.insert(name, value);
        self
    }

    fn input(&mut self, path: &Path) -> Result<&mut Self> {
        self.inputs
            .insert(path.display().to_string(), hash_file(path)?);
        Ok(self)
    }

    fn input_opt(&mut self, path: Option<&Path>) -> Result<&mut Self> {
        if let Some(p) = path {
            self.input(p)?;
        }
        Ok(self)
    }

    /// Record `out_dir/name` as an output.
    fn output(&mut self, out_dir: &Path, name: &str) -> Result<&mut Self> {
        self.outputs
            .insert(name.to_string(), hash_file(&out_dir.join(name))?);
        Ok(self)
    }

    fn write(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join(RUN_MANIFEST_NAME);
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| SanmError::Format(format!("run manifest encode: {e}")))?;
        fs::write(&path, json + "\n").map_err(|e| SanmError::io(path, e))
    }
}

// ---- model checkpoint helpers ----

#[derive(Serialize, serde::Deserialize)]
struct CodecMetaConfig {
    latent_dim: usize,
    hidden: usize,
}

#[derive(Serialize, serde::Deserialize)]
struct EmbedderMetaConfig {
    d_id: usize,
}

fn meta_with_config<T: Serialize>(
    kind: &str,
    seed: u64,
    epoch: u64,
    config: &T,
) -> Result<CheckpointMeta> {
    let mut meta = CheckpointMeta::new(kind, seed, epoch);
    meta.config = serde_json::to_value(config)
        .map_err(|e| SanmError::Format(format!("checkpoint config encode: {e}")))?;
    Ok(meta)
}

fn ensure_kind(kind: &str, want: &str, path: &Path) -> Result<()> {
    if kind != want {
        return Err(SanmError::Format(format!(
            "checkpoint {}: kind '{kind}', expected '{want}'",
            path.display()
        )));
    }
    Ok(())
}

fn parse_meta_config<T: serde::de::DeserializeOwned>(
    value: &serde_json::Value,
    path: &Path,
) -> Result<T> {
    serde_json::from_value(value.clone()).map_err(|e| {
        SanmError::Format(format!(
            "checkpoint {}: bad embedded config: {e}",
            path.display()
        ))
    })
}

/// Save the paired pixel codec as one checkpoint.
pub fn save_codec_checkpoint(
    path: &Path,
    encoder: &ToyEncoder,
    decoder: &ToyDecoder,
    seed: u64,
    epoch: u64,
) -> Result<()> {
    let mut tensors = Vec::new();
    encoder.collect("encoder", &mut tensors);
    decoder.collect("decoder", &mut tensors);
    // Hidden width is recoverable from the first encoder weight: [patch, hidden].
    let hidden = tensors[0].1.shape()[1];
    let cfg = CodecMetaConfig {
        latent_dim: decoder.latent_dim(),
        hidden,
    };
    let meta = meta_with_config("codec", seed, epoch, &cfg)?;
    save_checkpoint(path, &tensors, &meta)
}

/// Load the paired pixel codec saved by [`save_codec_checkpoint`].
pub fn load_codec_checkpoint(path: &Path) -> Result<(ToyEncoder, ToyDecoder)> {
    let ckpt = load_checkpoint(path)?;
    ensure_kind(&ckpt.meta.kind, "codec", path)?;
    let cfg: CodecMetaConfig = parse_meta_config(&ckpt.meta.config, path)?;
    let mut rng = SeededRng::new(0);
    let mut encoder = ToyEncoder::new(&mut rng, cfg.latent_dim, cfg.hidden);
    let mut decoder = ToyDecoder::new(&mut rng, cfg.latent_dim, cfg.hidden);
    let mut params = Vec::new();
    encoder.collect_mut("encoder", &mut params);
    decoder.collect_mut("decoder", &mut params);
    load_into(&ckpt, &mut params)?;
    Ok((encoder, decoder))
}

/// Save the identity embedder (its trainable head; the detector bank is a
/// fixed construction).
pub fn save_embedder_checkpoint(
    path: &Path,
    embedder: &IdentityEmbedder,
    seed: u64,
    epoch: u64,
) -> Result<()> {
    let mut tensors = Vec::new();
    embedder.collect("embedder", &mut tensors);
    let cfg = EmbedderMetaConfig {
        d_id: embedder.d_id(),
    };
    let meta = meta_with_config("embedder", seed, epoch, &cfg)?;
    save_checkpoint(path, &tensors, &meta)
}

/// Load an identity embedder saved by [`save_embedder_checkpoint`].
pub fn load_embedder_checkpoint(path: &Path) -> Result<IdentityEmbedder> {
    let ckpt = load_checkpoint(path)?;
    ensure_kind(&ckpt.meta.kind, "embedder", path)?;
    let cfg: EmbedderMetaConfig = parse_meta_config(&ckpt.meta.config, path)?;
    let mut rng = SeededRng::new(0);
    let mut embedder = IdentityEmbedder::new(&mut rng, cfg.d_id);
    let mut params = Vec::new();
    embedder.collect_mut("embedder", &mut params);
    load_into(&ckpt, &mut params)?;
    Ok(embedder)
}

/// Save a trained generator; its dimensions ride along in the metadata.
pub fn save_generator_checkpoint(
    path: &Path,
    model: &GeneratorModel,
    seed: u64,
    epoch: u64,
) -> Result<()> {
    let meta = meta_with_config("generator", seed, epoch, model.dims())?;
    save_checkpoint(path, &model.params(), &meta)
}

/// Load a generator saved by [`save_generator_checkpoint`].
pub fn load_generator_checkpoint(path: &Path) -> Result<GeneratorModel> {
    let ckpt = load_checkpoint(path)?;
    ensure_kind(&ckpt.meta.kind, "generator", path)?;
    let dims: ModelDims = parse_meta_config(&ckpt.meta.config, path)?;
    dims.validate()?;
    let mut rng = SeededRng::new(0);
    let mut model = GeneratorModel::new(&mut rng, &dims)?;
    let mut params = model.params_mut();
    load_into(&ckpt, &mut params)?;
    Ok(model)
}

// ---- shared sampling pipeline ----

/// Final latents, decoded pixel frames, and the per-step trace of one
/// sampling run.
pub struct SampleOutcome {
    pub latents: Vec<NdTensor>,
    pub pixel_frames: Vec<NdTensor>,
    pub trajectory: Trajectory,
}

fn check_geometry(
    dims: &ModelDims,
    clip: &SyntheticClip,
    decoder: &ToyDecoder,
    embedder: &IdentityEmbedder,
) -> Result<()> {
    if dims.frames != clip.frame_count() {
        return Err(SanmError::Config(format!(
            "model expects {} frames per clip, reference has {}",
            dims.frames,
            clip.frame_count()
        )));
    }
    let tokens = (clip.height / PATCH_SIDE) * (clip.width / PATCH_SIDE);
    if dims.tokens != tokens {
        return Err(SanmError::Config(format!(
            "model expects {} tokens, {}x{} frames give {}",
            dims.tokens, clip.height, clip.width, tokens
        )));
    }
    if decoder.latent_dim() != dims.latent_dim {
        return Err(SanmError::Config(format!(
            "decoder latent dim {} does not match model latent dim {}",
            decoder.latent_dim(),
            dims.latent_dim
        )));
    }
    if embedder.d_id() != dims.d_id {
        return Err(SanmError::Config(format!(
            "embedder dimension {} does not match model d_id {}",
            embedder.d_id(),
            dims.d_id
        )));
    }
    Ok(())
}

/// Decode latent frames to pixel frames, clamped to `[0, 1]` and rounded
/// through `f32` so in-memory values match what a saved clip reloads to.
fn decode_frames(
    decoder: &ToyDecoder,
    latents: &[NdTensor],
    height: usize,
    width: usize,
) -> Result<Vec<NdTensor>> {
    latents
        .iter()
        .map(|z| {
            let patches = decoder.decode(z)?;
            let frame = unpatchify(&patches, height, width)?;
            Ok(frame.map(|v| (v.clamp(0.0, 1.0) as f32) as f64))
        })
        .collect()
}

/// Run the full sampling pipeline for one reference clip: conditioning
/// from the reference frame and pose track, initial noise at the top grid
/// level, the stochastic sampler (with the identity-guidance inner loop
/// when enabled), and decoding of the final latents to pixels. `rng`
/// drives the initial noise and any churn draws; the guidance loop
/// consumes no randomness.
pub fn sample_clip_frames(
    model: &GeneratorModel,
    decoder: &ToyDecoder,
    embedder: &IdentityEmbedder,
    reference: &SyntheticClip,
    schedule: &ScheduleSection,
    guidance: GuidanceConfig,
    rng: &mut SeededRng,
) -> Result<SampleOutcome> {
    let dims = model.dims();
    check_geometry(dims, reference, decoder, embedder)?;
    let cond = clip_conditioning(reference, embedder)?;
    let target = embedder.embed(reference_frame(reference)?)?;
    let objective = IdentityObjective::new(decoder, embedder, target)?;
    let denoiser = ConditionedDenoiser { model, cond: &cond };
    let grid = schedule.grid()?;
    let churn = schedule.churn();

    let mut x_init = Vec::with_capacity(dims.frames);
    for _ in 0..dims.frames {
        x_init.push(rng.gaussian_tensor(&[dims.tokens, dims.latent_dim], schedule.sigma_max)?);
    }

    let mut runner;
    let guidance_opt = if guidance.enabled {
        runner = GuidanceRunner::new(guidance, &objective);
        Some(&mut runner)
    } else {
        None
    };
    let (latents, trajectory) = edm_sample(
        &denoiser,
        x_init,
        &grid,
        schedule.steps,
        &churn,
        guidance_opt,
        rng,
        false,
    )?;
    let pixel_frames = decode_frames(decoder, &latents, reference.height, reference.width)?;
    Ok(SampleOutcome {
        latents,
        pixel_frames,
        trajectory,
    })
}

// ---- generate ----

/// Arguments for `sanm generate`.
#[derive(Args, Clone, Debug)]
pub struct GenerateArgs {
    /// Config file (TOML); built-in defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset seed.
    #[arg(long, default_value_t = 1234)]
    pub seed: u64,
    /// Output directory for clips and the dataset manifest.
    #[arg(long)]
    pub out: PathBuf,
}

/// Generate the synthetic clip dataset described by `[data]`.
pub fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let cfg = RunConfig::load_opt(a.config.as_deref())?;
    let threads = thread_count()?;
    let manifest = generate_dataset(&cfg.data, a.seed, &a.out, threads)?;
    cfg.echo_into(&a.out)?;

    let mut run = RunManifest::new("generate");
    run.seed("dataset", a.seed);
    run.input_opt(a.config.as_deref())?;
    for entry in &manifest.clips {
        run.output(&a.out, &entry.file)?;
    }
    run.output(&a.out, MANIFEST_NAME)?;
    run.output(&a.out, CONFIG_ECHO_NAME)?;
    run.write(&a.out)?;

    println!(
        "wrote {} clips ({} identities, {} train / {} eval per identity) to {}",
        manifest.clip_count,
        manifest.identity_count,
        cfg.data.train_clips,
        cfg.data.eval_clips,
        a.out.display()
    );
    Ok(())
}

// ---- pretrain ----

/// Arguments for `sanm pretrain`.
#[derive(Args, Clone, Debug)]
pub struct PretrainArgs {
    /// Config file (TOML); built-in defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory (from `generate`).
    #[arg(long)]
    pub data: PathBuf,
    /// Pretraining seed.
    #[arg(long, default_value_t = 500)]
    pub seed: u64,
    /// Output directory for the codec and embedder checkpoints.
    #[arg(long)]
    pub out: PathBuf,
}

/// Pretrain the pixel codec and the identity embedder on the train split.
pub fn cmd_pretrain(a: &PretrainArgs) -> Result<()> {
    let cfg = RunConfig::load_opt(a.config.as_deref())?;
    let manifest = load_manifest(&a.data)?;
    let clips = load_split(&a.data, &manifest, "train")?;

    let (encoder, decoder, _) =
        pretrain_decoder(&clips, cfg.model.latent_dim, &cfg.train.codec, a.seed)?;
    let (embedder, _) =
        pretrain_identity_embedder(&clips, cfg.model.d_id, &cfg.train.embedder, a.seed)?;

    fs::create_dir_all(&a.out).map_err(|e| SanmError::io(&a.out, e))?;
    save_codec_checkpoint(
        &a.out.join(CODEC_CKPT),
        &encoder,
        &decoder,
        a.seed,
        cfg.train.codec.epochs as u64,
    )?;
    save_embedder_checkpoint(
        &a.out.join(EMBEDDER_CKPT),
        &embedder,
        a.seed,
        cfg.train.embedder.epochs as u64,
    )?;
    cfg.echo_into(&a.out)?;

    let mut run = RunManifest::new("pretrain");
    run.seed("pretrain", a.seed);
    run.input_opt(a.config.as_deref())?;
    run.input(&a.data.join(MANIFEST_NAME))?;
    run.output(&a.out, CODEC_CKPT)?;
    run.output(&a.out, EMBEDDER_CKPT)?;
    run.output(&a.out, CONFIG_ECHO_NAME)?;
    run.write(&a.out)?;

    let psnr = reconstruction_psnr(&encoder, &decoder, &clips)?;
    let (same, diff) = embedding_separation(&embedder, &clips)?;
    println!("codec: train-split reconstruction {psnr:.2} dB");
    println!("embedder: same-identity cosine {same:.3}, cross-identity cosine {diff:.3}");
    println!("wrote {CODEC_CKPT}, {EMBEDDER_CKPT} to {}", a.out.display());
    Ok(())
}

// ---- train ----

/// Arguments for `sanm train`.
#[derive(Args, Clone, Debug)]
pub struct TrainArgs {
    /// Config file (TOML); built-in defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory (from `generate`).
    #[arg(long)]
    pub data: PathBuf,
    /// Directory holding the codec and embedder checkpoints (from `pretrain`).
    #[arg(long)]
    pub pretrained: PathBuf,
    /// Override `[train] epochs` from the config.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Training seed (weight init, noise draws, shuffling).
    #[arg(long, default_value_t = 11)]
    pub seed: u64,
    /// Output directory for the generator checkpoint.
    #[arg(long)]
    pub out: PathBuf,
}

/// Train the conditioned denoiser against the frozen codec and embedder.
pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load_opt(a.config.as_deref())?;
    if let Some(epochs) = a.epochs {
        cfg.train.epochs = epochs;
    }
    let manifest = load_manifest(&a.data)?;
    let clips = load_split(&a.data, &manifest, "train")?;

    let codec_path = a.pretrained.join(CODEC_CKPT);
    let embedder_path = a.pretrained.join(EMBEDDER_CKPT);
    let (encoder, _decoder) = load_codec_checkpoint(&codec_path)?;
    let embedder = load_embedder_checkpoint(&embedder_path)?;
    if encoder.latent_dim() != cfg.model.latent_dim {
        return Err(SanmError::Config(format!(
            "codec latent dim {} does not match model.latent_dim {}",
            encoder.latent_dim(),
            cfg.model.latent_dim
        )));
    }
    if embedder.d_id() != cfg.model.d_id {
        return Err(SanmError::Config(format!(
            "embedder dimension {} does not match model.d_id {}",
            embedder.d_id(),
            cfg.model.d_id
        )));
    }

    let mut init_rng = SeededRng::new(a.seed).fork(STREAM_MODEL_INIT);
    let mut model = GeneratorModel::new(&mut init_rng, &cfg.model)?;
    let inputs = TrainInputs {
        clips: &clips,
        encoder: &encoder,
        embedder: &embedder,
    };
    let losses = train(&mut model, &inputs, &cfg.train.params(), a.seed)?;

    fs::create_dir_all(&a.out).map_err(|e| SanmError::io(&a.out, e))?;
    save_generator_checkpoint(
        &a.out.join(GENERATOR_CKPT),
        &model,
        a.seed,
        cfg.train.epochs as u64,
    )?;
    cfg.echo_into(&a.out)?;

    let mut run = RunManifest::new("train");
    run.seed("train", a.seed);
    run.input_opt(a.config.as_deref())?;
    run.input(&a.data.join(MANIFEST_NAME))?;
    run.input(&codec_path)?;
    run.input(&embedder_path)?;
    run.output(&a.out, GENERATOR_CKPT)?;
    run.output(&a.out, CONFIG_ECHO_NAME)?;
    run.write(&a.out)?;

    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!(
            "trained {} epochs on {} clips: loss {first:.6} -> {last:.6}",
            losses.len(),
            clips.len()
        );
    }
    println!("wrote {GENERATOR_CKPT} to {}", a.out.display());
    Ok(())
}

// ---- sample ----

/// Arguments for `sanm sample`.
#[derive(Args, Clone, Debug)]
pub struct SampleArgs {
    /// Config file (TOML); built-in defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Generator checkpoint (from `train`).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory holding the codec and embedder checkpoints (from `pretrain`).
    #[arg(long)]
    pub pretrained: PathBuf,
    /// Reference clip file (SCLP) providing identity and pose.
    #[arg(long)]
    pub reference: PathBuf,
    /// Sampling seed (initial noise and churn).
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Override the config's guidance master switch.
    #[arg(long, value_parser = ["on", "off"])]
    pub guidance: Option<String>,
    /// Output directory for the generated clip and trajectory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Sample one clip conditioned on a reference, writing the generated SCLP
/// file and the per-step trajectory table.
pub fn cmd_sample(a: &SampleArgs) -> Result<()> {
    let mut cfg = RunConfig::load_opt(a.config.as_deref())?;
    match a.guidance.as_deref() {
        Some("on") => cfg.guidance.enabled = true,
        Some("off") => cfg.guidance.enabled = false,
        _ => {}
    }
    let model = load_generator_checkpoint(&a.checkpoint)?;
    let codec_path = a.pretrained.join(CODEC_CKPT);
    let embedder_path = a.pretrained.join(EMBEDDER_CKPT);
    let (_encoder, decoder) = load_codec_checkpoint(&codec_path)?;
    let embedder = load_embedder_checkpoint(&embedder_path)?;
    let reference = load_clip(&a.reference)?;

    let mut rng = SeededRng::new(a.seed).fork(STREAM_SAMPLE);
    let outcome = sample_clip_frames(
        &model,
        &decoder,
        &embedder,
        &reference,
        &cfg.schedule,
        cfg.guidance,
        &mut rng,
    )?;

    fs::create_dir_all(&a.out).map_err(|e| SanmError::io(&a.out, e))?;
    // The generated clip follows the reference's pose track, so its mask
    // and pose metadata carry over unchanged.
    let generated = SyntheticClip {
        frames: outcome.pixel_frames.clone(),
        masks: reference.masks.clone(),
        identity_id: reference.identity_id,
        identity_params: reference.identity_params.clone(),
        pose_track: reference.pose_track.clone(),
        height: reference.height,
        width: reference.width,
    };
    save_clip(&a.out.join(SAMPLE_CLIP), &generated)?;
    let traj_path = a.out.join(TRAJECTORY_FILE);
    fs::write(&traj_path, outcome.trajectory.to_table())
        .map_err(|e| SanmError::io(traj_path, e))?;
    cfg.echo_into(&a.out)?;

    let mut run = RunManifest::new("sample");
    run.seed("sample", a.seed);
    run.input_opt(a.config.as_deref())?;
    run.input(&a.checkpoint)?;
    run.input(&codec_path)?;
    run.input(&embedder_path)?;
    run.input(&a.reference)?;
    run.output(&a.out, SAMPLE_CLIP)?;
    run.output(&a.out, TRAJECTORY_FILE)?;
    run.output(&a.out, CONFIG_ECHO_NAME)?;
    run.write(&a.out)?;

    let csim = csim_metric(
        &outcome.pixel_frames,
        reference_frame(&reference)?,
        &embedder,
    )?;
    println!(
        "sampled {} frames in {} steps (guidance {}): identity similarity {csim:.3}",
        outcome.pixel_frames.len(),
        cfg.schedule.steps,
        if cfg.guidance.enabled { "on" } else { "off" },
    );
    println!("wrote {SAMPLE_CLIP}, {TRAJECTORY_FILE} to {}", a.out.display());
    Ok(())
}

// ---- eval ----

/// Arguments for `sanm eval`.
#[derive(Args, Clone, Debug)]
pub struct EvalArgs {
    /// Config file (TOML); built-in defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory (from `generate`).
    #[arg(long)]
    pub data: PathBuf,
    /// Directory holding the codec and embedder checkpoints (from `pretrain`).
    #[arg(long)]
    pub pretrained: PathBuf,
    /// Generator checkpoint; repeat the flag to give each variant its own.
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    /// Comma-separated variant labels. "full" forces guidance on,
    /// "no-opt"/"no-optimization" force it off; other labels keep the
    /// config's guidance switch.
    #[arg(long, default_value = "full,no-opt")]
    pub variants: String,
    /// Output directory for the reports.
    #[arg(long)]
    pub out: PathBuf,
}

/// Split a comma-separated variant list into validated labels.
pub fn parse_variant_labels(spec: &str) -> Result<Vec<String>> {
    let labels: Vec<String> = spec
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if labels.is_empty() {
        return Err(SanmError::Config("variant list is empty".into()));
    }
    for label in &labels {
        if !label
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return Err(SanmError::Config(format!(
                "variant label '{label}' may only use letters, digits, '-' and '_'"
            )));
        }
        if labels.iter().filter(|l| *l == label).count() > 1 {
            return Err(SanmError::Config(format!(
                "variant label '{label}' appears more than once"
            )));
        }
    }
    Ok(labels)
}

/// Pair variant labels with checkpoints: one checkpoint is shared by all
/// variants, otherwise the lists must match positionally.
pub fn assign_checkpoints(labels: &[String], checkpoints: &[PathBuf]) -> Result<Vec<VariantSpec>> {
    if checkpoints.len() == 1 {
        return Ok(labels
            .iter()
            .map(|l| VariantSpec::new(l.clone(), checkpoints[0].clone()))
            .collect());
    }
    if checkpoints.len() == labels.len() {
        return Ok(labels
            .iter()
            .zip(checkpoints)
            .map(|(l, c)| VariantSpec::new(l.clone(), c.clone()))
            .collect());
    }
    Err(SanmError::Config(format!(
        "{} variants need 1 or {} checkpoints, got {}",
        labels.len(),
        labels.len(),
        checkpoints.len()
    )))
}

fn variant_guidance(label: &str, base: GuidanceConfig) -> GuidanceConfig {
    let mut g = base;
    match label {
        "full" => g.enabled = true,
        "no-opt" | "no-optimization" => g.enabled = false,
        _ => {}
    }
    g
}

fn score_clip(
    name: &str,
    generated: &[NdTensor],
    truth: &SyntheticClip,
    embedder: &IdentityEmbedder,
) -> Result<ClipScores> {
    if generated.len() != truth.frames.len() {
        return Err(SanmError::Shape(format!(
            "generated {} frames but the clip has {}",
            generated.len(),
            truth.frames.len()
        )));
    }
    let mut l1 = 0.0;
    let mut psnr = 0.0;
    let mut ssim = 0.0;
    for (g, t) in generated.iter().zip(&truth.frames) {
        l1 += l1_metric(g, t)?;
        psnr += psnr_metric(g, t)?;
        ssim += ssim_metric(g, t)?;
    }
    let n = generated.len() as f64;
    let csim = csim_metric(generated, reference_frame(truth)?, embedder)?;
    Ok(ClipScores {
        clip: name.to_string(),
        l1: l1 / n,
        psnr: psnr / n,
        ssim: ssim / n,
        csim,
    })
}

/// Evaluate ablation variants on the eval split: sample every clip under
/// each variant's guidance setting, score it against the ground truth, and
/// emit one key=value report per variant plus an aligned table.
pub fn cmd_eval(a: &EvalArgs) -> Result<Vec<EvalReport>> {
    let cfg = RunConfig::load_opt(a.config.as_deref())?;
    let labels = parse_variant_labels(&a.variants)?;
    let specs = assign_checkpoints(&labels, &a.checkpoints)?;

    let manifest = load_manifest(&a.data)?;
    let mut clips = load_split(&a.data, &manifest, "eval")?;
    let mut names: Vec<String> = manifest
        .clips
        .iter()
        .filter(|e| e.split == "eval")
        .map(|e| e.file.trim_end_matches(".sclp").to_string())
        .collect();
    if cfg.eval.max_clips > 0 && clips.len() > cfg.eval.max_clips {
        clips.truncate(cfg.eval.max_clips);
        names.truncate(cfg.eval.max_clips);
    }
    if clips.is_empty() {
        return Err(SanmError::Config("dataset has no eval clips".into()));
    }

    let codec_path = a.pretrained.join(CODEC_CKPT);
    let embedder_path = a.pretrained.join(EMBEDDER_CKPT);
    let (_encoder, decoder) = load_codec_checkpoint(&codec_path)?;
    let embedder = load_embedder_checkpoint(&embedder_path)?;

    let reports = run_ablation(&specs, |spec| {
        let model = load_generator_checkpoint(&spec.checkpoint)?;
        let guidance = variant_guidance(&spec.label, cfg.guidance);
        let mut scores = Vec::with_capacity(clips.len());
        for (idx, (clip, name)) in clips.iter().zip(&names).enumerate() {
            let mut rng = SeededRng::new(cfg.eval.seed).fork2(STREAM_EVAL, idx as u64);
            let outcome = sample_clip_frames(
                &model,
                &decoder,
                &embedder,
                clip,
                &cfg.schedule,
                guidance,
                &mut rng,
            )?;
            scores.push(score_clip(name, &outcome.pixel_frames, clip, &embedder)?);
        }
        let mut echo_cfg = cfg.clone();
        echo_cfg.guidance = guidance;
        EvalReport::from_clips(spec.label.clone(), echo_cfg.to_toml()?, scores)
    })?;

    fs::create_dir_all(&a.out).map_err(|e| SanmError::io(&a.out, e))?;
    let mut run = RunManifest::new("eval");
    run.seed("eval", cfg.eval.seed);
    run.input_opt(a.config.as_deref())?;
    run.input(&a.data.join(MANIFEST_NAME))?;
    run.input(&codec_path)?;
    run.input(&embedder_path)?;
    for ckpt in &a.checkpoints {
        run.input(ckpt)?;
    }
    for report in &reports {
        let name = format!("eval_{}.kv", report.variant);
        let path = a.out.join(&name);
        fs::write(&path, report.key_values()).map_err(|e| SanmError::io(path, e))?;
        run.output(&a.out, &name)?;
    }
    let table = report_table(&reports);
    let table_path = a.out.join(EVAL_TABLE_FILE);
    fs::write(&table_path, &table).map_err(|e| SanmError::io(table_path, e))?;
    cfg.echo_into(&a.out)?;
    run.output(&a.out, EVAL_TABLE_FILE)?;
    run.output(&a.out, CONFIG_ECHO_NAME)?;
    run.write(&a.out)?;

    print!("{table}");
    Ok(reports)
}

// ---- verify ----

/// Arguments for `sanm verify`.
#[derive(Args, Clone, Debug)]
pub struct VerifyArgs {
    /// Also write the report to this file (it always prints to stdout).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Seed for the Monte-Carlo checks.
    #[arg(long, default_value_t = 71)]
    pub seed: u64,
}

/// Run the numerical verification suite; errors (exit code 2) when any
/// check fails.
pub fn cmd_verify(a: &VerifyArgs) -> Result<()> {
    let threads = thread_count()?;
    let checks = run_all(a.seed, threads);
    let text = render_report(&checks);
    print!("{text}");
    if let Some(path) = &a.report {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| SanmError::io(parent, e))?;
            }
        }
        fs::write(path, &text).map_err(|e| SanmError::io(path, e))?;
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(SanmError::Verification(format!(
            "{} of {} checks failed: {}",
            failed.len(),
            checks.len(),
            failed.join(", ")
        )))
    }
}

// ---- entry point ----

/// Top-level argument parser.
#[derive(Parser, Debug)]
#[command(
    name = "sanm",
    version,
    about = "Identity-preserving toy video diffusion: synthetic data, training, guided sampling, evaluation, and numerical verification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// One subcommand per pipeline stage.
#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic clip dataset.
    Generate(GenerateArgs),
    /// Pretrain the pixel codec and the identity embedder.
    Pretrain(PretrainArgs),
    /// Train the conditioned denoiser.
    Train(TrainArgs),
    /// Sample a clip from a reference, optionally with identity guidance.
    Sample(SampleArgs),
    /// Score generator checkpoints on the eval split (ablation reports).
    Eval(EvalArgs),
    /// Run the numerical verification suite.
    Verify(VerifyArgs),
}

/// Dispatch a parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Eval(a) => cmd_eval(a).map(|_| ()),
        Command::Verify(a) => cmd_verify(a),
    }
}

/// Parse `args` and run, returning the process exit code: 0 success,
/// 1 usage/config error, 2 verification failure, 3 I/O or format error.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_clip, DataConfig};
    use crate::models::adapter::AlignMode;

    #[test]
    fn variant_labels_parse_and_reject_bad_input() {
        let labels = parse_variant_labels("full, no-opt").unwrap();
        assert_eq!(labels, vec!["full".to_string(), "no-opt".to_string()]);
        assert!(parse_variant_labels("").is_err());
        assert!(parse_variant_labels("full,full").is_err());
        assert!(parse_variant_labels("a/b").is_err());
    }

    #[test]
    fn checkpoints_are_shared_or_positional() {
        let labels = vec!["full".to_string(), "no-opt".to_string()];
        let one = vec![PathBuf::from("g.sanm")];
        let specs = assign_checkpoints(&labels, &one).unwrap();
        assert_eq!(specs[0].checkpoint, specs[1].checkpoint);
        let two = vec![PathBuf::from("a.sanm"), PathBuf::from("b.sanm")];
        let specs = assign_checkpoints(&labels, &two).unwrap();
        assert_eq!(specs[1].checkpoint, PathBuf::from("b.sanm"));
        let three = vec![
            PathBuf::from("a.sanm"),
            PathBuf::from("b.sanm"),
            PathBuf::from("c.sanm"),
        ];
        assert!(assign_checkpoints(&labels, &three).is_err());
    }

    #[test]
    fn guidance_is_forced_by_the_reserved_labels() {
        let mut base = GuidanceConfig::default();
        base.enabled = false;
        assert!(variant_guidance("full", base).enabled);
        assert!(!variant_guidance("no-opt", base).enabled);
        assert!(!variant_guidance("no-optimization", base).enabled);
        assert!(!variant_guidance("norm", base).enabled, "keeps the base switch");
    }

    #[test]
    fn model_checkpoints_reload_to_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = SeededRng::new(41);
        let encoder = ToyEncoder::new(&mut rng, 8, 16);
        let decoder = ToyDecoder::new(&mut rng, 8, 16);
        let embedder = IdentityEmbedder::new(&mut rng, 8);
        let dims = ModelDims {
            frames: 2,
            tokens: 16,
            latent_dim: 8,
            model_dim: 16,
            heads: 2,
            adapter_blocks: 1,
            face_blocks: 1,
            d_id: 8,
            align: AlignMode::Norm,
            use_temporal: false,
        };
        let model = GeneratorModel::new(&mut rng, &dims).unwrap();

        let codec_path = dir.path().join(CODEC_CKPT);
        save_codec_checkpoint(&codec_path, &encoder, &decoder, 1, 2).unwrap();
        let (enc2, dec2) = load_codec_checkpoint(&codec_path).unwrap();
        let again = dir.path().join("codec2.sanm");
        save_codec_checkpoint(&again, &enc2, &dec2, 1, 2).unwrap();
        assert_eq!(fs::read(&codec_path).unwrap(), fs::read(&again).unwrap());

        let emb_path = dir.path().join(EMBEDDER_CKPT);
        save_embedder_checkpoint(&emb_path, &embedder, 1, 2).unwrap();
        let emb2 = load_embedder_checkpoint(&emb_path).unwrap();
        let again = dir.path().join("embedder2.sanm");
        save_embedder_checkpoint(&again, &emb2, 1, 2).unwrap();
        assert_eq!(fs::read(&emb_path).unwrap(), fs::read(&again).unwrap());

        let gen_path = dir.path().join(GENERATOR_CKPT);
        save_generator_checkpoint(&gen_path, &model, 1, 2).unwrap();
        let model2 = load_generator_checkpoint(&gen_path).unwrap();
        assert_eq!(model2.dims().align, AlignMode::Norm);
        assert!(!model2.dims().use_temporal);
        let again = dir.path().join("generator2.sanm");
        save_generator_checkpoint(&again, &model2, 1, 2).unwrap();
        assert_eq!(fs::read(&gen_path).unwrap(), fs::read(&again).unwrap());

        // Wrong-kind loads fail with the kind named.
        let err = load_generator_checkpoint(&codec_path).unwrap_err();
        assert!(err.to_string().contains("codec"), "{err}");
    }

    #[test]
    fn geometry_mismatches_are_rejected() {
        let mut rng = SeededRng::new(9);
        let decoder = ToyDecoder::new(&mut rng, 8, 16);
        let embedder = IdentityEmbedder::new(&mut rng, 8);
        let cfg = DataConfig {
            identities: 2,
            train_clips: 1,
            eval_clips: 1,
            frames: 4,
            height: 16,
            width: 16,
        };
        let clip = generate_clip(&cfg, 5, 0).unwrap();
        let dims = ModelDims {
            frames: 2, // clip has 4
            tokens: 16,
            latent_dim: 8,
            model_dim: 16,
            heads: 2,
            adapter_blocks: 1,
            face_blocks: 1,
            d_id: 8,
            align: AlignMode::Full,
            use_temporal: false,
        };
        let err = check_geometry(&dims, &clip, &decoder, &embedder).unwrap_err();
        assert!(err.to_string().contains("frames"), "{err}");
        let dims_ok = ModelDims { frames: 4, ..dims };
        check_geometry(&dims_ok, &clip, &decoder, &embedder).unwrap();
        let bad_decoder = ToyDecoder::new(&mut rng, 4, 16);
        let err = check_geometry(&dims_ok, &clip, &bad_decoder, &embedder).unwrap_err();
        assert!(err.to_string().contains("latent"), "{err}");
    }

    #[test]
    fn command_line_flags_parse() {
        let cli = Cli::try_parse_from([
            "sanm", "sample", "--checkpoint", "g.sanm", "--pretrained", "pre",
            "--reference", "r.sclp", "--guidance", "off", "--out", "o",
        ])
        .unwrap();
        match cli.command {
            Command::Sample(a) => {
                assert_eq!(a.guidance.as_deref(), Some("off"));
                assert_eq!(a.seed, 7);
            }
            _ => panic!("wrong subcommand"),
        }
        assert!(Cli::try_parse_from([
            "sanm", "sample", "--checkpoint", "g", "--pretrained", "p",
            "--reference", "r", "--guidance", "maybe", "--out", "o",
        ])
        .is_err());
        assert!(Cli::try_parse_from(["sanm", "eval", "--data", "d", "--pretrained", "p", "--out", "o"]).is_err(), "eval requires --checkpoint");
    }

    /// End-to-end plumbing on a deliberately tiny setup: generate,
    /// pretrain, train, sample twice (same seed), eval. Asserts artifact
    /// presence and byte-level reproducibility, not model quality.
    #[test]
    fn tiny_pipeline_round_trips_and_reproduces() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("run.toml");
        fs::write(
            &cfg_path,
            "[data]\nidentities = 2\ntrain_clips = 1\neval_clips = 1\nframes = 2\n\n\
             [model]\nframes = 2\nmodel_dim = 16\nadapter_blocks = 1\nface_blocks = 1\n\n\
             [schedule]\nsigma_max = 10.0\nsteps = 3\n\n\
             [guidance]\nsteps = 2\nlr = 0.05\n\n\
             [train]\nepochs = 2\n\n[train.codec]\nepochs = 20\n\n[train.embedder]\nepochs = 20\n",
        )
        .unwrap();
        let data_dir = dir.path().join("data");
        let pre_dir = dir.path().join("pre");
        let train_dir = dir.path().join("model");

        cmd_generate(&GenerateArgs {
            config: Some(cfg_path.clone()),
            seed: 3,
            out: data_dir.clone(),
        })
        .unwrap();
        assert!(data_dir.join(MANIFEST_NAME).is_file());
        assert!(data_dir.join(RUN_MANIFEST_NAME).is_file());
        assert!(data_dir.join(CONFIG_ECHO_NAME).is_file());

        cmd_pretrain(&PretrainArgs {
            config: Some(cfg_path.clone()),
            data: data_dir.clone(),
            seed: 4,
            out: pre_dir.clone(),
        })
        .unwrap();
        assert!(pre_dir.join(CODEC_CKPT).is_file());
        assert!(pre_dir.join(EMBEDDER_CKPT).is_file());

        cmd_train(&TrainArgs {
            config: Some(cfg_path.clone()),
            data: data_dir.clone(),
            pretrained: pre_dir.clone(),
            epochs: None,
            seed: 5,
            out: train_dir.clone(),
        })
        .unwrap();
        let generator = train_dir.join(GENERATOR_CKPT);
        assert!(generator.is_file());

        let reference = data_dir.join("id0_eval0.sclp");
        let sample_once = |out: PathBuf| {
            cmd_sample(&SampleArgs {
                config: Some(cfg_path.clone()),
                checkpoint: generator.clone(),
                pretrained: pre_dir.clone(),
                reference: reference.clone(),
                seed: 6,
                guidance: Some("on".to_string()),
                out,
            })
            .unwrap();
        };
        let s1 = dir.path().join("s1");
        let s2 = dir.path().join("s2");
        sample_once(s1.clone());
        sample_once(s2.clone());
        for name in [SAMPLE_CLIP, TRAJECTORY_FILE, RUN_MANIFEST_NAME] {
            assert_eq!(
                fs::read(s1.join(name)).unwrap(),
                fs::read(s2.join(name)).unwrap(),
                "{name} must be byte-identical across same-seed runs"
            );
        }
        // The sampled clip reloads as a valid SCLP file.
        let sampled = load_clip(&s1.join(SAMPLE_CLIP)).unwrap();
        assert_eq!(sampled.frame_count(), 2);

        let eval_dir = dir.path().join("eval");
        let reports = cmd_eval(&EvalArgs {
            config: Some(cfg_path.clone()),
            data: data_dir.clone(),
            pretrained: pre_dir.clone(),
            checkpoints: vec![generator.clone()],
            variants: "full,no-opt".to_string(),
            out: eval_dir.clone(),
        })
        .unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(reports[0].variant, "full");
        assert_eq!(reports[0].clip_count(), 2);
        assert!(eval_dir.join("eval_full.kv").is_file());
        assert!(eval_dir.join("eval_no-opt.kv").is_file());
        assert!(eval_dir.join(EVAL_TABLE_FILE).is_file());
        assert!(eval_dir.join(RUN_MANIFEST_NAME).is_file());
    }
}
