//! Synthetic "identity + pose" clip dataset and its on-disk formats.
//!
//! Each clip shows a small colored glyph (the stand-in face) moving along
//! a smooth random track over a textured but identity-independent
//! background. The glyph's color/shape pair is the identity; a per-frame
//! binary mask marks exactly the glyph pixels. Everything derives
//! deterministically from a master seed, with one independent stream per
//! clip so generation parallelizes without changing a single byte.
//!
//! On disk a clip is an "SCLP" file: magic, version, dims, then raw
//! little-endian `f32` frames, then mask bits packed eight per byte, then
//! a JSON metadata block. Datasets are a directory of clip files plus a
//! `manifest.json`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SanmError};
use crate::numerics::rng::SeededRng;
use crate::numerics::tensor::NdTensor;

const CLIP_MAGIC: &[u8; 4] = b"SCLP";
const CLIP_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

/// Pixel side of one latent patch (patches are PATCH_SIDE x PATCH_SIDE).
pub const PATCH_SIDE: usize = 4;

/// Dataset generation parameters (the `[data]` config section).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Number of identities (2..=8; colors are cube corners).
    pub identities: usize,
    /// Training clips per identity.
    pub train_clips: usize,
    /// Held-out clips per identity.
    pub eval_clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            identities: 8,
            train_clips: 8,
            eval_clips: 2,
            frames: 8,
            height: 16,
            width: 16,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 {
            return Err(SanmError::Config(
                "need at least 2 identities for contrastive pretraining".into(),
            ));
        }
        if self.identities > 8 {
            return Err(SanmError::Config(
                "the glyph palette supports at most 8 identities".into(),
            ));
        }
        if self.height < 8 || self.width < 8 {
            return Err(SanmError::Config(format!(
                "frames must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        if self.frames == 0 || self.train_clips == 0 {
            return Err(SanmError::Config(
                "frames and train_clips must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn clip_count(&self) -> usize {
        self.identities * (self.train_clips + self.eval_clips)
    }
}

/// One synthetic clip in memory.
#[derive(Clone, Debug)]
pub struct SyntheticClip {
    /// Per-frame pixels `[height*width, 3]`, raster order, values in [0,1]
    /// already rounded through `f32` so disk round-trips are bitwise.
    pub frames: Vec<NdTensor>,
    /// Per-frame glyph mask, one flag per pixel in raster order.
    pub masks: Vec<Vec<bool>>,
    pub identity_id: u32,
    /// `[r, g, b, shape_code]` — constant within a clip and across all
    /// clips of the same identity.
    pub identity_params: Vec<f64>,
    /// Per-frame glyph center in pixel coordinates.
    pub pose_track: Vec<(f64, f64)>,
    pub height: usize,
    pub width: usize,
}

impl SyntheticClip {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    /// Pose normalized to `[0,1]^2` for model conditioning.
    pub fn pose_normalized(&self) -> Vec<(f64, f64)> {
        self.pose_track
            .iter()
            .map(|&(x, y)| (x / self.width as f64, y / self.height as f64))
            .collect()
    }
}

/// The reference (conditioning) frame of a clip: frame zero.
pub fn reference_frame(clip: &SyntheticClip) -> Result<&NdTensor> {
    clip.frames
        .first()
        .ok_or_else(|| SanmError::Shape("clip has no frames".into()))
}

/// Serializable clip metadata (the JSON tail of an SCLP file).
#[derive(Serialize, Deserialize)]
struct ClipMeta {
    identity_id: u32,
    identity_params: Vec<f64>,
    pose_track: Vec<(f64, f64)>,
}

/// One manifest row.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClipEntry {
    pub file: String,
    pub identity_id: u32,
    /// "train" or "eval".
    pub split: String,
}

/// Dataset manifest: everything needed to reproduce or load the dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub identity_count: usize,
    pub clip_count: usize,
    pub frame_count: usize,
    pub height: usize,
    pub width: usize,
    pub config: DataConfig,
    pub clips: Vec<ClipEntry>,
}

// ---- glyph rendering ----

/// Glyph color for an identity: a corner of the RGB cube pulled toward the
/// middle, plus a small identity-specific jitter. Corners guarantee a
/// >= 0.2 margin between any two identities in at least one channel.
fn identity_color(identity: usize, rng: &mut SeededRng) -> [f64; 3] {
    let mut c = [0.0; 3];
    for (ch, v) in c.iter_mut().enumerate() {
        let bit = (identity >> ch) & 1;
        *v = 0.15 + 0.7 * bit as f64 + rng.uniform(-0.05, 0.05);
    }
    c
}

/// Offsets of the glyph pixels around an integer center. Both shapes cover
/// exactly 25 pixels, so mask areas have a closed form.
fn glyph_offsets(shape_code: usize) -> Vec<(i64, i64)> {
    let mut out = Vec::with_capacity(25);
    if shape_code == 0 {
        // 5x5 square.
        for dy in -2i64..=2 {
            for dx in -2i64..=2 {
                out.push((dx, dy));
            }
        }
    } else {
        // Diamond of radius 3: 1+3+5+7+5+3+1 = 25 pixels.
        for dy in -3i64..=3 {
            let half = 3 - dy.abs();
            for dx in -half..=half {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Margin the glyph center must keep from the border so the shape fits.
fn glyph_margin(shape_code: usize) -> f64 {
    if shape_code == 0 {
        2.0
    } else {
        3.0
    }
}

/// Smooth bounded pose track: per-frame displacement stays under 2 pixels
/// and the glyph always fits inside the frame.
fn pose_track(
    rng: &mut SeededRng,
    frames: usize,
    width: usize,
    height: usize,
    margin: f64,
) -> Vec<(f64, f64)> {
    let lo_x = margin;
    let hi_x = width as f64 - 1.0 - margin;
    let lo_y = margin;
    let hi_y = height as f64 - 1.0 - margin;
    let mut x = rng.uniform(lo_x, hi_x);
    let mut y = rng.uniform(lo_y, hi_y);
    let mut vx = rng.uniform(-1.0, 1.0);
    let mut vy = rng.uniform(-1.0, 1.0);
    let mut track = Vec::with_capacity(frames);
    track.push((x, y));
    for _ in 1..frames {
        vx = (0.7 * vx + rng.uniform(-0.6, 0.6)).clamp(-1.4, 1.4);
        vy = (0.7 * vy + rng.uniform(-0.6, 0.6)).clamp(-1.4, 1.4);
        x += vx;
        y += vy;
        if x < lo_x {
            x = lo_x;
            vx = vx.abs();
        }
        if x > hi_x {
            x = hi_x;
            vx = -vx.abs();
        }
        if y < lo_y {
            y = lo_y;
            vy = vy.abs();
        }
        if y > hi_y {
            y = hi_y;
            vy = -vy.abs();
        }
        track.push((x, y));
    }
    track
}

/// Render one clip from its dedicated RNG streams.
fn render_clip(
    cfg: &DataConfig,
    identity_id: usize,
    color: [f64; 3],
    shape_code: usize,
    clip_rng: &mut SeededRng,
) -> SyntheticClip {
    let (h, w) = (cfg.height, cfg.width);
    let n_px = h * w;

    // Identity-independent background: flat gray with a per-clip tint and
    // a static per-clip texture.
    let tint: Vec<f64> = (0..3).map(|_| clip_rng.uniform(-0.06, 0.06)).collect();
    let texture: Vec<f64> = (0..n_px * 3)
        .map(|_| clip_rng.uniform(-0.005, 0.005))
        .collect();

    let margin = glyph_margin(shape_code);
    let track = pose_track(clip_rng, cfg.frames, w, h, margin);
    let offsets = glyph_offsets(shape_code);

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut masks = Vec::with_capacity(cfg.frames);
    for &(cx, cy) in &track {
        let mut px = vec![0.0f64; n_px * 3];
        for i in 0..n_px {
            for c in 0..3 {
                px[i * 3 + c] = 0.5 + tint[c] + texture[i * 3 + c];
            }
        }
        let mut mask = vec![false; n_px];
        let icx = cx.round() as i64;
        let icy = cy.round() as i64;
        for &(dx, dy) in &offsets {
            let x = icx + dx;
            let y = icy + dy;
            if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                continue;
            }
            let i = y as usize * w + x as usize;
            mask[i] = true;
            px[i * 3..i * 3 + 3].copy_from_slice(&color);
        }
        // Round through f32 so in-memory tensors equal their disk image.
        let rounded: Vec<f64> = px
            .iter()
            .map(|&v| v.clamp(0.0, 1.0) as f32 as f64)
            .collect();
        frames.push(NdTensor::from_vec(&[n_px, 3], rounded).unwrap());
        masks.push(mask);
    }

    SyntheticClip {
        frames,
        masks,
        identity_id: identity_id as u32,
        identity_params: vec![color[0], color[1], color[2], shape_code as f64],
        pose_track: track,
        height: h,
        width: w,
    }
}

/// Deterministically generate one clip of a dataset. `clip_index` is the
/// global index in identity-major order (train clips then eval clips).
pub fn generate_clip(cfg: &DataConfig, seed: u64, clip_index: usize) -> Result<SyntheticClip> {
    cfg.validate()?;
    let per_identity = cfg.train_clips + cfg.eval_clips;
    if clip_index >= cfg.clip_count() {
        return Err(SanmError::Config(format!(
            "clip index {clip_index} out of range for {} clips",
            cfg.clip_count()
        )));
    }
    let identity = clip_index / per_identity;
    let master = SeededRng::new(seed);
    // Identity stream: color jitter shared by every clip of the identity.
    let mut id_rng = master.fork2(1, identity as u64);
    let color = identity_color(identity, &mut id_rng);
    let shape_code = identity % 2;
    // Clip stream: background, texture, pose.
    let mut clip_rng = master.fork2(2, clip_index as u64);
    Ok(render_clip(cfg, identity, color, shape_code, &mut clip_rng))
}

/// Generate the full dataset into `dir`: one SCLP file per clip plus a
/// manifest. Clips are sharded over `threads` workers; every clip comes
/// from its own RNG stream, so the output bytes never depend on the
/// thread count.
pub fn generate_dataset(
    cfg: &DataConfig,
    seed: u64,
    dir: &Path,
    threads: usize,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| SanmError::io(dir.to_path_buf(), e))?;

    let per_identity = cfg.train_clips + cfg.eval_clips;
    let total = cfg.clip_count();
    let entries: Vec<ClipEntry> = (0..total)
        .map(|g| {
            let identity = g / per_identity;
            let j = g % per_identity;
            let (split, k) = if j < cfg.train_clips {
                ("train", j)
            } else {
                ("eval", j - cfg.train_clips)
            };
            ClipEntry {
                file: format!("id{identity}_{split}{k}.sclp"),
                identity_id: identity as u32,
                split: split.to_string(),
            }
        })
        .collect();

    let failures: Mutex<Vec<SanmError>> = Mutex::new(Vec::new());
    let next = AtomicUsize::new(0);
    let workers = threads.max(1).min(total);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let g = next.fetch_add(1, Ordering::Relaxed);
                if g >= total {
                    break;
                }
                let result = generate_clip(cfg, seed, g)
                    .and_then(|clip| save_clip(&dir.join(&entries[g].file), &clip));
                if let Err(e) = result {
                    failures.lock().unwrap().push(e);
                    break;
                }
            });
        }
    });
    if let Some(e) = failures.into_inner().unwrap().into_iter().next() {
        return Err(e);
    }

    let manifest = DatasetManifest {
        format_version: CLIP_VERSION,
        seed,
        identity_count: cfg.identities,
        clip_count: total,
        frame_count: cfg.frames,
        height: cfg.height,
        width: cfg.width,
        config: cfg.clone(),
        clips: entries,
    };
    let path = dir.join(MANIFEST_NAME);
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| SanmError::Format(format!("manifest encode: {e}")))?;
    fs::write(&path, json).map_err(|e| SanmError::io(path, e))?;
    Ok(manifest)
}

/// Load a dataset manifest from its directory.
pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_NAME);
    let bytes = fs::read(&path).map_err(|e| SanmError::io(path.clone(), e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| SanmError::Format(format!("manifest {}: {e}", path.display())))
}

/// Load every clip of one split ("train" or "eval"), in manifest order.
pub fn load_split(dir: &Path, manifest: &DatasetManifest, split: &str) -> Result<Vec<SyntheticClip>> {
    manifest
        .clips
        .iter()
        .filter(|e| e.split == split)
        .map(|e| load_clip(&dir.join(&e.file)))
        .collect()
}

// ---- SCLP read/write ----

fn mask_bytes_per_frame(n_px: usize) -> usize {
    n_px.div_ceil(8)
}

/// Write a clip to disk in SCLP format.
pub fn save_clip(path: &Path, clip: &SyntheticClip) -> Result<()> {
    let n_px = clip.height * clip.width;
    if clip.frames.is_empty() {
        return Err(SanmError::Format("clip has no frames".into()));
    }
    if clip.masks.len() != clip.frames.len() || clip.pose_track.len() != clip.frames.len() {
        return Err(SanmError::Format(
            "frames, masks and pose track must have equal length".into(),
        ));
    }
    for f in &clip.frames {
        if f.shape() != [n_px, 3] {
            return Err(SanmError::Format(format!(
                "frame tensor must be [{n_px}, 3], got {:?}",
                f.shape()
            )));
        }
    }

    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CLIP_MAGIC);
    buf.extend_from_slice(&CLIP_VERSION.to_le_bytes());
    buf.extend_from_slice(&(clip.frames.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(clip.height as u32).to_le_bytes());
    buf.extend_from_slice(&(clip.width as u32).to_le_bytes());
    for f in &clip.frames {
        for &v in f.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for mask in &clip.masks {
        if mask.len() != n_px {
            return Err(SanmError::Format("mask length mismatch".into()));
        }
        let mut packed = vec![0u8; mask_bytes_per_frame(n_px)];
        for (i, &m) in mask.iter().enumerate() {
            if m {
                packed[i / 8] |= 1 << (i % 8);
            }
        }
        buf.extend_from_slice(&packed);
    }
    let meta = ClipMeta {
        identity_id: clip.identity_id,
        identity_params: clip.identity_params.clone(),
        pose_track: clip.pose_track.clone(),
    };
    let json = serde_json::to_vec(&meta)
        .map_err(|e| SanmError::Format(format!("clip metadata encode: {e}")))?;
    buf.extend_from_slice(&json);

    let mut file = fs::File::create(path).map_err(|e| SanmError::io(path.to_path_buf(), e))?;
    file.write_all(&buf)
        .map_err(|e| SanmError::io(path.to_path_buf(), e))?;
    Ok(())
}

fn read_exact_or(
    r: &mut impl Read,
    buf: &mut [u8],
    path: &Path,
    what: &str,
) -> Result<()> {
    r.read_exact(buf).map_err(|_| {
        SanmError::Format(format!(
            "{}: truncated file while reading {what}",
            path.display()
        ))
    })
}

/// Read a clip from disk, validating magic, version and sizes.
pub fn load_clip(path: &Path) -> Result<SyntheticClip> {
    let mut file = fs::File::open(path).map_err(|e| SanmError::io(path.to_path_buf(), e))?;

    let mut magic = [0u8; 4];
    read_exact_or(&mut file, &mut magic, path, "magic")?;
    if &magic != CLIP_MAGIC {
        return Err(SanmError::Format(format!(
            "{}: bad magic {:?} (not an SCLP clip)",
            path.display(),
            magic
        )));
    }
    let mut u32buf = [0u8; 4];
    read_exact_or(&mut file, &mut u32buf, path, "version")?;
    let version = u32::from_le_bytes(u32buf);
    if version != CLIP_VERSION {
        return Err(SanmError::Format(format!(
            "{}: unsupported clip version {version} (expected {CLIP_VERSION})",
            path.display()
        )));
    }
    read_exact_or(&mut file, &mut u32buf, path, "frame count")?;
    let frame_count = u32::from_le_bytes(u32buf) as usize;
    read_exact_or(&mut file, &mut u32buf, path, "height")?;
    let height = u32::from_le_bytes(u32buf) as usize;
    read_exact_or(&mut file, &mut u32buf, path, "width")?;
    let width = u32::from_le_bytes(u32buf) as usize;
    if frame_count == 0 || height == 0 || width == 0 {
        return Err(SanmError::Format(format!(
            "{}: degenerate dims {frame_count}x{height}x{width}",
            path.display()
        )));
    }
    let n_px = height * width;

    let mut frames = Vec::with_capacity(frame_count);
    let mut fbuf = vec![0u8; n_px * 3 * 4];
    for _ in 0..frame_count {
        read_exact_or(&mut file, &mut fbuf, path, "frame pixels")?;
        let vals: Vec<f64> = fbuf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        frames.push(NdTensor::from_vec(&[n_px, 3], vals)?);
    }

    let mut masks = Vec::with_capacity(frame_count);
    let mut mbuf = vec![0u8; mask_bytes_per_frame(n_px)];
    for _ in 0..frame_count {
        read_exact_or(&mut file, &mut mbuf, path, "mask bits")?;
        let mask: Vec<bool> = (0..n_px).map(|i| mbuf[i / 8] >> (i % 8) & 1 == 1).collect();
        masks.push(mask);
    }

    let mut tail = Vec::new();
    file.read_to_end(&mut tail)
        .map_err(|e| SanmError::io(path.to_path_buf(), e))?;
    let meta: ClipMeta = serde_json::from_slice(&tail).map_err(|e| {
        SanmError::Format(format!("{}: bad clip metadata: {e}", path.display()))
    })?;
    if meta.pose_track.len() != frame_count {
        return Err(SanmError::Format(format!(
            "{}: pose track length {} does not match {frame_count} frames",
            path.display(),
            meta.pose_track.len()
        )));
    }

    Ok(SyntheticClip {
        frames,
        masks,
        identity_id: meta.identity_id,
        identity_params: meta.identity_params,
        pose_track: meta.pose_track,
        height,
        width,
    })
}

// ---- patch layout ----

/// Rearrange a raster frame `[h*w, 3]` into flattened patch rows
/// `[patches, PATCH_SIDE*PATCH_SIDE*3]`, patches in row-major grid order.
pub fn patchify(frame: &NdTensor, height: usize, width: usize) -> Result<NdTensor> {
    if height % PATCH_SIDE != 0 || width % PATCH_SIDE != 0 {
        return Err(SanmError::Shape(format!(
            "frame dims {height}x{width} must be multiples of {PATCH_SIDE}"
        )));
    }
    if frame.shape() != [height * width, 3] {
        return Err(SanmError::Shape(format!(
            "frame must be [{}, 3], got {:?}",
            height * width,
            frame.shape()
        )));
    }
    let gh = height / PATCH_SIDE;
    let gw = width / PATCH_SIDE;
    let pdim = PATCH_SIDE * PATCH_SIDE * 3;
    let src = frame.data();
    let mut out = vec![0.0; gh * gw * pdim];
    for py in 0..gh {
        for px in 0..gw {
            let p = py * gw + px;
            for iy in 0..PATCH_SIDE {
                for ix in 0..PATCH_SIDE {
                    let pixel = (py * PATCH_SIDE + iy) * width + px * PATCH_SIDE + ix;
                    let dst = p * pdim + (iy * PATCH_SIDE + ix) * 3;
                    out[dst..dst + 3].copy_from_slice(&src[pixel * 3..pixel * 3 + 3]);
                }
            }
        }
    }
    NdTensor::from_vec(&[gh * gw, pdim], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &NdTensor, height: usize, width: usize) -> Result<NdTensor> {
    if height % PATCH_SIDE != 0 || width % PATCH_SIDE != 0 {
        return Err(SanmError::Shape(format!(
            "frame dims {height}x{width} must be multiples of {PATCH_SIDE}"
        )));
    }
    let gh = height / PATCH_SIDE;
    let gw = width / PATCH_SIDE;
    let pdim = PATCH_SIDE * PATCH_SIDE * 3;
    if patches.shape() != [gh * gw, pdim] {
        return Err(SanmError::Shape(format!(
            "patches must be [{}, {pdim}], got {:?}",
            gh * gw,
            patches.shape()
        )));
    }
    let src = patches.data();
    let mut out = vec![0.0; height * width * 3];
    for py in 0..gh {
        for px in 0..gw {
            let p = py * gw + px;
            for iy in 0..PATCH_SIDE {
                for ix in 0..PATCH_SIDE {
                    let pixel = (py * PATCH_SIDE + iy) * width + px * PATCH_SIDE + ix;
                    let srcoff = p * pdim + (iy * PATCH_SIDE + ix) * 3;
                    out[pixel * 3..pixel * 3 + 3].copy_from_slice(&src[srcoff..srcoff + 3]);
                }
            }
        }
    }
    NdTensor::from_vec(&[height * width, 3], out)
}

/// Downsample a pixel mask to patch tokens. Each pixel belongs to exactly
/// one patch; a token is set when at least half of its pixels are, so the
/// result stays a clean 0/1 mask instead of a soft coverage map.
pub fn mask_to_tokens(mask: &[bool], height: usize, width: usize) -> Result<Vec<bool>> {
    if height % PATCH_SIDE != 0 || width % PATCH_SIDE != 0 {
        return Err(SanmError::Shape(format!(
            "frame dims {height}x{width} must be multiples of {PATCH_SIDE}"
        )));
    }
    if mask.len() != height * width {
        return Err(SanmError::Shape(format!(
            "mask length {} does not match {height}x{width}",
            mask.len()
        )));
    }
    let gh = height / PATCH_SIDE;
    let gw = width / PATCH_SIDE;
    let mut counts = vec![0usize; gh * gw];
    for (i, &m) in mask.iter().enumerate() {
        if m {
            let y = i / width;
            let x = i % width;
            counts[(y / PATCH_SIDE) * gw + x / PATCH_SIDE] += 1;
        }
    }
    let half = PATCH_SIDE * PATCH_SIDE / 2;
    Ok(counts.into_iter().map(|c| c >= half).collect())
}

/// Expand a token mask into a `[tokens, latent_dim]` 0/1 tensor.
pub fn token_mask_tensor(tokens: &[bool], latent_dim: usize) -> NdTensor {
    NdTensor::from_fn(&[tokens.len(), latent_dim], |i| {
        if tokens[i / latent_dim] {
            1.0
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn small_cfg() -> DataConfig {
        DataConfig {
            identities: 2,
            train_clips: 2,
            eval_clips: 1,
            frames: 4,
            height: 16,
            width: 16,
        }
    }

    #[test]
    fn clip_round_trip_is_bitwise() {
        let dir = tempdir().unwrap();
        let clip = generate_clip(&small_cfg(), 7, 0).unwrap();
        let path = dir.path().join("c.sclp");
        save_clip(&path, &clip).unwrap();
        let back = load_clip(&path).unwrap();
        assert_eq!(back.identity_id, clip.identity_id);
        assert_eq!(back.identity_params, clip.identity_params);
        assert_eq!(back.pose_track, clip.pose_track);
        for (a, b) in clip.frames.iter().zip(back.frames.iter()) {
            assert_eq!(a.data(), b.data(), "pixels round-trip exactly");
        }
        assert_eq!(clip.masks, back.masks);

        // Save the loaded clip again: identical bytes.
        let path2 = dir.path().join("c2.sclp");
        save_clip(&path2, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupted_headers_give_distinct_errors() {
        let dir = tempdir().unwrap();
        let clip = generate_clip(&small_cfg(), 7, 0).unwrap();
        let path = dir.path().join("c.sclp");
        save_clip(&path, &clip).unwrap();
        let bytes = fs::read(&path).unwrap();

        let bad_magic = dir.path().join("bad_magic.sclp");
        let mut b = bytes.clone();
        b[0] = b'X';
        fs::write(&bad_magic, &b).unwrap();
        let err = load_clip(&bad_magic).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");

        let bad_version = dir.path().join("bad_version.sclp");
        let mut b = bytes.clone();
        b[4] = 99;
        fs::write(&bad_version, &b).unwrap();
        let err = load_clip(&bad_version).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");

        let truncated = dir.path().join("trunc.sclp");
        fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_clip(&truncated).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn mask_packing_uses_32_bytes_per_16x16_frame() {
        assert_eq!(mask_bytes_per_frame(16 * 16), 32);
        // Whole-file arithmetic: header 20 bytes, then pixels, then masks.
        let cfg = small_cfg();
        let clip = generate_clip(&cfg, 3, 1).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.sclp");
        save_clip(&path, &clip).unwrap();
        let len = fs::read(&path).unwrap().len();
        let pixels = cfg.frames * 256 * 3 * 4;
        let masks = cfg.frames * 32;
        assert!(len > 20 + pixels + masks, "metadata follows the masks");
    }

    #[test]
    fn same_seed_reproduces_identical_dataset_bytes() {
        let cfg = small_cfg();
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        generate_dataset(&cfg, 42, d1.path(), 1).unwrap();
        generate_dataset(&cfg, 42, d2.path(), 3).unwrap();
        let mut names: Vec<String> = fs::read_dir(d1.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(names.len(), cfg.clip_count() + 1, "clips plus manifest");
        for n in &names {
            let a = fs::read(d1.path().join(n)).unwrap();
            let b = fs::read(d2.path().join(n)).unwrap();
            assert_eq!(a, b, "{n} differs between runs");
        }
    }

    #[test]
    fn dataset_counts_and_manifest_bookkeeping() {
        let cfg = DataConfig {
            identities: 2,
            train_clips: 6,
            eval_clips: 2,
            ..small_cfg()
        };
        let dir = tempdir().unwrap();
        let manifest = generate_dataset(&cfg, 5, dir.path(), 2).unwrap();
        assert_eq!(manifest.clip_count, 16);
        assert_eq!(manifest.identity_count, 2);
        assert_eq!(manifest.clips.len(), 16);
        let loaded = load_manifest(dir.path()).unwrap();
        assert_eq!(loaded.clip_count, manifest.clip_count);
        assert_eq!(loaded.seed, 5);
        let train = load_split(dir.path(), &loaded, "train").unwrap();
        let eval = load_split(dir.path(), &loaded, "eval").unwrap();
        assert_eq!(train.len(), 12);
        assert_eq!(eval.len(), 4);
    }

    #[test]
    fn mask_area_matches_glyph_geometry_exactly() {
        let cfg = DataConfig {
            identities: 4,
            ..small_cfg()
        };
        for clip_index in 0..8 {
            let clip = generate_clip(&cfg, 11, clip_index).unwrap();
            for mask in &clip.masks {
                let area = mask.iter().filter(|&&m| m).count();
                assert_eq!(area, 25, "both glyph shapes cover 25 pixels");
            }
        }
    }

    #[test]
    fn glyph_pixels_carry_the_identity_color() {
        let clip = generate_clip(&small_cfg(), 13, 0).unwrap();
        let color = &clip.identity_params[..3];
        for (f, mask) in clip.frames.iter().zip(clip.masks.iter()) {
            for (i, &m) in mask.iter().enumerate() {
                if m {
                    for c in 0..3 {
                        let expect = color[c].clamp(0.0, 1.0) as f32 as f64;
                        assert!((f.data()[i * 3 + c] - expect).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn identities_are_separable_and_params_constant_per_identity() {
        let cfg = DataConfig {
            identities: 8,
            train_clips: 2,
            eval_clips: 0,
            ..small_cfg()
        };
        let mut params: Vec<Vec<f64>> = Vec::new();
        for identity in 0..8 {
            let a = generate_clip(&cfg, 21, identity * 2).unwrap();
            let b = generate_clip(&cfg, 21, identity * 2 + 1).unwrap();
            assert_eq!(a.identity_params, b.identity_params);
            params.push(a.identity_params.clone());
        }
        for i in 0..8 {
            for j in (i + 1)..8 {
                let max_gap = params[i]
                    .iter()
                    .zip(params[j].iter())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                assert!(
                    max_gap >= 0.2,
                    "identities {i} and {j} only {max_gap} apart"
                );
            }
        }
    }

    #[test]
    fn pose_tracks_are_smooth_and_in_bounds() {
        let cfg = DataConfig {
            identities: 4,
            frames: 16,
            ..small_cfg()
        };
        for clip_index in 0..12 {
            let clip = generate_clip(&cfg, 31, clip_index).unwrap();
            for w in clip.pose_track.windows(2) {
                let (x0, y0) = w[0];
                let (x1, y1) = w[1];
                let d = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
                assert!(d <= 2.0, "displacement {d} exceeds 2 pixels");
            }
            for &(x, y) in &clip.pose_track {
                assert!(x >= 0.0 && x <= 15.0 && y >= 0.0 && y <= 15.0);
            }
        }
    }

    #[test]
    fn reference_frame_is_frame_zero() {
        let clip = generate_clip(&small_cfg(), 17, 2).unwrap();
        let r = reference_frame(&clip).unwrap();
        assert_eq!(r.data(), clip.frames[0].data());
        let empty = SyntheticClip {
            frames: vec![],
            masks: vec![],
            identity_id: 0,
            identity_params: vec![],
            pose_track: vec![],
            height: 16,
            width: 16,
        };
        assert!(reference_frame(&empty).is_err());
    }

    #[test]
    fn patchify_round_trips_and_orders_pixels_patch_major() {
        let mut rng = SeededRng::new(19);
        let frame = rng.gaussian_tensor(&[256, 3], 1.0).unwrap();
        let patches = patchify(&frame, 16, 16).unwrap();
        assert_eq!(patches.shape(), &[16, 48]);
        let back = unpatchify(&patches, 16, 16).unwrap();
        assert_eq!(back.data(), frame.data());
        // First patch row starts with pixel (0,0) and then pixel (0,1).
        assert_eq!(patches.data()[0..3], frame.data()[0..3]);
        assert_eq!(patches.data()[3..6], frame.data()[3..6]);
        // Second patch starts at pixel (0,4).
        assert_eq!(patches.data()[48..51], frame.data()[12..15]);
    }

    #[test]
    fn token_masks_follow_the_majority_rule() {
        // A lone pixel is far below half coverage: no token fires.
        let mut mask = vec![false; 256];
        mask[0] = true;
        let tokens = mask_to_tokens(&mask, 16, 16).unwrap();
        assert!(tokens.iter().all(|&t| !t));

        // Exactly half of patch (row 1, col 2): the token fires; 7 of 16
        // pixels in patch 0 stay below the threshold.
        let mut mask = vec![false; 256];
        for k in 0..8 {
            let (py, px) = (4 + k / 4, 8 + k % 4);
            mask[py * 16 + px] = true;
        }
        for k in 0..7 {
            mask[(k / 4) * 16 + k % 4] = true;
        }
        let tokens = mask_to_tokens(&mask, 16, 16).unwrap();
        let on: Vec<usize> = tokens
            .iter()
            .enumerate()
            .filter_map(|(i, &t)| t.then_some(i))
            .collect();
        assert_eq!(on, vec![6]);
        let t = token_mask_tensor(&tokens, 8);
        assert_eq!(t.shape(), &[16, 8]);
        assert_eq!(t.data()[6 * 8 + 3], 1.0);
        assert_eq!(t.data()[0], 0.0);
    }

    #[test]
    fn every_frame_keeps_at_least_one_masked_token() {
        // Both glyph shapes, at every possible sub-patch phase, concentrate
        // at least half a patch somewhere, so the latent mask never goes
        // empty. Checked over every clip of a full toy dataset.
        let cfg = DataConfig {
            identities: 8,
            train_clips: 2,
            eval_clips: 1,
            ..small_cfg()
        };
        for clip_idx in 0..cfg.clip_count() {
            let clip = generate_clip(&cfg, 99, clip_idx).unwrap();
            for mask in &clip.masks {
                let tokens = mask_to_tokens(mask, clip.height, clip.width).unwrap();
                assert!(
                    tokens.iter().any(|&t| t),
                    "clip {clip_idx} produced an empty token mask"
                );
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = small_cfg();
        cfg.identities = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.identities = 9;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.height = 7;
        assert!(cfg.validate().is_err());
    }
}
