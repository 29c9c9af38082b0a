//! Evaluation metrics and the ablation report.
//!
//! Frame-quality measures (L1, PSNR, global-statistics SSIM) compare pixel
//! tensors directly; identity similarity (`csim`) compares face embeddings of
//! generated frames against the reference frame's embedding. [`EvalReport`]
//! collects per-clip and aggregate scores for one model variant, and
//! [`run_ablation`] evaluates several variants side by side, emitting an
//! aligned text table plus a machine-readable `key=value` dump.
//!
//! PSNR assumes pixel values in `[0, 1]` (peak signal 1). SSIM is computed
//! from whole-image statistics rather than a sliding window: the frames here
//! are far smaller than the usual 11x11 Gaussian window, so a global window
//! is the only size that fits.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, SanmError};
use crate::models::{cosine, IdentityEmbedder};
use crate::numerics::tensor::NdTensor;

/// PSNR value reported when the mean squared error is numerically zero.
pub const PSNR_CAP_DB: f64 = 100.0;
/// MSE below this is treated as exact equality for the PSNR cap.
pub const PSNR_MSE_FLOOR: f64 = 1e-10;
/// SSIM stabilizers for unit dynamic range: (K1*L)^2 and (K2*L)^2 with
/// K1=0.01, K2=0.03, L=1.
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

fn check_same_shape(a: &NdTensor, b: &NdTensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(SanmError::Shape(format!(
            "metric operands have different shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_metric(a: &NdTensor, b: &NdTensor) -> Result<f64> {
    check_same_shape(a, b)?;
    let n = a.numel().max(1) as f64;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum();
    Ok(sum / n)
}

/// Mean squared difference (helper shared by PSNR and tests).
pub fn mse_metric(a: &NdTensor, b: &NdTensor) -> Result<f64> {
    check_same_shape(a, b)?;
    let n = a.numel().max(1) as f64;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / n)
}

/// Peak signal-to-noise ratio in dB for unit-range pixels:
/// `10*log10(1/MSE)`, capped at [`PSNR_CAP_DB`] for (near-)identical inputs.
pub fn psnr_metric(a: &NdTensor, b: &NdTensor) -> Result<f64> {
    let mse = mse_metric(a, b)?;
    if mse < PSNR_MSE_FLOOR {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Structural similarity from whole-image statistics.
///
/// Uses population moments and the standard two-factor form
/// `((2*mu_a*mu_b + C1) * (2*cov + C2)) / ((mu_a^2 + mu_b^2 + C1) *
/// (var_a + var_b + C2))`. The additive constants keep both denominators
/// strictly positive, so constant (zero-variance) images are handled without
/// special cases and the result always lies in `[-1, 1]`.
pub fn ssim_metric(a: &NdTensor, b: &NdTensor) -> Result<f64> {
    check_same_shape(a, b)?;
    let n = a.numel().max(1) as f64;
    let mu_a: f64 = a.data().iter().sum::<f64>() / n;
    let mu_b: f64 = b.data().iter().sum::<f64>() / n;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    let mut cov = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        let dx = x - mu_a;
        let dy = y - mu_b;
        var_a += dx * dx;
        var_b += dy * dy;
        cov += dx * dy;
    }
    var_a /= n;
    var_b /= n;
    cov /= n;
    let num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2);
    let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
    Ok(num / den)
}

/// Mean cosine similarity between per-frame embeddings and a reference
/// embedding. The low-level form lets tests drive it with hand-built
/// embeddings; [`csim_metric`] wires in the embedder.
pub fn mean_cosine(frame_embeddings: &[NdTensor], reference: &NdTensor) -> Result<f64> {
    if frame_embeddings.is_empty() {
        return Err(SanmError::Shape(
            "csim needs at least one frame embedding".into(),
        ));
    }
    let mut total = 0.0;
    for e in frame_embeddings {
        total += cosine(e, reference)?;
    }
    Ok(total / frame_embeddings.len() as f64)
}

/// Identity similarity of generated frames to a reference frame: the mean
/// over frames of the cosine between face embeddings.
pub fn csim_metric(
    frames: &[NdTensor],
    reference: &NdTensor,
    embedder: &IdentityEmbedder,
) -> Result<f64> {
    let ref_emb = embedder.embed(reference)?;
    let mut embs = Vec::with_capacity(frames.len());
    for f in frames {
        embs.push(embedder.embed(f)?);
    }
    mean_cosine(&embs, &ref_emb)
}

/// Outcome of a one-sided paired sign test of "a tends to exceed b".
#[derive(Clone, Copy, Debug)]
pub struct SignTest {
    /// Pairs with `a > b`.
    pub wins: usize,
    /// Pairs with `a < b`.
    pub losses: usize,
    /// Pairs with `a == b` (dropped from the test).
    pub ties: usize,
    /// One-sided p-value: probability of at least `wins` successes in
    /// `wins + losses` fair coin flips.
    pub p_value: f64,
}

/// Exact one-sided binomial sign test on paired samples.
pub fn paired_sign_test(a: &[f64], b: &[f64]) -> Result<SignTest> {
    if a.len() != b.len() {
        return Err(SanmError::Shape(format!(
            "sign test needs equal-length samples, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut wins = 0usize;
    let mut losses = 0usize;
    let mut ties = 0usize;
    for (x, y) in a.iter().zip(b) {
        if x > y {
            wins += 1;
        } else if x < y {
            losses += 1;
        } else {
            ties += 1;
        }
    }
    let n = wins + losses;
    let p_value = if n == 0 {
        1.0
    } else {
        // Tail sum of Binomial(n, 1/2) from `wins` upward, built from the
        // recurrence C(n,k+1) = C(n,k)*(n-k)/(k+1) to stay exact in f64 for
        // the small n used here.
        let mut coef = 1.0f64;
        let mut tail = 0.0f64;
        for k in 0..=n {
            if k >= wins {
                tail += coef;
            }
            coef = coef * (n - k) as f64 / (k + 1) as f64;
        }
        tail / 2f64.powi(n as i32)
    };
    Ok(SignTest {
        wins,
        losses,
        ties,
        p_value,
    })
}

/// Scores for one evaluated clip.
#[derive(Clone, Debug)]
pub struct ClipScores {
    /// Stable label for the clip (e.g. its file stem).
    pub clip: String,
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub csim: f64,
}

/// Per-variant evaluation summary: per-clip scores plus their means.
#[derive(Clone, Debug)]
pub struct EvalReport {
    /// Variant label, e.g. "full", "no-optimization", "addition", "norm".
    pub variant: String,
    /// Echo of the configuration the evaluation ran under.
    pub config_echo: String,
    pub clips: Vec<ClipScores>,
    pub mean_l1: f64,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_csim: f64,
}

impl EvalReport {
    /// Aggregate per-clip scores into a report. Aggregates are plain means.
    pub fn from_clips(
        variant: impl Into<String>,
        config_echo: impl Into<String>,
        clips: Vec<ClipScores>,
    ) -> Result<EvalReport> {
        if clips.is_empty() {
            return Err(SanmError::Config(
                "evaluation produced no clips; cannot aggregate".into(),
            ));
        }
        let n = clips.len() as f64;
        let mut sums = [0.0f64; 4];
        for c in &clips {
            sums[0] += c.l1;
            sums[1] += c.psnr;
            sums[2] += c.ssim;
            sums[3] += c.csim;
        }
        Ok(EvalReport {
            variant: variant.into(),
            config_echo: config_echo.into(),
            clips,
            mean_l1: sums[0] / n,
            mean_psnr: sums[1] / n,
            mean_ssim: sums[2] / n,
            mean_csim: sums[3] / n,
        })
    }

    pub fn clip_count(&self) -> usize {
        self.clips.len()
    }

    /// Machine-readable dump: one `key=value` per line. Floats use Rust's
    /// shortest round-trip formatting, so parsing the file recovers the
    /// exact values.
    pub fn key_values(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "variant={}", self.variant);
        let _ = writeln!(out, "clip_count={}", self.clip_count());
        let _ = writeln!(out, "mean_l1={}", self.mean_l1);
        let _ = writeln!(out, "mean_psnr={}", self.mean_psnr);
        let _ = writeln!(out, "mean_ssim={}", self.mean_ssim);
        let _ = writeln!(out, "mean_csim={}", self.mean_csim);
        for c in &self.clips {
            let _ = writeln!(out, "clip.{}.l1={}", c.clip, c.l1);
            let _ = writeln!(out, "clip.{}.psnr={}", c.clip, c.psnr);
            let _ = writeln!(out, "clip.{}.ssim={}", c.clip, c.ssim);
            let _ = writeln!(out, "clip.{}.csim={}", c.clip, c.csim);
        }
        out
    }
}

/// Render several variant reports as one aligned text table.
pub fn report_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let label_w = reports
        .iter()
        .map(|r| r.variant.len())
        .chain(["variant".len()])
        .max()
        .unwrap_or(7);
    let _ = writeln!(
        out,
        "{:<label_w$}  {:>5}  {:>10}  {:>10}  {:>10}  {:>10}",
        "variant", "clips", "l1", "psnr", "ssim", "csim"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<label_w$}  {:>5}  {:>10.6}  {:>10.4}  {:>10.6}  {:>10.6}",
            r.variant,
            r.clip_count(),
            r.mean_l1,
            r.mean_psnr,
            r.mean_ssim,
            r.mean_csim
        );
    }
    out
}

/// One ablation variant: a label plus the checkpoint it evaluates.
#[derive(Clone, Debug)]
pub struct VariantSpec {
    pub label: String,
    pub checkpoint: std::path::PathBuf,
}

impl VariantSpec {
    pub fn new(label: impl Into<String>, checkpoint: impl Into<std::path::PathBuf>) -> Self {
        VariantSpec {
            label: label.into(),
            checkpoint: checkpoint.into(),
        }
    }
}

/// Evaluate a list of ablation variants with a caller-supplied evaluator
/// (the CLI passes the sample-then-score pipeline). Validates the variant
/// list and checkpoint existence up front so a misnamed variant fails with
/// its label before any expensive sampling runs.
pub fn run_ablation<F>(variants: &[VariantSpec], mut evaluate: F) -> Result<Vec<EvalReport>>
where
    F: FnMut(&VariantSpec) -> Result<EvalReport>,
{
    if variants.is_empty() {
        return Err(SanmError::Config(
            "ablation needs at least one variant".into(),
        ));
    }
    for v in variants {
        if !Path::new(&v.checkpoint).is_file() {
            return Err(SanmError::Format(format!(
                "variant '{}': checkpoint {} is missing",
                v.label,
                v.checkpoint.display()
            )));
        }
    }
    let mut reports = Vec::with_capacity(variants.len());
    for v in variants {
        let mut report = evaluate(v)?;
        report.variant = v.label.clone();
        reports.push(report);
    }
    Ok(reports)
}
