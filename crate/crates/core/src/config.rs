//! Run configuration: one TOML file with sections `[data]`, `[model]`,
//! `[schedule]`, `[guidance]`, `[train]`, and `[eval]`. Every key has a
//! default, so the empty file is a valid config; unknown keys are rejected
//! with the offending key named. The merged ("effective") config can be
//! echoed into an output directory so any run can be reproduced from its
//! artifacts alone.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DataConfig, PATCH_SIDE};
use crate::error::{Result, SanmError};
use crate::models::ModelDims;
use crate::sampler::GuidanceConfig;
use crate::schedule::{ChurnParams, NoiseSchedule};
use crate::training::{CodecPretrainConfig, EmbedderPretrainConfig, TrainParams};

/// File name used when echoing the effective config into an output
/// directory.
pub const CONFIG_ECHO_NAME: &str = "effective_config.toml";

/// Noise-grid and churn keys for the sampler.
///
/// Defaults follow the usual diffusion-sampler conventions (`sigma_min
/// 0.02`, `sigma_max 80`, `rho 7`) with churn off, which makes sampling
/// deterministic given the initial noise. A stochastic profile like
/// `s_churn 40, s_tmin 0.05, s_tmax 50, s_noise 1.003` can be set here;
/// these are tuning choices, not calibrated constants.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    /// Smallest positive noise level of the grid. Default 0.02.
    pub sigma_min: f64,
    /// Largest noise level (where sampling starts). Default 80.
    pub sigma_max: f64,
    /// Grid curvature; larger bunches levels near `sigma_min`. Default 7.
    pub rho: f64,
    /// Sampler step count; the grid has `steps + 1` levels ending at 0.
    /// Default 16.
    pub steps: usize,
    /// Total churn budget, spread over the run. Default 0 (off).
    pub s_churn: f64,
    /// Churn window lower edge. Default 0.
    pub s_tmin: f64,
    /// Churn window upper edge. Default +inf.
    pub s_tmax: f64,
    /// Scale on the churn noise draw. Default 1.
    pub s_noise: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            sigma_min: 0.02,
            sigma_max: 80.0,
            rho: 7.0,
            steps: 16,
            s_churn: 0.0,
            s_tmin: 0.0,
            s_tmax: f64::INFINITY,
            s_noise: 1.0,
        }
    }
}

impl ScheduleSection {
    /// The noise grid these keys describe.
    pub fn grid(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.sigma_min, self.sigma_max, self.rho)
    }

    /// The churn parameters these keys describe.
    pub fn churn(&self) -> ChurnParams {
        ChurnParams {
            s_churn: self.s_churn,
            s_tmin: self.s_tmin,
            s_tmax: self.s_tmax,
            s_noise: self.s_noise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        self.churn().validate()?;
        if self.steps == 0 {
            return Err(SanmError::Config(
                "schedule.steps must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Denoiser-training keys plus the two pretraining subtables
/// (`[train.codec]` and `[train.embedder]`).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Denoiser training epochs. Default 60.
    pub epochs: usize,
    /// Adam learning rate. Default 3e-3.
    pub lr: f64,
    /// Smallest training noise level. Default 0.02.
    pub sigma_min: f64,
    /// Largest training noise level. Default 10.
    pub sigma_max: f64,
    /// Pixel-codec pretraining keys.
    pub codec: CodecPretrainConfig,
    /// Identity-embedder pretraining keys.
    pub embedder: EmbedderPretrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let p = TrainParams::default();
        TrainSection {
            epochs: p.epochs,
            lr: p.lr,
            sigma_min: p.sigma_min,
            sigma_max: p.sigma_max,
            codec: CodecPretrainConfig::default(),
            embedder: EmbedderPretrainConfig::default(),
        }
    }
}

impl TrainSection {
    /// The denoiser-loop parameters these keys describe.
    pub fn params(&self) -> TrainParams {
        TrainParams {
            epochs: self.epochs,
            lr: self.lr,
            sigma_min: self.sigma_min,
            sigma_max: self.sigma_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params().validate()?;
        self.codec.validate()?;
        self.embedder.validate()?;
        Ok(())
    }
}

/// Evaluation keys.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Seed for the evaluation-time sampling noise. Default 7.
    pub seed: u64,
    /// Cap on eval clips scored per variant; 0 means the whole split.
    /// Default 0.
    pub max_clips: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            seed: 7,
            max_clips: 0,
        }
    }
}

/// The whole run configuration. `RunConfig::default()` is the documented
/// default for every key; a TOML file overrides only what it names.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelDims,
    pub schedule: ScheduleSection,
    pub guidance: GuidanceConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Parse and validate a config from TOML text. Unknown keys fail with
    /// the key named in the message.
    pub fn parse_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| SanmError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a config file, or the built-in defaults when `path` is `None`.
    pub fn load_opt(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            None => {
                let cfg = RunConfig::default();
                cfg.validate()?;
                Ok(cfg)
            }
            Some(p) => Self::load(p),
        }
    }

    /// Load and validate a TOML config file.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text =
            fs::read_to_string(path).map_err(|e| SanmError::io(path.to_path_buf(), e))?;
        Self::parse_str(&text)
            .map_err(|e| SanmError::Config(format!("{}: {e}", path.display())))
    }

    /// Validate every section and the couplings between them: the model's
    /// clip geometry has to match the data it will train on.
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.schedule.validate()?;
        self.guidance.validate()?;
        self.train.validate()?;
        if self.model.frames != self.data.frames {
            return Err(SanmError::Config(format!(
                "model.frames ({}) must equal data.frames ({})",
                self.model.frames, self.data.frames
            )));
        }
        let tokens = (self.data.height / PATCH_SIDE) * (self.data.width / PATCH_SIDE);
        if self.model.tokens != tokens {
            return Err(SanmError::Config(format!(
                "model.tokens ({}) must equal the patch count {} of {}x{} frames",
                self.model.tokens, tokens, self.data.height, self.data.width
            )));
        }
        Ok(())
    }

    /// Serialize the effective config (defaults merged with overrides).
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| SanmError::Format(format!("config encode: {e}")))
    }

    /// Write the effective config into `out_dir` and return the file path.
    pub fn echo_into(&self, out_dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(out_dir).map_err(|e| SanmError::io(out_dir.to_path_buf(), e))?;
        let path = out_dir.join(CONFIG_ECHO_NAME);
        fs::write(&path, self.to_toml()?).map_err(|e| SanmError::io(path.clone(), e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_parses_to_documented_defaults() {
        let cfg = RunConfig::parse_str("").unwrap();
        assert_eq!(cfg.data.identities, 8);
        assert_eq!(cfg.model.model_dim, 32);
        assert_eq!(cfg.schedule.steps, 16);
        assert_eq!(cfg.schedule.sigma_max, 80.0);
        assert!(cfg.guidance.enabled);
        assert_eq!(cfg.train.epochs, 60);
        assert_eq!(cfg.train.codec.hidden, 96);
        assert_eq!(cfg.eval.seed, 7);
    }

    #[test]
    fn toml_round_trip_preserves_every_key() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::parse_str(&text).unwrap();
        assert_eq!(text, back.to_toml().unwrap());
        // Infinity must survive the trip (guidance.active_max, schedule.s_tmax).
        assert!(back.guidance.active_max.is_infinite());
        assert!(back.schedule.s_tmax.is_infinite());
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = RunConfig::parse_str("[schedule]\nsgima_min = 0.5\n").unwrap_err();
        assert!(err.to_string().contains("sgima_min"), "{err}");
        let err = RunConfig::parse_str("[wat]\nx = 1\n").unwrap_err();
        assert!(err.to_string().contains("wat"), "{err}");
        let err = RunConfig::parse_str("[train.codec]\nhiden = 3\n").unwrap_err();
        assert!(err.to_string().contains("hiden"), "{err}");
    }

    #[test]
    fn partial_overrides_keep_other_defaults() {
        let cfg = RunConfig::parse_str(
            "[train]\nepochs = 3\n\n[train.codec]\nhidden = 32\n\n[eval]\nmax_clips = 5\n",
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr, TrainParams::default().lr);
        assert_eq!(cfg.train.codec.hidden, 32);
        assert_eq!(cfg.train.codec.epochs, CodecPretrainConfig::default().epochs);
        assert_eq!(cfg.eval.max_clips, 5);
        assert_eq!(cfg.eval.seed, 7);
    }

    #[test]
    fn cross_field_validation_catches_mismatches() {
        let err = RunConfig::parse_str("[model]\nframes = 4\n").unwrap_err();
        assert!(err.to_string().contains("frames"), "{err}");
        let err = RunConfig::parse_str("[data]\nheight = 32\n").unwrap_err();
        assert!(err.to_string().contains("tokens"), "{err}");
        let err = RunConfig::parse_str("[schedule]\nsigma_max = 0.001\n").unwrap_err();
        assert!(err.to_string().contains("sigma_max"), "{err}");
    }

    #[test]
    fn echo_lands_in_the_output_directory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let path = cfg.echo_into(dir.path()).unwrap();
        assert_eq!(path.file_name().unwrap(), CONFIG_ECHO_NAME);
        let back = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.to_toml().unwrap(), back.to_toml().unwrap());
        // Defaults (no file) load the same way.
        let def = RunConfig::load_opt(None).unwrap();
        assert_eq!(cfg.to_toml().unwrap(), def.to_toml().unwrap());
    }
}
