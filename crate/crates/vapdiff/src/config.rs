//! Run configuration, read from a TOML file. Unknown keys are rejected.
//!
//! ```toml
//! [data]
//! dataset = "toy"             # dataset root holding manifest.jsonl
//! modality = "dermatologic"   # dermatologic | colorectal | chest_xray
//! bank = "toy/bank.jsonl"     # prompt bank; optional when train.vaps = false
//!
//! [schedule]
//! kind = "linear"             # linear | constant
//! steps = 100                 # T
//! beta_start = 1e-3
//! beta_end = 0.2
//!
//! [codec]
//! mode = "autoencoder"        # identity | autoencoder
//! latent_channels = 4
//! factor = 4                  # spatial downsampling, a power of two
//! epochs = 30
//! lr = 2e-3
//! batch_size = 8
//!
//! [model]                     # prototype branch switches
//! pcm = true
//! prototype_attention = "soft"  # soft | masked
//! fusion_heads = 4
//!
//! [model.denoiser]            # channels/height/width/class_count/text_dim are derived
//! patch_size = 2
//! embed_dim = 32              # K
//! encoder_depth = 2
//! middle_depth = 1
//! decoder_depth = 2
//! heads = 4
//! mlp_ratio = 4
//!
//! [train]
//! vaps = true                 # condition on bank descriptions
//! alpha = 0.1                 # weight of the prototype reconstruction loss
//! lr = 2e-3
//! batch_size = 16
//! steps = 3000
//! seed = 0
//! checkpoint_every = 500
//! ema_decay = 0.999           # optional; omit to sample with live parameters
//!
//! [text]
//! provider = "hashed-bow-v1"
//! dim = 32
//!
//! [mllm]
//! provider = "toy-oracle"     # toy-oracle | http
//! endpoint = "https://host/v1/chat/completions"
//! model = "name"
//! token_env = "VAPDIFF_MLLM_TOKEN"
//! workers = 4
//! attempts = 3
//! backoff_ms = 1000
//! timeout_s = 60
//!
//! [eval]
//! k = 3
//! is_splits = 1
//! extractor_epochs = 20
//! samples_per_class = 20
//! prompt_split = "unseen"     # seen | unseen
//! real_fraction = 0.1
//! synthetic_count = 200
//! classifier_epochs = 30
//! plots = true
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vapdiff_core::bank::SplitTag;
use vapdiff_core::codec::{CodecMode, CodecSpec};
use vapdiff_core::model::ModelConfig;
use vapdiff_core::schedule::{NoiseSchedule, ScheduleKind};
use vapdiff_core::vaps::{sha256_hex, HashedBagOfWords, Modality};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub codec: CodecConfig,
    #[serde(default = "default_model")]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub text: TextConfig,
    #[serde(default)]
    pub mllm: MllmConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: PathBuf,
    #[serde(default = "default_modality")]
    pub modality: Modality,
    #[serde(default)]
    pub bank: Option<PathBuf>,
}

fn default_modality() -> Modality {
    Modality::Dermatologic
}

fn default_model() -> ModelConfig {
    let mut m = ModelConfig::default();
    m.denoiser.embed_dim = 32;
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { kind: ScheduleKind::Linear, steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleConfig {
    /// Endpoints of the 1000-step convention scaled so `T` steps add the same total noise.
    pub fn scaled(steps: usize) -> Self {
        let f = 1000.0 / steps as f64;
        Self { kind: ScheduleKind::Linear, steps, beta_start: 1e-4 * f, beta_end: (0.02 * f).min(0.999) }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::build(self.kind, self.steps, self.beta_start, self.beta_end)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub mode: CodecMode,
    pub latent_channels: usize,
    pub factor: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self { mode: CodecMode::Autoencoder, latent_channels: 4, factor: 4, epochs: 30, lr: 2e-3, batch_size: 8 }
    }
}

impl CodecConfig {
    pub fn spec(&self, image: (usize, usize, usize)) -> Result<CodecSpec> {
        Ok(match self.mode {
            CodecMode::Identity => CodecSpec::identity(image.0, image.1, image.2),
            CodecMode::Autoencoder => CodecSpec::autoencoder(image, self.latent_channels, self.factor)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub vaps: bool,
    pub alpha: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub ema_decay: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { vaps: true, alpha: 0.1, lr: 2e-4, batch_size: 8, steps: 1000, seed: 0, checkpoint_every: 500, ema_decay: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextConfig {
    pub provider: String,
    pub dim: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self { provider: HashedBagOfWords::ID.into(), dim: 32 }
    }
}

impl TextConfig {
    pub fn encoder(&self) -> Result<HashedBagOfWords> {
        if self.provider != HashedBagOfWords::ID {
            return Err(Error::config(format!("unknown text provider {:?}; available: {}", self.provider, HashedBagOfWords::ID)));
        }
        Ok(HashedBagOfWords { dim: self.dim })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MllmProvider {
    /// Answers from the dataset's ground-truth attribute file.
    ToyOracle,
    /// Chat-completion endpoint over HTTP.
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MllmConfig {
    pub provider: MllmProvider,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    /// Name of the environment variable holding the bearer token.
    pub token_env: String,
    pub workers: usize,
    pub attempts: u32,
    pub backoff_ms: u64,
    pub timeout_s: u64,
}

impl Default for MllmConfig {
    fn default() -> Self {
        Self {
            provider: MllmProvider::ToyOracle,
            endpoint: None,
            model: None,
            token_env: "VAPDIFF_MLLM_TOKEN".into(),
            workers: 4,
            attempts: 3,
            backoff_ms: 1000,
            timeout_s: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: usize,
    pub is_splits: usize,
    pub extractor_epochs: usize,
    pub samples_per_class: usize,
    pub prompt_split: SplitTag,
    pub real_fraction: f64,
    pub synthetic_count: usize,
    pub classifier_epochs: usize,
    pub plots: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 3,
            is_splits: 1,
            extractor_epochs: 60,
            samples_per_class: 20,
            prompt_split: SplitTag::Unseen,
            real_fraction: 0.1,
            synthetic_count: 200,
            classifier_epochs: 30,
            plots: true,
        }
    }
}

impl RunConfig {
    /// Desk-scale settings for a toy dataset at `dataset`.
    pub fn toy(dataset: &Path) -> Self {
        Self {
            data: DataConfig { dataset: dataset.to_path_buf(), modality: Modality::Dermatologic, bank: Some(dataset.join("bank.jsonl")) },
            schedule: ScheduleConfig::scaled(100),
            codec: CodecConfig::default(),
            model: default_model(),
            train: TrainConfig { lr: 2e-3, batch_size: 16, steps: 3000, ..Default::default() },
            text: TextConfig::default(),
            mllm: MllmConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Makes relative paths relative to the config file's directory.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.dataset);
        if let Some(b) = &mut self.data.bank {
            fix(b);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Checks values and that the dataset exists; `need_bank` also requires the bank file.
    pub fn validate(&self, need_bank: bool) -> Result<()> {
        if !self.data.dataset.join(crate::dataset::MANIFEST).is_file() {
            return Err(Error::config(format!("dataset {} has no manifest.jsonl", self.data.dataset.display())));
        }
        if need_bank && self.train.vaps {
            match &self.data.bank {
                Some(p) if p.is_file() => {}
                Some(p) => return Err(Error::config(format!("prompt bank {} does not exist", p.display()))),
                None => return Err(Error::config("train.vaps is on but data.bank is not set")),
            }
        }
        self.schedule.build()?;
        if !(self.train.alpha >= 0.0) {
            return Err(Error::config(format!("train.alpha = {} must be non-negative", self.train.alpha)));
        }
        if !(self.train.lr > 0.0) || self.train.batch_size == 0 {
            return Err(Error::config("train.lr and train.batch_size must be positive"));
        }
        if let Some(d) = self.train.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::config(format!("train.ema_decay = {d} must lie in [0, 1)")));
            }
        }
        if self.text.dim == 0 {
            return Err(Error::config("text.dim must be positive"));
        }
        self.text.encoder()?;
        if self.mllm.workers == 0 || self.mllm.attempts == 0 {
            return Err(Error::config("mllm.workers and mllm.attempts must be positive"));
        }
        if self.eval.k == 0 || self.eval.is_splits == 0 {
            return Err(Error::config("eval.k and eval.is_splits must be positive"));
        }
        if !(self.eval.real_fraction > 0.0 && self.eval.real_fraction <= 1.0) {
            return Err(Error::config(format!("eval.real_fraction = {} must lie in (0, 1]", self.eval.real_fraction)));
        }
        Ok(())
    }

    /// Model config with the shape fields filled in from the data.
    pub fn model_for(&self, latent: (usize, usize, usize), classes: usize) -> ModelConfig {
        let mut m = self.model.clone();
        (m.denoiser.channels, m.denoiser.height, m.denoiser.width) = latent;
        m.denoiser.class_count = classes;
        m.denoiser.text_dim = self.text.dim;
        m
    }

    /// Hash of every setting that shapes trained parameters. Step budget,
    /// checkpoint cadence, data paths and evaluation settings are excluded.
    pub fn config_hash(&self) -> String {
        #[derive(Serialize)]
        struct Shape<'a> {
            schedule: &'a ScheduleConfig,
            codec: &'a CodecConfig,
            model: &'a ModelConfig,
            vaps: bool,
            alpha: f64,
            lr: f64,
            batch_size: usize,
            seed: u64,
            ema_decay: Option<f64>,
            text: &'a TextConfig,
        }
        let t = &self.train;
        let shape = Shape {
            schedule: &self.schedule,
            codec: &self.codec,
            model: &self.model,
            vaps: t.vaps,
            alpha: t.alpha,
            lr: t.lr,
            batch_size: t.batch_size,
            seed: t.seed,
            ema_decay: t.ema_decay,
            text: &self.text,
        };
        sha256_hex(serde_json::to_string(&shape).expect("config serializes").as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_and_unknown_keys() {
        let cfg = RunConfig::parse("[data]\ndataset = \"d\"\n").unwrap();
        assert_eq!(cfg.schedule.steps, 1000);
        assert_eq!(cfg.model.denoiser.embed_dim, 32);
        let err = RunConfig::parse("[data]\ndataset = \"d\"\n[train]\nlearning_rate = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        assert!(RunConfig::parse("[data]\ndataset = \"d\"\nextra = 1\n").is_err());
    }

    #[test]
    fn toml_roundtrip_and_hash() {
        let cfg = RunConfig::toy(Path::new("/tmp/x"));
        let back = RunConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let mut other = cfg.clone();
        other.train.steps += 10;
        other.eval.k = 5;
        assert_eq!(other.config_hash(), cfg.config_hash());
        other.train.alpha = 0.5;
        assert_ne!(other.config_hash(), cfg.config_hash());
    }

    #[test]
    fn scaled_schedule_reaches_noise() {
        let s = ScheduleConfig::scaled(100).build().unwrap();
        assert!(s.alpha_bar(100).unwrap() < 1e-3);
    }
}
