//! The JSON run configuration shared by the training commands.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta::MetaConfig;
use crate::metrics::MetricOptions;
use crate::model::ModelConfig;
use crate::selfsup::PretrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Small CNN over raw images; trainable during pretraining, frozen after.
    #[default]
    TinyCnn,
    /// Frozen maps from `encoder.feature_dir`.
    Precomputed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub backend: Backend,
    pub widths: [usize; 3],
    pub channels: usize,
    pub feature_dir: Option<PathBuf>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            backend: Backend::TinyCnn,
            widths: [8, 16, 16],
            channels: 16,
            feature_dir: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory with `manifest.jsonl`, `splitspec.json` and the images.
    pub corpus: Option<PathBuf>,
    /// Checkpoint to start from.
    pub init_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Number of test episodes for `finetune-eval`.
    pub episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { episodes: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds parameter initialisation and evaluation episodes.
    pub seed: u64,
    pub paths: Paths,
    pub model: ModelConfig,
    pub encoder: EncoderConfig,
    pub meta: MetaConfig,
    pub pretrain: PretrainConfig,
    pub eval: EvalConfig,
    pub metrics: MetricOptions,
    /// Save a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            paths: Paths::default(),
            model: ModelConfig::default(),
            encoder: EncoderConfig::default(),
            meta: MetaConfig::default(),
            pretrain: PretrainConfig::default(),
            eval: EvalConfig::default(),
            metrics: MetricOptions::default(),
            checkpoint_every: 50,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Sets the run seed and the meta-training and pretraining sampler seeds.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.meta.seed = seed;
        self.pretrain.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        self.pretrain.validate()?;
        self.metrics.validate()?;
        if self.encoder.channels == 0 || self.encoder.widths.contains(&0) {
            return Err(Error::Config("encoder widths and channels must be positive".into()));
        }
        if self.encoder.backend == Backend::Precomputed && self.encoder.feature_dir.is_none() {
            return Err(Error::Config("precomputed backend needs encoder.feature_dir".into()));
        }
        if self.eval.episodes == 0 {
            return Err(Error::Config("eval.episodes must be positive".into()));
        }
        Ok(())
    }

    pub fn corpus(&self) -> Result<&Path> {
        self.paths
            .corpus
            .as_deref()
            .ok_or_else(|| Error::Config("paths.corpus is not set".into()))
    }

    /// The fully resolved configuration, defaults included. Goes through
    /// text so that `f32` fields keep their short decimal form.
    pub fn to_json(&self) -> serde_json::Value {
        let text = serde_json::to_string(self).expect("serializable config");
        serde_json::from_str(&text).expect("round trip")
    }
}
