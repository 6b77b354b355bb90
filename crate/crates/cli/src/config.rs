//! Run configuration: one JSON document with a section per pipeline stage.
//!
//! Every section is optional and falls back to the published defaults.
//! Unknown keys are rejected at any depth. A global `seed` overrides the
//! per-section seeds so one number pins a whole run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tweetlm_core::corpus::FieldMap;
use tweetlm_core::embed::HeadConfig;
use tweetlm_core::finetune::FinetuneConfig;
use tweetlm_core::mlm::MaskingConfig;
use tweetlm_core::model::EncoderConfig;
use tweetlm_core::optim::{AdamConfig, PretrainConfig, SchedulerConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("config {path}: {source}")]
    Parse { path: String, source: serde_json::Error },
    #[error("invalid `{key}`: {message}")]
    Invalid { key: String, message: String },
}

impl ConfigError {
    fn invalid(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Invalid {
            key: key.into(),
            message: message.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub vocab_size: usize,
    pub min_frequency: u64,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self {
            vocab_size: 30_000,
            min_frequency: tweetlm_core::tokenizer::DEFAULT_MIN_FREQUENCY,
        }
    }
}

/// Encoder dimensions. `vocab_size` normally comes from the trained
/// vocabulary; when set it must agree with it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub hidden: usize,
    pub feedforward: usize,
    pub heads: usize,
    pub blocks: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub vocab_size: Option<usize>,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let base = EncoderConfig::base();
        Self {
            hidden: base.hidden,
            feedforward: base.feedforward,
            heads: base.heads,
            blocks: base.blocks,
            max_positions: base.max_positions,
            dropout: base.dropout,
            vocab_size: None,
        }
    }
}

impl EncoderSection {
    pub fn resolve(&self, vocab_len: usize) -> Result<EncoderConfig, ConfigError> {
        if let Some(v) = self.vocab_size {
            if v != vocab_len {
                return Err(ConfigError::invalid(
                    "encoder.vocab_size",
                    format!("{v} does not match the vocabulary's {vocab_len} tokens"),
                ));
            }
        }
        let cfg = EncoderConfig {
            hidden: self.hidden,
            feedforward: self.feedforward,
            heads: self.heads,
            blocks: self.blocks,
            max_positions: self.max_positions,
            vocab_size: vocab_len,
            dropout: self.dropout,
            ..EncoderConfig::base()
        };
        cfg.validate().map_err(|e| match e {
            tweetlm_core::model::ModelError::InvalidConfig { key, message } => {
                ConfigError::invalid(format!("encoder.{key}"), message)
            }
            other => ConfigError::invalid("encoder", other.to_string()),
        })?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub lang: String,
    pub fields: FieldMap,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            lang: "es".into(),
            fields: FieldMap::default(),
        }
    }
}

/// Field-by-field overrides of a fine-tuning config. Needed because the
/// token task has different defaults from the sequence task, and a partial
/// `token` object must fill its gaps from those.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FinetunePatch {
    lr: Option<f64>,
    epochs: Option<usize>,
    patience: Option<usize>,
    split: Option<[f64; 3]>,
    seed: Option<u64>,
    batch_size: Option<usize>,
    class_weights: Option<bool>,
}

impl FinetunePatch {
    fn apply(self, base: FinetuneConfig) -> FinetuneConfig {
        FinetuneConfig {
            lr: self.lr.unwrap_or(base.lr),
            epochs: self.epochs.unwrap_or(base.epochs),
            patience: self.patience.unwrap_or(base.patience),
            split: self.split.unwrap_or(base.split),
            seed: self.seed.unwrap_or(base.seed),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            class_weights: self.class_weights.unwrap_or(base.class_weights),
        }
    }
}

/// Token-classification settings, defaulting to [`FinetuneConfig::token`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "FinetunePatch")]
pub struct TokenFinetune(pub FinetuneConfig);

impl Default for TokenFinetune {
    fn default() -> Self {
        Self(FinetuneConfig::token())
    }
}

impl From<FinetunePatch> for TokenFinetune {
    fn from(p: FinetunePatch) -> Self {
        Self(p.apply(FinetuneConfig::token()))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub sequence: FinetuneConfig,
    pub token: TokenFinetune,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusSection,
    pub tokenizer: TokenizerSection,
    pub encoder: EncoderSection,
    pub masking: MaskingConfig,
    pub scheduler: SchedulerConfig,
    pub adam: AdamConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneSection,
    pub head: HeadConfig,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn from_json(text: &str, path: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|source| ConfigError::Parse {
            path: path.to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// Copies the global seed into every section that has one.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.masking.seed = seed;
        self.pretrain.seed = seed;
        self.finetune.sequence.seed = seed;
        self.finetune.token.0.seed = seed;
        self.head.seed = seed;
    }

    /// Checks every section, reporting the first offending key with its
    /// section prefix.
    pub fn validate(&self) -> Result<(), ConfigError> {
        fn keyed<E: std::fmt::Display>(section: &str, key: Option<&str>, e: E) -> ConfigError {
            match key {
                Some(k) => ConfigError::invalid(format!("{section}.{k}"), e.to_string()),
                None => ConfigError::invalid(section, e.to_string()),
            }
        }
        use tweetlm_core::embed::EmbedError;
        use tweetlm_core::finetune::FinetuneError;
        use tweetlm_core::mlm::MlmError;
        use tweetlm_core::optim::OptimError;

        if self.corpus.lang.is_empty() {
            return Err(ConfigError::invalid("corpus.lang", "must not be empty"));
        }
        let min_vocab = tweetlm_core::tokenizer::NUM_SPECIAL + 1;
        if self.tokenizer.vocab_size <= min_vocab {
            return Err(ConfigError::invalid(
                "tokenizer.vocab_size",
                format!("{} leaves no room beyond the special tokens", self.tokenizer.vocab_size),
            ));
        }
        self.encoder.resolve(self.encoder.vocab_size.unwrap_or(self.tokenizer.vocab_size))?;
        if let Err(e) = self.masking.validate() {
            let key = match &e {
                MlmError::InvalidConfig { key, .. } => Some(*key),
                _ => None,
            };
            return Err(keyed("masking", key, e));
        }
        if self.masking.max_len > self.encoder.max_positions {
            return Err(ConfigError::invalid(
                "masking.max_len",
                format!("{} exceeds encoder.max_positions {}", self.masking.max_len, self.encoder.max_positions),
            ));
        }
        for (section, result) in [
            ("scheduler", self.scheduler.validate()),
            ("adam", self.adam.validate()),
            ("pretrain", self.pretrain.validate()),
        ] {
            if let Err(e) = result {
                let key = match &e {
                    OptimError::InvalidConfig { key, .. } => Some(*key),
                    _ => None,
                };
                return Err(keyed(section, key, e));
            }
        }
        for (section, ft) in [("finetune.sequence", &self.finetune.sequence), ("finetune.token", &self.finetune.token.0)] {
            if let Err(e) = ft.validate() {
                let key = match &e {
                    FinetuneError::InvalidConfig { key, .. } => Some(*key),
                    _ => None,
                };
                return Err(keyed(section, key, e));
            }
        }
        if let Err(e) = self.head.validate() {
            let key = match &e {
                EmbedError::InvalidConfig { key, .. } => Some(*key),
                _ => None,
            };
            return Err(keyed("head", key, e));
        }
        Ok(())
    }
}

/// Contents of `run.json`.
#[derive(Clone, Debug, Serialize)]
pub struct RunRecord<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a [String],
    pub seed: u64,
    pub config: &'a RunConfig,
}

/// Writes `run.json` into `dir`.
pub fn write_run_json(dir: &Path, command: &[String], config: &RunConfig) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let record = RunRecord {
        tool: "tweetlm",
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed: config.seed,
        config,
    };
    let mut text = serde_json::to_string_pretty(&record).map_err(std::io::Error::other)?;
    text.push('\n');
    std::fs::write(dir.join("run.json"), text)
}
