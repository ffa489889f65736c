//! TOML config file with sections mirroring the module configs.
//! Command-line flags override file values; file values override defaults.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;

use scrawl_core::augment::{parse_confusion_table, AugmentConfig};
use scrawl_core::model::ModelConfig;
use scrawl_core::training::{LossKind, TrainConfig};

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub paths: PathsSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub augment: AugmentSection,
    #[serde(default)]
    pub lm: LmSection,
    #[serde(default)]
    pub pipeline: PipelineSection,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    /// Clean-text corpus, one sentence per line (pipeline input).
    pub corpus: Option<PathBuf>,
    /// Directory for pipeline artifacts.
    pub outputs: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: Option<usize>,
    pub n_heads: Option<usize>,
    pub n_encoder_layers: Option<usize>,
    pub n_decoder_layers: Option<usize>,
    pub d_ffn: Option<usize>,
    pub max_seq_len: Option<usize>,
    pub dropout_rate: Option<f32>,
}

impl ModelSection {
    /// Applies file values over desk defaults; the vocabulary size is always
    /// supplied by the caller.
    pub fn resolve(&self, vocab_size: usize) -> ModelConfig {
        let base = ModelConfig::desk_default(vocab_size);
        ModelConfig {
            d_model: self.d_model.unwrap_or(base.d_model),
            n_heads: self.n_heads.unwrap_or(base.n_heads),
            n_encoder_layers: self.n_encoder_layers.unwrap_or(base.n_encoder_layers),
            n_decoder_layers: self.n_decoder_layers.unwrap_or(base.n_decoder_layers),
            d_ffn: self.d_ffn.unwrap_or(base.d_ffn),
            max_seq_len: self.max_seq_len.unwrap_or(base.max_seq_len),
            dropout_rate: self.dropout_rate.unwrap_or(base.dropout_rate),
            vocab_size,
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub loss: Option<String>,
    pub label_smoothing: Option<f64>,
    pub alpha: Option<f64>,
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub dropout: Option<f32>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
}

pub fn parse_loss(name: &str) -> Result<LossKind> {
    match name {
        "smoothed-ce" => Ok(LossKind::SmoothedCe),
        "robust" => Ok(LossKind::Robust),
        other => anyhow::bail!("unknown loss {other:?} (expected smoothed-ce or robust)"),
    }
}

impl TrainSection {
    pub fn resolve(&self, seed: u64) -> Result<TrainConfig> {
        let base = TrainConfig::default();
        Ok(TrainConfig {
            loss: match &self.loss {
                Some(name) => parse_loss(name)?,
                None => base.loss,
            },
            label_smoothing: self.label_smoothing.unwrap_or(base.label_smoothing),
            alpha: self.alpha.unwrap_or(base.alpha),
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            weight_decay: self.weight_decay.unwrap_or(base.weight_decay),
            dropout: self.dropout,
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            max_epochs: self.max_epochs.unwrap_or(base.max_epochs),
            patience: self.patience.unwrap_or(base.patience),
            seed,
        })
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSection {
    pub p_word_delete: Option<f64>,
    pub p_letter_delete: Option<f64>,
    pub p_shorten_to_initial: Option<f64>,
    pub p_cut_ending: Option<f64>,
    pub cut_ending_max_chars: Option<usize>,
    pub p_misspell: Option<f64>,
    pub p_space_delete: Option<f64>,
    /// Two-column "key<TAB>replacement" file; bundled table when absent.
    pub confusion_table: Option<PathBuf>,
}

impl AugmentSection {
    pub fn resolve(&self, seed: u64) -> Result<AugmentConfig> {
        let base = AugmentConfig::default();
        let confusion_table = match &self.confusion_table {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading confusion table {}", path.display()))?;
                parse_confusion_table(&text)?
            }
            None => base.confusion_table.clone(),
        };
        let cfg = AugmentConfig {
            p_word_delete: self.p_word_delete.unwrap_or(base.p_word_delete),
            p_letter_delete: self.p_letter_delete.unwrap_or(base.p_letter_delete),
            p_shorten_to_initial: self
                .p_shorten_to_initial
                .unwrap_or(base.p_shorten_to_initial),
            p_cut_ending: self.p_cut_ending.unwrap_or(base.p_cut_ending),
            cut_ending_max_chars: self
                .cut_ending_max_chars
                .unwrap_or(base.cut_ending_max_chars),
            p_misspell: self.p_misspell.unwrap_or(base.p_misspell),
            p_space_delete: self.p_space_delete.unwrap_or(base.p_space_delete),
            confusion_table,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmSection {
    pub order: Option<usize>,
    pub smoothing: Option<f64>,
}

impl LmSection {
    pub fn order(&self) -> usize {
        self.order.unwrap_or(2)
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing.unwrap_or(1.0)
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    pub noise_rate: Option<f64>,
    pub ratios: Option<(f64, f64, f64)>,
    /// Decode cap used for translate/eval inside the pipeline.
    pub max_decode_len: Option<usize>,
}

pub fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
        }
    }
}
