use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acoustic::{AcousticConfig, AnnealSchedule};
use crate::corpus::CorpusConfig;
use crate::durmodel::{DurationLossMode, GroupingConfig};
use crate::error::{Error, Result};
use crate::latent::KlDirection;
use crate::samplers::SamplerVariant;

/// Everything one run needs. Missing fields take their defaults; unknown
/// fields are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub mel_bins: usize,
    pub embedding_dim: usize,
    pub latent_dim: usize,
    pub train_fraction: f64,
    pub acoustic: AcousticSizes,
    pub stage1: Stage1Config,
    pub sampler: SamplerTrainConfig,
    pub duration: DurationTrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: PathBuf::from("corpus"),
            out: PathBuf::from("run"),
            seed: 1,
            mel_bins: 16,
            embedding_dim: 16,
            latent_dim: 8,
            train_fraction: 0.9,
            acoustic: AcousticSizes::default(),
            stage1: Stage1Config::default(),
            sampler: SamplerTrainConfig::default(),
            duration: DurationTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcousticSizes {
    pub phoneme_embed: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub prenet_dim: usize,
    pub prenet_dropout: f64,
    pub reference_channels: usize,
    pub reference_hidden: usize,
}

impl Default for AcousticSizes {
    fn default() -> Self {
        let c = AcousticConfig::new(1, 1, 1);
        AcousticSizes {
            phoneme_embed: c.phoneme_embed,
            encoder_hidden: c.encoder_hidden,
            decoder_hidden: c.decoder_hidden,
            prenet_dim: c.prenet_dim,
            prenet_dropout: c.prenet_dropout,
            reference_channels: c.reference_channels,
            reference_hidden: c.reference_hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub anneal: AnnealSchedule,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            steps: 2000,
            batch_size: 4,
            learning_rate: 2e-3,
            grad_clip: 1.0,
            anneal: AnnealSchedule {
                alpha_max: 1e-4,
                ramp_start: 200,
                ramp_end: 1000,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerTrainConfig {
    pub variant: SamplerVariant,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub semantic_hidden: usize,
    pub graph_hidden: usize,
    pub graph_lstm_hidden: usize,
    pub kl_direction: KlDirection,
}

impl Default for SamplerTrainConfig {
    fn default() -> Self {
        SamplerTrainConfig {
            variant: SamplerVariant::Combined,
            epochs: 40,
            batch_size: 8,
            learning_rate: 3e-3,
            grad_clip: 5.0,
            semantic_hidden: 16,
            graph_hidden: 16,
            graph_lstm_hidden: 16,
            kl_direction: KlDirection::PredToTarget,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DurationTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub embed: usize,
    pub hidden: usize,
    /// Condition on the sampled prosody latent; off gives the text-only model.
    pub conditioned: bool,
    pub loss: DurationLossMode,
    pub grouping: GroupingConfig,
}

impl Default for DurationTrainConfig {
    fn default() -> Self {
        DurationTrainConfig {
            steps: 1500,
            batch_size: 8,
            learning_rate: 3e-3,
            grad_clip: 5.0,
            embed: 16,
            hidden: 24,
            conditioned: true,
            loss: DurationLossMode::Absolute,
            grouping: GroupingConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(format!("parsing {}", path.display()), e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("serializing run config", e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn acoustic_config(&self, phonemes: usize) -> AcousticConfig {
        let a = &self.acoustic;
        AcousticConfig {
            phonemes,
            mel_bins: self.mel_bins,
            latent_dim: self.latent_dim,
            phoneme_embed: a.phoneme_embed,
            encoder_hidden: a.encoder_hidden,
            decoder_hidden: a.decoder_hidden,
            prenet_dim: a.prenet_dim,
            prenet_dropout: a.prenet_dropout,
            reference_channels: a.reference_channels,
            reference_hidden: a.reference_hidden,
        }
    }

    /// Internal consistency, independent of any corpus.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.latent_dim == 0 || self.mel_bins == 0 || self.embedding_dim == 0 {
            return bad("mel_bins, embedding_dim and latent_dim must be positive".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction {} must lie in (0, 1)", self.train_fraction));
        }
        self.acoustic_config(1).validate()?;
        self.stage1.anneal.validate()?;
        let stages = [
            ("stage1", self.stage1.steps as usize, self.stage1.batch_size, self.stage1.learning_rate, self.stage1.grad_clip),
            ("sampler", self.sampler.epochs, self.sampler.batch_size, self.sampler.learning_rate, self.sampler.grad_clip),
            ("duration", self.duration.steps as usize, self.duration.batch_size, self.duration.learning_rate, self.duration.grad_clip),
        ];
        for (name, steps, batch, lr, clip) in stages {
            if steps == 0 || batch == 0 {
                return bad(format!("{name}: step/epoch count and batch size must be positive"));
            }
            if !(lr > 0.0) || !(clip > 0.0) {
                return bad(format!("{name}: learning rate and gradient clip must be positive"));
            }
        }
        let s = &self.sampler;
        if s.semantic_hidden == 0 || s.graph_hidden == 0 || s.graph_lstm_hidden == 0 {
            return bad("sampler hidden sizes must be positive".into());
        }
        if self.duration.embed == 0 || self.duration.hidden == 0 {
            return bad("duration sizes must be positive".into());
        }
        Ok(())
    }

    /// Check against the corpus this run reads.
    pub fn validate_against(&self, corpus: &CorpusConfig) -> Result<()> {
        self.validate()?;
        if corpus.mel_bins != self.mel_bins {
            return Err(Error::Config(format!(
                "config has {} mel bins, corpus has {}",
                self.mel_bins, corpus.mel_bins
            )));
        }
        if corpus.embedding_dim != self.embedding_dim {
            return Err(Error::Config(format!(
                "config has embedding dim {}, corpus has {}",
                self.embedding_dim, corpus.embedding_dim
            )));
        }
        Ok(())
    }
}
