//! Flat key-value run settings shared by every subcommand.
//!
//! Settings come from an optional TOML file of top-level keys, then
//! `key=value` overrides. Unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{PairedBudget, SyntheticSpec};
use crate::error::{Error, Result};
use crate::training::{ModelConfig, TrainConfig, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub seed: u64,
    pub variant: Variant,

    pub epochs: usize,
    pub batch_unpaired: usize,
    pub batch_paired: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub clip_norm: f64,
    pub lambda1: f64,
    pub lambda2: f64,

    /// At most one of the two budgets may be set; 20 utterances otherwise.
    pub paired_minutes: Option<f64>,
    pub paired_utterances: Option<usize>,

    pub units: usize,
    pub feature_dim: usize,
    pub noise_std: f64,
    pub min_duration: usize,
    pub max_duration: usize,
    pub min_units: usize,
    pub max_units: usize,
    pub frame_hop_ms: f32,
    pub prototype_seed: u64,
    /// Training pool size before the paired split.
    pub train_utterances: usize,
    pub dev_utterances: usize,
    pub test_utterances: usize,

    pub latent_dim: usize,
    pub conv_channels: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub reduction: usize,

    pub beam_width: usize,
    /// In input frames.
    pub boundary_tolerance: usize,
    pub alignment_grid: usize,
}

impl Default for Settings {
    fn default() -> Self {
        let train = TrainConfig::default();
        let synth = SyntheticSpec::default();
        let model = ModelConfig::new(Variant::SeqRq, synth.units, synth.feature_dim);
        Self {
            seed: train.seed,
            variant: Variant::SeqRq,
            epochs: train.epochs,
            batch_unpaired: train.batch_unpaired,
            batch_paired: train.batch_paired,
            learning_rate: train.learning_rate,
            beta1: train.beta1,
            beta2: train.beta2,
            clip_norm: train.clip_norm,
            lambda1: train.lambda1,
            lambda2: train.lambda2,
            paired_minutes: None,
            paired_utterances: None,
            units: synth.units,
            feature_dim: synth.feature_dim,
            noise_std: synth.noise_std,
            min_duration: synth.min_duration,
            max_duration: synth.max_duration,
            min_units: synth.min_units,
            max_units: synth.max_units,
            frame_hop_ms: synth.frame_hop_ms,
            prototype_seed: synth.prototype_seed,
            train_utterances: 520,
            dev_utterances: 50,
            test_utterances: 100,
            latent_dim: model.encoder.latent_dim,
            conv_channels: model.encoder.conv_channels,
            encoder_hidden: model.encoder.hidden,
            decoder_hidden: model.decoder.hidden,
            reduction: model.decoder.reduction,
            beam_width: 8,
            boundary_tolerance: 2,
            alignment_grid: 20,
        }
    }
}

/// Parses a `key=value` override. Values are read as TOML scalars when
/// they parse as such and as bare strings otherwise.
pub fn parse_override(text: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override {text:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Usage(format!("override {text:?} has an empty key")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

impl Settings {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::load(text, Vec::new())
    }

    /// File contents (may be empty) with overrides applied on top.
    pub fn load(text: &str, overrides: Vec<(String, toml::Value)>) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        for (key, value) in overrides {
            table.insert(key, value);
        }
        let settings: Settings = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        settings.validate()?;
        Ok(settings)
    }

    pub fn from_file(path: Option<&Path>, overrides: Vec<(String, toml::Value)>) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::load(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.synthetic_spec().validate()?;
        self.model_config(self.feature_dim).validate()?;
        self.paired_budget()?;
        if self.beam_width == 0 {
            return Err(Error::Config("beam width must be positive".into()));
        }
        if self.alignment_grid < 2 {
            return Err(Error::Config("alignment grid must be at least 2".into()));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            epochs: self.epochs,
            batch_unpaired: self.batch_unpaired,
            batch_paired: self.batch_paired,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            clip_norm: self.clip_norm,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            units: self.units,
            feature_dim: self.feature_dim,
            noise_std: self.noise_std,
            min_duration: self.min_duration,
            max_duration: self.max_duration,
            min_units: self.min_units,
            max_units: self.max_units,
            frame_hop_ms: self.frame_hop_ms,
            prototype_seed: self.prototype_seed,
        }
    }

    pub fn model_config(&self, feature_dim: usize) -> ModelConfig {
        let mut config = ModelConfig::new(self.variant, self.units, feature_dim);
        config.encoder.latent_dim = self.latent_dim;
        config.encoder.conv_channels = self.conv_channels;
        config.encoder.hidden = self.encoder_hidden;
        config.decoder.hidden = self.decoder_hidden;
        config.decoder.reduction = self.reduction;
        if self.variant == Variant::SeqRq {
            config.decoder.memory_dim = self.latent_dim;
        }
        config
    }

    pub fn paired_budget(&self) -> Result<PairedBudget> {
        match (self.paired_minutes, self.paired_utterances) {
            (Some(_), Some(_)) => Err(Error::Config(
                "set paired_minutes or paired_utterances, not both".into(),
            )),
            (Some(m), None) => Ok(PairedBudget::Minutes(m)),
            (None, Some(n)) => Ok(PairedBudget::Utterances(n)),
            (None, None) => Ok(PairedBudget::Utterances(20)),
        }
    }
}
