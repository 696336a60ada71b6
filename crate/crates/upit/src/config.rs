//! Resolved run settings: built-in defaults, overlaid by a TOML file, overlaid
//! by command-line flags.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use upit_core::dsp::{StftConfig, Window, DEFAULT_FRAME_LEN, DEFAULT_HOP, DEFAULT_SAMPLE_RATE};
use upit_core::eval::Pairing;
use upit_core::masks::MaskKind;
use upit_core::mixgen::ManifestConfig;
use upit_core::model::{LayerSpec, ModelSpec, OutputActivation};
use upit_core::pit::LossKind;
use upit_core::train::{Criterion, LrUnit, TrainConfig};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub seed: u64,
    pub threads: Option<usize>,
    pub stft: StftSettings,
    pub mixgen: MixgenSettings,
    pub model: ModelSettings,
    pub train: TrainSettings,
    pub eval: EvalSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftSettings {
    pub frame_len: usize,
    pub hop: usize,
    pub window: Window,
    pub sample_rate: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixgenSettings {
    pub speakers: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub open_speakers: usize,
    pub snr_min: f64,
    pub snr_max: f64,
    pub channels: Option<usize>,
    pub order_by_energy: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub layers: Vec<LayerSpec>,
    pub output: OutputActivation,
    pub normalize: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CriterionName {
    Conv,
    ConvRand,
    Pit,
    Upit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LossName {
    /// Mask MSE against the ideal mask selected by `mask`.
    Mse,
    /// Magnitude approximation.
    Am,
    /// Phase-sensitive approximation.
    Psm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MaskName {
    Irm,
    Iam,
    Ipsm,
    Inpsm,
}

impl From<MaskName> for MaskKind {
    fn from(m: MaskName) -> Self {
        match m {
            MaskName::Irm => MaskKind::Irm,
            MaskName::Iam => MaskKind::Iam,
            MaskName::Ipsm => MaskKind::Ipsm,
            MaskName::Inpsm => MaskKind::Inpsm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub criterion: CriterionName,
    pub meta_frames: usize,
    pub loss: LossName,
    pub mask: MaskName,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_floor: f64,
    pub lr_unit: LrUnit,
    pub epochs: usize,
    pub minibatch: usize,
    pub dropout: f64,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Meta-frame length used for the oracle assignment.
    pub meta_frames: usize,
    pub pairing: Pairing,
}

impl Default for StftSettings {
    fn default() -> Self {
        StftSettings {
            frame_len: DEFAULT_FRAME_LEN,
            hop: DEFAULT_HOP,
            window: Window::SqrtHann,
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }
}

impl Default for MixgenSettings {
    fn default() -> Self {
        let m = ManifestConfig::default();
        MixgenSettings {
            speakers: m.speakers,
            train: m.train,
            valid: m.valid,
            test: m.test,
            open_speakers: m.open_speakers,
            snr_min: m.snr_min,
            snr_max: m.snr_max,
            channels: m.channels,
            order_by_energy: m.order_by_energy,
        }
    }
}

impl Default for ModelSettings {
    fn default() -> Self {
        let spec = ModelSpec::desk_default(2);
        ModelSettings {
            layers: spec.layers,
            output: spec.output,
            normalize: true,
        }
    }
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSettings {
            criterion: CriterionName::Upit,
            meta_frames: 1,
            loss: LossName::Psm,
            mask: MaskName::Irm,
            lr: t.lr,
            lr_decay: t.lr_decay,
            lr_floor: t.lr_floor,
            lr_unit: t.lr_unit,
            epochs: t.max_epochs,
            minibatch: t.minibatch,
            dropout: t.dropout,
            checkpoint_every: 0,
        }
    }
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            meta_frames: 1,
            pairing: Pairing::UtteranceBest,
        }
    }
}

impl Settings {
    /// Defaults overlaid by the TOML file at `path`, if given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Settings::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                toml::from_str(&text).map_err(|e| CliError::format("config", p, e.message()))
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("settings serialize")
    }

    pub fn stft_config(&self) -> Result<StftConfig> {
        let s = &self.stft;
        StftConfig::with_windows(s.frame_len, s.hop, s.window, s.window)
            .map_err(|e| CliError::Config(format!("STFT settings: {e}")))
    }

    pub fn loss_kind(&self) -> LossKind {
        match self.train.loss {
            LossName::Mse => LossKind::MaskMse(self.train.mask.into()),
            LossName::Am => LossKind::Amplitude,
            LossName::Psm => LossKind::PhaseSensitive,
        }
    }

    pub fn criterion(&self) -> Criterion {
        match self.train.criterion {
            CriterionName::Conv => Criterion::Conv,
            CriterionName::ConvRand => Criterion::ConvRand,
            CriterionName::Pit => Criterion::Pit {
                meta_frame_len: self.train.meta_frames,
            },
            CriterionName::Upit => Criterion::Upit,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let config = TrainConfig {
            criterion: self.criterion(),
            loss: self.loss_kind(),
            lr: t.lr,
            lr_decay: t.lr_decay,
            lr_floor: t.lr_floor,
            lr_unit: t.lr_unit,
            max_epochs: t.epochs,
            minibatch: t.minibatch,
            dropout: t.dropout,
            seed: self.seed,
        };
        config.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(config)
    }

    pub fn manifest_config(&self) -> Result<ManifestConfig> {
        let m = &self.mixgen;
        let config = ManifestConfig {
            speakers: m.speakers,
            train: m.train,
            valid: m.valid,
            test: m.test,
            open_speakers: m.open_speakers,
            snr_min: m.snr_min,
            snr_max: m.snr_max,
            seed: self.seed,
            channels: m.channels,
            order_by_energy: m.order_by_energy,
        };
        config.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(config)
    }

    /// Network layout for `speakers` outputs over the configured STFT bins.
    pub fn model_spec(&self, speakers: usize) -> Result<ModelSpec> {
        let spec = ModelSpec {
            input_bins: self.stft.frame_len / 2 + 1,
            speakers,
            layers: self.model.layers.clone(),
            output: self.model.output,
            dropout: self.train.dropout,
        };
        spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(spec)
    }

    /// Checks everything downstream code relies on before work starts.
    pub fn validate(&self) -> Result<()> {
        self.stft_config()?;
        self.train_config()?;
        self.manifest_config()?;
        if self.train.meta_frames == 0 || self.eval.meta_frames == 0 {
            return Err(CliError::Config("meta-frame lengths must be >= 1".into()));
        }
        if self.threads == Some(0) {
            return Err(CliError::Config("--threads must be >= 1".into()));
        }
        if self.stft.sample_rate == 0 {
            return Err(CliError::Config("sample rate must be positive".into()));
        }
        Ok(())
    }
}
