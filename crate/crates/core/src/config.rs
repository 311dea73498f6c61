//! Run configuration with paper-scale and desk-scale presets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::acoustics::BoundaryConfig;
use crate::brpe::BrpeConfig;
use crate::dataset::{RoomPrior, SplitRatios, TestPool};
use crate::decoder::DecoderConfig;
use crate::dsp::FeatureConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionMethod};
use crate::loss::StftLossConfig;
use crate::model::{BoundaryMode, ModelConfig};
use crate::train::{BrpeTrainConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Paper,
    Desk,
}

/// Corpus construction settings for `prepare-data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Length of each reverberant speech clip.
    pub clip_seconds: f64,
    /// Synthetic rooms to generate.
    pub synthetic_rooms: usize,
    pub rirs_per_room: usize,
    pub utterances_per_rir: usize,
    pub prior: RoomPrior,
    pub boundary: BoundaryConfig,
    pub split: SplitRatios,
    pub test_pool: TestPool,
}

impl DataConfig {
    pub fn paper() -> Self {
        Self {
            clip_seconds: 4.0,
            synthetic_rooms: 500,
            rirs_per_room: 8,
            utterances_per_rir: 2,
            prior: RoomPrior::default(),
            boundary: BoundaryConfig::default(),
            split: SplitRatios::default(),
            test_pool: TestPool::RealOnly,
        }
    }

    pub fn desk() -> Self {
        Self {
            clip_seconds: 2.0,
            synthetic_rooms: 500,
            rirs_per_room: 4,
            utterances_per_rir: 1,
            test_pool: TestPool::AnyRoom,
            ..Self::paper()
        }
    }

    pub fn clip_samples(&self) -> usize {
        (self.clip_seconds * crate::SAMPLE_RATE as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip_seconds > 0.0) || self.rirs_per_room == 0 || self.utterances_per_rir == 0 {
            return Err(Error::Config("data sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Pairs rendered as waveform and spectrogram images.
    pub plot_pairs: usize,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            plot_pairs: 3,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub data: DataConfig,
    pub features: FeatureConfig,
    pub brpe: BrpeConfig,
    pub brpe_train: BrpeTrainConfig,
    pub model: ModelConfig,
    pub loss: StftLossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn paper() -> Self {
        let brpe = BrpeConfig::paper();
        Self {
            preset: Preset::Paper,
            seed: 0,
            data: DataConfig::paper(),
            features: FeatureConfig::default(),
            model: ModelConfig {
                encoder: EncoderConfig::paper(),
                fusion: FusionConfig {
                    q_dim: brpe.d_model,
                    ..FusionConfig::default()
                },
                decoder: DecoderConfig::paper(),
                boundary: BoundaryMode::Dynamic,
            },
            brpe,
            brpe_train: BrpeTrainConfig::default(),
            loss: StftLossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn desk() -> Self {
        let brpe = BrpeConfig::desk();
        let paper = Self::paper();
        Self {
            preset: Preset::Desk,
            data: DataConfig::desk(),
            model: ModelConfig {
                encoder: EncoderConfig::desk(),
                fusion: FusionConfig {
                    q_dim: brpe.d_model,
                    ..FusionConfig::default()
                },
                decoder: DecoderConfig::desk(),
                boundary: BoundaryMode::Dynamic,
            },
            brpe,
            brpe_train: BrpeTrainConfig {
                pretrain_epochs: 3,
                finetune_epochs: 30,
                batch_size: 16,
                pretrain_lr: 1e-3,
                finetune_lr: 1e-3,
                ..BrpeTrainConfig::default()
            },
            train: TrainConfig {
                epochs: 200,
                batch_size: 4,
                lr_init: 2e-3,
                checkpoint_every: 10,
                ..TrainConfig::default()
            },
            ..paper
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self::paper(),
            Preset::Desk => Self::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.features.stft_params()?;
        if self.features.erb_bands == 0 {
            return Err(Error::Config("features need at least one ERB band".into()));
        }
        self.brpe.validate()?;
        self.brpe_train.validate()?;
        self.model.validate(&self.brpe)?;
        self.loss.params()?;
        self.train.validate()?;
        let rows = crate::dsp::round_up_16(3 * self.features.erb_bands) / crate::brpe::PATCH;
        if rows > self.brpe.max_patch_rows {
            return Err(Error::Config(format!(
                "{rows} patch rows exceed the positional table ({})",
                self.brpe.max_patch_rows
            )));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path)?;
        Self::from_json(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn with_fusion(mut self, method: FusionMethod) -> Self {
        self.model.fusion.method = method;
        self
    }

    pub fn with_boundary(mut self, mode: BoundaryMode) -> Self {
        self.model.boundary = mode;
        self
    }

    pub fn with_ground_truth(mut self, on: bool) -> Self {
        self.model.fusion.ground_truth_params = on;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.brpe_train.seed = seed;
        self
    }
}
