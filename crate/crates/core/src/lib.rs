//! Blind room impulse response estimation from reverberant speech.

pub mod acoustics;
pub mod audio;
pub mod brpe;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod dsp;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod loss;
pub mod model;
pub mod nn;
pub mod ssm;
pub mod train;

pub use audio::{AudioClip, SAMPLE_RATE};
pub use brpe::{Brpe, BrpeConfig, BrpeOutputs};
pub use config::{Preset, RunConfig};
pub use dataset::{CorpusEntry, LogParams, RoomParams, Split};
pub use decoder::{Decoder, DecoderConfig, RirEstimate};
pub use dsp::{FeatureBlock2D, FeatureConfig, Spectrogram};
pub use error::{Error, ErrorKind, Result};
pub use fusion::{Fusion, FusionConfig, FusionMethod};
pub use loss::{MultiResStftLoss, StftLossConfig};
pub use model::{BoundaryMode, ModelConfig, Pipeline, RirModel};
pub use train::TrainConfig;
