//! The RIR estimator: audio encoder, room-feature fusion and decoder, driven
//! by room features from the parameter estimator or from ground truth.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::brpe::{Brpe, BrpeConfig, BrpeOutputs};
use crate::dataset::RIR_LEN;
use crate::decoder::{draw_noise, pool_latent, Decoder, DecoderConfig, RirEstimate};
use crate::dsp::{extract_feature_block_with, ErbFilterbank, FeatureConfig};
use crate::encoder::{AudioEncoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionConfig, GroundTruthEmbedding};
use crate::nn::{ParamStore, Scope};
use crate::AudioClip;

/// Boundary between the early channel and the filtered-noise tail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    /// Per-item boundary: labels in training, estimates at inference.
    Dynamic,
    /// 50 ms for every item.
    #[serde(rename = "fixed50ms")]
    Fixed50ms,
}

pub const FIXED_BP_SAMPLES: usize = 800;

impl BoundaryMode {
    /// Boundary points to use given per-item candidates.
    pub fn resolve(self, candidates: &[usize]) -> Vec<usize> {
        match self {
            BoundaryMode::Dynamic => candidates.to_vec(),
            BoundaryMode::Fixed50ms => vec![FIXED_BP_SAMPLES; candidates.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
    pub boundary: BoundaryMode,
}

impl ModelConfig {
    pub fn validate(&self, brpe: &BrpeConfig) -> Result<()> {
        self.encoder.validate()?;
        self.fusion.validate()?;
        self.decoder.validate()?;
        if self.fusion.n_a != self.encoder.latent_channels {
            return Err(Error::Config(format!(
                "fusion width {} differs from encoder latent width {}",
                self.fusion.n_a, self.encoder.latent_channels
            )));
        }
        if self.decoder.n_c != self.fusion.n_c {
            return Err(Error::Config(format!(
                "decoder latent {} differs from fused width {}",
                self.decoder.n_c, self.fusion.n_c
            )));
        }
        if self.fusion.q_dim != brpe.d_model {
            return Err(Error::Config(format!(
                "fusion expects room features of width {}, the estimator yields {}",
                self.fusion.q_dim, brpe.d_model
            )));
        }
        if self.decoder.rir_len != RIR_LEN {
            return Err(Error::Config(format!("decoder must produce {RIR_LEN} samples")));
        }
        Ok(())
    }
}

/// Room features fed to the fusion stage.
#[derive(Debug, Clone)]
pub struct RoomFeatures {
    pub q_v: Tensor,
    pub q_zeta: Tensor,
}

pub struct RirModel {
    cfg: ModelConfig,
    encoder: AudioEncoder,
    fusion: Fusion,
    gt: Option<GroundTruthEmbedding>,
    decoder: Decoder,
}

impl RirModel {
    pub fn new(s: &Scope, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            encoder: AudioEncoder::new(&s.pp("encoder"), &cfg.encoder)?,
            fusion: Fusion::new(&s.pp("fusion"), &cfg.fusion)?,
            gt: if cfg.fusion.ground_truth_params {
                Some(GroundTruthEmbedding::new(&s.pp("gt_embed"), cfg.fusion.q_dim)?)
            } else {
                None
            },
            decoder: Decoder::new(&s.pp("decoder"), &cfg.decoder)?,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &AudioEncoder {
        &self.encoder
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    /// Room features from ground-truth log10 volume and log10(κ·RT60), (B,).
    pub fn ground_truth_features(&self, log_v: &Tensor, log_rt: &Tensor) -> Result<RoomFeatures> {
        let gt = self
            .gt
            .as_ref()
            .ok_or_else(|| Error::Config("ground-truth parameter injection is disabled".into()))?;
        let (q_v, q_zeta) = gt.forward(log_v, log_rt)?;
        Ok(RoomFeatures { q_v, q_zeta })
    }

    pub fn uses_ground_truth(&self) -> bool {
        self.gt.is_some()
    }

    /// Speech (B, T) to RIR estimates. `bp` is per item and already resolved
    /// against the boundary mode; `f` optionally supplies the filtered noise.
    pub fn forward(
        &self,
        speech: &Tensor,
        room: &RoomFeatures,
        v: &Tensor,
        bp: &[usize],
        train: bool,
        f: Option<&Tensor>,
    ) -> Result<RirEstimate> {
        let f_s = self.encoder.forward(speech, train)?;
        let f_c = self.fusion.forward(&room.q_v, &room.q_zeta, &f_s)?;
        let d = pool_latent(&f_c)?;
        match f {
            Some(f) => self.decoder.decode_with_bank(&d, v, bp, f),
            None => self.decoder.decode(&d, v, bp),
        }
    }
}

/// Estimate for one clip together with the estimator outputs that drove it.
pub struct Estimate {
    pub rir: AudioClip,
    pub early: AudioClip,
    pub bp_used: usize,
    pub log_v: f64,
    pub log_rt: f64,
    pub log_bp: f64,
}

/// Both networks with their stores, ready for inference.
pub struct Pipeline {
    pub features: FeatureConfig,
    pub filterbank: ErbFilterbank,
    pub brpe_store: ParamStore,
    pub brpe: Brpe,
    pub model_store: ParamStore,
    pub model: RirModel,
}

impl Pipeline {
    pub fn new(features: FeatureConfig, brpe_cfg: &BrpeConfig, model_cfg: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        model_cfg.validate(brpe_cfg)?;
        let brpe_store = ParamStore::new(seed, dtype);
        let brpe = Brpe::new(&brpe_store.root().pp("brpe"), brpe_cfg)?;
        let model_store = ParamStore::new(seed.wrapping_add(1), dtype);
        let model = RirModel::new(&model_store.root().pp("model"), model_cfg)?;
        Ok(Self {
            filterbank: features.filterbank()?,
            features,
            brpe_store,
            brpe,
            model_store,
            model,
        })
    }

    pub fn device(&self) -> &Device {
        self.model_store.device()
    }

    pub fn dtype(&self) -> DType {
        self.model_store.dtype()
    }

    pub fn brpe_outputs(&self, clips: &[AudioClip]) -> Result<BrpeOutputs> {
        let blocks = clips
            .iter()
            .map(|c| extract_feature_block_with(c, &self.features, &self.filterbank))
            .collect::<Result<Vec<_>>>()?;
        self.brpe.estimate(&blocks)
    }

    /// Runs the estimator chain on one reverberant clip. The noise vector is
    /// drawn from `seed`.
    pub fn estimate(&self, speech: &AudioClip, seed: u64) -> Result<Estimate> {
        speech.require_rate(crate::SAMPLE_RATE)?;
        if self.model.uses_ground_truth() {
            return Err(Error::Config(
                "this checkpoint expects ground-truth parameters; estimation needs estimator features".into(),
            ));
        }
        let out = self.brpe_outputs(std::slice::from_ref(speech))?;
        let lp = out.to_log_params(crate::dataset::RT_KAPPA)?[0];
        let bp_est = out.bp_samples(RIR_LEN)?;
        let bp = self.model.config().boundary.resolve(&bp_est);
        let x = Tensor::from_vec(speech.samples().to_vec(), (1, speech.len()), self.device())?.to_dtype(self.dtype())?;
        let v = draw_noise(1, self.model.config().decoder.z_dim, seed, self.dtype(), self.device())?;
        let room = RoomFeatures {
            q_v: out.q_v,
            q_zeta: out.q_zeta,
        };
        let est = self.model.forward(&x, &room, &v, &bp, false, None)?;
        let to_clip = |t: &Tensor| -> Result<AudioClip> {
            AudioClip::at_16k(t.squeeze(0)?.to_dtype(DType::F64)?.to_vec1()?)
        };
        Ok(Estimate {
            rir: to_clip(&est.h_hat)?,
            early: to_clip(&est.h_early)?,
            bp_used: bp[0],
            log_v: lp.log_v,
            log_rt: lp.log_rt,
            log_bp: lp.log_bp,
        })
    }
}
