//! Convolutional audio encoder: stride-2 residual blocks of
//! conv → batch norm → PReLU, then a 1×1 projection to the latent width.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{decimate2, BatchNorm1d, Conv1d, ConvCfg, PRelu, Scope};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Output channels of each block; one stride-2 block per entry.
    pub channels: Vec<usize>,
    pub layers_per_block: usize,
    pub first_kernel: usize,
    pub kernel: usize,
    pub latent_channels: usize,
}

impl EncoderConfig {
    pub fn paper() -> Self {
        Self {
            channels: vec![32, 64, 128, 256, 512],
            layers_per_block: 4,
            first_kernel: 15,
            kernel: 7,
            latent_channels: 128,
        }
    }

    pub fn desk() -> Self {
        Self {
            channels: vec![8, 16, 32, 64, 128],
            ..Self::paper()
        }
    }

    pub fn downsampling(&self) -> usize {
        1 << self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("encoder channels must be nonempty and positive".into()));
        }
        if self.layers_per_block == 0 || self.latent_channels == 0 {
            return Err(Error::Config("encoder layer counts must be positive".into()));
        }
        if self.first_kernel % 2 == 0 || self.kernel % 2 == 0 {
            return Err(Error::Config("encoder kernels must be odd".into()));
        }
        Ok(())
    }
}

struct ConvBnAct {
    conv: Conv1d,
    bn: BatchNorm1d,
    act: PRelu,
}

impl ConvBnAct {
    fn new(s: &Scope, c_in: usize, c_out: usize, kernel: usize, cfg: ConvCfg) -> Result<Self> {
        Ok(Self {
            conv: Conv1d::new(&s.pp("conv"), c_in, c_out, kernel, cfg.no_bias())?,
            bn: BatchNorm1d::new(&s.pp("bn"), c_out)?,
            act: PRelu::new(&s.pp("act"), c_out)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.act.forward(&self.bn.forward(&self.conv.forward(x)?, train)?)
    }
}

struct EncoderBlock {
    layers: Vec<ConvBnAct>,
    res_conv: Conv1d,
    res_bn: BatchNorm1d,
}

impl EncoderBlock {
    fn new(s: &Scope, c_in: usize, c_out: usize, cfg: &EncoderConfig) -> Result<Self> {
        let mut layers = Vec::with_capacity(cfg.layers_per_block);
        layers.push(ConvBnAct::new(
            &s.pp("layers.0"),
            c_in,
            c_out,
            cfg.first_kernel,
            ConvCfg::halving(cfg.first_kernel),
        )?);
        for i in 1..cfg.layers_per_block {
            layers.push(ConvBnAct::new(
                &s.pp(&format!("layers.{i}")),
                c_out,
                c_out,
                cfg.kernel,
                ConvCfg::same(cfg.kernel, 1),
            )?);
        }
        Ok(Self {
            layers,
            res_conv: Conv1d::new(&s.pp("res.conv"), c_in, c_out, 1, ConvCfg::same(1, 1).no_bias())?,
            res_bn: BatchNorm1d::new(&s.pp("res.bn"), c_out)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward(&h, train)?;
        }
        // A stride-2 1×1 convolution reads every other sample.
        let r = self.res_bn.forward(&self.res_conv.forward(&decimate2(x)?)?, train)?;
        Ok((h + r)?)
    }
}

pub struct AudioEncoder {
    blocks: Vec<EncoderBlock>,
    proj: Conv1d,
    factor: usize,
}

impl AudioEncoder {
    pub fn new(s: &Scope, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::new();
        let mut c_in = 1;
        for (i, &c) in cfg.channels.iter().enumerate() {
            blocks.push(EncoderBlock::new(&s.pp(&format!("blocks.{i}")), c_in, c, cfg)?);
            c_in = c;
        }
        Ok(Self {
            blocks,
            proj: Conv1d::new(&s.pp("proj"), c_in, cfg.latent_channels, 1, ConvCfg::same(1, 1))?,
            factor: cfg.downsampling(),
        })
    }

    pub fn downsampling(&self) -> usize {
        self.factor
    }

    /// Number of output frames for an input of `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        len.div_ceil(self.factor)
    }

    /// Encodes (B, T) waveforms into (B, latent, ceil(T / factor)) features,
    /// right-padding T with zeros to a multiple of the downsampling factor.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, t) = x.dims2()?;
        if t == 0 {
            return Err(Error::EmptyInput("speech clip"));
        }
        let padded = self.frames_for(t) * self.factor;
        let mut h = x.pad_with_zeros(D::Minus1, 0, padded - t)?.unsqueeze(1)?;
        for b in &self.blocks {
            h = b.forward(&h, train)?;
        }
        self.proj.forward(&h)
    }
}
