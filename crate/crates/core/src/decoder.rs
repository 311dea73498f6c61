//! Conditional upsampling decoder producing a one-second RIR from a fused
//! latent, a noise vector and an early/late boundary.
//!
//! The generator emits one early-reflection channel and G mask channels.
//! Each mask gates a trainable FIR-filtered copy of a fixed noise sequence,
//! and a bias-free 1×1 mix combines the early channel with the gated bands.

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{conv1d, leaky_relu, repeat2, sigmoid, Conv1d, ConvCfg, Init, Linear, Scope, Upsample2};

const NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    /// Width of the pooled fused latent d.
    pub n_c: usize,
    /// Length of the noise vector v.
    pub z_dim: usize,
    pub seed_len: usize,
    pub seed_channels: usize,
    /// Output channels of each ×2 block.
    pub channels: Vec<usize>,
    pub dilations: [usize; 2],
    /// Number of filtered-noise bands G.
    pub filters: usize,
    /// FIR length Γ + 1.
    pub taps: usize,
    pub rir_len: usize,
}

impl DecoderConfig {
    pub fn paper() -> Self {
        Self {
            n_c: 256,
            z_dim: 128,
            seed_len: 125,
            seed_channels: 256,
            channels: vec![256, 256, 128, 128, 64, 64, 32],
            dilations: [2, 4],
            filters: 10,
            taps: 512,
            rir_len: 16_000,
        }
    }

    pub fn desk() -> Self {
        Self {
            seed_channels: 128,
            channels: vec![128, 64, 64, 32, 32, 16, 16],
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed_len << self.channels.len() != self.rir_len {
            return Err(Error::Config(format!(
                "seed length {} doubled {} times is not {}",
                self.seed_len,
                self.channels.len(),
                self.rir_len
            )));
        }
        if [self.n_c, self.z_dim, self.seed_len, self.seed_channels, self.filters, self.taps]
            .contains(&0)
            || self.channels.contains(&0)
            || self.dilations.contains(&0)
        {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Stage lengths from the seed to the output, seed_len · 2^k.
    pub fn stage_lengths(&self) -> Vec<usize> {
        (0..=self.channels.len()).map(|k| self.seed_len << k).collect()
    }
}

/// Temporal mean of (B, N_c, L) features.
pub fn pool_latent(f_c: &Tensor) -> Result<Tensor> {
    if f_c.dim(2)? == 0 {
        return Err(Error::EmptyInput("fused features"));
    }
    Ok(f_c.mean(2)?)
}

/// Standard-normal noise vectors (B, z_dim) from a seed.
pub fn draw_noise(batch: usize, z_dim: usize, seed: u64, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..batch * z_dim)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    Ok(Tensor::from_vec(v, (batch, z_dim), device)?.to_dtype(dtype)?)
}

/// Conditional normalisation: each channel is standardised over time, then
/// modulated by γ ⊙ x + β with γ = 1 + Δγ.
pub struct Film {
    net: Linear,
    channels: usize,
}

impl Film {
    pub fn new(s: &Scope, cond_dim: usize, channels: usize) -> Result<Self> {
        // Zero init: every FiLM layer starts as the identity.
        let net = Linear::from_parts(
            s.get("weight", &[2 * channels, cond_dim], Init::Zeros)?,
            Some(s.get("bias", &[2 * channels], Init::Zeros)?),
        );
        Ok(Self { net, channels })
    }

    /// Per-channel (γ, β), each (B, C).
    pub fn scale_shift(&self, cond: &Tensor) -> Result<(Tensor, Tensor)> {
        let gb = self.net.forward(cond)?;
        let dgamma = gb.narrow(1, 0, self.channels)?;
        let beta = gb.narrow(1, self.channels, self.channels)?;
        Ok(((dgamma + 1.0)?, beta))
    }

    pub fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let (gamma, beta) = self.scale_shift(cond)?;
        film_apply(&instance_norm(x)?, &gamma, &beta)
    }
}

/// Zero-mean, unit-variance channels over the time axis of (B, C, T).
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(xc.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?)
}

/// γ ⊙ x + β with (B, C) coefficients broadcast over time.
pub fn film_apply(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_mul(&gamma.unsqueeze(2)?)?.broadcast_add(&beta.unsqueeze(2)?)?)
}

struct UpBlock {
    film_a1: Film,
    up: Upsample2,
    film_a2: Film,
    conv_a: Conv1d,
    res: Conv1d,
    film_b1: Film,
    conv_b1: Conv1d,
    film_b2: Film,
    conv_b2: Conv1d,
}

impl UpBlock {
    fn new(s: &Scope, cond: usize, c_in: usize, c_out: usize, dil: [usize; 2]) -> Result<Self> {
        Ok(Self {
            film_a1: Film::new(&s.pp("film_a1"), cond, c_in)?,
            up: Upsample2::new(&s.pp("up"), c_in, c_out)?,
            film_a2: Film::new(&s.pp("film_a2"), cond, c_out)?,
            conv_a: Conv1d::new(&s.pp("conv_a"), c_out, c_out, 3, ConvCfg::same(3, 1))?,
            res: Conv1d::new(&s.pp("res"), c_in, c_out, 1, ConvCfg::same(1, 1).no_bias())?,
            film_b1: Film::new(&s.pp("film_b1"), cond, c_out)?,
            conv_b1: Conv1d::new(&s.pp("conv_b1"), c_out, c_out, 3, ConvCfg::same(3, dil[0]))?,
            film_b2: Film::new(&s.pp("film_b2"), cond, c_out)?,
            conv_b2: Conv1d::new(&s.pp("conv_b2"), c_out, c_out, 3, ConvCfg::same(3, dil[1]))?,
        })
    }

    fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let act = |t: Tensor| leaky_relu(&t, LEAKY_SLOPE);
        // Stage A: coarse upsampling.
        let h = act(self.film_a1.forward(x, cond)?)?;
        let h = self.up.forward(&h)?;
        let h = act(self.film_a2.forward(&h, cond)?)?;
        let a = (self.conv_a.forward(&h)? + self.res.forward(&repeat2(x)?)?)?;
        // Stage B: dilated refinement.
        let h = act(self.film_b1.forward(&a, cond)?)?;
        let h = self.conv_b1.forward(&h)?;
        let h = act(self.film_b2.forward(&h, cond)?)?;
        let h = self.conv_b2.forward(&h)?;
        Ok((a + h)?)
    }
}

/// Trainable FIR taps λ (G, taps) over a fixed noise sequence e.
pub struct FilterBank {
    taps: Tensor,
    noise: Tensor,
}

impl FilterBank {
    pub fn new(s: &Scope, filters: usize, taps: usize, len: usize) -> Result<Self> {
        Ok(Self {
            taps: s.get("taps", &[filters, taps], Init::Normal(1.0 / (taps as f64).sqrt()))?,
            noise: s.buffer("noise", &[len], Init::Normal(1.0))?,
        })
    }

    pub fn from_parts(taps: Tensor, noise: Tensor) -> Self {
        Self { taps, noise }
    }

    pub fn taps(&self) -> &Tensor {
        &self.taps
    }

    pub fn noise(&self) -> &Tensor {
        &self.noise
    }

    /// f_g(n) = Σ_γ λ[g, γ] e[n − γ] with zero history; (G, len).
    pub fn filtered_noise(&self) -> Result<Tensor> {
        let (g, k) = self.taps.dims2()?;
        let len = self.noise.dim(0)?;
        let flip: Vec<u32> = (0..k as u32).rev().collect();
        let kernel = self
            .taps
            .index_select(&Tensor::new(flip.as_slice(), self.taps.device())?, 1)?
            .reshape((g, 1, k))?;
        let e = self.noise.reshape((1, 1, len))?.pad_with_zeros(D::Minus1, k - 1, 0)?;
        Ok(conv1d(&e, &kernel, 1, 1)?.reshape((g, len))?)
    }
}

/// A synthesized RIR batch with its intermediate signals.
#[derive(Debug, Clone)]
pub struct RirEstimate {
    /// (B, rir_len)
    pub h_hat: Tensor,
    /// (B, rir_len), zero from `bp_used` on.
    pub h_early: Tensor,
    /// Pre-sigmoid masks (B, G, rir_len).
    pub masks: Tensor,
    /// Gated filtered noise (B, G, rir_len).
    pub subbands: Tensor,
    pub bp_used: Vec<usize>,
}

pub struct Decoder {
    cfg: DecoderConfig,
    seed: Linear,
    blocks: Vec<UpBlock>,
    out: Conv1d,
    bank: FilterBank,
    mix: Conv1d,
}

impl Decoder {
    pub fn new(s: &Scope, cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let cond = cfg.n_c + cfg.z_dim;
        let mut blocks = Vec::with_capacity(cfg.channels.len());
        let mut c_in = cfg.seed_channels;
        for (i, &c) in cfg.channels.iter().enumerate() {
            blocks.push(UpBlock::new(&s.pp(&format!("blocks.{i}")), cond, c_in, c, cfg.dilations)?);
            c_in = c;
        }
        Ok(Self {
            seed: Linear::new(&s.pp("seed"), cond, cfg.seed_channels * cfg.seed_len)?,
            blocks,
            out: Conv1d::new(&s.pp("out"), c_in, 1 + cfg.filters, 3, ConvCfg::same(3, 1))?,
            bank: FilterBank::new(&s.pp("bank"), cfg.filters, cfg.taps, cfg.rir_len)?,
            mix: Conv1d::new(&s.pp("mix"), 1 + cfg.filters, 1, 1, ConvCfg::same(1, 1).no_bias())?,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn filter_bank(&self) -> &FilterBank {
        &self.bank
    }

    /// Generator output before masking, (B, 1 + G, rir_len), with the
    /// intermediate lengths of every stage.
    pub fn generate(&self, d: &Tensor, v: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        let (b, n_c) = d.dims2()?;
        if n_c != self.cfg.n_c || v.dims2()? != (b, self.cfg.z_dim) {
            return Err(Error::Shape(format!(
                "decoder expects d (B, {}) and v (B, {}), got {:?} and {:?}",
                self.cfg.n_c,
                self.cfg.z_dim,
                d.dims(),
                v.dims()
            )));
        }
        let cond = Tensor::cat(&[d, v], 1)?;
        let mut h = self
            .seed
            .forward(&cond)?
            .reshape((b, self.cfg.seed_channels, self.cfg.seed_len))?;
        let mut lengths = vec![h.dim(2)?];
        for blk in &self.blocks {
            h = blk.forward(&h, &cond)?;
            lengths.push(h.dim(2)?);
        }
        Ok((self.out.forward(&leaky_relu(&h, LEAKY_SLOPE)?)?, lengths))
    }

    /// Early-reflection mask (B, 1, rir_len): 1 before bp, 0 from bp on.
    fn early_mask(&self, bp: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let n = self.cfg.rir_len;
        let mut m = vec![0f64; bp.len() * n];
        for (i, &p) in bp.iter().enumerate() {
            m[i * n..i * n + p].fill(1.0);
        }
        Ok(Tensor::from_vec(m, (bp.len(), 1, n), device)?.to_dtype(dtype)?)
    }

    pub fn check_bp(&self, bp: &[usize]) -> Result<()> {
        if let Some(&p) = bp.iter().find(|&&p| p == 0 || p > self.cfg.rir_len) {
            return Err(Error::InvalidArgument(format!(
                "boundary point {p} outside 1..={}",
                self.cfg.rir_len
            )));
        }
        Ok(())
    }

    /// Synthesizes RIRs from pooled latents d (B, N_c), noise v (B, Z) and
    /// per-item boundary points in samples.
    pub fn decode(&self, d: &Tensor, v: &Tensor, bp: &[usize]) -> Result<RirEstimate> {
        let f = self.bank.filtered_noise()?;
        self.decode_with_bank(d, v, bp, &f)
    }

    /// As [`Decoder::decode`] with precomputed filtered noise (G, rir_len),
    /// which depends only on the weights.
    pub fn decode_with_bank(&self, d: &Tensor, v: &Tensor, bp: &[usize], f: &Tensor) -> Result<RirEstimate> {
        let b = d.dim(0)?;
        if bp.len() != b {
            return Err(Error::Shape(format!("{} boundary points for batch {b}", bp.len())));
        }
        self.check_bp(bp)?;
        let (y, _) = self.generate(d, v)?;
        let g = self.cfg.filters;
        let early = y.narrow(1, 0, 1)?.broadcast_mul(&self.early_mask(bp, y.dtype(), y.device())?)?;
        let masks = y.narrow(1, 1, g)?;
        let subbands = sigmoid(&masks)?.broadcast_mul(&f.unsqueeze(0)?)?;
        let h_hat = self.mix.forward(&Tensor::cat(&[&early, &subbands], 1)?)?.squeeze(1)?;
        Ok(RirEstimate {
            h_hat,
            h_early: early.squeeze(1)?,
            masks,
            subbands,
            bp_used: bp.to_vec(),
        })
    }
}
