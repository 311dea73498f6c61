//! Room-parameter estimator over stacked spectro-temporal feature blocks.
//!
//! A block is cut into 16×16 patches, embedded, given learned positional
//! embeddings and encoded by a stack of bidirectional selective-scan blocks.
//! Mean-pooled outputs feed two projection branches (q_v, q_zeta) and three
//! linear heads regressing log10 volume, log10(κ·RT60) and log10 boundary.

use candle_core::{DType, Device, Tensor, D};
use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LogParams;
use crate::dsp::FeatureBlock2D;
use crate::error::{Error, Result};
use crate::nn::{silu, Init, Linear, Scope};
use crate::ssm::{BiSsmEncoder, SsmConfig};

pub const PATCH: usize = 16;
pub const PATCH_LEN: usize = PATCH * PATCH;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrpeConfig {
    pub d_model: usize,
    pub depth: usize,
    pub d_state: usize,
    pub expand: usize,
    pub conv_kernel: usize,
    /// Positional table size in patches along features and time.
    pub max_patch_rows: usize,
    pub max_patch_cols: usize,
    pub mask_ratio: f64,
    pub temperature: f64,
    pub disc_weight: f64,
    pub gen_weight: f64,
}

impl BrpeConfig {
    pub fn paper() -> Self {
        Self {
            d_model: 192,
            depth: 8,
            d_state: 16,
            expand: 2,
            conv_kernel: 4,
            max_patch_rows: 12,
            max_patch_cols: 64,
            mask_ratio: 0.4,
            temperature: 0.07,
            disc_weight: 1.0,
            gen_weight: 1.0,
        }
    }

    pub fn desk() -> Self {
        Self {
            d_model: 96,
            depth: 4,
            ..Self::paper()
        }
    }

    pub fn ssm(&self) -> SsmConfig {
        SsmConfig {
            d_model: self.d_model,
            d_state: self.d_state,
            expand: self.expand,
            conv_kernel: self.conv_kernel,
            share_directions: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.d_model, self.depth, self.d_state, self.expand, self.conv_kernel].contains(&0)
            || self.max_patch_rows == 0
            || self.max_patch_cols == 0
        {
            return Err(Error::Config("estimator dimensions must be positive".into()));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("mask ratio {} outside (0, 1)", self.mask_ratio)));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("contrastive temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Row-major 16×16 tiling: patch j = r·(cols/16) + c, each flattened
/// row-major. Returns (J, 256).
pub fn patchify(values: &Array2<f64>) -> Result<Array2<f64>> {
    let (rows, cols) = values.dim();
    if rows % PATCH != 0 || cols % PATCH != 0 || rows == 0 || cols == 0 {
        return Err(Error::Shape(format!("block {rows}x{cols} is not tiled by {PATCH}x{PATCH}")));
    }
    let (pr, pc) = (rows / PATCH, cols / PATCH);
    Ok(Array2::from_shape_fn((pr * pc, PATCH_LEN), |(j, k)| {
        values[[(j / pc) * PATCH + k / PATCH, (j % pc) * PATCH + k % PATCH]]
    }))
}

pub fn unpatchify(patches: &Array2<f64>, rows: usize, cols: usize) -> Result<Array2<f64>> {
    if rows % PATCH != 0 || cols % PATCH != 0 || patches.dim() != (rows * cols / PATCH_LEN, PATCH_LEN) {
        return Err(Error::Shape(format!(
            "{:?} patches do not tile a {rows}x{cols} block",
            patches.dim()
        )));
    }
    let pc = cols / PATCH;
    Ok(Array2::from_shape_fn((rows, cols), |(r, c)| {
        patches[[(r / PATCH) * pc + c / PATCH, (r % PATCH) * PATCH + c % PATCH]]
    }))
}

/// Tensor form of [`patchify`]: (B, R, C) → (B, J, 256).
pub fn patchify_tensor(x: &Tensor) -> Result<Tensor> {
    let (b, r, c) = x.dims3()?;
    if r % PATCH != 0 || c % PATCH != 0 {
        return Err(Error::Shape(format!("block {r}x{c} is not tiled by {PATCH}x{PATCH}")));
    }
    Ok(x
        .reshape((b, r / PATCH, PATCH, c / PATCH, PATCH))?
        .permute((0, 1, 3, 2, 4))?
        .contiguous()?
        .reshape((b, (r / PATCH) * (c / PATCH), PATCH_LEN))?)
}

/// Sorted positions of the masked patches out of `j`.
pub fn mask_indices(j: usize, ratio: f64, seed: u64) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let count = (ratio * j as f64).round() as usize;
    if count == 0 {
        return Err(Error::InvalidArgument(format!(
            "mask ratio {ratio} selects no patches out of {j}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, j, count.min(j)).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// FNV-1a hash of a block's values; seeds its patch mask so masking does not
/// depend on batch position.
pub fn block_hash(block: &FeatureBlock2D) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in block.values.iter() {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

/// Global features and log-domain predictions for a batch.
#[derive(Debug, Clone)]
pub struct BrpeOutputs {
    pub q_v: Tensor,
    pub q_zeta: Tensor,
    /// (B, 3): log_v, log_rt, log_bp.
    pub log_params: Tensor,
}

impl BrpeOutputs {
    pub fn to_log_params(&self, kappa: f64) -> Result<Vec<LogParams>> {
        let rows: Vec<Vec<f64>> = self.log_params.to_dtype(DType::F64)?.to_vec2()?;
        Ok(rows
            .into_iter()
            .map(|r| LogParams {
                log_v: r[0],
                log_rt: r[1],
                log_bp: r[2],
                kappa,
            })
            .collect())
    }

    /// Per-item (q_v, q_zeta) rows.
    pub fn feature_rows(&self) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let v: Vec<Vec<f64>> = self.q_v.to_dtype(DType::F64)?.to_vec2()?;
        let z: Vec<Vec<f64>> = self.q_zeta.to_dtype(DType::F64)?.to_vec2()?;
        Ok(v.into_iter().zip(z).collect())
    }

    /// Boundary points in samples: 10^log_bp rounded and clamped to [1, max].
    pub fn bp_samples(&self, max: usize) -> Result<Vec<usize>> {
        let col: Vec<f64> = self.log_params.narrow(1, 2, 1)?.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
        Ok(col.iter().map(|&l| bp_from_log(l, max)).collect())
    }
}

pub fn bp_from_log(log_bp: f64, max: usize) -> usize {
    let v = 10f64.powf(log_bp).round();
    if v.is_finite() {
        (v as usize).clamp(1, max)
    } else if log_bp > 0.0 {
        max
    } else {
        1
    }
}

#[derive(Debug, Clone)]
pub struct PretrainLosses {
    pub discriminative: Tensor,
    pub generative: Tensor,
    pub total: Tensor,
}

pub struct Brpe {
    cfg: BrpeConfig,
    device: Device,
    dtype: DType,
    embed: Linear,
    pos: Tensor,
    mask_token: Tensor,
    encoder: BiSsmEncoder,
    proj_v: Linear,
    proj_zeta: Linear,
    head_v: Linear,
    head_rt: Linear,
    head_bp: Linear,
    gen_head: Linear,
    disc_head: Linear,
    feat_mean: candle_core::Var,
    feat_std: candle_core::Var,
    out_center: candle_core::Var,
    out_scale: candle_core::Var,
}

impl Brpe {
    pub fn new(s: &Scope, cfg: &BrpeConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let buf = |name: &str, init: Init| -> Result<candle_core::Var> {
            s.buffer(name, &[3], init)?;
            Ok(s.buffer_var(name).expect("just created"))
        };
        Ok(Self {
            embed: Linear::new(&s.pp("embed"), PATCH_LEN, d)?,
            pos: s.get("pos", &[cfg.max_patch_rows * cfg.max_patch_cols, d], Init::Normal(0.02))?,
            mask_token: s.get("mask_token", &[d], Init::Normal(0.02))?,
            encoder: BiSsmEncoder::new(&s.pp("encoder"), cfg.ssm(), cfg.depth)?,
            proj_v: Linear::new(&s.pp("proj_v"), d, d)?,
            proj_zeta: Linear::new(&s.pp("proj_zeta"), d, d)?,
            head_v: Linear::new(&s.pp("head_v"), d, 1)?,
            head_rt: Linear::new(&s.pp("head_rt"), d, 1)?,
            head_bp: Linear::new(&s.pp("head_bp"), 2 * d, 1)?,
            gen_head: Linear::new(&s.pp("gen_head"), d, PATCH_LEN)?,
            disc_head: Linear::new(&s.pp("disc_head"), d, d)?,
            feat_mean: buf("feat_mean", Init::Zeros)?,
            feat_std: buf("feat_std", Init::Const(1.0))?,
            out_center: buf("out_center", Init::Zeros)?,
            out_scale: buf("out_scale", Init::Const(1.0))?,
            device: s.device().clone(),
            dtype: s.dtype(),
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &BrpeConfig {
        &self.cfg
    }

    /// Width of q_v and q_zeta.
    pub fn q_dim(&self) -> usize {
        self.cfg.d_model
    }

    fn read3(v: &candle_core::Var) -> Result<[f64; 3]> {
        let x: Vec<f64> = v.as_tensor().to_dtype(DType::F64)?.to_vec1()?;
        Ok([x[0], x[1], x[2]])
    }

    fn write3(&self, v: &candle_core::Var, x: [f64; 3]) -> Result<()> {
        v.set(&Tensor::new(&x, &self.device)?.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Per-channel mean and standard deviation over the unpadded region of
    /// `blocks`, used to standardise inputs from then on.
    pub fn fit_feature_norm(&self, blocks: &[FeatureBlock2D]) -> Result<()> {
        if blocks.is_empty() {
            return Err(Error::EmptyInput("feature blocks"));
        }
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        let mut n = [0f64; 3];
        for b in blocks {
            for c in 0..3 {
                let region = b.values.slice(ndarray::s![c * b.erb_bands..(c + 1) * b.erb_bands, ..b.frames]);
                for &v in region.iter() {
                    sum[c] += v;
                    sq[c] += v * v;
                    n[c] += 1.0;
                }
            }
        }
        let mean: [f64; 3] = std::array::from_fn(|c| sum[c] / n[c].max(1.0));
        let std: [f64; 3] = std::array::from_fn(|c| (sq[c] / n[c].max(1.0) - mean[c] * mean[c]).max(0.0).sqrt().max(1e-6));
        self.write3(&self.feat_mean, mean)?;
        self.write3(&self.feat_std, std)
    }

    pub fn feature_norm(&self) -> Result<([f64; 3], [f64; 3])> {
        Ok((Self::read3(&self.feat_mean)?, Self::read3(&self.feat_std)?))
    }

    /// Sets the output affine so raw head outputs of 0 and ±1 map to the
    /// label mean and mean ± std of each parameter.
    pub fn set_output_affine(&self, center: [f64; 3], scale: [f64; 3]) -> Result<()> {
        self.write3(&self.out_center, center)?;
        self.write3(&self.out_scale, scale)
    }

    pub fn output_affine(&self) -> Result<([f64; 3], [f64; 3])> {
        Ok((Self::read3(&self.out_center)?, Self::read3(&self.out_scale)?))
    }

    /// Standardised (B, R, C) input tensor; padding stays zero.
    pub fn blocks_to_tensor(&self, blocks: &[FeatureBlock2D]) -> Result<Tensor> {
        let first = blocks.first().ok_or(Error::EmptyInput("feature blocks"))?;
        let (r, c) = first.shape();
        let (mean, std) = self.feature_norm()?;
        let mut data = Vec::with_capacity(blocks.len() * r * c);
        for b in blocks {
            if b.shape() != (r, c) {
                return Err(Error::Shape(format!("batch mixes block shapes {:?} and {:?}", (r, c), b.shape())));
            }
            for (row, line) in b.values.outer_iter().enumerate() {
                let ch = row / b.erb_bands.max(1);
                for (col, &v) in line.iter().enumerate() {
                    data.push(if ch < 3 && col < b.frames {
                        (v - mean[ch]) / std[ch]
                    } else {
                        0.0
                    });
                }
            }
        }
        Ok(Tensor::from_vec(data, (blocks.len(), r, c), &self.device)?.to_dtype(self.dtype)?)
    }

    fn positions(&self, rows: usize, cols: usize) -> Result<Tensor> {
        let (pr, pc) = (rows / PATCH, cols / PATCH);
        if pr > self.cfg.max_patch_rows || pc > self.cfg.max_patch_cols {
            return Err(Error::Shape(format!(
                "{pr}x{pc} patch grid exceeds the {}x{} positional table",
                self.cfg.max_patch_rows, self.cfg.max_patch_cols
            )));
        }
        let idx: Vec<u32> = (0..pr)
            .flat_map(|r| (0..pc).map(move |c| (r * self.cfg.max_patch_cols + c) as u32))
            .collect();
        Ok(self.pos.index_select(&Tensor::new(idx.as_slice(), &self.device)?, 0)?)
    }

    /// Patches (B, J, 256), their embeddings E (B, J, D) and positions (J, D).
    pub fn embed(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (_, r, c) = x.dims3()?;
        let patches = patchify_tensor(x)?;
        let e = self.embed.forward(&patches)?;
        Ok((patches, e, self.positions(r, c)?))
    }

    /// Encoder outputs O (B, J, D) for an unmasked batch.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let (_, e, p) = self.embed(x)?;
        self.encoder.forward(&e.broadcast_add(&p)?)
    }

    fn heads(&self, o: &Tensor) -> Result<BrpeOutputs> {
        let pooled = o.mean(1)?;
        let q_v = silu(&self.proj_v.forward(&pooled)?)?;
        let q_zeta = silu(&self.proj_zeta.forward(&pooled)?)?;
        let raw = Tensor::cat(
            &[
                self.head_v.forward(&q_v)?,
                self.head_rt.forward(&q_zeta)?,
                self.head_bp.forward(&Tensor::cat(&[&q_v, &q_zeta], 1)?)?,
            ],
            1,
        )?;
        let log_params = raw
            .broadcast_mul(&self.out_scale.as_tensor().unsqueeze(0)?)?
            .broadcast_add(&self.out_center.as_tensor().unsqueeze(0)?)?;
        Ok(BrpeOutputs { q_v, q_zeta, log_params })
    }

    pub fn forward(&self, x: &Tensor) -> Result<BrpeOutputs> {
        self.heads(&self.encode(x)?)
    }

    pub fn estimate(&self, blocks: &[FeatureBlock2D]) -> Result<BrpeOutputs> {
        self.forward(&self.blocks_to_tensor(blocks)?)
    }

    /// Mean squared error between predicted and target log parameters (B, 3).
    pub fn finetune_loss(&self, x: &Tensor, targets: &Tensor) -> Result<Tensor> {
        let out = self.forward(x)?;
        Ok((out.log_params - targets)?.sqr()?.mean_all()?)
    }

    /// Masked-patch losses. `seeds[i]` seeds the mask of item i, so the
    /// losses do not depend on batch order when seeds travel with items.
    pub fn pretrain_losses(&self, x: &Tensor, seeds: &[u64]) -> Result<PretrainLosses> {
        let (b, _, _) = x.dims3()?;
        if seeds.len() != b {
            return Err(Error::Shape(format!("{} mask seeds for batch {b}", seeds.len())));
        }
        let (patches, e, p) = self.embed(x)?;
        let (_, j, d) = e.dims3()?;
        let mut mask = vec![0f64; b * j];
        let mut flat_idx = Vec::new();
        for (i, &seed) in seeds.iter().enumerate() {
            for m in mask_indices(j, self.cfg.mask_ratio, seed)? {
                mask[i * j + m] = 1.0;
                flat_idx.push((i * j + m) as u32);
            }
        }
        let m = Tensor::from_vec(mask, (b, j, 1), &self.device)?.to_dtype(self.dtype)?;
        let keep = (m.ones_like()? - &m)?;
        let tokens = self.mask_token.reshape((1, 1, d))?.broadcast_as((b, j, d))?;
        let e_in = (e.broadcast_mul(&keep)? + tokens.broadcast_mul(&m)?)?.broadcast_add(&p)?;
        let o = self.encoder.forward(&e_in)?;
        let idx = Tensor::new(flat_idx.as_slice(), &self.device)?;
        let o_m = o.reshape((b * j, d))?.index_select(&idx, 0)?;

        let target = patches.reshape((b * j, PATCH_LEN))?.index_select(&idx, 0)?;
        let generative = (self.gen_head.forward(&o_m)? - target)?.sqr()?.mean_all()?;

        let pred = l2_normalize(&self.disc_head.forward(&o_m)?)?;
        let keys = l2_normalize(&e.reshape((b * j, d))?.index_select(&idx, 0)?.detach())?;
        let logits = (pred.matmul(&keys.t()?)? / self.cfg.temperature)?;
        let discriminative = info_nce(&logits)?;

        let total = ((&discriminative * self.cfg.disc_weight)? + (&generative * self.cfg.gen_weight)?)?;
        Ok(PretrainLosses {
            discriminative,
            generative,
            total,
        })
    }
}

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let n = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&n)?)
}

/// Cross-entropy of each row against its diagonal entry, averaged.
fn info_nce(logits: &Tensor) -> Result<Tensor> {
    let m = logits.dim(0)?;
    let lsm = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let eye = Tensor::eye(m, lsm.dtype(), lsm.device())?;
    Ok(((lsm * eye)?.sum_all()? / -(m as f64))?)
}
