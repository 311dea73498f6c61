//! Multi-resolution STFT loss: spectral convergence plus log-magnitude
//! distance, averaged over resolutions.

use std::sync::Arc;

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor};
use serde::{Deserialize, Serialize};

use crate::dsp::{StftParams, StftPlan, Window};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftLossConfig {
    pub frame_lens: Vec<usize>,
    /// Floor inside the log of the magnitude term.
    pub mag_floor: f64,
}

impl Default for StftLossConfig {
    fn default() -> Self {
        Self {
            frame_lens: vec![32, 256, 1024, 4096],
            mag_floor: 1e-7,
        }
    }
}

impl StftLossConfig {
    pub fn params(&self) -> Result<Vec<StftParams>> {
        if self.frame_lens.is_empty() {
            return Err(Error::Config("loss needs at least one resolution".into()));
        }
        if !(self.mag_floor > 0.0) {
            return Err(Error::Config("mag_floor must be positive".into()));
        }
        self.frame_lens
            .iter()
            .map(|&f| StftParams::new(f, f / 2, Window::Hann))
            .collect()
    }
}

/// Magnitude spectrogram of each row of a (B, T) tensor, as (B, frames,
/// bins). The backward pass is the exact adjoint of the windowed DFT.
#[derive(Clone)]
pub struct StftMagnitude {
    plan: Arc<StftPlan>,
}

impl StftMagnitude {
    pub fn new(plan: Arc<StftPlan>) -> Self {
        Self { plan }
    }
}

impl CustomOp1 for StftMagnitude {
    fn name(&self) -> &'static str {
        "stft-magnitude"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, t) = layout.shape().dims2()?;
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("stft needs a contiguous input".into()))?;
        let x: Vec<f64> = match storage {
            CpuStorage::F32(v) => v[start..end].iter().map(|&s| s as f64).collect(),
            CpuStorage::F64(v) => v[start..end].to_vec(),
            _ => candle_core::bail!("stft supports f32 and f64"),
        };
        let p = self.plan.params();
        let frames = p
            .frame_count(t)
            .map_err(|e| candle_core::Error::Msg(e.to_string()))?;
        let bins = p.bins();
        let mut out = Vec::with_capacity(b * frames * bins);
        for row in x.chunks(t) {
            let spec = self.plan.forward(row).map_err(|e| candle_core::Error::Msg(e.to_string()))?;
            out.extend(spec.iter().map(|c| c.norm()));
        }
        let shape = Shape::from((b, frames, bins));
        Ok(match storage {
            CpuStorage::F32(_) => (CpuStorage::F32(out.into_iter().map(|v| v as f32).collect()), shape),
            _ => (CpuStorage::F64(out), shape),
        })
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (b, t) = arg.dims2()?;
        let x: Vec<f64> = arg.contiguous()?.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
        let g: Vec<f64> = grad.contiguous()?.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
        let per = g.len() / b.max(1);
        let mut gx = Vec::with_capacity(b * t);
        for (row, grow) in x.chunks(t).zip(g.chunks(per)) {
            let spec = self.plan.forward(row).map_err(|e| candle_core::Error::Msg(e.to_string()))?;
            gx.extend(self.plan.magnitude_vjp(&spec, grow, t));
        }
        Ok(Some(Tensor::from_vec(gx, (b, t), arg.device())?.to_dtype(arg.dtype())?))
    }
}

/// Per-resolution loss terms for a batch, each averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub sc: f64,
    pub mag: f64,
}

/// The loss as a differentiable scalar, plus its per-resolution parts.
pub struct LossOutput {
    pub total: Tensor,
    pub per_resolution: Vec<LossTerms>,
}

/// Multi-resolution STFT loss over (B, T) batches.
#[derive(Clone)]
pub struct MultiResStftLoss {
    ops: Vec<StftMagnitude>,
    floor: f64,
}

impl MultiResStftLoss {
    pub fn new(cfg: &StftLossConfig) -> Result<Self> {
        let ops = cfg
            .params()?
            .into_iter()
            .map(|p| Ok(StftMagnitude::new(Arc::new(StftPlan::new(p)?))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ops,
            floor: cfg.mag_floor,
        })
    }

    pub fn resolutions(&self) -> usize {
        self.ops.len()
    }

    /// `h` is the reference, `h_hat` the estimate; both (B, T).
    pub fn forward(&self, h: &Tensor, h_hat: &Tensor) -> Result<LossOutput> {
        if h.dims() != h_hat.dims() {
            return Err(Error::Shape(format!(
                "loss operands differ: {:?} vs {:?}",
                h.dims(),
                h_hat.dims()
            )));
        }
        let h = h.contiguous()?;
        let h_hat = h_hat.contiguous()?;
        let mut total: Option<Tensor> = None;
        let mut parts = Vec::with_capacity(self.ops.len());
        for op in &self.ops {
            let m = h.apply_op1(op.clone())?;
            let mh = h_hat.apply_op1(op.clone())?;
            let frames = m.dim(1)? as f64;
            let den = m.sqr()?.sum((1, 2))?.sqrt()?;
            let den_vals: Vec<f64> = den.to_dtype(DType::F64)?.to_vec1()?;
            if den_vals.iter().any(|&d| d == 0.0) {
                return Err(Error::UndefinedSc);
            }
            let num = (&m - &mh)?.sqr()?.sum((1, 2))?.sqrt()?;
            let sc = (num / den)?.mean_all()?;
            let lm = m.maximum(self.floor)?.log()?;
            let lmh = mh.maximum(self.floor)?.log()?;
            let mag = ((lm - lmh)?.abs()?.sum((1, 2))? / frames)?.mean_all()?;
            parts.push(LossTerms {
                sc: sc.to_dtype(DType::F64)?.to_scalar()?,
                mag: mag.to_dtype(DType::F64)?.to_scalar()?,
            });
            let term = (sc + mag)?;
            total = Some(match total {
                Some(t) => (t + term)?,
                None => term,
            });
        }
        let total = (total.expect("at least one resolution") / self.ops.len() as f64)?;
        Ok(LossOutput {
            total,
            per_resolution: parts,
        })
    }

    pub fn value(&self, h: &Tensor, h_hat: &Tensor) -> Result<f64> {
        Ok(self.forward(h, h_hat)?.total.to_dtype(DType::F64)?.to_scalar()?)
    }
}

fn magnitudes(x: &[f64], params: &StftParams) -> Result<(Vec<f64>, usize)> {
    let plan = StftPlan::new(*params)?;
    let frames = params.frame_count(x.len())?;
    Ok((plan.forward(x)?.iter().map(|c| c.norm()).collect(), frames))
}

/// Spectral convergence for one resolution, in f64.
pub fn spectral_convergence(h: &[f64], h_hat: &[f64], params: &StftParams) -> Result<f64> {
    if h.len() != h_hat.len() {
        return Err(Error::Shape(format!("lengths {} and {}", h.len(), h_hat.len())));
    }
    let (m, _) = magnitudes(h, params)?;
    let (mh, _) = magnitudes(h_hat, params)?;
    let den: f64 = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    if den == 0.0 {
        return Err(Error::UndefinedSc);
    }
    let num: f64 = m.iter().zip(&mh).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(num / den)
}

/// Log STFT magnitude distance for one resolution: L1 over bins and frames
/// divided by the frame count.
pub fn log_stft_magnitude(h: &[f64], h_hat: &[f64], params: &StftParams, floor: f64) -> Result<f64> {
    if h.len() != h_hat.len() {
        return Err(Error::Shape(format!("lengths {} and {}", h.len(), h_hat.len())));
    }
    let (m, frames) = magnitudes(h, params)?;
    let (mh, _) = magnitudes(h_hat, params)?;
    let l1: f64 = m
        .iter()
        .zip(&mh)
        .map(|(a, b)| (a.max(floor).ln() - b.max(floor).ln()).abs())
        .sum();
    Ok(l1 / frames as f64)
}

/// Mean over resolutions of SC + MAG for one pair, in f64.
pub fn multi_res_stft_loss(h: &[f64], h_hat: &[f64], cfg: &StftLossConfig) -> Result<f64> {
    let params = cfg.params()?;
    let mut acc = 0.0;
    for p in &params {
        acc += spectral_convergence(h, h_hat, p)? + log_stft_magnitude(h, h_hat, p, cfg.mag_floor)?;
    }
    Ok(acc / params.len() as f64)
}
