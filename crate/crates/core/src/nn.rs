//! Parameter storage and the layer toolkit shared by the networks.
//!
//! Convolutions pad explicitly and run the candle kernel with zero padding;
//! candle's CPU backward for padded convolutions is far slower.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{CpuStorage, CustomOp2, DType, Device, Layout, Shape, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "rirest";
pub const CHECKPOINT_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    Uniform(f64, f64),
    Normal(f64),
    /// Uniform in ±1/sqrt(fan_in).
    FanIn(usize),
}

/// Named trainable variables plus non-trainable buffers, initialised from a
/// seeded generator.
pub struct ParamStore {
    vars: RefCell<BTreeMap<String, Var>>,
    buffers: RefCell<BTreeMap<String, Var>>,
    rng: RefCell<ChaCha8Rng>,
    device: Device,
    dtype: DType,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: RefCell::new(BTreeMap::new()),
            buffers: RefCell::new(BTreeMap::new()),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            device: Device::Cpu,
            dtype,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn root(&self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    fn init_tensor(&self, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut rng = self.rng.borrow_mut();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(v) => vec![v; n],
            Init::Uniform(a, b) => (0..n).map(|_| rng.random_range(a..b)).collect(),
            Init::Normal(std) => (0..n)
                .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut *rng))
                .collect(),
            Init::FanIn(fan_in) => {
                let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-b..b)).collect()
            }
        };
        Ok(Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    fn get_or_create(&self, buffer: bool, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        self.get_or_create_with(buffer, name, shape, |store| store.init_tensor(shape, init))
    }

    fn get_or_create_with(
        &self,
        buffer: bool,
        name: String,
        shape: &[usize],
        make: impl FnOnce(&Self) -> Result<Tensor>,
    ) -> Result<Tensor> {
        let map = if buffer { &self.buffers } else { &self.vars };
        if let Some(v) = map.borrow().get(&name) {
            if v.dims() != shape {
                return Err(Error::Shape(format!(
                    "parameter {name} exists with shape {:?}, requested {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let var = Var::from_tensor(&make(self)?)?;
        let t = var.as_tensor().clone();
        map.borrow_mut().insert(name, var);
        Ok(t)
    }

    /// Trainable variables sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.vars.borrow().iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    /// Trainable variables whose name does not start with any of `exclude`.
    pub fn vars_excluding(&self, exclude: &[&str]) -> Vec<(String, Var)> {
        self.vars()
            .into_iter()
            .filter(|(k, _)| !exclude.iter().any(|p| k.starts_with(p)))
            .collect()
    }

    pub fn buffers(&self) -> Vec<(String, Var)> {
        self.buffers.borrow().iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars.borrow().values().map(|v| v.elem_count()).sum()
    }

    /// All tensors (variables and buffers) whose names start with `prefix`.
    pub fn tensors_with_prefix(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .vars
            .borrow()
            .iter()
            .chain(self.buffers.borrow().iter())
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.as_detached_tensor()))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// FNV-1a hash over names and raw values of all tensors under `prefix`.
    pub fn fingerprint(&self, prefix: &str) -> Result<u64> {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, t) in self.tensors_with_prefix(prefix) {
            eat(name.as_bytes());
            for v in t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
                eat(&v.to_le_bytes());
            }
        }
        Ok(h)
    }

    /// Writes tensors under `prefix` as safetensors with a format header.
    pub fn save(&self, path: impl AsRef<Path>, prefix: &str) -> Result<()> {
        let tensors: HashMap<String, Tensor> = self.tensors_with_prefix(prefix).into_iter().collect();
        if tensors.is_empty() {
            return Err(Error::Checkpoint(format!("no parameters under prefix '{prefix}'")));
        }
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
        meta.insert("version".to_string(), CHECKPOINT_VERSION.to_string());
        safetensors::serialize_to_file(&tensors, Some(meta), path.as_ref())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(())
    }

    /// Loads every tensor in the file into the existing variable of the same
    /// name. Unknown names, missing names under `prefix`, and shape
    /// mismatches are errors.
    pub fn load(&self, path: impl AsRef<Path>, prefix: &str) -> Result<()> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let header = meta.metadata().clone().unwrap_or_default();
        if header.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT)
            || header.get("version").map(String::as_str) != Some(CHECKPOINT_VERSION)
        {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported checkpoint header {header:?}",
                path.display()
            )));
        }
        let loaded = candle_core::safetensors::load_buffer(&bytes, &self.device)?;
        let vars = self.vars.borrow();
        let buffers = self.buffers.borrow();
        for (name, _) in self.tensors_with_prefix(prefix) {
            if !loaded.contains_key(&name) {
                return Err(Error::Checkpoint(format!("{}: missing tensor {name}", path.display())));
            }
        }
        for (name, t) in loaded {
            let var = vars
                .get(&name)
                .or_else(|| buffers.get(&name))
                .ok_or_else(|| Error::Checkpoint(format!("{}: unexpected tensor {name}", path.display())))?;
            if var.dims() != t.dims() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} in file, {:?} in model",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// A name prefix into a [`ParamStore`].
#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, name: &str) -> Scope<'a> {
        Scope {
            store: self.store,
            prefix: self.path(name),
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store.get_or_create(false, self.path(name), shape, init)
    }

    /// Trainable tensor initialised by `make`, which draws from the store's
    /// generator and returns `shape.iter().product()` values.
    pub fn get_with(
        &self,
        name: &str,
        shape: &[usize],
        make: impl FnOnce(&mut ChaCha8Rng) -> Vec<f64>,
    ) -> Result<Tensor> {
        self.store.get_or_create_with(false, self.path(name), shape, |store| {
            let data = make(&mut store.rng.borrow_mut());
            Ok(Tensor::from_vec(data, shape, &store.device)?.to_dtype(store.dtype)?)
        })
    }

    pub fn buffer(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store.get_or_create(true, self.path(name), shape, init)
    }

    pub fn buffer_var(&self, name: &str) -> Option<Var> {
        self.store.buffers.borrow().get(&self.path(name)).cloned()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn rng_seed(&self) -> u64 {
        self.store.rng.borrow_mut().random()
    }
}

/// Affine map over the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(s: &Scope, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_bias(s, d_in, d_out, true)
    }

    pub fn with_bias(s: &Scope, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let weight = s.get("weight", &[d_out, d_in], Init::FanIn(d_in))?;
        let bias = if bias {
            Some(s.get("bias", &[d_out], Init::FanIn(d_in))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn from_parts(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().ok_or_else(|| Error::Shape("linear on a scalar".into()))?;
        let rows = x.elem_count() / d_in.max(1);
        let y = x.reshape((rows, d_in))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvCfg {
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub dilation: usize,
    pub bias: bool,
}

impl ConvCfg {
    /// Stride-1 "same" convolution for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        let p = dilation * (kernel - 1) / 2;
        Self {
            stride: 1,
            pad_left: p,
            pad_right: p,
            dilation,
            bias: true,
        }
    }

    /// Stride-2 convolution mapping length L (even) to L/2.
    pub fn halving(kernel: usize) -> Self {
        // Total padding k-2 makes the padded length match the backward pass
        // exactly (no output padding) while still giving L/2 outputs.
        let total = kernel.saturating_sub(2);
        Self {
            stride: 2,
            pad_left: total / 2,
            pad_right: total - total / 2,
            dilation: 1,
            bias: true,
        }
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

/// 1-D convolution over (batch, channels, time).
#[derive(Debug, Clone)]
pub struct Conv1d {
    weight: Tensor,
    bias: Option<Tensor>,
    cfg: ConvCfg,
}

impl Conv1d {
    pub fn new(s: &Scope, c_in: usize, c_out: usize, kernel: usize, cfg: ConvCfg) -> Result<Self> {
        let fan_in = c_in * kernel;
        let weight = s.get("weight", &[c_out, c_in, kernel], Init::FanIn(fan_in))?;
        let bias = if cfg.bias {
            Some(s.get("bias", &[c_out], Init::FanIn(fan_in))?)
        } else {
            None
        };
        Ok(Self { weight, bias, cfg })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.cfg;
        let x = if c.pad_left + c.pad_right > 0 {
            x.pad_with_zeros(D::Minus1, c.pad_left, c.pad_right)?
        } else {
            x.clone()
        };
        let y = conv1d(&x, &self.weight, c.stride, c.dilation)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1))?)?,
            None => y,
        })
    }
}

/// Unpadded cross-correlation of x (B, C, L) with w (C_out, C, K);
/// (B, C_out, L_out).
pub fn conv1d(x: &Tensor, w: &Tensor, stride: usize, dilation: usize) -> Result<Tensor> {
    let (_, c, lp) = x.dims3()?;
    let (_, c_w, k) = w.dims3()?;
    if c_w != c || stride == 0 || dilation == 0 || k == 0 {
        return Err(Error::Shape(format!("conv kernel {:?} does not fit input {:?}", w.dims(), x.dims())));
    }
    if lp < dilation * (k - 1) + 1 {
        return Err(Error::Shape(format!("input length {lp} shorter than the kernel span")));
    }
    Ok(x.contiguous()?.apply_op2(&w.contiguous()?, Conv1dOp { stride, dilation })?)
}

/// Convolution with an explicit backward pass: both gradients are again
/// forward convolutions on contiguous operands.
struct Conv1dOp {
    stride: usize,
    dilation: usize,
}

fn storage_tensor(s: &CpuStorage, l: &Layout) -> candle_core::Result<Tensor> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("conv needs contiguous operands".into()))?;
    match s {
        CpuStorage::F32(v) => Tensor::from_slice(&v[start..end], l.shape(), &Device::Cpu),
        CpuStorage::F64(v) => Tensor::from_slice(&v[start..end], l.shape(), &Device::Cpu),
        _ => candle_core::bail!("conv supports f32 and f64"),
    }
}

impl CustomOp2 for Conv1dOp {
    fn name(&self) -> &'static str {
        "conv1d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let y = storage_tensor(s1, l1)?.conv1d(&storage_tensor(s2, l2)?, 0, self.stride, self.dilation, 1)?;
        let shape = y.shape().clone();
        let flat = y.flatten_all()?;
        Ok(match s1 {
            CpuStorage::F32(_) => (CpuStorage::F32(flat.to_vec1()?), shape),
            _ => (CpuStorage::F64(flat.to_vec1()?), shape),
        })
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _y: &Tensor,
        g: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (s, d) = (self.stride, self.dilation);
        let (x, w, g) = (x.detach(), w.detach(), g.detach().contiguous()?);
        let (b, o, l) = g.dims3()?;
        let (_, _, k) = w.dims3()?;
        let lp = x.dim(2)?;
        // dL/dw[o, c, k] = Σ_b Σ_t g[b, o, t] · x[b, c, t·s + k·d]
        let gw = x
            .transpose(0, 1)?
            .contiguous()?
            .conv1d(&g.transpose(0, 1)?.contiguous()?, 0, d, s, 1)?
            .narrow(2, 0, k)?
            .transpose(0, 1)?
            .contiguous()?;
        // dL/dx[b, c, p] = Σ_o Σ_k g↑[b, o, p − k·d] · w[o, c, k], g↑ = g spread by the stride.
        let spread = (l - 1) * s + 1;
        let g_up = if s == 1 {
            g
        } else {
            g.unsqueeze(3)?.pad_with_zeros(3, 0, s - 1)?.reshape((b, o, l * s))?.narrow(2, 0, spread)?
        };
        let flip: Vec<u32> = (0..k as u32).rev().collect();
        let w_adj = w
            .index_select(&Tensor::new(flip.as_slice(), w.device())?, 2)?
            .transpose(0, 1)?
            .contiguous()?;
        let gx = g_up
            .pad_with_zeros(2, d * (k - 1), lp - spread)?
            .conv1d(&w_adj, 0, 1, d, 1)?;
        Ok((Some(gx), Some(gw)))
    }
}

/// Transposed convolution with kernel 4, stride 2 and padding 1 (length
/// L -> 2L), evaluated as two stride-1 convolutions over the even and odd
/// output phases.
#[derive(Debug, Clone)]
pub struct Upsample2 {
    weight: Tensor,
    bias: Tensor,
}

impl Upsample2 {
    pub fn new(s: &Scope, c_in: usize, c_out: usize) -> Result<Self> {
        // Stored as (c_out, c_in, 4); fan-in per output sample is 2 taps.
        let w = s.get("weight", &[c_out, c_in, 4], Init::FanIn(c_in * 2))?;
        let bias = s.get("bias", &[c_out], Init::FanIn(c_in * 2))?;
        Ok(Self { weight: w, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, l) = x.dims3()?;
        let dev = self.weight.device();
        let even = self.weight.index_select(&Tensor::new(&[3u32, 1], dev)?, 2)?;
        let odd = self.weight.index_select(&Tensor::new(&[2u32, 0], dev)?, 2)?;
        let ye = conv1d(&x.pad_with_zeros(D::Minus1, 1, 0)?, &even, 1, 1)?;
        let yo = conv1d(&x.pad_with_zeros(D::Minus1, 0, 1)?, &odd, 1, 1)?;
        let c = ye.dim(1)?;
        let y = Tensor::stack(&[ye, yo], 3)?.reshape((b, c, 2 * l))?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1))?)?)
    }
}

/// Nearest-neighbour ×2 upsampling along time.
pub fn repeat2(x: &Tensor) -> Result<Tensor> {
    let (b, c, l) = x.dims3()?;
    Ok(x.unsqueeze(3)?.broadcast_as((b, c, l, 2))?.contiguous()?.reshape((b, c, 2 * l))?)
}

/// Every other time step, starting at 0.
pub fn decimate2(x: &Tensor) -> Result<Tensor> {
    let (b, c, l) = x.dims3()?;
    if l % 2 != 0 {
        return Err(Error::Shape(format!("cannot decimate odd length {l}")));
    }
    Ok(x.reshape((b, c, l / 2, 2))?.narrow(3, 0, 1)?.squeeze(3)?)
}

/// Batch normalisation over (batch, channels, time) with running statistics
/// kept as buffers.
#[derive(Clone)]
pub struct BatchNorm1d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm1d {
    pub fn new(s: &Scope, channels: usize) -> Result<Self> {
        let weight = s.get("weight", &[channels], Init::Const(1.0))?;
        let bias = s.get("bias", &[channels], Init::Zeros)?;
        s.buffer("running_mean", &[channels], Init::Zeros)?;
        s.buffer("running_var", &[channels], Init::Const(1.0))?;
        Ok(Self {
            weight,
            bias,
            running_mean: s.buffer_var("running_mean").expect("just created"),
            running_var: s.buffer_var("running_var").expect("just created"),
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, _, l) = x.dims3()?;
        let (mean, var) = if train {
            let mean = x.mean_keepdim((0, 2))?;
            let centred = x.broadcast_sub(&mean)?;
            let var = centred.sqr()?.mean_keepdim((0, 2))?;
            let n = (b * l) as f64;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let m = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                + (mean.detach().flatten_all()? * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))?
                + (var.detach().flatten_all()? * (m * unbiased))?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape((1, (), 1))?,
                self.running_var.as_tensor().reshape((1, (), 1))?,
            )
        };
        let xn = x.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn
            .broadcast_mul(&self.weight.reshape((1, (), 1))?)?
            .broadcast_add(&self.bias.reshape((1, (), 1))?)?)
    }
}

/// Parametric ReLU with one slope per channel.
#[derive(Debug, Clone)]
pub struct PRelu {
    alpha: Tensor,
}

impl PRelu {
    pub fn new(s: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            alpha: s.get("alpha", &[channels], Init::Const(0.25))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let neg = x.minimum(0.0)?;
        let pos = x.relu()?;
        Ok((pos + neg.broadcast_mul(&self.alpha.reshape((1, (), 1))?)?)?)
    }
}

/// Layer normalisation over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(s: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: s.get("weight", &[dim], Init::Const(1.0))?,
            bias: s.get("bias", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::silu(x)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// ln(1 + e^x), stable for large |x|.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? + (x.minimum(0.0)? * slope)?)?)
}

/// Global L2 norm of the gradients of `vars`; clips them in place so the
/// norm does not exceed `max_norm`. Returns (norm before, norm after).
pub fn clip_grad_norm(
    vars: &[(String, Var)],
    grads: &mut candle_core::backprop::GradStore,
    max_norm: f64,
) -> Result<(f64, f64)> {
    let mut sq = 0.0;
    for (_, v) in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Ok((norm, norm));
    }
    if norm <= max_norm {
        return Ok((norm, norm));
    }
    let scale = max_norm / (norm + 1e-12);
    let mut sq_after = 0.0;
    for (_, v) in vars {
        if let Some(g) = grads.remove(v.as_tensor()) {
            let g = (g * scale)?;
            sq_after += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            grads.insert(v.as_tensor(), g);
        }
    }
    Ok((norm, sq_after.sqrt()))
}
