//! Selective state-space scan and the bidirectional block built on it.

use candle_core::{CpuStorage, CustomOp3, DType, Layout, Shape, Tensor, D};

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{silu, softplus, Init, LayerNorm, Linear, Scope};

/// Sequential selective scan, computed in f64.
///
/// Inputs: `dx` (B, J, 2E) holding step sizes then inputs, `a` (E, N),
/// `bc` (B, J, 2N) holding input then output projections. Output (B, J, E):
///
/// h_t = exp(Δ_t A) ⊙ h_{t-1} + Δ_t B_t x_t,   y_t = C_t · h_t
///
/// With `reverse` the recurrence runs from the last position to the first.
#[derive(Debug, Clone, Copy)]
pub struct SelectiveScan {
    pub reverse: bool,
}

struct Dims {
    b: usize,
    j: usize,
    e: usize,
    n: usize,
}

fn to_f64(s: &CpuStorage, l: &Layout) -> candle_core::Result<Vec<f64>> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("selective scan needs contiguous inputs".into()))?;
    Ok(match s {
        CpuStorage::F32(v) => v[start..end].iter().map(|&x| x as f64).collect(),
        CpuStorage::F64(v) => v[start..end].to_vec(),
        _ => candle_core::bail!("selective scan supports f32 and f64"),
    })
}

fn scan_dims(l1: &Layout, l2: &Layout, l3: &Layout) -> candle_core::Result<Dims> {
    let (b, j, e2) = l1.shape().dims3()?;
    let (e, n) = l2.shape().dims2()?;
    let (b3, j3, n2) = l3.shape().dims3()?;
    if e2 != 2 * e || n2 != 2 * n || b3 != b || j3 != j {
        candle_core::bail!(
            "selective scan shapes: dx {:?}, a {:?}, bc {:?}",
            l1.dims(),
            l2.dims(),
            l3.dims()
        );
    }
    Ok(Dims { b, j, e, n })
}

impl SelectiveScan {
    fn order(&self, j: usize, step: usize) -> usize {
        if self.reverse {
            j - 1 - step
        } else {
            step
        }
    }

    pub fn forward_f64(&self, dx: &[f64], a: &[f64], bc: &[f64], b: usize, j: usize, e: usize, n: usize) -> Vec<f64> {
        let mut y = vec![0.0; b * j * e];
        let mut h = vec![0.0; n];
        for bi in 0..b {
            for ei in 0..e {
                h.iter_mut().for_each(|v| *v = 0.0);
                let arow = &a[ei * n..(ei + 1) * n];
                for step in 0..j {
                    let t = self.order(j, step);
                    let row = bi * j + t;
                    let delta = dx[row * 2 * e + ei];
                    let xv = dx[row * 2 * e + e + ei];
                    let bvec = &bc[row * 2 * n..row * 2 * n + n];
                    let cvec = &bc[row * 2 * n + n..(row + 1) * 2 * n];
                    let mut acc = 0.0;
                    for ni in 0..n {
                        h[ni] = (delta * arow[ni]).exp() * h[ni] + delta * bvec[ni] * xv;
                        acc += cvec[ni] * h[ni];
                    }
                    y[row * e + ei] = acc;
                }
            }
        }
        y
    }

    /// Vector-Jacobian product; returns gradients for (dx, a, bc).
    #[allow(clippy::too_many_arguments)]
    pub fn backward_f64(
        &self,
        dx: &[f64],
        a: &[f64],
        bc: &[f64],
        gy: &[f64],
        b: usize,
        j: usize,
        e: usize,
        n: usize,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut gdx = vec![0.0; dx.len()];
        let mut ga = vec![0.0; a.len()];
        let mut gbc = vec![0.0; bc.len()];
        let mut hs = vec![0.0; j * n];
        let mut das = vec![0.0; j * n];
        let mut gh = vec![0.0; n];
        for bi in 0..b {
            for ei in 0..e {
                let arow = &a[ei * n..(ei + 1) * n];
                for step in 0..j {
                    let row = bi * j + self.order(j, step);
                    let delta = dx[row * 2 * e + ei];
                    let xv = dx[row * 2 * e + e + ei];
                    let bvec = &bc[row * 2 * n..row * 2 * n + n];
                    for ni in 0..n {
                        let prev = if step > 0 { hs[(step - 1) * n + ni] } else { 0.0 };
                        let da = (delta * arow[ni]).exp();
                        das[step * n + ni] = da;
                        hs[step * n + ni] = da * prev + delta * bvec[ni] * xv;
                    }
                }
                gh.iter_mut().for_each(|v| *v = 0.0);
                for step in (0..j).rev() {
                    let row = bi * j + self.order(j, step);
                    let delta = dx[row * 2 * e + ei];
                    let xv = dx[row * 2 * e + e + ei];
                    let g = gy[row * e + ei];
                    let (mut g_delta, mut g_x) = (0.0, 0.0);
                    for ni in 0..n {
                        let bv = bc[row * 2 * n + ni];
                        let cv = bc[row * 2 * n + n + ni];
                        let h = hs[step * n + ni];
                        let prev = if step > 0 { hs[(step - 1) * n + ni] } else { 0.0 };
                        let da = das[step * n + ni];
                        gh[ni] += cv * g;
                        gbc[row * 2 * n + n + ni] += g * h;
                        g_delta += gh[ni] * (arow[ni] * da * prev + bv * xv);
                        ga[ei * n + ni] += gh[ni] * delta * da * prev;
                        gbc[row * 2 * n + ni] += gh[ni] * delta * xv;
                        g_x += gh[ni] * delta * bv;
                        gh[ni] *= da;
                    }
                    gdx[row * 2 * e + ei] += g_delta;
                    gdx[row * 2 * e + e + ei] += g_x;
                }
            }
        }
        (gdx, ga, gbc)
    }
}

fn tensor_f64(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    t.contiguous()?.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()
}

impl CustomOp3 for SelectiveScan {
    fn name(&self) -> &'static str {
        "selective-scan"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = scan_dims(l1, l2, l3)?;
        let y = self.forward_f64(&to_f64(s1, l1)?, &to_f64(s2, l2)?, &to_f64(s3, l3)?, d.b, d.j, d.e, d.n);
        let shape = Shape::from((d.b, d.j, d.e));
        let out = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(y.into_iter().map(|v| v as f32).collect()),
            _ => CpuStorage::F64(y),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        dx: &Tensor,
        a: &Tensor,
        bc: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (b, j, e2) = dx.dims3()?;
        let (e, n) = a.dims2()?;
        debug_assert_eq!(e2, 2 * e);
        let (gdx, ga, gbc) = self.backward_f64(
            &tensor_f64(dx)?,
            &tensor_f64(a)?,
            &tensor_f64(bc)?,
            &tensor_f64(grad)?,
            b,
            j,
            e,
            n,
        );
        let dev = dx.device();
        let dt = dx.dtype();
        Ok((
            Some(Tensor::from_vec(gdx, (b, j, 2 * e), dev)?.to_dtype(dt)?),
            Some(Tensor::from_vec(ga, (e, n), dev)?.to_dtype(a.dtype())?),
            Some(Tensor::from_vec(gbc, (b, j, 2 * n), dev)?.to_dtype(bc.dtype())?),
        ))
    }
}

/// Applies the scan to separate tensors: delta, x (B, J, E); a (E, N);
/// b, c (B, J, N).
pub fn selective_scan(delta: &Tensor, x: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, reverse: bool) -> Result<Tensor> {
    let dx = Tensor::cat(&[delta, x], 2)?.contiguous()?;
    let bc = Tensor::cat(&[b, c], 2)?.contiguous()?;
    Ok(dx.apply_op3(&a.contiguous()?, &bc, SelectiveScan { reverse })?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsmConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub expand: usize,
    pub conv_kernel: usize,
    /// Use one set of direction-specific weights for both directions.
    pub share_directions: bool,
}

impl SsmConfig {
    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn dt_rank(&self) -> usize {
        self.d_model.div_ceil(16)
    }
}

/// Per-direction weights: depthwise conv, input-dependent projections and
/// the state matrix.
#[derive(Debug, Clone)]
struct Direction {
    conv_w: Tensor,
    conv_b: Tensor,
    x_proj: Linear,
    dt_proj: Linear,
    a_log: Tensor,
    d_skip: Tensor,
}

impl Direction {
    fn new(s: &Scope, cfg: &SsmConfig) -> Result<Self> {
        let e = cfg.d_inner();
        let n = cfg.d_state;
        let k = cfg.conv_kernel;
        let conv_w = s.get("conv.weight", &[k, e], Init::FanIn(k))?;
        let conv_b = s.get("conv.bias", &[e], Init::FanIn(k))?;
        let x_proj = Linear::with_bias(&s.pp("x_proj"), e, cfg.dt_rank() + 2 * n, false)?;
        let dt_s = s.pp("dt_proj");
        let r = cfg.dt_rank();
        let dt_w = dt_s.get("weight", &[e, r], Init::FanIn(r))?;
        // Step sizes start log-uniform in [1e-3, 1e-1]; the bias is their
        // inverse softplus.
        let dt_b = dt_s.get_with("bias", &[e], |rng| {
            (0..e)
                .map(|_| {
                    let dt: f64 = rng.random_range(1e-3f64.ln()..1e-1f64.ln()).exp();
                    dt + (-(-dt).exp_m1()).ln()
                })
                .collect()
        })?;
        let dt_proj = Linear::from_parts(dt_w, Some(dt_b));
        // A = -(1..N) for every channel.
        let a_log = s.get_with("a_log", &[e, n], |_| {
            (0..e).flat_map(|_| (1..=n).map(|v| (v as f64).ln())).collect()
        })?;
        let d_skip = s.get("d", &[e], Init::Const(1.0))?;
        Ok(Self {
            conv_w,
            conv_b,
            x_proj,
            dt_proj,
            a_log,
            d_skip,
        })
    }

    /// Depthwise convolution over positions; causal for the forward
    /// direction, anti-causal (mirrored) for the backward one.
    fn conv(&self, x: &Tensor, reverse: bool) -> Result<Tensor> {
        let (_, j, _) = x.dims3()?;
        let k = self.conv_w.dim(0)?;
        let xp = if reverse {
            x.pad_with_zeros(1, 0, k - 1)?
        } else {
            x.pad_with_zeros(1, k - 1, 0)?
        };
        let mut acc: Option<Tensor> = None;
        for i in 0..k {
            let off = if reverse { k - 1 - i } else { i };
            let term = xp.narrow(1, off, j)?.broadcast_mul(&self.conv_w.get(i)?)?;
            acc = Some(match acc {
                Some(a) => (a + term)?,
                None => term,
            });
        }
        Ok(acc.expect("kernel is nonempty").broadcast_add(&self.conv_b)?)
    }

    fn forward(&self, x: &Tensor, z: &Tensor, cfg: &SsmConfig, reverse: bool) -> Result<Tensor> {
        let n = cfg.d_state;
        let r = cfg.dt_rank();
        let xc = silu(&self.conv(x, reverse)?)?;
        let proj = self.x_proj.forward(&xc)?;
        let dt = proj.narrow(D::Minus1, 0, r)?;
        let bmat = proj.narrow(D::Minus1, r, n)?;
        let cmat = proj.narrow(D::Minus1, r + n, n)?;
        let delta = softplus(&self.dt_proj.forward(&dt)?)?;
        let a = self.a_log.exp()?.neg()?;
        let y = selective_scan(&delta, &xc, &a, &bmat, &cmat, reverse)?;
        let y = (y + xc.broadcast_mul(&self.d_skip)?)?;
        Ok((y * silu(z)?)?)
    }
}

/// Pre-norm residual block with forward and backward selective scans.
#[derive(Debug, Clone)]
pub struct BiSsmBlock {
    cfg: SsmConfig,
    norm: LayerNorm,
    in_proj: Linear,
    fwd: Direction,
    bwd: Direction,
    out_proj: Linear,
}

impl BiSsmBlock {
    pub fn new(s: &Scope, cfg: SsmConfig) -> Result<Self> {
        let e = cfg.d_inner();
        let fwd = Direction::new(&s.pp("fwd"), &cfg)?;
        let bwd = if cfg.share_directions {
            fwd.clone()
        } else {
            Direction::new(&s.pp("bwd"), &cfg)?
        };
        Ok(Self {
            norm: LayerNorm::new(&s.pp("norm"), cfg.d_model)?,
            in_proj: Linear::with_bias(&s.pp("in_proj"), cfg.d_model, 2 * e, false)?,
            fwd,
            bwd,
            out_proj: Linear::new(&s.pp("out_proj"), e, cfg.d_model)?,
            cfg,
        })
    }

    /// Gated outputs of the forward and backward branches, each (B, J, E).
    pub fn branches(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let e = self.cfg.d_inner();
        let xz = self.in_proj.forward(&self.norm.forward(x)?)?;
        let xs = xz.narrow(D::Minus1, 0, e)?;
        let z = xz.narrow(D::Minus1, e, e)?;
        Ok((
            self.fwd.forward(&xs, &z, &self.cfg, false)?,
            self.bwd.forward(&xs, &z, &self.cfg, true)?,
        ))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (yf, yb) = self.branches(x)?;
        let merged = silu(&((yf + yb)? * 0.5)?)?;
        Ok((x + self.out_proj.forward(&merged)?)?)
    }
}

/// Stack of bidirectional blocks with a final layer norm.
#[derive(Debug, Clone)]
pub struct BiSsmEncoder {
    blocks: Vec<BiSsmBlock>,
    norm: LayerNorm,
}

impl BiSsmEncoder {
    pub fn new(s: &Scope, cfg: SsmConfig, depth: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("encoder depth must be positive".into()));
        }
        let blocks = (0..depth)
            .map(|i| BiSsmBlock::new(&s.pp(&format!("layers.{i}")), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            blocks,
            norm: LayerNorm::new(&s.pp("norm"), cfg.d_model)?,
        })
    }

    pub fn blocks(&self) -> &[BiSsmBlock] {
        &self.blocks
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        self.norm.forward(&h)
    }
}
