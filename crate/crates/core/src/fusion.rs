//! Fusion of room-parameter features with audio features.
//!
//! Feature maps are (batch, channels, frames) at the module boundary; the
//! internals work on (batch, frames, channels) so linear maps act on the last
//! dimension.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    HybridCrossAttention,
    Naive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub method: FusionMethod,
    pub ground_truth_params: bool,
    /// Width of the room-parameter feature vectors fed in (q_v, q_zeta).
    pub q_dim: usize,
    pub n_v: usize,
    pub n_zeta: usize,
    /// Audio and room feature width; must match the encoder latent width.
    pub n_a: usize,
    pub n_c: usize,
    pub heads: usize,
    pub ff_mult: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            method: FusionMethod::HybridCrossAttention,
            ground_truth_params: false,
            q_dim: 192,
            n_v: 64,
            n_zeta: 64,
            n_a: 128,
            n_c: 256,
            heads: 8,
            ff_mult: 4,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.n_a % self.heads != 0 {
            return Err(Error::Config(format!(
                "fusion width {} is not divisible by {} heads",
                self.n_a, self.heads
            )));
        }
        if [self.q_dim, self.n_v, self.n_zeta, self.n_c, self.ff_mult].contains(&0) {
            return Err(Error::Config("fusion dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.n_a / self.heads
    }
}

/// Scaled dot-product attention over (B, H, Lq, dk) × (B, H, Lk, dk).
/// Returns the attended values and the row-stochastic weights.
pub fn scaled_dot_product_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let dk = q.dim(D::Minus1)?;
    if k.dim(D::Minus1)? != dk {
        return Err(Error::Shape(format!(
            "query width {dk} differs from key width {}",
            k.dim(D::Minus1)?
        )));
    }
    let scores = (q / (dk as f64).sqrt())?.matmul(&k.transpose(2, 3)?.contiguous()?)?;
    let weights = candle_nn::ops::softmax_last_dim(&scores)?;
    Ok((weights.matmul(v)?, weights))
}

/// LayerNorm followed by a linear map.
struct ProjectionHead {
    norm: LayerNorm,
    lin: Linear,
}

impl ProjectionHead {
    fn new(s: &Scope, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&s.pp("norm"), d_in)?,
            lin: Linear::new(&s.pp("lin"), d_in, d_out)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.lin.forward(&self.norm.forward(x)?)
    }
}

struct CrossAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
}

impl CrossAttention {
    fn new(s: &Scope, width: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            wq: Linear::new(&s.pp("q"), width, width)?,
            wk: Linear::new(&s.pp("k"), width, width)?,
            wv: Linear::new(&s.pp("v"), width, width)?,
            wo: Linear::new(&s.pp("o"), width, width)?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, w) = x.dims3()?;
        Ok(x.reshape((b, l, self.heads, w / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    /// Queries from `query`, keys and values from `context`; both (B, L, W).
    fn forward(&self, query: &Tensor, context: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, l, w) = query.dims3()?;
        let q = self.split(&self.wq.forward(query)?)?;
        let k = self.split(&self.wk.forward(context)?)?;
        let v = self.split(&self.wv.forward(context)?)?;
        let (att, weights) = scaled_dot_product_attention(&q, &k, &v)?;
        let merged = att.transpose(1, 2)?.contiguous()?.reshape((b, l, w))?;
        Ok((self.wo.forward(&merged)?, weights))
    }
}

struct FeedForward {
    w1: Linear,
    w2: Linear,
}

impl FeedForward {
    fn new(s: &Scope, width: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            w1: Linear::new(&s.pp("w1"), width, hidden)?,
            w2: Linear::new(&s.pp("w2"), hidden, width)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.w2.forward(&self.w1.forward(x)?.relu()?)
    }
}

enum Path {
    Hybrid {
        pre: Linear,
        attn: CrossAttention,
        ln1: LayerNorm,
        ffn: FeedForward,
        ln2: LayerNorm,
        room_ffn: FeedForward,
        room_ln: LayerNorm,
        out: Linear,
    },
    Naive {
        l1: Linear,
        l2: Linear,
    },
}

/// Intermediate maps, all (B, channels, L).
pub struct FusionTrace {
    pub f_a: Tensor,
    pub x_pre: Option<Tensor>,
    pub f_s_enh: Option<Tensor>,
    pub f_a_enh: Option<Tensor>,
    pub attention: Option<Tensor>,
    pub f_c: Tensor,
}

pub struct Fusion {
    cfg: FusionConfig,
    head_v: ProjectionHead,
    head_zeta: ProjectionHead,
    room: Linear,
    path: Path,
}

fn to_time_major(x: &Tensor) -> Result<Tensor> {
    Ok(x.transpose(1, 2)?.contiguous()?)
}

impl Fusion {
    pub fn new(s: &Scope, cfg: &FusionConfig) -> Result<Self> {
        cfg.validate()?;
        let n_a = cfg.n_a;
        let hidden = cfg.ff_mult * n_a;
        let path = match cfg.method {
            FusionMethod::HybridCrossAttention => Path::Hybrid {
                pre: Linear::new(&s.pp("pre"), 2 * n_a, n_a)?,
                attn: CrossAttention::new(&s.pp("attn"), n_a, cfg.heads)?,
                ln1: LayerNorm::new(&s.pp("ln1"), n_a)?,
                ffn: FeedForward::new(&s.pp("ffn"), n_a, hidden)?,
                ln2: LayerNorm::new(&s.pp("ln2"), n_a)?,
                room_ffn: FeedForward::new(&s.pp("room_ffn"), n_a, hidden)?,
                room_ln: LayerNorm::new(&s.pp("room_ln"), n_a)?,
                out: Linear::new(&s.pp("out"), 2 * n_a, cfg.n_c)?,
            },
            FusionMethod::Naive => Path::Naive {
                l1: Linear::new(&s.pp("naive1"), 2 * n_a, cfg.n_c)?,
                l2: Linear::new(&s.pp("naive2"), cfg.n_c, cfg.n_c)?,
            },
        };
        Ok(Self {
            head_v: ProjectionHead::new(&s.pp("head_v"), cfg.q_dim, cfg.n_v)?,
            head_zeta: ProjectionHead::new(&s.pp("head_zeta"), cfg.q_dim, cfg.n_zeta)?,
            room: Linear::new(&s.pp("room"), cfg.n_v + cfg.n_zeta, n_a)?,
            path,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    /// Room feature vector (B, N_a) before broadcasting.
    pub fn room_vector(&self, q_v: &Tensor, q_zeta: &Tensor) -> Result<Tensor> {
        let r = Tensor::cat(&[self.head_v.forward(q_v)?, self.head_zeta.forward(q_zeta)?], 1)?;
        self.room.forward(&r)
    }

    /// F_a: the room vector repeated over `frames`, (B, N_a, L).
    pub fn project_and_broadcast(&self, q_v: &Tensor, q_zeta: &Tensor, frames: usize) -> Result<Tensor> {
        if frames == 0 {
            return Err(Error::Shape("zero frames".into()));
        }
        let r = self.room_vector(q_v, q_zeta)?;
        let (b, n) = r.dims2()?;
        Ok(r.unsqueeze(2)?.broadcast_as((b, n, frames))?.contiguous()?)
    }

    pub fn forward(&self, q_v: &Tensor, q_zeta: &Tensor, f_s: &Tensor) -> Result<Tensor> {
        Ok(self.forward_trace(q_v, q_zeta, f_s)?.f_c)
    }

    fn check_frames(&self, a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
        let (batch, ch, l) = b.dims3()?;
        if ch != self.cfg.n_a {
            return Err(Error::Shape(format!(
                "audio features have {ch} channels, fusion expects {}",
                self.cfg.n_a
            )));
        }
        if a.dims() != b.dims() {
            return Err(Error::Shape(format!("feature maps {:?} and {:?} differ", a.dims(), b.dims())));
        }
        Ok((batch, ch, l))
    }

    /// X_pre = P_a(F_a ⧺ F_s), (B, N_a, L). Hybrid mode only.
    pub fn pre_fuse(&self, f_a: &Tensor, f_s: &Tensor) -> Result<Tensor> {
        self.check_frames(f_a, f_s)?;
        match &self.path {
            Path::Hybrid { pre, .. } => {
                let cat = Tensor::cat(&[to_time_major(f_a)?, to_time_major(f_s)?], 2)?;
                to_time_major(&pre.forward(&cat)?)
            }
            Path::Naive { .. } => Err(Error::Config("pre-fusion is part of the hybrid path".into())),
        }
    }

    /// Cross-attention of X_pre over F_s with residual FFN; returns F_s^Enh
    /// and the attention weights (B, H, L, L).
    pub fn audio_attention_path(&self, f_s: &Tensor, x_pre: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_frames(x_pre, f_s)?;
        match &self.path {
            Path::Hybrid { attn, ln1, ffn, ln2, .. } => {
                let x_t = to_time_major(x_pre)?;
                let (att, weights) = attn.forward(&x_t, &to_time_major(f_s)?)?;
                let h1 = ln1.forward(&(&x_t + att)?)?;
                let enh = ln2.forward(&(&h1 + ffn.forward(&h1)?)?)?;
                Ok((to_time_major(&enh)?, weights))
            }
            Path::Naive { .. } => Err(Error::Config("attention is part of the hybrid path".into())),
        }
    }

    /// Room FFN path and output projection; returns (F_a^Enh, F_c).
    ///
    /// F_a is constant in time, so the room path is evaluated on its first
    /// column and broadcast.
    pub fn room_path_and_fuse(&self, f_a: &Tensor, f_s_enh: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, ch, l) = self.check_frames(f_a, f_s_enh)?;
        match &self.path {
            Path::Hybrid { room_ffn, room_ln, out, .. } => {
                let room = f_a.narrow(2, 0, 1)?.squeeze(2)?;
                let r_enh = room_ln.forward(&(&room + room_ffn.forward(&room)?)?)?;
                let r_enh_t = r_enh.unsqueeze(1)?.broadcast_as((b, l, ch))?.contiguous()?;
                let f_c = out.forward(&Tensor::cat(&[&to_time_major(f_s_enh)?, &r_enh_t], 2)?)?;
                Ok((to_time_major(&r_enh_t)?, to_time_major(&f_c)?))
            }
            Path::Naive { .. } => Err(Error::Config("room path is part of the hybrid path".into())),
        }
    }

    pub fn forward_trace(&self, q_v: &Tensor, q_zeta: &Tensor, f_s: &Tensor) -> Result<FusionTrace> {
        let (b, ch, l) = f_s.dims3()?;
        if ch != self.cfg.n_a {
            return Err(Error::Shape(format!(
                "audio features have {ch} channels, fusion expects {}",
                self.cfg.n_a
            )));
        }
        let room = self.room_vector(q_v, q_zeta)?;
        let f_a = room.unsqueeze(2)?.broadcast_as((b, ch, l))?.contiguous()?;
        match &self.path {
            Path::Hybrid { .. } => {
                let x_pre = self.pre_fuse(&f_a, f_s)?;
                let (s_enh, weights) = self.audio_attention_path(f_s, &x_pre)?;
                let (a_enh, f_c) = self.room_path_and_fuse(&f_a, &s_enh)?;
                Ok(FusionTrace {
                    f_a,
                    x_pre: Some(x_pre),
                    f_s_enh: Some(s_enh),
                    f_a_enh: Some(a_enh),
                    attention: Some(weights),
                    f_c,
                })
            }
            Path::Naive { l1, l2 } => {
                let cat = Tensor::cat(&[to_time_major(&f_a)?, to_time_major(f_s)?], 2)?;
                let h = l1.forward(&cat)?.relu()?;
                Ok(FusionTrace {
                    f_a,
                    x_pre: None,
                    f_s_enh: None,
                    f_a_enh: None,
                    attention: None,
                    f_c: to_time_major(&l2.forward(&h)?)?,
                })
            }
        }
    }
}

/// Learned embedding of ground-truth (log V, log RT60) into the q_v / q_zeta
/// space, used in place of estimator outputs.
pub struct GroundTruthEmbedding {
    v: Linear,
    zeta: Linear,
}

impl GroundTruthEmbedding {
    pub fn new(s: &Scope, q_dim: usize) -> Result<Self> {
        Ok(Self {
            v: Linear::new(&s.pp("v"), 1, q_dim)?,
            zeta: Linear::new(&s.pp("zeta"), 1, q_dim)?,
        })
    }

    /// `log_v`, `log_rt`: (B,) tensors. Returns (q_v, q_zeta), each (B, q_dim).
    pub fn forward(&self, log_v: &Tensor, log_rt: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((
            self.v.forward(&log_v.unsqueeze(1)?)?,
            self.zeta.forward(&log_rt.unsqueeze(1)?)?,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn small() -> FusionConfig {
        FusionConfig {
            q_dim: 12,
            n_v: 8,
            n_zeta: 8,
            n_a: 16,
            n_c: 24,
            heads: 4,
            ..FusionConfig::default()
        }
    }

    fn cols(t: &Tensor) -> Vec<Vec<f64>> {
        t.get(0).unwrap().t().unwrap().to_vec2().unwrap()
    }

    #[test]
    fn broadcast_columns_identical() {
        let store = ParamStore::new(0, DType::F64);
        let f = Fusion::new(&store.root(), &small()).unwrap();
        let fa = f.project_and_broadcast(&randn(&[1, 12], 1), &randn(&[1, 12], 2), 7).unwrap();
        assert_eq!(fa.dims(), &[1, 16, 7]);
        let c = cols(&fa);
        assert!(c.iter().all(|col| col == &c[0]));
    }

    #[test]
    fn hybrid_trace_properties() {
        let store = ParamStore::new(1, DType::F64);
        let f = Fusion::new(&store.root(), &small()).unwrap();
        let t = f.forward_trace(&randn(&[2, 12], 3), &randn(&[2, 12], 4), &randn(&[2, 16, 9], 5)).unwrap();
        assert_eq!(t.f_c.dims(), &[2, 24, 9]);
        let w = t.attention.unwrap();
        assert_eq!(w.dims(), &[2, 4, 9, 9]);
        let sums: Vec<f64> = w.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
        let c = cols(&t.f_a_enh.unwrap());
        assert!(c.iter().all(|col| col == &c[0]));
    }

    #[test]
    fn attention_degenerate_cases() {
        let q = randn(&[1, 2, 3, 4], 6);
        let v = randn(&[1, 2, 5, 4], 7);
        let k_same = randn(&[1, 2, 1, 4], 8).broadcast_as((1, 2, 5, 4)).unwrap().contiguous().unwrap();
        let (out, _) = scaled_dot_product_attention(&q, &k_same, &v).unwrap();
        let mean = v.mean_keepdim(2).unwrap().broadcast_as((1, 2, 3, 4)).unwrap();
        let d: f64 = (out - mean).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert!(d < 1e-12);
        let v1 = randn(&[1, 2, 1, 4], 9);
        let (out, _) = scaled_dot_product_attention(&q, &randn(&[1, 2, 1, 4], 10), &v1).unwrap();
        let want = v1.broadcast_as((1, 2, 3, 4)).unwrap();
        assert_eq!((out - want).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
        assert!(scaled_dot_product_attention(&q, &randn(&[1, 2, 5, 3], 1), &v).is_err());
    }

    #[test]
    fn naive_path_shape_and_width_check() {
        let store = ParamStore::new(2, DType::F64);
        let cfg = FusionConfig {
            method: FusionMethod::Naive,
            ..small()
        };
        let f = Fusion::new(&store.root(), &cfg).unwrap();
        let out = f.forward(&randn(&[1, 12], 1), &randn(&[1, 12], 2), &randn(&[1, 16, 5], 3)).unwrap();
        assert_eq!(out.dims(), &[1, 24, 5]);
        assert!(f.forward(&randn(&[1, 12], 1), &randn(&[1, 12], 2), &randn(&[1, 8, 5], 3)).is_err());
    }

    #[test]
    fn frame_permutation_commutes_with_pre_fusion() {
        let store = ParamStore::new(3, DType::F64);
        let f = Fusion::new(&store.root(), &small()).unwrap();
        let (qv, qz) = (randn(&[1, 12], 1), randn(&[1, 12], 2));
        let fs = randn(&[1, 16, 6], 3);
        let perm = Tensor::new(&[5u32, 2, 0, 4, 1, 3], &Device::Cpu).unwrap();
        let a = f.forward_trace(&qv, &qz, &fs).unwrap().x_pre.unwrap();
        let b = f.forward_trace(&qv, &qz, &fs.index_select(&perm, 2).unwrap()).unwrap().x_pre.unwrap();
        let d: f64 = (a.index_select(&perm, 2).unwrap() - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert!(d < 1e-12);
    }
}
