//! Training loops for the RIR estimator and the parameter estimator.

use candle_core::{DType, Device, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::brpe::{block_hash, Brpe};
use crate::dataset::LogParams;
use crate::decoder::draw_noise;
use crate::dsp::FeatureBlock2D;
use crate::error::{Error, Result};
use crate::loss::MultiResStftLoss;
use crate::model::{RirModel, RoomFeatures};
use crate::nn::{clip_grad_norm, ParamStore};

/// How "decays 80% of its value" is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrReading {
    /// Multiply by the factor at each decay event.
    Retain20,
    /// Multiply by one minus the factor.
    Retain80,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub lr_reading: LrReading,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub mixed_precision: bool,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 16,
            lr_init: 5.5e-5,
            lr_decay_factor: 0.2,
            lr_decay_every: 80,
            lr_reading: LrReading::Retain20,
            weight_decay: 1e-2,
            grad_clip_norm: 5.0,
            mixed_precision: false,
            seed: 0,
            checkpoint_every: 50,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    /// Learning rate during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let m = match self.lr_reading {
            LrReading::Retain20 => self.lr_decay_factor,
            LrReading::Retain80 => 1.0 - self.lr_decay_factor,
        };
        let k = if self.lr_decay_every == 0 { 0 } else { epoch / self.lr_decay_every };
        self.lr_init * m.powi(k as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.lr_init > 0.0) || !(0.0..1.0).contains(&self.lr_decay_factor) || self.lr_decay_factor == 0.0 {
            return Err(Error::Config("learning rate must be positive and the decay factor in (0, 1)".into()));
        }
        if !(self.grad_clip_norm > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("clip norm must be positive and weight decay non-negative".into()));
        }
        Ok(())
    }
}

/// Optimisation settings for the parameter estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrpeTrainConfig {
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub pretrain_lr: f64,
    pub finetune_lr: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
}

impl Default for BrpeTrainConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 100,
            finetune_epochs: 100,
            batch_size: 16,
            pretrain_lr: 1e-4,
            finetune_lr: 1e-4,
            weight_decay: 1e-2,
            grad_clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl BrpeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.pretrain_lr > 0.0) || !(self.finetune_lr > 0.0) || !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config("estimator training settings must be positive".into()));
        }
        Ok(())
    }
}

/// One training pair held in memory.
#[derive(Debug, Clone)]
pub struct Example {
    /// Reverberant speech, the model input.
    pub speech: Vec<f64>,
    /// Target RIR, `RIR_LEN` samples.
    pub rir: Vec<f64>,
    pub log: LogParams,
    /// Labelled boundary point in samples.
    pub bp_samples: usize,
    /// Frozen estimator features (q_v, q_zeta) for this clip.
    pub room: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }
}

/// Writes the per-epoch history as CSV.
pub fn write_history_csv(path: impl AsRef<std::path::Path>, epochs: &[EpochRecord]) -> Result<()> {
    let mut s = String::from("epoch,train_loss,val_loss,lr\n");
    for e in epochs {
        let val = e.val_loss.map(|v| format!("{v}")).unwrap_or_default();
        s.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, val, e.lr));
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn adamw(vars: Vec<candle_core::Var>, lr: f64, weight_decay: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            weight_decay,
            ..ParamsAdamW::default()
        },
    )?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn rows_tensor(rows: &[&[f64]], dtype: DType, device: &Device) -> Result<Tensor> {
    let width = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::Shape("batch mixes item lengths".into()));
    }
    let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Ok(Tensor::from_vec(data, (rows.len(), width), device)?.to_dtype(dtype)?)
}

/// Tensors for a batch of examples.
pub struct Batch {
    pub speech: Tensor,
    pub rir: Tensor,
    pub room: RoomFeatures,
    pub bp: Vec<usize>,
}

/// Stacks examples and resolves room features: the ground-truth embedding
/// when the model has one, otherwise the cached estimator features.
pub fn make_batch(model: &RirModel, items: &[&Example], dtype: DType, device: &Device) -> Result<Batch> {
    if items.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    let speech = rows_tensor(&items.iter().map(|e| e.speech.as_slice()).collect::<Vec<_>>(), dtype, device)?;
    let rir = rows_tensor(&items.iter().map(|e| e.rir.as_slice()).collect::<Vec<_>>(), dtype, device)?;
    let room = if model.uses_ground_truth() {
        let lv: Vec<f64> = items.iter().map(|e| e.log.log_v).collect();
        let lr: Vec<f64> = items.iter().map(|e| e.log.log_rt).collect();
        let n = items.len();
        model.ground_truth_features(
            &Tensor::from_vec(lv, n, device)?.to_dtype(dtype)?,
            &Tensor::from_vec(lr, n, device)?.to_dtype(dtype)?,
        )?
    } else {
        let mut qv = Vec::new();
        let mut qz = Vec::new();
        for e in items {
            let (v, z) = e
                .room
                .as_ref()
                .ok_or_else(|| Error::Data("example lacks estimator features".into()))?;
            qv.push(v.as_slice());
            qz.push(z.as_slice());
        }
        RoomFeatures {
            q_v: rows_tensor(&qv, dtype, device)?,
            q_zeta: rows_tensor(&qz, dtype, device)?,
        }
    };
    let bp = model
        .config()
        .boundary
        .resolve(&items.iter().map(|e| e.bp_samples).collect::<Vec<_>>());
    Ok(Batch { speech, rir, room, bp })
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64).wrapping_mul(0x9E3779B97F4A7C15)
}

/// Mean loss over `examples` in evaluation mode with a fixed noise seed.
pub fn evaluate_loss(
    model: &RirModel,
    loss: &MultiResStftLoss,
    examples: &[Example],
    batch_size: usize,
    seed: u64,
    dtype: DType,
    device: &Device,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    let f = model.decoder().filter_bank().filtered_noise()?;
    let mut total = 0.0;
    for (i, chunk) in examples.chunks(batch_size.max(1)).enumerate() {
        let items: Vec<&Example> = chunk.iter().collect();
        let b = make_batch(model, &items, dtype, device)?;
        let v = draw_noise(items.len(), model.config().decoder.z_dim, step_seed(seed, i), dtype, device)?;
        let est = model.forward(&b.speech, &b.room, &v, &b.bp, false, Some(&f))?;
        total += loss.value(&b.rir, &est.h_hat)? * items.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

/// Trains the RIR model on `train` with AdamW, step decay and global-norm
/// clipping. The parameter estimator is not touched. `on_step` may return
/// false to stop early; `on_epoch` runs after each epoch (for checkpoints).
#[allow(clippy::too_many_arguments)]
pub fn train_model(
    model: &RirModel,
    store: &ParamStore,
    loss: &MultiResStftLoss,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord) -> bool,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training corpus"));
    }
    if cfg.mixed_precision {
        log::warn!("mixed precision is not available on this backend; training in full precision");
    }
    let (dtype, device) = (store.dtype(), store.device().clone());
    let vars = store.vars();
    let mut opt = adamw(vars.iter().map(|(_, v)| v.clone()).collect(), cfg.lr_at(0), cfg.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    let mut step = 0usize;
    'outer: for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        opt.set_learning_rate(lr);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0usize;
        let mut stop = false;
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let b = make_batch(model, &items, dtype, &device)?;
            let v = draw_noise(items.len(), model.config().decoder.z_dim, step_seed(cfg.seed, step), dtype, &device)?;
            let est = model.forward(&b.speech, &b.room, &v, &b.bp, true, None)?;
            let l = loss.forward(&b.rir, &est.h_hat)?.total;
            let value = scalar(&l)?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!("epoch {epoch}, batch items {chunk:?}, lr {lr}"),
                });
            }
            let mut grads = l.backward()?;
            let (pre, post) = clip_grad_norm(&vars, &mut grads, cfg.grad_clip_norm)?;
            if !pre.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!("gradient norm {pre} at epoch {epoch}"),
                });
            }
            opt.step(&grads)?;
            let rec = StepRecord {
                step,
                epoch,
                loss: value,
                grad_norm: pre,
                clipped_norm: post,
            };
            report.steps.push(rec);
            sum += value * items.len() as f64;
            count += items.len();
            step += 1;
            if !on_step(&rec) || cfg.max_steps.is_some_and(|m| step >= m) {
                stop = true;
                break;
            }
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(evaluate_loss(model, loss, val, cfg.batch_size, cfg.seed, dtype, &device)?)
        };
        let rec = EpochRecord {
            epoch,
            train_loss: sum / count.max(1) as f64,
            val_loss,
            lr,
        };
        log::info!("epoch {epoch}: train {:.5} val {:?} lr {lr:.3e}", rec.train_loss, val_loss);
        report.epochs.push(rec);
        on_epoch(&rec)?;
        if stop {
            break 'outer;
        }
    }
    Ok(report)
}

/// Labelled estimator input.
#[derive(Debug, Clone)]
pub struct BrpeExample {
    pub block: FeatureBlock2D,
    pub log: LogParams,
}

fn feature_norm_unset(brpe: &Brpe) -> Result<bool> {
    let (m, s) = brpe.feature_norm()?;
    Ok(m == [0.0; 3] && s == [1.0; 3])
}

/// Self-supervised masked-patch training. Returns the mean total loss per
/// epoch.
pub fn pretrain_brpe(
    brpe: &Brpe,
    store: &ParamStore,
    blocks: &[FeatureBlock2D],
    cfg: &BrpeTrainConfig,
    mut on_epoch: impl FnMut(usize, f64) -> Result<()>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if blocks.is_empty() {
        return Err(Error::EmptyInput("pretraining corpus"));
    }
    if feature_norm_unset(brpe)? {
        brpe.fit_feature_norm(blocks)?;
    }
    let hashes: Vec<u64> = blocks.iter().map(block_hash).collect();
    let vars = store.vars();
    let mut opt = adamw(vars.iter().map(|(_, v)| v.clone()).collect(), cfg.pretrain_lr, cfg.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.pretrain_epochs {
        let mut order: Vec<usize> = (0..blocks.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut n = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<FeatureBlock2D> = chunk.iter().map(|&i| blocks[i].clone()).collect();
            let seeds: Vec<u64> = chunk.iter().map(|&i| hashes[i] ^ step_seed(cfg.seed, epoch)).collect();
            let x = brpe.blocks_to_tensor(&batch)?;
            let l = brpe.pretrain_losses(&x, &seeds)?.total;
            let value = scalar(&l)?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!("pretraining epoch {epoch}"),
                });
            }
            let mut grads = l.backward()?;
            clip_grad_norm(&vars, &mut grads, cfg.grad_clip_norm)?;
            opt.step(&grads)?;
            sum += value;
            n += 1;
            step += 1;
        }
        let mean = sum / n as f64;
        log::info!("pretrain epoch {epoch}: loss {mean:.5}");
        history.push(mean);
        on_epoch(epoch, mean)?;
    }
    Ok(history)
}

/// Supervised log-domain regression. Fits the input and output
/// normalisation on first use. Returns (train MSE, validation MSE) per epoch.
pub fn finetune_brpe(
    brpe: &Brpe,
    store: &ParamStore,
    train: &[BrpeExample],
    val: &[BrpeExample],
    cfg: &BrpeTrainConfig,
    mut on_epoch: impl FnMut(usize, f64, Option<f64>) -> Result<()>,
) -> Result<Vec<(f64, Option<f64>)>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("fine-tuning corpus"));
    }
    let blocks: Vec<FeatureBlock2D> = train.iter().map(|e| e.block.clone()).collect();
    if feature_norm_unset(brpe)? {
        brpe.fit_feature_norm(&blocks)?;
    }
    let (c, s) = brpe.output_affine()?;
    if c == [0.0; 3] && s == [1.0; 3] {
        let n = train.len() as f64;
        let mean: [f64; 3] = std::array::from_fn(|k| train.iter().map(|e| e.log.as_array()[k]).sum::<f64>() / n);
        let std: [f64; 3] = std::array::from_fn(|k| {
            (train.iter().map(|e| (e.log.as_array()[k] - mean[k]).powi(2)).sum::<f64>() / n)
                .sqrt()
                .max(1e-3)
        });
        brpe.set_output_affine(mean, std)?;
    }
    let (dtype, device) = (store.dtype(), store.device().clone());
    let targets = |items: &[&BrpeExample]| -> Result<Tensor> {
        let rows: Vec<[f64; 3]> = items.iter().map(|e| e.log.as_array()).collect();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Ok(Tensor::from_vec(flat, (items.len(), 3), &device)?.to_dtype(dtype)?)
    };
    let vars = store.vars();
    let mut opt = adamw(vars.iter().map(|(_, v)| v.clone()).collect(), cfg.finetune_lr, cfg.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xF17E);
    let mut history = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.finetune_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<&BrpeExample> = chunk.iter().map(|&i| &train[i]).collect();
            let batch: Vec<FeatureBlock2D> = items.iter().map(|e| e.block.clone()).collect();
            let x = brpe.blocks_to_tensor(&batch)?;
            let l = brpe.finetune_loss(&x, &targets(&items)?)?;
            let value = scalar(&l)?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!("fine-tuning epoch {epoch}"),
                });
            }
            let mut grads = l.backward()?;
            clip_grad_norm(&vars, &mut grads, cfg.grad_clip_norm)?;
            opt.step(&grads)?;
            sum += value * items.len() as f64;
            step += 1;
        }
        let val_mse = if val.is_empty() {
            None
        } else {
            Some(brpe_mse(brpe, val, cfg.batch_size)?)
        };
        let mean = sum / train.len() as f64;
        log::info!("finetune epoch {epoch}: train {mean:.5} val {val_mse:?}");
        history.push((mean, val_mse));
        on_epoch(epoch, mean, val_mse)?;
    }
    Ok(history)
}

/// Predicted log parameters for `items`, in order.
pub fn brpe_predict(brpe: &Brpe, items: &[BrpeExample], batch_size: usize) -> Result<Vec<[f64; 3]>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(batch_size.max(1)) {
        let blocks: Vec<FeatureBlock2D> = chunk.iter().map(|e| e.block.clone()).collect();
        let rows: Vec<Vec<f64>> = brpe.estimate(&blocks)?.log_params.to_dtype(DType::F64)?.to_vec2()?;
        out.extend(rows.into_iter().map(|r| [r[0], r[1], r[2]]));
    }
    Ok(out)
}

pub fn brpe_mse(brpe: &Brpe, items: &[BrpeExample], batch_size: usize) -> Result<f64> {
    let pred = brpe_predict(brpe, items, batch_size)?;
    let sq: f64 = pred
        .iter()
        .zip(items)
        .flat_map(|(p, e)| {
            let t = e.log.as_array();
            (0..3).map(move |k| (p[k] - t[k]).powi(2))
        })
        .sum();
    Ok(sq / (3 * items.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 5.5e-5);
        assert_eq!(cfg.lr_at(79), 5.5e-5);
        assert!((cfg.lr_at(80) - 1.1e-5).abs() < 1e-15);
        assert!((cfg.lr_at(200) - 2.2e-6).abs() < 1e-12);
        let alt = TrainConfig {
            lr_reading: LrReading::Retain80,
            ..cfg
        };
        assert!((alt.lr_at(160) - 5.5e-5 * 0.64).abs() < 1e-15);
    }

    #[test]
    fn history_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        let rows = [
            EpochRecord {
                epoch: 0,
                train_loss: 2.5,
                val_loss: Some(2.0),
                lr: 1e-3,
            },
            EpochRecord {
                epoch: 1,
                train_loss: 1.5,
                val_loss: None,
                lr: 1e-3,
            },
        ];
        write_history_csv(&p, &rows).unwrap();
        let s = std::fs::read_to_string(p).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "epoch,train_loss,val_loss,lr");
        assert_eq!(lines[1], "0,2.5,2,0.001");
        assert_eq!(lines[2], "1,1.5,,0.001");
    }
}
