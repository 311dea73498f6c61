//! Parameter and RIR metrics, and report export.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::acoustics::{drr, rt60_schroeder};
use crate::dsp::{stft_samples, StftParams, Window};
use crate::error::{Error, Result};
use crate::loss::{log_stft_magnitude, spectral_convergence, StftLossConfig};
use crate::AudioClip;

/// Pearson correlation; `None` when either input has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn check_pairs(est: &[f64], truth: &[f64], min: usize) -> Result<()> {
    if est.len() != truth.len() {
        return Err(Error::Shape(format!("{} estimates for {} targets", est.len(), truth.len())));
    }
    if est.len() < min {
        return Err(Error::InvalidArgument(format!("need at least {min} pairs, got {}", est.len())));
    }
    if est.iter().chain(truth).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite value in metric input".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogMetrics {
    pub mse: f64,
    pub mae: f64,
    pub rho: Option<f64>,
    pub rho_undefined: bool,
    /// Mean multiplicative error factor, mean of 10^|log10(est/true)|.
    pub mm: f64,
}

/// Metrics on log10 values of positive quantities.
pub fn log_scale_metrics(est: &[f64], truth: &[f64]) -> Result<LogMetrics> {
    check_pairs(est, truth, 2)?;
    if est.iter().chain(truth).any(|&v| v <= 0.0) {
        return Err(Error::InvalidArgument("log-scale metrics need positive values".into()));
    }
    let le: Vec<f64> = est.iter().map(|v| v.log10()).collect();
    let lt: Vec<f64> = truth.iter().map(|v| v.log10()).collect();
    let n = est.len() as f64;
    let d: Vec<f64> = le.iter().zip(&lt).map(|(a, b)| a - b).collect();
    let rho = pearson(&le, &lt);
    Ok(LogMetrics {
        mse: d.iter().map(|x| x * x).sum::<f64>() / n,
        mae: d.iter().map(|x| x.abs()).sum::<f64>() / n,
        rho,
        rho_undefined: rho.is_none(),
        mm: d.iter().map(|x| 10f64.powf(x.abs())).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearMetrics {
    pub median_abs_err: f64,
    pub mae: f64,
}

pub fn linear_scale_metrics(est: &[f64], truth: &[f64]) -> Result<LinearMetrics> {
    check_pairs(est, truth, 1)?;
    let err: Vec<f64> = est.iter().zip(truth).map(|(a, b)| (a - b).abs()).collect();
    Ok(LinearMetrics {
        mae: err.iter().sum::<f64>() / err.len() as f64,
        median_abs_err: median(err),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamMetricReport {
    pub log: LogMetrics,
    pub linear: LinearMetrics,
}

pub fn param_metrics(est: &[f64], truth: &[f64]) -> Result<ParamMetricReport> {
    Ok(ParamMetricReport {
        log: log_scale_metrics(est, truth)?,
        linear: linear_scale_metrics(est, truth)?,
    })
}

/// Correlation, squared error and bias of one derived quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub rho: Option<f64>,
    pub rho_undefined: bool,
    pub mse: f64,
    pub rmse: f64,
    /// mean(estimate − truth)
    pub bias: f64,
}

pub fn error_summary(est: &[f64], truth: &[f64]) -> Result<ErrorSummary> {
    check_pairs(est, truth, 1)?;
    let n = est.len() as f64;
    let mse = est.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    let rho = pearson(est, truth);
    Ok(ErrorSummary {
        rho,
        rho_undefined: rho.is_none(),
        mse,
        rmse: mse.sqrt(),
        bias: est.iter().zip(truth).map(|(a, b)| a - b).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RirMetricReport {
    pub rt60: ErrorSummary,
    pub drr: ErrorSummary,
    pub stft_loss: f64,
    pub mag_loss: f64,
    pub sc_loss: f64,
    /// Mean |h − ĥ| over samples and pairs.
    pub mae_time: f64,
    pub evaluated: usize,
    pub excluded: usize,
}

struct PairAnalysis {
    rt: (f64, f64),
    drr: (f64, f64),
    sc: f64,
    mag: f64,
    mae: f64,
}

fn analyse_pair(est: &[f64], truth: &[f64], params: &[StftParams], floor: f64) -> Result<PairAnalysis> {
    if est.len() != truth.len() {
        return Err(Error::Shape(format!("lengths {} and {}", est.len(), truth.len())));
    }
    let ce = AudioClip::at_16k(est.to_vec())?;
    let ct = AudioClip::at_16k(truth.to_vec())?;
    let rt = (rt60_schroeder(&ce)?, rt60_schroeder(&ct)?);
    let drr = (drr(&ce)?.drr_db, drr(&ct)?.drr_db);
    let mut sc = 0.0;
    let mut mag = 0.0;
    for p in params {
        sc += spectral_convergence(truth, est, p)?;
        mag += log_stft_magnitude(truth, est, p, floor)?;
    }
    let k = params.len() as f64;
    Ok(PairAnalysis {
        rt,
        drr,
        sc: sc / k,
        mag: mag / k,
        mae: est.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>() / est.len() as f64,
    })
}

/// RT60/DRR agreement and spectral distances over paired RIRs. Pairs that
/// cannot be analysed are excluded and counted.
pub fn rir_acoustic_metrics(est: &[Vec<f64>], truth: &[Vec<f64>], loss: &StftLossConfig) -> Result<RirMetricReport> {
    if est.len() != truth.len() {
        return Err(Error::Shape(format!("{} estimates for {} targets", est.len(), truth.len())));
    }
    let params = loss.params()?;
    let mut ok = Vec::new();
    let mut excluded = 0;
    for (e, t) in est.iter().zip(truth) {
        match analyse_pair(e, t, &params, loss.mag_floor) {
            Ok(a) => ok.push(a),
            Err(err) => {
                log::warn!("excluding pair from RIR metrics: {err}");
                excluded += 1;
            }
        }
    }
    if ok.is_empty() {
        return Err(Error::Data(format!("none of {} RIR pairs could be analysed", est.len())));
    }
    let col = |f: &dyn Fn(&PairAnalysis) -> f64| ok.iter().map(f).collect::<Vec<f64>>();
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let sc = mean(col(&|a| a.sc));
    let mag = mean(col(&|a| a.mag));
    Ok(RirMetricReport {
        rt60: error_summary(&col(&|a| a.rt.0), &col(&|a| a.rt.1))?,
        drr: error_summary(&col(&|a| a.drr.0), &col(&|a| a.drr.1))?,
        stft_loss: sc + mag,
        mag_loss: mag,
        sc_loss: sc,
        mae_time: mean(col(&|a| a.mae)),
        evaluated: ok.len(),
        excluded,
    })
}

/// Everything `evaluate` writes to metrics.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairs: usize,
    /// Keyed by "volume_m3", "rt60_s", "bp_ms".
    pub params: BTreeMap<String, ParamMetricReport>,
    pub rir: Option<RirMetricReport>,
}

/// True and estimated values of one parameter for the scatter export.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterSeries {
    pub name: String,
    pub ids: Vec<String>,
    pub truth: Vec<f64>,
    pub est: Vec<f64>,
}

/// A waveform pair rendered as images.
#[derive(Debug, Clone)]
pub struct RirPair {
    pub id: String,
    pub truth: Vec<f64>,
    pub est: Vec<f64>,
}

pub fn write_scatter_csv(path: &Path, s: &ScatterSeries) -> Result<()> {
    let mut out = String::from("id,true,estimated,log10_true,log10_estimated\n");
    for ((id, t), e) in s.ids.iter().zip(&s.truth).zip(&s.est) {
        out.push_str(&format!("{id},{t},{e},{},{}\n", t.log10(), e.log10()));
    }
    std::fs::write(path, out)?;
    Ok(())
}

const PLOT_W: u32 = 640;
const PLOT_H: u32 = 200;

fn draw_trace(img: &mut RgbImage, y0: u32, x: &[f64], color: Rgb<u8>) {
    let peak = x.iter().fold(0f64, |m, v| m.max(v.abs())).max(1e-12);
    let mid = y0 + PLOT_H / 2;
    for px in 0..PLOT_W {
        let a = px as usize * x.len() / PLOT_W as usize;
        let b = (((px + 1) as usize * x.len()) / PLOT_W as usize).max(a + 1).min(x.len());
        let (lo, hi) = x[a..b].iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        let scale = (PLOT_H / 2 - 2) as f64 / peak;
        let top = (mid as f64 - hi * scale).round() as u32;
        let bot = (mid as f64 - lo * scale).round() as u32;
        for py in top.min(bot)..=bot.max(top) {
            img.put_pixel(px, py.clamp(y0, y0 + PLOT_H - 1), color);
        }
    }
}

/// Truth (top) and estimate (bottom) waveforms, each normalised to its peak.
pub fn render_waveforms(truth: &[f64], est: &[f64]) -> RgbImage {
    let mut img = RgbImage::from_pixel(PLOT_W, 2 * PLOT_H, Rgb([255, 255, 255]));
    if !truth.is_empty() {
        draw_trace(&mut img, 0, truth, Rgb([20, 60, 160]));
    }
    if !est.is_empty() {
        draw_trace(&mut img, PLOT_H, est, Rgb([180, 40, 30]));
    }
    img
}

fn spectrogram_db(x: &[f64]) -> Result<Vec<Vec<f64>>> {
    let p = StftParams::new(256, 64, Window::Hann)?;
    let s = stft_samples(x, &p)?;
    let m = s.magnitude();
    Ok((0..s.frames())
        .map(|f| (0..s.bins()).map(|k| 20.0 * m[[k, f]].max(1e-10).log10()).collect())
        .collect())
}

/// Log-magnitude spectrograms, truth on the left and estimate on the right,
/// on a shared 80 dB scale.
pub fn render_spectrograms(truth: &[f64], est: &[f64]) -> Result<RgbImage> {
    let a = spectrogram_db(truth)?;
    let b = spectrogram_db(est)?;
    let top = a.iter().chain(&b).flatten().fold(f64::MIN, |m, &v| m.max(v));
    let (frames, bins) = (a.len(), a.first().map_or(0, Vec::len));
    let mut img = RgbImage::new(2 * frames as u32 + 4, bins as u32);
    for (offset, spec) in [(0u32, &a), (frames as u32 + 4, &b)] {
        for (f, col) in spec.iter().enumerate() {
            for (k, &db) in col.iter().enumerate() {
                let t = ((db - top + 80.0) / 80.0).clamp(0.0, 1.0);
                let c = (255.0 * t) as u8;
                img.put_pixel(offset + f as u32, (bins - 1 - k) as u32, Rgb([c, (c as f64 * 0.8) as u8, 255 - c]));
            }
        }
    }
    Ok(img)
}

/// Writes metrics.json, scatter_<param>.csv and pairs/<id>_{wave,spec}.png.
pub fn export_report(out_dir: &Path, report: &EvalReport, scatter: &[ScatterSeries], pairs: &[RirPair]) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("metrics.json"), serde_json::to_string_pretty(report)?)?;
    for s in scatter {
        write_scatter_csv(&out_dir.join(format!("scatter_{}.csv", s.name)), s)?;
    }
    if !pairs.is_empty() {
        let dir = out_dir.join("pairs");
        std::fs::create_dir_all(&dir)?;
        for p in pairs {
            render_waveforms(&p.truth, &p.est).save(dir.join(format!("{}_wave.png", p.id)))?;
            render_spectrograms(&p.truth, &p.est)?.save(dir.join(format!("{}_spec.png", p.id)))?;
        }
    }
    Ok(())
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
