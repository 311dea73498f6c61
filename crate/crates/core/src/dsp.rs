//! STFT, gammatone/ERB aggregation and the magnitude+phase feature block.
//!
//! The STFT uses no centre padding: a signal of `len` samples yields
//! `floor((len - frame_len) / hop) + 1` frames and is an error when shorter
//! than one frame.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::{AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Hann,
    Rectangular,
}

impl Window {
    /// Periodic window of `len` points.
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            Window::Rectangular => vec![1.0; len],
            Window::Hann => (0..len)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftParams {
    pub frame_len: usize,
    pub hop: usize,
    pub window: Window,
}

impl StftParams {
    pub fn new(frame_len: usize, hop: usize, window: Window) -> Result<Self> {
        let p = Self {
            frame_len,
            hop,
            window,
        };
        p.validate()?;
        Ok(p)
    }

    /// Hann window with 50 % overlap.
    pub fn half_overlap(frame_len: usize) -> Result<Self> {
        Self::new(frame_len, frame_len / 2, Window::Hann)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_len < 32 || !self.frame_len.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "frame length {} must be a power of two >= 32",
                self.frame_len
            )));
        }
        if self.hop == 0 || self.hop > self.frame_len {
            return Err(Error::InvalidArgument(format!(
                "hop {} must lie in 1..={}",
                self.hop, self.frame_len
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    pub fn frame_count(&self, len: usize) -> Result<usize> {
        if len < self.frame_len {
            return Err(Error::SignalTooShort {
                len,
                need: self.frame_len,
            });
        }
        Ok((len - self.frame_len) / self.hop + 1)
    }
}

/// Complex spectrogram, `bins x frames`.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub values: Array2<Complex64>,
    pub params: StftParams,
}

impl Spectrogram {
    pub fn bins(&self) -> usize {
        self.values.nrows()
    }

    pub fn frames(&self) -> usize {
        self.values.ncols()
    }

    pub fn magnitude(&self) -> Array2<f64> {
        self.values.mapv(|c| c.norm())
    }
}

/// Planned STFT for a fixed parameter set; reusable across signals.
#[derive(Clone)]
pub struct StftPlan {
    params: StftParams,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for StftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftPlan").field("params", &self.params).finish()
    }
}

impl StftPlan {
    pub fn new(params: StftParams) -> Result<Self> {
        params.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            window: params.window.coefficients(params.frame_len),
            fft: planner.plan_fft_forward(params.frame_len),
            ifft: planner.plan_fft_inverse(params.frame_len),
            params,
        })
    }

    pub fn params(&self) -> &StftParams {
        &self.params
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Frame-major half spectrum: `frames * bins` values, bin index fastest.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<Complex64>> {
        let frames = self.params.frame_count(x.len())?;
        let n = self.params.frame_len;
        let bins = self.params.bins();
        let mut out = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for f in 0..frames {
            let start = f * self.params.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(x[start + i] * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            out.extend_from_slice(&buf[..bins]);
        }
        Ok(out)
    }

    /// Adjoint of `x -> |STFT(x)|` applied to `grad_mag` (frame-major).
    ///
    /// `spec` must be the forward transform of the same signal. Bins with
    /// zero magnitude contribute no gradient.
    pub fn magnitude_vjp(&self, spec: &[Complex64], grad_mag: &[f64], len: usize) -> Vec<f64> {
        let n = self.params.frame_len;
        let bins = self.params.bins();
        let frames = spec.len() / bins;
        let mut gx = vec![0.0; len];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for f in 0..frames {
            for b in buf.iter_mut() {
                *b = Complex64::new(0.0, 0.0);
            }
            for k in 0..bins {
                let c = spec[f * bins + k];
                let m = c.norm();
                if m > 0.0 {
                    buf[k] = c * (grad_mag[f * bins + k] / m);
                }
            }
            // sum_k Re(Z_k e^{+i 2 pi k n / N}) via an unnormalised inverse FFT
            self.ifft.process(&mut buf);
            let start = f * self.params.hop;
            for i in 0..n {
                gx[start + i] += self.window[i] * buf[i].re;
            }
        }
        gx
    }
}

pub fn stft(clip: &AudioClip, params: &StftParams) -> Result<Spectrogram> {
    stft_samples(clip.samples(), params)
}

pub fn stft_samples(x: &[f64], params: &StftParams) -> Result<Spectrogram> {
    let plan = StftPlan::new(*params)?;
    let flat = plan.forward(x)?;
    let bins = params.bins();
    let frames = flat.len() / bins;
    let values = Array2::from_shape_fn((bins, frames), |(k, f)| flat[f * bins + k]);
    Ok(Spectrogram {
        values,
        params: *params,
    })
}

/// Glasberg & Moore ERB-rate of a frequency in Hz.
pub fn hz_to_erb_rate(f: f64) -> f64 {
    21.4 * (1.0 + 0.004_37 * f).log10()
}

pub fn erb_rate_to_hz(e: f64) -> f64 {
    (10f64.powf(e / 21.4) - 1.0) / 0.004_37
}

/// Equivalent rectangular bandwidth at `f` Hz.
pub fn erb_bandwidth(f: f64) -> f64 {
    24.7 * (0.004_37 * f + 1.0)
}

/// Relative response below which a gammatone weight is treated as zero.
const GAMMATONE_SUPPORT_FLOOR: f64 = 1e-2;

/// Aggregation matrix `bands x fft_bins` with gammatone-shaped rows.
#[derive(Debug, Clone)]
pub struct ErbFilterbank {
    /// Nonnegative weights; every row sums to one.
    pub weights: Array2<f64>,
    pub centers_hz: Vec<f64>,
}

impl ErbFilterbank {
    pub fn bands(&self) -> usize {
        self.weights.nrows()
    }

    /// Weighted sum over bins for every frame of a `bins x frames` matrix.
    pub fn aggregate(&self, x: &Array2<f64>) -> Array2<f64> {
        self.weights.dot(x)
    }
}

/// Builds a 4th-order gammatone magnitude filterbank on the ERB scale.
///
/// Centre frequencies are equally spaced in ERB-rate from `f_min` to `f_max`
/// inclusive. Each row holds `(1 + ((f - fc) / b)^2)^-2` with
/// `b = 1.019 * ERB(fc)`, truncated below 1 % and normalised to sum to one.
pub fn gammatone_erb_filterbank(
    erb_bands: usize,
    f_min: f64,
    f_max: f64,
    fft_bins: usize,
    sample_rate: u32,
) -> Result<ErbFilterbank> {
    if erb_bands < 2 {
        return Err(Error::InvalidArgument("need at least 2 ERB bands".into()));
    }
    let nyquist = sample_rate as f64 / 2.0;
    if !(f_min >= 0.0 && f_min < f_max && f_max <= nyquist) {
        return Err(Error::InvalidArgument(format!(
            "ERB range must satisfy 0 <= f_min < f_max <= {nyquist} (got {f_min}..{f_max})"
        )));
    }
    if fft_bins < 2 {
        return Err(Error::InvalidArgument("need at least 2 FFT bins".into()));
    }
    let lo = hz_to_erb_rate(f_min);
    let hi = hz_to_erb_rate(f_max);
    let centers_hz: Vec<f64> = (0..erb_bands)
        .map(|b| erb_rate_to_hz(lo + (hi - lo) * b as f64 / (erb_bands - 1) as f64))
        .collect();
    let bin_hz = nyquist / (fft_bins - 1) as f64;
    let mut weights = Array2::<f64>::zeros((erb_bands, fft_bins));
    for (b, &fc) in centers_hz.iter().enumerate() {
        let bw = 1.019 * erb_bandwidth(fc);
        let mut row_sum = 0.0;
        for k in 0..fft_bins {
            let x = (k as f64 * bin_hz - fc) / bw;
            let r = (1.0 + x * x).powi(-2);
            if r >= GAMMATONE_SUPPORT_FLOOR {
                weights[[b, k]] = r;
                row_sum += r;
            }
        }
        if row_sum == 0.0 {
            return Err(Error::DegenerateBand {
                band: b,
                center_hz: fc,
            });
        }
        weights.row_mut(b).mapv_inplace(|w| w / row_sum);
    }
    Ok(ErbFilterbank {
        weights,
        centers_hz,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub window: Window,
    pub erb_bands: usize,
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    /// Magnitude floor inside the log, also the level below which phase is 0.
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            frame_len: 512,
            hop: 256,
            window: Window::Hann,
            erb_bands: 64,
            f_min_hz: 50.0,
            f_max_hz: 8000.0,
            log_floor: 1e-7,
        }
    }
}

impl FeatureConfig {
    pub fn stft_params(&self) -> Result<StftParams> {
        StftParams::new(self.frame_len, self.hop, self.window)
    }

    pub fn filterbank(&self) -> Result<ErbFilterbank> {
        gammatone_erb_filterbank(
            self.erb_bands,
            self.f_min_hz,
            self.f_max_hz,
            self.frame_len / 2 + 1,
            SAMPLE_RATE,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureChannel {
    LogMagnitude,
    Phase,
    PhaseDerivative,
}

/// Stacked ERB features, zero padded to multiples of 16 on both axes.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlock2D {
    /// `padded_rows x padded_frames`.
    pub values: Array2<f64>,
    pub channels: [FeatureChannel; 3],
    pub erb_bands: usize,
    /// Unpadded frame count.
    pub frames: usize,
}

impl FeatureBlock2D {
    pub fn feature_rows(&self) -> usize {
        3 * self.erb_bands
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Rows belonging to one of the stacked channels.
    pub fn channel_rows(&self, channel: FeatureChannel) -> std::ops::Range<usize> {
        let i = self.channels.iter().position(|&c| c == channel).unwrap();
        i * self.erb_bands..(i + 1) * self.erb_bands
    }
}

pub fn round_up_16(n: usize) -> usize {
    n.div_ceil(16) * 16
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_phase(x: f64) -> f64 {
    let mut y = x.rem_euclid(2.0 * PI);
    if y > PI {
        y -= 2.0 * PI;
    }
    y
}

/// Builds the log-magnitude / phase / phase-derivative block.
///
/// Magnitudes are ERB-aggregated before the log floor. Phase is taken per
/// bin (0 where the magnitude is at or below the floor), differentiated
/// frame-to-frame with wrapping, and each channel aggregated with the same
/// filterbank. The first frame's derivative is 0.
pub fn extract_feature_block(clip: &AudioClip, cfg: &FeatureConfig) -> Result<FeatureBlock2D> {
    let fb = cfg.filterbank()?;
    extract_feature_block_with(clip, cfg, &fb)
}

pub fn extract_feature_block_with(
    clip: &AudioClip,
    cfg: &FeatureConfig,
    fb: &ErbFilterbank,
) -> Result<FeatureBlock2D> {
    let spec = stft(clip, &cfg.stft_params()?)?;
    let (bins, frames) = spec.values.dim();
    let mag = spec.magnitude();
    let phase = Array2::from_shape_fn((bins, frames), |(k, f)| {
        if mag[[k, f]] > cfg.log_floor {
            spec.values[[k, f]].arg()
        } else {
            0.0
        }
    });
    let dphase = Array2::from_shape_fn((bins, frames), |(k, f)| {
        if f == 0 {
            0.0
        } else {
            wrap_phase(phase[[k, f]] - phase[[k, f - 1]])
        }
    });
    let log_mag = fb.aggregate(&mag).mapv(|m| m.max(cfg.log_floor).ln());
    let agg_phase = fb.aggregate(&phase);
    let agg_dphase = fb.aggregate(&dphase);

    let bands = cfg.erb_bands;
    let rows = round_up_16(3 * bands);
    let cols = round_up_16(frames);
    let mut values = Array2::<f64>::zeros((rows, cols));
    for (c, src) in [&log_mag, &agg_phase, &agg_dphase].into_iter().enumerate() {
        values
            .slice_mut(ndarray::s![c * bands..(c + 1) * bands, ..frames])
            .assign(src);
    }
    Ok(FeatureBlock2D {
        values,
        channels: [
            FeatureChannel::LogMagnitude,
            FeatureChannel::Phase,
            FeatureChannel::PhaseDerivative,
        ],
        erb_bands: bands,
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sine(freq: f64, len: usize) -> Vec<f64> {
        (0..len)
            .map(|n| (2.0 * PI * freq * n as f64 / SAMPLE_RATE as f64).sin())
            .collect()
    }

    #[test]
    fn dc_concentrates_in_bin_zero() {
        let p = StftParams::new(32, 16, Window::Rectangular).unwrap();
        let s = stft_samples(&[1.0; 32], &p).unwrap();
        assert_eq!(s.frames(), 1);
        assert_eq!(s.bins(), 17);
        let m = s.magnitude();
        assert!((m[[0, 0]] - 32.0).abs() < 1e-9);
        for k in 1..17 {
            assert!(m[[k, 0]].abs() < 1e-9);
        }
    }

    #[test]
    fn magnitude_scales_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..2000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = StftParams::half_overlap(256).unwrap();
        for a in [2.0, -0.5, 7.25] {
            let ax: Vec<f64> = x.iter().map(|v| a * v).collect();
            let m1 = stft_samples(&x, &p).unwrap().magnitude();
            let m2 = stft_samples(&ax, &p).unwrap().magnitude();
            for (u, v) in m1.iter().zip(m2.iter()) {
                assert!((v - a.abs() * u).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sinusoid_peak_matches_direct_dft() {
        let x = sine(1000.0, 1024);
        let p = StftParams::new(1024, 512, Window::Hann).unwrap();
        let m = stft_samples(&x, &p).unwrap().magnitude();
        let peak = (0..m.nrows())
            .max_by(|&a, &b| m[[a, 0]].total_cmp(&m[[b, 0]]))
            .unwrap();
        // Direct DFT of the windowed frame.
        let w = Window::Hann.coefficients(1024);
        let direct = |k: usize| -> f64 {
            let (mut re, mut im) = (0.0, 0.0);
            for n in 0..1024 {
                let ang = -2.0 * PI * (k * n) as f64 / 1024.0;
                re += x[n] * w[n] * ang.cos();
                im += x[n] * w[n] * ang.sin();
            }
            (re * re + im * im).sqrt()
        };
        let oracle = (0..513).max_by(|&a, &b| direct(a).total_cmp(&direct(b))).unwrap();
        assert_eq!(oracle, 64);
        assert_eq!(peak, oracle);
        assert!((m[[64, 0]] - direct(64)).abs() < 1e-9);
    }

    #[test]
    fn short_signal_is_an_error() {
        let p = StftParams::half_overlap(512).unwrap();
        assert!(matches!(
            stft_samples(&[0.0; 100], &p),
            Err(Error::SignalTooShort { len: 100, need: 512 })
        ));
        assert!(StftParams::new(48, 24, Window::Hann).is_err());
        assert!(StftParams::new(16, 8, Window::Hann).is_err());
    }

    #[test]
    fn magnitude_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        let plan = StftPlan::new(StftParams::half_overlap(64).unwrap()).unwrap();
        let spec = plan.forward(&x).unwrap();
        let g: Vec<f64> = (0..spec.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |x: &[f64]| -> f64 {
            plan.forward(x)
                .unwrap()
                .iter()
                .zip(&g)
                .map(|(c, g)| c.norm() * g)
                .sum()
        };
        let gx = plan.magnitude_vjp(&spec, &g, x.len());
        for i in [0, 17, 63, 100, 199] {
            let h = 1e-6;
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - gx[i]).abs() < 1e-6 * (1.0 + fd.abs()), "i={i} fd={fd} an={}", gx[i]);
        }
    }

    #[test]
    fn filterbank_shape_and_normalisation() {
        let fb = gammatone_erb_filterbank(64, 50.0, 8000.0, 513, SAMPLE_RATE).unwrap();
        assert_eq!(fb.weights.dim(), (64, 513));
        assert!(fb.weights.iter().all(|&w| w >= 0.0));
        for row in fb.weights.rows() {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        let step = hz_to_erb_rate(fb.centers_hz[1]) - hz_to_erb_rate(fb.centers_hz[0]);
        assert!((hz_to_erb_rate(fb.centers_hz[0]) - hz_to_erb_rate(50.0)).abs() <= step);
        assert!((hz_to_erb_rate(fb.centers_hz[63]) - hz_to_erb_rate(8000.0)).abs() <= step);
        assert!(fb.centers_hz.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn filterbank_rejects_coarse_grid() {
        let r = gammatone_erb_filterbank(64, 50.0, 8000.0, 17, SAMPLE_RATE);
        assert!(matches!(r, Err(Error::DegenerateBand { .. })));
        assert!(gammatone_erb_filterbank(1, 50.0, 8000.0, 513, SAMPLE_RATE).is_err());
        assert!(gammatone_erb_filterbank(8, 900.0, 800.0, 513, SAMPLE_RATE).is_err());
        assert!(gammatone_erb_filterbank(8, 50.0, 9000.0, 513, SAMPLE_RATE).is_err());
    }

    #[test]
    fn four_second_clip_block_shape() {
        let clip = AudioClip::at_16k(sine(440.0, 64_000)).unwrap();
        let block = extract_feature_block(&clip, &FeatureConfig::default()).unwrap();
        assert_eq!(block.frames, 249);
        assert_eq!(block.shape(), (192, 256));
        assert!(block.values.iter().all(|v| v.is_finite()));
        // Padding is zero.
        assert!(block.values.slice(ndarray::s![.., 249..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn silent_clip_sits_on_the_floor() {
        let cfg = FeatureConfig::default();
        let clip = AudioClip::at_16k(vec![0.0; 16_000]).unwrap();
        let block = extract_feature_block(&clip, &cfg).unwrap();
        let floor = cfg.log_floor.ln();
        let frames = block.frames;
        for r in block.channel_rows(FeatureChannel::LogMagnitude) {
            for f in 0..frames {
                assert_eq!(block.values[[r, f]], floor);
            }
        }
        for ch in [FeatureChannel::Phase, FeatureChannel::PhaseDerivative] {
            for r in block.channel_rows(ch) {
                assert!(block.values.row(r).iter().all(|&v| v == 0.0));
            }
        }
    }

    fn band_nearest(cfg: &FeatureConfig, hz: f64) -> usize {
        let fb = cfg.filterbank().unwrap();
        (0..fb.bands())
            .min_by(|&a, &b| (fb.centers_hz[a] - hz).abs().total_cmp(&(fb.centers_hz[b] - hz).abs()))
            .unwrap()
    }

    #[test]
    fn sinusoid_phase_derivative_follows_analytic_advance() {
        // hop 256: advance 2*pi*1000*256/16000 = 32*pi, which wraps to 0.
        let cfg = FeatureConfig::default();
        let clip = AudioClip::at_16k(sine(1000.0, 32_000)).unwrap();
        let block = extract_feature_block(&clip, &cfg).unwrap();
        let row = block.channel_rows(FeatureChannel::PhaseDerivative).start + band_nearest(&cfg, 1000.0);
        for f in 2..block.frames - 1 {
            assert!(block.values[[row, f]].abs() < 1e-6);
        }

        // hop 100: advance wraps to pi/2; the band value is that advance times the
        // filterbank weight on the bins the tone occupies.
        let cfg = FeatureConfig { hop: 100, ..FeatureConfig::default() };
        let block = extract_feature_block(&clip, &cfg).unwrap();
        let band = band_nearest(&cfg, 1000.0);
        let row = block.channel_rows(FeatureChannel::PhaseDerivative).start + band;
        let vals: Vec<f64> = (2..block.frames - 1).map(|f| block.values[[row, f]]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        assert!(std < 0.05 * mean.abs(), "mean {mean} std {std}");
        let fb = cfg.filterbank().unwrap();
        let occupied: f64 = (31..=33).map(|k| fb.weights[[band, k]]).sum();
        let analytic = wrap_phase(2.0 * PI * 1000.0 * 100.0 / 16_000.0) * occupied;
        assert!((mean - analytic).abs() < 1e-3 * analytic.abs().max(1e-3), "{mean} vs {analytic}");
    }
}
