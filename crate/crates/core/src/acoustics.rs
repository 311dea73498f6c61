//! Ground-truth acoustic descriptors of a measured or synthesised RIR:
//! Schroeder energy decay, RT60, DRR, normalised echo density and the
//! early/late boundary point.

use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};

/// Level the EDC is clamped to once the remaining energy vanishes.
pub const EDC_FLOOR_DB: f64 = -120.0;

/// `1 / erfc(1/sqrt(2))`: inverse of the fraction of a Gaussian lying
/// outside one standard deviation.
pub fn gauss_const() -> f64 {
    1.0 / libm::erfc(std::f64::consts::FRAC_1_SQRT_2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayCurve {
    pub edc_db: Vec<f64>,
    pub fit_range: (f64, f64),
}

/// Schroeder backward-integrated energy, in dB re. total energy.
pub fn energy_decay_curve(rir: &AudioClip) -> Result<DecayCurve> {
    let h = rir.samples();
    let mut tail = vec![0.0; h.len()];
    let mut acc = 0.0;
    for (t, &x) in tail.iter_mut().zip(h).rev() {
        acc += x * x;
        *t = acc;
    }
    let total = acc;
    if total == 0.0 {
        return Err(Error::SilentRir);
    }
    let edc_db = tail
        .iter()
        .map(|&e| {
            if e > 0.0 {
                (10.0 * (e / total).log10()).max(EDC_FLOOR_DB)
            } else {
                EDC_FLOOR_DB
            }
        })
        .collect();
    Ok(DecayCurve {
        edc_db,
        fit_range: (-5.0, -35.0),
    })
}

/// Slope (dB/s) of the least-squares line through the EDC between the first
/// crossings of `upper_db` and `lower_db`.
fn edc_slope(edc: &[f64], sample_rate: u32, upper_db: f64, lower_db: f64) -> Result<f64> {
    let reached = edc.iter().cloned().fold(0.0, f64::min);
    let start = edc.iter().position(|&e| e <= upper_db);
    let end = edc.iter().position(|&e| e <= lower_db);
    let (start, end) = match (start, end) {
        (Some(s), Some(e)) if e > s => (s, e),
        _ => {
            return Err(Error::InsufficientDecay {
                reached_db: reached,
                needed_db: lower_db,
            })
        }
    };
    let n = (end - start + 1) as f64;
    let fs = sample_rate as f64;
    let (mut st, mut sy) = (0.0, 0.0);
    for (i, &y) in edc[start..=end].iter().enumerate() {
        st += (start + i) as f64 / fs;
        sy += y;
    }
    let (mt, my) = (st / n, sy / n);
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &y) in edc[start..=end].iter().enumerate() {
        let dt = (start + i) as f64 / fs - mt;
        num += dt * (y - my);
        den += dt * dt;
    }
    if den == 0.0 || num >= 0.0 {
        return Err(Error::InsufficientDecay {
            reached_db: reached,
            needed_db: lower_db,
        });
    }
    Ok(num / den)
}

/// RT60 from a line fit to the EDC over [-5, -35] dB.
pub fn rt60_schroeder(rir: &AudioClip) -> Result<f64> {
    let edc = energy_decay_curve(rir)?;
    let slope = edc_slope(&edc.edc_db, rir.sample_rate(), -5.0, -35.0)?;
    Ok(60.0 / slope.abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rt60Estimate {
    pub rt60_s: f64,
    /// True when the [-5, -25] dB fallback range was used.
    pub fallback: bool,
}

/// RT60 with the [-5, -25] dB fallback when -35 dB is never reached.
pub fn rt60_with_fallback(rir: &AudioClip) -> Result<Rt60Estimate> {
    match rt60_schroeder(rir) {
        Ok(rt60_s) => Ok(Rt60Estimate {
            rt60_s,
            fallback: false,
        }),
        Err(Error::InsufficientDecay { .. }) => {
            let edc = energy_decay_curve(rir)?;
            let slope = edc_slope(&edc.edc_db, rir.sample_rate(), -5.0, -25.0)?;
            Ok(Rt60Estimate {
                rt60_s: 60.0 / slope.abs(),
                fallback: true,
            })
        }
        Err(e) => Err(e),
    }
}

pub const DRR_CLAMP_DB: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Drr {
    pub drr_db: f64,
    /// Set when nothing remains outside the direct window.
    pub silent_tail: bool,
    pub clamped: bool,
}

/// Direct-to-reverberant ratio with the direct window spanning
/// [-0.5 ms, +2.5 ms] around the absolute peak, clamped to +-40 dB.
pub fn drr(rir: &AudioClip) -> Result<Drr> {
    let h = rir.samples();
    let (peak, peak_val) = h
        .iter()
        .enumerate()
        .map(|(i, v)| (i, v.abs()))
        .fold((0, 0.0), |best, cur| if cur.1 > best.1 { cur } else { best });
    if peak_val == 0.0 {
        return Err(Error::SilentRir);
    }
    let fs = rir.sample_rate() as f64;
    let before = (0.5e-3 * fs).round() as usize;
    let after = (2.5e-3 * fs).round() as usize;
    let lo = peak.saturating_sub(before);
    let hi = (peak + after).min(h.len() - 1);
    let mut direct = 0.0;
    let mut reverb = 0.0;
    for (i, &x) in h.iter().enumerate() {
        if (lo..=hi).contains(&i) {
            direct += x * x;
        } else {
            reverb += x * x;
        }
    }
    if reverb == 0.0 {
        return Ok(Drr {
            drr_db: DRR_CLAMP_DB,
            silent_tail: true,
            clamped: true,
        });
    }
    let raw = 10.0 * (direct / reverb).log10();
    let drr_db = raw.clamp(-DRR_CLAMP_DB, DRR_CLAMP_DB);
    Ok(Drr {
        drr_db,
        silent_tail: false,
        clamped: drr_db != raw,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EchoDensityProfile {
    pub ned: Vec<f64>,
    pub half_window: usize,
    pub weights: Vec<f64>,
    pub gauss_const: f64,
}

/// Hann weights over `2 * half_window + 1` points (no zero end points),
/// normalised to sum to one.
pub fn ned_weights(half_window: usize) -> Vec<f64> {
    let len = 2 * half_window + 1;
    let raw: Vec<f64> = (0..len)
        .map(|i| {
            let x = std::f64::consts::PI * (i + 1) as f64 / (len + 1) as f64;
            x.sin().powi(2)
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / s).collect()
}

/// Relative deviation below which a window counts as having zero spread.
const NED_ZERO_SPREAD: f64 = 1e-10;

/// NED at sample `n`; `w` covers `[n - half, n + half]` and is truncated and
/// renormalised at the edges.
#[inline]
fn ned_at(h: &[f64], w: &[f64], half: usize, n: usize, gauss: f64) -> f64 {
    let lo = n.saturating_sub(half);
    let hi = (n + half).min(h.len() - 1);
    let woff = lo + half - n;
    let hs = &h[lo..=hi];
    let ws = &w[woff..woff + hs.len()];
    let mut wsum = 0.0;
    let mut mean = 0.0;
    let mut power = 0.0;
    for (&x, &wt) in hs.iter().zip(ws) {
        wsum += wt;
        mean += wt * x;
        power += wt * x * x;
    }
    mean /= wsum;
    let mut var = 0.0;
    for (&x, &wt) in hs.iter().zip(ws) {
        var += wt * (x - mean) * (x - mean);
    }
    let sigma = (var / wsum).sqrt();
    let rms = (power / wsum).sqrt();
    if rms == 0.0 || sigma <= NED_ZERO_SPREAD * rms {
        return 0.0;
    }
    let mut count = 0.0;
    for (&x, &wt) in hs.iter().zip(ws) {
        if (x - mean).abs() > sigma {
            count += wt;
        }
    }
    gauss * count / wsum
}

fn ned_prefix(h: &[f64], half_window: usize, upto: usize) -> Vec<f64> {
    let w = ned_weights(half_window);
    let g = gauss_const();
    (0..upto.min(h.len()))
        .map(|n| ned_at(h, &w, half_window, n, g))
        .collect()
}

/// Normalised echo density per sample.
///
/// The spread is the window-weighted standard deviation, and a sample counts
/// when its deviation from the weighted window mean exceeds it. Windows with
/// no spread (silence, constants) yield 0.
pub fn ned_curve(rir: &AudioClip, half_window: usize) -> Result<EchoDensityProfile> {
    if half_window < 16 {
        return Err(Error::InvalidArgument(format!(
            "NED half window {half_window} must be >= 16"
        )));
    }
    if rir.is_empty() {
        return Err(Error::EmptyInput("RIR"));
    }
    Ok(EchoDensityProfile {
        ned: ned_prefix(rir.samples(), half_window, rir.len()),
        half_window,
        weights: ned_weights(half_window),
        gauss_const: gauss_const(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryConfig {
    pub half_window: usize,
    pub eps_plateau: f64,
    pub hold_len: usize,
    pub cap_ms: f64,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        Self {
            half_window: 320,
            eps_plateau: 0.1,
            hold_len: 160,
            cap_ms: 200.0,
        }
    }
}

impl BoundaryConfig {
    pub fn cap_samples(&self, sample_rate: u32) -> usize {
        (self.cap_ms * 1e-3 * sample_rate as f64).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPoint {
    pub samples: usize,
    pub no_plateau: bool,
}

impl BoundaryPoint {
    pub fn ms(&self, sample_rate: u32) -> f64 {
        self.samples as f64 * 1e3 / sample_rate as f64
    }
}

/// First sample from which NED stays at or above `1 - eps` for `hold_len`
/// samples; the cap (flagged) when that never happens before the cap.
pub fn boundary_point(rir: &AudioClip, cfg: &BoundaryConfig) -> Result<BoundaryPoint> {
    if cfg.half_window < 16 {
        return Err(Error::InvalidArgument(format!(
            "NED half window {} must be >= 16",
            cfg.half_window
        )));
    }
    if rir.is_empty() {
        return Err(Error::EmptyInput("RIR"));
    }
    if cfg.hold_len == 0 {
        return Err(Error::InvalidArgument("hold length must be positive".into()));
    }
    let cap = cfg.cap_samples(rir.sample_rate());
    let ned = ned_prefix(rir.samples(), cfg.half_window, cap + cfg.hold_len);
    Ok(plateau_start(&ned, cfg.eps_plateau, cfg.hold_len, cap))
}

/// Plateau search over a precomputed NED curve.
pub fn plateau_start(ned: &[f64], eps: f64, hold: usize, cap: usize) -> BoundaryPoint {
    let thr = 1.0 - eps;
    let mut run = 0usize;
    for (m, &v) in ned.iter().enumerate() {
        if v >= thr {
            run += 1;
            if run == hold {
                let n = m + 1 - hold;
                if n <= cap {
                    return BoundaryPoint {
                        samples: n,
                        no_plateau: false,
                    };
                }
                break;
            }
        } else {
            run = 0;
            if m >= cap + hold {
                break;
            }
        }
    }
    BoundaryPoint {
        samples: cap,
        no_plateau: true,
    }
}
