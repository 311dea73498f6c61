//! Corpus construction: reverberant speech synthesis, synthetic rooms,
//! parameter labels and their log mapping, room-disjoint splits and the
//! JSON-lines manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::acoustics::{boundary_point, rt60_schroeder, BoundaryConfig};
use crate::audio::{AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Target RIR length: one second at 16 kHz.
pub const RIR_LEN: usize = 16_000;

/// Multiplier applied to RT60 (seconds) before the log10 mapping.
pub const RT_KAPPA: f64 = 100.0;

/// Full linear convolution via FFT.
pub fn fft_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut fa: Vec<Complex64> = a.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fa.resize(n, Complex64::new(0.0, 0.0));
    let mut fb: Vec<Complex64> = b.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fb.resize(n, Complex64::new(0.0, 0.0));
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inv.process(&mut fa);
    let scale = 1.0 / n as f64;
    fa[..out_len].iter().map(|c| c.re * scale).collect()
}

/// Reverberant speech: anechoic speech convolved with the RIR, truncated to
/// the speech length. No additive noise.
pub fn convolve_speech(anechoic: &AudioClip, rir: &AudioClip) -> Result<AudioClip> {
    if anechoic.is_empty() {
        return Err(Error::EmptyInput("anechoic speech"));
    }
    if rir.is_empty() {
        return Err(Error::EmptyInput("RIR"));
    }
    anechoic.require_rate(SAMPLE_RATE)?;
    rir.require_rate(SAMPLE_RATE)?;
    let mut y = fft_convolve(anechoic.samples(), rir.samples());
    y.truncate(anechoic.len());
    AudioClip::at_16k(y)
}

/// Right-pads with zeros or right-crops to exactly `target` samples.
pub fn fix_length(rir: &AudioClip, target: usize) -> AudioClip {
    let mut s = rir.samples().to_vec();
    s.resize(target, 0.0);
    AudioClip::new(s, rir.sample_rate()).expect("finite input stays finite")
}

/// Physical room parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomParams {
    pub volume_m3: f64,
    pub rt60_s: f64,
    pub bp_samples: f64,
}

impl RoomParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.volume_m3 > 0.0
            && self.rt60_s > 0.0
            && self.bp_samples > 0.0
            && self.bp_samples <= RIR_LEN as f64
            && self.volume_m3.is_finite()
            && self.rt60_s.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "room parameters out of range: {self:?}"
            )))
        }
    }
}

/// Room parameters in the log10 domain the estimator regresses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogParams {
    pub log_v: f64,
    pub log_rt: f64,
    pub log_bp: f64,
    pub kappa: f64,
}

impl LogParams {
    pub fn as_array(&self) -> [f64; 3] {
        [self.log_v, self.log_rt, self.log_bp]
    }
}

pub fn log_map(p: &RoomParams) -> Result<LogParams> {
    if !(p.volume_m3 > 0.0 && p.rt60_s > 0.0 && p.bp_samples > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "log mapping needs positive parameters, got {p:?}"
        )));
    }
    Ok(LogParams {
        log_v: p.volume_m3.log10(),
        log_rt: (RT_KAPPA * p.rt60_s).log10(),
        log_bp: p.bp_samples.log10(),
        kappa: RT_KAPPA,
    })
}

pub fn log_unmap(l: &LogParams) -> RoomParams {
    RoomParams {
        volume_m3: 10f64.powf(l.log_v),
        rt60_s: 10f64.powf(l.log_rt) / l.kappa,
        bp_samples: 10f64.powf(l.log_bp),
    }
}

/// Prior tying synthetic volume, RT60 and boundary point together.
///
/// Volume is log-uniform. RT60 follows a power law in volume with log-normal
/// jitter; the boundary point follows `offset + sqrt(V)` milliseconds, the
/// usual mixing-time scaling, with multiplicative jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomPrior {
    pub volume_min_m3: f64,
    pub volume_max_m3: f64,
    /// RT60 at the smallest and largest volume.
    pub rt60_at_min_s: f64,
    pub rt60_at_max_s: f64,
    /// Standard deviation of the RT60 jitter, in decades.
    pub rt60_jitter_dec: f64,
    pub bp_offset_ms: f64,
    pub bp_jitter: f64,
    pub n_reflections: usize,
    /// Range of direct-to-tail energy ratio, dB.
    pub drr_min_db: f64,
    pub drr_max_db: f64,
}

impl Default for RoomPrior {
    fn default() -> Self {
        Self {
            volume_min_m3: 10.0,
            volume_max_m3: 1e4,
            rt60_at_min_s: 0.25,
            rt60_at_max_s: 0.9,
            rt60_jitter_dec: 0.03,
            bp_offset_ms: 20.0,
            bp_jitter: 0.05,
            n_reflections: 12,
            drr_min_db: -6.0,
            drr_max_db: -1.0,
        }
    }
}

impl RoomPrior {
    fn volume_fraction(&self, v: f64) -> f64 {
        ((v.log10() - self.volume_min_m3.log10())
            / (self.volume_max_m3.log10() - self.volume_min_m3.log10()))
        .clamp(0.0, 1.0)
    }

    /// Median RT60 for a volume.
    pub fn rt60_for_volume(&self, v: f64) -> f64 {
        let t = self.volume_fraction(v);
        10f64.powf(self.rt60_at_min_s.log10() * (1.0 - t) + self.rt60_at_max_s.log10() * t)
    }

    /// Inverse of [`Self::rt60_for_volume`], clamped to the volume range.
    pub fn volume_for_rt60(&self, rt60: f64) -> f64 {
        let (a, b) = (self.rt60_at_min_s.log10(), self.rt60_at_max_s.log10());
        let t = ((rt60.log10() - a) / (b - a)).clamp(0.0, 1.0);
        10f64.powf(self.volume_min_m3.log10() * (1.0 - t) + self.volume_max_m3.log10() * t)
    }

    pub fn bp_ms_for_volume(&self, v: f64) -> f64 {
        self.bp_offset_ms + v.sqrt()
    }

    /// Draws a synthetic room description.
    pub fn sample(&self, rng: &mut impl Rng) -> SynthSpec {
        let lv = rng.random_range(self.volume_min_m3.log10()..=self.volume_max_m3.log10());
        let v = 10f64.powf(lv);
        let jitter: f64 = StandardNormal.sample(rng);
        let rt60 = self.rt60_for_volume(v) * 10f64.powf(self.rt60_jitter_dec * jitter);
        let bp_ms = self.bp_ms_for_volume(v) * (1.0 + self.bp_jitter * rng.random_range(-1.0..=1.0));
        SynthSpec {
            rt60_s: rt60,
            bp_samples: (bp_ms * 1e-3 * SAMPLE_RATE as f64).round().max(1.0) as usize,
            n_reflections: self.n_reflections,
            volume_m3: Some(v),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub rt60_s: f64,
    pub bp_samples: usize,
    pub n_reflections: usize,
    /// Drawn from the prior given RT60 when absent.
    pub volume_m3: Option<f64>,
}

/// Minimum decay (dB) the tail must cover inside the one-second window.
const MIN_TAIL_DECAY_DB: f64 = 45.0;

/// Synthesises a one-second RIR: direct impulse, sparse early reflections
/// before the boundary point, then exponentially decaying Gaussian noise.
///
/// Returned labels are measured back from the waveform (Schroeder RT60 and
/// the NED boundary point), so they agree with the analysis routines.
pub fn synth_rir(
    spec: &SynthSpec,
    prior: &RoomPrior,
    boundary: &BoundaryConfig,
    seed: u64,
) -> Result<(AudioClip, RoomParams)> {
    let fs = SAMPLE_RATE as f64;
    if !(0.05..=2.0).contains(&spec.rt60_s) {
        return Err(Error::InvalidArgument(format!(
            "rt60 {} s outside [0.05, 2.0]",
            spec.rt60_s
        )));
    }
    if spec.bp_samples == 0 || spec.bp_samples >= RIR_LEN {
        return Err(Error::InvalidArgument(format!(
            "boundary point {} outside 1..{RIR_LEN}",
            spec.bp_samples
        )));
    }
    let tail_decay_db = 60.0 * (RIR_LEN - spec.bp_samples) as f64 / (spec.rt60_s * fs);
    if tail_decay_db < MIN_TAIL_DECAY_DB {
        return Err(Error::Infeasible(format!(
            "rt60 {} s decays only {tail_decay_db:.1} dB within the one-second window",
            spec.rt60_s
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = 10f64.powf(-3.0 / (spec.rt60_s * fs));
    let env = |n: usize| r.powi(n as i32);
    let drr_db = rng.random_range(prior.drr_min_db..=prior.drr_max_db);
    // Tail energy (unit gain) is sum_{n>=bp} env(n)^2 times the noise variance.
    let tail_energy: f64 = (spec.bp_samples..RIR_LEN).map(|n| env(n) * env(n)).sum();
    let gain = (10f64.powf(-drr_db / 10.0) / tail_energy).sqrt();

    let mut h = vec![0.0; RIR_LEN];
    h[0] = 1.0;
    let first = (spec.bp_samples / 16).max(8).min(spec.bp_samples.saturating_sub(1)).max(1);
    for _ in 0..spec.n_reflections {
        if first >= spec.bp_samples {
            break;
        }
        let pos = rng.random_range(first..spec.bp_samples);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        h[pos] += sign * gain * env(pos) * rng.random_range(1.0..3.0);
    }
    for (n, x) in h.iter_mut().enumerate().skip(spec.bp_samples) {
        let z: f64 = StandardNormal.sample(&mut rng);
        *x += gain * env(n) * z;
    }

    let volume_m3 = match spec.volume_m3 {
        Some(v) => v,
        None => {
            let jitter: f64 = StandardNormal.sample(&mut rng);
            (prior.volume_for_rt60(spec.rt60_s) * 10f64.powf(0.1 * jitter))
                .clamp(prior.volume_min_m3, prior.volume_max_m3)
        }
    };

    let clip = AudioClip::at_16k(h)?;
    let rt60_s = rt60_schroeder(&clip)?;
    let bp = boundary_point(&clip, boundary)?;
    let params = RoomParams {
        volume_m3,
        rt60_s,
        bp_samples: bp.samples.max(1) as f64,
    };
    Ok((clip, params))
}

/// Speech-like test signal: voiced syllables (formant-shaped harmonic
/// series), occasional unvoiced noise bursts, separated by silent gaps.
pub fn synth_speech(duration_s: f64, seed: u64) -> Result<AudioClip> {
    let fs = SAMPLE_RATE as f64;
    let len = (duration_s * fs).round() as usize;
    if len == 0 {
        return Err(Error::EmptyInput("speech duration"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0; len];
    let mut t = (rng.random_range(0.0..0.1) * fs) as usize;
    let base_f0: f64 = rng.random_range(95.0..230.0);
    while t < len {
        let syl = (rng.random_range(0.08..0.26) * fs) as usize;
        let end = (t + syl).min(len);
        let n = end - t;
        let attack = (0.015 * fs) as usize;
        let release = (0.04 * fs) as usize;
        let envelope = |i: usize| -> f64 {
            let a = if i < attack { 0.5 - 0.5 * (PI * i as f64 / attack as f64).cos() } else { 1.0 };
            let r = if n - i < release {
                0.5 - 0.5 * (PI * (n - i) as f64 / release as f64).cos()
            } else {
                1.0
            };
            a * r
        };
        let level = rng.random_range(0.4..1.0);
        if rng.random_bool(0.8) {
            let f0_start: f64 = base_f0 * rng.random_range(0.85..1.15);
            let f0_end = f0_start * rng.random_range(0.85..1.15);
            let formants = [
                (rng.random_range(300.0..900.0), 90.0),
                (rng.random_range(900.0..2500.0), 120.0),
                (rng.random_range(2300.0..3300.0), 160.0),
            ];
            let spectral = |f: f64| -> f64 {
                formants
                    .iter()
                    .map(|&(fc, bw)| 1.0 / (1.0 + ((f - fc) / bw).powi(2)))
                    .sum::<f64>()
                    + 0.02
            };
            let n_harm = (4000.0 / f0_start.max(f0_end)).floor() as usize;
            let amps: Vec<f64> = (1..=n_harm)
                .map(|k| spectral(k as f64 * 0.5 * (f0_start + f0_end)) / (k as f64).sqrt())
                .collect();
            let mut phase = 0.0;
            for i in 0..n {
                let f0 = f0_start + (f0_end - f0_start) * i as f64 / n as f64;
                phase += 2.0 * PI * f0 / fs;
                let mut s = 0.0;
                for (k, a) in amps.iter().enumerate() {
                    s += a * ((k + 1) as f64 * phase).sin();
                }
                out[t + i] += level * envelope(i) * s;
            }
        } else {
            let mut prev = 0.0;
            for i in 0..n {
                let z: f64 = StandardNormal.sample(&mut rng);
                let hp = z - 0.9 * prev;
                prev = z;
                out[t + i] += 0.3 * level * envelope(i) * hp;
            }
        }
        t = end + (rng.random_range(0.03..0.25) * fs) as usize;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    AudioClip::at_16k(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub speech_path: PathBuf,
    pub rir_path: PathBuf,
    pub room_id: String,
    pub volume_m3: f64,
    pub rt60_s: f64,
    pub bp_samples: f64,
    pub is_real_room: bool,
    pub split: Option<Split>,
}

impl CorpusEntry {
    pub fn params(&self) -> RoomParams {
        RoomParams {
            volume_m3: self.volume_m3,
            rt60_s: self.rt60_s,
            bp_samples: self.bp_samples,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: u32,
    pub val: u32,
    pub test: u32,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 6,
            val: 2,
            test: 2,
        }
    }
}

/// Minimum number of real rooms needed before a test split is formed.
pub const MIN_REAL_ROOMS: usize = 5;

/// Which rooms may land in the test split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestPool {
    RealOnly,
    AnyRoom,
}

/// Assigns splits by room. Test rooms are drawn from real rooms only; the
/// remaining rooms are shuffled into validation and training.
pub fn split_by_room(entries: &mut [CorpusEntry], ratios: SplitRatios, seed: u64) -> Result<()> {
    split_by_room_with(entries, ratios, seed, TestPool::RealOnly)
}

/// As [`split_by_room`], optionally letting synthetic rooms into the test
/// split (for corpora without real recordings).
pub fn split_by_room_with(
    entries: &mut [CorpusEntry],
    ratios: SplitRatios,
    seed: u64,
    pool: TestPool,
) -> Result<()> {
    let mut rooms: BTreeMap<&str, bool> = BTreeMap::new();
    for e in entries.iter() {
        let real = rooms.entry(e.room_id.as_str()).or_insert(e.is_real_room);
        if *real != e.is_real_room {
            return Err(Error::Data(format!(
                "room {} mixes real and synthetic entries",
                e.room_id
            )));
        }
    }
    let eligible = |r: bool| r || pool == TestPool::AnyRoom;
    let mut real: Vec<String> = rooms.iter().filter(|(_, &r)| eligible(r)).map(|(k, _)| k.to_string()).collect();
    let mut synthetic: Vec<String> = rooms.iter().filter(|(_, &r)| !eligible(r)).map(|(k, _)| k.to_string()).collect();
    if real.len() < MIN_REAL_ROOMS {
        return Err(Error::TestSplit {
            real: real.len(),
            needed: MIN_REAL_ROOMS,
        });
    }
    let total = rooms.len() as f64;
    let sum = (ratios.train + ratios.val + ratios.test) as f64;
    if sum == 0.0 {
        return Err(Error::InvalidArgument("split ratios sum to zero".into()));
    }
    let n_test = ((total * ratios.test as f64 / sum).round() as usize).max(1);
    let n_val = (total * ratios.val as f64 / sum).round() as usize;
    if n_test > real.len() {
        return Err(Error::TestSplit {
            real: real.len(),
            needed: n_test,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    real.shuffle(&mut rng);
    let test: BTreeSet<String> = real.drain(..n_test).collect();
    let mut rest = real;
    rest.append(&mut synthetic);
    rest.sort();
    rest.shuffle(&mut rng);
    let val: BTreeSet<String> = rest.iter().take(n_val).cloned().collect();
    for e in entries.iter_mut() {
        e.split = Some(if test.contains(&e.room_id) {
            Split::Test
        } else if val.contains(&e.room_id) {
            Split::Val
        } else {
            Split::Train
        });
    }
    Ok(())
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[CorpusEntry]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<CorpusEntry>> {
    let path = path.as_ref();
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: CorpusEntry = serde_json::from_str(&line)
            .map_err(|err| Error::Data(format!("{}:{}: {err}", path.display(), i + 1)))?;
        out.push(e);
    }
    Ok(out)
}

/// Resolves a manifest path relative to the manifest's directory.
pub fn resolve(manifest_dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_dir.join(p)
    }
}
