//! Mono waveform container and WAV I/O.

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};

/// Sample rate every pipeline entry point runs at.
pub const SAMPLE_RATE: u32 = 16_000;

/// A mono waveform with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    /// Wraps samples, rejecting NaN and infinities.
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite sample at index {i}"
            )));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// Clip at the pipeline rate.
    pub fn at_16k(samples: Vec<f64>) -> Result<Self> {
        Self::new(samples, SAMPLE_RATE)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    pub fn require_rate(&self, rate: u32) -> Result<()> {
        if self.sample_rate != rate {
            return Err(Error::SampleRate {
                got: self.sample_rate,
                expected: rate,
            });
        }
        Ok(())
    }

    /// Band-limited resampling with a Blackman-windowed sinc kernel.
    pub fn resample(&self, target_rate: u32) -> Result<AudioClip> {
        if target_rate == self.sample_rate {
            return Ok(self.clone());
        }
        if target_rate == 0 {
            return Err(Error::InvalidArgument("target rate must be positive".into()));
        }
        const HALF_TAPS: f64 = 32.0;
        let ratio = target_rate as f64 / self.sample_rate as f64;
        let cutoff = ratio.min(1.0);
        let half_width = HALF_TAPS / cutoff;
        let out_len = (self.samples.len() as f64 * ratio).round() as usize;
        let n_in = self.samples.len() as isize;
        let mut out = Vec::with_capacity(out_len);
        for i in 0..out_len {
            let t = i as f64 / ratio;
            let lo = ((t - half_width).ceil() as isize).max(0);
            let hi = ((t + half_width).floor() as isize).min(n_in - 1);
            let mut acc = 0.0;
            for k in lo..=hi {
                let x = t - k as f64;
                let arg = cutoff * x;
                let sinc = if arg.abs() < 1e-12 {
                    1.0
                } else {
                    (PI * arg).sin() / (PI * arg)
                };
                let u = (x / half_width + 1.0) / 2.0;
                let win = 0.42 - 0.5 * (2.0 * PI * u).cos() + 0.08 * (4.0 * PI * u).cos();
                acc += self.samples[k as usize] * cutoff * sinc * win;
            }
            out.push(acc);
        }
        AudioClip::new(out, target_rate)
    }
}

/// Reads a mono PCM-16 or float32 WAV file.
///
/// Files at a rate other than 16 kHz are rejected unless `resample` is set.
pub fn read_wav(path: impl AsRef<Path>, resample: bool) -> Result<AudioClip> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::AudioFormat(format!(
            "{}: expected mono, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::AudioFormat(format!(
                "{}: unsupported sample format {fmt:?}/{bits} bit",
                path.display()
            )))
        }
    };
    let clip = AudioClip::new(samples, spec.sample_rate)?;
    if clip.sample_rate() == SAMPLE_RATE {
        Ok(clip)
    } else if resample {
        clip.resample(SAMPLE_RATE)
    } else {
        Err(Error::SampleRate {
            got: clip.sample_rate(),
            expected: SAMPLE_RATE,
        })
    }
}

/// Writes a clip as 32-bit float mono WAV.
pub fn write_wav_f32(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in clip.samples() {
        writer.write_sample(s as f32)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Writes a clip as 16-bit PCM mono WAV, clipping to [-1, 1].
pub fn write_wav_pcm16(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in clip.samples() {
        writer.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    writer.finalize()?;
    Ok(())
}
