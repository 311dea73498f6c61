//! Inputs shared by the benchmarks.

use candle_core::{DType, Device, Tensor};
use rirest::acoustics::BoundaryConfig;
use rirest::dataset::{synth_rir, synth_speech, RoomPrior, SynthSpec};
use rirest::AudioClip;

/// A 0.5 s RT60 synthetic RIR.
pub fn rir(seed: u64) -> AudioClip {
    let spec = SynthSpec {
        rt60_s: 0.5,
        bp_samples: 800,
        n_reflections: 12,
        volume_m3: Some(200.0),
    };
    synth_rir(&spec, &RoomPrior::default(), &BoundaryConfig::default(), seed)
        .expect("feasible room")
        .0
}

pub fn speech(seconds: f64, seed: u64) -> AudioClip {
    synth_speech(seconds, seed).expect("positive duration")
}

/// Gaussian tensor of the given shape in f32.
pub fn randn(shape: &[usize]) -> Tensor {
    Tensor::randn(0f32, 1.0, shape, &Device::Cpu)
        .and_then(|t| t.to_dtype(DType::F32))
        .expect("cpu allocation")
}
