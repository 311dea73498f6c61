use std::path::{Path, PathBuf};

use anyhow::Context;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rirest::acoustics::{boundary_point, rt60_with_fallback};
use rirest::audio::{read_wav, write_wav_f32};
use rirest::dataset::{
    convolve_speech, fix_length, split_by_room_with, synth_rir, synth_speech, write_manifest, CorpusEntry, RIR_LEN,
};
use rirest::error::Error;
use rirest::{AudioClip, RunConfig};
use serde::Deserialize;

use crate::data_error;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Optional `<rir>.json` next to a measured RIR.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RirSidecar {
    volume_m3: f64,
}

fn wav_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).with_context(|| format!("reading {}", d.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// A labelled RIR ready to be paired with speech.
struct RirItem {
    id: String,
    room_id: String,
    real: bool,
    clip: AudioClip,
    volume_m3: f64,
    rt60_s: f64,
    bp_samples: f64,
}

fn measured_rirs(cfg: &RunConfig, dir: &Path, resample: bool) -> anyhow::Result<Vec<RirItem>> {
    let mut items = Vec::new();
    for path in wav_files(dir)? {
        let rel = path.strip_prefix(dir).unwrap_or(&path);
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("rir").to_string();
        let room_id = match rel.parent().filter(|p| !p.as_os_str().is_empty()) {
            Some(p) => format!("real/{}", p.display()),
            None => format!("real/{stem}"),
        };
        let clip = fix_length(&read_wav(&path, resample)?, RIR_LEN);
        let rt = rt60_with_fallback(&clip).with_context(|| format!("labelling {}", path.display()))?;
        if rt.fallback {
            log::warn!("{}: RT60 from the [-5, -25] dB fallback fit", path.display());
        }
        let bp = boundary_point(&clip, &cfg.data.boundary)?;
        let sidecar = path.with_extension("json");
        let volume_m3 = if sidecar.exists() {
            let s: RirSidecar = serde_json::from_str(&std::fs::read_to_string(&sidecar)?)
                .map_err(|e| data_error(format!("{}: {e}", sidecar.display())))?;
            s.volume_m3
        } else {
            log::warn!("{}: no volume sidecar, volume taken from the RT60 prior", path.display());
            cfg.data.prior.volume_for_rt60(rt.rt60_s)
        };
        items.push(RirItem {
            id: format!("{}-{}", room_id.replace('/', "_"), stem),
            room_id,
            real: true,
            clip,
            volume_m3,
            rt60_s: rt.rt60_s,
            bp_samples: bp.samples.max(1) as f64,
        });
    }
    Ok(items)
}

fn synthetic_rirs(cfg: &RunConfig, rooms: usize, rng: &mut ChaCha8Rng) -> anyhow::Result<Vec<RirItem>> {
    let prior = &cfg.data.prior;
    let mut items = Vec::new();
    for room in 0..rooms {
        let mut made = 0;
        let mut attempts = 0;
        let mut spec = prior.sample(rng);
        while made < cfg.data.rirs_per_room {
            attempts += 1;
            if attempts > 100 * cfg.data.rirs_per_room {
                return Err(data_error("room prior keeps producing infeasible rooms"));
            }
            match synth_rir(&spec, prior, &cfg.data.boundary, rng.random()) {
                Ok((clip, params)) => {
                    items.push(RirItem {
                        id: format!("synth{room:05}-{made:02}"),
                        room_id: format!("synth/{room:05}"),
                        real: false,
                        clip,
                        volume_m3: params.volume_m3,
                        rt60_s: params.rt60_s,
                        bp_samples: params.bp_samples,
                    });
                    made += 1;
                }
                Err(Error::Infeasible(_)) if made == 0 => spec = prior.sample(rng),
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(items)
}

/// A random `len`-sample excerpt, zero-padded when the source is shorter.
fn excerpt(src: &AudioClip, len: usize, rng: &mut ChaCha8Rng) -> AudioClip {
    let s = src.samples();
    let start = if s.len() > len { rng.random_range(0..=s.len() - len) } else { 0 };
    let mut out = s[start..(start + len).min(s.len())].to_vec();
    out.resize(len, 0.0);
    AudioClip::at_16k(out).expect("finite excerpt")
}

pub fn prepare_data(
    cfg: &RunConfig,
    out: &Path,
    speech_dir: Option<&Path>,
    rir_dir: Option<&Path>,
    synth: Option<usize>,
    resample: bool,
) -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let speech: Vec<AudioClip> = match speech_dir {
        Some(d) => {
            let files = wav_files(d)?;
            if files.is_empty() {
                return Err(data_error(format!("no WAV files under {}", d.display())));
            }
            files.iter().map(|f| read_wav(f, resample)).collect::<rirest::Result<_>>()?
        }
        None => Vec::new(),
    };
    let mut rirs = match rir_dir {
        Some(d) => measured_rirs(cfg, d, resample)?,
        None => Vec::new(),
    };
    let rooms = synth.unwrap_or(if rir_dir.is_some() { 0 } else { cfg.data.synthetic_rooms });
    rirs.extend(synthetic_rirs(cfg, rooms, &mut rng)?);
    if rirs.is_empty() {
        return Err(data_error("corpus has no RIRs"));
    }

    std::fs::create_dir_all(out.join("rir"))?;
    std::fs::create_dir_all(out.join("speech"))?;
    let clip_len = cfg.data.clip_samples();
    let mut entries = Vec::new();
    for item in &rirs {
        let rir_rel = PathBuf::from("rir").join(format!("{}.wav", item.id));
        write_wav_f32(out.join(&rir_rel), &item.clip)?;
        for u in 0..cfg.data.utterances_per_rir {
            let dry = if speech.is_empty() {
                synth_speech(cfg.data.clip_seconds, rng.random())?
            } else {
                excerpt(&speech[rng.random_range(0..speech.len())], clip_len, &mut rng)
            };
            let wet = convolve_speech(&dry, &item.clip)?;
            let speech_rel = PathBuf::from("speech").join(format!("{}-u{u}.wav", item.id));
            write_wav_f32(out.join(&speech_rel), &wet)?;
            entries.push(CorpusEntry {
                speech_path: speech_rel,
                rir_path: rir_rel.clone(),
                room_id: item.room_id.clone(),
                volume_m3: item.volume_m3,
                rt60_s: item.rt60_s,
                bp_samples: item.bp_samples,
                is_real_room: item.real,
                split: None,
            });
        }
    }
    split_by_room_with(&mut entries, cfg.data.split, cfg.seed, cfg.data.test_pool)?;
    write_manifest(out.join(MANIFEST_FILE), &entries)?;
    cfg.save(out.join(crate::CONFIG_FILE))?;
    log::info!("wrote {} entries from {} RIRs to {}", entries.len(), rirs.len(), out.display());
    println!("{}", out.join(MANIFEST_FILE).display());
    Ok(())
}
