use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use rirest::acoustics::{boundary_point, drr, energy_decay_curve, ned_curve, rt60_with_fallback};
use rirest::audio::{read_wav, write_wav_f32};
use rirest::brpe::bp_from_log;
use rirest::dataset::{fix_length, log_map, read_manifest, resolve, log_unmap, LogParams, RIR_LEN, RT_KAPPA};
use rirest::eval::{export_report, param_metrics, rir_acoustic_metrics, EvalReport, RirPair, ScatterSeries};
use rirest::train::{
    finetune_brpe, pretrain_brpe, train_model, write_history_csv, BrpeExample, EpochRecord, Example,
};
use rirest::dsp::extract_feature_block_with;
use rirest::{AudioClip, BoundaryMode, CorpusEntry, MultiResStftLoss, Pipeline, RunConfig, Split, SAMPLE_RATE};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{build_pipeline, Checkpoint};
use crate::{data_error, usage};

/// A manifest entry with its audio loaded.
struct Item {
    entry: CorpusEntry,
    speech: AudioClip,
    rir: AudioClip,
}

fn load_items(cfg: &RunConfig, manifest: &Path, splits: &[Split], resample: bool) -> anyhow::Result<Vec<Item>> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let entries = read_manifest(manifest).with_context(|| format!("reading {}", manifest.display()))?;
    let clip_len = cfg.data.clip_samples();
    let mut items = Vec::new();
    for entry in entries {
        if !splits.contains(&entry.split.unwrap_or(Split::Train)) {
            continue;
        }
        let speech = read_wav(resolve(dir, &entry.speech_path), resample)?;
        let rir = read_wav(resolve(dir, &entry.rir_path), resample)?;
        items.push(Item {
            speech: fix_length(&speech, clip_len),
            rir: fix_length(&rir, RIR_LEN),
            entry,
        });
    }
    Ok(items)
}

fn log_labels(e: &CorpusEntry) -> anyhow::Result<LogParams> {
    Ok(log_map(&e.params()).map_err(|err| data_error(format!("room {}: {err}", e.room_id)))?)
}

fn brpe_examples(p: &Pipeline, items: &[Item]) -> anyhow::Result<Vec<BrpeExample>> {
    items
        .iter()
        .map(|it| {
            Ok(BrpeExample {
                block: extract_feature_block_with(&it.speech, &p.features, &p.filterbank)?,
                log: log_labels(&it.entry)?,
            })
        })
        .collect()
}

pub fn pretrain(cfg: &RunConfig, manifest: &Path, out: &Path, resample: bool) -> anyhow::Result<()> {
    let items = load_items(cfg, manifest, &[Split::Train], resample)?;
    if items.is_empty() {
        return Err(data_error("no training entries in the manifest"));
    }
    let p = build_pipeline(cfg)?;
    let blocks: Vec<_> = brpe_examples(&p, &items)?.into_iter().map(|e| e.block).collect();
    let ck = Checkpoint::create(out)?;
    let mut csv = String::from("epoch,loss\n");
    pretrain_brpe(&p.brpe, &p.brpe_store, &blocks, &cfg.brpe_train, |epoch, loss| {
        csv.push_str(&format!("{epoch},{loss}\n"));
        Ok(())
    })?;
    std::fs::write(out.join("pretrain_history.csv"), csv)?;
    ck.save_brpe(&p)?;
    ck.save_config(cfg)?;
    Ok(())
}

pub fn finetune(cfg: &RunConfig, manifest: &Path, init: Option<&Path>, out: &Path, resample: bool) -> anyhow::Result<()> {
    let train = load_items(cfg, manifest, &[Split::Train], resample)?;
    let val = load_items(cfg, manifest, &[Split::Val], resample)?;
    if train.is_empty() {
        return Err(data_error("no training entries in the manifest"));
    }
    let p = build_pipeline(cfg)?;
    if let Some(dir) = init {
        Checkpoint::open(dir).load_brpe(&p)?;
    }
    let train = brpe_examples(&p, &train)?;
    let val = brpe_examples(&p, &val)?;
    let ck = Checkpoint::create(out)?;
    let mut csv = String::from("epoch,train_mse,val_mse\n");
    let history = finetune_brpe(&p.brpe, &p.brpe_store, &train, &val, &cfg.brpe_train, |epoch, tr, va| {
        let va = va.map(|v| v.to_string()).unwrap_or_default();
        csv.push_str(&format!("{epoch},{tr},{va}\n"));
        Ok(())
    })?;
    std::fs::write(out.join("finetune_history.csv"), csv)?;
    ck.save_brpe(&p)?;
    ck.save_config(cfg)?;
    if let Some((tr, va)) = history.last() {
        println!("{}", serde_json::json!({ "train_mse": tr, "val_mse": va }));
    }
    Ok(())
}

fn to_examples(p: &Pipeline, items: &[Item], with_features: bool) -> anyhow::Result<Vec<Example>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(16) {
        let rooms: Vec<Option<(Vec<f64>, Vec<f64>)>> = if with_features {
            let clips: Vec<AudioClip> = chunk.iter().map(|it| it.speech.clone()).collect();
            p.brpe_outputs(&clips)?.feature_rows()?.into_iter().map(Some).collect()
        } else {
            vec![None; chunk.len()]
        };
        for (it, room) in chunk.iter().zip(rooms) {
            out.push(Example {
                speech: it.speech.samples().to_vec(),
                rir: it.rir.samples().to_vec(),
                log: log_labels(&it.entry)?,
                bp_samples: (it.entry.bp_samples.round() as usize).clamp(1, RIR_LEN),
                room,
            });
        }
    }
    Ok(out)
}

pub fn train(cfg: &RunConfig, manifest: &Path, brpe: Option<&Path>, out: &Path, resample: bool) -> anyhow::Result<()> {
    let gt = cfg.model.fusion.ground_truth_params;
    if !gt && brpe.is_none() {
        return Err(usage("train needs --brpe <checkpoint> unless --ground-truth-params is set"));
    }
    let p = build_pipeline(cfg)?;
    if let Some(dir) = brpe {
        Checkpoint::open(dir).load_brpe(&p)?;
    }
    let brpe_hash = p.brpe_store.fingerprint("")?;
    let train = load_items(cfg, manifest, &[Split::Train], resample)?;
    let val = load_items(cfg, manifest, &[Split::Val], resample)?;
    if train.is_empty() {
        return Err(data_error("no training entries in the manifest"));
    }
    let train = to_examples(&p, &train, !gt)?;
    let val = to_examples(&p, &val, !gt)?;
    let loss = MultiResStftLoss::new(&cfg.loss)?;
    let ck = Checkpoint::create(out)?;
    ck.save_config(cfg)?;
    let mut epochs: Vec<EpochRecord> = Vec::new();
    let report = train_model(
        &p.model,
        &p.model_store,
        &loss,
        &train,
        &val,
        &cfg.train,
        |s| {
            log::debug!("step {} loss {:.5} grad norm {:.3}", s.step, s.loss, s.grad_norm);
            true
        },
        |rec| {
            epochs.push(*rec);
            let every = cfg.train.checkpoint_every;
            if every > 0 && (rec.epoch + 1) % every == 0 {
                ck.save_model(&p).map_err(|e| rirest::Error::Checkpoint(e.to_string()))?;
                write_history_csv(out.join("history.csv"), &epochs)?;
            }
            Ok(())
        },
    )?;
    if p.brpe_store.fingerprint("")? != brpe_hash {
        return Err(anyhow::anyhow!("estimator parameters changed during training"));
    }
    ck.save_model(&p)?;
    ck.save_brpe(&p)?;
    write_history_csv(out.join("history.csv"), &report.epochs)?;
    println!(
        "{}",
        serde_json::json!({
            "final_loss": report.final_loss(),
            "steps": report.steps.len(),
            "epochs": report.epochs.len(),
        })
    );
    Ok(())
}

/// Physical parameters decoded from the estimator's log outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatedParams {
    pub volume_m3: f64,
    pub rt60_s: f64,
    pub bp_ms: f64,
    pub log_v: f64,
    pub log_rt: f64,
    pub log_bp: f64,
}

/// JSON written next to an estimated RIR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateSidecar {
    pub speech: PathBuf,
    pub rir_wav: PathBuf,
    pub samples: usize,
    pub sample_rate: u32,
    pub boundary_mode: BoundaryMode,
    /// Boundary point used by the decoder, samples.
    pub bp_used: usize,
    /// Boundary point predicted by the estimator, samples.
    pub bp_estimate_samples: usize,
    /// Schroeder RT60 of the estimated RIR; null when it does not decay enough.
    pub rt60_of_estimate: Option<f64>,
    pub rt60_fallback: bool,
    pub drr_of_estimate: f64,
    pub estimated_params: EstimatedParams,
    pub seed: u64,
}

impl EstimateSidecar {
    /// Checks the value constraints that serde cannot express.
    pub fn validate(&self) -> Result<(), String> {
        if self.samples != RIR_LEN || self.sample_rate != SAMPLE_RATE {
            return Err(format!("expected {RIR_LEN} samples at {SAMPLE_RATE} Hz"));
        }
        if !(1..=RIR_LEN).contains(&self.bp_used) || !(1..=RIR_LEN).contains(&self.bp_estimate_samples) {
            return Err("boundary point outside 1..=16000".into());
        }
        let expected = self.boundary_mode.resolve(&[self.bp_estimate_samples])[0];
        if self.bp_used != expected {
            return Err(format!("bp_used {} differs from the resolved estimate {expected}", self.bp_used));
        }
        if let Some(rt) = self.rt60_of_estimate {
            if !(rt.is_finite() && rt > 0.0) {
                return Err(format!("rt60_of_estimate {rt} is not a positive number"));
            }
        }
        if !(self.drr_of_estimate.is_finite() && self.drr_of_estimate.abs() <= 40.0) {
            return Err(format!("drr_of_estimate {} outside [-40, 40] dB", self.drr_of_estimate));
        }
        let e = &self.estimated_params;
        if ![e.volume_m3, e.rt60_s, e.bp_ms].iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err("estimated parameters must be positive".into());
        }
        Ok(())
    }
}

pub fn default_estimate_path(speech: &Path) -> PathBuf {
    let stem = speech.file_stem().and_then(|s| s.to_str()).unwrap_or("speech");
    speech.with_file_name(format!("{stem}_rir.wav"))
}

fn load_trained(cfg: &RunConfig, checkpoint: &Path) -> anyhow::Result<Pipeline> {
    let p = build_pipeline(cfg)?;
    let ck = Checkpoint::open(checkpoint);
    ck.load_brpe(&p)?;
    ck.load_model(&p)?;
    Ok(p)
}

fn estimated_params(log_v: f64, log_rt: f64, log_bp: f64) -> EstimatedParams {
    let phys = log_unmap(&LogParams {
        log_v,
        log_rt,
        log_bp,
        kappa: RT_KAPPA,
    });
    EstimatedParams {
        volume_m3: phys.volume_m3,
        rt60_s: phys.rt60_s,
        bp_ms: phys.bp_samples * 1e3 / SAMPLE_RATE as f64,
        log_v,
        log_rt,
        log_bp,
    }
}

pub fn estimate(cfg: &RunConfig, checkpoint: &Path, speech: &Path, out: &Path, resample: bool) -> anyhow::Result<()> {
    let p = load_trained(cfg, checkpoint)?;
    let clip = read_wav(speech, resample)?;
    let est = p.estimate(&clip, cfg.seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_wav_f32(out, &est.rir)?;
    let rt = rt60_with_fallback(&est.rir).ok();
    let sidecar = EstimateSidecar {
        speech: speech.to_path_buf(),
        rir_wav: out.to_path_buf(),
        samples: est.rir.len(),
        sample_rate: est.rir.sample_rate(),
        boundary_mode: cfg.model.boundary,
        bp_used: est.bp_used,
        bp_estimate_samples: bp_from_log(est.log_bp, RIR_LEN),
        rt60_of_estimate: rt.map(|r| r.rt60_s),
        rt60_fallback: rt.is_some_and(|r| r.fallback),
        drr_of_estimate: drr(&est.rir)?.drr_db,
        estimated_params: estimated_params(est.log_v, est.log_rt, est.log_bp),
        seed: cfg.seed,
    };
    sidecar.validate().map_err(|e| anyhow::anyhow!("sidecar failed validation: {e}"))?;
    let json = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(out.with_extension("json"), &json)?;
    println!("{json}");
    Ok(())
}

/// Output of `analyze-rir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisReport {
    pub rt60_s: Option<f64>,
    pub drr_db: f64,
    pub bp_samples: usize,
    pub bp_ms: f64,
    pub ned_curve_path: PathBuf,
    pub edc_path: PathBuf,
    pub flags: Vec<String>,
}

fn write_curve(path: &Path, header: &str, values: &[f64]) -> anyhow::Result<()> {
    let mut s = format!("sample,{header}\n");
    for (i, v) in values.iter().enumerate() {
        s.push_str(&format!("{i},{v}\n"));
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn analyze(cfg: &RunConfig, rir: &Path, out: &Path, resample: bool) -> anyhow::Result<()> {
    let clip = read_wav(rir, resample)?;
    let mut flags = Vec::new();
    let rt60_s = match rt60_with_fallback(&clip) {
        Ok(r) => {
            if r.fallback {
                flags.push("rt60-fallback".to_string());
            }
            Some(r.rt60_s)
        }
        Err(rirest::Error::InsufficientDecay { .. }) => {
            flags.push("insufficient-decay".to_string());
            None
        }
        Err(e) => return Err(e.into()),
    };
    let d = drr(&clip)?;
    if d.silent_tail {
        flags.push("silent-tail".to_string());
    }
    if d.clamped {
        flags.push("drr-clamped".to_string());
    }
    let bcfg = &cfg.data.boundary;
    let bp = boundary_point(&clip, bcfg)?;
    if bp.no_plateau {
        flags.push("no-plateau".to_string());
    }
    std::fs::create_dir_all(out)?;
    let stem = rir.file_stem().and_then(|s| s.to_str()).unwrap_or("rir");
    let ned_path = out.join(format!("{stem}_ned.csv"));
    let edc_path = out.join(format!("{stem}_edc.csv"));
    write_curve(&ned_path, "ned", &ned_curve(&clip, bcfg.half_window)?.ned)?;
    write_curve(&edc_path, "edc_db", &energy_decay_curve(&clip)?.edc_db)?;
    let report = AnalysisReport {
        rt60_s,
        drr_db: d.drr_db,
        bp_samples: bp.samples,
        bp_ms: bp.ms(clip.sample_rate()),
        ned_curve_path: ned_path,
        edc_path,
        flags,
    };
    let json = serde_json::to_string_pretty(&report)?;
    std::fs::write(out.join(format!("{stem}_analysis.json")), &json)?;
    println!("{json}");
    Ok(())
}

pub fn evaluate(cfg: &RunConfig, checkpoint: &Path, manifest: &Path, out: &Path, resample: bool) -> anyhow::Result<()> {
    let p = load_trained(cfg, checkpoint)?;
    let items = load_items(cfg, manifest, &[Split::Test], resample)?;
    if items.len() < 2 {
        return Err(data_error("evaluation needs at least two test entries"));
    }
    let names = ["volume_m3", "rt60_s", "bp_ms"];
    let mut truth: [Vec<f64>; 3] = Default::default();
    let mut est: [Vec<f64>; 3] = Default::default();
    let mut ids = Vec::new();
    let mut est_rirs = Vec::new();
    let mut true_rirs = Vec::new();
    for (i, it) in items.iter().enumerate() {
        let e = p.estimate(&it.speech, cfg.seed.wrapping_add(i as u64))?;
        let ep = estimated_params(e.log_v, e.log_rt, e.log_bp);
        let t = &it.entry;
        for (k, (tv, ev)) in [
            (t.volume_m3, ep.volume_m3),
            (t.rt60_s, ep.rt60_s),
            (t.bp_samples * 1e3 / SAMPLE_RATE as f64, ep.bp_ms),
        ]
        .into_iter()
        .enumerate()
        {
            truth[k].push(tv);
            est[k].push(ev);
        }
        ids.push(
            t.speech_path
                .file_stem()
                .and_then(|s| s.to_str())
                .map(str::to_string)
                .unwrap_or_else(|| format!("item{i}")),
        );
        est_rirs.push(e.rir.into_samples());
        true_rirs.push(it.rir.samples().to_vec());
    }
    let mut params = BTreeMap::new();
    let mut scatter = Vec::new();
    for k in 0..3 {
        params.insert(names[k].to_string(), param_metrics(&est[k], &truth[k])?);
        scatter.push(ScatterSeries {
            name: names[k].to_string(),
            ids: ids.clone(),
            truth: truth[k].clone(),
            est: est[k].clone(),
        });
    }
    let rir = rir_acoustic_metrics(&est_rirs, &true_rirs, &cfg.loss)?;
    let report = EvalReport {
        pairs: items.len(),
        params,
        rir: Some(rir),
    };
    let pairs: Vec<RirPair> = (0..cfg.eval.plot_pairs.min(items.len()))
        .map(|i| RirPair {
            id: ids[i].clone(),
            truth: true_rirs[i].clone(),
            est: est_rirs[i].clone(),
        })
        .collect();
    export_report(out, &report, &scatter, &pairs)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
