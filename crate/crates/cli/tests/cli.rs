use std::path::Path;
use std::process::{Command, Output};

use rirest::audio::write_wav_f32;
use rirest::{AudioClip, RunConfig};
use rirest_cli::{AnalysisReport, EXIT_DATA, EXIT_USAGE};

const BIN: &str = env!("CARGO_BIN_EXE_rirest");

fn rirest(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = RunConfig::desk().with_seed(3);
    cfg.data.clip_seconds = 0.5;
    cfg.data.synthetic_rooms = 6;
    cfg.data.rirs_per_room = 2;
    cfg.train.epochs = 1;
    cfg.train.batch_size = 2;
    cfg.train.max_steps = Some(2);
    let path = dir.join("tiny.json");
    cfg.save(&path).unwrap();
    path
}

#[test]
fn help_lists_subcommands() {
    let out = rirest(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["prepare-data", "pretrain-brpe", "finetune-brpe", "train", "estimate", "analyze-rir", "evaluate"] {
        assert!(text.contains(cmd), "missing {cmd}");
    }
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    assert_eq!(rirest(&["no-such-command"]).status.code(), Some(EXIT_USAGE));
    assert_eq!(rirest(&["analyze-rir"]).status.code(), Some(EXIT_USAGE));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.wav");
    let out = rirest(&["analyze-rir", s(&missing), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(EXIT_DATA));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn config_and_preset_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let wav = dir.path().join("x.wav");
    let out = rirest(&["analyze-rir", s(&wav), "--config", s(&cfg), "--preset", "desk"]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
}

#[test]
fn analyze_unit_impulse() {
    let dir = tempfile::tempdir().unwrap();
    let mut h = vec![0.0; 16_000];
    h[0] = 1.0;
    let wav = dir.path().join("impulse.wav");
    write_wav_f32(&wav, &AudioClip::at_16k(h).unwrap()).unwrap();
    let out = rirest(&["analyze-rir", s(&wav), "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: AnalysisReport = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report.drr_db, 40.0);
    assert!(report.flags.iter().any(|f| f == "silent-tail"));
    assert!(dir.path().join("impulse_ned.csv").exists());
    assert!(dir.path().join("impulse_edc.csv").exists());
    let saved: AnalysisReport =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("impulse_analysis.json")).unwrap()).unwrap();
    assert_eq!(saved.bp_samples, report.bp_samples);
}

#[test]
fn analyze_rejects_wrong_rate_without_resample() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("r8k.wav");
    write_wav_f32(&wav, &AudioClip::new(vec![0.5; 8000], 8000).unwrap()).unwrap();
    let out = rirest(&["analyze-rir", s(&wav), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(EXIT_DATA));
    let out = rirest(&["analyze-rir", s(&wav), "--out", s(dir.path()), "--resample"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn ground_truth_training_is_deterministic_and_not_deployable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let corpus = dir.path().join("corpus");
    let out = rirest(&["prepare-data", "--config", s(&cfg), "--out", s(&corpus)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = corpus.join("manifest.jsonl");
    assert!(manifest.exists());
    let saved = RunConfig::load(corpus.join("config.json")).unwrap();
    assert_eq!(saved, RunConfig::load(&cfg).unwrap());

    let mut finals = Vec::new();
    for run in ["a", "b"] {
        let ck = dir.path().join(run);
        let out = rirest(&[
            "train", "--config", s(&cfg), "--manifest", s(&manifest), "--ground-truth-params", "--out", s(&ck),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        finals.push(v["final_loss"].as_f64().unwrap());
    }
    assert_eq!(finals[0], finals[1]);

    let speech = dir.path().join("speech.wav");
    write_wav_f32(&speech, &rirest::dataset::synth_speech(0.5, 1).unwrap()).unwrap();
    let est = dir.path().join("est.wav");
    let out = rirest(&["estimate", s(&speech), "--checkpoint", s(&dir.path().join("a")), "--out", s(&est)]);
    assert!(!out.status.success());
    assert!(!est.exists());
}

#[test]
fn train_without_estimator_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let manifest = dir.path().join("manifest.jsonl");
    std::fs::write(&manifest, "").unwrap();
    let out = rirest(&["train", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
}
