//! Acceptance criteria 1-10. Each test prints one PASS/FAIL line and
//! asserts; tests hold a shared lock so their runtimes are measured alone.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rirest::acoustics::{boundary_point, gauss_const, ned_curve, rt60_schroeder, BoundaryConfig};
use rirest::brpe::{patchify, unpatchify, Brpe, PATCH};
use rirest::dataset::{
    convolve_speech, log_map, log_unmap, read_manifest, split_by_room, synth_rir, synth_speech, CorpusEntry,
    RoomPrior, Split, RIR_LEN,
};
use rirest::decoder::{draw_noise, Decoder, DecoderConfig};
use rirest::dsp::extract_feature_block_with;
use rirest::encoder::{AudioEncoder, EncoderConfig};
use rirest::eval::{linear_scale_metrics, log_scale_metrics, pearson};
use rirest::fusion::scaled_dot_product_attention;
use rirest::loss::{log_stft_magnitude, multi_res_stft_loss, spectral_convergence};
use rirest::nn::ParamStore;
use rirest::ssm::BiSsmBlock;
use rirest::train::{brpe_predict, finetune_brpe, pretrain_brpe, train_model, BrpeExample, Example, TrainConfig};
use rirest::{AudioClip, Fusion, FusionConfig, MultiResStftLoss, Pipeline, RoomParams, RunConfig, StftLossConfig};
use rirest_cli::{Checkpoint, EstimateSidecar};

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

/// Named sub-checks of one criterion.
struct Checks {
    id: u32,
    name: &'static str,
    start: Instant,
    items: Vec<(String, bool)>,
}

impl Checks {
    fn new(id: u32, name: &'static str) -> Self {
        Self {
            id,
            name,
            start: Instant::now(),
            items: Vec::new(),
        }
    }

    fn check(&mut self, label: impl Into<String>, ok: bool) {
        self.items.push((label.into(), ok));
    }

    fn finish(mut self, limit_s: f64) {
        let secs = self.start.elapsed().as_secs_f64();
        self.check(format!("runtime {secs:.1} s < {limit_s} s"), secs < limit_s);
        let failed: Vec<&str> = self.items.iter().filter(|(_, ok)| !ok).map(|(l, _)| l.as_str()).collect();
        let verdict = if failed.is_empty() { "PASS" } else { "FAIL" };
        let detail = if failed.is_empty() {
            self.items.iter().map(|(l, _)| l.as_str()).collect::<Vec<_>>().join("; ")
        } else {
            format!("failed: {}", failed.join("; "))
        };
        let line = format!("criterion {} [{}]: {verdict} ({detail})\n", self.id, self.name);
        std::io::stderr().write_all(line.as_bytes()).unwrap();
        assert!(failed.is_empty(), "criterion {} failed: {}", self.id, failed.join("; "));
    }
}

fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

// ---------------------------------------------------------------- 1

/// Magnitudes by direct DFT with a periodic Hann window, hop frame/2, no
/// centre padding; (frames, bins) row-major.
fn dft_magnitudes(x: &[f64], frame: usize) -> (Vec<f64>, usize, usize) {
    let hop = frame / 2;
    let frames = (x.len() - frame) / hop + 1;
    let bins = frame / 2 + 1;
    let win: Vec<f64> = (0..frame)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / frame as f64).cos())
        .collect();
    let (cos, sin): (Vec<f64>, Vec<f64>) = (0..frame)
        .map(|m| {
            let a = 2.0 * std::f64::consts::PI * m as f64 / frame as f64;
            (a.cos(), a.sin())
        })
        .unzip();
    let mut out = Vec::with_capacity(frames * bins);
    for f in 0..frames {
        let seg = &x[f * hop..f * hop + frame];
        for k in 0..bins {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &s) in seg.iter().enumerate() {
                let idx = (k * n) % frame;
                re += s * win[n] * cos[idx];
                im -= s * win[n] * sin[idx];
            }
            out.push((re * re + im * im).sqrt());
        }
    }
    (out, frames, bins)
}

fn oracle_loss(h: &[f64], h_hat: &[f64], cfg: &StftLossConfig) -> f64 {
    let mut acc = 0.0;
    for &frame in &cfg.frame_lens {
        let (m, frames, _) = dft_magnitudes(h, frame);
        let (mh, _, _) = dft_magnitudes(h_hat, frame);
        let num: f64 = m.iter().zip(&mh).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = m.iter().map(|a| a * a).sum::<f64>().sqrt();
        let mag: f64 = m
            .iter()
            .zip(&mh)
            .map(|(a, b)| (a.max(cfg.mag_floor).ln() - b.max(cfg.mag_floor).ln()).abs())
            .sum::<f64>()
            / frames as f64;
        acc += num / den + mag;
    }
    acc / cfg.frame_lens.len() as f64
}

#[test]
fn criterion_01_loss_identities() {
    let _g = serial();
    let mut c = Checks::new(1, "loss identities");
    let cfg = StftLossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = gaussian(RIR_LEN, &mut rng);
    let h2: Vec<f64> = h.iter().map(|v| 2.0 * v).collect();
    let zero = vec![0.0; RIR_LEN];
    for p in cfg.params().unwrap() {
        let f = p.frame_len;
        let sc_hh = spectral_convergence(&h, &h, &p).unwrap();
        let sc_h2 = spectral_convergence(&h, &h2, &p).unwrap();
        let sc_h0 = spectral_convergence(&h, &zero, &p).unwrap();
        let mag_hh = log_stft_magnitude(&h, &h, &p, cfg.mag_floor).unwrap();
        let mag_h2 = log_stft_magnitude(&h, &h2, &p, cfg.mag_floor).unwrap();
        let closed = p.bins() as f64 * std::f64::consts::LN_2;
        c.check(format!("SC(h,h)=0 @{f}"), sc_hh.abs() <= 1e-9);
        c.check(format!("SC(h,2h)=1 @{f}"), (sc_h2 - 1.0).abs() <= 1e-6);
        c.check(format!("SC(h,0)=1 @{f}"), (sc_h0 - 1.0).abs() <= 1e-9);
        c.check(format!("MAG(h,h)=0 @{f}"), mag_hh.abs() <= 1e-9);
        c.check(format!("MAG(h,2h)=bins*ln2 @{f} ({mag_h2:.9} vs {closed:.9})"), (mag_h2 - closed).abs() <= 1e-6);
    }
    let h_hat = gaussian(RIR_LEN, &mut rng);
    let ours = multi_res_stft_loss(&h, &h_hat, &cfg).unwrap();
    let oracle = oracle_loss(&h, &h_hat, &cfg);
    c.check(format!("multi-res vs DFT oracle |d|={:.2e}", (ours - oracle).abs()), (ours - oracle).abs() <= 1e-9);
    let loss = MultiResStftLoss::new(&cfg).unwrap();
    let dev = Device::Cpu;
    let t = |v: &[f64]| Tensor::from_vec(v.to_vec(), (1, v.len()), &dev).unwrap();
    let tensor = loss.value(&t(&h), &t(&h_hat)).unwrap();
    c.check(format!("tensor path vs DFT oracle |d|={:.2e}", (tensor - oracle).abs()), (tensor - oracle).abs() <= 1e-9);
    c.finish(10.0);
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_02_gradient_correctness() {
    let _g = serial();
    let mut c = Checks::new(2, "decoder gradient vs finite differences");
    let dev = Device::Cpu;
    let cfg = DecoderConfig::desk();
    let store = ParamStore::new(11, DType::F64);
    let dec = Decoder::new(&store.root(), &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = Tensor::from_vec(gaussian(cfg.n_c, &mut rng), (1, cfg.n_c), &dev).unwrap();
    let v = draw_noise(1, cfg.z_dim, 3, DType::F64, &dev).unwrap();
    let prior = RoomPrior::default();
    let (rir, _) = synth_rir(&prior.sample(&mut rng), &prior, &BoundaryConfig::default(), 4).unwrap();
    let h = Tensor::from_vec(rir.into_samples(), (1, RIR_LEN), &dev).unwrap();
    let loss = MultiResStftLoss::new(&StftLossConfig::default()).unwrap();
    let bp = [800usize];
    let eval = || -> f64 { loss.value(&h, &dec.decode(&d, &v, &bp).unwrap().h_hat).unwrap() };

    let out = loss.forward(&h, &dec.decode(&d, &v, &bp).unwrap().h_hat).unwrap();
    let grads = out.total.backward().unwrap();
    let vars: Vec<(String, Var)> = store.vars();
    let mut done = 0;
    let mut worst: f64 = 0.0;
    let mut attempts = 0;
    let mut kinks = 0;
    while done < 10 && attempts < 200 {
        attempts += 1;
        let (name, var) = &vars[rng.random_range(0..vars.len())];
        let Some(g) = grads.get(var.as_tensor()) else { continue };
        let g: Vec<f64> = g.flatten_all().unwrap().to_vec1().unwrap();
        let gmax = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let idx = rng.random_range(0..g.len());
        // Coordinates with a negligible gradient carry no relative signal.
        if gmax == 0.0 || g[idx].abs() < 1e-3 * gmax {
            continue;
        }
        let shape = var.as_tensor().dims().to_vec();
        let base: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let eps = 1e-7 * base[idx].abs().max(1.0);
        let eval_at = |delta: f64| {
            let mut w = base.clone();
            w[idx] += delta;
            var.set(&Tensor::from_vec(w, shape.as_slice(), &dev).unwrap()).unwrap();
            eval()
        };
        let (plus, zero, minus) = (eval_at(eps), eval_at(0.0), eval_at(-eps));
        var.set(&Tensor::from_vec(base, shape.as_slice(), &dev).unwrap()).unwrap();
        let (fwd, bwd) = ((plus - zero) / eps, (zero - minus) / eps);
        // One-sided slopes that disagree mean a kink (|.|, leaky ReLU) inside the step.
        if (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()) {
            kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let rel = (numeric - g[idx]).abs() / numeric.abs().max(g[idx].abs());
        worst = worst.max(rel);
        c.check(format!("{name}[{idx}] rel {rel:.1e}"), rel < 1e-3);
        done += 1;
    }
    c.check(format!("10 coordinates checked, {kinks} skipped at kinks (worst rel {worst:.1e})"), done == 10);
    c.finish(120.0);
}

// ---------------------------------------------------------------- 3

/// Independent per-sample NED loop following the declared definition.
fn ned_brute(h: &[f64], half: usize) -> Vec<f64> {
    let len = 2 * half + 1;
    let mut w: Vec<f64> = (0..len)
        .map(|i| (std::f64::consts::PI * (i + 1) as f64 / (len + 1) as f64).sin().powi(2))
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    let g = gauss_const();
    let mut out = vec![0.0; h.len()];
    for n in 0..h.len() {
        let lo = n.saturating_sub(half);
        let hi = (n + half).min(h.len() - 1);
        let (mut ws, mut mean, mut power) = (0.0, 0.0, 0.0);
        for l in lo..=hi {
            let wt = w[l + half - n];
            ws += wt;
            mean += wt * h[l];
            power += wt * h[l] * h[l];
        }
        mean /= ws;
        let mut var = 0.0;
        for l in lo..=hi {
            let wt = w[l + half - n];
            var += wt * (h[l] - mean) * (h[l] - mean);
        }
        let sigma = (var / ws).sqrt();
        let rms = (power / ws).sqrt();
        if rms == 0.0 || sigma <= 1e-10 * rms {
            continue;
        }
        let mut count = 0.0;
        for l in lo..=hi {
            if (h[l] - mean).abs() > sigma {
                count += w[l + half - n];
            }
        }
        out[n] = g * count / ws;
    }
    out
}

/// Smallest n <= cap whose next `hold` samples all satisfy the plateau
/// predicate; otherwise the cap.
fn plateau_brute(ned: &[f64], cfg: &BoundaryConfig, fs: u32) -> (usize, bool) {
    let cap = cfg.cap_samples(fs);
    for n in 0..=cap {
        if n + cfg.hold_len <= ned.len() && ned[n..n + cfg.hold_len].iter().all(|&v| v >= 1.0 - cfg.eps_plateau) {
            return (n, false);
        }
    }
    (cap, true)
}

#[test]
fn criterion_03_acoustic_oracles() {
    let _g = serial();
    let mut c = Checks::new(3, "acoustic oracles");
    let fs = 16_000.0;
    for t60 in [0.2, 0.5, 1.0] {
        let a = 10f64.powf(-3.0 / (fs * t60));
        let h: Vec<f64> = (0..32_000).map(|n| a.powi(n)).collect();
        let est = rt60_schroeder(&AudioClip::at_16k(h).unwrap()).unwrap();
        c.check(format!("RT60 {t60} -> {est:.4}"), (est - t60).abs() / t60 < 0.02);
    }
    c.check(format!("gauss const {:.5}", gauss_const()), (gauss_const() - 3.1515).abs() <= 1e-3);

    let bcfg = BoundaryConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let prior = RoomPrior::default();
    let mut cases: Vec<(String, Vec<f64>)> = Vec::new();
    for k in 0..3u64 {
        let (rir, _) = synth_rir(&prior.sample(&mut rng), &prior, &bcfg, 30 + k).unwrap();
        cases.push((format!("synthetic {k}"), rir.into_samples()));
    }
    let mut late = vec![0.0; 320];
    late.extend(gaussian(7680, &mut rng));
    cases.push(("silence then noise".into(), late));
    let mut train = vec![0.0; 8000];
    for n in (0..8000).step_by(400) {
        train[n] = 1.0;
    }
    cases.push(("impulse train".into(), train));
    for (name, h) in &cases {
        let clip = AudioClip::at_16k(h.clone()).unwrap();
        let ned = ned_curve(&clip, bcfg.half_window).unwrap().ned;
        let brute = ned_brute(h, bcfg.half_window);
        c.check(format!("NED exact on {name}"), ned == brute);
        let bp = boundary_point(&clip, &bcfg).unwrap();
        let (n, flag) = plateau_brute(&ned, &bcfg, 16_000);
        c.check(format!("B_p {} on {name}", bp.samples), bp.samples == n && bp.no_plateau == flag);
    }
    let noise = gaussian(16_000, &mut rng);
    let ned = ned_curve(&AudioClip::at_16k(noise).unwrap(), bcfg.half_window).unwrap().ned;
    let interior = &ned[bcfg.half_window..ned.len() - bcfg.half_window];
    let mean = interior.iter().sum::<f64>() / interior.len() as f64;
    c.check(format!("Gaussian NED mean {mean:.3}"), (0.9..=1.1).contains(&mean));
    c.finish(60.0);
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_04_convolution_oracle() {
    let _g = serial();
    let mut c = Checks::new(4, "convolution oracle");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let t = rng.random_range(2000..8000);
        let u = rng.random_range(100..4000);
        let s = gaussian(t, &mut rng);
        let h = gaussian(u, &mut rng);
        let fast = convolve_speech(&AudioClip::at_16k(s.clone()).unwrap(), &AudioClip::at_16k(h.clone()).unwrap())
            .unwrap()
            .into_samples();
        let mut direct = vec![0.0; t];
        for (n, out) in direct.iter_mut().enumerate() {
            for k in 0..=n.min(u - 1) {
                *out += h[k] * s[n - k];
            }
        }
        let d = fast.iter().zip(&direct).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        worst = worst.max(d);
        if fast.len() != t {
            worst = f64::INFINITY;
        }
    }
    c.check(format!("100 pairs, max |fft - direct| {worst:.2e}"), worst < 1e-9);
    c.finish(60.0);
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_05_metric_oracles() {
    let _g = serial();
    let mut c = Checks::new(5, "metric oracles");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst, mut mm_ok, mut rho_bad) = (0.0f64, true, 0);
    for _ in 0..1000 {
        let est: Vec<f64> = (0..5).map(|_| 10f64.powf(rng.random_range(-1.0..3.0))).collect();
        let tru: Vec<f64> = (0..5).map(|_| 10f64.powf(rng.random_range(-1.0..3.0))).collect();
        let m = log_scale_metrics(&est, &tru).unwrap();
        let lin = linear_scale_metrics(&est, &tru).unwrap();
        let (mut se, mut ae, mut mm) = (0.0, 0.0, 0.0);
        let (mut sx, mut sy) = (0.0, 0.0);
        for i in 0..5 {
            let d = est[i].log10() - tru[i].log10();
            se += d * d;
            ae += d.abs();
            mm += 10f64.powf(d.abs());
            sx += est[i].log10();
            sy += tru[i].log10();
        }
        let (mx, my) = (sx / 5.0, sy / 5.0);
        let (mut cxy, mut cxx, mut cyy) = (0.0, 0.0, 0.0);
        for i in 0..5 {
            let (a, b) = (est[i].log10() - mx, tru[i].log10() - my);
            cxy += a * b;
            cxx += a * a;
            cyy += b * b;
        }
        let rho = cxy / (cxx * cyy).sqrt();
        let mut errs: Vec<f64> = (0..5).map(|i| (est[i] - tru[i]).abs()).collect();
        errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lin_mae = errs.iter().sum::<f64>() / 5.0;
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
        worst = worst
            .max(rel(m.mse, se / 5.0))
            .max(rel(m.mae, ae / 5.0))
            .max(rel(m.mm, mm / 5.0))
            .max(rel(lin.median_abs_err, errs[2]))
            .max(rel(lin.mae, lin_mae));
        match m.rho {
            Some(r) => worst = worst.max(rel(r, rho)),
            None => rho_bad += 1,
        }
        mm_ok &= m.mm >= 10f64.powf(m.mae) - 1e-12;
    }
    c.check(format!("MSE/MAE/rho/MM/median vs loop, worst {worst:.1e}"), worst <= 1e-12);
    c.check("rho defined on all vectors", rho_bad == 0);
    c.check("MM >= 10^MAE on all vectors", mm_ok);
    c.finish(30.0);
}

// ---------------------------------------------------------------- 6

fn random_corpus(rng: &mut ChaCha8Rng) -> Vec<CorpusEntry> {
    let real = rng.random_range(5..25);
    let synth = rng.random_range(0..15);
    let mut out = Vec::new();
    for r in 0..real + synth {
        for k in 0..rng.random_range(1..5) {
            out.push(CorpusEntry {
                speech_path: PathBuf::from(format!("s{r}_{k}.wav")),
                rir_path: PathBuf::from(format!("r{r}_{k}.wav")),
                room_id: format!("room{r}"),
                volume_m3: 100.0,
                rt60_s: 0.5,
                bp_samples: 800.0,
                is_real_room: r < real,
                split: None,
            });
        }
    }
    out
}

#[test]
fn criterion_06_structural_invariants() {
    let _g = serial();
    let mut c = Checks::new(6, "structural invariants");
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(6);

    let store = ParamStore::new(6, DType::F32);
    let enc = AudioEncoder::new(&store.root().pp("enc"), &EncoderConfig::desk()).unwrap();
    let x = Tensor::randn(0f32, 1.0, (2, 3200), &dev).unwrap();
    let fs = enc.forward(&x, false).unwrap();
    c.check(format!("encoder {:?} == (2,128,100)", fs.dims()), fs.dims() == [2, 128, 100]);

    let (rows, cols) = (48, 80);
    let block = ndarray::Array2::from_shape_fn((rows, cols), |(r, k)| (r * 1000 + k) as f64);
    let p = patchify(&block).unwrap();
    let back = unpatchify(&p, rows, cols).unwrap();
    let pc = cols / PATCH;
    let placed = (0..p.nrows()).all(|j| {
        let (pr, pcol) = (j / pc, j % pc);
        (0..PATCH * PATCH).all(|q| p[[j, q]] == block[[pr * PATCH + q / PATCH, pcol * PATCH + q % PATCH]])
    });
    c.check("patch bijection", back == block && placed && p.nrows() == 15);

    let q = Tensor::randn(0f32, 1.0, (2, 8, 7, 16), &dev).unwrap();
    let k = Tensor::randn(0f32, 1.0, (2, 8, 9, 16), &dev).unwrap();
    let (_, w) = scaled_dot_product_attention(&q, &k, &k).unwrap();
    let sums: Vec<f32> = w.sum(3).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    c.check("attention rows sum to 1", sums.iter().all(|s| (s - 1.0).abs() <= 1e-6));

    let fcfg = FusionConfig {
        q_dim: 96,
        ..FusionConfig::default()
    };
    let fusion = Fusion::new(&store.root().pp("fusion"), &fcfg).unwrap();
    let qv = Tensor::randn(0f32, 1.0, (2, 96), &dev).unwrap();
    let qz = Tensor::randn(0f32, 1.0, (2, 96), &dev).unwrap();
    let fa: Vec<Vec<Vec<f32>>> = fusion.project_and_broadcast(&qv, &qz, 13).unwrap().to_vec3().unwrap();
    let same = fa.iter().all(|b| b.iter().all(|row| row.iter().all(|&v| v == row[0])));
    c.check("F_a columns identical", same);

    let ssm = BiSsmBlock::new(&store.root().pp("ssm"), RunConfig::desk().brpe.ssm()).unwrap();
    let xs = Tensor::randn(0f32, 1.0, (1, 20, 96), &dev).unwrap();
    let mut pert: Vec<f32> = xs.flatten_all().unwrap().to_vec1().unwrap();
    for v in &mut pert[12 * 96..] {
        *v += 3.0;
    }
    let xp = Tensor::from_vec(pert, (1, 20, 96), &dev).unwrap();
    let (f0, _) = ssm.branches(&xs).unwrap();
    let (f1, _) = ssm.branches(&xp).unwrap();
    let a: Vec<f32> = f0.narrow(1, 0, 12).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let b: Vec<f32> = f1.narrow(1, 0, 12).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let changed = f0.narrow(1, 12, 8).unwrap().ne(&f1.narrow(1, 12, 8).unwrap()).unwrap();
    let changed: u8 = changed.max_all().unwrap().to_scalar().unwrap();
    c.check("forward scan causal (past bitwise equal, future changed)", a == b && changed == 1);

    let dcfg = DecoderConfig::desk();
    let dec = Decoder::new(&store.root().pp("dec"), &dcfg).unwrap();
    let d = Tensor::randn(0f32, 1.0, (2, dcfg.n_c), &dev).unwrap();
    let v = draw_noise(2, dcfg.z_dim, 1, DType::F32, &dev).unwrap();
    let est = dec.decode(&d, &v, &[500, 2400]).unwrap();
    c.check("h_hat length 16000", est.h_hat.dims() == [2, RIR_LEN]);
    let early: Vec<Vec<f32>> = est.h_early.to_vec2().unwrap();
    c.check(
        "h_early zero from B_p",
        early[0][500..].iter().all(|&x| x == 0.0) && early[1][2400..].iter().all(|&x| x == 0.0),
    );
    let m: Vec<f32> = candle_nn_sigmoid(&est.masks).flatten_all().unwrap().to_vec1().unwrap();
    c.check("sigmoid masks in (0,1)", m.iter().all(|&x| x > 0.0 && x < 1.0));

    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let p = RoomParams {
            volume_m3: 10f64.powf(rng.random_range(0.5..4.5)),
            rt60_s: rng.random_range(0.05..3.0),
            bp_samples: rng.random_range(1.0..16000.0),
        };
        let q = log_unmap(&log_map(&p).unwrap());
        for (a, b) in [(p.volume_m3, q.volume_m3), (p.rt60_s, q.rt60_s), (p.bp_samples, q.bp_samples)] {
            worst = worst.max((a - b).abs() / a);
        }
    }
    c.check(format!("log-map roundtrip {worst:.1e}"), worst < 1e-9);

    let mut split_ok = true;
    for i in 0..1000u64 {
        let mut corpus = random_corpus(&mut rng);
        split_by_room(&mut corpus, Default::default(), i).unwrap();
        let mut seen = std::collections::BTreeMap::new();
        for e in &corpus {
            let s = e.split.unwrap();
            split_ok &= *seen.entry(e.room_id.clone()).or_insert(s) == s;
            split_ok &= s != Split::Test || e.is_real_room;
        }
        split_ok &= corpus.iter().any(|e| e.split == Some(Split::Test));
    }
    c.check("1000 corpora: room-disjoint, real-only test", split_ok);
    c.finish(120.0);
}

fn candle_nn_sigmoid(x: &Tensor) -> Tensor {
    (x.neg().unwrap().exp().unwrap() + 1.0).unwrap().recip().unwrap()
}

// ---------------------------------------------------------------- 7

fn overfit_pairs(cfg: &RunConfig) -> Vec<(AudioClip, AudioClip, RoomParams)> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let prior = &cfg.data.prior;
    let mut out = Vec::new();
    let mut seed = 0;
    while out.len() < 8 {
        seed += 1;
        let Ok((rir, params)) = synth_rir(&prior.sample(&mut rng), prior, &cfg.data.boundary, seed) else {
            continue;
        };
        let dry = synth_speech(cfg.data.clip_seconds, 100 + seed).unwrap();
        out.push((convolve_speech(&dry, &rir).unwrap(), rir, params));
    }
    out
}

fn overfit_run(cfg: &RunConfig, pairs: &[(AudioClip, AudioClip, RoomParams)], max_steps: usize, stop_at: f64) -> Vec<f64> {
    let p = Pipeline::new(cfg.features.clone(), &cfg.brpe, &cfg.model, cfg.seed, DType::F32).unwrap();
    let speech: Vec<AudioClip> = pairs.iter().map(|x| x.0.clone()).collect();
    let rooms = p.brpe_outputs(&speech).unwrap().feature_rows().unwrap();
    let examples: Vec<Example> = pairs
        .iter()
        .zip(rooms)
        .map(|((s, h, params), room)| Example {
            speech: s.samples().to_vec(),
            rir: h.samples().to_vec(),
            log: log_map(params).unwrap(),
            bp_samples: params.bp_samples as usize,
            room: Some(room),
        })
        .collect();
    let loss = MultiResStftLoss::new(&cfg.loss).unwrap();
    let tc = TrainConfig {
        epochs: max_steps,
        max_steps: Some(max_steps),
        ..cfg.train.clone()
    };
    let brpe_before = p.brpe_store.fingerprint("").unwrap();
    let mut losses = Vec::new();
    train_model(&p.model, &p.model_store, &loss, &examples, &[], &tc, |s| {
        losses.push(s.loss);
        if losses.len() % 25 == 0 {
            eprintln!("  step {}: loss {:.3}", losses.len(), s.loss);
        }
        losses.len() < 10 || s.loss > stop_at * losses[0]
    }, |_| Ok(()))
    .unwrap();
    assert_eq!(brpe_before, p.brpe_store.fingerprint("").unwrap(), "estimator weights moved");
    losses
}

#[test]
fn criterion_07_overfit_smoke() {
    let _g = serial();
    let mut c = Checks::new(7, "overfit smoke test");
    let cfg = RunConfig::desk().with_seed(7);
    let pairs = overfit_pairs(&cfg);
    let losses = overfit_run(&cfg, &pairs, 2000, 0.5);
    let (first, last) = (losses[0], *losses.last().unwrap());
    c.check(
        format!("loss {first:.1} -> {last:.1} ({:.1}%) in {} steps", 100.0 * last / first, losses.len()),
        last <= 0.5 * first && losses.len() <= 2000,
    );
    let rerun = overfit_run(&cfg, &pairs, 10, 0.0);
    let (a, b) = (losses.get(9).copied().unwrap_or(f64::NAN), rerun.get(9).copied().unwrap_or(f64::NAN));
    c.check(format!("rerun at step 10: {a} vs {b}"), (a - b).abs() <= 1e-7);
    c.finish(900.0);
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_08_brpe_proxy() {
    let _g = serial();
    let mut c = Checks::new(8, "estimator desk-scale proxy");
    let cfg = RunConfig::desk();
    let fb = cfg.features.filterbank().unwrap();
    let prior = &cfg.data.prior;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut items = Vec::new();
    let mut seed = 0u64;
    while items.len() < 2000 {
        seed += 1;
        let Ok((rir, params)) = synth_rir(&prior.sample(&mut rng), prior, &cfg.data.boundary, seed) else {
            continue;
        };
        let wet = convolve_speech(&synth_speech(2.0, 50_000 + seed).unwrap(), &rir).unwrap();
        items.push(BrpeExample {
            block: extract_feature_block_with(&wet, &cfg.features, &fb).unwrap(),
            log: log_map(&params).unwrap(),
        });
    }
    // One room per clip, so an index split is room-disjoint.
    let (train, test) = items.split_at(1600);
    let store = ParamStore::new(8, DType::F32);
    let brpe = Brpe::new(&store.root().pp("brpe"), &cfg.brpe).unwrap();
    let tc = rirest::train::BrpeTrainConfig {
        pretrain_epochs: 1,
        finetune_epochs: 5,
        pretrain_lr: 1e-3,
        finetune_lr: 1e-3,
        ..cfg.brpe_train.clone()
    };
    let blocks: Vec<_> = train.iter().map(|e| e.block.clone()).collect();
    pretrain_brpe(&brpe, &store, &blocks, &tc, |_, _| Ok(())).unwrap();
    finetune_brpe(&brpe, &store, train, &[], &tc, |_, _, _| Ok(())).unwrap();
    let pred = brpe_predict(&brpe, test, 32).unwrap();
    let rho = |k: usize| {
        let e: Vec<f64> = pred.iter().map(|p| p[k]).collect();
        let t: Vec<f64> = test.iter().map(|x| x.log.as_array()[k]).collect();
        pearson(&e, &t).unwrap_or(f64::NAN)
    };
    let (rv, rt, rb) = (rho(0), rho(1), rho(2));
    c.check(format!("held-out rho log-V {rv:.4} (reported only)"), true);
    c.check(format!("held-out rho log-RT60 {rt:.4} >= 0.9"), rt >= 0.9);
    c.check(format!("held-out rho log-B_p {rb:.4} >= 0.85"), rb >= 0.85);
    c.finish(1800.0);
}

// ---------------------------------------------------------------- 9, 10

const BIN: &str = env!("CARGO_BIN_EXE_rirest");

struct Smoke {
    root: PathBuf,
    config: PathBuf,
    manifest: PathBuf,
    brpe: PathBuf,
}

fn run_cli(args: &[&str]) -> (bool, String, String) {
    let out = Command::new(BIN).args(args).env("RUST_LOG", "warn").output().expect("spawn cli");
    (
        out.status.success(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small corpus plus a fine-tuned estimator, built once through the CLI.
fn smoke() -> &'static Smoke {
    static SMOKE: OnceLock<Smoke> = OnceLock::new();
    SMOKE.get_or_init(|| {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-smoke");
        let _ = std::fs::remove_dir_all(&root);
        std::fs::create_dir_all(&root).unwrap();
        let mut cfg = RunConfig::desk().with_seed(9);
        cfg.data.clip_seconds = 1.0;
        cfg.data.synthetic_rooms = 6;
        cfg.data.rirs_per_room = 3;
        cfg.brpe_train.pretrain_epochs = 1;
        cfg.brpe_train.finetune_epochs = 2;
        cfg.brpe_train.batch_size = 8;
        cfg.train.epochs = 1;
        cfg.train.batch_size = 4;
        cfg.train.max_steps = Some(3);
        let config = root.join("smoke.json");
        cfg.save(&config).unwrap();
        let corpus = root.join("corpus");
        let (ok, _, err) = run_cli(&["prepare-data", "--config", p(&config), "--out", p(&corpus)]);
        assert!(ok, "prepare-data failed: {err}");
        let manifest = corpus.join("manifest.jsonl");
        let brpe = root.join("brpe");
        let (ok, _, err) = run_cli(&[
            "finetune-brpe", "--config", p(&config), "--manifest", p(&manifest), "--out", p(&brpe),
        ]);
        assert!(ok, "finetune-brpe failed: {err}");
        Smoke {
            root,
            config,
            manifest,
            brpe,
        }
    })
}

fn train_variant(s: &Smoke, fusion: &str, boundary: &str) -> Result<(PathBuf, f64), String> {
    let out = s.root.join(format!("train-{fusion}-{boundary}"));
    let (ok, stdout, err) = run_cli(&[
        "train", "--config", p(&s.config), "--manifest", p(&s.manifest), "--brpe", p(&s.brpe), "--fusion", fusion,
        "--boundary", boundary, "--out", p(&out),
    ]);
    if !ok {
        return Err(err);
    }
    let v: serde_json::Value = serde_json::from_str(stdout.trim().lines().last().unwrap_or("")).map_err(|e| e.to_string())?;
    let loss = v["final_loss"].as_f64().ok_or("no final_loss")?;
    Ok((out, loss))
}

#[test]
fn criterion_09_ablation_switches() {
    let _g = serial();
    let mut c = Checks::new(9, "ablation switches");
    let s = smoke();
    let mut finals = Vec::new();
    for fusion in ["hybrid", "naive"] {
        for boundary in ["dynamic", "fixed50ms"] {
            match train_variant(s, fusion, boundary) {
                Ok((_, loss)) => {
                    c.check(format!("{fusion}/{boundary} final {loss:.6}"), loss.is_finite());
                    finals.push(loss);
                }
                Err(e) => c.check(format!("{fusion}/{boundary} failed: {}", e.trim()), false),
            }
        }
    }
    let mut distinct = finals.len() == 4;
    for i in 0..finals.len() {
        for j in i + 1..finals.len() {
            distinct &= (finals[i] - finals[j]).abs() > 1e-4;
        }
    }
    c.check("final losses pairwise differ by > 1e-4", distinct);
    c.finish(1800.0);
}

#[test]
fn criterion_10_end_to_end_estimate() {
    let _g = serial();
    let s = smoke();
    let (ckpt, _) = match std::fs::metadata(s.root.join("train-hybrid-dynamic").join("model.safetensors")) {
        Ok(_) => (s.root.join("train-hybrid-dynamic"), 0.0),
        Err(_) => train_variant(s, "hybrid", "dynamic").expect("training the estimate checkpoint"),
    };
    let corpus_dir = s.manifest.parent().unwrap();
    let entry = read_manifest(&s.manifest)
        .unwrap()
        .into_iter()
        .find(|e| e.split == Some(Split::Test))
        .expect("a held-out entry");
    let speech = corpus_dir.join(&entry.speech_path);
    let out = s.root.join("estimate").join("held_out.wav");

    let mut c = Checks::new(10, "end-to-end estimate");
    let (ok, _, err) = run_cli(&["estimate", p(&speech), "--checkpoint", p(&ckpt), "--out", p(&out)]);
    c.check(format!("estimate exit status ok {}", if ok { "" } else { err.trim() }), ok);
    if ok {
        let clip = rirest::audio::read_wav(&out, false).unwrap();
        c.check(format!("WAV {} samples at {} Hz", clip.len(), clip.sample_rate()), clip.len() == RIR_LEN);
        let rt = rt60_schroeder(&clip);
        c.check(format!("rt60_schroeder finite ({rt:?})"), matches!(rt, Ok(v) if v.is_finite()));
        let text = std::fs::read_to_string(out.with_extension("json")).unwrap();
        match serde_json::from_str::<EstimateSidecar>(&text) {
            Ok(side) => {
                c.check(format!("sidecar validates ({:?})", side.validate()), side.validate().is_ok());
                let cfg = RunConfig::load(ckpt.join("config.json")).unwrap();
                let pl = Pipeline::new(cfg.features.clone(), &cfg.brpe, &cfg.model, cfg.seed, DType::F32).unwrap();
                Checkpoint::open(&ckpt).load_brpe(&pl).unwrap();
                let wet = rirest::audio::read_wav(&speech, false).unwrap();
                let bp = pl.brpe_outputs(&[wet]).unwrap().bp_samples(RIR_LEN).unwrap()[0];
                c.check(format!("bp_used {} == estimator B_p {bp}", side.bp_used), side.bp_used == bp);
            }
            Err(e) => c.check(format!("sidecar schema: {e}"), false),
        }
    }
    c.finish(60.0);
}
