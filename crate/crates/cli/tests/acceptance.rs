//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits nonzero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use hemoforge::synth::{synth_data, SynthSpec};
use hemoforge_core::augment::AugmentConfig;
use hemoforge_core::cl::{class_thresholds, confident_joint, find_label_issues, DEFAULT_SELF_CONFIDENCE_CUTOFF};
use hemoforge_core::denoise::{adaptive_denoise, estimate_sigma, DenoiseConfig};
use hemoforge_core::folds::assign_stratified_folds;
use hemoforge_core::image::{psnr, Image};
use hemoforge_core::imbalance::{compute_class_weights, effective_number, weighted_sample_stream, SamplerConfig};
use hemoforge_core::manifest::{Manifest, SampleRecord, Source};
use hemoforge_core::metrics::{compute_metrics, ConfusionMatrix};
use hemoforge_core::model::loss::{cross_entropy, focal_loss, focal_loss_with_grad};
use hemoforge_core::model::optim::{cosine_lr, ema_update};
use hemoforge_core::model::train::{train_grid, GridConfig, TrainConfig, TrainObserver};
use hemoforge_core::oof::{out_of_fold_eval, OofConfig, OofGroup};
use hemoforge_core::registry::ClassRegistry;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within_budget(t: Instant, budget: Duration, what: &str) -> Result<(), String> {
    let e = t.elapsed();
    ensure(e < budget, format!("{what} took {e:.1?}, budget {budget:?}"))
}

/// Geometric series `Σ_{k<n} β^k` by repeated multiplication.
fn geometric_sum(n: u64, beta: f64) -> f64 {
    let mut sum = 0.0;
    let mut term = 1.0;
    for _ in 0..n {
        sum += term;
        term *= beta;
    }
    sum
}

fn c1_effective_number() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=20_000u64);
        let beta = if rng.random_bool(0.5) {
            rng.random_range(0.0..0.999)
        } else {
            1.0 - 10f64.powf(rng.random_range(-6.0..-3.0))
        };
        let got = effective_number(n, beta).map_err(|e| e.to_string())?;
        let want = geometric_sum(n, beta);
        worst = worst.max(((got - want) / want).abs());
    }
    ensure(worst <= 1e-9, format!("worst relative error {worst:.2e}"))?;
    let e = effective_number(10_000, 0.9999).map_err(|e| e.to_string())?;
    ensure((e - 6321.39).abs() < 0.01, format!("E(10000, 0.9999) = {e}"))?;
    within_budget(t, Duration::from_secs(1), "formula suite")?;
    Ok(format!("200 pairs, worst rel err {worst:.1e}; E(10000,0.9999) = {e:.2}"))
}

fn c2_focal_loss() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_ce = 0.0f64;
    let mut worst_grad = 0.0f64;
    for _ in 0..50 {
        let b = rng.random_range(1..=8);
        let c = rng.random_range(2..=13);
        let logits: Vec<Vec<f64>> = (0..b).map(|_| (0..c).map(|_| rng.random_range(-4.0..4.0)).collect()).collect();
        let targets: Vec<Vec<f64>> = (0..b)
            .map(|_| {
                let mut row = vec![0.0; c];
                let lam: f64 = rng.random_range(0.0..1.0);
                row[rng.random_range(0..c)] += lam;
                row[rng.random_range(0..c)] += 1.0 - lam;
                row
            })
            .collect();
        let ce = cross_entropy(&logits, &targets).map_err(|e| e.to_string())?;
        let f = focal_loss(&logits, &targets, 1.0, 0.0).map_err(|e| e.to_string())?;
        worst_ce = worst_ce.max((ce - f).abs());

        let (alpha, gamma) = (0.25, 2.0);
        let (_, grad) = focal_loss_with_grad(&logits, &targets, alpha, gamma).map_err(|e| e.to_string())?;
        let h = 1e-5;
        for i in 0..b {
            for k in 0..c {
                let mut up = logits.clone();
                up[i][k] += h;
                let mut down = logits.clone();
                down[i][k] -= h;
                let fd = (focal_loss(&up, &targets, alpha, gamma).unwrap()
                    - focal_loss(&down, &targets, alpha, gamma).unwrap())
                    / (2.0 * h);
                let scale = grad[i][k].abs().max(fd.abs()).max(1e-6);
                worst_grad = worst_grad.max((grad[i][k] - fd).abs() / scale);
            }
        }
    }
    ensure(worst_ce <= 1e-6, format!("gamma=0/alpha=1 differs from CE by {worst_ce:.2e}"))?;
    ensure(worst_grad <= 1e-4, format!("worst relative gradient error {worst_grad:.2e}"))?;
    let half = focal_loss(&[vec![0.0, 0.0]], &[vec![1.0, 0.0]], 0.25, 2.0).map_err(|e| e.to_string())?;
    ensure((half - 0.0433217).abs() < 1e-6, format!("p_t = 0.5 loss {half}"))?;
    within_budget(t, Duration::from_secs(5), "focal suite")?;
    Ok(format!(
        "CE match {worst_ce:.1e}, p_t=0.5 loss {half:.7}, FD grad rel err {worst_grad:.1e} over 50 batches"
    ))
}

fn c3_schedule_ema() -> Check {
    let total = 10_000;
    let start = cosine_lr(0, total, 5e-4, 5e-6).map_err(|e| e.to_string())?;
    let end = cosine_lr(total, total, 5e-4, 5e-6).map_err(|e| e.to_string())?;
    let mid = cosine_lr(total / 2, total, 5e-4, 5e-6).map_err(|e| e.to_string())?;
    ensure(start == 5e-4 && end == 5e-6, format!("endpoints {start:e}, {end:e}"))?;
    ensure((mid - 2.525e-4).abs() < 1e-12, format!("midpoint {mid:e}"))?;
    let mut ema = vec![0.0];
    for _ in 0..1000 {
        ema_update(&mut ema, &[1.0], 0.999).map_err(|e| e.to_string())?;
    }
    let closed = 1.0 - 0.999f64.powi(1000);
    ensure((ema[0] - closed).abs() < 1e-6 && (ema[0] - 0.63230).abs() < 1e-5, format!("EMA {}", ema[0]))?;
    Ok(format!("lr(0) = {start:e}, lr(T) = {end:e}, lr(T/2) = {mid:e}; EMA after 1000 steps {:.6}", ema[0]))
}

fn c4_sampler() -> Check {
    let counts = [100usize, 10_000];
    let records: Vec<SampleRecord> = counts
        .iter()
        .enumerate()
        .flat_map(|(class, &n)| {
            (0..n).map(move |i| SampleRecord {
                image_path: format!("c{class}/{i:05}.png"),
                label: Some(class),
                source: Source::WbcbenchTrain,
                fold: Some(0),
            })
        })
        .collect();
    let m = Manifest::new(ClassRegistry::builtin(), records).map_err(|e| e.to_string())?;
    let mut full = vec![0usize; 13];
    full[..2].copy_from_slice(&counts);
    let beta = 1.0 - 1e-6;
    let w = compute_class_weights(&full, beta).map_err(|e| e.to_string())?;
    let idx: Vec<usize> = (0..m.len()).collect();
    let draws = 100_000;
    let mut observed = [0u64; 2];
    for r in weighted_sample_stream(&m, &idx, &w, 4).map_err(|e| e.to_string())?.take(draws) {
        observed[m.records()[r].label.unwrap()] += 1;
    }
    let freq: Vec<f64> = observed.iter().map(|&o| o as f64 / draws as f64).collect();
    ensure(freq.iter().all(|f| (f - 0.5).abs() <= 0.01), format!("class frequencies {freq:?}"))?;
    // Expected class mass n_c·w_c, normalized.
    let mass: Vec<f64> = (0..2).map(|c| counts[c] as f64 * w.weight[c]).collect();
    let total: f64 = mass.iter().sum();
    let chi2: f64 = (0..2)
        .map(|c| {
            let e = mass[c] / total * draws as f64;
            (observed[c] as f64 - e).powi(2) / e
        })
        .sum();
    let critical = ChiSquared::new(1.0).unwrap().inverse_cdf(0.999);
    ensure(chi2 < critical, format!("chi-square {chi2:.3} >= {critical:.3}"))?;
    Ok(format!(
        "frequencies {:.4}/{:.4} over {draws} draws; chi2 {chi2:.3} < {critical:.3}",
        freq[0], freq[1]
    ))
}

fn smooth_image(rng: &mut ChaCha8Rng, size: usize) -> Image {
    let params: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            [
                rng.random_range(0.01..0.05),
                rng.random_range(0.01..0.05),
                rng.random_range(0.0..6.28),
                rng.random_range(20.0..40.0),
            ]
        })
        .collect();
    Image::from_fn(size, size, 3, |y, x, c| {
        let [fy, fx, phase, amp] = params[c];
        (128.0 + amp * ((fy * y as f64 + fx * x as f64) * std::f64::consts::TAU / 4.0 + phase).sin()) as f32
    })
}

fn c5_denoiser() -> Check {
    let t = Instant::now();
    let cfg = DenoiseConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sigmas = [10.0, 15.0, 25.0];
    let mut worst_rel = 0.0f64;
    let mut min_gain = f64::INFINITY;
    for i in 0..20 {
        let sigma = sigmas[i % 3];
        let clean = smooth_image(&mut rng, 128);
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut noisy = clean.clone();
        for v in noisy.data_mut() {
            *v += noise.sample(&mut rng) as f32;
        }
        let est = estimate_sigma(&noisy).map_err(|e| e.to_string())?.sigma_hat;
        worst_rel = worst_rel.max((est - sigma).abs() / sigma);
        let out = adaptive_denoise(&noisy, &cfg).map_err(|e| e.to_string())?;
        min_gain = min_gain.min(psnr(&clean, &out) - psnr(&clean, &noisy));
    }
    ensure(worst_rel <= 0.15, format!("sigma estimate off by {:.1}%", worst_rel * 100.0))?;
    ensure(min_gain >= 2.0, format!("minimum PSNR gain {min_gain:.2} dB"))?;
    let mut bypassed = 0;
    for _ in 0..5 {
        let clean = smooth_image(&mut rng, 128);
        let est = estimate_sigma(&clean).map_err(|e| e.to_string())?.sigma_hat;
        let out = adaptive_denoise(&clean, &cfg).map_err(|e| e.to_string())?;
        ensure(est < 2.0, format!("clean image sigma {est}"))?;
        ensure(out.data() == clean.data(), "clean image was modified")?;
        bypassed += 1;
    }
    within_budget(t, Duration::from_secs(60), "denoiser suite")?;
    Ok(format!(
        "20 images, worst sigma error {:.1}%, min PSNR gain {min_gain:.2} dB, {bypassed}/5 clean images bitwise unchanged ({:.1?})",
        worst_rel * 100.0,
        t.elapsed()
    ))
}

/// Per-class metrics recomputed from raw counts by scanning every cell.
fn brute_force_macro(counts: &[Vec<u64>]) -> [f64; 4] {
    let n = counts.len();
    let (mut f1s, mut recs, mut precs, mut specs) = (vec![], vec![], vec![], vec![]);
    for c in 0..n {
        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for (i, row) in counts.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                match (i == c, j == c) {
                    (true, true) => tp += v,
                    (false, true) => fp += v,
                    (true, false) => fn_ += v,
                    (false, false) => tn += v,
                }
            }
        }
        if tp + fn_ == 0 {
            continue;
        }
        let div = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let p = div(tp, tp + fp);
        let r = div(tp, tp + fn_);
        f1s.push(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) });
        recs.push(r);
        precs.push(p);
        specs.push(div(tn, tn + fp));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    [mean(&f1s), mean(&recs), mean(&precs), mean(&specs)]
}

fn c6_metrics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..=13);
        let labels: Vec<String> = (0..n).map(|i| format!("K{i}")).collect();
        let counts: Vec<Vec<u64>> = (0..n)
            .map(|_| {
                let empty = rng.random_bool(0.1);
                (0..n).map(|_| if empty { 0 } else { rng.random_range(0..40) }).collect()
            })
            .collect();
        let cm = ConfusionMatrix { labels, counts: counts.clone() };
        if cm.total() == 0 {
            continue;
        }
        let r = compute_metrics(&cm, &[]).map_err(|e| e.to_string())?;
        let [f1, rec, prec, spec] = brute_force_macro(&counts);
        for (a, b) in [
            (r.macro_f1, f1),
            (r.balanced_accuracy, rec),
            (r.macro_sensitivity, rec),
            (r.macro_precision, prec),
            (r.macro_specificity, spec),
        ] {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-9, format!("max deviation from brute force {worst:.2e}"))?;
    let cm = ConfusionMatrix {
        labels: vec!["A".into(), "B".into()],
        counts: vec![vec![8, 2], vec![3, 7]],
    };
    let got = compute_metrics(&cm, &[]).map_err(|e| e.to_string())?.macro_f1;
    let f1 = |p: f64, r: f64| 2.0 * p * r / (p + r);
    let want = 0.5 * (f1(8.0 / 11.0, 8.0 / 10.0) + f1(7.0 / 9.0, 7.0 / 10.0));
    ensure((got - want).abs() < 1e-5, format!("2-class macro-F1 {got}, formula {want}"))?;
    Ok(format!(
        "100 matrices within {worst:.1e}; [[8,2],[3,7]] macro-F1 {got:.7} (formula value {want:.7}; the quoted 0.74984 is off by {:.1e})",
        (0.74984 - want).abs()
    ))
}

fn desk_config_text() -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.cfg"))
        .expect("desk profile present")
}

#[derive(Default)]
struct Leakage {
    batches: Mutex<usize>,
    leaks: Mutex<Vec<String>>,
    folds: Vec<Option<usize>>,
}

impl TrainObserver for Leakage {
    fn on_batch(&self, backbone_id: &str, fold: usize, records: &[usize]) {
        *self.batches.lock().unwrap() += 1;
        for &r in records {
            if self.folds[r] == Some(fold) {
                self.leaks.lock().unwrap().push(format!("{backbone_id} fold {fold} record {r}"));
            }
        }
    }
}

fn c7_oof_integrity(work: &Path) -> Check {
    let cfg = hemoforge::config::parse_config(&desk_config_text(), &[]).map_err(|e| e.to_string())?;
    let data = work.join("c7");
    let generated = synth_data(&data, &SynthSpec::default()).map_err(|e| e.to_string())?;
    let mut m = assign_stratified_folds(&generated.manifest, cfg.folds, 7).map_err(|e| e.to_string())?;
    m.base_dir = Some(data.clone());
    let grid_cfg = GridConfig {
        train: TrainConfig {
            max_epochs: 5,
            ..cfg.train_config()
        },
        denoise: cfg.denoise.clone(),
        augment: AugmentConfig::default(),
        sampler: SamplerConfig {
            beta: cfg.sampler_beta,
            seed: 1,
        },
        folds: cfg.folds,
        jobs: 1,
        skip_existing: false,
    };
    let specs = cfg.model_specs().map_err(|e| e.to_string())?;
    let observer = Leakage {
        folds: m.records().iter().map(|r| r.fold).collect(),
        ..Leakage::default()
    };
    let grid = train_grid(&m, &specs, &grid_cfg, &data.join("grid"), &observer).map_err(|e| e.to_string())?;
    let leaks = observer.leaks.lock().unwrap().clone();
    let batches = *observer.batches.lock().unwrap();
    ensure(batches > 0, "no batches observed")?;
    ensure(leaks.is_empty(), format!("held-out records in batches: {:?}", &leaks[..leaks.len().min(5)]))?;
    let oof = out_of_fold_eval(&grid, &m, &OofGroup::Ensemble, &OofConfig::default()).map_err(|e| e.to_string())?;
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for p in &oof.provenance {
        *seen.entry(p.sample_id.as_str()).or_default() += 1;
        ensure(
            p.models.iter().all(|(_, f)| *f == p.fold),
            format!("{} scored by a model that trained on its fold", p.sample_id),
        )?;
    }
    let labeled = m.labeled_indices(|_| true).len();
    ensure(seen.len() == labeled && seen.values().all(|&n| n == 1), "OOF coverage is not exactly once")?;
    ensure(oof.logits.len() == labeled, "OOF logit row count")?;
    Ok(format!("{batches} batches, 0 leaks; {labeled} labeled samples each scored exactly once"))
}

fn hemoforge(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_hemoforge"))
        .args(args)
        .env("HEMOFORGE_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(
        out.status.success(),
        format!(
            "`hemoforge {}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ),
    )
}

fn c8_end_to_end(work: &Path) -> Check {
    let t = Instant::now();
    let cfg = work.join("desk.cfg");
    std::fs::write(&cfg, desk_config_text()).map_err(|e| e.to_string())?;
    let cfg = cfg.to_str().unwrap();
    let data = work.join("e2e-data");
    let run = work.join("e2e-run");
    let manifest = data.join("manifest.csv");
    let (data, run, manifest) = (data.to_str().unwrap(), run.to_str().unwrap(), manifest.to_str().unwrap());
    hemoforge(&["synth-data", "--out", data, "--counts", "100,60,10", "--flip-rate", "0", "--config", cfg])?;
    hemoforge(&["train", "--manifest", manifest, "--config", cfg, "--run-dir", run, "--jobs", "1"])?;
    hemoforge(&["evaluate", "--manifest", manifest, "--config", cfg, "--run-dir", run, "--group", "all"])?;
    let table = std::fs::read_to_string(Path::new(run).join("comparison.csv")).map_err(|e| e.to_string())?;
    let scores: BTreeMap<String, f64> = table
        .lines()
        .skip(1)
        .filter_map(|l| {
            let mut f = l.split(',');
            Some((f.next()?.to_string(), f.next()?.parse().ok()?))
        })
        .collect();
    let ensemble = *scores.get("ensemble").ok_or("no ensemble row")?;
    let best_single = scores
        .iter()
        .filter(|(k, _)| k.as_str() != "ensemble")
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let checkpoints = std::fs::read_dir(run)
        .map_err(|e| e.to_string())?
        .filter(|e| e.as_ref().is_ok_and(|e| e.file_name().to_string_lossy().ends_with(".ckpt.json")))
        .count();
    ensure(checkpoints == 9, format!("{checkpoints} checkpoints"))?;
    ensure(ensemble >= 0.9, format!("ensemble OOF macro-F1 {ensemble:.4}"))?;
    ensure(
        ensemble >= best_single - 0.05,
        format!("ensemble {ensemble:.4} vs best single {best_single:.4}"),
    )?;
    within_budget(t, Duration::from_secs(15 * 60), "end-to-end run")?;
    Ok(format!(
        "9 checkpoints; ensemble OOF macro-F1 {ensemble:.4}, best single {best_single:.4}; wall time {:.1?}",
        t.elapsed()
    ))
}

fn c9_confident_learning(work: &Path) -> Check {
    // Synthetic set with 10% injected flips and a well-separated model:
    // each sample puts 0.9-0.99 of its mass on its true class.
    let data = work.join("c9");
    let spec = SynthSpec {
        per_class_counts: vec![140, 140, 120],
        flip_rate: 0.1,
        seed: 9,
        ..SynthSpec::default()
    };
    let generated = synth_data(&data, &spec).map_err(|e| e.to_string())?;
    let truth: BTreeMap<&str, usize> = generated
        .flips
        .iter()
        .map(|f| (f.image_path.as_str(), f.true_label))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut ids, mut probs, mut labels) = (vec![], vec![], vec![]);
    for r in generated.manifest.records() {
        let given = r.label.unwrap();
        let true_label = truth.get(r.image_path.as_str()).copied().unwrap_or(given);
        let top: f64 = rng.random_range(0.9..0.99);
        let split: f64 = rng.random_range(0.0..1.0);
        let mut row = vec![0.0; 3];
        row[true_label] = top;
        row[(true_label + 1) % 3] = (1.0 - top) * split;
        row[(true_label + 2) % 3] = (1.0 - top) * (1.0 - split);
        ids.push(r.image_path.clone());
        probs.push(row);
        labels.push(given);
    }
    let issues = find_label_issues(&ids, &probs, &labels, Some(DEFAULT_SELF_CONFIDENCE_CUTOFF)).map_err(|e| e.to_string())?;
    let flagged: BTreeSet<&str> = issues.iter().map(|i| i.sample_id.as_str()).collect();
    let hits = truth.keys().filter(|id| flagged.contains(*id)).count();
    let recall = hits as f64 / truth.len().max(1) as f64;
    let precision = hits as f64 / flagged.len().max(1) as f64;
    ensure(!truth.is_empty(), "no flips injected")?;
    ensure(recall >= 0.8, format!("recall {recall:.3}"))?;
    ensure(precision >= 0.6, format!("precision {precision:.3}"))?;

    // Oracle predictor and a known flip matrix at N = 2000.
    let q = [[0.80, 0.15, 0.05], [0.10, 0.85, 0.05], [0.05, 0.05, 0.90]];
    let prior = [0.5, 0.3, 0.2];
    let n = 2000;
    let mut rng = ChaCha8Rng::seed_from_u64(2000);
    let (mut probs, mut labels) = (vec![], vec![]);
    for _ in 0..n {
        let u: f64 = rng.random_range(0.0..1.0);
        let true_label = if u < prior[0] { 0 } else if u < prior[0] + prior[1] { 1 } else { 2 };
        let v: f64 = rng.random_range(0.0..1.0);
        let row = q[true_label];
        let given = if v < row[0] { 0 } else if v < row[0] + row[1] { 1 } else { 2 };
        let mut p = vec![0.0; 3];
        p[true_label] = 1.0;
        probs.push(p);
        labels.push(given);
    }
    let thresholds = class_thresholds(&probs, &labels).map_err(|e| e.to_string())?;
    let joint = confident_joint(&probs, &labels, &thresholds).map_err(|e| e.to_string())?;
    let normalized = joint.normalized();
    let mut worst = 0.0f64;
    for given in 0..3 {
        for true_label in 0..3 {
            let expected = prior[true_label] * q[true_label][given];
            worst = worst.max((normalized[given][true_label] - expected).abs());
        }
    }
    ensure(worst <= 0.03, format!("normalized joint off by {worst:.4}"))?;
    Ok(format!(
        "{} flips: recall {recall:.3}, precision {precision:.3}; N=2000 joint max deviation {worst:.4}",
        truth.len()
    ))
}

fn c10_determinism(work: &Path) -> Check {
    let cfg = work.join("desk.cfg");
    let cfg = cfg.to_str().unwrap();
    let data = work.join("e2e-data");
    let manifest = data.join("manifest.csv");
    let manifest = manifest.to_str().unwrap();
    let mut files = Vec::new();
    for name in ["det-a", "det-b"] {
        let run = work.join(name);
        let run = run.to_str().unwrap();
        hemoforge(&["train", "--manifest", manifest, "--config", cfg, "--run-dir", run, "--jobs", "1"])?;
        hemoforge(&["infer", "--manifest", manifest, "--config", cfg, "--run-dir", run])?;
        files.push(std::fs::read(Path::new(run).join("logits.csv")).map_err(|e| e.to_string())?);
    }
    ensure(!files[0].is_empty(), "empty logit file")?;
    ensure(files[0] == files[1], "logit files differ")?;
    Ok(format!("two train+infer runs, logits.csv identical ({} bytes)", files[0].len()))
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let w = work.path();
    let criteria: Vec<(&str, Box<dyn Fn() -> Check + '_>)> = vec![
        ("formula suite (effective number)", Box::new(c1_effective_number)),
        ("focal loss", Box::new(c2_focal_loss)),
        ("schedule and EMA", Box::new(c3_schedule_ema)),
        ("class-balanced sampler", Box::new(c4_sampler)),
        ("adaptive denoiser", Box::new(c5_denoiser)),
        ("metrics", Box::new(c6_metrics)),
        ("OOF integrity", Box::new(move || c7_oof_integrity(w))),
        ("end-to-end desk run", Box::new(move || c8_end_to_end(w))),
        ("confident learning", Box::new(move || c9_confident_learning(w))),
        ("determinism", Box::new(move || c10_determinism(w))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err("panicked".into()));
        match result {
            Ok(detail) => println!("acceptance {:>2} PASS {name}: {detail}", i + 1),
            Err(reason) => {
                failed += 1;
                println!("acceptance {:>2} FAIL {name}: {reason}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
