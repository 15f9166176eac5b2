//! Per-fold training and the architecture × fold grid.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::{Checkpoint, EpochRecord, CHECKPOINT_FORMAT};
use super::loss::focal_loss_with_grad;
use super::optim::{cosine_lr, ema_update, AdamW};
use super::{build_model, Model, ModelSpec};
use crate::augment::{apply_batch_mixing, train_augment, AugmentConfig, Batch};
use crate::dataset::{derive_seed, load_denoised};
use crate::denoise::DenoiseConfig;
use crate::error::{invalid, Error, Result};
use crate::imbalance::{compute_class_weights, weighted_sample_stream, ClassWeights, SamplerConfig};
use crate::infer::argmax;
use crate::manifest::Manifest;
use crate::metrics::{compute_metrics, ConfusionMatrix};
use crate::registry::NUM_CLASSES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub ema_decay: f64,
    pub patience_epochs: usize,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr_max: 5e-4,
            lr_min: 5e-6,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            ema_decay: 0.999,
            patience_epochs: 10,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            max_epochs: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.lr_max", self.lr_max),
            ("train.lr_min", self.lr_min),
            ("train.focal_alpha", self.focal_alpha),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{k} must be positive, got {v}")));
            }
        }
        if self.lr_min >= self.lr_max {
            return Err(invalid("train.lr_min must be below train.lr_max"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience_epochs == 0 {
            return Err(invalid(
                "train.batch_size, train.max_epochs and train.patience_epochs must be positive",
            ));
        }
        for (k, v) in [
            ("train.ema_decay", self.ema_decay),
            ("train.adam_beta1", self.adam_beta1),
            ("train.adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(format!("{k} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return Err(invalid("train.focal_gamma must be >= 0"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid("train.weight_decay must be >= 0"));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Stops after `patience` consecutive epochs without strict improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records the score for `epoch`; returns true when it is a new best.
    pub fn update(&mut self, epoch: usize, score: f64) -> bool {
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best.map(|b| (self.best_epoch, b))
    }
}

/// Hooks into the training loop; used for instrumentation.
pub trait TrainObserver: Sync {
    /// Manifest indices of every batch used for a gradient update.
    fn on_batch(&self, _backbone_id: &str, _fold: usize, _records: &[usize]) {}
    fn on_epoch(&self, _backbone_id: &str, _fold: usize, _record: &EpochRecord) {}
}

pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

/// Everything one (architecture, held-out fold) run needs.
#[derive(Debug, Clone)]
pub struct FoldJob<'a> {
    pub manifest: &'a Manifest,
    pub fold: usize,
    pub spec: &'a ModelSpec,
    pub train: &'a TrainConfig,
    pub denoise: &'a DenoiseConfig,
    pub augment: &'a AugmentConfig,
    pub weights: &'a ClassWeights,
    pub sampler_seed: u64,
}

fn one_hot(class: usize) -> Vec<f64> {
    let mut v = vec![0.0; NUM_CLASSES];
    v[class] = 1.0;
    v
}

/// Macro-F1 of `model` on images with known labels.
pub fn validation_macro_f1(model: &Model, images: &[crate::image::Image], labels: &[usize]) -> Result<f64> {
    let preds: Vec<usize> = model
        .forward_batch(images)
        .iter()
        .map(|row| argmax(row).0)
        .collect();
    let cm = ConfusionMatrix::from_indices(
        crate::registry::CLASS_CODES.iter().map(|s| s.to_string()).collect(),
        labels,
        &preds,
    )?;
    Ok(compute_metrics(&cm, &[])?.macro_f1)
}

/// Trains on every fold except `job.fold`, validating the EMA weights on
/// `job.fold` after each epoch. The checkpoint holds the best epoch's
/// weights and EMA weights.
pub fn train_fold(job: &FoldJob, observer: &dyn TrainObserver) -> Result<Checkpoint> {
    let cfg = job.train;
    cfg.validate()?;
    job.augment.validate()?;
    let manifest = job.manifest;
    let backbone = job.spec.backbone_id.as_str();
    let train_idx = manifest.labeled_indices(|f| f.is_some_and(|f| f != job.fold));
    let val_idx = manifest.labeled_indices(|f| f == Some(job.fold));
    if train_idx.is_empty() {
        return Err(Error::EmptyTrainingSplit(job.fold));
    }
    if val_idx.is_empty() {
        return Err(invalid(format!("fold {} has no validation records", job.fold)));
    }

    let train_images = load_denoised(manifest, &train_idx, job.denoise)?;
    let val_images = load_denoised(manifest, &val_idx, job.denoise)?;
    let val_labels: Vec<usize> = val_idx
        .iter()
        .map(|&i| manifest.records()[i].label.expect("labeled"))
        .collect();
    let slot_of = |record: usize| train_idx.binary_search(&record).expect("sampled from pool");

    let run_seed = derive_seed(cfg.seed, backbone, job.fold as u64);
    let mut model = build_model(job.spec, run_seed)?;
    let network = model.network.clone();
    let mut ema = model.weights.clone();
    let mut best_weights = model.weights.clone();
    let mut best_ema = ema.clone();
    let mut opt = AdamW::new(model.weights.len(), cfg.adam_beta1, cfg.adam_beta2, cfg.weight_decay);
    let mut stream = weighted_sample_stream(
        manifest,
        &train_idx,
        job.weights,
        derive_seed(job.sampler_seed, backbone, job.fold as u64),
    )?;
    let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(run_seed, "augment", 0));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(run_seed, "dropout", 0));

    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.max_epochs * steps_per_epoch;
    let mut stopper = EarlyStopping::new(cfg.patience_epochs);
    let mut history = Vec::new();
    let mut grad = vec![0.0; model.weights.len()];
    let mut step = 0;

    for epoch in 1..=cfg.max_epochs {
        let mut epoch_loss = 0.0;
        let mut lr = cfg.lr_max;
        for _ in 0..steps_per_epoch {
            let records: Vec<usize> = stream.by_ref().take(cfg.batch_size).collect();
            if records.iter().any(|&r| manifest.records()[r].fold == Some(job.fold)) {
                return Err(invalid("held-out record reached a training batch"));
            }
            observer.on_batch(backbone, job.fold, &records);
            let batch = Batch {
                images: records
                    .iter()
                    .map(|&r| train_augment(&train_images[slot_of(r)], &mut aug_rng, job.augment))
                    .collect(),
                targets: records
                    .iter()
                    .map(|&r| one_hot(manifest.records()[r].label.expect("labeled")))
                    .collect(),
            };
            let mixed = apply_batch_mixing(batch, job.augment, &mut aug_rng)?;

            let mut logits = Vec::with_capacity(mixed.images.len());
            let mut traces = Vec::with_capacity(mixed.images.len());
            for img in &mixed.images {
                let (z, trace) = network.forward(&model.weights, img, Some(&mut dropout_rng));
                logits.push(z);
                traces.push(trace);
            }
            let (loss, d_logits) =
                focal_loss_with_grad(&logits, &mixed.targets, cfg.focal_alpha, cfg.focal_gamma)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            grad.fill(0.0);
            for (trace, d) in traces.iter().zip(&d_logits) {
                network.backward(&model.weights, trace, d, &mut grad);
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            lr = cosine_lr(step, total_steps, cfg.lr_max, cfg.lr_min)?;
            opt.step(&mut model.weights, &grad, lr);
            ema_update(&mut ema, &model.weights, cfg.ema_decay)?;
            epoch_loss += loss;
            step += 1;
        }

        let ema_model = Model {
            network: network.clone(),
            weights: ema.clone(),
        };
        let val_f1 = validation_macro_f1(&ema_model, &val_images, &val_labels)?;
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / steps_per_epoch as f64,
            val_macro_f1: val_f1,
            lr,
        };
        log::debug!("{backbone} fold {} epoch {epoch}: loss {:.5} val macro-F1 {val_f1:.4}", job.fold, record.train_loss);
        observer.on_epoch(backbone, job.fold, &record);
        history.push(record);
        if stopper.update(epoch, val_f1) {
            best_weights.clone_from(&model.weights);
            best_ema.clone_from(&ema);
        }
        if stopper.should_stop() {
            break;
        }
    }

    let (best_epoch, best_f1) = stopper.best().expect("at least one epoch");
    Ok(Checkpoint {
        format: CHECKPOINT_FORMAT,
        spec: job.spec.clone(),
        fold: job.fold,
        epoch: best_epoch,
        best_val_macro_f1: best_f1,
        config_digest: cfg.digest(),
        weights: best_weights,
        ema_weights: best_ema,
        history,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub train: TrainConfig,
    pub denoise: DenoiseConfig,
    pub augment: AugmentConfig,
    pub sampler: SamplerConfig,
    pub folds: usize,
    /// Concurrent (architecture, fold) runs.
    pub jobs: usize,
    /// Reuse checkpoints already present in the output directory.
    pub skip_existing: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridEntry {
    pub backbone_id: String,
    pub fold: usize,
    pub checkpoint_path: PathBuf,
    pub best_val_macro_f1: f64,
}

pub const GRID_HEADER: &str = "backbone_id,fold,checkpoint_path,best_val_macro_f1";

pub fn checkpoint_file_name(backbone_id: &str, fold: usize) -> String {
    format!("{backbone_id}_fold{fold}.ckpt.json")
}

/// Writes the grid table; checkpoint paths are stored relative to its directory.
pub fn write_grid(path: &Path, entries: &[GridEntry]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = String::from(GRID_HEADER);
    out.push('\n');
    for e in entries {
        let rel = e.checkpoint_path.strip_prefix(base).unwrap_or(&e.checkpoint_path);
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.backbone_id,
            e.fold,
            rel.display(),
            e.best_val_macro_f1
        ));
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, out)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<Vec<GridEntry>> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(GRID_HEADER) {
        return Err(Error::Parse {
            what: "grid manifest",
            line: 1,
            reason: format!("expected header {GRID_HEADER}"),
        });
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let err = |reason: String| Error::Parse {
                what: "grid manifest",
                line: i + 2,
                reason,
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(err(format!("expected 4 fields, found {}", f.len())));
            }
            let p = Path::new(f[2]);
            Ok(GridEntry {
                backbone_id: f[0].to_string(),
                fold: f[1].parse().map_err(|e| err(format!("{e}")))?,
                checkpoint_path: if p.is_relative() { base.join(p) } else { p.to_path_buf() },
                best_val_macro_f1: f[3].parse().map_err(|e| err(format!("{e}")))?,
            })
        })
        .collect()
}

/// Trains every (spec, fold) pair and writes `grid.csv` into `out_dir`.
///
/// Runs are independent and may execute concurrently; each is seeded from
/// its own (architecture, fold) pair, so results do not depend on `jobs`.
/// If any run fails the grid file still lists the completed checkpoints and
/// the first error is returned.
pub fn train_grid(
    manifest: &Manifest,
    specs: &[ModelSpec],
    cfg: &GridConfig,
    out_dir: &Path,
    observer: &dyn TrainObserver,
) -> Result<Vec<GridEntry>> {
    if specs.is_empty() {
        return Err(invalid("grid needs at least one model spec"));
    }
    if cfg.folds < 2 {
        return Err(invalid("grid needs at least 2 folds"));
    }
    let labeled = manifest.labeled_indices(|_| true);
    if labeled
        .iter()
        .any(|&i| manifest.records()[i].fold.is_none_or(|f| f >= cfg.folds))
    {
        return Err(invalid(format!(
            "every labeled record needs a fold in [0, {})",
            cfg.folds
        )));
    }
    std::fs::create_dir_all(out_dir)?;

    let mut fold_weights = Vec::with_capacity(cfg.folds);
    for fold in 0..cfg.folds {
        let mut counts = vec![0usize; manifest.registry().len()];
        for r in manifest.records() {
            if let (Some(l), Some(f)) = (r.label, r.fold) {
                if f != fold {
                    counts[l] += 1;
                }
            }
        }
        fold_weights.push(compute_class_weights(&counts, cfg.sampler.beta)?);
    }

    let runs: Vec<(usize, usize)> = (0..specs.len())
        .flat_map(|s| (0..cfg.folds).map(move |f| (s, f)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.max(1))
        .build()
        .map_err(|e| invalid(format!("thread pool: {e}")))?;
    let results: Vec<Result<GridEntry>> = pool.install(|| {
        runs.par_iter()
            .with_max_len(1)
            .map(|&(s, fold)| {
                let spec = &specs[s];
                let path = out_dir.join(checkpoint_file_name(&spec.backbone_id, fold));
                let ckpt = match Checkpoint::load(&path) {
                    Ok(existing) if cfg.skip_existing && existing.config_digest == cfg.train.digest() => {
                        log::info!("reusing {}", path.display());
                        existing
                    }
                    _ => {
                        let job = FoldJob {
                            manifest,
                            fold,
                            spec,
                            train: &cfg.train,
                            denoise: &cfg.denoise,
                            augment: &cfg.augment,
                            weights: &fold_weights[fold],
                            sampler_seed: cfg.sampler.seed,
                        };
                        let ckpt = train_fold(&job, observer)?;
                        ckpt.save(&path)?;
                        log::info!(
                            "{} fold {fold}: best macro-F1 {:.4} at epoch {}",
                            spec.backbone_id,
                            ckpt.best_val_macro_f1,
                            ckpt.epoch
                        );
                        ckpt
                    }
                };
                Ok(GridEntry {
                    backbone_id: spec.backbone_id.clone(),
                    fold,
                    checkpoint_path: path,
                    best_val_macro_f1: ckpt.best_val_macro_f1,
                })
            })
            .collect()
    });

    let mut entries = Vec::new();
    let mut first_error = None;
    for r in results {
        match r {
            Ok(e) => entries.push(e),
            Err(e) if first_error.is_none() => first_error = Some(e),
            Err(_) => {}
        }
    }
    write_grid(&out_dir.join("grid.csv"), &entries)?;
    match first_error {
        Some(e) => Err(e),
        None => Ok(entries),
    }
}
