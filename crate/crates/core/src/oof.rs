//! Leakage-free out-of-fold evaluation over a trained grid.

use std::collections::{BTreeMap, BTreeSet};

use crate::augment::TtaMode;
use crate::dataset::{derive_seed, load_denoised};
use crate::denoise::DenoiseConfig;
use crate::error::{invalid, Error, Result};
use crate::infer::{ensemble_row, predict, Averaging, EnsembleSpec, LogitKind, LogitMatrix};
use crate::manifest::Manifest;
use crate::metrics::{compute_metrics, ConfusionMatrix, MetricReport};
use crate::model::checkpoint::Checkpoint;
use crate::model::train::GridEntry;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OofGroup {
    /// One architecture's fold models.
    Architecture(String),
    /// Mean over every architecture in the grid.
    Ensemble,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OofConfig {
    pub tta_k: usize,
    pub tta_mode: TtaMode,
    pub use_ema: bool,
    pub averaging: Averaging,
    pub seed: u64,
    pub denoise: DenoiseConfig,
}

impl Default for OofConfig {
    fn default() -> Self {
        Self {
            tta_k: 1,
            tta_mode: TtaMode::Dihedral,
            use_ema: true,
            averaging: Averaging::Logits,
            seed: 0,
            denoise: DenoiseConfig::default(),
        }
    }
}

/// Which models produced one sample's OOF row.
#[derive(Debug, Clone, PartialEq)]
pub struct OofProvenance {
    pub sample_id: String,
    pub fold: usize,
    /// (architecture, fold held out by that model) pairs.
    pub models: Vec<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OofResult {
    pub report: MetricReport,
    pub confusion: ConfusionMatrix,
    /// Rows sorted by sample id.
    pub logits: LogitMatrix,
    pub provenance: Vec<OofProvenance>,
}

fn architectures(grid: &[GridEntry], group: &OofGroup) -> Vec<String> {
    match group {
        OofGroup::Architecture(a) => vec![a.clone()],
        OofGroup::Ensemble => grid
            .iter()
            .map(|e| e.backbone_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    }
}

/// Scores every labeled sample of fold `f` only with models trained with
/// `f` held out, then computes metrics over the assembled predictions.
pub fn out_of_fold_eval(
    grid: &[GridEntry],
    manifest: &Manifest,
    group: &OofGroup,
    cfg: &OofConfig,
) -> Result<OofResult> {
    let archs = architectures(grid, group);
    if archs.is_empty() {
        return Err(invalid("grid is empty"));
    }
    let labeled = manifest.labeled_indices(|_| true);
    if labeled.is_empty() {
        return Err(invalid("manifest has no labeled records"));
    }
    let mut by_fold: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in &labeled {
        let fold = manifest.records()[i]
            .fold
            .ok_or_else(|| invalid(format!("{} has no fold", manifest.records()[i].image_path)))?;
        by_fold.entry(fold).or_default().push(i);
    }

    let spec = EnsembleSpec {
        checkpoints: Vec::new(),
        tta_k: cfg.tta_k,
        tta_mode: cfg.tta_mode,
        use_ema: cfg.use_ema,
        averaging: cfg.averaging,
        seed: cfg.seed,
    };
    let mut ids = Vec::with_capacity(labeled.len());
    let mut rows = Vec::with_capacity(labeled.len());
    let mut truth = Vec::with_capacity(labeled.len());
    let mut provenance = Vec::with_capacity(labeled.len());
    for (&fold, indices) in &by_fold {
        let mut models = Vec::with_capacity(archs.len());
        let mut tags = Vec::with_capacity(archs.len());
        for arch in &archs {
            let entry = grid
                .iter()
                .find(|e| &e.backbone_id == arch && e.fold == fold)
                .ok_or_else(|| Error::MissingGridEntry {
                    backbone: arch.clone(),
                    fold,
                })?;
            let ckpt = Checkpoint::load(&entry.checkpoint_path)?;
            if ckpt.fold != fold || &ckpt.spec.backbone_id != arch {
                return Err(invalid(format!(
                    "{} holds {} fold {}, grid says {arch} fold {fold}",
                    entry.checkpoint_path.display(),
                    ckpt.spec.backbone_id,
                    ckpt.fold
                )));
            }
            models.push(ckpt.to_model(cfg.use_ema)?);
            tags.push((arch.clone(), ckpt.fold));
        }
        let images = load_denoised(manifest, indices, &cfg.denoise)?;
        let fold_rows: Vec<Vec<f64>> = {
            use rayon::prelude::*;
            indices
                .par_iter()
                .zip(&images)
                .map(|(&i, img)| {
                    let id = &manifest.records()[i].image_path;
                    ensemble_row(&models, img, &spec, derive_seed(cfg.seed, id, 0))
                })
                .collect::<Result<_>>()?
        };
        for (&i, row) in indices.iter().zip(fold_rows) {
            let r = &manifest.records()[i];
            ids.push(r.image_path.clone());
            rows.push(row);
            truth.push(r.label.expect("labeled"));
            provenance.push(OofProvenance {
                sample_id: r.image_path.clone(),
                fold,
                models: tags.clone(),
            });
        }
    }

    let kind = match cfg.averaging {
        Averaging::Logits => LogitKind::Logit,
        Averaging::Probabilities => LogitKind::Probability,
    };
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
    let logits = LogitMatrix::new(
        order.iter().map(|&i| ids[i].clone()).collect(),
        order.iter().map(|&i| rows[i].clone()).collect(),
        kind,
    )?;
    let truth: Vec<usize> = order.iter().map(|&i| truth[i]).collect();
    provenance.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let preds: Vec<usize> = predict(&logits).into_iter().map(|p| p.class).collect();
    let confusion = ConfusionMatrix::from_indices(
        manifest.registry().codes().map(str::to_string).collect(),
        &truth,
        &preds,
    )?;
    let report = compute_metrics(&confusion, &[])?;
    Ok(OofResult {
        report,
        confusion,
        logits,
        provenance,
    })
}

/// Labels of `logits` rows, looked up in `manifest` by sample id.
pub fn labels_for(logits: &LogitMatrix, manifest: &Manifest) -> Result<Vec<usize>> {
    let by_id: BTreeMap<&str, Option<usize>> = manifest
        .records()
        .iter()
        .map(|r| (r.image_path.as_str(), r.label))
        .collect();
    logits
        .sample_ids
        .iter()
        .map(|id| match by_id.get(id.as_str()) {
            Some(Some(l)) => Ok(*l),
            Some(None) => Err(invalid(format!("{id} has no label"))),
            None => Err(invalid(format!("{id} is not in the manifest"))),
        })
        .collect()
}
