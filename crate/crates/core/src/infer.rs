//! Logit-averaged ensemble inference with test-time augmentation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{tta_views, TtaMode};
use crate::dataset::derive_seed;
use crate::denoise::{adaptive_denoise, DenoiseConfig};
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::manifest::Manifest;
use crate::model::checkpoint::Checkpoint;
use crate::model::loss::softmax;
use crate::model::Model;
use crate::registry::{ClassRegistry, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitKind {
    #[default]
    Logit,
    Probability,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix {
    pub sample_ids: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub kind: LogitKind,
}

impl LogitMatrix {
    pub fn new(sample_ids: Vec<String>, values: Vec<Vec<f64>>, kind: LogitKind) -> Result<Self> {
        let m = Self {
            sample_ids,
            values,
            kind,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn empty(kind: LogitKind) -> Self {
        Self {
            sample_ids: Vec::new(),
            values: Vec::new(),
            kind,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_ids.len() != self.values.len() {
            return Err(Error::Shape(format!(
                "{} sample ids for {} rows",
                self.sample_ids.len(),
                self.values.len()
            )));
        }
        for (id, row) in self.sample_ids.iter().zip(&self.values) {
            if row.len() != NUM_CLASSES {
                return Err(Error::Shape(format!("{id}: {} columns, need {NUM_CLASSES}", row.len())));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("{id}: non-finite logit")));
            }
            if self.kind == LogitKind::Probability && (row.iter().sum::<f64>() - 1.0).abs() > 1e-5 {
                return Err(invalid(format!("{id}: probabilities do not sum to 1")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Row-wise softmax; probabilities pass through unchanged.
    pub fn probabilities(&self) -> LogitMatrix {
        match self.kind {
            LogitKind::Probability => self.clone(),
            LogitKind::Logit => LogitMatrix {
                sample_ids: self.sample_ids.clone(),
                values: self.values.iter().map(|r| softmax(r)).collect(),
                kind: LogitKind::Probability,
            },
        }
    }

    /// Reorders rows by sample id.
    pub fn sort_by_id(&mut self) {
        let mut rows: Vec<(String, Vec<f64>)> = self
            .sample_ids
            .drain(..)
            .zip(self.values.drain(..))
            .collect();
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        (self.sample_ids, self.values) = rows.into_iter().unzip();
    }

    /// `sample_id,logit_SNE,...` (or `prob_` columns for probabilities).
    pub fn to_csv(&self, registry: &ClassRegistry) -> String {
        let prefix = match self.kind {
            LogitKind::Logit => "logit_",
            LogitKind::Probability => "prob_",
        };
        let mut out = String::from("sample_id");
        for code in registry.codes() {
            out.push(',');
            out.push_str(prefix);
            out.push_str(code);
        }
        out.push('\n');
        for (id, row) in self.sample_ids.iter().zip(&self.values) {
            out.push_str(&csv_field(id));
            for v in row {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(text: &str, registry: &ClassRegistry) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let headers = reader.headers()?.clone();
        let kind = match headers.get(1) {
            Some(h) if h.starts_with("prob_") => LogitKind::Probability,
            _ => LogitKind::Logit,
        };
        let prefix = if kind == LogitKind::Logit { "logit_" } else { "prob_" };
        let expected: Vec<String> = std::iter::once("sample_id".to_string())
            .chain(registry.codes().map(|c| format!("{prefix}{c}")))
            .collect();
        if headers.iter().ne(expected.iter().map(String::as_str)) {
            return Err(Error::Parse {
                what: "logit file",
                line: 1,
                reason: "columns must be sample_id then one per class in registry order".into(),
            });
        }
        let mut m = LogitMatrix::empty(kind);
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let row = rec
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    what: "logit file",
                    line: i + 2,
                    reason: e.to_string(),
                })?;
            m.sample_ids.push(rec[0].to_string());
            m.values.push(row);
        }
        m.validate()?;
        Ok(m)
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Index of the largest entry; ties go to the lowest index and set the flag.
pub fn argmax(row: &[f64]) -> (usize, bool) {
    let mut best = 0;
    let mut tie = false;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
            tie = false;
        } else if v == row[best] {
            tie = true;
        }
    }
    (best, tie)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prediction {
    pub sample_id: String,
    pub class: usize,
    pub tie: bool,
}

pub fn predict(logits: &LogitMatrix) -> Vec<Prediction> {
    logits
        .sample_ids
        .iter()
        .zip(&logits.values)
        .map(|(id, row)| {
            let (class, tie) = argmax(row);
            Prediction {
                sample_id: id.clone(),
                class,
                tie,
            }
        })
        .collect()
}

/// `sample_id,predicted_class,tie_flag`.
pub fn predictions_to_csv(predictions: &[Prediction], registry: &ClassRegistry) -> String {
    let mut out = String::from("sample_id,predicted_class,tie_flag\n");
    for p in predictions {
        out.push_str(&format!(
            "{},{},{}\n",
            csv_field(&p.sample_id),
            registry.code(p.class),
            u8::from(p.tie)
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    #[default]
    Logits,
    Probabilities,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSpec {
    pub checkpoints: Vec<PathBuf>,
    pub tta_k: usize,
    pub tta_mode: TtaMode,
    pub use_ema: bool,
    pub averaging: Averaging,
    pub seed: u64,
}

impl EnsembleSpec {
    pub fn new(checkpoints: Vec<PathBuf>) -> Self {
        Self {
            checkpoints,
            tta_k: 1,
            tta_mode: TtaMode::Dihedral,
            use_ema: true,
            averaging: Averaging::Logits,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.checkpoints.is_empty() {
            return Err(invalid("ensemble needs at least one checkpoint"));
        }
        if self.tta_k == 0 {
            return Err(invalid("tta.k must be at least 1"));
        }
        Ok(())
    }
}

/// Loads every checkpoint of the ensemble; all must agree on the class count.
pub fn load_models(spec: &EnsembleSpec) -> Result<Vec<Model>> {
    spec.validate()?;
    let models = spec
        .checkpoints
        .iter()
        .map(|p| Checkpoint::load(p)?.to_model(spec.use_ema))
        .collect::<Result<Vec<_>>>()?;
    let classes = models[0].network.spec().num_classes;
    if let Some(m) = models.iter().find(|m| m.network.spec().num_classes != classes) {
        return Err(Error::Shape(format!(
            "{} predicts {} classes, ensemble has {classes}",
            m.network.spec().backbone_id,
            m.network.spec().num_classes
        )));
    }
    Ok(models)
}

/// Mean logits over `tta_k` views of one image.
pub fn tta_logits(model: &Model, image: &Image, tta_k: usize, seed: u64, mode: TtaMode) -> Result<Vec<f64>> {
    let views = tta_views(image, tta_k, seed, mode)?;
    let mut sum = vec![0.0; model.network.spec().num_classes];
    for v in &views {
        for (s, z) in sum.iter_mut().zip(model.network.logits(&model.weights, &v.image)) {
            *s += z;
        }
    }
    Ok(sum.into_iter().map(|s| s / views.len() as f64).collect())
}

/// Per-image TTA-averaged logits. Image `i` uses view seed
/// `derive_seed(seed, "tta", i)`.
pub fn model_logits(model: &Model, images: &[Image], tta_k: usize, seed: u64, mode: TtaMode) -> Result<Vec<Vec<f64>>> {
    images
        .par_iter()
        .enumerate()
        .map(|(i, img)| tta_logits(model, img, tta_k, derive_seed(seed, "tta", i as u64), mode))
        .collect()
}

/// Combines per-model outputs for one image by the chosen averaging.
fn combine(rows: &[Vec<f64>], averaging: Averaging) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut out = vec![0.0; rows[0].len()];
    for r in rows {
        let r = match averaging {
            Averaging::Logits => r.clone(),
            Averaging::Probabilities => softmax(r),
        };
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Ensemble output for one image, each model seeing the same views.
pub fn ensemble_row(models: &[Model], image: &Image, spec: &EnsembleSpec, view_seed: u64) -> Result<Vec<f64>> {
    let rows = models
        .iter()
        .map(|m| tta_logits(m, image, spec.tta_k, view_seed, spec.tta_mode))
        .collect::<Result<Vec<_>>>()?;
    Ok(combine(&rows, spec.averaging))
}

fn kind_for(averaging: Averaging) -> LogitKind {
    match averaging {
        Averaging::Logits => LogitKind::Logit,
        Averaging::Probabilities => LogitKind::Probability,
    }
}

/// Ensemble logits for a batch of images. Views are seeded by the sample id,
/// so a row does not depend on which other images share the batch.
pub fn ensemble_logits(spec: &EnsembleSpec, sample_ids: &[String], images: &[Image]) -> Result<LogitMatrix> {
    let models = load_models(spec)?;
    ensemble_logits_with(&models, spec, sample_ids, images)
}

pub fn ensemble_logits_with(
    models: &[Model],
    spec: &EnsembleSpec,
    sample_ids: &[String],
    images: &[Image],
) -> Result<LogitMatrix> {
    if sample_ids.len() != images.len() {
        return Err(Error::Shape(format!(
            "{} sample ids for {} images",
            sample_ids.len(),
            images.len()
        )));
    }
    if models.is_empty() {
        return Err(invalid("ensemble needs at least one model"));
    }
    let values = sample_ids
        .par_iter()
        .zip(images)
        .map(|(id, img)| ensemble_row(models, img, spec, derive_seed(spec.seed, id, 0)))
        .collect::<Result<Vec<_>>>()?;
    LogitMatrix::new(sample_ids.to_vec(), values, kind_for(spec.averaging))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferOutputs {
    pub logits: PathBuf,
    pub predictions: PathBuf,
    pub failures: PathBuf,
}

impl InferOutputs {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            logits: dir.join("logits.csv"),
            predictions: dir.join("predictions.csv"),
            failures: dir.join("failures.csv"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct InferSummary {
    pub computed: usize,
    pub reused: usize,
    pub failed: Vec<(String, String)>,
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

/// Denoises and scores `indices` of `manifest`, writing the logit,
/// prediction and failure tables. Rows already present in an existing logit
/// file are kept and not recomputed. Sample ids are manifest image paths;
/// all tables are sorted by sample id.
pub fn infer_dataset(
    spec: &EnsembleSpec,
    manifest: &Manifest,
    indices: &[usize],
    denoise: &DenoiseConfig,
    outputs: &InferOutputs,
) -> Result<InferSummary> {
    spec.validate()?;
    denoise.validate()?;
    let registry = manifest.registry();
    let mut done: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let kind = kind_for(spec.averaging);
    if outputs.logits.exists() {
        let previous = LogitMatrix::parse_csv(&std::fs::read_to_string(&outputs.logits)?, registry)?;
        if previous.kind != kind {
            return Err(invalid(format!(
                "{} holds {:?} rows, this run produces {kind:?}",
                outputs.logits.display(),
                previous.kind
            )));
        }
        done.extend(previous.sample_ids.into_iter().zip(previous.values));
    }
    let pending: Vec<&str> = indices
        .iter()
        .map(|&i| manifest.records()[i].image_path.as_str())
        .filter(|id| !done.contains_key(*id))
        .collect();
    let mut summary = InferSummary {
        reused: indices.len() - pending.len(),
        ..InferSummary::default()
    };

    if !pending.is_empty() {
        let models = load_models(spec)?;
        let by_id: BTreeMap<&str, usize> = indices
            .iter()
            .map(|&i| (manifest.records()[i].image_path.as_str(), i))
            .collect();
        let rows: Vec<(String, Result<Vec<f64>>)> = pending
            .par_iter()
            .map(|&id| {
                let record = &manifest.records()[by_id[id]];
                let row = Image::load(&manifest.resolve_path(record))
                    .and_then(|img| adaptive_denoise(&img, denoise))
                    .and_then(|img| ensemble_row(&models, &img, spec, derive_seed(spec.seed, id, 0)));
                (id.to_string(), row)
            })
            .collect();
        for (id, row) in rows {
            match row {
                Ok(v) => {
                    done.insert(id, v);
                    summary.computed += 1;
                }
                Err(e) => summary.failed.push((id, e.to_string())),
            }
        }
    }

    let (ids, values): (Vec<String>, Vec<Vec<f64>>) = done.into_iter().unzip();
    let matrix = LogitMatrix::new(ids, values, kind)?;
    write_atomic(&outputs.logits, &matrix.to_csv(registry))?;
    write_atomic(&outputs.predictions, &predictions_to_csv(&predict(&matrix), registry))?;
    let mut failures = String::from("sample_id,error\n");
    for (id, e) in &summary.failed {
        failures.push_str(&format!("{},{}\n", csv_field(id), csv_field(e)));
    }
    write_atomic(&outputs.failures, &failures)?;

    if summary.failed.len() * 100 > indices.len() {
        return Err(Error::TooManyFailures {
            failed: summary.failed.len(),
            total: indices.len(),
        });
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.0, 1.0, 0.0]), (1, false));
        assert_eq!(argmax(&[0.2, 0.7, 0.7, 0.1]), (1, true));
        assert_eq!(argmax(&[0.7, 0.2, 0.7]), (0, true));
        assert_eq!(argmax(&[0.7, 0.7, 0.9]), (2, false));
    }

    #[test]
    fn logit_file_round_trip() {
        let reg = ClassRegistry::builtin();
        let m = LogitMatrix::new(
            vec!["a/1.png".into(), "b,2.png".into()],
            vec![
                (0..13).map(|i| i as f64 * 0.1 - 0.3).collect(),
                (0..13).map(|i| 1.0 / (i as f64 + 3.0)).collect(),
            ],
            LogitKind::Logit,
        )
        .unwrap();
        let text = m.to_csv(&reg);
        assert!(text.starts_with("sample_id,logit_SNE,logit_LY,"));
        assert!(text.lines().next().unwrap().ends_with(",logit_BA"));
        assert_eq!(LogitMatrix::parse_csv(&text, &reg).unwrap(), m);
        let probs = m.probabilities();
        let back = LogitMatrix::parse_csv(&probs.to_csv(&reg), &reg).unwrap();
        assert_eq!(back.kind, LogitKind::Probability);
    }

    #[test]
    fn rejects_non_finite_and_bad_probabilities() {
        let mut row = vec![0.0; 13];
        row[3] = f64::NAN;
        assert!(LogitMatrix::new(vec!["x".into()], vec![row], LogitKind::Logit).is_err());
        assert!(LogitMatrix::new(vec!["x".into()], vec![vec![0.5; 13]], LogitKind::Probability).is_err());
    }

    #[test]
    fn prediction_file_format() {
        let reg = ClassRegistry::builtin();
        let mut tie = vec![0.0; 13];
        tie[4] = 2.0;
        tie[6] = 2.0;
        let m = LogitMatrix::new(vec!["s".into()], vec![tie], LogitKind::Logit).unwrap();
        let preds = predict(&m);
        assert_eq!(predictions_to_csv(&preds, &reg), "sample_id,predicted_class,tie_flag\ns,EO,1\n");
    }

    #[test]
    fn probability_averaging_stays_normalized() {
        let rows = vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 5.0]];
        let p = combine(&rows, Averaging::Probabilities);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let l = combine(&rows, Averaging::Logits);
        assert_eq!(l, vec![0.0, 1.0, 4.0]);
    }
}
