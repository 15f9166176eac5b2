//! Confusion matrices and macro-averaged classification metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::registry::ClassRegistry;

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(labels: Vec<String>) -> Self {
        let n = labels.len();
        Self {
            labels,
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn for_registry(registry: &ClassRegistry) -> Self {
        Self::zeros(registry.codes().map(str::to_string).collect())
    }

    pub fn from_indices(labels: Vec<String>, y_true: &[usize], y_pred: &[usize]) -> Result<Self> {
        if y_true.len() != y_pred.len() {
            return Err(Error::Shape(format!(
                "{} true labels vs {} predictions",
                y_true.len(),
                y_pred.len()
            )));
        }
        let mut cm = Self::zeros(labels);
        let n = cm.labels.len();
        for (&t, &p) in y_true.iter().zip(y_pred) {
            if t >= n || p >= n {
                return Err(Error::UnknownLabel(format!("index {}", t.max(p))));
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.counts) {
            out.push_str(l);
            for v in row {
                write!(out, ",{v}").expect("write to string");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let parse_err = |line: usize, reason: String| Error::Parse {
            what: "confusion matrix",
            line,
            reason,
        };
        let header = lines.next().ok_or_else(|| parse_err(1, "empty file".into()))?;
        let labels: Vec<String> = header.split(',').skip(1).map(|s| s.trim().to_string()).collect();
        let mut counts = Vec::new();
        for (i, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != labels.len() + 1 || fields[0] != labels[counts.len().min(labels.len() - 1)] {
                return Err(parse_err(i + 2, "row label or width does not match header".into()));
            }
            let row = fields[1..]
                .iter()
                .map(|f| f.parse::<u64>().map_err(|e| parse_err(i + 2, e.to_string())))
                .collect::<Result<Vec<u64>>>()?;
            counts.push(row);
        }
        if counts.len() != labels.len() {
            return Err(parse_err(1, "matrix is not square".into()));
        }
        Ok(Self { labels, counts })
    }
}

/// Confusion matrix from class codes.
pub fn confusion_matrix(
    y_true: &[&str],
    y_pred: &[&str],
    registry: &ClassRegistry,
) -> Result<ConfusionMatrix> {
    let t = y_true
        .iter()
        .map(|c| registry.require_index(c))
        .collect::<Result<Vec<_>>>()?;
    let p = y_pred
        .iter()
        .map(|c| registry.require_index(c))
        .collect::<Result<Vec<_>>>()?;
    ConfusionMatrix::from_indices(registry.codes().map(str::to_string).collect(), &t, &p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    pub support: u64,
    pub included: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub macro_f1: f64,
    pub balanced_accuracy: f64,
    pub macro_precision: f64,
    pub macro_sensitivity: f64,
    pub macro_specificity: f64,
    pub accuracy: f64,
    pub samples: u64,
    pub excluded: Vec<String>,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class and macro metrics. Classes with zero support, plus any listed
/// in `exclusion`, are left out of the macro means. A zero denominator on an
/// included class scores 0.
pub fn compute_metrics(cm: &ConfusionMatrix, exclusion: &[usize]) -> Result<MetricReport> {
    let n = cm.num_classes();
    let total = cm.total();
    if n == 0 || total == 0 {
        return Err(invalid("cannot compute metrics on an empty confusion matrix"));
    }
    let mut per_class = Vec::with_capacity(n);
    for c in 0..n {
        let tp = cm.counts[c][c];
        let support = cm.support(c);
        let predicted: u64 = (0..n).map(|r| cm.counts[r][c]).sum();
        let fp = predicted - tp;
        let fn_ = support - tp;
        let tn = total - tp - fp - fn_;
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics {
            label: cm.labels[c].clone(),
            precision,
            recall,
            f1,
            specificity: ratio(tn, tn + fp),
            support,
            included: support > 0 && !exclusion.contains(&c),
        });
    }
    let included: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.included).collect();
    if included.is_empty() {
        return Err(invalid("every class is excluded from macro averaging"));
    }
    let mean = |f: fn(&ClassMetrics) -> f64| {
        included.iter().map(|m| f(m)).sum::<f64>() / included.len() as f64
    };
    let macro_sensitivity = mean(|m| m.recall);
    Ok(MetricReport {
        macro_f1: mean(|m| m.f1),
        balanced_accuracy: macro_sensitivity,
        macro_precision: mean(|m| m.precision),
        macro_sensitivity,
        macro_specificity: mean(|m| m.specificity),
        accuracy: cm.trace() as f64 / total as f64,
        samples: total,
        excluded: per_class
            .iter()
            .filter(|m| !m.included)
            .map(|m| m.label.clone())
            .collect(),
        per_class,
    })
}

impl MetricReport {
    /// Key-value block followed by a per-class table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in [
            ("macro_f1", self.macro_f1),
            ("balanced_accuracy", self.balanced_accuracy),
            ("macro_precision", self.macro_precision),
            ("macro_sensitivity", self.macro_sensitivity),
            ("macro_specificity", self.macro_specificity),
            ("accuracy", self.accuracy),
        ] {
            writeln!(out, "{k} = {v}").expect("write to string");
        }
        writeln!(out, "samples = {}", self.samples).expect("write to string");
        writeln!(out, "excluded = {}", self.excluded.join(",")).expect("write to string");
        out.push_str("\n[per_class]\nclass,precision,recall,f1,specificity,support,included\n");
        for m in &self.per_class {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                m.label, m.precision, m.recall, m.f1, m.specificity, m.support, m.included
            )
            .expect("write to string");
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let err = |line: usize, reason: &str| Error::Parse {
            what: "metric report",
            line,
            reason: reason.to_string(),
        };
        let mut kv = std::collections::BTreeMap::new();
        let mut per_class = Vec::new();
        let mut in_table = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if line == "[per_class]" {
                in_table = true;
                continue;
            }
            if in_table {
                if line.starts_with("class,") {
                    continue;
                }
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 7 {
                    return Err(err(i + 1, "expected 7 fields"));
                }
                let num = |s: &str| s.parse::<f64>().map_err(|_| err(i + 1, "bad number"));
                per_class.push(ClassMetrics {
                    label: f[0].to_string(),
                    precision: num(f[1])?,
                    recall: num(f[2])?,
                    f1: num(f[3])?,
                    specificity: num(f[4])?,
                    support: f[5].parse().map_err(|_| err(i + 1, "bad support"))?,
                    included: f[6] == "true",
                });
            } else {
                let (k, v) = line.split_once('=').ok_or_else(|| err(i + 1, "expected key = value"))?;
                kv.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let get = |k: &str| -> Result<f64> {
            kv.get(k)
                .ok_or_else(|| err(0, "missing key"))?
                .parse()
                .map_err(|_| err(0, "bad number"))
        };
        Ok(Self {
            macro_f1: get("macro_f1")?,
            balanced_accuracy: get("balanced_accuracy")?,
            macro_precision: get("macro_precision")?,
            macro_sensitivity: get("macro_sensitivity")?,
            macro_specificity: get("macro_specificity")?,
            accuracy: get("accuracy")?,
            samples: get("samples")? as u64,
            excluded: kv
                .get("excluded")
                .map(|s| s.split(',').filter(|x| !x.is_empty()).map(str::to_string).collect())
                .unwrap_or_default(),
            per_class,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("C{i}")).collect()
    }

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 2, 1];
        let cm = ConfusionMatrix::from_indices(labels(3), &y, &y).unwrap();
        assert!(cm.counts.iter().enumerate().all(|(i, r)| r.iter().enumerate().all(|(j, &v)| i == j || v == 0)));
        let r = compute_metrics(&cm, &[]).unwrap();
        for v in [r.macro_f1, r.balanced_accuracy, r.macro_precision, r.macro_specificity, r.accuracy] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn single_off_diagonal() {
        let reg = ClassRegistry::builtin();
        let cm = confusion_matrix(&["SNE"], &["LY"], &reg).unwrap();
        assert_eq!(cm.counts[0][1], 1);
        assert_eq!(cm.total(), 1);
        assert!(matches!(confusion_matrix(&["XX"], &["LY"], &reg), Err(Error::UnknownLabel(_))));
    }

    #[test]
    fn two_class_reference() {
        let cm = ConfusionMatrix {
            labels: labels(2),
            counts: vec![vec![8, 2], vec![3, 7]],
        };
        let r = compute_metrics(&cm, &[]).unwrap();
        let f1 = |p: f64, r: f64| 2.0 * p * r / (p + r);
        let expected = 0.5 * (f1(8.0 / 11.0, 0.8) + f1(7.0 / 9.0, 0.7));
        assert!((r.macro_f1 - expected).abs() < 1e-12);
        assert!((r.macro_f1 - 0.749_373_4).abs() < 1e-7);
    }

    #[test]
    fn constant_predictor_balanced_accuracy() {
        let cm = ConfusionMatrix {
            labels: labels(2),
            counts: vec![vec![50, 0], vec![50, 0]],
        };
        let r = compute_metrics(&cm, &[]).unwrap();
        assert_eq!(r.balanced_accuracy, 0.5);
        // Class 1 has support but no predictions: precision 0 by convention.
        assert_eq!(r.per_class[1].precision, 0.0);
    }

    #[test]
    fn zero_support_classes_are_excluded() {
        let cm = ConfusionMatrix::from_indices(labels(3), &[0, 1], &[0, 2]).unwrap();
        let r = compute_metrics(&cm, &[]).unwrap();
        assert_eq!(r.excluded, vec!["C2".to_string()]);
        assert_eq!(r.balanced_accuracy, 0.5);
        let r = compute_metrics(&cm, &[1]).unwrap();
        assert_eq!(r.excluded.len(), 2);
    }

    #[test]
    fn empty_matrix_is_an_error() {
        assert!(compute_metrics(&ConfusionMatrix::zeros(labels(2)), &[]).is_err());
    }

    #[test]
    fn text_formats_round_trip() {
        let cm = ConfusionMatrix::from_indices(labels(3), &[0, 1, 2, 2], &[0, 2, 2, 1]).unwrap();
        assert_eq!(ConfusionMatrix::parse_csv(&cm.to_csv()).unwrap(), cm);
        let r = compute_metrics(&cm, &[]).unwrap();
        assert_eq!(MetricReport::parse_text(&r.to_text()).unwrap(), r);
    }
}
