//! Confident-learning detection of likely label errors.

use crate::error::{invalid, Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::registry::{ClassRegistry, Lineage};

/// Default upper bound on the given label's probability for an issue.
pub const DEFAULT_SELF_CONFIDENCE_CUTOFF: f64 = 0.1;

fn check_inputs(probs: &[Vec<f64>], labels: &[usize]) -> Result<usize> {
    if probs.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} probability rows for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let classes = probs.first().map_or(0, Vec::len);
    for (i, (row, &l)) in probs.iter().zip(labels).enumerate() {
        if row.len() != classes {
            return Err(Error::Shape(format!("row {i} has {} columns, expected {classes}", row.len())));
        }
        if (row.iter().sum::<f64>() - 1.0).abs() > 1e-4 {
            return Err(invalid(format!("row {i} does not sum to 1")));
        }
        if l >= classes {
            return Err(invalid(format!("row {i}: label {l} out of range")));
        }
    }
    Ok(classes)
}

/// Per-class mean probability of class `j` among samples labeled `j`.
/// Classes without samples get `+inf`, so nothing is confidently assigned
/// to them.
pub fn class_thresholds(probs: &[Vec<f64>], labels: &[usize]) -> Result<Vec<f64>> {
    let c = check_inputs(probs, labels)?;
    let mut sum = vec![0.0; c];
    let mut n = vec![0usize; c];
    for (row, &l) in probs.iter().zip(labels) {
        sum[l] += row[l];
        n[l] += 1;
    }
    Ok(sum
        .iter()
        .zip(&n)
        .map(|(&s, &k)| if k == 0 { f64::INFINITY } else { s / k as f64 })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidentJoint {
    /// Rows: given label, columns: confidently predicted label.
    pub counts: Vec<Vec<u64>>,
    pub thresholds: Vec<f64>,
    /// Per-sample confident class, `None` if no class cleared its threshold.
    pub assignments: Vec<Option<usize>>,
}

impl ConfidentJoint {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Counts divided by the number of samples.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        let n = self.assignments.len().max(1) as f64;
        self.counts
            .iter()
            .map(|r| r.iter().map(|&v| v as f64 / n).collect())
            .collect()
    }
}

/// The most probable class among those at or above their threshold;
/// ties go to the lower index.
fn confident_class(row: &[f64], thresholds: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (j, (&p, &t)) in row.iter().zip(thresholds).enumerate() {
        if p >= t && best.is_none_or(|b| p > row[b]) {
            best = Some(j);
        }
    }
    best
}

pub fn confident_joint(probs: &[Vec<f64>], labels: &[usize], thresholds: &[f64]) -> Result<ConfidentJoint> {
    let c = check_inputs(probs, labels)?;
    if thresholds.len() != c {
        return Err(Error::Shape(format!("{} thresholds for {c} classes", thresholds.len())));
    }
    let mut counts = vec![vec![0u64; c]; c];
    let assignments: Vec<Option<usize>> = probs
        .iter()
        .zip(labels)
        .map(|(row, &l)| {
            let j = confident_class(row, thresholds);
            if let Some(j) = j {
                counts[l][j] += 1;
            }
            j
        })
        .collect();
    Ok(ConfidentJoint {
        counts,
        thresholds: thresholds.to_vec(),
        assignments,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelIssue {
    pub sample_id: String,
    pub given_label: usize,
    pub suggested_label: usize,
    /// Predicted probability of the given label.
    pub self_confidence: f64,
}

/// Samples that land off the diagonal of the confident joint and whose
/// given-label probability is below `cutoff` (if any), lowest
/// self-confidence first.
pub fn find_label_issues(
    sample_ids: &[String],
    probs: &[Vec<f64>],
    labels: &[usize],
    cutoff: Option<f64>,
) -> Result<Vec<LabelIssue>> {
    if sample_ids.len() != probs.len() {
        return Err(Error::Shape(format!(
            "{} sample ids for {} rows",
            sample_ids.len(),
            probs.len()
        )));
    }
    let thresholds = class_thresholds(probs, labels)?;
    let joint = confident_joint(probs, labels, &thresholds)?;
    let mut issues: Vec<LabelIssue> = joint
        .assignments
        .iter()
        .enumerate()
        .filter_map(|(i, a)| {
            let j = (*a)?;
            let given = labels[i];
            let conf = probs[i][given];
            (j != given && cutoff.is_none_or(|c| conf < c)).then(|| LabelIssue {
                sample_id: sample_ids[i].clone(),
                given_label: given,
                suggested_label: j,
                self_confidence: conf,
            })
        })
        .collect();
    issues.sort_by(|a, b| {
        a.self_confidence
            .total_cmp(&b.self_confidence)
            .then_with(|| a.sample_id.cmp(&b.sample_id))
    });
    Ok(issues)
}

/// Given label × suggested label counts over the issues.
pub fn misclassification_matrix(issues: &[LabelIssue], registry: &ClassRegistry) -> Result<ConfusionMatrix> {
    let given: Vec<usize> = issues.iter().map(|i| i.given_label).collect();
    let suggested: Vec<usize> = issues.iter().map(|i| i.suggested_label).collect();
    ConfusionMatrix::from_indices(registry.codes().map(str::to_string).collect(), &given, &suggested)
}

/// Lineage blocks of the registry as contiguous-or-not index groups.
pub fn lineage_blocks(registry: &ClassRegistry) -> Vec<(Lineage, Vec<usize>)> {
    registry.lineage_groups()
}

/// Issues that stay within one lineage, per lineage.
pub fn within_lineage_counts(issues: &[LabelIssue], registry: &ClassRegistry) -> Vec<(Lineage, usize)> {
    registry
        .lineage_groups()
        .into_iter()
        .map(|(lineage, members)| {
            let n = issues
                .iter()
                .filter(|i| members.contains(&i.given_label) && members.contains(&i.suggested_label))
                .count();
            (lineage, n)
        })
        .collect()
}

/// `sample_id,given_label,suggested_label,self_confidence`.
pub fn issues_to_csv(issues: &[LabelIssue], registry: &ClassRegistry) -> String {
    let mut out = String::from("sample_id,given_label,suggested_label,self_confidence\n");
    for i in issues {
        let id = if i.sample_id.contains([',', '"']) {
            format!("\"{}\"", i.sample_id.replace('"', "\"\""))
        } else {
            i.sample_id.clone()
        };
        out.push_str(&format!(
            "{id},{},{},{}\n",
            registry.code(i.given_label),
            registry.code(i.suggested_label),
            i.self_confidence
        ));
    }
    out
}

pub fn parse_issues_csv(text: &str, registry: &ClassRegistry) -> Result<Vec<LabelIssue>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    if header.iter().ne(["sample_id", "given_label", "suggested_label", "self_confidence"]) {
        return Err(Error::Parse {
            what: "issues file",
            line: 1,
            reason: "unexpected header".into(),
        });
    }
    reader
        .records()
        .enumerate()
        .map(|(n, rec)| {
            let rec = rec?;
            Ok(LabelIssue {
                sample_id: rec[0].to_string(),
                given_label: registry.require_index(&rec[1])?,
                suggested_label: registry.require_index(&rec[2])?,
                self_confidence: rec[3].parse().map_err(|e: std::num::ParseFloatError| Error::Parse {
                    what: "issues file",
                    line: n + 2,
                    reason: e.to_string(),
                })?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:03}")).collect()
    }

    #[test]
    fn thresholds_are_group_means() {
        let probs = vec![vec![0.9, 0.1], vec![0.9, 0.1], vec![0.3, 0.7]];
        let t = class_thresholds(&probs, &[0, 0, 1]).unwrap();
        assert!((t[0] - 0.9).abs() < 1e-12);
        assert!((t[1] - 0.7).abs() < 1e-12);
        let t = class_thresholds(&probs[..2], &[0, 0]).unwrap();
        assert_eq!(t[1], f64::INFINITY);
    }

    #[test]
    fn confident_correct_predictor_gives_diagonal() {
        let labels = [0, 1, 2, 1];
        let probs: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| (0..3).map(|j| if j == l { 1.0 } else { 0.0 }).collect())
            .collect();
        let t = class_thresholds(&probs, &labels).unwrap();
        let j = confident_joint(&probs, &labels, &t).unwrap();
        assert_eq!(j.total(), 4);
        assert_eq!(j.counts, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
        assert!(find_label_issues(&ids(4), &probs, &labels, None).unwrap().is_empty());
    }

    #[test]
    fn off_diagonal_contribution() {
        let probs = vec![vec![0.05, 0.95], vec![0.1, 0.9]];
        let j = confident_joint(&probs, &[0, 1], &[0.5, 0.9]).unwrap();
        assert_eq!(j.counts[0][1], 1);
        assert_eq!(j.counts[1][1], 1);
    }

    #[test]
    fn issues_ranked_by_self_confidence() {
        let probs = vec![
            vec![0.98, 0.02],
            vec![0.30, 0.70],
            vec![0.01, 0.99],
            vec![0.99, 0.01],
            vec![0.02, 0.98],
        ];
        let labels = [0, 0, 0, 1, 1];
        let issues = find_label_issues(&ids(5), &probs, &labels, None).unwrap();
        let order: Vec<&str> = issues.iter().map(|i| i.sample_id.as_str()).collect();
        assert_eq!(order, ["s002", "s003", "s001"]);
        let strict = find_label_issues(&ids(5), &probs, &labels, Some(0.1)).unwrap();
        assert_eq!(strict.len(), 2);
        assert!(strict.iter().all(|i| i.given_label != i.suggested_label));
    }

    #[test]
    fn misclassification_matrix_counts_issues() {
        let reg = ClassRegistry::builtin();
        assert_eq!(misclassification_matrix(&[], &reg).unwrap().total(), 0);
        let issue = LabelIssue {
            sample_id: "x".into(),
            given_label: 2,
            suggested_label: 5,
            self_confidence: 0.01,
        };
        let m = misclassification_matrix(&[issue.clone(), issue.clone()], &reg).unwrap();
        assert_eq!(m.counts[2][5], 2);
        assert_eq!(m.total(), 2);
        let text = issues_to_csv(&[issue.clone()], &reg);
        assert_eq!(parse_issues_csv(&text, &reg).unwrap(), vec![issue]);
    }

    #[test]
    fn rejects_unnormalized_rows() {
        assert!(class_thresholds(&[vec![0.5, 0.6]], &[0]).is_err());
    }
}
