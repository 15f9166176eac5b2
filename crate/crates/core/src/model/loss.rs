//! α-balanced focal loss over soft targets.
//!
//! Per sample: `Σ_c t_c · α · (1 - p_c)^γ · (-log p_c)` with `p = softmax(z)`;
//! the batch loss is the mean. One-hot targets reduce this to the usual
//! focal loss, and `γ = 0, α = 1` to cross-entropy.

use crate::error::{invalid, Error, Result};

const TARGET_SUM_TOLERANCE: f64 = 1e-4;

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|&v| v - lse).collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    log_softmax(z).into_iter().map(f64::exp).collect()
}

fn check(logits: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<()> {
    if logits.is_empty() || logits.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} logit rows vs {} target rows",
            logits.len(),
            targets.len()
        )));
    }
    for (b, (z, t)) in logits.iter().zip(targets).enumerate() {
        if z.len() != t.len() {
            return Err(Error::Shape(format!("row {b}: {} logits vs {} targets", z.len(), t.len())));
        }
        let sum: f64 = t.iter().sum();
        if (sum - 1.0).abs() > TARGET_SUM_TOLERANCE || t.iter().any(|&v| v < 0.0) {
            return Err(invalid(format!("target row {b} is not a distribution (sums to {sum})")));
        }
    }
    Ok(())
}

/// Batch-mean focal loss and its gradient with respect to the logits.
pub fn focal_loss_with_grad(
    logits: &[Vec<f64>],
    targets: &[Vec<f64>],
    alpha: f64,
    gamma: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    check(logits, targets)?;
    let batch = logits.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (z, t) in logits.iter().zip(targets) {
        let logp = log_softmax(z);
        let p: Vec<f64> = logp.iter().map(|&l| l.exp()).collect();
        // g_c = p_c · d/dp_c [α (1-p_c)^γ (-log p_c)]
        let mut g = vec![0.0; z.len()];
        for c in 0..z.len() {
            if t[c] == 0.0 {
                continue;
            }
            let one_minus = -logp[c].exp_m1();
            let modulator = one_minus.powf(gamma);
            total += t[c] * alpha * modulator * (-logp[c]);
            let focus_term = if gamma == 0.0 || one_minus == 0.0 {
                0.0
            } else {
                gamma * one_minus.powf(gamma - 1.0) * p[c] * logp[c]
            };
            g[c] = alpha * (focus_term - modulator);
        }
        let tg: f64 = t.iter().zip(&g).map(|(a, b)| a * b).sum();
        grads.push(
            (0..z.len())
                .map(|k| (t[k] * g[k] - p[k] * tg) / batch)
                .collect(),
        );
    }
    Ok((total / batch, grads))
}

pub fn focal_loss(logits: &[Vec<f64>], targets: &[Vec<f64>], alpha: f64, gamma: f64) -> Result<f64> {
    focal_loss_with_grad(logits, targets, alpha, gamma).map(|(l, _)| l)
}

/// Batch-mean cross-entropy for soft targets.
pub fn cross_entropy(logits: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    check(logits, targets)?;
    let total: f64 = logits
        .iter()
        .zip(targets)
        .map(|(z, t)| {
            log_softmax(z)
                .iter()
                .zip(t)
                .map(|(l, w)| -w * l)
                .sum::<f64>()
        })
        .sum();
    Ok(total / logits.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(c: usize, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[c] = 1.0;
        v
    }

    #[test]
    fn collapses_to_cross_entropy() {
        let logits = vec![vec![0.3, -1.0, 2.0, 0.1], vec![-0.5, 0.5, 0.0, 1.5]];
        let targets = vec![one_hot(2, 4), one_hot(0, 4)];
        let fl = focal_loss(&logits, &targets, 1.0, 0.0).unwrap();
        let ce = cross_entropy(&logits, &targets).unwrap();
        assert!((fl - ce).abs() < 1e-12);
    }

    #[test]
    fn certain_prediction_has_zero_loss() {
        // p_true = 1 in floating point.
        let logits = vec![vec![1000.0, 0.0, 0.0]];
        assert_eq!(focal_loss(&logits, &[one_hot(0, 3)], 0.25, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn half_probability_reference_value() {
        let logits = vec![vec![0.0, 0.0]];
        let loss = focal_loss(&logits, &[one_hot(1, 2)], 0.25, 2.0).unwrap();
        assert!((loss - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((loss - 0.0433217).abs() < 1e-6);
    }

    #[test]
    fn rejects_unnormalized_targets() {
        let logits = vec![vec![0.0, 1.0]];
        assert!(focal_loss(&logits, &[vec![0.6, 0.6]], 0.25, 2.0).is_err());
        assert!(focal_loss(&logits, &[vec![1.0]], 0.25, 2.0).is_err());
    }

    #[test]
    fn well_classified_examples_are_downweighted() {
        // p_t = 0.9 for a two-class problem: logit gap ln 9.
        let logits = vec![vec![9f64.ln(), 0.0]];
        let t = [one_hot(0, 2)];
        let ratio = focal_loss(&logits, &t, 1.0, 2.0).unwrap() / cross_entropy(&logits, &t).unwrap();
        assert!((ratio - 0.01).abs() < 1e-12);
    }
}
