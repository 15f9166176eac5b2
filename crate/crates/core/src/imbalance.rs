//! Effective-number class weights and the weighted sampling stream.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::manifest::Manifest;

/// Above this β the closed form loses too many digits; sum terms directly.
const SUMMATION_BETA: f64 = 1.0 - 1e-6;

/// `E_n = (1 - β^n) / (1 - β)`, the expected number of distinct samples.
pub fn effective_number(n: u64, beta: f64) -> Result<f64> {
    if n < 1 {
        return Err(invalid("effective number needs n >= 1"));
    }
    if !(0.0..1.0).contains(&beta) {
        return Err(invalid(format!("beta must lie in [0, 1), got {beta}")));
    }
    if beta == 0.0 {
        return Ok(1.0);
    }
    if beta >= SUMMATION_BETA {
        // Kahan-compensated geometric sum.
        let (mut sum, mut comp, mut term) = (0.0f64, 0.0f64, 1.0f64);
        for _ in 0..n {
            let y = term - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
            term *= beta;
        }
        return Ok(sum);
    }
    let beta_pow_n = (n as f64 * beta.ln()).exp();
    Ok((1.0 - beta_pow_n) / (1.0 - beta))
}

/// Sampler settings: the effective-number β and the stream seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub beta: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            beta: 0.9999,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub beta: f64,
    pub counts: Vec<usize>,
    pub effective: Vec<f64>,
    pub weight: Vec<f64>,
}

/// Weights `w_c ∝ 1/E_{n_c}`, normalized so they sum to the number of
/// present classes. Zero-count classes get weight 0.
pub fn compute_class_weights(counts: &[usize], beta: f64) -> Result<ClassWeights> {
    if counts.iter().all(|&n| n == 0) {
        return Err(invalid("class weights need at least one nonzero count"));
    }
    let effective = counts
        .iter()
        .map(|&n| if n == 0 { Ok(0.0) } else { effective_number(n as u64, beta) })
        .collect::<Result<Vec<f64>>>()?;
    let present = counts.iter().filter(|&&n| n > 0).count() as f64;
    let inv_sum: f64 = effective.iter().filter(|&&e| e > 0.0).map(|e| 1.0 / e).sum();
    let weight = effective
        .iter()
        .map(|&e| if e > 0.0 { (1.0 / e) * present / inv_sum } else { 0.0 })
        .collect();
    Ok(ClassWeights {
        beta,
        counts: counts.to_vec(),
        effective,
        weight,
    })
}

/// Infinite, seeded stream of record indices drawn with replacement, each
/// record weighted by its class weight.
#[derive(Debug, Clone)]
pub struct WeightedSampleStream {
    indices: Vec<usize>,
    dist: WeightedIndex<f64>,
    rng: ChaCha8Rng,
}

impl WeightedSampleStream {
    /// The pool of manifest indices this stream draws from.
    pub fn pool(&self) -> &[usize] {
        &self.indices
    }
}

impl Iterator for WeightedSampleStream {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        Some(self.indices[self.dist.sample(&mut self.rng)])
    }
}

/// Builds a stream over the given labeled manifest records.
pub fn weighted_sample_stream(
    manifest: &Manifest,
    record_indices: &[usize],
    weights: &ClassWeights,
    seed: u64,
) -> Result<WeightedSampleStream> {
    if record_indices.is_empty() {
        return Err(invalid("cannot sample from an empty record set"));
    }
    let per_record = record_indices
        .iter()
        .map(|&i| {
            let label = manifest.records()[i]
                .label
                .ok_or_else(|| invalid(format!("record {i} is unlabeled")))?;
            Ok(weights.weight[label])
        })
        .collect::<Result<Vec<f64>>>()?;
    let dist = WeightedIndex::new(&per_record)
        .map_err(|e| invalid(format!("sampler weights: {e}")))?;
    Ok(WeightedSampleStream {
        indices: record_indices.to_vec(),
        dist,
        rng: ChaCha8Rng::seed_from_u64(seed),
    })
}
