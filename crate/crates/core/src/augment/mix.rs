use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::AugmentConfig;
use crate::error::{invalid, Error, Result};
use crate::image::Image;

/// Images with soft-label target rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Vec<Image>,
    pub targets: Vec<Vec<f64>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixMode {
    None,
    Mixup,
    Cutmix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch {
    pub images: Vec<Image>,
    pub targets: Vec<Vec<f64>>,
    pub lambda: f64,
    pub mode: MixMode,
}

impl MixedBatch {
    fn unmixed(batch: Batch) -> Self {
        Self {
            images: batch.images,
            targets: batch.targets,
            lambda: 1.0,
            mode: MixMode::None,
        }
    }
}

/// Half-open pixel box `[y0, y1) × [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutBox {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl CutBox {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }
}

fn check_batch(batch: &Batch) -> Result<()> {
    if batch.len() < 2 {
        return Err(invalid(format!("batch mixing needs at least 2 images, got {}", batch.len())));
    }
    if batch.targets.len() != batch.len() {
        return Err(Error::Shape("one target row per image required".into()));
    }
    let shape = batch.images[0].shape();
    if batch.images.iter().any(|i| i.shape() != shape) {
        return Err(Error::Shape("batch images differ in shape".into()));
    }
    Ok(())
}

fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    let beta = Beta::new(alpha, alpha).map_err(|e| invalid(format!("mix alpha {alpha}: {e}")))?;
    Ok(beta.sample(rng))
}

fn random_permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm
}

fn mix_targets(targets: &[Vec<f64>], lambda: f64, perm: &[usize]) -> Vec<Vec<f64>> {
    targets
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .zip(&targets[perm[i]])
                .map(|(&a, &b)| lambda * a + (1.0 - lambda) * b)
                .collect()
        })
        .collect()
}

/// Mixup with `λ ~ Beta(α, α)` and a random partner permutation.
pub fn mixup<R: Rng + ?Sized>(batch: Batch, alpha: f64, rng: &mut R) -> Result<MixedBatch> {
    check_batch(&batch)?;
    let lambda = sample_lambda(alpha, rng)?;
    let perm = random_permutation(batch.len(), rng);
    mixup_with(batch, lambda, &perm)
}

/// `x̃_i = λ·x_i + (1-λ)·x_{π(i)}`, targets mixed with the same `λ`.
pub fn mixup_with(batch: Batch, lambda: f64, perm: &[usize]) -> Result<MixedBatch> {
    check_batch(&batch)?;
    if !(0.0..=1.0).contains(&lambda) || perm.len() != batch.len() {
        return Err(invalid("mixup needs lambda in [0, 1] and a full permutation"));
    }
    let lam = lambda as f32;
    let images = batch
        .images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let partner = &batch.images[perm[i]];
            let mut out = img.clone();
            for (v, &p) in out.data_mut().iter_mut().zip(partner.data()) {
                *v = lam * *v + (1.0 - lam) * p;
            }
            out
        })
        .collect();
    Ok(MixedBatch {
        images,
        targets: mix_targets(&batch.targets, lambda, perm),
        lambda,
        mode: MixMode::Mixup,
    })
}

/// Cutmix: a box of area ratio about `1-λ` at a uniform center, clipped to
/// the image, is pasted from the partner; `λ` is then recomputed from the
/// clipped box.
pub fn cutmix<R: Rng + ?Sized>(batch: Batch, alpha: f64, rng: &mut R) -> Result<MixedBatch> {
    check_batch(&batch)?;
    let (h, w, _) = batch.images[0].shape();
    let lambda = sample_lambda(alpha, rng)?;
    let cut = (1.0 - lambda).sqrt();
    let cut_h = (h as f64 * cut) as usize;
    let cut_w = (w as f64 * cut) as usize;
    let cy = rng.random_range(0..h);
    let cx = rng.random_range(0..w);
    let bx = CutBox {
        y0: cy.saturating_sub(cut_h / 2),
        y1: (cy + cut_h / 2).min(h),
        x0: cx.saturating_sub(cut_w / 2),
        x1: (cx + cut_w / 2).min(w),
    };
    let perm = random_permutation(batch.len(), rng);
    cutmix_with_box(batch, bx, &perm)
}

pub fn cutmix_with_box(batch: Batch, bx: CutBox, perm: &[usize]) -> Result<MixedBatch> {
    check_batch(&batch)?;
    let (h, w, c) = batch.images[0].shape();
    if bx.y0 > bx.y1 || bx.x0 > bx.x1 || bx.y1 > h || bx.x1 > w || perm.len() != batch.len() {
        return Err(invalid("cutmix box must lie inside the image"));
    }
    let images = batch
        .images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let partner = &batch.images[perm[i]];
            let mut out = img.clone();
            for y in bx.y0..bx.y1 {
                for x in bx.x0..bx.x1 {
                    for ch in 0..c {
                        out.set(y, x, ch, partner.get(y, x, ch));
                    }
                }
            }
            out
        })
        .collect();
    let lambda = 1.0 - bx.area() as f64 / (h * w) as f64;
    Ok(MixedBatch {
        images,
        targets: mix_targets(&batch.targets, lambda, perm),
        lambda,
        mode: MixMode::Cutmix,
    })
}

/// Cutmix with probability `mix_prob`; otherwise mixup with probability
/// `mix_prob`; otherwise unchanged. Batches of one pass through.
pub fn apply_batch_mixing<R: Rng + ?Sized>(
    batch: Batch,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<MixedBatch> {
    if batch.len() < 2 {
        return Ok(MixedBatch::unmixed(batch));
    }
    if rng.random_bool(config.mix_prob) {
        return cutmix(batch, config.mix_alpha, rng);
    }
    if rng.random_bool(config.mix_prob) {
        return mixup(batch, config.mix_alpha, rng);
    }
    Ok(MixedBatch::unmixed(batch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_hot(c: usize, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[c] = 1.0;
        v
    }

    fn batch(values: &[f32], h: usize, w: usize) -> Batch {
        Batch {
            images: values.iter().map(|&v| Image::filled(h, w, 3, v)).collect(),
            targets: (0..values.len()).map(|i| one_hot(i % 4, 4)).collect(),
        }
    }

    fn patterned_batch(n: usize) -> Batch {
        Batch {
            images: (0..n)
                .map(|i| Image::from_fn(6, 5, 1, |y, x, _| (i * 50 + y * 5 + x) as f32))
                .collect(),
            targets: (0..n).map(|i| one_hot(i % 3, 3)).collect(),
        }
    }

    #[test]
    fn mixup_lambda_one_is_identity() {
        let b = patterned_batch(4);
        let out = mixup_with(b.clone(), 1.0, &[1, 2, 3, 0]).unwrap();
        assert_eq!(out.images, b.images);
        assert_eq!(out.targets, b.targets);
    }

    #[test]
    fn mixup_half_of_constants() {
        let out = mixup_with(batch(&[0.0, 100.0], 3, 3), 0.5, &[1, 0]).unwrap();
        assert!(out.images[0].data().iter().all(|&v| v == 50.0));
        assert_eq!(out.targets[0], vec![0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn batch_of_one_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(mixup(batch(&[1.0], 2, 2), 1.0, &mut rng).is_err());
        assert!(cutmix(batch(&[1.0], 2, 2), 1.0, &mut rng).is_err());
    }

    #[test]
    fn zero_area_box_leaves_batch_unchanged() {
        let b = patterned_batch(3);
        let bx = CutBox { y0: 2, y1: 2, x0: 1, x1: 4 };
        let out = cutmix_with_box(b.clone(), bx, &[2, 0, 1]).unwrap();
        assert_eq!(out.lambda, 1.0);
        assert_eq!(out.images, b.images);
        assert_eq!(out.targets, b.targets);
    }

    #[test]
    fn full_box_swaps_images() {
        let b = patterned_batch(3);
        let bx = CutBox { y0: 0, y1: 6, x0: 0, x1: 5 };
        let perm = [2, 0, 1];
        let out = cutmix_with_box(b.clone(), bx, &perm).unwrap();
        assert_eq!(out.lambda, 0.0);
        for i in 0..3 {
            assert_eq!(out.images[i], b.images[perm[i]]);
            assert_eq!(out.targets[i], b.targets[perm[i]]);
        }
    }

    #[test]
    fn cutmix_lambda_counts_pasted_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let total = (11 * 13) as f64;
        let mut checked = 0;
        for _ in 0..200 {
            let out = cutmix(batch(&[0.0, 200.0], 11, 13), 1.0, &mut rng).unwrap();
            let pasted = out.images[0].data().iter().step_by(3).filter(|&&v| v != 0.0).count();
            // With the identity permutation pastes are invisible; skip those draws.
            if pasted == 0 && out.lambda < 1.0 {
                continue;
            }
            assert_eq!(out.lambda, 1.0 - pasted as f64 / total);
            checked += 1;
        }
        assert!(checked > 50);
    }

    #[test]
    fn target_rows_sum_to_one() {
        let cfg = AugmentConfig {
            mix_prob: 0.5,
            ..AugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let out = apply_batch_mixing(patterned_batch(4), &cfg, &mut rng).unwrap();
            for row in &out.targets {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(row.iter().filter(|&&v| v > 0.0).count() <= 2);
            }
        }
    }

    #[test]
    fn mixing_probability_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let never = AugmentConfig {
            mix_prob: 0.0,
            ..AugmentConfig::default()
        };
        let always = AugmentConfig {
            mix_prob: 1.0,
            ..AugmentConfig::default()
        };
        for _ in 0..100 {
            let b = patterned_batch(2);
            assert_eq!(apply_batch_mixing(b.clone(), &never, &mut rng).unwrap().mode, MixMode::None);
            assert_ne!(apply_batch_mixing(b, &always, &mut rng).unwrap().mode, MixMode::None);
        }
    }

    #[test]
    fn cutmix_frequency_matches_probability() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 10_000;
        let mut cut = 0;
        let mut mix = 0;
        for _ in 0..n {
            match apply_batch_mixing(batch(&[0.0, 1.0], 2, 2), &cfg, &mut rng).unwrap().mode {
                MixMode::Cutmix => cut += 1,
                MixMode::Mixup => mix += 1,
                MixMode::None => {}
            }
        }
        assert!((cut as f64 / n as f64 - 0.15).abs() < 0.01, "{cut}");
        // Mixup fires on the 85% of batches left over.
        assert!((mix as f64 / n as f64 - 0.85 * 0.15).abs() < 0.01, "{mix}");
    }
}
