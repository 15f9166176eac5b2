//! Deterministic stratified k-fold assignment.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::manifest::Manifest;

/// Assigns every labeled record a fold in `[0, k)`.
///
/// Records of each class are shuffled with a seeded generator and dealt
/// round-robin, so per-class fold sizes differ by at most one. The dealing
/// start rotates across classes to keep total fold sizes balanced as well.
/// Classes with fewer than `k` records simply leave some folds without them.
pub fn assign_stratified_folds(manifest: &Manifest, k: usize, seed: u64) -> Result<Manifest> {
    if k < 2 {
        return Err(invalid(format!("fold count must be at least 2, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); manifest.registry().len()];
    for (i, r) in manifest.records().iter().enumerate() {
        if let Some(l) = r.label {
            by_class[l].push(i);
        }
    }

    let mut folds = vec![None; manifest.len()];
    let mut start = 0usize;
    for members in &mut by_class {
        members.shuffle(&mut rng);
        for (j, &idx) in members.iter().enumerate() {
            folds[idx] = Some((start + j) % k);
        }
        start = (start + members.len()) % k;
    }

    let mut out = manifest.clone();
    out.set_folds(folds);
    out.provenance
        .push(format!("stratified folds: k={k} seed={seed}"));
    Ok(out)
}
