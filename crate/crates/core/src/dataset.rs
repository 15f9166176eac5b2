use rayon::prelude::*;

use crate::denoise::{adaptive_denoise, DenoiseConfig};
use crate::error::Result;
use crate::image::Image;
use crate::manifest::Manifest;

/// Loads and adaptively denoises the given manifest records, in order.
pub fn load_denoised(
    manifest: &Manifest,
    indices: &[usize],
    denoise: &DenoiseConfig,
) -> Result<Vec<Image>> {
    indices
        .par_iter()
        .map(|&i| {
            let path = manifest.resolve_path(&manifest.records()[i]);
            adaptive_denoise(&Image::load(&path)?, denoise)
        })
        .collect()
}

/// Splitmix64 finalizer over a base seed and a tag; used to derive
/// independent per-component seeds.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut h = base ^ 0x9E37_79B9_7F4A_7C15;
    for b in tag.bytes().chain(index.to_le_bytes()) {
        h = (h ^ u64::from(b)).wrapping_mul(0x100_0000_01B3);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^ (h >> 31)
}
