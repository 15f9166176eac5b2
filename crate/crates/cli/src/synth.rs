//! Desk-scale synthetic dataset: coloured blobs on a stained background.

use std::path::{Path, PathBuf};

use hemoforge_core::image::Image;
use hemoforge_core::manifest::{Manifest, SampleRecord, Source};
use hemoforge_core::registry::ClassRegistry;
use hemoforge_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Cell colours per class index (RGB); cycled past the palette length.
const PALETTE: [[f32; 3]; 13] = [
    [150.0, 40.0, 140.0],
    [40.0, 70.0, 190.0],
    [60.0, 150.0, 70.0],
    [200.0, 120.0, 30.0],
    [190.0, 50.0, 50.0],
    [30.0, 150.0, 160.0],
    [110.0, 110.0, 40.0],
    [90.0, 30.0, 80.0],
    [160.0, 90.0, 170.0],
    [30.0, 30.0, 100.0],
    [120.0, 60.0, 20.0],
    [70.0, 190.0, 190.0],
    [20.0, 90.0, 40.0],
];

const BACKGROUND: [f32; 3] = [232.0, 212.0, 218.0];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub per_class_counts: Vec<usize>,
    pub image_size: usize,
    /// Fraction of samples whose stored label is replaced by another class.
    pub flip_rate: f64,
    /// Additive Gaussian pixel noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            per_class_counts: vec![100, 60, 10],
            image_size: 32,
            flip_rate: 0.0,
            noise_sigma: 3.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Flip {
    pub image_path: String,
    pub true_label: usize,
    pub given_label: usize,
}

#[derive(Debug)]
pub struct SynthOutput {
    pub manifest_path: PathBuf,
    pub manifest: Manifest,
    pub flips: Vec<Flip>,
}

pub fn render_cell(class: usize, size: usize, noise_sigma: f64, rng: &mut ChaCha8Rng) -> Image {
    let base = PALETTE[class % PALETTE.len()];
    let jitter: Vec<f32> = (0..3).map(|_| rng.random_range(-12.0..12.0)).collect();
    let s = size as f64;
    let cy = rng.random_range(0.35 * s..0.65 * s);
    let cx = rng.random_range(0.35 * s..0.65 * s);
    let ry = rng.random_range(0.2 * s..0.32 * s);
    let rx = rng.random_range(0.2 * s..0.32 * s);
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).expect("finite sigma");
    let mut img = Image::from_fn(size, size, 3, |y, x, c| {
        let dy = (y as f64 + 0.5 - cy) / ry;
        let dx = (x as f64 + 0.5 - cx) / rx;
        let r2 = dy * dy + dx * dx;
        if r2 <= 1.0 {
            let shade = 1.0 - 0.25 * r2 as f32;
            base[c] * shade + jitter[c]
        } else {
            BACKGROUND[c]
        }
    });
    if noise_sigma > 0.0 {
        for v in img.data_mut() {
            *v += noise.sample(rng) as f32;
        }
    }
    img.clamp_range();
    for v in img.data_mut() {
        *v = v.round();
    }
    img
}

fn write_flips(path: &Path, flips: &[Flip], registry: &ClassRegistry) -> Result<()> {
    let mut out = String::from("image_path,true_label,given_label\n");
    for f in flips {
        out.push_str(&format!(
            "{},{},{}\n",
            f.image_path,
            registry.code(f.true_label),
            registry.code(f.given_label)
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Generates `<out_dir>/<CODE>/<CODE>_<n>.png` for every class, a
/// `manifest.csv` without folds and, when `flip_rate > 0`, `flips.csv`.
/// Images are stored under their (possibly flipped) given label.
pub fn synth_data(out_dir: &Path, spec: &SynthSpec) -> Result<SynthOutput> {
    let registry = ClassRegistry::builtin();
    let classes = spec.per_class_counts.len();
    if classes == 0 || classes > registry.len() {
        return Err(Error::InvalidArgument(format!(
            "synth.counts needs between 1 and {} entries",
            registry.len()
        )));
    }
    if !(0.0..=1.0).contains(&spec.flip_rate) || (classes < 2 && spec.flip_rate > 0.0) {
        return Err(Error::InvalidArgument(
            "synth.flip_rate must lie in [0, 1] and needs at least 2 classes".into(),
        ));
    }
    if spec.image_size < 8 {
        return Err(Error::InvalidArgument("synth.image_size must be at least 8".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::new();
    let mut flips = Vec::new();
    for (class, &count) in spec.per_class_counts.iter().enumerate() {
        for n in 0..count {
            let img = render_cell(class, spec.image_size, spec.noise_sigma, &mut rng);
            let mut given = class;
            if spec.flip_rate > 0.0 && rng.random_bool(spec.flip_rate) {
                given = (class + rng.random_range(1..classes)) % classes;
            }
            let code = registry.code(given);
            let rel = format!("{code}/{}_{n:04}.png", registry.code(class).to_lowercase());
            let path = out_dir.join(&rel);
            std::fs::create_dir_all(path.parent().expect("has parent"))?;
            img.save_png(&path)?;
            if given != class {
                flips.push(Flip {
                    image_path: rel.clone(),
                    true_label: class,
                    given_label: given,
                });
            }
            records.push(SampleRecord {
                image_path: rel,
                label: Some(given),
                source: Source::WbcbenchTrain,
                fold: None,
            });
        }
    }
    let mut manifest = Manifest::new(registry.clone(), records)?;
    manifest.provenance.push(format!(
        "synthetic counts={:?} size={} flip_rate={} noise_sigma={} seed={}",
        spec.per_class_counts, spec.image_size, spec.flip_rate, spec.noise_sigma, spec.seed
    ));
    let manifest_path = out_dir.join("manifest.csv");
    manifest.write_csv(&manifest_path)?;
    if spec.flip_rate > 0.0 {
        write_flips(&out_dir.join("flips.csv"), &flips, &registry)?;
    }
    manifest.base_dir = Some(out_dir.to_path_buf());
    Ok(SynthOutput {
        manifest_path,
        manifest,
        flips,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_match_request() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            per_class_counts: vec![10, 5, 2],
            ..SynthSpec::default()
        };
        let out = synth_data(dir.path(), &spec).unwrap();
        let counts = out.manifest.class_counts();
        assert_eq!(&counts[..3], &[10, 5, 2]);
        assert_eq!(out.manifest.len(), 17);
        assert!(out.flips.is_empty());
        assert!(!dir.path().join("flips.csv").exists());
    }

    #[test]
    fn flips_are_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            per_class_counts: vec![40, 40, 40],
            flip_rate: 0.1,
            seed: 3,
            ..SynthSpec::default()
        };
        let out = synth_data(dir.path(), &spec).unwrap();
        assert!(!out.flips.is_empty());
        let text = std::fs::read_to_string(dir.path().join("flips.csv")).unwrap();
        assert_eq!(text.lines().count(), out.flips.len() + 1);
        for f in &out.flips {
            assert_ne!(f.true_label, f.given_label);
            let rec = out
                .manifest
                .records()
                .iter()
                .find(|r| r.image_path == f.image_path)
                .unwrap();
            assert_eq!(rec.label, Some(f.given_label));
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            per_class_counts: vec![3, 3],
            ..SynthSpec::default()
        };
        synth_data(a.path(), &spec).unwrap();
        synth_data(b.path(), &spec).unwrap();
        for rel in ["SNE/sne_0002.png", "LY/ly_0001.png", "manifest.csv"] {
            assert_eq!(
                std::fs::read(a.path().join(rel)).unwrap(),
                std::fs::read(b.path().join(rel)).unwrap()
            );
        }
    }
}
