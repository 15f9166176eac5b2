//! Train-time augmentation, batch mixing and test-time views.
//!
//! Every transform takes its randomness from an explicit generator, so a
//! given generator state always produces the same output.

mod mix;
mod tta;

pub use mix::{
    apply_batch_mixing, cutmix, cutmix_with_box, mixup, mixup_with, Batch, CutBox, MixMode,
    MixedBatch,
};
pub use tta::{tta_views, Dihedral, TtaMode, TtaView, ViewTransform};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::{Image, MAX_INTENSITY};

/// Probability of each transform plus its parameter range. A transform
/// with probability 0 is disabled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub rotate_prob: f64,
    /// Rotation angle range in degrees.
    pub rotate_degrees: (f64, f64),
    pub noise_prob: f64,
    pub noise_sigma: (f64, f64),
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    pub motion_blur_prob: f64,
    /// Motion kernel length range in pixels.
    pub motion_blur_length: (usize, usize),
    pub color_prob: f64,
    /// Additive brightness shift range.
    pub brightness: (f64, f64),
    /// Contrast factor is `1 + delta` with delta drawn from this range.
    pub contrast: (f64, f64),
    /// Per-batch probability for cutmix and for mixup.
    pub mix_prob: f64,
    pub mix_alpha: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            rotate_prob: 0.5,
            rotate_degrees: (-180.0, 180.0),
            noise_prob: 0.2,
            noise_sigma: (2.0, 15.0),
            blur_prob: 0.2,
            blur_sigma: (0.3, 1.2),
            motion_blur_prob: 0.2,
            motion_blur_length: (3, 9),
            color_prob: 0.5,
            brightness: (-20.0, 20.0),
            contrast: (-0.2, 0.2),
            mix_prob: 0.15,
            mix_alpha: 1.0,
        }
    }
}

impl AugmentConfig {
    /// Every transform and both batch mixers switched off.
    pub fn disabled() -> Self {
        Self {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            rotate_prob: 0.0,
            noise_prob: 0.0,
            blur_prob: 0.0,
            motion_blur_prob: 0.0,
            color_prob: 0.0,
            mix_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("augment.hflip_prob", self.hflip_prob),
            ("augment.vflip_prob", self.vflip_prob),
            ("augment.rotate_prob", self.rotate_prob),
            ("augment.noise_prob", self.noise_prob),
            ("augment.blur_prob", self.blur_prob),
            ("augment.motion_blur_prob", self.motion_blur_prob),
            ("augment.color_prob", self.color_prob),
            ("augment.mix_prob", self.mix_prob),
        ];
        for (key, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(format!("{key} must lie in [0, 1], got {p}")));
            }
        }
        let ranges = [
            ("augment.rotate_degrees", self.rotate_degrees),
            ("augment.noise_sigma", self.noise_sigma),
            ("augment.blur_sigma", self.blur_sigma),
            ("augment.brightness", self.brightness),
            ("augment.contrast", self.contrast),
        ];
        for (key, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(invalid(format!("{key} must be a nonempty range, got {lo}..{hi}")));
            }
        }
        if self.noise_sigma.0 < 0.0 || self.blur_sigma.0 <= 0.0 {
            return Err(invalid("augment noise/blur sigma must be positive"));
        }
        let (lo, hi) = self.motion_blur_length;
        if lo < 1 || lo > hi {
            return Err(invalid(format!(
                "augment.motion_blur_length must be a nonempty range >= 1, got {lo}..{hi}"
            )));
        }
        if self.contrast.0 <= -1.0 {
            return Err(invalid("augment.contrast lower bound must exceed -1"));
        }
        if !(self.mix_alpha > 0.0 && self.mix_alpha.is_finite()) {
            return Err(invalid("augment.mix_alpha must be positive"));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Applies each enabled transform independently with its probability.
///
/// A Bernoulli draw is consumed for every transform, enabled or not, so the
/// generator advances identically regardless of which transforms fire.
pub fn train_augment<R: Rng + ?Sized>(image: &Image, rng: &mut R, config: &AugmentConfig) -> Image {
    let mut img = image.clone();
    if rng.random_bool(config.hflip_prob) {
        img = flip_horizontal(&img);
    }
    if rng.random_bool(config.vflip_prob) {
        img = flip_vertical(&img);
    }
    if rng.random_bool(config.rotate_prob) {
        let angle = uniform(rng, config.rotate_degrees);
        img = rotate(&img, angle);
    }
    if rng.random_bool(config.blur_prob) {
        let sigma = uniform(rng, config.blur_sigma);
        img = gaussian_blur(&img, sigma);
    }
    if rng.random_bool(config.motion_blur_prob) {
        let (lo, hi) = config.motion_blur_length;
        let length = rng.random_range(lo..=hi);
        let angle = rng.random_range(0.0..180.0);
        img = motion_blur(&img, length, angle);
    }
    if rng.random_bool(config.color_prob) {
        let brightness = uniform(rng, config.brightness);
        let contrast = 1.0 + uniform(rng, config.contrast);
        img = brightness_contrast(&img, brightness, contrast);
    }
    if rng.random_bool(config.noise_prob) {
        let sigma = uniform(rng, config.noise_sigma);
        img = gaussian_noise(&img, sigma, rng);
    }
    img
}

pub fn flip_horizontal(img: &Image) -> Image {
    let (h, w, c) = img.shape();
    Image::from_fn(h, w, c, |y, x, ch| img.get(y, w - 1 - x, ch))
}

pub fn flip_vertical(img: &Image) -> Image {
    let (h, w, c) = img.shape();
    Image::from_fn(h, w, c, |y, x, ch| img.get(h - 1 - y, x, ch))
}

fn reflect_coord(v: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let period = 2.0 * (n as f64 - 1.0);
    let m = v.rem_euclid(period);
    if m <= n as f64 - 1.0 {
        m
    } else {
        period - m
    }
}

fn bilinear(img: &Image, y: f64, x: f64, c: usize) -> f32 {
    let y = reflect_coord(y, img.height());
    let x = reflect_coord(x, img.width());
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(img.height() - 1);
    let x1 = (x0 + 1).min(img.width() - 1);
    let fy = (y - y0 as f64) as f32;
    let fx = (x - x0 as f64) as f32;
    let top = img.get(y0, x0, c) * (1.0 - fx) + img.get(y0, x1, c) * fx;
    let bottom = img.get(y1, x0, c) * (1.0 - fx) + img.get(y1, x1, c) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Rotation about the image center with reflection padding.
pub fn rotate(img: &Image, degrees: f64) -> Image {
    let (h, w, c) = img.shape();
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    Image::from_fn(h, w, c, |y, x, ch| {
        let dy = y as f64 - cy;
        let dx = x as f64 - cx;
        // Inverse rotation maps the output pixel back into the source.
        let sx = cos * dx + sin * dy + cx;
        let sy = -sin * dx + cos * dy + cy;
        bilinear(img, sy, sx, ch)
    })
}

fn convolve_1d(img: &Image, kernel: &[f64], horizontal: bool) -> Image {
    let (h, w, c) = img.shape();
    let r = (kernel.len() / 2) as isize;
    Image::from_fn(h, w, c, |y, x, ch| {
        let mut acc = 0.0;
        for (k, &kv) in kernel.iter().enumerate() {
            let off = k as isize - r;
            let v = if horizontal {
                let sx = reflect_coord((x as isize + off) as f64, w) as usize;
                img.get(y, sx, ch)
            } else {
                let sy = reflect_coord((y as isize + off) as f64, h) as usize;
                img.get(sy, x, ch)
            };
            acc += kv * f64::from(v);
        }
        acc as f32
    })
}

pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    convolve_1d(&convolve_1d(img, &kernel, true), &kernel, false)
}

/// Averages `length` samples along a line at `degrees` through each pixel.
pub fn motion_blur(img: &Image, length: usize, degrees: f64) -> Image {
    if length <= 1 {
        return img.clone();
    }
    let (h, w, c) = img.shape();
    let (sin, cos) = degrees.to_radians().sin_cos();
    let mid = (length as f64 - 1.0) / 2.0;
    Image::from_fn(h, w, c, |y, x, ch| {
        let mut acc = 0.0f32;
        for t in 0..length {
            let s = t as f64 - mid;
            acc += bilinear(img, y as f64 + s * sin, x as f64 + s * cos, ch);
        }
        acc / length as f32
    })
}

/// `v' = (v - channel_mean)·contrast + channel_mean + brightness`, clipped.
pub fn brightness_contrast(img: &Image, brightness: f64, contrast: f64) -> Image {
    let (h, w, c) = img.shape();
    let means: Vec<f64> = (0..c)
        .map(|ch| {
            img.channel_plane(ch).iter().map(|&v| f64::from(v)).sum::<f64>() / (h * w) as f64
        })
        .collect();
    let mut out = Image::from_fn(h, w, c, |y, x, ch| {
        ((f64::from(img.get(y, x, ch)) - means[ch]) * contrast + means[ch] + brightness) as f32
    });
    out.clamp_range();
    out
}

pub fn gaussian_noise<R: Rng + ?Sized>(img: &Image, sigma: f64, rng: &mut R) -> Image {
    let mut out = img.clone();
    if sigma <= 0.0 {
        return out;
    }
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    for v in out.data_mut() {
        *v = (f64::from(*v) + normal.sample(rng)).clamp(0.0, f64::from(MAX_INTENSITY)) as f32;
    }
    out
}
