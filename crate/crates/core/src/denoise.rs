//! Adaptive denoising: a MAD estimate of Gaussian noise from Haar detail
//! coefficients drives a non-local-means filter whose search radius and
//! strength scale with the estimate. Images below the bypass threshold are
//! returned untouched.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::Image;

/// Median absolute deviation to standard deviation, for Gaussian noise.
const MAD_TO_SIGMA: f64 = 0.6745;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseEstimate {
    pub sigma_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseConfig {
    pub bypass_threshold: f64,
    pub h_factor: f64,
    pub patch_size: usize,
    pub max_patch_distance: usize,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            bypass_threshold: 2.0,
            h_factor: 0.8,
            patch_size: 5,
            max_patch_distance: 15,
        }
    }
}

impl DenoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 3 || self.patch_size % 2 == 0 {
            return Err(invalid(format!(
                "denoise.patch_size must be odd and >= 3, got {}",
                self.patch_size
            )));
        }
        if self.max_patch_distance < 1 {
            return Err(invalid("denoise.max_patch_distance must be >= 1"));
        }
        if !(self.bypass_threshold >= 0.0 && self.bypass_threshold.is_finite()) {
            return Err(invalid("denoise.bypass_threshold must be finite and >= 0"));
        }
        if !(self.h_factor > 0.0 && self.h_factor.is_finite()) {
            return Err(invalid("denoise.h_factor must be finite and > 0"));
        }
        Ok(())
    }
}

/// Search radius used for a given noise level: `round(√σ̂)` clamped to `[1, max]`.
pub fn patch_distance(sigma_hat: f64, max_patch_distance: usize) -> usize {
    (sigma_hat.sqrt().round() as usize).clamp(1, max_patch_distance.max(1))
}

fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    let mid = n / 2;
    let (_, &mut upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    if n % 2 == 1 {
        upper
    } else {
        let lower = values[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Noise standard deviation from the finest diagonal Haar subband.
///
/// Per channel `σ̂ = median(|HH|) / 0.6745`; the result is the channel mean.
/// Odd trailing rows/columns are ignored.
pub fn estimate_sigma(image: &Image) -> Result<NoiseEstimate> {
    let (h, w, channels) = image.shape();
    if h < 2 || w < 2 {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
        });
    }
    let mut total = 0.0;
    let mut coeffs = Vec::with_capacity((h / 2) * (w / 2));
    for c in 0..channels {
        coeffs.clear();
        for by in 0..h / 2 {
            for bx in 0..w / 2 {
                let (y, x) = (2 * by, 2 * bx);
                let a = f64::from(image.get(y, x, c));
                let b = f64::from(image.get(y, x + 1, c));
                let cc = f64::from(image.get(y + 1, x, c));
                let d = f64::from(image.get(y + 1, x + 1, c));
                coeffs.push(((a - b - cc + d) / 2.0).abs());
            }
        }
        total += median(&mut coeffs) / MAD_TO_SIGMA;
    }
    Ok(NoiseEstimate {
        sigma_hat: total / channels as f64,
    })
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Non-local means with per-pixel patch distance `d²` (mean over the patch)
/// and weights `exp(-max(d² - 2σ̂², 0) / h²)`, `h = h_factor·σ̂`.
pub fn nlm_denoise(image: &Image, estimate: NoiseEstimate, config: &DenoiseConfig) -> Result<Image> {
    config.validate()?;
    let sigma = estimate.sigma_hat;
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(invalid(format!("noise estimate must be finite and >= 0, got {sigma}")));
    }
    if sigma < config.bypass_threshold || sigma == 0.0 {
        return Ok(image.clone());
    }
    let radius = patch_distance(sigma, config.max_patch_distance);
    let h = config.h_factor * sigma;
    let mut out = image.clone();
    for c in 0..image.channels() {
        let plane = image.channel_plane(c);
        let filtered = nlm_plane(
            &plane,
            image.height(),
            image.width(),
            radius,
            config.patch_size / 2,
            sigma,
            h,
        );
        out.set_channel_plane(c, &filtered);
    }
    Ok(out)
}

fn nlm_plane(
    plane: &[f32],
    height: usize,
    width: usize,
    radius: usize,
    half_patch: usize,
    sigma: f64,
    h: f64,
) -> Vec<f32> {
    // Padded plane covers every pixel a patch centered at a shifted
    // position can touch.
    let pad = radius + half_patch;
    let ph = height + 2 * pad;
    let pw = width + 2 * pad;
    let mut padded = vec![0f64; ph * pw];
    for y in 0..ph {
        let sy = reflect(y as isize - pad as isize, height);
        for x in 0..pw {
            let sx = reflect(x as isize - pad as isize, width);
            padded[y * pw + x] = f64::from(plane[sy * width + sx]);
        }
    }

    // Region whose box sums give patch distances for every output pixel.
    let rh = height + 2 * half_patch;
    let rw = width + 2 * half_patch;
    let patch_area = ((2 * half_patch + 1) * (2 * half_patch + 1)) as f64;
    let bias = 2.0 * sigma * sigma;
    let inv_h2 = 1.0 / (h * h);

    let mut weight_sum = vec![0f64; height * width];
    let mut value_sum = vec![0f64; height * width];
    let mut integral = vec![0f64; (rh + 1) * (rw + 1)];

    let r = radius as isize;
    for dy in -r..=r {
        for dx in -r..=r {
            for y in 0..rh {
                let mut row = 0.0;
                let py = y + radius;
                let qy = (py as isize + dy) as usize;
                for x in 0..rw {
                    let px = x + radius;
                    let qx = (px as isize + dx) as usize;
                    let d = padded[py * pw + px] - padded[qy * pw + qx];
                    row += d * d;
                    integral[(y + 1) * (rw + 1) + x + 1] = integral[y * (rw + 1) + x + 1] + row;
                }
            }
            let side = 2 * half_patch + 1;
            for y in 0..height {
                for x in 0..width {
                    let (y0, x0, y1, x1) = (y, x, y + side, x + side);
                    let s = integral[y1 * (rw + 1) + x1] - integral[y0 * (rw + 1) + x1]
                        - integral[y1 * (rw + 1) + x0]
                        + integral[y0 * (rw + 1) + x0];
                    let dist2 = s / patch_area;
                    let w = (-(dist2 - bias).max(0.0) * inv_h2).exp();
                    let qy = (y + pad) as isize + dy;
                    let qx = (x + pad) as isize + dx;
                    let i = y * width + x;
                    weight_sum[i] += w;
                    value_sum[i] += w * padded[qy as usize * pw + qx as usize];
                }
            }
        }
    }
    value_sum
        .iter()
        .zip(&weight_sum)
        .map(|(&v, &w)| (v / w) as f32)
        .collect()
}

/// Estimate noise, then denoise (or pass through below the bypass threshold).
pub fn adaptive_denoise(image: &Image, config: &DenoiseConfig) -> Result<Image> {
    let estimate = estimate_sigma(image)?;
    nlm_denoise(image, estimate, config)
}
