//! Minimal CPU layers with hand-written backward passes.
//!
//! Parameters live in one flat slice owned by the caller; each layer knows
//! its offset into it. That keeps optimizer state, EMA tracking and
//! checkpointing trivial: they all operate on plain `Vec<f64>`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Channel-major activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    #[inline]
    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.h + y) * self.w + x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d {
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        offset: usize,
    },
    Relu,
    /// Non-overlapping average pooling; trailing rows/columns dropped.
    AvgPool(usize),
    GlobalAvgPool,
}

impl Layer {
    pub fn num_params(&self) -> usize {
        match *self {
            Layer::Conv2d {
                in_c, out_c, kernel, ..
            } => out_c * in_c * kernel * kernel + out_c,
            _ => 0,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut [f64], rng: &mut R) {
        if let Layer::Conv2d {
            in_c,
            out_c,
            kernel,
            offset,
            ..
        } = *self
        {
            let fan_in = (in_c * kernel * kernel) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
            let n_w = out_c * in_c * kernel * kernel;
            for p in &mut params[offset..offset + n_w] {
                *p = normal.sample(rng);
            }
            params[offset + n_w..offset + n_w + out_c].fill(0.0);
        }
    }

    pub fn forward(&self, params: &[f64], x: &Tensor3) -> Tensor3 {
        match *self {
            Layer::Conv2d {
                in_c,
                out_c,
                kernel,
                stride,
                pad,
                offset,
            } => {
                assert_eq!(x.c, in_c, "conv input channels");
                let oh = (x.h + 2 * pad - kernel) / stride + 1;
                let ow = (x.w + 2 * pad - kernel) / stride + 1;
                let weights = &params[offset..offset + out_c * in_c * kernel * kernel];
                let bias = &params[offset + weights.len()..offset + weights.len() + out_c];
                let mut out = Tensor3::zeros(out_c, oh, ow);
                for o in 0..out_c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = bias[o];
                            for i in 0..in_c {
                                for ky in 0..kernel {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= x.h as isize {
                                        continue;
                                    }
                                    for kx in 0..kernel {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= x.w as isize {
                                            continue;
                                        }
                                        acc += weights[((o * in_c + i) * kernel + ky) * kernel + kx]
                                            * x.at(i, iy as usize, ix as usize);
                                    }
                                }
                            }
                            let idx = out.idx(o, oy, ox);
                            out.data[idx] = acc;
                        }
                    }
                }
                out
            }
            Layer::Relu => Tensor3 {
                data: x.data.iter().map(|&v| v.max(0.0)).collect(),
                ..*x
            },
            Layer::AvgPool(size) => {
                let (oh, ow) = (x.h / size, x.w / size);
                let mut out = Tensor3::zeros(x.c, oh, ow);
                let norm = (size * size) as f64;
                for c in 0..x.c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0.0;
                            for dy in 0..size {
                                for dx in 0..size {
                                    acc += x.at(c, oy * size + dy, ox * size + dx);
                                }
                            }
                            let idx = out.idx(c, oy, ox);
                            out.data[idx] = acc / norm;
                        }
                    }
                }
                out
            }
            Layer::GlobalAvgPool => {
                let n = (x.h * x.w) as f64;
                let data = x
                    .data
                    .chunks(x.h * x.w)
                    .map(|plane| plane.iter().sum::<f64>() / n)
                    .collect();
                Tensor3 {
                    c: x.c,
                    h: 1,
                    w: 1,
                    data,
                }
            }
        }
    }

    /// Returns the input gradient; accumulates parameter gradients into `grad`.
    pub fn backward(&self, params: &[f64], x: &Tensor3, dy: &Tensor3, grad: &mut [f64]) -> Tensor3 {
        match *self {
            Layer::Conv2d {
                in_c,
                out_c,
                kernel,
                stride,
                pad,
                offset,
            } => {
                let n_w = out_c * in_c * kernel * kernel;
                let weights = &params[offset..offset + n_w];
                let mut dx = Tensor3::zeros(x.c, x.h, x.w);
                for o in 0..out_c {
                    for oy in 0..dy.h {
                        for ox in 0..dy.w {
                            let g = dy.at(o, oy, ox);
                            if g == 0.0 {
                                continue;
                            }
                            grad[offset + n_w + o] += g;
                            for i in 0..in_c {
                                for ky in 0..kernel {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= x.h as isize {
                                        continue;
                                    }
                                    for kx in 0..kernel {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= x.w as isize {
                                            continue;
                                        }
                                        let wi = ((o * in_c + i) * kernel + ky) * kernel + kx;
                                        let xi = x.idx(i, iy as usize, ix as usize);
                                        grad[offset + wi] += g * x.data[xi];
                                        dx.data[xi] += g * weights[wi];
                                    }
                                }
                            }
                        }
                    }
                }
                dx
            }
            Layer::Relu => Tensor3 {
                data: x
                    .data
                    .iter()
                    .zip(&dy.data)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect(),
                ..*x
            },
            Layer::AvgPool(size) => {
                let mut dx = Tensor3::zeros(x.c, x.h, x.w);
                let norm = (size * size) as f64;
                for c in 0..dy.c {
                    for oy in 0..dy.h {
                        for ox in 0..dy.w {
                            let g = dy.at(c, oy, ox) / norm;
                            for ddy in 0..size {
                                for ddx in 0..size {
                                    let idx = dx.idx(c, oy * size + ddy, ox * size + ddx);
                                    dx.data[idx] += g;
                                }
                            }
                        }
                    }
                }
                dx
            }
            Layer::GlobalAvgPool => {
                let n = (x.h * x.w) as f64;
                let mut dx = Tensor3::zeros(x.c, x.h, x.w);
                for (c, plane) in dx.data.chunks_mut(x.h * x.w).enumerate() {
                    plane.fill(dy.data[c] / n);
                }
                dx
            }
        }
    }
}

/// Fully connected layer `y = W x + b`, `W` stored row-major `[out][in]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub offset: usize,
}

impl Linear {
    pub fn num_params(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut [f64], gain: f64, rng: &mut R) {
        let std = (gain / self.inputs as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let n_w = self.inputs * self.outputs;
        for p in &mut params[self.offset..self.offset + n_w] {
            *p = normal.sample(rng);
        }
        params[self.offset + n_w..self.offset + n_w + self.outputs].fill(0.0);
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let n_w = self.inputs * self.outputs;
        let w = &params[self.offset..self.offset + n_w];
        let b = &params[self.offset + n_w..self.offset + n_w + self.outputs];
        (0..self.outputs)
            .map(|o| {
                let row = &w[o * self.inputs..(o + 1) * self.inputs];
                b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    pub fn backward(&self, params: &[f64], x: &[f64], dy: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let n_w = self.inputs * self.outputs;
        let mut dx = vec![0.0; self.inputs];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad[self.offset + n_w + o] += g;
            let row = o * self.inputs;
            for i in 0..self.inputs {
                grad[self.offset + row + i] += g * x[i];
                dx[i] += g * params[self.offset + row + i];
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor3 {
        Tensor3 {
            c,
            h,
            w,
            data: (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    /// Checks layer backward against central differences of `sum(out · probe)`.
    fn check_layer(layer: &Layer, input: Tensor3, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; layer.num_params()];
        layer.init(&mut params, &mut rng);
        for p in params.iter_mut() {
            *p += rng.random_range(-0.1..0.1);
        }
        let out = layer.forward(&params, &input);
        let probe = random_tensor(out.c, out.h, out.w, &mut rng);
        let objective = |params: &[f64], x: &Tensor3| -> f64 {
            let y = layer.forward(params, x);
            y.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum()
        };
        let mut grad = vec![0.0; params.len()];
        let dx = layer.backward(&params, &input, &probe, &mut grad);
        let eps = 1e-6;
        for i in 0..params.len() {
            let mut hi = params.clone();
            hi[i] += eps;
            let mut lo = params.clone();
            lo[i] -= eps;
            let fd = (objective(&hi, &input) - objective(&lo, &input)) / (2.0 * eps);
            assert!((fd - grad[i]).abs() < 1e-6, "param {i}: fd {fd} vs {}", grad[i]);
        }
        for i in 0..input.data.len() {
            let mut hi = input.clone();
            hi.data[i] += eps;
            let mut lo = input.clone();
            lo.data[i] -= eps;
            let fd = (objective(&params, &hi) - objective(&params, &lo)) / (2.0 * eps);
            assert!((fd - dx.data[i]).abs() < 1e-6, "input {i}: fd {fd} vs {}", dx.data[i]);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = Layer::Conv2d {
            in_c: 2,
            out_c: 3,
            kernel: 3,
            stride: 2,
            pad: 1,
            offset: 0,
        };
        check_layer(&layer, random_tensor(2, 5, 6, &mut rng), 2);
    }

    #[test]
    fn pooling_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check_layer(&Layer::AvgPool(2), random_tensor(2, 5, 4, &mut rng), 4);
        check_layer(&Layer::GlobalAvgPool, random_tensor(3, 3, 4, &mut rng), 5);
        check_layer(&Layer::Relu, random_tensor(2, 3, 3, &mut rng), 6);
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let lin = Linear {
            inputs: 4,
            outputs: 3,
            offset: 2,
        };
        let mut params = vec![0.0; 2 + lin.num_params()];
        lin.init(&mut params, 2.0, &mut rng);
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dy = vec![0.3, -1.2, 0.7];
        let mut grad = vec![0.0; params.len()];
        let dx = lin.backward(&params, &x, &dy, &mut grad);
        let f = |p: &[f64], x: &[f64]| -> f64 {
            lin.forward(p, x).iter().zip(&dy).map(|(a, b)| a * b).sum()
        };
        let eps = 1e-6;
        for i in 2..params.len() {
            let mut hi = params.clone();
            hi[i] += eps;
            let mut lo = params.clone();
            lo[i] -= eps;
            assert!(((f(&hi, &x) - f(&lo, &x)) / (2.0 * eps) - grad[i]).abs() < 1e-6);
        }
        for i in 0..4 {
            let mut hi = x.clone();
            hi[i] += eps;
            let mut lo = x.clone();
            lo[i] -= eps;
            assert!(((f(&params, &hi) - f(&params, &lo)) / (2.0 * eps) - dx[i]).abs() < 1e-6);
        }
    }
}
