//! AdamW, the cosine learning-rate schedule and weight EMA.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// `lr(t) = lr_min + ½(lr_max - lr_min)(1 + cos(π t / T))`, no warmup.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(invalid(format!(
            "schedule step {step} outside [0, {total_steps}]"
        )));
    }
    if step == total_steps {
        return Ok(lr_min);
    }
    let progress = step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * progress).cos()))
}

/// `ema ← decay·ema + (1 - decay)·weights`, elementwise.
pub fn ema_update(ema: &mut [f64], weights: &[f64], decay: f64) -> Result<()> {
    if ema.len() != weights.len() {
        return Err(Error::Shape(format!(
            "EMA holds {} values, weights {}",
            ema.len(),
            weights.len()
        )));
    }
    for (e, &w) in ema.iter_mut().zip(weights) {
        *e = decay * *e + (1.0 - decay) * w;
    }
    Ok(())
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(num_params: usize, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            params[i] *= 1.0 - lr * self.weight_decay;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 5e-4, 5e-6).unwrap(), 5e-4);
        assert_eq!(cosine_lr(100, 100, 5e-4, 5e-6).unwrap(), 5e-6);
        assert!((cosine_lr(50, 100, 5e-4, 5e-6).unwrap() - 2.525e-4).abs() < 1e-15);
        assert!(cosine_lr(101, 100, 5e-4, 5e-6).is_err());
        assert!(cosine_lr(0, 0, 5e-4, 5e-6).is_err());
    }

    #[test]
    fn cosine_is_non_increasing() {
        let lrs: Vec<f64> = (0..=1000).map(|t| cosine_lr(t, 1000, 5e-4, 5e-6).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn ema_extremes_and_fixed_point() {
        let mut ema = vec![1.0, 2.0];
        ema_update(&mut ema, &[5.0, 6.0], 1.0).unwrap();
        assert_eq!(ema, vec![1.0, 2.0]);
        ema_update(&mut ema, &[5.0, 6.0], 0.0).unwrap();
        assert_eq!(ema, vec![5.0, 6.0]);
        for _ in 0..100 {
            ema_update(&mut ema, &[5.0, 6.0], 0.999).unwrap();
        }
        assert_eq!(ema, vec![5.0, 6.0]);
        assert!(ema_update(&mut ema, &[1.0], 0.5).is_err());
    }

    #[test]
    fn ema_geometric_recursion() {
        let mut ema = vec![0.0];
        for _ in 0..1000 {
            ema_update(&mut ema, &[1.0], 0.999).unwrap();
        }
        assert!((ema[0] - (1.0 - 0.999f64.powi(1000))).abs() < 1e-12);
        assert!((ema[0] - 0.63230).abs() < 1e-5);
    }

    #[test]
    fn adamw_minimizes_a_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = AdamW::new(2, 0.9, 0.999, 0.0);
        for _ in 0..2000 {
            let grad: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut x, &grad, 1e-2);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2), "{x:?}");
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut x = vec![1.0];
        let mut opt = AdamW::new(1, 0.9, 0.999, 0.1);
        opt.step(&mut x, &[0.0], 0.5);
        // Zero gradient: only the decay term acts.
        assert!((x[0] - 0.95).abs() < 1e-12);
    }
}
