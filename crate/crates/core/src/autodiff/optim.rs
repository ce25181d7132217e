use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { cfg, step: 0, m: zeros(), v: zeros() }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(shape_err(format!(
                "optimizer holds {} moments, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(shape_err(format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
        }
        self.step += 1;
        let AdamWConfig { lr, beta1, beta2, eps, weight_decay } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let decay = 1.0 - lr * weight_decay;
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((p, &g), (m, v)) in it {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p *= decay;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Exponential moving average of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Ema {
    pub decay: f64,
    pub shadow: Vec<Tensor>,
}

impl Ema {
    pub fn new(decay: f64, params: &[Tensor]) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::Config(format!("EMA decay must lie in (0, 1), got {decay}")));
        }
        Ok(Self { decay, shadow: params.to_vec() })
    }

    pub fn update(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.shadow.len() {
            return Err(shape_err("EMA parameter count changed"));
        }
        let d = self.decay;
        for (s, p) in self.shadow.iter_mut().zip(params) {
            if s.shape() != p.shape() {
                return Err(shape_err(format!("EMA shadow {:?} vs param {:?}", s.shape(), p.shape())));
            }
            for (s, &p) in s.data_mut().iter_mut().zip(p.data()) {
                *s = d * *s + (1.0 - d) * p;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::vector(vec![v])
    }

    #[test]
    fn zero_grad_no_decay_is_fixed_point() {
        let mut p = vec![Tensor::vector(vec![0.3, -2.0])];
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        opt.update(&mut p, &[Tensor::zeros([2])]).unwrap();
        assert_eq!(p[0].data(), &[0.3, -2.0]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_step_by_hand() {
        let cfg = AdamWConfig { lr: 0.1, ..AdamWConfig::default() };
        let mut p = vec![scalar(1.0)];
        let mut opt = AdamW::new(cfg, &p);
        opt.update(&mut p, &[scalar(1.0)]).unwrap();
        // m = 0.1, v = 0.001; bias correction gives m̂ = 1, v̂ = 1.
        let m_hat = 0.1 / (1.0 - 0.9);
        let v_hat = 0.001 / (1.0 - 0.999);
        let expected = 1.0 - 0.1 * m_hat / (f64::sqrt(v_hat) + 1e-8);
        assert!((p[0].item() - expected).abs() < 1e-15);
        assert!((p[0].item() - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decoupled_decay() {
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.01, ..AdamWConfig::default() };
        let mut p = vec![scalar(2.0)];
        let mut opt = AdamW::new(cfg, &p);
        opt.update(&mut p, &[scalar(0.0)]).unwrap();
        assert!((p[0].item() - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![scalar(1.0)];
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        assert!(opt.update(&mut p, &[Tensor::zeros([2])]).is_err());
        let mut ema = Ema::new(0.9, &p).unwrap();
        assert!(ema.update(&[Tensor::zeros([3])]).is_err());
    }

    #[test]
    fn ema_formula() {
        let p = vec![scalar(1.0)];
        let mut ema = Ema::new(0.999, &p).unwrap();
        ema.update(&p).unwrap();
        assert_eq!(ema.shadow[0].item(), 1.0);

        let mut ema = Ema::new(0.999, &[scalar(0.0)]).unwrap();
        ema.update(&p).unwrap();
        assert!((ema.shadow[0].item() - 0.001).abs() < 1e-15);
        for _ in 1..250 {
            ema.update(&p).unwrap();
        }
        assert!((ema.shadow[0].item() - (1.0 - 0.999f64.powi(250))).abs() < 1e-12);
        assert!(Ema::new(1.0, &p).is_err());
    }
}
