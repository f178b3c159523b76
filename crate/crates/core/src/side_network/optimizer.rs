use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseTensor;

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
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::config(
                "optimizer needs lr > 0, betas in [0, 1), eps > 0 and weight_decay >= 0",
            ));
        }
        Ok(())
    }
}

/// Adaptive first/second-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of `params` (in a fixed order) with matching `grads`.
    pub fn update(&mut self, params: &mut [&mut DenseTensor], grads: &[&DenseTensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim("optimizer", &[params.len()], &[grads.len()]));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::dim("optimizer state", &[self.m.len()], &[params.len()]));
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::dim("optimizer", p.shape(), g.shape()));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *w);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        })
        .unwrap();
        let mut w = DenseTensor::vector(vec![3.0, -2.0]);
        for _ in 0..500 {
            let g = w.scaled(2.0);
            opt.update(&mut [&mut w], &[&g]).unwrap();
        }
        assert!(w.max_abs() < 1e-2);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        })
        .unwrap();
        let mut w = DenseTensor::vector(vec![1.0]);
        opt.update(&mut [&mut w], &[&DenseTensor::vector(vec![5.0])]).unwrap();
        assert!((w.data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(AdamW::new(AdamWConfig {
            lr: 0.0,
            ..AdamWConfig::default()
        })
        .is_err());
    }
}
