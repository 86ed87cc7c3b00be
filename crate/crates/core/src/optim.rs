//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vit::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay must be non-negative, got {}", self.weight_decay)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Moment buffers, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Scalar>(cfg: AdamWConfig, params: &ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let zeros = || params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        Ok(Self { cfg, step: 0, m: zeros(), v: zeros() })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update from the gradients stored on `params`. Parameters without
    /// a gradient are only decayed.
    pub fn step<T: Scalar>(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let decay = if p.decay { 1.0 - c.lr * c.weight_decay } else { 1.0 };
            let grad = p.tensor.take_grad();
            let values = p.tensor.values_mut();
            for i in 0..values.len() {
                let mut w = values[i].as_f64() * decay;
                if let Some(g) = &grad {
                    let g = g[i].as_f64();
                    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    w -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
                }
                values[i] = T::of(w);
            }
        }
        Ok(())
    }
}
