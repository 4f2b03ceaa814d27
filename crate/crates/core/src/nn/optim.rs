use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorized::{ModelParams, ParamGrads};

/// SGD with momentum and L2 weight decay:
/// `v <- momentum * v + (g + wd * p)`, `p <- p - lr * v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Momentum buffers, one per parameter slot.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Velocity(pub Vec<Vec<f64>>);

impl Velocity {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Velocity(params.slots().iter().map(|(_, _, s)| vec![0.0; s.len()]).collect())
    }
}

impl Sgd {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight decay must be non-negative"));
        }
        Ok(())
    }

    pub fn step_slice(&self, param: &mut [f64], grad: &[f64], vel: &mut [f64]) {
        for ((p, &g), v) in param.iter_mut().zip(grad).zip(vel.iter_mut()) {
            *v = self.momentum * *v + (g + self.weight_decay * *p);
            *p -= self.lr * *v;
        }
    }

    pub fn step(&self, params: &mut ModelParams, grads: &ParamGrads, velocity: &mut Velocity) -> Result<()> {
        let gslots = grads.slots();
        let mut pslots = params.slots_mut();
        if velocity.0.is_empty() {
            velocity.0 = pslots.iter().map(|(_, _, s)| vec![0.0; s.len()]).collect();
        }
        if gslots.len() != pslots.len() || velocity.0.len() != pslots.len() {
            return Err(Error::Internal("gradient/parameter slot mismatch".into()));
        }
        for (((_, _, p), g), v) in pslots.iter_mut().zip(gslots).zip(velocity.0.iter_mut()) {
            if p.len() != g.len() || p.len() != v.len() {
                return Err(Error::Internal("gradient/parameter length mismatch".into()));
            }
            self.step_slice(p, g, v);
        }
        Ok(())
    }
}
