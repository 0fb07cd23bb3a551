use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Param;

/// SGD with classical momentum and coupled L2 weight decay.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    #[serde(skip)]
    velocity: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {lr} must be positive")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum {momentum} outside [0, 1)")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!("weight decay {weight_decay} must be >= 0")));
        }
        Ok(OptimState {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }
}

/// One update over `params`, in order:
/// `g' = g + wd * w; v = momentum * v + g'; w = w - lr * v`.
/// Gradients are zeroed afterwards. Nothing is modified when any gradient
/// is non-finite.
pub fn sgd_step(params: &mut [&mut Param], state: &mut OptimState) -> Result<()> {
    for (i, p) in params.iter().enumerate() {
        if p.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(i));
        }
    }
    if state.velocity.len() != params.len() {
        state.velocity = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
    }
    for (p, v) in params.iter_mut().zip(&mut state.velocity) {
        for ((w, g), vel) in p.value.iter_mut().zip(&mut p.grad).zip(v.iter_mut()) {
            let g_eff = *g + state.weight_decay * *w;
            *vel = state.momentum * *vel + g_eff;
            *w -= state.lr * *vel;
            *g = 0.0;
        }
    }
    Ok(())
}
