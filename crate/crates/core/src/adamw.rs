//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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
            weight_decay: 1e-4,
        }
    }
}

/// Which coordinates move, and which of those are decayed.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateMask {
    pub trainable: Vec<bool>,
    pub decayed: Vec<bool>,
}

impl CoordinateMask {
    pub fn all(len: usize) -> Self {
        Self {
            trainable: vec![true; len],
            decayed: vec![true; len],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub config: AdamWConfig,
}

impl OptimizerState {
    pub fn new(len: usize, config: AdamWConfig) -> Self {
        Self {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
            config,
        }
    }

    /// One AdamW update of `params` in place. Frozen coordinates keep both
    /// their value and their moments. On a non-finite result nothing is
    /// modified.
    pub fn step(
        &mut self,
        params: &mut [f64],
        grad: &[f64],
        mask: Option<&CoordinateMask>,
    ) -> Result<()> {
        let n = self.m.len();
        if params.len() != n || grad.len() != n {
            return Err(Error::InvalidArgument(format!(
                "optimizer expects {n} coordinates, got params {} / grad {}",
                params.len(),
                grad.len()
            )));
        }
        if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteUpdate { index });
        }
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step + 1;
        let bc1 = 1.0 - beta1.powi(t as i32);
        let bc2 = 1.0 - beta2.powi(t as i32);

        let mut new_m = self.m.clone();
        let mut new_v = self.v.clone();
        let mut new_p = params.to_vec();
        for i in 0..n {
            let (trainable, decayed) =
                mask.map_or((true, true), |m| (m.trainable[i], m.decayed[i]));
            if !trainable {
                continue;
            }
            let g = grad[i];
            let m = beta1 * self.m[i] + (1.0 - beta1) * g;
            let v = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            let decay = if decayed {
                weight_decay * params[i]
            } else {
                0.0
            };
            let p = params[i] - lr * (m_hat / (v_hat.sqrt() + eps) + decay);
            if !p.is_finite() {
                return Err(Error::NonFiniteUpdate { index: i });
            }
            new_m[i] = m;
            new_v[i] = v;
            new_p[i] = p;
        }
        params.copy_from_slice(&new_p);
        self.m = new_m;
        self.v = new_v;
        self.step = t;
        Ok(())
    }
}

/// Functional form of [`OptimizerState::step`] over all coordinates.
pub fn adamw_step(
    state: &OptimizerState,
    params: &[f64],
    grad: &[f64],
) -> Result<(OptimizerState, Vec<f64>)> {
    let mut state = state.clone();
    let mut params = params.to_vec();
    state.step(&mut params, grad, None)?;
    Ok((state, params))
}
