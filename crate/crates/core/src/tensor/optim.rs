use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::error::{Error, Result};

/// Scalar state of the momentum optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub decay_factor: f64,
    pub decay_interval: u64,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, momentum: f64, decay_factor: f64, decay_interval: u64) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {momentum}")));
        }
        if !(decay_factor > 0.0) || decay_interval == 0 {
            return Err(Error::Config("decay factor and interval must be positive".into()));
        }
        Ok(OptimizerState {
            learning_rate,
            momentum,
            decay_factor,
            decay_interval,
            step_count: 0,
        })
    }

    /// `learning_rate * decay_factor^floor(step_count / decay_interval)`.
    pub fn effective_lr(&self) -> f64 {
        let k = (self.step_count / self.decay_interval) as i32;
        self.learning_rate * self.decay_factor.powi(k)
    }
}

/// SGD with momentum and step decay. One velocity buffer per parameter.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub state: OptimizerState,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(state: OptimizerState, params: &ParamSet) -> Self {
        let velocity = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Sgd { state, velocity }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, index: usize, values: &[f64]) -> Result<()> {
        let v = self
            .velocity
            .get_mut(index)
            .ok_or_else(|| Error::contract(format!("no velocity slot {index}")))?;
        if v.len() != values.len() {
            return Err(Error::shape("set_velocity", format!("{} vs {}", v.len(), values.len())));
        }
        v.copy_from_slice(values);
        Ok(())
    }

    /// `v <- momentum * v - lr_eff * grad; p <- p + v`, then zeroes grads.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if self.velocity.len() != params.len() {
            return Err(Error::contract("optimizer and parameter set disagree"));
        }
        if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(Error::contract(format!("parameter {name} has no gradient")));
        }
        let lr = self.state.effective_lr();
        let mu = self.state.momentum;
        for ((_, t), v) in params.iter_mut().zip(&mut self.velocity) {
            let grad = t.grad().expect("checked above").to_vec();
            for ((p, vi), g) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(&grad) {
                *vi = mu * *vi - lr * g;
                *p += *vi;
            }
            if t.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { op: "sgd_step" });
            }
            t.zero_grad();
        }
        self.state.step_count += 1;
        Ok(())
    }
}
