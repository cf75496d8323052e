//! SGD with momentum and L2 weight decay, and the step learning-rate schedule.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    /// One buffer per parameter, same shape.
    pub velocity: IndexMap<String, Tensor<T>>,
}

impl<T: Real> OptimState<T> {
    /// Zero velocity for every parameter of `store`.
    pub fn new(store: &ParamStore<T>, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) || weight_decay < 0.0 {
            return Err(Error::config(format!(
                "momentum {momentum} must be in [0,1) and weight decay {weight_decay} non-negative"
            )));
        }
        Ok(OptimState {
            momentum,
            weight_decay,
            velocity: store.iter().map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape().to_vec()))).collect(),
        })
    }
}

/// `g' = g + wd·p; v = μ·v + g'; p = p − lr·v` for every gradient in `grads`.
/// Shapes and finiteness are checked for all gradients before any update.
pub fn sgd_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &IndexMap<String, Tensor<T>>,
    state: &mut OptimState<T>,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::config(format!("learning rate {lr} must be positive")));
    }
    for (name, g) in grads {
        let p = params.get(name)?;
        let v = state
            .velocity
            .get(name)
            .ok_or_else(|| Error::config(format!("no velocity buffer for {name}")))?;
        if g.shape() != p.shape() || v.shape() != p.shape() {
            return Err(Error::shape(format!(
                "{name}: gradient {:?}, velocity {:?}, parameter {:?}",
                g.shape(),
                v.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            let bad = g.data().iter().position(|v| !v.is_finite()).unwrap_or(0);
            return Err(Error::Grad(format!("non-finite gradient for {name} at element {bad}")));
        }
    }
    let (mu, wd, lr) = (T::lit(state.momentum), T::lit(state.weight_decay), T::lit(lr));
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        let v = state.velocity.get_mut(name).expect("checked above");
        for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            let g2 = gv + wd * *pv;
            *vv = mu * *vv + g2;
            *pv = *pv - lr * *vv;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decay {
    /// Multiply by the factor at each milestone passed.
    Cumulative,
    /// `base·factor` once any milestone is passed.
    Single,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
    pub decay: Decay,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base: 1e-3,
            milestones: vec![100, 200],
            factor: 0.01,
            decay: Decay::Cumulative,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base > 0.0) || !(self.factor > 0.0 && self.factor <= 1.0) {
            return Err(Error::config(format!(
                "learning rate {} must be positive and factor {} in (0,1]",
                self.base, self.factor
            )));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("milestones must be strictly increasing"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        match (self.decay, passed) {
            (_, 0) => self.base,
            (Decay::Single, _) => self.base * self.factor,
            (Decay::Cumulative, k) => self.base * self.factor.powi(k as i32),
        }
    }
}
