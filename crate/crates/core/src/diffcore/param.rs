use std::ops::Index;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Gradients, Tape, Tensor, Var};
use crate::error::{AnydError, Result};

/// A named trainable tensor together with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    name: String,
    pub value: Tensor,
    pub gradient: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Result<Self> {
        let name = name.into();
        if name.is_empty() {
            return Err(AnydError::invalid("parameter name must be nonempty"));
        }
        let gradient = Tensor::zeros(value.shape().to_vec());
        Ok(Parameter { name, value, gradient })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn zero_grad(&mut self) {
        self.gradient.data_mut().iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let p = Parameter::new(name, value)?;
        if self.find(p.name()).is_some() {
            return Err(AnydError::invalid(format!("duplicate parameter name {}", p.name())));
        }
        self.params.push(p);
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn as_mut_slice(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        Bindings(self.params.iter().map(|p| tape.leaf(p.value.clone())).collect())
    }

    /// Adds the tape gradients of every bound parameter into `gradient`.
    pub fn accumulate(&mut self, bindings: &Bindings, grads: &Gradients) {
        for (p, &v) in self.params.iter_mut().zip(&bindings.0) {
            if let Some(g) = grads.get(v) {
                p.gradient.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bindings(Vec<Var>);

impl Bindings {
    /// Bindings over externally created leaves, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bindings(vars)
    }
}

impl Index<ParamId> for Bindings {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub decay_per_step: f64,
    pub weight_decay: f64,
    /// Global gradient norm cap; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { learning_rate: 0.1, decay_per_step: 0.997, weight_decay: 1e-3, max_grad_norm: None }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(AnydError::invalid("learning_rate must be positive"));
        }
        if !(self.decay_per_step > 0.0 && self.decay_per_step <= 1.0) {
            return Err(AnydError::invalid("decay_per_step must lie in (0, 1]"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(AnydError::invalid("weight_decay must be nonnegative"));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(AnydError::invalid("max_grad_norm must be positive"));
            }
        }
        Ok(())
    }

    /// `lr0 · decay^step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        self.learning_rate * self.decay_per_step.powi(step as i32)
    }
}

/// One SGD update with coupled weight decay; gradients are zeroed afterwards.
/// With `max_grad_norm`, gradients whose global norm exceeds the cap are
/// rescaled onto it before the update.
///
/// Every gradient is checked before any parameter is touched, so a failed step
/// leaves the parameters unchanged.
pub fn sgd_step(params: &mut [Parameter], cfg: &SgdConfig, step: usize) -> Result<()> {
    for p in params.iter() {
        if !p.gradient.all_finite() {
            return Err(AnydError::Numeric { iteration: step, reason: format!("non-finite gradient for {}", p.name) });
        }
    }
    let lr = cfg.lr_at(step);
    let wd = cfg.weight_decay;
    let mut gs = 1.0;
    if let Some(cap) = cfg.max_grad_norm {
        let norm = params.iter().map(|p| p.gradient.data().iter().map(|g| g * g).sum::<f64>()).sum::<f64>().sqrt();
        if norm > cap {
            gs = cap / norm;
        }
    }
    for p in params.iter_mut() {
        for (v, g) in p.value.data_mut().iter_mut().zip(p.gradient.data()) {
            *v -= lr * (gs * g + wd * *v);
        }
        p.zero_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64, g: f64) -> Parameter {
        let mut p = Parameter::new("w", Tensor::scalar(v)).unwrap();
        p.gradient = Tensor::scalar(g);
        p
    }

    #[test]
    fn plain_step() {
        let mut ps = vec![scalar_param(1.0, 0.5)];
        let cfg = SgdConfig { learning_rate: 0.1, decay_per_step: 1.0, weight_decay: 0.0, max_grad_norm: None };
        sgd_step(&mut ps, &cfg, 0).unwrap();
        assert!((ps[0].value.item() - 0.95).abs() < 1e-15);
        assert_eq!(ps[0].gradient.item(), 0.0);
    }

    #[test]
    fn decayed_learning_rate() {
        let cfg = SgdConfig { learning_rate: 0.1, decay_per_step: 0.997, weight_decay: 0.0, max_grad_norm: None };
        assert!((cfg.lr_at(1) - 0.0997).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_only() {
        let mut ps = vec![scalar_param(1.0, 0.0)];
        let cfg = SgdConfig { learning_rate: 0.1, decay_per_step: 1.0, weight_decay: 1e-3, max_grad_norm: None };
        sgd_step(&mut ps, &cfg, 0).unwrap();
        assert!((ps[0].value.item() - 0.9999).abs() < 1e-15);
    }

    #[test]
    fn clipping_rescales_global_norm() {
        let mut ps = vec![scalar_param(0.0, 3.0), scalar_param(0.0, 4.0)];
        let cfg = SgdConfig { learning_rate: 1.0, decay_per_step: 1.0, weight_decay: 0.0, max_grad_norm: Some(1.0) };
        sgd_step(&mut ps, &cfg, 0).unwrap();
        assert!((ps[0].value.item() + 0.6).abs() < 1e-15);
        assert!((ps[1].value.item() + 0.8).abs() < 1e-15);
        let mut small = vec![scalar_param(1.0, 0.5)];
        let loose = SgdConfig { max_grad_norm: Some(10.0), ..cfg };
        sgd_step(&mut small, &loose, 0).unwrap();
        assert_eq!(small[0].value.item(), 0.5);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut ps = vec![scalar_param(0.3, 0.0), scalar_param(-2.5, 0.0)];
        let before = ps.clone();
        let cfg = SgdConfig { learning_rate: 0.1, decay_per_step: 0.997, weight_decay: 0.0, max_grad_norm: None };
        sgd_step(&mut ps, &cfg, 7).unwrap();
        assert_eq!(ps, before);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut ps = vec![scalar_param(1.0, f64::NAN)];
        let err = sgd_step(&mut ps, &SgdConfig::default(), 4).unwrap_err();
        assert!(matches!(err, AnydError::Numeric { iteration: 4, .. }));
        assert_eq!(ps[0].value.item(), 1.0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::scalar(1.0)).unwrap();
        assert!(store.add("a", Tensor::scalar(2.0)).is_err());
        assert!(Parameter::new("", Tensor::scalar(0.0)).is_err());
    }
}
