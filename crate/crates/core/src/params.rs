//! Named parameter storage and the per-pass binding context.

use indexmap::IndexMap;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{batch_norm, BatchNormState, Mode};
use crate::real::Real;
use crate::tensor::Tensor;

/// Trainable tensors plus batch-norm running statistics, both keyed by
/// dotted names in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: IndexMap<String, Tensor<T>>,
    norms: IndexMap<String, BatchNormState<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: IndexMap::new(),
            norms: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter {name}")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    /// Registers `{prefix}.gamma`, `{prefix}.beta` and the running statistics.
    pub fn insert_norm(&mut self, prefix: &str, channels: usize) -> Result<()> {
        self.insert(format!("{prefix}.gamma"), Tensor::ones(vec![channels]))?;
        self.insert(format!("{prefix}.beta"), Tensor::zeros(vec![channels]))?;
        if self.norms.contains_key(prefix) {
            return Err(Error::config(format!("duplicate norm {prefix}")));
        }
        self.norms.insert(prefix.to_string(), BatchNormState::new(channels));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))
    }

    pub fn norm(&self, prefix: &str) -> Result<&BatchNormState<T>> {
        self.norms
            .get(prefix)
            .ok_or_else(|| Error::config(format!("unknown norm {prefix}")))
    }

    pub fn norm_mut(&mut self, prefix: &str) -> Result<&mut BatchNormState<T>> {
        self.norms
            .get_mut(prefix)
            .ok_or_else(|| Error::config(format!("unknown norm {prefix}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn norms(&self) -> impl Iterator<Item = (&str, &BatchNormState<T>)> {
        self.norms.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn norms_mut(&mut self) -> impl Iterator<Item = (&str, &mut BatchNormState<T>)> {
        self.norms.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count over trainable tensors.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Scalar count over tensors whose name starts with `prefix` and ends
    /// with `suffix`.
    pub fn count_matching(&self, prefix: &str, suffix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix) && k.ends_with(suffix))
            .map(|(_, v)| v.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            norms: self
                .norms
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        BatchNormState {
                            running_mean: s.running_mean.iter().map(|v| U::lit(v.as_f64())).collect(),
                            running_var: s.running_var.iter().map(|v| U::lit(v.as_f64())).collect(),
                            momentum: U::lit(s.momentum.as_f64()),
                            eps: U::lit(s.eps.as_f64()),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// One forward pass: the tape, the store it reads from, and the lazily
/// created leaf for each parameter touched.
pub struct Ctx<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a mut ParamStore<T>,
    pub mode: Mode,
    /// Skip batch norm entirely (identity). Test hook.
    pub bypass_norm: bool,
    bound: IndexMap<String, Var>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a mut ParamStore<T>, mode: Mode) -> Self {
        Ctx {
            tape,
            store,
            mode,
            bypass_norm: false,
            bound: IndexMap::new(),
        }
    }

    /// Use `v` for parameter `name` instead of creating a leaf from the store.
    pub fn bind(&mut self, name: &str, v: Var) -> Result<()> {
        if self.tape.shape(v) != self.store.get(name)?.shape() {
            return Err(Error::shape(format!(
                "binding {name}: {:?} vs stored {:?}",
                self.tape.shape(v),
                self.store.get(name)?.shape()
            )));
        }
        self.bound.insert(name.to_string(), v);
        Ok(())
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let v = self.tape.param(self.store.get(name)?.clone());
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        if self.bypass_norm {
            return Ok(x);
        }
        let g = self.param(&format!("{prefix}.gamma"))?;
        let b = self.param(&format!("{prefix}.beta"))?;
        let state = self.store.norm_mut(prefix)?;
        batch_norm(self.tape, x, g, b, state, self.mode)
    }

    /// Parameter name → leaf for everything touched so far.
    pub fn bindings(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradient per touched parameter; untouched parameters are absent.
    pub fn collect_grads(&self, grads: &Gradients<T>) -> IndexMap<String, Tensor<T>> {
        self.bound
            .iter()
            .filter_map(|(k, &v)| grads.get(v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}
