use std::collections::HashMap;

use super::{Gradients, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    grad: Vec<T>,
    trainable: bool,
    touched: bool,
}

/// Named parameters in insertion order with additive gradient accumulators.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T = f32> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, usize>,
}

/// Tape leaves for every parameter of one store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        let grad = vec![T::zero(); value.numel()];
        self.entries.push(Entry {
            name,
            value,
            grad,
            trainable,
            touched: false,
        });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[T] {
        &self.entries[id.0].grad
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn freeze_all(&mut self) {
        for e in &mut self.entries {
            e.trainable = false;
        }
    }

    /// Overwrite a parameter value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_value",
                format!("`{}` is {:?}, got {:?}", e.name, e.value.shape(), value.shape()),
            ));
        }
        e.value = value;
        Ok(())
    }

    pub(crate) fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub(crate) fn grad_parts(&mut self, id: ParamId) -> (&mut Tensor<T>, &mut Vec<T>, bool, bool) {
        let e = &mut self.entries[id.0];
        (&mut e.value, &mut e.grad, e.trainable, e.touched)
    }

    pub(crate) fn clear_grad(&mut self, id: ParamId) {
        let e = &mut self.entries[id.0];
        e.grad.iter_mut().for_each(|g| *g = T::zero());
        e.touched = false;
    }

    /// Create one tape leaf per parameter. Frozen parameters become
    /// constants, so no gradient is ever computed for them.
    pub fn bind(&self, tape: &Tape<T>) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.leaf(e.value.clone(), e.trainable))
            .collect();
        Bound { vars }
    }

    /// Add the gradients of a finished backward pass into the accumulators.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients<T>) {
        for (e, &v) in self.entries.iter_mut().zip(&bound.vars) {
            if !e.trainable {
                continue;
            }
            e.touched = true;
            if let Some(g) = grads.get(v) {
                for (acc, x) in e.grad.iter_mut().zip(g) {
                    *acc += *x;
                }
            }
        }
    }

    /// Global L2 norm of trainable gradients.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .flat_map(|e| e.grad.iter())
            .map(|g| {
                let g = g.as_f64();
                g * g
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale trainable gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = T::of(max_norm / norm);
            for e in self.entries.iter_mut().filter(|e| e.trainable) {
                e.grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        norm
    }

    /// Iterate `(name, value)` pairs in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Same names and values with a different element type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            out.insert(e.name.clone(), e.value.cast(), e.trainable)
                .expect("names are unique");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", Tensor::zeros(&[2]), true).unwrap();
        assert!(matches!(
            s.insert("w", Tensor::zeros(&[2]), true),
            Err(Error::DuplicateParam(_))
        ));
    }

    #[test]
    fn frozen_params_bind_as_constants() {
        let mut s = ParamStore::<f64>::new();
        let w = s.insert("w", Tensor::from_vec(vec![1.0, 2.0]), false).unwrap();
        let tape = Tape::new();
        let b = s.bind(&tape);
        let y = tape.sum(b.var(w));
        let g = tape.backward(y).unwrap();
        assert!(g.get(b.var(w)).is_none());
        s.accumulate(&b, &g);
        assert_eq!(s.grad(w), &[0.0, 0.0]);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut s = ParamStore::<f64>::new();
        let w = s.insert("w", Tensor::from_vec(vec![0.0, 0.0]), true).unwrap();
        s.entries[w.0].grad = vec![3.0, 4.0];
        let before = s.clip_grad_norm(1.0);
        assert_eq!(before, 5.0);
        assert!((s.grad_norm() - 1.0).abs() < 1e-12);
    }
}
