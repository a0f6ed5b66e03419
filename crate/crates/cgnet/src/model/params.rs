//! Named parameter storage: values, gradient buffers, ADAM moment slots and
//! batch-norm running statistics, in a deterministic insertion order.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::HashMap;

/// How the optimizer treats an entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable, subject to weight decay (conv/affine weights and biases).
    Weight,
    /// Learnable but exempt from weight decay (BN gamma/beta, PReLU slopes).
    Gain,
    /// Not learnable (BN running statistics).
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param<E: Element> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<E>,
    pub grad: Tensor<E>,
    /// ADAM first/second moment; zero-initialized, unused for buffers.
    pub m: Tensor<E>,
    pub v: Tensor<E>,
}

/// Handle into a [`ParamStore`]; stable for the life of the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamStore<E: Element> {
    entries: Vec<Param<E>>,
    index: HashMap<String, usize>,
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<E>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name '{name}'"
        );
        let grad = Tensor::zeros(value.dims()).expect("valid dims");
        let m = grad.clone();
        let v = grad.clone();
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(Param {
            name,
            kind,
            value,
            grad,
            m,
            v,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<E>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<E>> {
        self.entries.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Param<E> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<E> {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<E> {
        &self.entries[id.0].value
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    /// Accumulate `delta` into the entry's gradient buffer.
    pub fn add_grad(&mut self, id: ParamId, delta: &Tensor<E>) {
        let p = &mut self.entries[id.0];
        debug_assert_eq!(p.grad.dims(), delta.dims(), "grad dims for '{}'", p.name);
        for (g, &d) in p.grad.data_mut().iter_mut().zip(delta.data()) {
            *g = *g + d;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.iter_mut() {
            for g in p.grad.data_mut().iter_mut() {
                *g = E::zero();
            }
        }
    }

    /// Learnable scalars (buffers excluded).
    pub fn count_learnable(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.kind != ParamKind::Buffer)
            .map(|p| p.value.len())
            .sum()
    }

    /// Overwrite the value of the named entry; dims must match exactly.
    pub fn load_value(&mut self, name: &str, value: Tensor<E>) -> Result<()> {
        let id = self
            .lookup(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor name '{name}'")))?;
        let p = &mut self.entries[id.0];
        if p.value.dims() != value.dims() {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has dims {:?}, checkpoint holds {:?}",
                p.value.dims(),
                value.dims()
            )));
        }
        p.value = value;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_is_preserved() {
        let mut store = ParamStore::<f32>::new();
        store.insert("b", ParamKind::Weight, Tensor::zeros(&[2]).unwrap());
        store.insert("a", ParamKind::Gain, Tensor::zeros(&[3]).unwrap());
        store.insert("c", ParamKind::Buffer, Tensor::zeros(&[4]).unwrap());
        let names: Vec<_> = store.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["b", "a", "c"]);
        assert_eq!(store.count_learnable(), 5);
    }

    #[test]
    fn grad_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", ParamKind::Weight, Tensor::zeros(&[2]).unwrap());
        let d = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        store.add_grad(id, &d);
        store.add_grad(id, &d);
        assert_eq!(store.get(id).grad.data(), &[2.0, 4.0]);
        store.zero_grads();
        assert_eq!(store.get(id).grad.data(), &[0.0, 0.0]);
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.insert("w", ParamKind::Weight, Tensor::zeros(&[1]).unwrap());
        store.insert("w", ParamKind::Weight, Tensor::zeros(&[1]).unwrap());
    }
}
