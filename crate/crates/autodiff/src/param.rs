use std::collections::HashMap;

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named trainable tensors together with their accumulated gradients.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

/// The graph nodes a [`ParamStore`] was bound to for one step.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
    trainable: bool,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), grads: Vec::new(), index: HashMap::new() }
    }

    /// Registers a tensor. Panics on a duplicate name.
    pub fn add(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter name {name}");
        let id = self.values.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub(crate) fn split_mut(&mut self) -> (&mut [Tensor<T>], &[Tensor<T>]) {
        (&mut self.values, &self.grads)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Binds every parameter as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Binding {
        Binding { vars: self.values.iter().map(|v| g.param(v.clone())).collect(), trainable: true }
    }

    /// Binds every parameter as a constant: values are shared, but nothing
    /// computed from this binding sends gradient into the store.
    pub fn bind_detached(&self, g: &mut Graph<T>) -> Binding {
        Binding { vars: self.values.iter().map(|v| g.constant(v.clone())).collect(), trainable: false }
    }

    /// Adds the graph gradients of a trainable binding into the store.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, binding: &Binding) {
        if !binding.trainable {
            return;
        }
        for (i, &v) in binding.vars.iter().enumerate() {
            if let Some(gr) = g.grad(v) {
                self.grads[i].add_assign(gr);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(T::zero()));
    }

    pub fn grad_sq_norm(&self) -> f64 {
        self.grads.iter().map(|g| g.sq_norm().as_f64()).sum()
    }

    /// Order-sensitive FNV-1a hash over names and raw values.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (n, v) in self.names.iter().zip(&self.values) {
            feed(n.as_bytes());
            for x in v.data() {
                feed(&x.as_f64().to_le_bytes());
            }
        }
        h
    }

    /// `(name, tensor)` pairs in registration order.
    pub fn named(&self) -> Vec<(&str, &Tensor<T>)> {
        self.names.iter().map(|n| n.as_str()).zip(&self.values).collect()
    }

    /// Overwrites parameters from named tensors. Every stored parameter must
    /// be present with a matching shape; names unknown to the store are an
    /// error.
    pub fn load_named<U: Real>(&mut self, tensors: &[(String, Tensor<U>)]) -> Result<()> {
        let unknown: Vec<String> =
            tensors.iter().filter(|(n, _)| !self.index.contains_key(n)).map(|(n, _)| n.clone()).collect();
        if !unknown.is_empty() {
            return Err(AutodiffError::UnknownTensor { unknown, known: self.names.clone() });
        }
        let present: std::collections::HashSet<&str> = tensors.iter().map(|(n, _)| n.as_str()).collect();
        let missing: Vec<String> = self.names.iter().filter(|n| !present.contains(n.as_str())).cloned().collect();
        if !missing.is_empty() {
            return Err(AutodiffError::MissingTensor(missing));
        }
        for (name, t) in tensors {
            let id = self.index[name];
            if t.shape() != self.values[id].shape() {
                return Err(AutodiffError::Shape(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    self.values[id].shape()
                )));
            }
            self.values[id] = t.cast();
        }
        Ok(())
    }
}
