//! Named parameter storage and the per-forward binding onto a graph.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ops::Deref;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A named tensor with an optional gradient slot.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub requires_grad: bool,
}

/// All parameters of a model, addressable by id or unique name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, requires_grad: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad: None,
            requires_grad,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `grads` into the gradient slots (accumulating across calls).
    pub fn accumulate(&mut self, grads: Vec<(ParamId, Tensor<T>)>) -> Result<()> {
        for (id, g) in grads {
            let p = &mut self.params[id.0];
            match &mut p.grad {
                Some(existing) => existing.add_assign(&g)?,
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        let p = &mut self.params[id.0];
        if p.value.dims() != value.dims() {
            return Err(Error::shape("set_param", p.value.dims(), value.dims()));
        }
        p.value = value;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(|g| g.cast()),
                    requires_grad: p.requires_grad,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// A graph plus lazy binding of store parameters as leaves.
///
/// Each parameter is copied onto the graph at most once per session.
pub struct Session<'a, T> {
    graph: Graph<T>,
    store: &'a ParamStore<T>,
    bound: RefCell<Vec<Option<Var>>>,
}

impl<T: Scalar> Deref for Session<'_, T> {
    type Target = Graph<T>;

    fn deref(&self) -> &Graph<T> {
        &self.graph
    }
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Session {
            graph: Graph::new(),
            store,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// The graph variable bound to a parameter.
    pub fn p(&self, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = self.graph.leaf(p.value.clone(), p.requires_grad);
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Runs backward and returns gradients of every bound trainable parameter.
    pub fn backward(&self, loss: Var) -> Result<Vec<(ParamId, Tensor<T>)>> {
        let mut grads = self.graph.backward(loss)?;
        let bound = self.bound.borrow();
        let mut out = Vec::new();
        for (i, v) in bound.iter().enumerate() {
            let Some(v) = v else { continue };
            if !self.store.params[i].requires_grad {
                continue;
            }
            let g = grads
                .take(*v)
                .unwrap_or_else(|| Tensor::zeros(self.store.params[i].value.dims()));
            out.push((ParamId(i), g));
        }
        Ok(out)
    }
}
