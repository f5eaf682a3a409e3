use std::collections::HashMap;
use std::sync::Arc;

use crate::ad::{Graph, NodeId, Tensor};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamRef(usize);

impl ParamRef {
    /// Position in the owning store.
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
///
/// Tensors are reference counted so binding them into a graph does not copy
/// data; updates go through [`Arc::make_mut`].
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on a duplicate name, which is a
    /// construction bug.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamRef {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamRef(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, r: ParamRef) -> &Tensor {
        &self.values[r.0]
    }

    pub fn get_mut(&mut self, r: ParamRef) -> &mut Tensor {
        Arc::make_mut(&mut self.values[r.0])
    }

    pub fn lookup(&self, name: &str) -> Option<ParamRef> {
        self.index.get(name).copied().map(ParamRef)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.lookup(name).map(|r| self.get(r))
    }

    pub fn name(&self, r: ParamRef) -> &str {
        &self.names[r.0]
    }

    pub fn refs(&self) -> impl Iterator<Item = ParamRef> {
        (0..self.values.len()).map(ParamRef)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| &**v))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Binds every tensor into `g`: as trainable parameters when
    /// `trainable`, otherwise as constants (cheaper backward passes when only
    /// input derivatives are needed).
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let ids = self
            .names
            .iter()
            .zip(&self.values)
            .map(|(name, v)| if trainable { g.param(name, v.clone()) } else { g.constant_shared(v.clone()) })
            .collect();
        Bound(ids)
    }
}

/// Graph nodes of a bound [`ParamStore`].
pub struct Bound(Vec<NodeId>);

impl Bound {
    pub fn get(&self, r: ParamRef) -> NodeId {
        self.0[r.0]
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.0
    }
}
