use std::collections::{BTreeMap, HashMap};

use super::{GradError, Gradients, Graph, NodeId, Tensor};

/// Named parameters in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = t;
            return i;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        self.names.len() - 1
    }

    pub fn id(&self, name: &str) -> Result<usize, GradError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| GradError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, GradError> {
        Ok(&self.tensors[self.id(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, GradError> {
        let i = self.id(name)?;
        Ok(&mut self.tensors[i])
    }

    pub fn by_id(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn by_id_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Copies every parameter of `other` in, keeping `other`'s order for new names.
    pub fn extend_from(&mut self, other: &ParamStore) {
        for (n, t) in other.iter() {
            self.insert(n, t.clone());
        }
    }

    /// Subset whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (n, t) in self.iter().filter(|(n, _)| n.starts_with(prefix)) {
            out.insert(n, t.clone());
        }
        out
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// A graph plus lazy bindings from store parameters to leaf nodes.
pub struct Scope<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: BTreeMap<usize, NodeId>,
}

impl<'a> Scope<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { graph: Graph::new(), store, bound: BTreeMap::new() }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Leaf node for parameter `name`, created on first use.
    pub fn p(&mut self, name: &str) -> Result<NodeId, GradError> {
        let id = self.store.id(name)?;
        if let Some(&n) = self.bound.get(&id) {
            return Ok(n);
        }
        let n = self.graph.param(self.store.by_id(id).clone());
        self.bound.insert(id, n);
        Ok(n)
    }

    /// Store indices of the parameters this scope has touched.
    pub fn bound_params(&self) -> impl Iterator<Item = usize> + '_ {
        self.bound.keys().copied()
    }

    pub fn is_bound(&self, name: &str) -> bool {
        self.store.id(name).map_or(false, |id| self.bound.contains_key(&id))
    }

    /// Gradients of `loss` for every bound parameter.
    pub fn backward(&self, loss: NodeId) -> Result<ParamGrads, GradError> {
        let grads: Gradients = self.graph.backward(loss)?;
        let mut out = ParamGrads::default();
        for (&pid, &node) in &self.bound {
            out.grads.insert(pid, grads.wrt(&self.graph, node));
        }
        Ok(out)
    }
}

/// Per-parameter gradient accumulator keyed by store index.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads {
    grads: BTreeMap<usize, Tensor>,
}

impl ParamGrads {
    pub fn accumulate(&mut self, other: ParamGrads) {
        for (id, g) in other.grads {
            match self.grads.get_mut(&id) {
                Some(t) => t.add_assign(&g),
                None => {
                    self.grads.insert(id, g);
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn get(&self, id: usize) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn by_name<'s>(&'s self, store: &ParamStore, name: &str) -> Option<&'s Tensor> {
        store.id(name).ok().and_then(|i| self.grads.get(&i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|t| t.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Largest absolute entry over parameters whose name starts with `prefix`.
    pub fn max_abs_with_prefix(&self, store: &ParamStore, prefix: &str) -> f64 {
        self.grads
            .iter()
            .filter(|(id, _)| store.name(**id).starts_with(prefix))
            .flat_map(|(_, t)| t.data().iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}
