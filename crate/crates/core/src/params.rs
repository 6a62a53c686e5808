//! Named learnable tensors, grouped by which optimizer owns them.

use std::collections::HashMap;

use crate::autodiff::{NodeId, Tape};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Which of the three optimizers updates a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Network,
    Grid,
    Camera,
}

pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    groups: Vec<ParamGroup>,
    /// Parameters excluded from updates (schedule gates, holdout freeze).
    frozen: Vec<bool>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            groups: Vec::new(),
            frozen: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>, group: ParamGroup) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter `{}`", name);
        let id = self.values.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.groups.push(group);
        self.frozen.push(false);
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    /// Register every parameter on a fresh tape; returns the node ids in
    /// parameter order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Binding {
        // frozen parameters go on as constants, which prunes their whole
        // backward subgraph (pose chains under freeze_poses, faded multiplex
        // members, the field during the holdout protocol)
        let nodes = self
            .values
            .iter()
            .zip(&self.frozen)
            .map(|(v, &fr)| {
                if fr {
                    tape.constant(v.clone())
                } else {
                    tape.param(v.clone())
                }
            })
            .collect();
        Binding { nodes }
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape node ids for every parameter of a store, in parameter order.
pub struct Binding {
    nodes: Vec<NodeId>,
}

impl Binding {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }
}
