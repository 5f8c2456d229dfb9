use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameters split into frozen and trainable sets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamRegistry {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("parameter `{name}` registered twice")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, trainable });
        Ok(id)
    }

    /// Registers a Gaussian tensor drawn from a stream keyed by `(seed, name)`,
    /// so the value does not depend on what else is registered.
    pub fn register_randn(&mut self, name: &str, shape: &[usize], std: f64, trainable: bool, seed: u64) -> Result<ParamId> {
        let mut rng = crate::seed::stream(seed, &format!("param/{name}"));
        self.register(name, Tensor::randn(shape, std, &mut rng), trainable)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    pub fn frozen_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| !p.trainable).map(|(id, _)| id).collect()
    }

    /// Mutable values of the trainable entries, in `trainable_ids` order.
    pub fn trainable_values_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().filter(|p| p.trainable).map(|p| &mut p.value).collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.params.iter().filter(|p| !p.trainable).map(|p| p.value.len()).sum()
    }

    /// Parameter count of every entry whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params.iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.value.len()).sum()
    }

    /// SHA-256 over names, shapes and bit patterns of the frozen parameters.
    pub fn frozen_checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| !p.trainable) {
            h.update((p.name.len() as u64).to_le_bytes());
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// A graph plus the mapping from registry entries to graph leaves.
///
/// A parameter is bound at most once per session, so every use of the same
/// entry shares one leaf and one accumulated gradient.
pub struct Session<'r> {
    pub graph: Graph,
    registry: &'r ParamRegistry,
    bound: Vec<Option<Var>>,
    track_grads: bool,
}

impl<'r> Session<'r> {
    pub fn new(registry: &'r ParamRegistry, track_grads: bool) -> Self {
        Self { graph: Graph::new(), registry, bound: vec![None; registry.len()], track_grads }
    }

    pub fn registry(&self) -> &'r ParamRegistry {
        self.registry
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.registry.get(id);
        let v = self.graph.leaf(p.value.clone(), self.track_grads && p.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Gradients for every trainable entry, zero-filled when the entry was
    /// never used in this session.
    pub fn trainable_grads(&self) -> Vec<(ParamId, Tensor)> {
        self.registry
            .trainable_ids()
            .into_iter()
            .map(|id| {
                let g = self
                    .bound(id)
                    .and_then(|v| self.graph.grad(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(self.registry.value(id).shape()));
                (id, g)
            })
            .collect()
    }
}
