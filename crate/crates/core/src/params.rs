//! Named parameter registry and the per-forward binding session.

use std::collections::BTreeMap;
use std::fmt;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Conv,
    Bn,
    Head,
    Transformer,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [ParamGroup::Conv, ParamGroup::Bn, ParamGroup::Head, ParamGroup::Transformer];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Conv => "conv",
            ParamGroup::Bn => "bn",
            ParamGroup::Head => "head",
            ParamGroup::Transformer => "transformer",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<E> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<E>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<E = f32> {
    entries: Vec<ParamEntry<E>>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<E>) -> ParamId {
        let name = name.into();
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, group, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry<E> {
        &self.entries[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.entries[id.0].value
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<E>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn count(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    group: e.group,
                    value: e.value.cast(),
                })
                .collect(),
        }
    }

    /// Hex SHA-256 over names, shapes and f32 bit patterns of one group.
    pub fn group_hash(&self, group: ParamGroup) -> String {
        let mut h = Sha256::new();
        for e in self.entries.iter().filter(|e| e.group == group) {
            h.update(e.name.as_bytes());
            for d in e.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                h.update((v.f64() as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn group_hashes(&self) -> BTreeMap<ParamGroup, String> {
        ParamGroup::ALL.iter().map(|&g| (g, self.group_hash(g))).collect()
    }
}

impl ParamStore<f32> {
    pub fn write_into(&self, c: &mut Container) {
        for e in &self.entries {
            c.push(format!("param/{}/{}", e.group, e.name), e.value.clone());
        }
    }

    /// Overwrites every registered parameter from `c`, checking shapes.
    pub fn read_from(&mut self, c: &Container) -> Result<()> {
        for e in &mut self.entries {
            let key = format!("param/{}/{}", e.group, e.name);
            let t = c
                .get(&key)
                .ok_or_else(|| Error::State(format!("checkpoint lacks {key}")))?;
            if t.shape() != e.value.shape() {
                return Err(Error::shape("checkpoint", t.shape(), e.value.shape()));
            }
            e.value = t.clone();
        }
        Ok(())
    }
}

/// Tensor of i.i.d. `N(0, std^2)` draws.
pub fn normal_tensor(shape: impl Into<Vec<usize>>, std: f64, rng: &mut StreamRng) -> Tensor<f32> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng) as f32)
}

/// Binds store parameters into one graph. Parameters in `trainable` groups
/// become differentiable leaves; all others are constants.
pub struct Session<'a, E: Element> {
    pub graph: Graph<E>,
    store: &'a ParamStore<E>,
    bound: Vec<Option<Var>>,
    trainable: Vec<ParamGroup>,
    dropout: Option<&'a mut StreamRng>,
}

impl<'a, E: Element> Session<'a, E> {
    pub fn new(store: &'a ParamStore<E>, trainable: &[ParamGroup]) -> Self {
        Session {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            trainable: trainable.to_vec(),
            dropout: None,
        }
    }

    /// Session that extends an existing graph instead of a fresh one.
    pub fn with_graph(store: &'a ParamStore<E>, trainable: &[ParamGroup], graph: Graph<E>) -> Self {
        Session {
            graph,
            ..Session::new(store, trainable)
        }
    }

    /// Uses `v` for parameter `id` instead of the stored value.
    pub fn bind(&mut self, id: ParamId, v: Var) -> Result<()> {
        let expect = self.store.get(id).value.shape();
        if self.graph.shape(v) != expect {
            return Err(Error::shape("bind", self.graph.shape(v), expect));
        }
        self.bound[id.0] = Some(v);
        Ok(())
    }

    /// Enables dropout, drawing masks from `rng`.
    pub fn with_dropout(mut self, rng: &'a mut StreamRng) -> Self {
        self.dropout = Some(rng);
        self
    }

    pub fn dropout_enabled(&self) -> bool {
        self.dropout.is_some()
    }

    /// Inverted dropout when enabled, identity otherwise.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        self.graph.dropout(x, rate, self.dropout.as_deref_mut())
    }

    pub fn store(&self) -> &ParamStore<E> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let e = self.store.get(id);
        let v = self
            .graph
            .leaf(e.value.clone(), self.trainable.contains(&e.group));
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients of every bound trainable parameter after `backward`.
    pub fn grads(&self) -> Vec<(ParamId, Vec<E>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.graph.grad(v).map(|g| (ParamId(i), g.to_vec()))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binding_respects_groups() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("a", ParamGroup::Bn, Tensor::ones([2]));
        let b = store.add("b", ParamGroup::Conv, Tensor::ones([2]));
        let mut s = Session::new(&store, &[ParamGroup::Bn]);
        let va = s.param(a);
        assert_eq!(s.param(a), va);
        let vb = s.param(b);
        let y = s.graph.mul(va, vb).unwrap();
        let l = s.graph.sum(y);
        s.graph.backward(l).unwrap();
        let grads = s.grads();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].0, a);
    }

    #[test]
    fn group_hash_tracks_values() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("a", ParamGroup::Bn, Tensor::ones([2]));
        store.add("b", ParamGroup::Conv, Tensor::ones([2]));
        let before = store.group_hashes();
        store.value_mut(a).data_mut()[0] = 2.0;
        let after = store.group_hashes();
        assert_ne!(before[&ParamGroup::Bn], after[&ParamGroup::Bn]);
        assert_eq!(before[&ParamGroup::Conv], after[&ParamGroup::Conv]);
    }

    #[test]
    fn container_roundtrip() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", ParamGroup::Head, Tensor::from_fn([2, 3], |i| i as f32));
        let mut c = Container::new();
        store.write_into(&mut c);
        let mut other = ParamStore::<f32>::new();
        other.add("w", ParamGroup::Head, Tensor::zeros([2, 3]));
        other.read_from(&c).unwrap();
        assert_eq!(other, store);
    }
}
