//! Named parameter tensors with paired gradient slots.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

pub type ParamId = usize;

/// Parameter sets, one per trained component. Names in a [`ParamStore`]
/// are prefixed with `<namespace>.`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Namespace {
    /// Phoneme encoder and decoder.
    Acoustic,
    /// Variational reference encoder.
    Reference,
    /// Embedding-sequence sampler.
    Semantic,
    /// Parse-graph sampler.
    Graph,
    /// Joint projection of the combined sampler.
    Joint,
    /// Duration model.
    Duration,
}

impl Namespace {
    pub const ALL: [Namespace; 6] = [
        Namespace::Acoustic,
        Namespace::Reference,
        Namespace::Semantic,
        Namespace::Graph,
        Namespace::Joint,
        Namespace::Duration,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Namespace::Acoustic => "acoustic",
            Namespace::Reference => "reference",
            Namespace::Semantic => "semantic",
            Namespace::Graph => "graph",
            Namespace::Joint => "joint",
            Namespace::Duration => "duration",
        }
    }

    pub fn of(name: &str) -> Option<Namespace> {
        let head = name.split('.').next()?;
        Namespace::ALL.into_iter().find(|ns| ns.prefix() == head)
    }

    pub fn name(self, local: &str) -> String {
        format!("{}.{local}", self.prefix())
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
}

#[derive(Debug, Clone)]
struct Param {
    name: String,
    value: Tensor,
    grad: Tensor,
}

#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    params: Vec<Param>,
    index: BTreeMap<String, ParamId>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
            index: self.index.clone(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Register with a deterministic initializer; `Uniform` needs [`Self::register_random`].
    pub fn register(&mut self, name: &str, dims: &[usize], init: Init) -> Result<ParamId> {
        let value = match init {
            Init::Zeros => Tensor::zeros(dims),
            Init::Constant(c) => Tensor::filled(dims, c),
            Init::Uniform(_) => {
                return Err(Error::Config(format!(
                    "parameter `{name}`: uniform init needs an rng"
                )))
            }
        };
        self.insert(name, value)
    }

    pub fn register_random<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        dims: &[usize],
        init: Init,
        rng: &mut R,
    ) -> Result<ParamId> {
        match init {
            Init::Uniform(bound) => {
                let n: usize = dims.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
                self.insert(name, Tensor::new(dims.to_vec(), data)?)
            }
            other => self.register(name, dims, other),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let id = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            grad: Tensor::zeros(value.dims()),
            value,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id].grad
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.value(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        0..self.params.len()
    }

    /// Names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    pub fn namespaces(&self) -> Vec<Namespace> {
        let mut out: Vec<Namespace> = self
            .params
            .iter()
            .filter_map(|p| Namespace::of(&p.name))
            .collect();
        out.sort();
        out.dedup();
        out
    }

    /// Add gradients produced by a backward pass over this store.
    pub fn accumulate(&mut self, grads: &crate::autodiff::Gradients) {
        for (store, id, g) in &grads.entries {
            if *store != self.uid {
                continue;
            }
            for (a, b) in self.params[*id].grad.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }

    pub fn scale_grads(&mut self, k: f64) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= k);
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Copy every parameter of `other` in, keeping their names.
    pub fn absorb(&mut self, other: &ParamStore) -> Result<()> {
        for p in &other.params {
            self.insert(&p.name, p.value.clone())?;
        }
        Ok(())
    }

    /// Sub-store of the parameters in the given namespaces.
    pub fn subset(&self, namespaces: &[Namespace]) -> ParamStore {
        let mut out = ParamStore::new();
        for p in &self.params {
            if Namespace::of(&p.name).is_some_and(|ns| namespaces.contains(&ns)) {
                out.insert(&p.name, p.value.clone()).expect("names unique");
            }
        }
        out
    }

    pub fn values_equal(&self, other: &ParamStore) -> bool {
        self.index.len() == other.index.len()
            && self.index.iter().all(|(name, &id)| {
                other
                    .get(name)
                    .is_some_and(|v| v == &self.params[id].value)
            })
    }
}
