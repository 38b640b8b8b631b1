//! Named parameter storage and initialization.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Real, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// All trainable tensors of a model, addressable by id or by dotted name.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor under `name`. Names must be unique.
    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| (ParamId(i), self.names[i].as_str(), v))
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Registers freshly initialized parameters under a name prefix.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: String::new(),
        }
    }

    /// Run `f` with `name` appended to the prefix.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        let saved = self.prefix.clone();
        if self.prefix.is_empty() {
            self.prefix = name.to_string();
        } else {
            self.prefix = format!("{}.{}", self.prefix, name);
        }
        let out = f(self);
        self.prefix = saved;
        out
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// Uniform(-bound, bound) values.
    pub fn uniform(&mut self, name: &str, shape: Shape, bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(self.rng.random_range(-bound..=bound)))
            .collect();
        let full = self.full_name(name);
        self.store.insert(&full, Tensor::from_vec(shape, data))
    }

    pub fn constant(&mut self, name: &str, shape: Shape, value: f64) -> ParamId {
        let full = self.full_name(name);
        self.store
            .insert(&full, Tensor::full(shape, T::from_f64_lossy(value)))
    }
}
