//! Named parameter storage and its binding into a [`Graph`].

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::substream;

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors.
///
/// Every mutation bumps `generation`, which incremental decoder caches
/// record so a cache built against older weights is rejected.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor<T>>>,
    index: HashMap<String, usize>,
    generation: u64,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
            generation: next_generation(),
        }
    }

    pub fn add(&mut self, name: &str, t: Tensor<T>) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(Arc::new(t));
        self.generation = next_generation();
        ParamId(self.names.len() - 1)
    }

    /// Uniform init in `[-bound, bound]` from the stream `init/<name>`.
    pub fn add_uniform(&mut self, seed: u64, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let mut rng = substream(seed, &format!("init/{name}"));
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(rng.gen_range(-bound..=bound)))
            .collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn add_constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.add(name, Tensor::full(shape, T::lit(value)))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t.as_ref()))
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        self.generation = next_generation();
        Arc::make_mut(&mut self.tensors[id.0])
    }

    pub fn set(&mut self, id: ParamId, t: Tensor<T>) -> Result<()> {
        if t.shape() != self.tensors[id.0].shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {} expects shape {:?}, got {:?}",
                self.names[id.0],
                self.tensors[id.0].shape(),
                t.shape()
            )));
        }
        self.tensors[id.0] = Arc::new(t);
        self.generation = next_generation();
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Inserts every parameter into `g`, tracked or as constants.
    pub fn bind(&self, g: &mut Graph<T>, tracked: bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if tracked {
                    g.param_shared(Arc::clone(t))
                } else {
                    g.constant_shared(Arc::clone(t))
                }
            })
            .collect();
        ParamVars {
            vars,
            generation: self.generation,
        }
    }
}

/// Graph handles for every parameter of a store, in store order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<Var>,
    generation: u64,
}

impl ParamVars {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Substitutes a different graph node for one parameter.
    pub fn set(&mut self, id: ParamId, v: Var) {
        self.vars[id.0] = v;
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars.iter().enumerate().map(|(i, &v)| (ParamId(i), v))
    }
}
