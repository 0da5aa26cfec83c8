//! Named parameter storage and the binding of parameters into a graph.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
    /// Glorot uniform with the given fan-in / fan-out.
    Xavier { fan_in: usize, fan_out: usize },
}

/// Shape and initializer of one named parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.into(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn materialize(&self, rng: &mut ChaCha8Rng) -> Tensor {
        match self.init {
            Init::Zeros => Tensor::zeros(self.shape.clone()),
            Init::Const(c) => Tensor::full(self.shape.clone(), c),
            Init::Normal(std) => Tensor::randn(self.shape.clone(), std, rng),
            Init::Xavier { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::uniform(self.shape.clone(), bound, rng)
            }
        }
    }
}

/// Affine weight `[fan_in, fan_out]` and bias `[fan_out]` specs.
pub fn linear_specs(prefix: &str, fan_in: usize, fan_out: usize, zero: bool) -> [ParamSpec; 2] {
    let init = if zero {
        Init::Zeros
    } else {
        Init::Xavier { fan_in, fan_out }
    };
    [
        ParamSpec::new(format!("{prefix}.weight"), [fan_in, fan_out], init),
        ParamSpec::new(format!("{prefix}.bias"), [fan_out], Init::Zeros),
    ]
}

pub fn norm_specs(prefix: &str, dim: usize) -> [ParamSpec; 2] {
    [
        ParamSpec::new(format!("{prefix}.gain"), [dim], Init::Const(1.0)),
        ParamSpec::new(format!("{prefix}.bias"), [dim], Init::Zeros),
    ]
}

/// All learnable tensors of a model, keyed by unique dotted path.
/// Insertion order is stable and defines checkpoint order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Materializes every spec from one seeded stream, in spec order.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self::new();
        for spec in specs {
            store.insert(spec.name.clone(), spec.materialize(&mut rng))?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: String, value: Tensor) -> Result<()> {
        if self.tensors.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::ParamShape {
                name: name.to_string(),
                expected: slot.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Checks that names and shapes agree exactly with `specs`.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            let t = self.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::ParamShape {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        if self.len() != specs.len() {
            let extra = self
                .tensors
                .keys()
                .find(|k| !specs.iter().any(|s| &s.name == *k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::UnknownParam(extra));
        }
        Ok(())
    }
}

/// A forward-pass context: the graph plus lazily bound parameter leaves.
pub struct Ctx<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: HashMap<&'a str, Var>,
    trainable: bool,
}

impl<'a> Ctx<'a> {
    /// `trainable` controls whether bound parameters accumulate gradients.
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: HashMap::new(),
            trainable,
        }
    }

    /// A context over an existing graph whose leaves for some parameters are
    /// already created. Other parameters bind as trainable on first use.
    pub fn preset(store: &'a ParamStore, g: Graph, bound: impl IntoIterator<Item = (&'a str, Var)>) -> Self {
        Self {
            g,
            store,
            bound: bound.into_iter().collect(),
            trainable: true,
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// The graph leaf for parameter `name`, bound on first use.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let (key, t) = self
            .store
            .tensors
            .get_key_value(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let v = if self.trainable {
            self.g.param(t.clone())
        } else {
            self.g.input(t.clone())
        };
        self.bound.insert(key.as_str(), v);
        Ok(v)
    }

    /// Gradient per bound parameter, in store order. Unbound or unreached
    /// parameters are omitted.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<(String, Tensor)> {
        self.store
            .tensors
            .keys()
            .filter_map(|k| {
                let v = *self.bound.get(k.as_str())?;
                grads.take(v).map(|g| (k.clone(), g))
            })
            .collect()
    }
}
