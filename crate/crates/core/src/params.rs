use std::collections::BTreeMap;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Standard deviation of the truncated-normal weight initialization.
pub const INIT_STD: f64 = 0.02;

/// Standard deviation of learned token tables (word embeddings, group tokens).
pub const TOKEN_INIT_STD: f64 = 1.0;

/// Learnable parameters keyed by dotted path, e.g. `vision.layer3.attn.wq`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        let prev = self.map.insert(name.clone(), t);
        assert!(prev.is_none(), "parameter {name} registered twice");
    }

    pub fn weight(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut impl Rng) {
        self.insert(name, Tensor::trunc_normal(shape, INIT_STD, rng));
    }

    pub fn tokens(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut impl Rng) {
        self.insert(name, Tensor::trunc_normal(shape, TOKEN_INIT_STD, rng));
    }

    /// `[fan_in, fan_out]` projection matrix with std `1/sqrt(fan_in)`.
    pub fn linear_weight(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut impl Rng) {
        let std = 1.0 / (shape[0].max(1) as f64).sqrt();
        self.insert(name, Tensor::trunc_normal(shape, std, rng));
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, Tensor::ones(shape));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn set(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        match self.map.get_mut(name) {
            Some(slot) if slot.shape() == t.shape() => {
                *slot = t;
                Ok(())
            }
            Some(slot) => Err(Error::dim("set_param", slot.shape(), t.shape())),
            None => Err(Error::Config(format!("unknown parameter {name}"))),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// Registers every parameter on `graph`, as gradient-receiving leaves
    /// when `trainable`, as constants otherwise.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .map
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn to_container(&self, prefix: &str, c: &mut Container) {
        for (k, t) in &self.map {
            c.insert_tensor(format!("{prefix}{k}"), t);
        }
    }

    /// Replaces every parameter with the record `prefix + name` from `c`.
    /// All names must be present with matching shapes.
    pub fn load_from(&mut self, prefix: &str, c: &Container) -> Result<()> {
        for (k, t) in self.map.iter_mut() {
            let key = format!("{prefix}{k}");
            let loaded: Tensor<T> = c
                .tensor(&key)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {key}")))?;
            if loaded.shape() != t.shape() {
                return Err(Error::dim("load_param", t.shape(), loaded.shape()));
            }
            *t = loaded;
        }
        Ok(())
    }
}

/// Graph handles of a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Pairs the names of `store`, in its iteration order, with `vars`.
    pub fn from_vars<T: Scalar>(store: &ParamStore<T>, vars: &[Var]) -> Self {
        assert_eq!(store.len(), vars.len(), "one var per parameter");
        Bound {
            vars: store.names().cloned().zip(vars.iter().copied()).collect(),
        }
    }

    /// Panics on an unknown name: parameter names are fixed by the model
    /// constructor, so a miss is a programming error.
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter {name} not bound"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}
