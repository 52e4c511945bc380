//! Named, ordered learnable tensors and their binding onto a tape.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    FanIn(usize),
    Zeros,
}

/// Declared shape and initializer of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Deterministic initial value. Each tensor draws from its own stream
    /// keyed by `(seed, name)`, so adding or removing other tensors never
    /// changes this one.
    pub fn initial_value<F: Scalar>(&self, seed: u64) -> Tensor<F> {
        match self.init {
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::FanIn(fan_in) => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(&self.name));
                Tensor::uniform(&self.shape, -bound, bound, &mut rng)
            }
        }
    }
}

/// FNV-1a; stable across platforms and releases.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub momentum: Tensor<F>,
}

/// Ordered collection of named tensors with per-tensor momentum buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<F = f32> {
    entries: Vec<ParamEntry<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> Default for Parameters<F> {
    fn default() -> Self {
        Parameters {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<F: Scalar> Parameters<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_specs(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut p = Self::new();
        for s in specs {
            p.insert(&s.name, s.initial_value(seed))?;
        }
        Ok(p)
    }

    pub fn insert(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            momentum: Tensor::zeros(value.shape()),
            value,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<F>] {
        &mut self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.index.get(name).map(|&i| &mut self.entries[i].value)
    }

    /// Keep only the entries for which `keep` returns true, preserving order.
    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.entries.retain(|e| keep(&e.name));
        self.index = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
    }

    pub fn cast<G: Scalar>(&self) -> Parameters<G> {
        Parameters {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    momentum: e.momentum.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Register every tensor on `tape`, as differentiable leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind<'t>(&self, tape: &'t Tape<F>, trainable: bool) -> Bound<'t, F> {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if trainable {
                    tape.param(e.value.clone())
                } else {
                    tape.constant(e.value.clone())
                }
            })
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }
}

/// Parameters registered on a tape, addressable by name.
pub struct Bound<'t, F: Scalar> {
    vars: Vec<Var<'t, F>>,
    index: HashMap<String, usize>,
}

impl<'t, F: Scalar> Bound<'t, F> {
    /// Address already registered vars by name, `names[i]` for `vars[i]`.
    pub fn from_vars(names: &[&str], vars: Vec<Var<'t, F>>) -> Result<Self> {
        if names.len() != vars.len() {
            return Err(Error::config(format!("{} names for {} vars", names.len(), vars.len())));
        }
        let mut index = HashMap::new();
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.to_string(), i).is_some() {
                return Err(Error::config(format!("duplicate parameter name {n}")));
            }
        }
        Ok(Bound { vars, index })
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, F>> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::config(format!("missing parameter {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Vars in parameter order.
    pub fn vars(&self) -> &[Var<'t, F>] {
        &self.vars
    }

    pub fn scope(&self, prefix: &str) -> Scope<'_, 't, F> {
        Scope {
            bound: self,
            prefix: prefix.to_string(),
        }
    }
}

/// Name-prefixed view of a [`Bound`].
pub struct Scope<'a, 't, F: Scalar> {
    bound: &'a Bound<'t, F>,
    prefix: String,
}

impl<'t, F: Scalar> Scope<'_, 't, F> {
    pub fn get(&self, suffix: &str) -> Result<Var<'t, F>> {
        self.bound.get(&join(&self.prefix, suffix))
    }

    pub fn has(&self, suffix: &str) -> bool {
        self.bound.has(&join(&self.prefix, suffix))
    }
}

pub fn join(prefix: &str, suffix: &str) -> String {
    if prefix.is_empty() {
        suffix.to_string()
    } else {
        format!("{prefix}.{suffix}")
    }
}
