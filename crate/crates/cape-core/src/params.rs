//! Named parameter storage and its binding onto a tape.

use std::collections::BTreeMap;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{CoreError, Result};

/// All learnable tensors of a model, keyed by stable names.
///
/// Iteration order is the sorted name order everywhere (checkpointing,
/// optimizer steps, gradient checks), which keeps runs reproducible.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(
            !self.entries.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.entries.insert(name, tensor.with_grad());
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn coordinate_count(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn zero_grads(&mut self) {
        for t in self.entries.values_mut() {
            t.zero_grad();
        }
    }

    /// Add a collected gradient map into the tensors' grad slots.
    pub fn accumulate_grads(&mut self, grads: &BTreeMap<String, Vec<f64>>) {
        for (name, g) in grads {
            self.entries
                .get_mut(name)
                .unwrap_or_else(|| panic!("unknown parameter {name}"))
                .accumulate_grad(g);
        }
    }
}

enum Source<'a> {
    Store {
        params: &'a ParamStore,
        trainable: bool,
    },
    /// Pre-bound vars (used by gradient checks to differentiate w.r.t.
    /// externally owned leaves).
    Injected(&'a BTreeMap<String, Var>),
}

/// A forward pass under construction: a tape plus lazily bound parameters.
pub struct Net<'a> {
    pub tape: Tape,
    source: Source<'a>,
    bound: BTreeMap<String, Var>,
}

impl<'a> Net<'a> {
    pub fn new(params: &'a ParamStore, trainable: bool) -> Self {
        Net {
            tape: Tape::new(),
            source: Source::Store { params, trainable },
            bound: BTreeMap::new(),
        }
    }

    pub fn from_vars(tape: Tape, vars: &'a BTreeMap<String, Var>) -> Self {
        Net {
            tape,
            source: Source::Injected(vars),
            bound: BTreeMap::new(),
        }
    }

    /// Var for a named parameter, registering it on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let var = match &self.source {
            Source::Store { params, trainable } => {
                if !params.contains(name) {
                    return Err(CoreError::contract(format!("unknown parameter {name}")));
                }
                let mut t = params.get(name).clone();
                t.requires_grad = *trainable;
                self.tape.leaf(&t)
            }
            Source::Injected(vars) => *vars
                .get(name)
                .ok_or_else(|| CoreError::contract(format!("unknown parameter {name}")))?,
        };
        self.bound.insert(name.to_string(), var);
        Ok(var)
    }

    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    /// Accumulated tape gradients of every bound parameter.
    pub fn collect_grads(&self) -> BTreeMap<String, Vec<f64>> {
        self.bound
            .iter()
            .filter_map(|(name, var)| {
                self.tape.grad(*var).map(|g| (name.clone(), g.to_vec()))
            })
            .collect()
    }
}
