//! Named learnable tensors and their per-tape bindings.

use std::ops::Index;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Insertion-ordered set of named learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Record every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.variable(t)).collect())
    }

    /// Bind substitute values laid out like this store's tensors.
    pub fn bind_values(values: &[Tensor], tape: &mut Tape) -> Bound {
        Bound(values.iter().map(|t| tape.variable(t)).collect())
    }

    /// Record every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.constant(t)).collect())
    }

    /// Replace tensor values from another store with identical layout.
    pub fn load_values(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Config(format!(
                "parameter count mismatch: model has {}, source has {}",
                self.len(),
                other.len()
            )));
        }
        for ((name, t), (src_name, src)) in self.names.iter().zip(&mut self.tensors).zip(other) {
            if name != src_name || t.shape() != src.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} {:?} does not match {src_name} {:?}",
                    t.shape(),
                    src.shape()
                )));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// Tape handles for every parameter of a [`ParamStore`], indexed by [`ParamId`].
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Forward-pass context: the tape, the bound parameters, and a log of every
/// attention-weight matrix produced (for inspection).
pub struct Graph<'a> {
    pub tape: &'a mut Tape,
    pub vars: &'a Bound,
    pub attention: Vec<Var>,
}

impl<'a> Graph<'a> {
    pub fn new(tape: &'a mut Tape, vars: &'a Bound) -> Self {
        Graph {
            tape,
            vars,
            attention: Vec::new(),
        }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.vars[id]
    }
}

/// Seeded initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        Tensor::randn(shape, std, &mut self.rng)
    }

    /// `N(0, 1/fan_in)`.
    pub fn fan_in(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        self.normal(shape, 1.0 / (fan_in as f64).sqrt())
    }
}
