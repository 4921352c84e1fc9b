//! Dense `f64` tensors with tape-based reverse-mode differentiation.

pub mod kernels;
mod tape;
mod tensor;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use tape::{Elementwise, Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Index of a named parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Accumulates gradients into each tensor's `grad`.
    pub fn set_grads(&mut self, grads: ParamGrads) {
        for (t, g) in self.tensors.iter_mut().zip(grads.0) {
            let Some(g) = g else { continue };
            match &mut t.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    /// Replaces all values with those of `other`, which must have the same
    /// names and shapes.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.names != self.names {
            return Err(Error::Contract("parameter sets differ in names".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::Dimension(format!(
                    "parameter shape {:?} vs {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// Per-parameter gradients from one backward pass; `None` for parameters
/// that did not take part in the loss.
#[derive(Debug, Default)]
pub struct ParamGrads(pub Vec<Option<Vec<f64>>>);

/// A tape plus lazy binding of store parameters to tape leaves, so a
/// parameter used many times in one forward pass is recorded once.
pub struct Scope<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
    track: bool,
}

impl<'p> Scope<'p> {
    /// `track = false` records parameters as constants (inference mode).
    pub fn new(params: &'p ParamStore, track: bool) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            track,
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let t = self.params.get(id);
        let v = if self.track {
            self.tape.leaf(t)?
        } else {
            self.tape.constant(t.shape(), t.data().to_vec())?
        };
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    pub fn backward(mut self, loss: Var) -> Result<ParamGrads> {
        let mut grads = self.tape.backward(loss)?;
        Ok(ParamGrads(
            self.bound
                .iter()
                .map(|b| b.and_then(|v| grads.take(v)))
                .collect(),
        ))
    }
}
