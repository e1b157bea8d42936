//! Parameter registry shared by layers, the optimizer, and checkpointing.
//!
//! Parameters live outside any tape; each forward pass binds them onto a
//! fresh tape as variables. Entry order is the declaration order and defines
//! the checkpoint payload layout.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::tensor::{Element, Shape, Tape, Tensor};

pub type ParamId = usize;

pub struct ParamEntry<E: Element> {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<E>,
    /// Trainable entries receive gradients and optimizer updates; the rest
    /// (batch-norm running statistics) are updated by their owning layer.
    pub trainable: bool,
}

pub struct Params<E: Element> {
    entries: Vec<ParamEntry<E>>,
}

impl<E: Element> Default for Params<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Params<E> {
    pub fn new() -> Self {
        Params { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Shape, data: Vec<E>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if data.len() != shape.numel() {
            bail!(ShapeMismatch, "param {name}: {} values for shape {}", data.len(), shape);
        }
        if self.entries.iter().any(|e| e.name == name) {
            bail!(InvalidArgument, "duplicate parameter name {name}");
        }
        self.entries.push(ParamEntry { name, shape, data, trainable });
        Ok(self.entries.len() - 1)
    }

    /// Glorot-style uniform init over `[-limit, limit]`,
    /// `limit = sqrt(6 / (fan_in + fan_out))`.
    pub fn add_glorot(
        &mut self,
        name: impl Into<String>,
        shape: Shape,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data: Vec<E> = (0..shape.numel())
            .map(|_| E::from_f64(rng.random_range(-limit..limit)))
            .collect();
        self.add(name, shape, data, true)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: Shape, trainable: bool) -> Result<ParamId> {
        let n = shape.numel();
        self.add(name, shape, vec![E::zero(); n], trainable)
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: Shape, value: E, trainable: bool) -> Result<ParamId> {
        let n = shape.numel();
        self.add(name, shape, vec![value; n], trainable)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<E> {
        &self.entries[id]
    }

    pub fn entries(&self) -> &[ParamEntry<E>] {
        &self.entries
    }

    pub fn data(&self, id: ParamId) -> &[E] {
        &self.entries[id].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut Vec<E> {
        &mut self.entries[id].data
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.entries.len()).filter(|&i| self.entries[i].trainable).collect()
    }

    /// Total trainable element count.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.data.len()).sum()
    }

    /// Bind every trainable entry onto `tape` as a variable.
    pub fn bind(&self, tape: &Tape<E>) -> Result<Bound<E>> {
        let mut tensors = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            if e.trainable {
                tensors.push(Some(tape.var(e.data.clone(), e.shape.clone())?));
            } else {
                tensors.push(None);
            }
        }
        Ok(Bound { tensors })
    }
}

/// Tape-bound views of the trainable parameters for one forward pass.
pub struct Bound<E: Element> {
    tensors: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Bound<E> {
    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        self.tensors[id].as_ref().expect("bound trainable parameter")
    }

    /// Gradients per parameter id after a backward pass (`None` for
    /// non-trainable entries or parameters no gradient reached).
    pub fn grads(&self) -> Vec<Option<Vec<E>>> {
        self.tensors
            .iter()
            .map(|t| t.as_ref().and_then(|t| t.grad()))
            .collect()
    }
}
